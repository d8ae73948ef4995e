use serde::{Deserialize, Serialize};

use crate::error::{Result, SgcnError};

pub type Point = [f64; 2];

/// Ordered pen-down strokes of one character.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<Point>>", into = "Vec<Vec<Point>>")]
pub struct Trajectory {
    strokes: Vec<Vec<Point>>,
}

impl TryFrom<Vec<Vec<Point>>> for Trajectory {
    type Error = SgcnError;

    fn try_from(strokes: Vec<Vec<Point>>) -> Result<Self> {
        Trajectory::new(strokes)
    }
}

impl From<Trajectory> for Vec<Vec<Point>> {
    fn from(t: Trajectory) -> Self {
        t.strokes
    }
}

impl Trajectory {
    /// At least one stroke, no empty stroke, finite coordinates.
    pub fn new(strokes: Vec<Vec<Point>>) -> Result<Self> {
        if strokes.is_empty() || strokes.iter().any(|s| s.is_empty()) {
            return Err(SgcnError::EmptyTrajectory);
        }
        if strokes.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(SgcnError::NonFinite);
        }
        Ok(Trajectory { strokes })
    }

    pub fn strokes(&self) -> &[Vec<Point>] {
        &self.strokes
    }

    pub fn num_points(&self) -> usize {
        self.strokes.iter().map(Vec::len).sum()
    }

    pub fn points(&self) -> impl Iterator<Item = &Point> {
        self.strokes.iter().flatten()
    }

    /// `(min, max)` corners of the bounding box.
    pub fn bounding_box(&self) -> (Point, Point) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in self.points() {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }

    pub fn map_points(&self, f: impl Fn(Point) -> Point) -> Trajectory {
        Trajectory {
            strokes: self
                .strokes
                .iter()
                .map(|s| s.iter().map(|&p| f(p)).collect())
                .collect(),
        }
    }
}

/// Uniform scale and translation so the longest bounding-box side has length
/// 1 and the box is centered at (0.5, 0.5).
pub fn normalize(traj: &Trajectory) -> Trajectory {
    let (lo, hi) = traj.bounding_box();
    let side = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let center = [(lo[0] + hi[0]) * 0.5, (lo[1] + hi[1]) * 0.5];
    if side <= 0.0 {
        return traj.map_points(|_| [0.5, 0.5]);
    }
    traj.map_points(|p| {
        [
            (p[0] - center[0]) / side + 0.5,
            (p[1] - center[1]) / side + 0.5,
        ]
    })
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Re-samples each stroke by arc length at spacing `interval`, keeping the
/// first and last original points.
pub fn resample(traj: &Trajectory, interval: f64) -> Result<Trajectory> {
    if !(interval > 0.0 && interval.is_finite()) {
        return Err(SgcnError::invalid(format!("resampling interval {interval} must be > 0")));
    }
    let strokes = traj
        .strokes()
        .iter()
        .map(|s| resample_stroke(s, interval))
        .collect();
    Ok(Trajectory { strokes })
}

fn resample_stroke(stroke: &[Point], interval: f64) -> Vec<Point> {
    let first = stroke[0];
    let last = stroke[stroke.len() - 1];
    let total: f64 = stroke.windows(2).map(|w| dist(w[0], w[1])).sum();
    if total == 0.0 {
        return vec![first];
    }
    // samples strictly inside (0, total); the endpoint is appended verbatim
    let tol = 1e-9 * interval.max(total);
    let mut out = vec![first];
    let mut k = 1usize;
    let mut start = 0.0;
    for w in stroke.windows(2) {
        let len = dist(w[0], w[1]);
        if len == 0.0 {
            continue;
        }
        loop {
            let target = k as f64 * interval;
            if target > start + len || target >= total - tol {
                break;
            }
            let t = (target - start) / len;
            out.push([
                w[0][0] + t * (w[1][0] - w[0][0]),
                w[0][1] + t * (w[1][1] - w[0][1]),
            ]);
            k += 1;
        }
        start += len;
    }
    out.push(last);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traj(strokes: &[&[Point]]) -> Trajectory {
        Trajectory::new(strokes.iter().map(|s| s.to_vec()).collect()).unwrap()
    }

    fn close(a: &Trajectory, b: &Trajectory, tol: f64) -> bool {
        a.strokes().len() == b.strokes().len()
            && a.points().count() == b.points().count()
            && a.points().zip(b.points()).all(|(p, q)| dist(*p, *q) <= tol)
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(matches!(Trajectory::new(vec![]), Err(SgcnError::EmptyTrajectory)));
        assert!(matches!(Trajectory::new(vec![vec![]]), Err(SgcnError::EmptyTrajectory)));
        assert!(matches!(
            Trajectory::new(vec![vec![[0.0, f64::NAN]]]),
            Err(SgcnError::NonFinite)
        ));
    }

    #[test]
    fn normalize_examples() {
        let t = normalize(&traj(&[&[[0.0, 0.0], [10.0, 5.0]]]));
        assert_eq!(t.strokes()[0], vec![[0.0, 0.25], [1.0, 0.75]]);

        let unit = traj(&[&[[0.0, 0.0], [1.0, 1.0]], &[[0.0, 1.0], [0.5, 0.5]]]);
        assert!(close(&normalize(&unit), &unit, 1e-12));

        let dot = normalize(&traj(&[&[[7.0, -3.0]]]));
        assert_eq!(dot.strokes()[0], vec![[0.5, 0.5]]);
    }

    #[test]
    fn resample_examples() {
        let line = resample(&traj(&[&[[0.0, 0.0], [1.0, 0.0]]]), 0.25).unwrap();
        assert_eq!(line.strokes()[0].len(), 5);
        for (p, x) in line.strokes()[0].iter().zip([0.0, 0.25, 0.5, 0.75, 1.0]) {
            assert!((p[0] - x).abs() < 1e-12 && p[1] == 0.0);
        }

        let l_shape = resample(&traj(&[&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]]]), 0.5).unwrap();
        let want = [[0.0, 0.0], [0.5, 0.0], [1.0, 0.0], [1.0, 0.5], [1.0, 1.0]];
        assert_eq!(l_shape.strokes()[0].len(), want.len());
        for (p, q) in l_shape.strokes()[0].iter().zip(want) {
            assert!(dist(*p, q) < 1e-12, "{p:?} vs {q:?}");
        }

        let short = resample(&traj(&[&[[0.3, 0.3], [0.31, 0.3]]]), 0.1).unwrap();
        assert_eq!(short.strokes()[0], vec![[0.3, 0.3], [0.31, 0.3]]);

        let dot = resample(&traj(&[&[[0.3, 0.3], [0.3, 0.3]]]), 0.1).unwrap();
        assert_eq!(dot.strokes()[0], vec![[0.3, 0.3]]);

        assert!(resample(&line, 0.0).is_err());
        assert!(resample(&line, -1.0).is_err());
    }

    fn strokes() -> impl Strategy<Value = Vec<Vec<Point>>> {
        prop::collection::vec(
            prop::collection::vec((-50.0..50.0f64, -50.0..50.0f64).prop_map(|(x, y)| [x, y]), 1..12),
            1..4,
        )
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in strokes()) {
            let t = normalize(&Trajectory::new(s).unwrap());
            prop_assert!(close(&normalize(&t), &t, 1e-12));
        }

        #[test]
        fn normalize_ignores_scale_and_shift(s in strokes(), a in 0.01..100.0f64, bx in -100.0..100.0f64, by in -100.0..100.0f64) {
            let t = Trajectory::new(s).unwrap();
            let moved = t.map_points(|p| [a * p[0] + bx, a * p[1] + by]);
            prop_assert!(close(&normalize(&moved), &normalize(&t), 1e-9));
        }

        #[test]
        fn straight_strokes_resample_evenly(
            x0 in 0.0..1.0f64, y0 in 0.0..1.0f64, ang in 0.0..std::f64::consts::TAU, len in 0.001..1.5f64, interval in 0.005..0.3f64
        ) {
            let end = [x0 + len * ang.cos(), y0 + len * ang.sin()];
            let r = resample(&traj(&[&[[x0, y0], end]]), interval).unwrap();
            let pts = &r.strokes()[0];
            let gaps: Vec<f64> = pts.windows(2).map(|w| dist(w[0], w[1])).collect();
            for g in &gaps[..gaps.len() - 1] {
                prop_assert!((g - interval).abs() < 1e-9);
            }
            prop_assert!(*gaps.last().unwrap() <= interval + 1e-9);
            prop_assert_eq!(pts[0], [x0, y0]);
            prop_assert_eq!(*pts.last().unwrap(), end);
        }

        #[test]
        fn polyline_chords_never_exceed_interval(s in strokes(), interval in 0.01..0.2f64) {
            let t = normalize(&Trajectory::new(s).unwrap());
            let r = resample(&t, interval).unwrap();
            for stroke in r.strokes() {
                for w in stroke.windows(2) {
                    prop_assert!(dist(w[0], w[1]) <= interval + 1e-9);
                }
            }
        }
    }
}
