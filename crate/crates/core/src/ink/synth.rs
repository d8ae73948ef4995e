//! Seeded generator of digit-like characters for desk-scale experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SgcnError};

use super::trajectory::{Point, Trajectory};
use super::{Dataset, Sample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// Standard deviation of the per-vertex Gaussian jitter, in template units
    /// (templates are about one unit tall).
    pub jitter: f64,
    /// Rotation drawn uniformly from `[-rotation_range, rotation_range]` radians.
    pub rotation_range: f64,
    pub scale_range: (f64, f64),
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 10,
            samples_per_class: 200,
            jitter: 0.025,
            rotation_range: 0.25,
            scale_range: (0.5, 2.0),
        }
    }
}

fn arc(cx: f64, cy: f64, rx: f64, ry: f64, from_deg: f64, to_deg: f64, steps: usize) -> Vec<Point> {
    (0..=steps)
        .map(|i| {
            let a = (from_deg + (to_deg - from_deg) * i as f64 / steps as f64).to_radians();
            [cx + rx * a.cos(), cy + ry * a.sin()]
        })
        .collect()
}

fn chain(parts: &[Vec<Point>]) -> Vec<Point> {
    let mut out: Vec<Point> = Vec::new();
    for p in parts {
        for &q in p {
            if out.last() != Some(&q) {
                out.push(q);
            }
        }
    }
    out
}

pub const NUM_TEMPLATES: usize = 10;

const X_SQUEEZE: f64 = 0.7;

/// Stroke template of digit `class` (y axis pointing up).
pub fn template(class: usize) -> Result<Vec<Vec<Point>>> {
    let t = match class {
        0 => vec![arc(0.5, 0.5, 0.3, 0.5, 90.0, 450.0, 24)],
        1 => vec![
            vec![[0.3, 0.75], [0.5, 1.0], [0.5, 0.0]],
            vec![[0.3, 0.0], [0.7, 0.0]],
        ],
        2 => vec![chain(&[
            arc(0.5, 0.72, 0.28, 0.28, 160.0, -40.0, 12),
            vec![[0.2, 0.0], [0.8, 0.0]],
        ])],
        3 => vec![chain(&[
            arc(0.5, 0.75, 0.25, 0.25, 150.0, -90.0, 14),
            arc(0.5, 0.25, 0.25, 0.25, 90.0, -150.0, 14),
        ])],
        4 => vec![
            vec![[0.6, 1.0], [0.15, 0.35], [0.85, 0.35]],
            vec![[0.65, 0.75], [0.65, 0.0]],
        ],
        5 => vec![chain(&[
            vec![[0.8, 1.0], [0.28, 1.0], [0.24, 0.58]],
            arc(0.5, 0.3, 0.3, 0.3, 130.0, -150.0, 16),
        ])],
        6 => vec![chain(&[
            vec![[0.72, 1.0]],
            arc(0.72, 0.3, 0.5, 0.7, 90.0, 180.0, 6),
            arc(0.5, 0.28, 0.28, 0.28, 180.0, 540.0, 20),
        ])],
        7 => vec![vec![[0.15, 1.0], [0.85, 1.0], [0.4, 0.0]]],
        8 => vec![chain(&[
            arc(0.5, 0.76, 0.2, 0.22, 270.0, 630.0, 18),
            arc(0.5, 0.27, 0.25, 0.27, 90.0, -270.0, 20),
        ])],
        9 => vec![chain(&[
            arc(0.5, 0.72, 0.26, 0.26, 0.0, 360.0, 20),
            vec![[0.7, 0.0]],
        ])],
        _ => {
            return Err(SgcnError::invalid(format!(
                "no stroke template for class {class} ({NUM_TEMPLATES} available)"
            )))
        }
    };
    // digits are taller than wide
    Ok(t.into_iter()
        .map(|s| s.into_iter().map(|[x, y]| [0.5 + X_SQUEEZE * (x - 0.5), y]).collect())
        .collect())
}

/// One jittered, rotated, scaled and translated copy of `class`'s template.
pub fn synth_sample<R: Rng + ?Sized>(class: usize, spec: &SynthSpec, rng: &mut R) -> Result<Trajectory> {
    let strokes = template(class)?;
    let noise = Normal::new(0.0, spec.jitter.max(0.0)).map_err(|e| SgcnError::invalid(e.to_string()))?;
    let angle = if spec.rotation_range > 0.0 {
        rng.random_range(-spec.rotation_range..=spec.rotation_range)
    } else {
        0.0
    };
    let (lo, hi) = spec.scale_range;
    let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let shift = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let (sin, cos) = angle.sin_cos();
    let strokes = strokes
        .into_iter()
        .map(|s| {
            s.into_iter()
                .map(|[x, y]| {
                    let (x, y) = if spec.jitter > 0.0 {
                        (x + noise.sample(rng), y + noise.sample(rng))
                    } else {
                        (x, y)
                    };
                    let (x, y) = (x - 0.5, y - 0.5);
                    [
                        scale * (cos * x - sin * y) + shift[0],
                        scale * (sin * x + cos * y) + shift[1],
                    ]
                })
                .collect()
        })
        .collect();
    Trajectory::new(strokes)
}

/// Deterministic for a fixed seed. Samples are interleaved by class, so any
/// prefix of `k·num_classes` samples is balanced.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    if spec.num_classes == 0 || spec.num_classes > NUM_TEMPLATES {
        return Err(SgcnError::invalid(format!(
            "{} classes requested, {NUM_TEMPLATES} templates available",
            spec.num_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for i in 0..spec.samples_per_class {
        for class in 0..spec.num_classes {
            samples.push(Sample {
                label: class,
                trajectory: synth_sample(class, spec, &mut rng)?,
                id: format!("synth-{class}-{i}"),
            });
        }
    }
    Dataset::new(samples, (0..spec.num_classes).map(|c| c.to_string()).collect())
}

/// Train/test pair drawn from one stream: the first `train_per_class` rounds
/// go to train, the rest to test.
pub fn synth_split(
    spec: &SynthSpec,
    train_per_class: usize,
    test_per_class: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let all = synth_dataset(
        &SynthSpec {
            samples_per_class: train_per_class + test_per_class,
            ..spec.clone()
        },
        seed,
    )?;
    let cut = train_per_class * spec.num_classes;
    let names = all.class_names.clone();
    let mut samples = all.samples;
    let test = samples.split_off(cut);
    Ok((Dataset::new(samples, names.clone())?, Dataset::new(test, names)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ink::{normalize, resample, DEFAULT_INTERVAL};

    #[test]
    fn deterministic_for_seed() {
        let spec = SynthSpec {
            samples_per_class: 3,
            ..SynthSpec::default()
        };
        assert_eq!(synth_dataset(&spec, 5).unwrap(), synth_dataset(&spec, 5).unwrap());
        assert_ne!(synth_dataset(&spec, 5).unwrap(), synth_dataset(&spec, 6).unwrap());
    }

    #[test]
    fn zero_noise_matches_template() {
        let spec = SynthSpec {
            num_classes: 10,
            samples_per_class: 2,
            jitter: 0.0,
            rotation_range: 0.0,
            scale_range: (1.0, 1.0),
        };
        let ds = synth_dataset(&spec, 11).unwrap();
        for s in &ds.samples {
            let want = normalize(&Trajectory::new(template(s.label).unwrap()).unwrap());
            let got = normalize(&s.trajectory);
            for (p, q) in got.points().zip(want.points()) {
                assert!((p[0] - q[0]).abs() < 1e-9 && (p[1] - q[1]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn counts_and_balance() {
        let ds = synth_dataset(&SynthSpec::default(), 7).unwrap();
        assert_eq!(ds.samples.len(), 2000);
        let mut counts = [0usize; 10];
        ds.samples.iter().for_each(|s| counts[s.label] += 1);
        assert!(counts.iter().all(|&c| c == 200));
    }

    #[test]
    fn unknown_template_rejected() {
        assert!(template(10).is_err());
        let spec = SynthSpec {
            num_classes: 11,
            ..SynthSpec::default()
        };
        assert!(synth_dataset(&spec, 0).is_err());
    }

    #[test]
    fn node_budget_near_one_hundred() {
        let ds = synth_dataset(
            &SynthSpec {
                samples_per_class: 50,
                ..SynthSpec::default()
            },
            7,
        )
        .unwrap();
        let total: usize = ds
            .samples
            .iter()
            .map(|s| resample(&normalize(&s.trajectory), DEFAULT_INTERVAL).unwrap().num_points())
            .sum();
        let mean = total as f64 / ds.samples.len() as f64;
        assert!((80.0..=120.0).contains(&mean), "mean node count {mean}");
    }

    #[test]
    fn split_sizes() {
        let (train, test) = synth_split(&SynthSpec::default(), 4, 1, 7).unwrap();
        assert_eq!(train.samples.len(), 40);
        assert_eq!(test.samples.len(), 10);
    }
}

