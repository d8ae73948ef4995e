//! Spatial transformers. The input transformer aligns node coordinates with a
//! similarity transform; the feature transformer multiplies node features by a
//! learned `d×d` matrix. Both pool an MLP encoding over the nodes of each graph
//! with a max, so they do not depend on node order.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::Serialize;

use crate::error::{Result, SgcnError};
use crate::numcore::{Op, Real, Reduce, Tape, Tensor, Var};

pub const STN_HIDDEN: [usize; 3] = [64, 128, 128];
pub const SIMILARITY_PARAMS: usize = 4;

/// Encoder MLP and zero-initialized affine head.
#[derive(Clone, Debug, PartialEq)]
pub struct StnParams<T: Real> {
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
    pub head: (Tensor<T>, Tensor<T>),
}

fn kaiming<T: Real, R: Rng + ?Sized>(rng: &mut R, din: usize, dout: usize) -> Result<Tensor<T>> {
    let bound = (6.0 / din as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| SgcnError::invalid(e.to_string()))?;
    Tensor::new(
        &[din, dout],
        (0..din * dout).map(|_| T::from_f64_lossy(dist.sample(rng))).collect(),
    )
}

impl<T: Real> StnParams<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: &[usize], head_width: usize, rng: &mut R) -> Result<Self> {
        if input == 0 || head_width == 0 || hidden.is_empty() || hidden.contains(&0) {
            return Err(SgcnError::invalid("transformer widths must be positive"));
        }
        let mut layers = Vec::with_capacity(hidden.len());
        let mut din = input;
        for &h in hidden {
            layers.push((kaiming(rng, din, h)?, Tensor::zeros(&[h])));
            din = h;
        }
        Ok(StnParams {
            layers,
            head: (Tensor::zeros(&[din, head_width]), Tensor::zeros(&[head_width])),
        })
    }

    pub fn head_width(&self) -> usize {
        self.head.1.len()
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.mlp{i}.weight"), w.clone()));
            out.push((format!("{prefix}.mlp{i}.bias"), b.clone()));
        }
        out.push((format!("{prefix}.head.weight"), self.head.0.clone()));
        out.push((format!("{prefix}.head.bias"), self.head.1.clone()));
        out
    }

    pub fn leaf(&self, tape: &mut Tape<T>) -> StnVars {
        StnVars {
            layers: self.layers.iter().map(|(w, b)| (tape.leaf(w), tape.leaf(b))).collect(),
            head: (tape.leaf(&self.head.0), tape.leaf(&self.head.1)),
        }
    }
}

/// Tape handles of a transformer's parameters.
#[derive(Clone, Debug)]
pub struct StnVars {
    pub layers: Vec<(Var, Var)>,
    pub head: (Var, Var),
}

impl StnVars {
    /// Resolves the names produced by [`StnParams::named`].
    pub fn lookup(prefix: &str, depth: usize, mut get: impl FnMut(&str) -> Result<Var>) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| Ok((get(&format!("{prefix}.mlp{i}.weight"))?, get(&format!("{prefix}.mlp{i}.bias"))?)))
            .collect::<Result<_>>()?;
        Ok(StnVars {
            layers,
            head: (get(&format!("{prefix}.head.weight"))?, get(&format!("{prefix}.head.bias"))?),
        })
    }
}

/// Per-graph head output: MLP on every node, max over each graph's nodes,
/// then the affine head. Returns `B × head_width`.
pub fn stn_head<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    vars: &StnVars,
    batch_id: &[usize],
    num_graphs: usize,
) -> Result<Var> {
    let mut h = x;
    for &(w, b) in &vars.layers {
        h = tape.linear(h, w, Some(b))?;
        h = tape.relu(h);
    }
    let pooled = tape.segment_reduce(h, batch_id, num_graphs, Reduce::Max)?;
    tape.linear(pooled, vars.head.0, Some(vars.head.1))
}

/// Rotation, scale and translation decoded from one head output row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SimilarityTransform {
    pub theta: f64,
    pub scale: f64,
    pub shift: [f64; 2],
}

impl SimilarityTransform {
    /// `θ = π·tanh(θ̃)`, `s = exp(tanh(s̃))`.
    pub fn from_raw(raw: [f64; 4]) -> Self {
        SimilarityTransform {
            theta: PI * raw[0].tanh(),
            scale: raw[1].tanh().exp(),
            shift: [raw[2], raw[3]],
        }
    }

    /// `2×3` matrix acting on `[x, y, 1]`.
    pub fn matrix(&self) -> [[f64; 3]; 2] {
        let (sin, cos) = self.theta.sin_cos();
        let s = self.scale;
        [
            [s * cos, -s * sin, self.shift[0]],
            [s * sin, s * cos, self.shift[1]],
        ]
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let m = self.matrix();
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2],
        ]
    }
}

struct SimilarityOp {
    batch_id: Vec<usize>,
}

fn decode<T: Real>(raw: &[T]) -> (T, T, T, T) {
    let pi = T::from_f64_lossy(PI);
    let theta = pi * raw[0].tanh();
    let s = raw[1].tanh().exp();
    let (sin, cos) = theta.sin_cos();
    (s * cos, s * sin, raw[2], raw[3])
}

impl<T: Real> Op<T> for SimilarityOp {
    fn name(&self) -> &'static str {
        "similarity_transform"
    }

    fn backward(&self, inputs: &[&[T]], _: &[T], g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (p, raw) = (inputs[0], inputs[1]);
        let b = raw.len() / SIMILARITY_PARAMS;
        let coef: Vec<_> = raw.chunks_exact(SIMILARITY_PARAMS).map(decode).collect();
        let mut dp = vec![T::zero(); p.len()];
        // per graph: d(a), d(b), d(shift x), d(shift y)
        let mut dm = vec![T::zero(); 4 * b];
        for (i, &gi) in self.batch_id.iter().enumerate() {
            let (a, bb, _, _) = coef[gi];
            let (x, y) = (p[2 * i], p[2 * i + 1]);
            let (gx, gy) = (g[2 * i], g[2 * i + 1]);
            dp[2 * i] = a * gx + bb * gy;
            dp[2 * i + 1] = a * gy - bb * gx;
            let d = &mut dm[4 * gi..4 * gi + 4];
            d[0] += gx * x + gy * y;
            d[1] += gy * x - gx * y;
            d[2] += gx;
            d[3] += gy;
        }
        let draw = needs[1].then(|| {
            let pi = T::from_f64_lossy(PI);
            let mut out = vec![T::zero(); raw.len()];
            for (gi, r) in raw.chunks_exact(SIMILARITY_PARAMS).enumerate() {
                let (a, bb, _, _) = coef[gi];
                let d = &dm[4 * gi..4 * gi + 4];
                let s = (a * a + bb * bb).sqrt();
                let d_theta = a * d[1] - bb * d[0];
                // d/ds of (s cosθ, s sinθ) is (a/s, b/s)
                let d_s = (a * d[0] + bb * d[1]) / s;
                let (t0, t1) = (r[0].tanh(), r[1].tanh());
                out[gi * 4] = d_theta * pi * (T::one() - t0 * t0);
                out[gi * 4 + 1] = d_s * s * (T::one() - t1 * t1);
                out[gi * 4 + 2] = d[2];
                out[gi * 4 + 3] = d[3];
            }
            out
        });
        vec![needs[0].then_some(dp), draw]
    }
}

/// Applies each graph's similarity transform, decoded from `raw: B×4`, to
/// the coordinates of its nodes.
pub fn apply_similarity<T: Real>(tape: &mut Tape<T>, p: Var, raw: Var, batch_id: &[usize]) -> Result<Var> {
    let (n, two) = tape.dims2(p)?;
    let (b, w) = tape.dims2(raw)?;
    if two != 2 || w != SIMILARITY_PARAMS || batch_id.len() != n || batch_id.iter().any(|&g| g >= b) {
        return Err(SgcnError::shape(format!(
            "similarity transform of {n}×{two} points with {b}×{w} parameters"
        )));
    }
    let (pv, rv) = (tape.value(p), tape.value(raw));
    let coef: Vec<_> = rv.chunks_exact(SIMILARITY_PARAMS).map(decode).collect();
    let mut out = Vec::with_capacity(2 * n);
    for (i, &gi) in batch_id.iter().enumerate() {
        let (a, bb, tx, ty) = coef[gi];
        let (x, y) = (pv[2 * i], pv[2 * i + 1]);
        out.push(a * x - bb * y + tx);
        out.push(bb * x + a * y + ty);
    }
    Ok(tape.push(
        vec![n, 2],
        out,
        vec![p, raw],
        Box::new(SimilarityOp {
            batch_id: batch_id.to_vec(),
        }),
    ))
}

/// Aligned coordinates and the raw head output `B×4`.
pub fn input_stn<T: Real>(
    tape: &mut Tape<T>,
    p: Var,
    vars: &StnVars,
    batch_id: &[usize],
    num_graphs: usize,
) -> Result<(Var, Var)> {
    if tape.shape(vars.head.1) != [SIMILARITY_PARAMS] {
        return Err(SgcnError::shape(format!(
            "input transformer head has width {:?}, expected {SIMILARITY_PARAMS}",
            tape.shape(vars.head.1)
        )));
    }
    let raw = stn_head(tape, p, vars, batch_id, num_graphs)?;
    Ok((apply_similarity(tape, p, raw, batch_id)?, raw))
}

struct GraphMatmulOp {
    batch_id: Vec<usize>,
    d: usize,
}

impl<T: Real> Op<T> for GraphMatmulOp {
    fn name(&self) -> &'static str {
        "feature_transform"
    }

    fn backward(&self, inputs: &[&[T]], _: &[T], g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (f, h) = (inputs[0], inputs[1]);
        let d = self.d;
        let mut df = vec![T::zero(); f.len()];
        let mut dh = vec![T::zero(); h.len()];
        for (i, &gi) in self.batch_id.iter().enumerate() {
            let t = &h[gi * d * d..(gi + 1) * d * d];
            let (fi, gr) = (&f[i * d..(i + 1) * d], &g[i * d..(i + 1) * d]);
            for r in 0..d {
                let trow = &t[r * d..(r + 1) * d];
                // the added identity contributes g[r]
                let mut acc = gr[r];
                for c in 0..d {
                    acc += trow[c] * gr[c];
                }
                df[i * d + r] = acc;
                let dt = &mut dh[gi * d * d + r * d..gi * d * d + (r + 1) * d];
                for c in 0..d {
                    dt[c] += fi[r] * gr[c];
                }
            }
        }
        vec![needs[0].then_some(df), needs[1].then_some(dh)]
    }
}

/// `F_i · (I + H_g)` for every node `i` of graph `g`, with `H: B×d²`
/// holding each graph's matrix in row-major order.
pub fn apply_feature_transform<T: Real>(tape: &mut Tape<T>, f: Var, h: Var, batch_id: &[usize]) -> Result<Var> {
    let (n, d) = tape.dims2(f)?;
    let (b, w) = tape.dims2(h)?;
    if w != d * d {
        return Err(SgcnError::shape(format!(
            "feature transformer head has width {w}, expected {d}² = {}",
            d * d
        )));
    }
    if batch_id.len() != n || batch_id.iter().any(|&g| g >= b) {
        return Err(SgcnError::shape(format!("{} graph ids for {n} nodes and {b} graphs", batch_id.len())));
    }
    let (fv, hv) = (tape.value(f), tape.value(h));
    let mut out = vec![T::zero(); n * d];
    for (i, &gi) in batch_id.iter().enumerate() {
        let t = &hv[gi * d * d..(gi + 1) * d * d];
        let o = &mut out[i * d..(i + 1) * d];
        o.copy_from_slice(&fv[i * d..(i + 1) * d]);
        for r in 0..d {
            let x = fv[i * d + r];
            for c in 0..d {
                o[c] += x * t[r * d + c];
            }
        }
    }
    Ok(tape.push(
        vec![n, d],
        out,
        vec![f, h],
        Box::new(GraphMatmulOp {
            batch_id: batch_id.to_vec(),
            d,
        }),
    ))
}

pub fn feature_stn<T: Real>(
    tape: &mut Tape<T>,
    f: Var,
    vars: &StnVars,
    batch_id: &[usize],
    num_graphs: usize,
) -> Result<Var> {
    let (_, d) = tape.dims2(f)?;
    if tape.shape(vars.head.1) != [d * d] {
        return Err(SgcnError::shape(format!(
            "feature transformer head has width {:?}, expected {d}² = {}",
            tape.shape(vars.head.1),
            d * d
        )));
    }
    let h = stn_head(tape, f, vars, batch_id, num_graphs)?;
    apply_feature_transform(tape, f, h, batch_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{gradcheck, GradcheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<f64> {
        Tensor::new(&[n, d], (0..n * d).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn randomize_head(p: &mut StnParams<f64>, rng: &mut ChaCha8Rng, scale: f64) {
        for v in p.head.0.data_mut().iter_mut().chain(p.head.1.data_mut()) {
            *v = rng.random_range(-scale..scale);
        }
    }

    #[test]
    fn identity_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ids = [0, 0, 0, 1, 1];
        let stn = StnParams::<f64>::new(2, &STN_HIDDEN, 4, &mut rng).unwrap();
        let p = points(&mut rng, 5, 2);
        let mut tape = Tape::new();
        let vars = stn.leaf(&mut tape);
        let pv = tape.leaf(&p);
        let (out, _) = input_stn(&mut tape, pv, &vars, &ids, 2).unwrap();
        assert_eq!(tape.value(out), p.data());

        let fstn = StnParams::<f64>::new(6, &STN_HIDDEN, 36, &mut rng).unwrap();
        let f = points(&mut rng, 5, 6);
        let vars = fstn.leaf(&mut tape);
        let fv = tape.leaf(&f);
        let out = feature_stn(&mut tape, fv, &vars, &ids, 2).unwrap();
        assert_eq!(tape.value(out), f.data());
    }

    #[test]
    fn similarity_saturation_and_shape() {
        let t = SimilarityTransform::from_raw([50.0, 50.0, 0.0, 0.0]);
        assert!((t.theta - PI).abs() < 1e-12 && (t.scale - std::f64::consts::E).abs() < 1e-12);
        let t = SimilarityTransform::from_raw([-50.0, -50.0, 0.0, 0.0]);
        assert!((t.scale - (-1.0f64).exp()).abs() < 1e-12);

        let raw = [0.3, -0.4, 0.2, -0.1];
        let t = SimilarityTransform::from_raw(raw);
        let m = t.matrix();
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        assert!((det - t.scale * t.scale).abs() < 1e-12);
        assert!((m[0][0] * m[0][1] + m[1][0] * m[1][1]).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = points(&mut rng, 6, 2);
        let mut tape = Tape::<f64>::new();
        let pv = tape.leaf(&p);
        let rv = tape.constant(&[1, 4], raw.to_vec()).unwrap();
        let out = apply_similarity(&mut tape, pv, rv, &[0; 6]).unwrap();
        let q = tape.value(out);
        let dist = |v: &[f64], i: usize, j: usize| (v[2 * i] - v[2 * j]).hypot(v[2 * i + 1] - v[2 * j + 1]);
        for i in 0..6 {
            let want = t.apply([p.data()[2 * i], p.data()[2 * i + 1]]);
            assert!((q[2 * i] - want[0]).abs() < 1e-12 && (q[2 * i + 1] - want[1]).abs() < 1e-12);
            for j in 0..i {
                assert!((dist(q, i, j) / dist(p.data(), i, j) - t.scale).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn permutation_matrix_permutes_columns() {
        let f = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        // T sends column 0 to 1, 1 to 2, 2 to 0; head holds T − I
        let t = [0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let h: Vec<f64> = t.iter().enumerate().map(|(i, v)| v - f64::from(i % 4 == 0)).collect();
        let mut tape = Tape::<f64>::new();
        let fv = tape.leaf(&f);
        let hv = tape.constant(&[1, 9], h).unwrap();
        let out = apply_feature_transform(&mut tape, fv, hv, &[0, 0]).unwrap();
        assert_eq!(tape.value(out), &[3.0, 1.0, 2.0, 6.0, 4.0, 5.0]);
        let bad = tape.constant(&[1, 4], vec![0.0; 4]).unwrap();
        assert!(apply_feature_transform(&mut tape, fv, bad, &[0, 0]).is_err());
    }

    #[test]
    fn heads_ignore_node_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut stn = StnParams::<f64>::new(2, &[8, 8, 8], 4, &mut rng).unwrap();
        randomize_head(&mut stn, &mut rng, 0.5);
        let p = points(&mut rng, 7, 2);
        let mut rev = p.data().chunks(2).rev().flatten().copied().collect::<Vec<_>>();
        let head = |data: Vec<f64>| {
            let mut tape = Tape::new();
            let vars = stn.leaf(&mut tape);
            let pv = tape.constant(&[7, 2], data).unwrap();
            let h = stn_head(&mut tape, pv, &vars, &[0; 7], 1).unwrap();
            tape.value(h).to_vec()
        };
        let a = head(p.data().to_vec());
        let b = head(std::mem::take(&mut rev));
        assert_eq!(a, b);
    }

    #[test]
    fn input_stn_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut stn = StnParams::<f64>::new(2, &[5, 6, 4], 4, &mut rng).unwrap();
        randomize_head(&mut stn, &mut rng, 0.5);
        let named = stn.named("s");
        let ids = [0, 0, 0, 1, 1, 1, 1];
        let mut inputs: Vec<Tensor<f64>> = named.into_iter().map(|(_, t)| t.with_grad()).collect();
        inputs.push(points(&mut rng, 7, 2).with_grad());
        inputs.push(points(&mut rng, 7, 2));
        let report = gradcheck(&inputs, GradcheckOptions { eps: 1e-6, ..Default::default() }, |t, v| {
            let vars = StnVars {
                layers: (0..3).map(|i| (v[2 * i], v[2 * i + 1])).collect(),
                head: (v[6], v[7]),
            };
            let (out, _) = input_stn(t, v[8], &vars, &ids, 2)?;
            let y = t.mul(out, v[9])?;
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn feature_stn_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 3;
        let mut stn = StnParams::<f64>::new(d, &[5, 6, 4], d * d, &mut rng).unwrap();
        randomize_head(&mut stn, &mut rng, 0.5);
        let ids = [0, 0, 1, 1, 1];
        let mut inputs: Vec<Tensor<f64>> = stn.named("f").into_iter().map(|(_, t)| t.with_grad()).collect();
        inputs.push(points(&mut rng, 5, d).with_grad());
        inputs.push(points(&mut rng, 5, d));
        let report = gradcheck(&inputs, GradcheckOptions { eps: 1e-6, ..Default::default() }, |t, v| {
            let vars = StnVars {
                layers: (0..3).map(|i| (v[2 * i], v[2 * i + 1])).collect(),
                head: (v[6], v[7]),
            };
            let out = feature_stn(t, v[8], &vars, &ids, 2)?;
            let y = t.mul(out, v[9])?;
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }
}
