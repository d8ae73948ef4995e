//! Literal double-loop evaluation of the spline convolution, for tests.

use crate::error::{Result, SgcnError};
use crate::numcore::Tensor;

use super::basis::{check_kernel, knots};

/// `B_{i,p}(u)` by the recursive definition; the last non-empty knot
/// interval is closed at its right end.
pub fn cox_de_boor(i: usize, p: usize, u: f64, t: &[f64]) -> f64 {
    if p == 0 {
        let last = t[t.len() - 1];
        let inside = t[i] <= u && u < t[i + 1];
        let at_end = u == last && t[i] < t[i + 1] && t[i + 1] == last;
        return if inside || at_end { 1.0 } else { 0.0 };
    }
    let mut v = 0.0;
    if t[i + p] > t[i] {
        v += (u - t[i]) / (t[i + p] - t[i]) * cox_de_boor(i, p - 1, u, t);
    }
    if t[i + p + 1] > t[i + 1] {
        v += (t[i + p + 1] - u) / (t[i + p + 1] - t[i + 1]) * cox_de_boor(i + 1, p - 1, u, t);
    }
    v
}

/// Materializes the dense `Cin×Cout` kernel at every edge from all `k²`
/// control points and averages the messages per destination.
pub fn naive_conv_oracle(
    f: &Tensor<f64>,
    edges: &[(usize, usize)],
    u: &[[f64; 2]],
    weights: &Tensor<f64>,
    k: usize,
    degree: usize,
) -> Result<Tensor<f64>> {
    check_kernel(k, degree)?;
    let [n, cin] = f.shape() else {
        return Err(SgcnError::shape("features must be a matrix"));
    };
    let (n, cin) = (*n, *cin);
    let cout = weights.shape()[2];
    let t = knots(k, degree);
    let w = weights.data();
    let mut out = vec![0.0; n * cout];
    for i in 0..n {
        let mut count = 0usize;
        let mut acc = vec![0.0; cout];
        for (e, &(j, dst)) in edges.iter().enumerate() {
            if dst != i {
                continue;
            }
            count += 1;
            let mut g = vec![0.0; cin * cout];
            for a in 0..k {
                for b in 0..k {
                    let basis = cox_de_boor(a, degree, u[e][0], &t) * cox_de_boor(b, degree, u[e][1], &t);
                    let p = a * k + b;
                    for (gv, wv) in g.iter_mut().zip(&w[p * cin * cout..(p + 1) * cin * cout]) {
                        *gv += basis * wv;
                    }
                }
            }
            for c in 0..cin {
                for o in 0..cout {
                    acc[o] += f.data()[j * cin + c] * g[c * cout + o];
                }
            }
        }
        if count == 0 {
            return Err(SgcnError::invalid(format!("node {i} has no incoming edge")));
        }
        for o in 0..cout {
            out[i * cout + o] = acc[o] / count as f64;
        }
    }
    Tensor::new(&[n, cout], out)
}
