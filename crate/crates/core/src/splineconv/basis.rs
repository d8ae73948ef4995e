//! Clamped uniform B-spline bases on `[0, 1]` and their tensor products.

use crate::error::{Result, SgcnError};
use crate::numcore::Real;

/// Open uniform knot vector: `degree + 1` repeated end knots and
/// `k - degree - 1` evenly spaced interior knots.
pub fn knots(k: usize, degree: usize) -> Vec<f64> {
    let interior = k - degree;
    let mut t = vec![0.0; degree + 1];
    t.extend((1..interior).map(|i| i as f64 / interior as f64));
    t.extend(std::iter::repeat_n(1.0, degree + 1));
    t
}

pub fn check_kernel(k: usize, degree: usize) -> Result<()> {
    if !(1..=2).contains(&degree) {
        return Err(SgcnError::invalid(format!("spline degree {degree} not in {{1, 2}}")));
    }
    if k < 2 || k < degree + 1 {
        return Err(SgcnError::invalid(format!(
            "kernel size {k} too small for degree {degree}"
        )));
    }
    Ok(())
}

/// Nonzero basis values of one axis.
#[derive(Clone, Debug)]
pub struct Basis1d<T> {
    /// Control index of `value[0]`.
    pub first: usize,
    pub value: Vec<T>,
    pub deriv: Vec<T>,
}

fn nonzero<T: Real>(span: usize, u: T, degree: usize, knots: &[T]) -> Vec<T> {
    let mut n = vec![T::zero(); degree + 1];
    let mut left = vec![T::zero(); degree + 1];
    let mut right = vec![T::zero(); degree + 1];
    n[0] = T::one();
    for j in 1..=degree {
        left[j] = u - knots[span + 1 - j];
        right[j] = knots[span + j] - u;
        let mut saved = T::zero();
        for r in 0..j {
            let temp = n[r] / (right[r + 1] + left[j - r]);
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    n
}

/// Basis of one axis at `u ∈ [0, 1]`; caller validates the range.
pub fn basis_1d<T: Real>(u: T, knots: &[T], k: usize, degree: usize) -> Basis1d<T> {
    // last span whose left knot is <= u, limited to the valid range
    let mut span = degree;
    while span + 1 < k && knots[span + 1] <= u {
        span += 1;
    }
    let value = nonzero(span, u, degree, knots);
    let lower = nonzero(span, u, degree - 1, knots);
    let m = T::from_usize(degree).unwrap();
    let deriv = (0..=degree)
        .map(|r| {
            let i = span - degree + r;
            let mut d = T::zero();
            if r >= 1 {
                let den = knots[i + degree] - knots[i];
                if den > T::zero() {
                    d += m * lower[r - 1] / den;
                }
            }
            if r < degree {
                let den = knots[i + degree + 1] - knots[i + 1];
                if den > T::zero() {
                    d -= m * lower[r] / den;
                }
            }
            d
        })
        .collect();
    Basis1d {
        first: span - degree,
        value,
        deriv,
    }
}

/// Products of the per-axis bases at one pseudo-coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct Basis2d<T> {
    /// Control points `p = i0·k + i1`.
    pub index: Vec<usize>,
    pub weight: Vec<T>,
    /// `∂weight/∂u0` and `∂weight/∂u1`.
    pub grad: Vec<[T; 2]>,
}

/// Evaluates `(m+1)²` tensor-product terms, zeros included.
pub fn basis_2d<T: Real>(u: [T; 2], knots: &[T], k: usize, degree: usize) -> Basis2d<T> {
    let a = basis_1d(u[0], knots, k, degree);
    let b = basis_1d(u[1], knots, k, degree);
    let s = (degree + 1) * (degree + 1);
    let mut out = Basis2d {
        index: Vec::with_capacity(s),
        weight: Vec::with_capacity(s),
        grad: Vec::with_capacity(s),
    };
    for r in 0..=degree {
        for q in 0..=degree {
            out.index.push((a.first + r) * k + b.first + q);
            out.weight.push(a.value[r] * b.value[q]);
            out.grad.push([a.deriv[r] * b.value[q], a.value[r] * b.deriv[q]]);
        }
    }
    out
}

/// Control indices and weights of the nonzero basis products at `u`.
pub fn spline_basis(u: [f64; 2], k: usize, degree: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    check_kernel(k, degree)?;
    if u.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(SgcnError::invalid(format!("pseudo-coordinate {u:?} outside the unit square")));
    }
    let b = basis_2d(u, &knots(k, degree), k, degree);
    Ok(b.index
        .into_iter()
        .zip(b.weight)
        .filter(|(_, w)| *w != 0.0)
        .unzip())
}
