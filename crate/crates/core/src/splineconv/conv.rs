use rand::Rng;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;

use crate::chargraph::Topology;
use crate::error::{Result, SgcnError};
use crate::numcore::linalg::{self, ROW_CHUNK};
use crate::numcore::{Op, Real, Tape, Tensor, Var};

use super::basis::{basis_2d, check_kernel, knots};

/// Control-point weights `w: [k², Cin, Cout]`, one `Cin×Cout` slab per
/// point of the `k×k` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineKernel<T: Real> {
    pub kernel_size: usize,
    pub degree: usize,
    pub weights: Tensor<T>,
}

impl<T: Real> SplineKernel<T> {
    /// Glorot-uniform slabs.
    pub fn new<R: Rng + ?Sized>(k: usize, degree: usize, cin: usize, cout: usize, rng: &mut R) -> Result<Self> {
        check_kernel(k, degree)?;
        let bound = (6.0 / (cin + cout) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| SgcnError::invalid(e.to_string()))?;
        let data = (0..k * k * cin * cout)
            .map(|_| T::from_f64_lossy(dist.sample(rng)))
            .collect();
        Self::from_weights(k, degree, Tensor::new(&[k * k, cin, cout], data)?)
    }

    pub fn from_weights(k: usize, degree: usize, weights: Tensor<T>) -> Result<Self> {
        check_kernel(k, degree)?;
        match weights.shape() {
            [p, _, _] if *p == k * k => Ok(SplineKernel {
                kernel_size: k,
                degree,
                weights,
            }),
            s => Err(SgcnError::shape(format!(
                "kernel of size {k} needs weights [{}, Cin, Cout], got {s:?}",
                k * k
            ))),
        }
    }

    /// Every slab equal to the identity.
    pub fn identity(k: usize, degree: usize, channels: usize) -> Result<Self> {
        let eye = Tensor::<T>::identity(channels);
        let data = eye.data().repeat(k * k);
        Self::from_weights(k, degree, Tensor::new(&[k * k, channels, channels], data)?)
    }

    pub fn cin(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn cout(&self) -> usize {
        self.weights.shape()[2]
    }
}

/// Edge ids grouped by one endpoint, stable within a group.
fn group_edges(edges: &[(usize, usize)], n: usize, by_dst: bool) -> (Vec<usize>, Vec<usize>) {
    let mut ptr = vec![0usize; n + 1];
    for &(s, d) in edges {
        ptr[if by_dst { d } else { s } + 1] += 1;
    }
    for i in 0..n {
        ptr[i + 1] += ptr[i];
    }
    let mut fill = ptr.clone();
    let mut ids = vec![0usize; edges.len()];
    for (e, &(s, d)) in edges.iter().enumerate() {
        let key = if by_dst { d } else { s };
        ids[fill[key]] = e;
        fill[key] += 1;
    }
    (ptr, ids)
}

struct SplineConvOp<T> {
    n: usize,
    cin: usize,
    cout: usize,
    terms: usize,
    edges: Vec<(usize, usize)>,
    inv_deg: Vec<T>,
    out_ptr: Vec<usize>,
    out_ids: Vec<usize>,
    index: Vec<usize>,
    weight: Vec<T>,
    grad: Vec<[T; 2]>,
    /// Basis-weighted neighbor features, `N × k²·Cin`.
    agg: Vec<T>,
}

impl<T: Real> Op<T> for SplineConvOp<T> {
    fn name(&self) -> &'static str {
        "spline_conv"
    }

    fn backward(&self, inputs: &[&[T]], _: &[T], g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (f, w) = (inputs[0], inputs[1]);
        let width = self.agg.len() / self.n.max(1);
        let (cin, terms) = (self.cin, self.terms);
        let dw = needs[1].then(|| {
            let mut dw = vec![T::zero(); w.len()];
            linalg::matmul_tn_acc(&self.agg, g, &mut dw, self.n, width, self.cout);
            dw
        });
        if !needs[0] && !needs[2] {
            return vec![None, dw, None];
        }
        let mut da = vec![T::zero(); self.agg.len()];
        linalg::matmul_nt_acc(g, w, &mut da, self.n, self.cout, width);

        let df = needs[0].then(|| {
            let mut df = vec![T::zero(); f.len()];
            df.par_chunks_mut(ROW_CHUNK * cin)
                .enumerate()
                .for_each(|(chunk, rows)| {
                    for (r, out) in rows.chunks_exact_mut(cin).enumerate() {
                        let j = chunk * ROW_CHUNK + r;
                        for &e in &self.out_ids[self.out_ptr[j]..self.out_ptr[j + 1]] {
                            let i = self.edges[e].1;
                            for s in e * terms..(e + 1) * terms {
                                let c = self.weight[s] * self.inv_deg[i];
                                if c == T::zero() {
                                    continue;
                                }
                                let slab = &da[i * width + self.index[s] * cin..][..cin];
                                for (o, &v) in out.iter_mut().zip(slab) {
                                    *o += c * v;
                                }
                            }
                        }
                    }
                });
            df
        });
        let du = needs[2].then(|| {
            let mut du = vec![T::zero(); 2 * self.edges.len()];
            du.par_chunks_mut(2 * ROW_CHUNK)
                .enumerate()
                .for_each(|(chunk, rows)| {
                    for (r, out) in rows.chunks_exact_mut(2).enumerate() {
                        let e = chunk * ROW_CHUNK + r;
                        let (j, i) = self.edges[e];
                        let fj = &f[j * cin..(j + 1) * cin];
                        for s in e * terms..(e + 1) * terms {
                            let slab = &da[i * width + self.index[s] * cin..][..cin];
                            let dot = slab.iter().zip(fj).fold(T::zero(), |a, (&x, &y)| a + x * y);
                            out[0] += self.grad[s][0] * self.inv_deg[i] * dot;
                            out[1] += self.grad[s][1] * self.inv_deg[i] * dot;
                        }
                    }
                });
            du
        });
        vec![df, dw, du]
    }
}

/// B-spline graph convolution: node `i` receives the mean over its incoming
/// edges `j → i` of `f_j · Σ_p w_p B_p(u_ji)`.
///
/// `f: N×Cin`, `w: [k², Cin, Cout]`, `u: |E|×2` aligned with `topo.edges`.
pub fn spline_conv<T: Real>(
    tape: &mut Tape<T>,
    f: Var,
    w: Var,
    u: Var,
    topo: &Topology,
    kernel_size: usize,
    degree: usize,
) -> Result<Var> {
    check_kernel(kernel_size, degree)?;
    let (n, cin) = tape.dims2(f)?;
    let ks2 = kernel_size * kernel_size;
    let cout = match tape.shape(w) {
        [p, c, o] if *p == ks2 && *c == cin => *o,
        s => {
            return Err(SgcnError::shape(format!(
                "spline_conv: features {n}×{cin} with kernel weights {s:?}"
            )))
        }
    };
    if n != topo.num_nodes || tape.shape(u) != [topo.edges.len(), 2] {
        return Err(SgcnError::shape(format!(
            "spline_conv: {n} feature rows and pseudo-coordinates {:?} for {} nodes, {} edges",
            tape.shape(u),
            topo.num_nodes,
            topo.edges.len()
        )));
    }
    let uv = tape.value(u);
    if uv.iter().any(|v| !(*v >= T::zero() && *v <= T::one())) {
        return Err(SgcnError::invalid("pseudo-coordinates outside the unit square"));
    }
    let deg = topo.in_degree();
    if let Some(i) = deg.iter().position(|&d| d == 0) {
        return Err(SgcnError::invalid(format!("node {i} has no incoming edge")));
    }
    let inv_deg: Vec<T> = deg.iter().map(|&d| T::one() / T::from_usize(d).unwrap()).collect();

    let kn: Vec<T> = knots(kernel_size, degree).into_iter().map(T::from_f64_lossy).collect();
    let terms = (degree + 1) * (degree + 1);
    let e_count = topo.edges.len();
    let mut index = Vec::with_capacity(e_count * terms);
    let mut weight = Vec::with_capacity(e_count * terms);
    let mut grad = Vec::with_capacity(e_count * terms);
    for e in 0..e_count {
        let b = basis_2d([uv[2 * e], uv[2 * e + 1]], &kn, kernel_size, degree);
        index.extend(b.index);
        weight.extend(b.weight);
        grad.extend(b.grad);
    }

    let fv = tape.value(f);
    let width = ks2 * cin;
    let (in_ptr, in_ids) = group_edges(&topo.edges, n, true);
    let mut agg = vec![T::zero(); n * width];
    agg.par_chunks_mut(ROW_CHUNK * width)
        .enumerate()
        .for_each(|(chunk, rows)| {
            for (r, row) in rows.chunks_exact_mut(width).enumerate() {
                let i = chunk * ROW_CHUNK + r;
                for &e in &in_ids[in_ptr[i]..in_ptr[i + 1]] {
                    let j = topo.edges[e].0;
                    let fj = &fv[j * cin..(j + 1) * cin];
                    for s in e * terms..(e + 1) * terms {
                        let c = weight[s] * inv_deg[i];
                        if c == T::zero() {
                            continue;
                        }
                        let slab = &mut row[index[s] * cin..(index[s] + 1) * cin];
                        for (o, &x) in slab.iter_mut().zip(fj) {
                            *o += c * x;
                        }
                    }
                }
            }
        });
    let mut out = vec![T::zero(); n * cout];
    linalg::matmul(&agg, tape.value(w), &mut out, n, width, cout);
    let (out_ptr, out_ids) = group_edges(&topo.edges, n, false);
    let op = SplineConvOp {
        n,
        cin,
        cout,
        terms,
        edges: topo.edges.clone(),
        inv_deg,
        out_ptr,
        out_ids,
        index,
        weight,
        grad,
        agg,
    };
    Ok(tape.push(vec![n, cout], out, vec![f, w, u], Box::new(op)))
}
