use crate::chargraph::Topology;
use crate::error::{Result, SgcnError};
use crate::numcore::{Op, Real, Tape, Var};

/// Normalizer used when every offset of a graph is zero.
pub const RHO_EPS: f64 = 1e-12;

/// Pseudo-coordinates of every edge plus the per-graph normalizers.
#[derive(Clone, Debug)]
pub struct PseudoCoords {
    /// `|E|×2` on the tape.
    pub u: Var,
    /// Normalizer `ρ` of each graph.
    pub rho: Vec<f64>,
}

struct PseudoOp<T> {
    edges: Vec<(usize, usize)>,
    edge_graph: Vec<usize>,
    rho: Vec<T>,
    /// Edge and axis attaining each graph's normalizer, if it is not the guard.
    argmax: Vec<Option<(usize, usize)>>,
    num_nodes: usize,
}

impl<T: Real> Op<T> for PseudoOp<T> {
    fn name(&self) -> &'static str {
        "pseudo_coords"
    }

    fn backward(&self, inputs: &[&[T]], _: &[T], g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let p = inputs[0];
        let half = T::from_f64_lossy(0.5);
        let two = T::from_f64_lossy(2.0);
        // gradient wrt raw offsets
        let mut d_off = vec![T::zero(); 2 * self.edges.len()];
        let mut d_rho = vec![T::zero(); self.rho.len()];
        for (e, &(s, d)) in self.edges.iter().enumerate() {
            let gr = self.edge_graph[e];
            let rho = self.rho[gr];
            for a in 0..2 {
                let o = p[2 * s + a] - p[2 * d + a];
                let raw = o / (rho + rho) + half;
                if raw < T::zero() || raw > T::one() {
                    continue;
                }
                let ge = g[2 * e + a];
                d_off[2 * e + a] += ge / (two * rho);
                d_rho[gr] -= ge * o / (two * rho * rho);
            }
        }
        for (gr, am) in self.argmax.iter().enumerate() {
            if let Some((e, a)) = *am {
                let (s, d) = self.edges[e];
                let o = p[2 * s + a] - p[2 * d + a];
                let sign = if o < T::zero() { -T::one() } else { T::one() };
                d_off[2 * e + a] += sign * d_rho[gr];
            }
        }
        let mut dp = vec![T::zero(); 2 * self.num_nodes];
        for (e, &(s, d)) in self.edges.iter().enumerate() {
            for a in 0..2 {
                dp[2 * s + a] += d_off[2 * e + a];
                dp[2 * d + a] -= d_off[2 * e + a];
            }
        }
        vec![Some(dp)]
    }
}

/// `u = clamp((p_src − p_dst)/(2ρ) + 0.5, 0, 1)` per edge, where `ρ` is the
/// largest max-norm offset among the edges of the same graph. With
/// `detach` the result is recorded as a constant.
pub fn pseudo_coords<T: Real>(
    tape: &mut Tape<T>,
    coords: Var,
    topo: &Topology,
    detach: bool,
) -> Result<PseudoCoords> {
    let (n, two) = tape.dims2(coords)?;
    if two != 2 || n != topo.num_nodes {
        return Err(SgcnError::shape(format!(
            "pseudo_coords: coords {:?} for {} nodes",
            tape.shape(coords),
            topo.num_nodes
        )));
    }
    let p = tape.value(coords);
    let mut rho = vec![T::zero(); topo.num_graphs];
    let mut argmax = vec![None; topo.num_graphs];
    let edge_graph: Vec<usize> = topo.edges.iter().map(|&(_, d)| topo.batch_id[d]).collect();
    for (e, &(s, d)) in topo.edges.iter().enumerate() {
        let gr = edge_graph[e];
        for a in 0..2 {
            let o = (p[2 * s + a] - p[2 * d + a]).abs();
            if o > rho[gr] {
                rho[gr] = o;
                argmax[gr] = Some((e, a));
            }
        }
    }
    let eps = T::from_f64_lossy(RHO_EPS);
    for (r, am) in rho.iter_mut().zip(argmax.iter_mut()) {
        if *r < eps {
            *r = eps;
            *am = None;
        }
    }
    let half = T::from_f64_lossy(0.5);
    let mut u = Vec::with_capacity(2 * topo.edges.len());
    for (e, &(s, d)) in topo.edges.iter().enumerate() {
        let r = rho[edge_graph[e]];
        for a in 0..2 {
            let o = p[2 * s + a] - p[2 * d + a];
            u.push((o / (r + r) + half).max(T::zero()).min(T::one()));
        }
    }
    let shape = vec![topo.edges.len(), 2];
    let rho_f64 = rho.iter().map(|r| r.as_f64()).collect();
    if detach {
        return Ok(PseudoCoords {
            u: tape.constant(&shape, u)?,
            rho: rho_f64,
        });
    }
    let op = PseudoOp {
        edges: topo.edges.clone(),
        edge_graph,
        rho,
        argmax,
        num_nodes: n,
    };
    Ok(PseudoCoords {
        u: tape.push(shape, u, vec![coords], Box::new(op)),
        rho: rho_f64,
    })
}
