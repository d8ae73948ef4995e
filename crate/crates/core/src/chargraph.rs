//! Geometric character graphs: construction from resampled ink, differentiable
//! node features, undirected conversion and disjoint-union batching.

use serde::Serialize;

use crate::error::{Result, SgcnError};
use crate::ink::{Point, Trajectory};
use crate::numcore::{Op, Real, Tape, Tensor, Var};

/// Below this offset length the direction features are zero.
pub const DIRECTION_EPS: f64 = 1e-12;

/// Width of the node feature vector `[x, y, Δx, Δy, sinθ, cosθ]`.
pub const FEATURE_DIM: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct CharGraph {
    pub coords: Vec<Point>,
    /// `(src, dst)`, meaning `src → dst`.
    pub edges: Vec<(usize, usize)>,
    pub stroke_start: Vec<bool>,
    /// Writing-order predecessor; kept through undirected conversion.
    pub pred: Vec<Option<usize>>,
    pub directed: bool,
}

impl CharGraph {
    pub fn num_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn num_self_loops(&self) -> usize {
        self.edges.iter().filter(|(s, d)| s == d).count()
    }

    /// Relabels node `i` as `perm[i]`, moving edges and predecessors along.
    pub fn permute(&self, perm: &[usize]) -> CharGraph {
        let n = self.num_nodes();
        assert_eq!(perm.len(), n);
        let mut coords = vec![[0.0; 2]; n];
        let mut stroke_start = vec![false; n];
        let mut pred = vec![None; n];
        for i in 0..n {
            coords[perm[i]] = self.coords[i];
            stroke_start[perm[i]] = self.stroke_start[i];
            pred[perm[i]] = self.pred[i].map(|p| perm[p]);
        }
        CharGraph {
            coords,
            edges: self.edges.iter().map(|&(s, d)| (perm[s], perm[d])).collect(),
            stroke_start,
            pred,
            directed: self.directed,
        }
    }
}

/// One node per resampled point, trajectory edges to each successor.
/// With `penup_edges` the strokes are chained into a single path.
pub fn build_graph(traj: &Trajectory, penup_edges: bool) -> Result<CharGraph> {
    let n = traj.num_points();
    if n == 0 {
        return Err(SgcnError::EmptyTrajectory);
    }
    let mut coords = Vec::with_capacity(n);
    let mut edges = Vec::with_capacity(n);
    let mut stroke_start = Vec::with_capacity(n);
    let mut pred = Vec::with_capacity(n);
    for stroke in traj.strokes() {
        for (k, &p) in stroke.iter().enumerate() {
            let idx = coords.len();
            let linked = k > 0 || (penup_edges && idx > 0);
            if linked {
                edges.push((idx - 1, idx));
                pred.push(Some(idx - 1));
            } else {
                pred.push(None);
            }
            stroke_start.push(!linked);
            coords.push(p);
        }
    }
    Ok(CharGraph {
        coords,
        edges,
        stroke_start,
        pred,
        directed: true,
    })
}

/// Edge set closed under reversal plus one self-loop per node, sorted by
/// `(dst, src)` without duplicates.
pub fn to_undirected_self_loops(graph: &CharGraph) -> CharGraph {
    let mut edges: Vec<(usize, usize)> = Vec::with_capacity(2 * graph.edges.len() + graph.num_nodes());
    for &(s, d) in &graph.edges {
        edges.push((s, d));
        edges.push((d, s));
    }
    edges.extend((0..graph.num_nodes()).map(|i| (i, i)));
    edges.sort_unstable_by_key(|&(s, d)| (d, s));
    edges.dedup();
    CharGraph {
        edges,
        directed: false,
        ..graph.clone()
    }
}

// ---------------------------------------------------------------------------
// node features

struct NodeFeatureOp {
    pred: Vec<Option<usize>>,
}

impl<T: Real> Op<T> for NodeFeatureOp {
    fn name(&self) -> &'static str {
        "node_features"
    }

    fn backward(&self, inputs: &[&[T]], _: &[T], g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let p = inputs[0];
        let mut dp = vec![T::zero(); p.len()];
        let eps = T::from_f64_lossy(DIRECTION_EPS);
        for (i, pred) in self.pred.iter().enumerate() {
            let gi = &g[i * FEATURE_DIM..(i + 1) * FEATURE_DIM];
            dp[2 * i] += gi[0];
            dp[2 * i + 1] += gi[1];
            let Some(j) = *pred else { continue };
            let dx = p[2 * i] - p[2 * j];
            let dy = p[2 * i + 1] - p[2 * j + 1];
            let mut gdx = gi[2];
            let mut gdy = gi[3];
            let len = (dx * dx + dy * dy).sqrt();
            if len >= eps {
                let l3 = len * len * len;
                // sin = dy/len, cos = dx/len
                gdx += gi[4] * (-dx * dy / l3) + gi[5] * (dy * dy / l3);
                gdy += gi[4] * (dx * dx / l3) + gi[5] * (-dx * dy / l3);
            }
            dp[2 * i] += gdx;
            dp[2 * i + 1] += gdy;
            dp[2 * j] -= gdx;
            dp[2 * j + 1] -= gdy;
        }
        vec![Some(dp)]
    }
}

/// Records `[x, y, Δx, Δy, sinθ, cosθ]` per node; nodes without a predecessor
/// and zero-length offsets get zero temporal features.
pub fn node_features_op<T: Real>(tape: &mut Tape<T>, coords: Var, pred: &[Option<usize>]) -> Result<Var> {
    let (n, two) = tape.dims2(coords)?;
    if two != 2 || pred.len() != n {
        return Err(SgcnError::shape(format!(
            "node_features: coords {:?} with {} predecessors",
            tape.shape(coords),
            pred.len()
        )));
    }
    let p = tape.value(coords);
    let eps = T::from_f64_lossy(DIRECTION_EPS);
    let mut out = vec![T::zero(); n * FEATURE_DIM];
    for i in 0..n {
        let f = &mut out[i * FEATURE_DIM..(i + 1) * FEATURE_DIM];
        f[0] = p[2 * i];
        f[1] = p[2 * i + 1];
        if let Some(j) = pred[i] {
            let dx = p[2 * i] - p[2 * j];
            let dy = p[2 * i + 1] - p[2 * j + 1];
            f[2] = dx;
            f[3] = dy;
            let len = (dx * dx + dy * dy).sqrt();
            if len >= eps {
                f[4] = dy / len;
                f[5] = dx / len;
            }
        }
    }
    Ok(tape.push(
        vec![n, FEATURE_DIM],
        out,
        vec![coords],
        Box::new(NodeFeatureOp { pred: pred.to_vec() }),
    ))
}

/// Node features of a standalone graph, evaluated in `f64`.
pub fn node_features(graph: &CharGraph) -> Result<Tensor<f64>> {
    let mut tape = Tape::<f64>::new();
    let flat: Vec<f64> = graph.coords.iter().flatten().copied().collect();
    let coords = tape.constant(&[graph.num_nodes(), 2], flat)?;
    let f = node_features_op(&mut tape, coords, &graph.pred)?;
    Ok(tape.tensor(f))
}

// ---------------------------------------------------------------------------
// batching

/// Connectivity of a (possibly batched) graph at one resolution level.
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    pub num_nodes: usize,
    pub edges: Vec<(usize, usize)>,
    pub batch_id: Vec<usize>,
    pub num_graphs: usize,
}

impl Topology {
    /// Incoming edge count per node.
    pub fn in_degree(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes];
        for &(_, d) in &self.edges {
            deg[d] += 1;
        }
        deg
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchedGraph {
    pub coords: Vec<Point>,
    pub topology: Topology,
    pub pred: Vec<Option<usize>>,
    pub stroke_start: Vec<bool>,
    pub graph_sizes: Vec<usize>,
}

impl BatchedGraph {
    pub fn num_graphs(&self) -> usize {
        self.graph_sizes.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.coords.len()
    }

    /// Node range of graph `g`.
    pub fn node_range(&self, g: usize) -> std::ops::Range<usize> {
        let start: usize = self.graph_sizes[..g].iter().sum();
        start..start + self.graph_sizes[g]
    }
}

/// Disjoint union with node-index offsets applied.
pub fn batch_graphs<'a>(graphs: impl IntoIterator<Item = &'a CharGraph>) -> Result<BatchedGraph> {
    let mut out = BatchedGraph {
        coords: Vec::new(),
        topology: Topology {
            num_nodes: 0,
            edges: Vec::new(),
            batch_id: Vec::new(),
            num_graphs: 0,
        },
        pred: Vec::new(),
        stroke_start: Vec::new(),
        graph_sizes: Vec::new(),
    };
    for (gi, g) in graphs.into_iter().enumerate() {
        if g.directed {
            return Err(SgcnError::invalid(format!(
                "graph {gi} is directed; batch undirected graphs with self-loops"
            )));
        }
        let off = out.coords.len();
        out.coords.extend_from_slice(&g.coords);
        out.topology
            .edges
            .extend(g.edges.iter().map(|&(s, d)| (s + off, d + off)));
        out.topology
            .batch_id
            .extend(std::iter::repeat_n(gi, g.num_nodes()));
        out.pred.extend(g.pred.iter().map(|p| p.map(|j| j + off)));
        out.stroke_start.extend_from_slice(&g.stroke_start);
        out.graph_sizes.push(g.num_nodes());
    }
    out.topology.num_nodes = out.coords.len();
    out.topology.num_graphs = out.graph_sizes.len();
    if out.topology.num_graphs == 0 {
        return Err(SgcnError::invalid("empty batch"));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// complexity

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub height: u64,
    pub width: u64,
    pub num_nodes: u64,
    pub avg_edges: f64,
    pub image_cost: f64,
    pub graph_cost: f64,
    pub ratio: f64,
}

/// Single-channel convolution cost on an `H×W` image (9 taps per pixel)
/// against a graph with `num_nodes` nodes and `avg_edges` neighbors per node.
pub fn conv_cost_ratio(height: u64, width: u64, num_nodes: u64, avg_edges: f64) -> Result<CostReport> {
    if num_nodes == 0 {
        return Err(SgcnError::invalid("node count must be positive"));
    }
    if height == 0 || width == 0 || !(avg_edges > 0.0 && avg_edges.is_finite()) {
        return Err(SgcnError::invalid("image size and edge count must be positive"));
    }
    let image_cost = (height * width * 9) as f64;
    let graph_cost = num_nodes as f64 * avg_edges;
    Ok(CostReport {
        height,
        width,
        num_nodes,
        avg_edges,
        image_cost,
        graph_cost,
        ratio: image_cost / graph_cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(strokes: &[&[Point]]) -> Trajectory {
        Trajectory::new(strokes.iter().map(|s| s.to_vec()).collect()).unwrap()
    }

    fn line(n: usize, y: f64) -> Vec<Point> {
        (0..n).map(|i| [i as f64 * 0.1, y]).collect()
    }

    #[test]
    fn chain_counts() {
        let g = build_graph(&traj(&[&line(5, 0.0)]), true).unwrap();
        assert_eq!((g.num_nodes(), g.edges.len()), (5, 4));

        let t = traj(&[&line(3, 0.0), &line(4, 0.5)]);
        let on = build_graph(&t, true).unwrap();
        assert_eq!((on.num_nodes(), on.edges.len()), (7, 6));
        assert_eq!(on.stroke_start.iter().filter(|&&s| s).count(), 1);
        let off = build_graph(&t, false).unwrap();
        assert_eq!(off.edges.len(), 5);
        assert_eq!(off.stroke_start.iter().filter(|&&s| s).count(), 2);
        // one incoming trajectory edge per non-start node
        for (i, start) in off.stroke_start.iter().enumerate() {
            let incoming = off.edges.iter().filter(|e| e.1 == i).count();
            assert_eq!(incoming, usize::from(!start));
        }
    }

    #[test]
    fn feature_examples() {
        let g = build_graph(&traj(&[&[[0.2, 0.2], [0.3, 0.2]]]), true).unwrap();
        let f = node_features(&g).unwrap();
        let want = [0.3, 0.2, 0.1, 0.0, 0.0, 1.0];
        for (a, b) in f.row(1).iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }

        let g = build_graph(&traj(&[&[[0.5, 0.5]]]), true).unwrap();
        assert_eq!(node_features(&g).unwrap().row(0), &[0.5, 0.5, 0.0, 0.0, 0.0, 0.0]);

        let g = build_graph(&traj(&[&[[0.1, 0.1], [0.15, 0.15]]]), true).unwrap();
        let f = node_features(&g).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((f.row(1)[4] - h).abs() < 1e-12 && (f.row(1)[5] - h).abs() < 1e-12);
    }

    #[test]
    fn direction_is_unit_or_zero() {
        let t = traj(&[&[[0.1, 0.1], [0.1, 0.1], [0.4, 0.2]], &[[0.9, 0.9], [0.8, 0.5]]]);
        let g = build_graph(&t, false).unwrap();
        let f = node_features(&g).unwrap();
        for i in 0..g.num_nodes() {
            let r = f.row(i);
            let s = r[4] * r[4] + r[5] * r[5];
            assert!(s.abs() < 1e-6 || (s - 1.0).abs() < 1e-6);
            assert_eq!(&r[..2], &g.coords[i]);
        }
        assert_eq!(f.row(1)[4..], [0.0, 0.0]);
    }

    #[test]
    fn undirected_examples() {
        let g = build_graph(&traj(&[&line(3, 0.0)]), true).unwrap();
        let u = to_undirected_self_loops(&g);
        assert_eq!(u.edges.len(), 7);
        assert_eq!(to_undirected_self_loops(&u), u);
        assert_eq!(u.num_self_loops(), 3);
        assert_eq!(u.coords, g.coords);
        let long = to_undirected_self_loops(&build_graph(&traj(&[&line(10, 0.0)]), true).unwrap());
        let deg = long.edges.iter().filter(|e| e.1 == 4).count();
        assert_eq!(deg, 3);
        assert!(long.edges.len() <= 4 * long.num_nodes());
    }

    #[test]
    fn batching_offsets_edges() {
        let a = to_undirected_self_loops(&build_graph(&traj(&[&line(3, 0.0)]), true).unwrap());
        let b = to_undirected_self_loops(&build_graph(&traj(&[&line(4, 0.5)]), true).unwrap());
        let one = batch_graphs([&a]).unwrap();
        assert_eq!(one.coords, a.coords);
        assert_eq!(one.topology.edges, a.edges);
        let two = batch_graphs([&a, &b]).unwrap();
        assert_eq!(two.num_nodes(), 7);
        assert_eq!(two.topology.batch_id, vec![0, 0, 0, 1, 1, 1, 1]);
        let tail: Vec<_> = b.edges.iter().map(|&(s, d)| (s + 3, d + 3)).collect();
        assert_eq!(&two.topology.edges[a.edges.len()..], tail.as_slice());
        for &(s, d) in &two.topology.edges {
            assert_eq!(two.topology.batch_id[s], two.topology.batch_id[d]);
        }
        let directed = build_graph(&traj(&[&line(3, 0.0)]), true).unwrap();
        assert!(batch_graphs([&a, &directed]).is_err());
    }

    #[test]
    fn cost_examples() {
        let r = conv_cost_ratio(64, 64, 100, 3.0).unwrap();
        assert_eq!(r.ratio, 122.88);
        assert_eq!(conv_cost_ratio(1, 1, 1, 9.0).unwrap().ratio, 1.0);
        let half = conv_cost_ratio(64, 64, 200, 3.0).unwrap();
        assert_eq!(half.ratio * 2.0, r.ratio);
        assert!(conv_cost_ratio(64, 64, 0, 3.0).is_err());
    }
}
