//! Grid-cluster pooling: nodes of one graph that fall into the same grid cell
//! merge into one coarse node at their mean position.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::chargraph::Topology;
use crate::error::{Result, SgcnError};
use crate::numcore::{Real, Reduce, Tape, Var};

/// Cell sizes of successive pooling levels on the unit square.
pub const DEFAULT_CELLS: [f64; 3] = [0.05, 0.1, 0.2];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    #[default]
    Max,
    Mean,
}

impl From<PoolMode> for Reduce {
    fn from(m: PoolMode) -> Reduce {
        match m {
            PoolMode::Max => Reduce::Max,
            PoolMode::Mean => Reduce::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    pub cluster_id: Vec<usize>,
    pub num_clusters: usize,
    pub cell_size: f64,
}

/// Clusters by `(graph, ⌊x/cell⌋, ⌊y/cell⌋)`; ids follow first occurrence.
pub fn grid_cluster<T: Real>(coords: &[T], batch_id: &[usize], cell_size: f64) -> Result<ClusterAssignment> {
    if !(cell_size > 0.0 && cell_size.is_finite()) {
        return Err(SgcnError::invalid(format!("cell size {cell_size} must be > 0")));
    }
    if coords.len() != 2 * batch_id.len() {
        return Err(SgcnError::shape(format!(
            "{} coordinates for {} nodes",
            coords.len(),
            batch_id.len()
        )));
    }
    let mut ids: HashMap<(usize, i64, i64), usize> = HashMap::new();
    let cluster_id = batch_id
        .iter()
        .enumerate()
        .map(|(i, &g)| {
            let cx = (coords[2 * i].as_f64() / cell_size).floor() as i64;
            let cy = (coords[2 * i + 1].as_f64() / cell_size).floor() as i64;
            let next = ids.len();
            *ids.entry((g, cx, cy)).or_insert(next)
        })
        .collect();
    Ok(ClusterAssignment {
        cluster_id,
        num_clusters: ids.len(),
        cell_size,
    })
}

/// Inter-cluster edges without duplicates plus one self-loop per cluster,
/// sorted by `(dst, src)`.
pub fn pool_edges(edges: &[(usize, usize)], assignment: &ClusterAssignment) -> Vec<(usize, usize)> {
    let c = &assignment.cluster_id;
    let mut out: Vec<(usize, usize)> = edges
        .iter()
        .map(|&(s, d)| (c[s], c[d]))
        .filter(|(a, b)| a != b)
        .chain((0..assignment.num_clusters).map(|k| (k, k)))
        .collect();
    out.sort_unstable_by_key(|&(s, d)| (d, s));
    out.dedup();
    out
}

/// Coarse graph after pooling.
#[derive(Clone, Debug)]
pub struct Pooled {
    pub topology: Topology,
    pub coords: Var,
    pub features: Var,
    pub assignment: ClusterAssignment,
}

/// Mean coordinates and max (or mean) features per cluster.
pub fn pool_graph<T: Real>(
    tape: &mut Tape<T>,
    topo: &Topology,
    coords: Var,
    features: Var,
    assignment: ClusterAssignment,
    mode: PoolMode,
) -> Result<Pooled> {
    if assignment.cluster_id.len() != topo.num_nodes {
        return Err(SgcnError::shape(format!(
            "{} cluster ids for {} nodes",
            assignment.cluster_id.len(),
            topo.num_nodes
        )));
    }
    let k = assignment.num_clusters;
    let pc = tape.segment_reduce(coords, &assignment.cluster_id, k, Reduce::Mean)?;
    let pf = tape.segment_reduce(features, &assignment.cluster_id, k, mode.into())?;
    let mut batch_id = vec![usize::MAX; k];
    for (i, &c) in assignment.cluster_id.iter().enumerate() {
        if batch_id[c] == usize::MAX {
            batch_id[c] = topo.batch_id[i];
        }
    }
    let topology = Topology {
        num_nodes: k,
        edges: pool_edges(&topo.edges, &assignment),
        batch_id,
        num_graphs: topo.num_graphs,
    };
    Ok(Pooled {
        topology,
        coords: pc,
        features: pf,
        assignment,
    })
}

/// Clusters on the current coordinates and pools.
pub fn grid_pool<T: Real>(
    tape: &mut Tape<T>,
    topo: &Topology,
    coords: Var,
    features: Var,
    cell_size: f64,
    mode: PoolMode,
) -> Result<Pooled> {
    let a = grid_cluster(tape.value(coords), &topo.batch_id, cell_size)?;
    pool_graph(tape, topo, coords, features, a, mode)
}
