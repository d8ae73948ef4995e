//! Finite-difference checks of every differentiable stage, in `f64`.
//!
//! Each check reduces the stage output to a scalar with a fixed random
//! weighting and compares tape gradients against central differences.
//! Continuous inputs are drawn away from kinks (ReLU zero, knot lines,
//! max ties) so the differences are taken where the function is smooth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::chargraph::{node_features_op, Topology};
use crate::error::Result;
use crate::network::{cos_loss, rs_gcb_forward, BlockOpts, RsGcbVars};
use crate::numcore::{gradcheck, GradcheckOptions, GradcheckReport, Mode, Reduce, Tape, Tensor, Var};
use crate::splineconv::{pseudo_coords, spline_conv};
use crate::transform::{feature_stn, input_stn, StnParams, StnVars, SIMILARITY_PARAMS};

/// Tolerance for single operations.
pub const OP_TOL: f64 = 1e-4;
/// Tolerance for the composed residual block.
pub const BLOCK_TOL: f64 = 1e-3;
pub const SUITE_EPS: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub probes: usize,
    pub passed: bool,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

/// Magnitudes in `[0.1, 1)` with random sign, clear of zero.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::new(shape, v).expect("shape matches")
}

/// Path graph with self-loops and irregular coordinates, so every offset
/// norm is distinct.
fn chain(n: usize, graphs: usize) -> (Topology, Tensor<f64>) {
    let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    let per = n.div_ceil(graphs);
    let batch_id: Vec<usize> = (0..n).map(|i| i / per).collect();
    for i in 1..n {
        if batch_id[i] == batch_id[i - 1] {
            edges.push((i - 1, i));
            edges.push((i, i - 1));
        }
    }
    edges.sort_unstable_by_key(|&(s, d)| (d, s));
    let coords = (0..n)
        .flat_map(|i| {
            let t = i as f64;
            [0.08 * t + 0.011 * t * t, 0.3 + 0.1 * (1.3 * t).sin()]
        })
        .collect();
    let topo = Topology {
        num_nodes: n,
        edges,
        batch_id,
        num_graphs: graphs,
    };
    (topo, Tensor::new(&[n, 2], coords).expect("shape matches"))
}

fn stn_inputs(rng: &mut ChaCha8Rng, din: usize, head: usize) -> Result<Vec<Tensor<f64>>> {
    let mut p = StnParams::<f64>::new(din, &[5, 6, 4], head, rng)?;
    // away from the zero-initialized identity so the head gradient is generic
    for v in p.head.0.data_mut().iter_mut().chain(p.head.1.data_mut()) {
        *v = rng.random_range(-0.5..0.5);
    }
    // live hidden units: all-zero ReLU channels tie in the per-graph max
    for (_, b) in &mut p.layers {
        b.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.2..0.6));
    }
    Ok(p.named("stn").into_iter().map(|(_, t)| t.with_grad()).collect())
}

fn stn_vars(v: &[Var]) -> StnVars {
    StnVars {
        layers: (0..3).map(|i| (v[2 * i], v[2 * i + 1])).collect(),
        head: (v[6], v[7]),
    }
}

/// `Σ out ⊙ r` for a constant weighting `r`.
fn weighted(t: &mut Tape<f64>, out: Var, r: Var) -> Result<Var> {
    let y = t.mul(out, r)?;
    Ok(t.sum(y))
}

type Check = (&'static str, f64, Box<dyn FnOnce(&mut ChaCha8Rng, GradcheckOptions) -> Result<GradcheckReport>>);

fn checks() -> Vec<Check> {
    let mut v: Vec<Check> = Vec::new();
    v.push((
        "linear_affine",
        OP_TOL,
        Box::new(|rng, o| {
            let inputs = vec![
                uniform(rng, &[5, 4], -1.0, 1.0).with_grad(),
                uniform(rng, &[4, 3], -1.0, 1.0).with_grad(),
                uniform(rng, &[3], -1.0, 1.0).with_grad(),
                uniform(rng, &[5, 3], -1.0, 1.0),
            ];
            gradcheck(&inputs, o, |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                weighted(t, y, v[3])
            })
        }),
    ));
    for (name, mode) in [
        ("segment_reduce_sum", Reduce::Sum),
        ("segment_reduce_mean", Reduce::Mean),
        ("segment_reduce_max", Reduce::Max),
    ] {
        v.push((
            name,
            OP_TOL,
            Box::new(move |rng, o| {
                // segment 2 stays empty
                let ids = [0, 1, 0, 3, 1, 3, 3, 0];
                let inputs = vec![uniform(rng, &[8, 3], -1.0, 1.0).with_grad(), uniform(rng, &[4, 3], -1.0, 1.0)];
                gradcheck(&inputs, o, |t, v| {
                    let y = t.segment_reduce(v[0], &ids, 4, mode)?;
                    weighted(t, y, v[1])
                })
            }),
        ));
    }
    v.push((
        "batch_norm",
        OP_TOL,
        Box::new(|rng, o| {
            let inputs = vec![
                uniform(rng, &[7, 3], -1.0, 1.0).with_grad(),
                uniform(rng, &[3], 0.5, 1.5).with_grad(),
                uniform(rng, &[3], -0.5, 0.5).with_grad(),
                uniform(rng, &[7, 3], -1.0, 1.0),
            ];
            gradcheck(&inputs, o, |t, v| {
                let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
                weighted(t, y, v[3])
            })
        }),
    ));
    v.push((
        "prelu",
        OP_TOL,
        Box::new(|rng, o| {
            let inputs = vec![
                off_zero(rng, &[6, 3]).with_grad(),
                uniform(rng, &[3], 0.05, 0.5).with_grad(),
                uniform(rng, &[6, 3], -1.0, 1.0),
            ];
            gradcheck(&inputs, o, |t, v| {
                let y = t.prelu(v[0], v[1])?;
                weighted(t, y, v[2])
            })
        }),
    ));
    v.push((
        "node_features",
        OP_TOL,
        Box::new(|rng, o| {
            let (_, coords) = chain(8, 2);
            let pred: Vec<Option<usize>> = (0..8).map(|i| (i % 4 != 0).then(|| i - 1)).collect();
            let inputs = vec![coords.with_grad(), uniform(rng, &[8, 6], -1.0, 1.0)];
            gradcheck(&inputs, o, |t, v| {
                let y = node_features_op(t, v[0], &pred)?;
                weighted(t, y, v[1])
            })
        }),
    ));
    v.push((
        "pseudo_coords",
        OP_TOL,
        Box::new(|rng, o| {
            let (topo, coords) = chain(9, 2);
            let e = topo.edges.len();
            let inputs = vec![coords.with_grad(), uniform(rng, &[e, 2], -1.0, 1.0)];
            gradcheck(&inputs, o, |t, v| {
                let u = pseudo_coords(t, v[0], &topo, false)?.u;
                weighted(t, u, v[1])
            })
        }),
    ));
    v.push((
        "spline_conv",
        OP_TOL,
        Box::new(|rng, o| {
            let (topo, _) = chain(8, 1);
            let e = topo.edges.len();
            // knot lines of k=3, degree 1 sit at 0.5
            let u: Vec<f64> = (0..2 * e)
                .map(|_| {
                    let v: f64 = rng.random_range(0.05..0.45);
                    if rng.random::<bool>() { v + 0.5 } else { v }
                })
                .collect();
            let inputs = vec![
                uniform(rng, &[8, 3], -1.0, 1.0).with_grad(),
                uniform(rng, &[9, 3, 2], -1.0, 1.0).with_grad(),
                Tensor::new(&[e, 2], u)?.with_grad(),
                uniform(rng, &[8, 2], -1.0, 1.0),
            ];
            gradcheck(&inputs, o, |t, v| {
                let y = spline_conv(t, v[0], v[1], v[2], &topo, 3, 1)?;
                weighted(t, y, v[3])
            })
        }),
    ));
    v.push((
        "input_stn",
        OP_TOL,
        Box::new(|rng, o| {
            let (topo, coords) = chain(7, 2);
            let mut inputs = stn_inputs(rng, 2, SIMILARITY_PARAMS)?;
            inputs.push(coords.with_grad());
            inputs.push(uniform(rng, &[7, 2], -1.0, 1.0));
            gradcheck(&inputs, o, |t, v| {
                let (y, _) = input_stn(t, v[8], &stn_vars(v), &topo.batch_id, 2)?;
                weighted(t, y, v[9])
            })
        }),
    ));
    v.push((
        "feature_stn",
        OP_TOL,
        Box::new(|rng, o| {
            let d = 3;
            let mut inputs = stn_inputs(rng, d, d * d)?;
            inputs.push(uniform(rng, &[6, d], 0.0, 1.0).with_grad());
            inputs.push(uniform(rng, &[6, d], -1.0, 1.0));
            let ids = [0, 0, 0, 1, 1, 1];
            gradcheck(&inputs, o, |t, v| {
                let y = feature_stn(t, v[8], &stn_vars(v), &ids, 2)?;
                weighted(t, y, v[9])
            })
        }),
    ));
    v.push((
        "rs_gcb",
        BLOCK_TOL,
        Box::new(|rng, o| {
            let (n, cin, c) = (7, 2, 3);
            let (topo, coords) = chain(n, 1);
            let inputs = vec![
                uniform(rng, &[n, cin], -1.0, 1.0).with_grad(),
                uniform(rng, &[9, cin, c], -0.6, 0.6).with_grad(),
                uniform(rng, &[c], 0.5, 1.5).with_grad(),
                uniform(rng, &[c], -0.3, 0.3).with_grad(),
                uniform(rng, &[c], 0.1, 0.4).with_grad(),
                uniform(rng, &[9, c, c], -0.6, 0.6).with_grad(),
                uniform(rng, &[c], 0.5, 1.5).with_grad(),
                uniform(rng, &[c], -0.3, 0.3).with_grad(),
                uniform(rng, &[c], 0.1, 0.4).with_grad(),
                uniform(rng, &[cin, c], -1.0, 1.0).with_grad(),
                coords.with_grad(),
                uniform(rng, &[n, c], -1.0, 1.0),
            ];
            let opts = BlockOpts {
                kernel_size: 3,
                degree: 1,
                dropout: 0.2,
                bn_eps: 1e-5,
            };
            gradcheck(&inputs, o, |t, v| {
                let u = pseudo_coords(t, v[10], &topo, false)?.u;
                let vars = RsGcbVars {
                    conv1: v[1],
                    bn1: (v[2], v[3]),
                    prelu1: v[4],
                    conv2: v[5],
                    bn2: (v[6], v[7]),
                    prelu2: v[8],
                    shortcut: Some(v[9]),
                };
                let running = [&[0.0; 3][..], &[1.0; 3], &[0.0; 3], &[1.0; 3]];
                // the same dropout mask at every probe
                let mut mask = ChaCha8Rng::seed_from_u64(99);
                let (y, _) = rs_gcb_forward(t, v[0], &topo, u, &vars, running, Mode::Train, &opts, &mut mask)?;
                weighted(t, y, v[11])
            })
        }),
    ));
    v.push((
        "cos_loss",
        OP_TOL,
        Box::new(|rng, o| {
            let inputs = vec![
                uniform(rng, &[4, 5], -1.0, 1.0).with_grad(),
                uniform(rng, &[3, 5], -1.0, 1.0).with_grad(),
            ];
            gradcheck(&inputs, o, |t, v| cos_loss(t, v[0], v[1], &[0, 2, 1, 2], 16.0, 0.2))
        }),
    ));
    v
}

/// Names of the checks, in run order.
pub fn suite_names() -> Vec<&'static str> {
    checks().into_iter().map(|(n, _, _)| n).collect()
}

/// Runs every check with inputs drawn from `seed`.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let opts = GradcheckOptions {
        eps: SUITE_EPS,
        max_probes_per_input: None,
        seed,
    };
    checks()
        .into_iter()
        .enumerate()
        .map(|(i, (name, tolerance, check))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let r = check(&mut rng, opts)?;
            Ok(SuiteEntry {
                name: name.to_string(),
                max_rel_error: r.max_rel_error,
                tolerance,
                probes: r.probes,
                passed: r.max_rel_error < tolerance,
            })
        })
        .collect()
}
