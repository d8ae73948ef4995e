use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::chargraph::{node_features_op, BatchedGraph, Topology, FEATURE_DIM};
use crate::coarsen::grid_pool;
use crate::error::{Result, SgcnError};
use crate::numcore::{BatchStats, Mode, Real, Reduce, Tape, Tensor, Var};
use crate::splineconv::{pseudo_coords, spline_conv, SplineKernel};
use crate::transform::{feature_stn, input_stn, StnParams, StnVars, SIMILARITY_PARAMS};

use super::config::{Block, FeatureMode, ModelConfig};
use super::params::{Bound, ParamStore};

const PRELU_INIT: f64 = 0.25;
const NORM_EPS: f64 = 1e-12;

/// Hyper-parameters shared by the convolutions of a residual block.
#[derive(Clone, Copy, Debug)]
pub struct BlockOpts {
    pub kernel_size: usize,
    pub degree: usize,
    pub dropout: f64,
    pub bn_eps: f64,
}

/// Tape handles of one residual block.
#[derive(Clone, Copy, Debug)]
pub struct RsGcbVars {
    pub conv1: Var,
    pub bn1: (Var, Var),
    pub prelu1: Var,
    pub conv2: Var,
    pub bn2: (Var, Var),
    pub prelu2: Var,
    pub shortcut: Option<Var>,
}

impl RsGcbVars {
    pub fn lookup(prefix: &str, bound: &Bound) -> Result<Self> {
        let v = |s: &str| bound.var(&format!("{prefix}.{s}"));
        Ok(RsGcbVars {
            conv1: v("conv1.weight")?,
            bn1: (v("bn1.gamma")?, v("bn1.beta")?),
            prelu1: v("prelu1")?,
            conv2: v("conv2.weight")?,
            bn2: (v("bn2.gamma")?, v("bn2.beta")?),
            prelu2: v("prelu2")?,
            shortcut: v("shortcut.weight").ok(),
        })
    }
}

/// Running batch-norm statistics of one block: `[mean1, var1, mean2, var2]`.
pub type BlockRunning<'a, T> = [&'a [T]; 4];

fn batch_norm<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    (gamma, beta): (Var, Var),
    running: (&[T], &[T]),
    mode: Mode,
    eps: T,
) -> Result<(Var, Option<BatchStats<T>>)> {
    match mode {
        Mode::Train => {
            let (y, s) = tape.batch_norm_train(x, gamma, beta, eps)?;
            Ok((y, Some(s)))
        }
        Mode::Eval => Ok((tape.batch_norm_eval(x, gamma, beta, running.0, running.1, eps)?, None)),
    }
}

/// `PReLU(BN(conv2(Dropout(PReLU(BN(conv1 x))))) + shortcut(x))`, both
/// convolutions over the same pseudo-coordinates `u`.
#[allow(clippy::too_many_arguments)]
pub fn rs_gcb_forward<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    x: Var,
    topo: &Topology,
    u: Var,
    vars: &RsGcbVars,
    running: BlockRunning<'_, T>,
    mode: Mode,
    opts: &BlockOpts,
    rng: &mut R,
) -> Result<(Var, [Option<BatchStats<T>>; 2])> {
    let (_, cin) = tape.dims2(x)?;
    let cout = tape.shape(vars.conv1)[2];
    let eps = T::from_f64_lossy(opts.bn_eps);
    let (k, m) = (opts.kernel_size, opts.degree);
    let h = spline_conv(tape, x, vars.conv1, u, topo, k, m)?;
    let (h, s1) = batch_norm(tape, h, vars.bn1, (running[0], running[1]), mode, eps)?;
    let h = tape.prelu(h, vars.prelu1)?;
    let h = tape.dropout(h, opts.dropout, mode, rng)?;
    let h = spline_conv(tape, h, vars.conv2, u, topo, k, m)?;
    let (h, s2) = batch_norm(tape, h, vars.bn2, (running[2], running[3]), mode, eps)?;
    let skip = match vars.shortcut {
        Some(w) => tape.matmul(x, w)?,
        None if cin == cout => x,
        None => {
            return Err(SgcnError::shape(format!(
                "residual block maps {cin} to {cout} channels without a projection"
            )))
        }
    };
    let y = tape.add(h, skip)?;
    Ok((tape.prelu(y, vars.prelu2)?, [s1, s2]))
}

/// Mean cross-entropy of `σ·cos(e_b, w_k)` logits, with `σ·(cos − m)` at the
/// target class.
pub fn cos_loss<T: Real>(
    tape: &mut Tape<T>,
    embedding: Var,
    class_weights: Var,
    labels: &[usize],
    sigma: f64,
    margin: f64,
) -> Result<Var> {
    let (k, _) = tape.dims2(class_weights)?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(SgcnError::invalid(format!("label {bad} out of range for {k} classes")));
    }
    let cos = cosine(tape, embedding, class_weights)?;
    let cos = if margin != 0.0 {
        let mut m = vec![T::zero(); labels.len() * k];
        for (b, &l) in labels.iter().enumerate() {
            m[b * k + l] = T::from_f64_lossy(margin);
        }
        let m = tape.constant(&[labels.len(), k], m)?;
        tape.sub(cos, m)?
    } else {
        cos
    };
    let logits = tape.scale(cos, T::from_f64_lossy(sigma));
    tape.cross_entropy(logits, labels)
}

fn cosine<T: Real>(tape: &mut Tape<T>, embedding: Var, class_weights: Var) -> Result<Var> {
    let eps = T::from_f64_lossy(NORM_EPS);
    let e = tape.l2_normalize_rows(embedding, eps)?;
    let w = tape.l2_normalize_rows(class_weights, eps)?;
    tape.matmul_nt(e, w)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub num_params: usize,
    /// Four bytes per stored value, running statistics included.
    pub storage_bytes: usize,
}

/// Result of one forward pass.
pub struct Forward<T: Real> {
    /// `B × num_classes`, `σ·cos` without margin.
    pub logits: Var,
    pub embedding: Var,
    /// Batch statistics per running-stat prefix (training mode only).
    pub bn_updates: Vec<(String, BatchStats<T>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgcnModel<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    /// Batch-norm running statistics.
    pub buffers: ParamStore<T>,
}

fn glorot<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<Tensor<T>> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| T::from_f64_lossy(rng.random_range(-bound..=bound))).collect(),
    )
}

impl<T: Real> SgcnModel<T> {
    /// Fresh parameters drawn from `seed`. Transformer heads start at zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let k2 = config.kernel_size * config.kernel_size;
        let mut width = 0;
        for (i, block) in config.blocks.iter().enumerate() {
            let p = format!("b{i}");
            match *block {
                Block::InputStn => {
                    for (n, t) in StnParams::new(2, &config.stn_hidden, SIMILARITY_PARAMS, &mut rng)?.named(&format!("{p}.stn")) {
                        params.insert(n, t)?;
                    }
                }
                Block::FeatLayer => width = FEATURE_DIM,
                Block::RsGcb { channels } => {
                    let cout = config.scaled(channels);
                    let c1 = SplineKernel::<T>::new(config.kernel_size, config.degree, width, cout, &mut rng)?;
                    let c2 = SplineKernel::<T>::new(config.kernel_size, config.degree, cout, cout, &mut rng)?;
                    debug_assert_eq!(c1.weights.shape()[0], k2);
                    params.insert(format!("{p}.conv1.weight"), c1.weights)?;
                    params.insert(format!("{p}.bn1.gamma"), Tensor::full(&[cout], T::one()))?;
                    params.insert(format!("{p}.bn1.beta"), Tensor::zeros(&[cout]))?;
                    params.insert(format!("{p}.prelu1"), Tensor::full(&[cout], T::from_f64_lossy(PRELU_INIT)))?;
                    params.insert(format!("{p}.conv2.weight"), c2.weights)?;
                    params.insert(format!("{p}.bn2.gamma"), Tensor::full(&[cout], T::one()))?;
                    params.insert(format!("{p}.bn2.beta"), Tensor::zeros(&[cout]))?;
                    params.insert(format!("{p}.prelu2"), Tensor::full(&[cout], T::from_f64_lossy(PRELU_INIT)))?;
                    if width != cout {
                        params.insert(format!("{p}.shortcut.weight"), glorot(&mut rng, &[width, cout], width, cout)?)?;
                    }
                    for bn in ["bn1", "bn2"] {
                        buffers.insert(format!("{p}.{bn}.running_mean"), Tensor::zeros(&[cout]))?;
                        buffers.insert(format!("{p}.{bn}.running_var"), Tensor::full(&[cout], T::one()))?;
                    }
                    width = cout;
                }
                Block::FeatureStn => {
                    for (n, t) in StnParams::new(width, &config.stn_hidden, width * width, &mut rng)?.named(&format!("{p}.stn")) {
                        params.insert(n, t)?;
                    }
                }
                Block::Pool { .. } | Block::GlobalAvg => {}
                Block::Fc { channels } => {
                    let c = config.scaled(channels);
                    params.insert(format!("{p}.fc.weight"), glorot(&mut rng, &[width, c], width, c)?)?;
                    params.insert(format!("{p}.fc.bias"), Tensor::zeros(&[c]))?;
                    width = c;
                }
            }
        }
        params.insert("head.weight", glorot(&mut rng, &[config.num_classes, width], width, config.num_classes)?)?;
        Ok(SgcnModel {
            config,
            params,
            buffers,
        })
    }

    pub fn cast<U: Real>(&self) -> SgcnModel<U> {
        SgcnModel {
            config: self.config.clone(),
            params: self.params.cast(),
            buffers: self.buffers.cast(),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.params.get("head.weight").map_or(0, |t| t.shape()[1])
    }

    pub fn param_count(&self) -> ParamCount {
        let num_params = self.params.num_elements();
        ParamCount {
            num_params,
            storage_bytes: 4 * (num_params + self.buffers.num_elements()),
        }
    }

    fn block_opts(&self) -> BlockOpts {
        BlockOpts {
            kernel_size: self.config.kernel_size,
            degree: self.config.degree,
            dropout: self.config.dropout,
            bn_eps: self.config.bn_eps,
        }
    }

    /// Runs the block list over `batch`. In training mode the returned batch
    /// statistics should be folded in with [`SgcnModel::apply_bn_updates`].
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        batch: &BatchedGraph,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Forward<T>> {
        let cfg = &self.config;
        let b = batch.num_graphs();
        let flat: Vec<T> = batch.coords.iter().flatten().map(|&v| T::from_f64_lossy(v)).collect();
        let mut coords = tape.constant(&[batch.num_nodes(), 2], flat)?;
        let mut topo = batch.topology.clone();
        let mut features: Option<Var> = None;
        let mut pseudo: Option<Var> = None;
        let mut pooled: Option<Var> = None;
        let mut bn_updates = Vec::new();
        let cells = cfg.pool_cells();
        let mut level = 0;
        let opts = self.block_opts();
        let last = cfg.blocks.len() - 1;
        let need = |f: Option<Var>, i: usize| {
            f.ok_or_else(|| SgcnError::invalid(format!("block {i} needs node features")))
        };
        for (i, block) in cfg.blocks.iter().enumerate() {
            let p = format!("b{i}");
            match *block {
                Block::InputStn => {
                    let vars = StnVars::lookup(&format!("{p}.stn"), cfg.stn_hidden.len(), |n| bound.var(n))?;
                    coords = input_stn(tape, coords, &vars, &topo.batch_id, b)?.0;
                    pseudo = None;
                }
                Block::FeatLayer => {
                    let n = topo.num_nodes;
                    let f = match cfg.features {
                        FeatureMode::Full => node_features_op(tape, coords, &batch.pred)?,
                        FeatureMode::Constant => tape.constant(&[n, FEATURE_DIM], vec![T::one(); n * FEATURE_DIM])?,
                        FeatureMode::Spatial | FeatureMode::Temporal => {
                            let keep_xy = cfg.features == FeatureMode::Spatial;
                            let mask: Vec<T> = (0..n * FEATURE_DIM)
                                .map(|j| if (j % FEATURE_DIM < 2) == keep_xy { T::one() } else { T::zero() })
                                .collect();
                            let f = node_features_op(tape, coords, &batch.pred)?;
                            let mask = tape.constant(&[n, FEATURE_DIM], mask)?;
                            tape.mul(f, mask)?
                        }
                    };
                    features = Some(f);
                }
                Block::RsGcb { .. } => {
                    let u = match pseudo {
                        Some(u) => u,
                        None => {
                            let u = pseudo_coords(tape, coords, &topo, !cfg.pseudo_grad)?.u;
                            pseudo = Some(u);
                            u
                        }
                    };
                    let vars = RsGcbVars::lookup(&p, bound)?;
                    let r = |s: &str| self.buffers.get(&format!("{p}.{s}")).map(|t| t.data());
                    let running = [
                        r("bn1.running_mean")?,
                        r("bn1.running_var")?,
                        r("bn2.running_mean")?,
                        r("bn2.running_var")?,
                    ];
                    let (y, stats) =
                        rs_gcb_forward(tape, need(features, i)?, &topo, u, &vars, running, mode, &opts, rng)?;
                    for (s, bn) in stats.into_iter().zip(["bn1", "bn2"]) {
                        if let Some(s) = s {
                            bn_updates.push((format!("{p}.{bn}"), s));
                        }
                    }
                    features = Some(y);
                }
                Block::Pool { .. } => {
                    let out = grid_pool(tape, &topo, coords, need(features, i)?, cells[level], cfg.pool_mode)?;
                    level += 1;
                    topo = out.topology;
                    coords = out.coords;
                    features = Some(out.features);
                    pseudo = None;
                }
                Block::FeatureStn => {
                    let vars = StnVars::lookup(&format!("{p}.stn"), cfg.stn_hidden.len(), |n| bound.var(n))?;
                    features = Some(feature_stn(tape, need(features, i)?, &vars, &topo.batch_id, b)?);
                }
                Block::GlobalAvg => {
                    pooled = Some(tape.segment_reduce(need(features, i)?, &topo.batch_id, b, Reduce::Mean)?);
                }
                Block::Fc { .. } => {
                    let x = pooled.ok_or_else(|| SgcnError::invalid("fc before global_avg"))?;
                    let y = tape.linear(x, bound.var(&format!("{p}.fc.weight"))?, Some(bound.var(&format!("{p}.fc.bias"))?))?;
                    pooled = Some(if i == last { y } else { tape.relu(y) });
                }
            }
        }
        let embedding = pooled.ok_or_else(|| SgcnError::invalid("model has no classifier"))?;
        let cos = cosine(tape, embedding, bound.var("head.weight")?)?;
        let logits = tape.scale(cos, T::from_f64_lossy(cfg.sigma));
        Ok(Forward {
            logits,
            embedding,
            bn_updates,
        })
    }

    /// Cosine loss of a forward pass with the configured scale and margin.
    pub fn loss(&self, tape: &mut Tape<T>, bound: &Bound, fwd: &Forward<T>, labels: &[usize]) -> Result<Var> {
        cos_loss(
            tape,
            fwd.embedding,
            bound.var("head.weight")?,
            labels,
            self.config.sigma,
            self.config.margin,
        )
    }

    /// `running ← (1 − momentum)·running + momentum·batch`.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats<T>)]) -> Result<()> {
        let mom = T::from_f64_lossy(self.config.bn_momentum);
        let keep = T::one() - mom;
        for (prefix, s) in updates {
            for (name, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let t = self.buffers.get_mut(&format!("{prefix}.{name}"))?;
                for (r, &v) in t.data_mut().iter_mut().zip(batch) {
                    *r = keep * *r + mom * v;
                }
            }
        }
        Ok(())
    }

    /// Eval-mode logits `B × num_classes`.
    pub fn predict(&self, batch: &BatchedGraph) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        // eval mode never draws from the generator
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = self.forward(&mut tape, &bound, batch, Mode::Eval, &mut rng)?;
        Ok(tape.tensor(fwd.logits))
    }
}
