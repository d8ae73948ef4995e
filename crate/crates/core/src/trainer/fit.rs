use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chargraph::{batch_graphs, CharGraph};
use crate::error::{Result, SgcnError};
use crate::ink::Dataset;
use crate::network::{prepare_graph, ModelConfig, SgcnModel};
use crate::numcore::{AdamConfig, AdamState, Mode, Tape, Tensor};

use super::checkpoint::{model_checkpoint, push_store, read_store, Checkpoint};
use super::schedule::Plateau;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplier applied on a plateau.
    pub decay: f64,
    /// Evaluations without improvement before decaying.
    pub patience: usize,
    pub min_lr: f64,
    pub max_epochs: usize,
    pub seed: u64,
    /// Share of the data held out when no evaluation set is given.
    pub eval_fraction: f64,
    /// Top-k reported next to top-1.
    pub topk: usize,
    /// When false the `seconds` column is written as zero, so that reruns
    /// produce byte-identical histories.
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            lr: 0.002,
            decay: 0.1,
            patience: 3,
            min_lr: 1e-5,
            max_epochs: 30,
            seed: 0,
            eval_fraction: 0.2,
            topk: 5,
            record_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SgcnError::invalid(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return bad("decay must lie in (0, 1)");
        }
        if !(self.lr > 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return bad("need 0 <= min_lr <= lr and lr > 0");
        }
        if self.patience == 0 || self.topk == 0 {
            return bad("patience and topk must be positive");
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return bad("eval_fraction must lie in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub top1: f64,
    pub topk: f64,
    pub k: usize,
    /// Mean cross-entropy of the scaled cosine logits, no margin.
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    pub top1: f64,
    pub topk: f64,
    pub eval_loss: f64,
    /// Learning rate in effect during the epoch.
    pub lr: f64,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,loss,top1,lr,seconds";

pub fn metrics_csv(history: &[EpochRecord]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in history {
        s.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.loss, r.top1, r.lr, r.seconds));
    }
    s
}

/// Preprocessed graphs with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphSet {
    pub graphs: Vec<CharGraph>,
    pub labels: Vec<usize>,
}

impl GraphSet {
    pub fn from_dataset(ds: &Dataset, config: &ModelConfig) -> Result<Self> {
        let graphs = ds
            .samples
            .par_iter()
            .map(|s| prepare_graph(&s.trajectory, config))
            .collect::<Result<Vec<_>>>()?;
        Ok(GraphSet {
            graphs,
            labels: ds.samples.iter().map(|s| s.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }
}

/// Seeded shuffle, then the first `1 − eval_fraction` share for training.
pub fn split_dataset(ds: &Dataset, eval_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_eval = (ds.len() as f64 * eval_fraction).round() as usize;
    let cut = ds.len() - n_eval;
    if cut == 0 || n_eval == 0 {
        return Err(SgcnError::invalid(format!(
            "cannot split {} samples with eval fraction {eval_fraction}",
            ds.len()
        )));
    }
    Ok((ds.subset(&idx[..cut]), ds.subset(&idx[cut..])))
}

/// Row argmax; the first index wins exact ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest entries, descending, lower index first on ties.
pub fn top_k(row: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn row_loss(row: &[f32], label: usize) -> f64 {
    let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let z: f64 = row.iter().map(|&v| (v as f64 - mx).exp()).sum();
    z.ln() + mx - row[label] as f64
}

/// Eval-mode metrics over `set` in batches of `batch_size`.
pub fn evaluate(model: &SgcnModel<f32>, set: &GraphSet, batch_size: usize, k: usize) -> Result<Metrics> {
    if set.is_empty() {
        return Err(SgcnError::invalid("empty evaluation set"));
    }
    let k = k.clamp(1, model.config.num_classes);
    let (mut hit1, mut hitk, mut loss) = (0usize, 0usize, 0.0);
    for (graphs, labels) in set.graphs.chunks(batch_size.max(1)).zip(set.labels.chunks(batch_size.max(1))) {
        let logits = model.predict(&batch_graphs(graphs)?)?;
        for (i, &label) in labels.iter().enumerate() {
            let row = logits.row(i);
            hit1 += usize::from(argmax(row) == label);
            hitk += usize::from(top_k(row, k).contains(&label));
            loss += row_loss(row, label);
        }
    }
    let n = set.len() as f64;
    Ok(Metrics {
        count: set.len(),
        top1: hit1 as f64 / n,
        topk: hitk as f64 / n,
        k,
        loss: loss / n,
    })
}

/// Serializable progress of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub lr: f64,
    pub plateau: Plateau,
    pub history: Vec<EpochRecord>,
    pub best_top1: Option<f64>,
    /// Set once the schedule has bottomed out without further improvement.
    pub converged: bool,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct TrainerMeta {
    config: TrainConfig,
    state: TrainState,
    rng: RngState,
    adam_step: u64,
    adam: AdamConfig,
}

/// Mini-batch ADAM training with a plateau schedule and best-model tracking.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: SgcnModel<f32>,
    pub adam: AdamState<f32>,
    pub config: TrainConfig,
    pub state: TrainState,
    /// Weights with the highest evaluation top-1 so far.
    pub best: Option<SgcnModel<f32>>,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: SgcnModel<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(
            model.params.iter().map(|(_, t)| t),
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
        )?;
        Ok(Trainer {
            state: TrainState {
                epoch: 0,
                lr: config.lr,
                plateau: Plateau::default(),
                history: Vec::new(),
                best_top1: None,
                converged: false,
            },
            best: None,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            adam,
            config,
        })
    }

    pub fn finished(&self) -> bool {
        self.state.converged || self.state.epoch >= self.config.max_epochs
    }

    /// Runs epochs until `max_epochs` or convergence. `on_epoch` sees the
    /// trainer after every epoch, e.g. to write a checkpoint.
    pub fn fit(
        &mut self,
        train: &GraphSet,
        eval: &GraphSet,
        mut on_epoch: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        if train.is_empty() || eval.is_empty() {
            return Err(SgcnError::invalid("training and evaluation sets must be non-empty"));
        }
        while !self.finished() {
            let start = Instant::now();
            let loss = self.train_epoch(train)?;
            let m = evaluate(&self.model, eval, self.config.batch_size, self.config.topk)?;
            let seconds = if self.config.record_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            };
            let st = &mut self.state;
            st.epoch += 1;
            st.history.push(EpochRecord {
                epoch: st.epoch,
                loss,
                top1: m.top1,
                topk: m.topk,
                eval_loss: m.loss,
                lr: st.lr,
                seconds,
            });
            if st.best_top1.is_none_or(|b| m.top1 > b) {
                st.best_top1 = Some(m.top1);
                self.best = Some(self.model.clone());
            }
            if st.plateau.observe(m.top1, self.config.patience) {
                if st.lr <= self.config.min_lr {
                    st.converged = true;
                } else {
                    st.lr = (st.lr * self.config.decay).max(self.config.min_lr);
                }
            }
            on_epoch(self)?;
        }
        Ok(())
    }

    /// One pass over a seeded permutation; returns the mean batch loss.
    fn train_epoch(&mut self, train: &GraphSet) -> Result<f64> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        self.adam.set_lr(self.state.lr);
        let mut total = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch = batch_graphs(chunk.iter().map(|&i| &train.graphs[i]))?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let mut tape = Tape::new();
            let bound = self.model.params.bind(&mut tape, true);
            let fwd = self.model.forward(&mut tape, &bound, &batch, Mode::Train, &mut self.rng)?;
            let loss = self.model.loss(&mut tape, &bound, &fwd, &labels)?;
            let value = tape.value(loss)[0] as f64;
            if !value.is_finite() {
                return Err(SgcnError::invalid(format!("non-finite training loss at epoch {}", self.state.epoch + 1)));
            }
            tape.backward(loss)?;
            self.model.params.zero_grads();
            self.model.params.accumulate_grads(&tape, &bound)?;
            let mut params: Vec<&mut Tensor<f32>> = self.model.params.tensors_mut().collect();
            self.adam.step(&mut params)?;
            self.model.apply_bn_updates(&fwd.bn_updates)?;
            total += value * chunk.len() as f64;
        }
        self.model.params.zero_grads();
        Ok(total / train.len() as f64)
    }

    /// The best weights, or the current ones before any evaluation.
    pub fn best_model(&self) -> &SgcnModel<f32> {
        self.best.as_ref().unwrap_or(&self.model)
    }

    /// Everything needed to continue the run bit-identically.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = model_checkpoint(&self.model)?;
        if let Some(best) = &self.best {
            push_store(&mut ck, "best/param", &best.params);
            push_store(&mut ck, "best/buffer", &best.buffers);
        }
        for (i, (name, t)) in self.model.params.iter().enumerate() {
            for (kind, m) in [("m", &self.adam.m[i]), ("v", &self.adam.v[i])] {
                ck.push_tensor(format!("adam.{kind}/{name}"), &Tensor::new(t.shape(), m.clone())?);
            }
        }
        let meta = TrainerMeta {
            config: self.config.clone(),
            state: self.state.clone(),
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos().to_string(),
            },
            adam_step: self.adam.step,
            adam: self.adam.config,
        };
        ck.push_bytes("trainer", serde_json::to_vec(&meta)?);
        Ok(ck)
    }

    /// Restores a run saved by [`Trainer::checkpoint`]. A supplied config
    /// replaces the stored one, e.g. to extend `max_epochs`.
    pub fn from_checkpoint(ck: &Checkpoint, config: Option<TrainConfig>) -> Result<Self> {
        let meta: TrainerMeta = serde_json::from_slice(ck.bytes("trainer")?)
            .map_err(|e| SgcnError::CorruptCheckpoint(format!("trainer state: {e}")))?;
        let model_config = ck.model_config()?;
        let shell = SgcnModel::<f32>::new(model_config.clone(), 0)?;
        let model = SgcnModel {
            params: read_store(ck, "param", &shell.params)?,
            buffers: read_store(ck, "buffer", &shell.buffers)?,
            config: model_config.clone(),
        };
        let best = if ck.sections.iter().any(|s| s.name.starts_with("best/")) {
            Some(SgcnModel {
                params: read_store(ck, "best/param", &shell.params)?,
                buffers: read_store(ck, "best/buffer", &shell.buffers)?,
                config: model_config,
            })
        } else {
            None
        };
        let mut adam = AdamState::new(model.params.iter().map(|(_, t)| t), meta.adam)?;
        adam.step = meta.adam_step;
        for (i, (name, _)) in model.params.iter().enumerate() {
            adam.m[i] = ck.tensor::<f32>(&format!("adam.m/{name}"))?.into_data();
            adam.v[i] = ck.tensor::<f32>(&format!("adam.v/{name}"))?.into_data();
        }
        let mut rng = ChaCha8Rng::from_seed(meta.rng.seed);
        rng.set_stream(meta.rng.stream);
        rng.set_word_pos(
            meta.rng
                .word_pos
                .parse()
                .map_err(|_| SgcnError::CorruptCheckpoint("rng position".into()))?,
        );
        let config = config.unwrap_or(meta.config);
        config.validate()?;
        Ok(Trainer {
            model,
            adam,
            config,
            state: meta.state,
            best,
            rng,
        })
    }
}

/// Splits `dataset` by the config seed, trains, and returns the best model
/// with the per-epoch history.
pub fn train(model: SgcnModel<f32>, dataset: &Dataset, config: &TrainConfig) -> Result<(SgcnModel<f32>, Vec<EpochRecord>)> {
    if dataset.is_empty() {
        return Err(SgcnError::invalid("empty dataset"));
    }
    let (tr, ev) = split_dataset(dataset, config.eval_fraction, config.seed)?;
    let train_set = GraphSet::from_dataset(&tr, &model.config)?;
    let eval_set = GraphSet::from_dataset(&ev, &model.config)?;
    let mut t = Trainer::new(model, config.clone())?;
    t.fit(&train_set, &eval_set, |_| Ok(()))?;
    let best = t.best_model().clone();
    Ok((best, t.state.history))
}
