use serde::{Deserialize, Serialize};

use crate::coarsen::{PoolMode, DEFAULT_CELLS};
use crate::error::{Result, SgcnError};
use crate::ink::DEFAULT_INTERVAL;
use crate::splineconv::{DEFAULT_DEGREE, DEFAULT_KERNEL_SIZE};
use crate::transform::STN_HIDDEN;

/// One stage of the network, applied in order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Block {
    /// Similarity alignment of node coordinates.
    InputStn,
    /// Node features from (aligned) coordinates.
    FeatLayer,
    /// Residual pair of spline convolutions.
    RsGcb { channels: usize },
    /// Grid-cluster pooling; the cell defaults by pooling level.
    Pool {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cell: Option<f64>,
    },
    /// Linear alignment of node features.
    FeatureStn,
    /// Per-graph mean over nodes.
    GlobalAvg,
    Fc { channels: usize },
}

/// Which node feature columns the feature layer keeps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    /// `[x, y, Δx, Δy, sinθ, cosθ]`.
    #[default]
    Full,
    /// All ones.
    Constant,
    /// `[x, y]`, other columns zero.
    Spatial,
    /// `[Δx, Δy, sinθ, cosθ]`, coordinates zero.
    Temporal,
}

fn one() -> f64 {
    1.0
}
fn sigma() -> f64 {
    16.0
}
fn dropout() -> f64 {
    0.2
}
fn kernel_size() -> usize {
    DEFAULT_KERNEL_SIZE
}
fn degree() -> usize {
    DEFAULT_DEGREE
}
fn stn_hidden() -> Vec<usize> {
    STN_HIDDEN.to_vec()
}
fn interval() -> f64 {
    DEFAULT_INTERVAL
}
fn yes() -> bool {
    true
}
fn bn_eps() -> f64 {
    1e-5
}
fn bn_momentum() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub blocks: Vec<Block>,
    #[serde(default = "one")]
    pub width_multiplier: f64,
    pub num_classes: usize,
    #[serde(default)]
    pub class_names: Vec<String>,
    /// Cosine logit scale.
    #[serde(default = "sigma")]
    pub sigma: f64,
    /// Cosine margin subtracted at the target class during training.
    #[serde(default)]
    pub margin: f64,
    #[serde(default = "kernel_size")]
    pub kernel_size: usize,
    #[serde(default = "degree")]
    pub degree: usize,
    #[serde(default = "dropout")]
    pub dropout: f64,
    #[serde(default = "stn_hidden")]
    pub stn_hidden: Vec<usize>,
    #[serde(default)]
    pub features: FeatureMode,
    #[serde(default)]
    pub pool_mode: PoolMode,
    /// Back-propagate through pseudo-coordinates into node positions.
    #[serde(default = "yes")]
    pub pseudo_grad: bool,
    #[serde(default = "yes")]
    pub penup_edges: bool,
    #[serde(default = "interval")]
    pub interval: f64,
    #[serde(default = "bn_eps")]
    pub bn_eps: f64,
    #[serde(default = "bn_momentum")]
    pub bn_momentum: f64,
}

impl ModelConfig {
    fn with_blocks(blocks: Vec<Block>, num_classes: usize) -> Self {
        ModelConfig {
            blocks,
            width_multiplier: 1.0,
            num_classes,
            class_names: (0..num_classes).map(|c| c.to_string()).collect(),
            sigma: sigma(),
            margin: 0.0,
            kernel_size: kernel_size(),
            degree: degree(),
            dropout: dropout(),
            stn_hidden: stn_hidden(),
            features: FeatureMode::Full,
            pool_mode: PoolMode::Max,
            pseudo_grad: true,
            penup_edges: true,
            interval: interval(),
            bn_eps: bn_eps(),
            bn_momentum: bn_momentum(),
        }
    }

    /// Two-stage model for small alphabets such as digits.
    pub fn small(num_classes: usize) -> Self {
        use Block::*;
        Self::with_blocks(
            vec![
                InputStn,
                FeatLayer,
                RsGcb { channels: 32 },
                Pool { cell: None },
                FeatureStn,
                RsGcb { channels: 64 },
                Pool { cell: None },
                GlobalAvg,
                Fc { channels: 128 },
            ],
            num_classes,
        )
    }

    /// Three-stage model for large alphabets.
    pub fn large(num_classes: usize) -> Self {
        use Block::*;
        Self::with_blocks(
            vec![
                InputStn,
                FeatLayer,
                RsGcb { channels: 32 },
                Pool { cell: None },
                FeatureStn,
                RsGcb { channels: 64 },
                Pool { cell: None },
                RsGcb { channels: 96 },
                Pool { cell: None },
                GlobalAvg,
                Fc { channels: 160 },
            ],
            num_classes,
        )
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Self {
        self.num_classes = names.len();
        self.class_names = names;
        self
    }

    /// Channel count after the width multiplier.
    pub fn scaled(&self, channels: usize) -> usize {
        ((channels as f64 * self.width_multiplier).round() as usize).max(1)
    }

    /// Cell size of every pool block, in block order.
    pub fn pool_cells(&self) -> Vec<f64> {
        let mut level = 0;
        self.blocks
            .iter()
            .filter_map(|b| match b {
                Block::Pool { cell } => {
                    let c = cell.unwrap_or_else(|| {
                        DEFAULT_CELLS.get(level).copied().unwrap_or(DEFAULT_CELLS[2] * 2f64.powi(level as i32 - 2))
                    });
                    level += 1;
                    Some(c)
                }
                _ => None,
            })
            .collect()
    }

    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SgcnError::invalid(format!("model config: {m}")));
        let feat = self.blocks.iter().filter(|b| **b == Block::FeatLayer).count();
        if feat != 1 {
            return bad(format!("needs exactly one feat_layer, found {feat}"));
        }
        if !matches!(self.blocks.last(), Some(Block::Fc { .. })) {
            return bad("the last block must be fc".into());
        }
        let mut seen_feat = false;
        let mut seen_avg = false;
        for (i, b) in self.blocks.iter().enumerate() {
            match *b {
                Block::InputStn if seen_feat => return bad(format!("block {i}: input_stn after feat_layer")),
                Block::FeatLayer => seen_feat = true,
                Block::GlobalAvg if seen_avg => return bad(format!("block {i}: second global_avg")),
                Block::GlobalAvg => seen_avg = true,
                Block::RsGcb { .. } | Block::Pool { .. } | Block::FeatureStn if !seen_feat || seen_avg => {
                    return bad(format!("block {i}: {b:?} must sit between feat_layer and global_avg"))
                }
                Block::Fc { .. } if !seen_avg => return bad(format!("block {i}: fc before global_avg")),
                _ => {}
            }
            match *b {
                Block::RsGcb { channels: 0 } | Block::Fc { channels: 0 } => {
                    return bad(format!("block {i}: zero width"))
                }
                Block::Pool { cell: Some(c) } if !(c > 0.0 && c.is_finite()) => {
                    return bad(format!("block {i}: cell size {c}"))
                }
                _ => {}
            }
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.num_classes {
            return bad(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            ));
        }
        if !(self.width_multiplier > 0.0) || !(self.sigma > 0.0) || !(self.margin >= 0.0) {
            return bad("width multiplier and sigma must be positive, margin non-negative".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if self.stn_hidden.is_empty() || self.stn_hidden.contains(&0) {
            return bad("stn_hidden widths must be positive".into());
        }
        if !(self.interval > 0.0) || !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("interval, bn_eps and bn_momentum out of range".into());
        }
        crate::splineconv::spline_basis([0.5, 0.5], self.kernel_size, self.degree).map(|_| ())
    }

    pub fn class_name(&self, k: usize) -> String {
        self.class_names.get(k).cloned().unwrap_or_else(|| k.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for cfg in [ModelConfig::small(10), ModelConfig::large(3755)] {
            cfg.validate().unwrap();
            let json = serde_json::to_string(&cfg).unwrap();
            assert_eq!(serde_json::from_str::<ModelConfig>(&json).unwrap(), cfg);
        }
        assert_eq!(ModelConfig::large(5).pool_cells(), vec![0.05, 0.1, 0.2]);
    }

    #[test]
    fn minimal_json_uses_defaults() {
        let cfg: ModelConfig = serde_json::from_str(
            r#"{"blocks":[{"type":"feat_layer"},{"type":"rs_gcb","channels":8},
                {"type":"pool","cell":0.3},{"type":"global_avg"},{"type":"fc","channels":4}],
                "num_classes":3}"#,
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.sigma, 16.0);
        assert_eq!(cfg.dropout, 0.2);
        assert_eq!(cfg.pool_cells(), vec![0.3]);
    }

    #[test]
    fn rejects_bad_layouts() {
        use Block::*;
        let mut cfg = ModelConfig::small(3);
        cfg.blocks.retain(|b| *b != FeatLayer);
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::small(3);
        cfg.blocks.pop();
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::small(3);
        cfg.blocks.swap(0, 1);
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::small(3);
        cfg.blocks[2] = RsGcb { channels: 0 };
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::small(3);
        cfg.class_names.pop();
        assert!(cfg.validate().is_err());
    }
}
