//! Pen trajectories: normalization, arc-length resampling, synthetic data
//! and the JSONL dataset format.

mod jsonl;
pub mod synth;
mod trajectory;

pub use jsonl::{load_jsonl, read_records, save_jsonl, InkRecord};
pub use synth::{synth_dataset, synth_sample, synth_split, template, SynthSpec};
pub use trajectory::{normalize, resample, Point, Trajectory};

use crate::error::{Result, SgcnError};

/// Resampling spacing on the unit square; gives roughly 100 points for a
/// typical character.
pub const DEFAULT_INTERVAL: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub label: usize,
    pub trajectory: Trajectory,
    pub id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, class_names: Vec<String>) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.label >= class_names.len()) {
            return Err(SgcnError::invalid(format!(
                "sample {} has label {} but only {} classes exist",
                s.id,
                s.label,
                class_names.len()
            )));
        }
        Ok(Dataset { samples, class_names })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Re-expresses labels against `names`, which must cover every class in use.
    pub fn relabel(&self, names: &[String]) -> Result<Dataset> {
        if names == self.class_names.as_slice() {
            return Ok(self.clone());
        }
        let mut samples = self.samples.clone();
        for s in &mut samples {
            let name = &self.class_names[s.label];
            s.label = names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| SgcnError::UnknownLabel(name.clone()))?;
        }
        Dataset::new(samples, names.to_vec())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            class_names: self.class_names.clone(),
        }
    }
}

/// `normalize` followed by `resample`.
pub fn preprocess(traj: &Trajectory, interval: f64) -> Result<Trajectory> {
    resample(&normalize(traj), interval)
}
