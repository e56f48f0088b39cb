//! Paired (signal, image) datasets, their synthetic generator and on-disk formats.

pub mod dvgt;
pub mod manifest;
pub mod pgm;
pub mod synth;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::model::{CognitiveSignal, StimulusImage};
use crate::tensor::Tensor;

pub use manifest::{load_manifest, save_manifest};
pub use synth::{gen_stimuli, simulate_responses, synthesize, ResponseModel, StimulusFamily, SynthParams, ZScore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub signal: CognitiveSignal,
    pub image: StimulusImage,
    /// Stimulus family, the "same type" pool for distractors.
    pub family: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provenance {
    Synthetic { seed: u64, params: SynthParams },
    Imported,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub records: Vec<Record>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Full signal width before masking.
    pub d_x: usize,
    pub image_shape: [usize; 3],
    pub provenance: Provenance,
}

impl PairedDataset {
    /// Checks the split and shape invariants.
    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::Validation("no records".into()));
        }
        let mut seen = HashSet::new();
        for &i in self.train.iter().chain(&self.test) {
            if i >= self.records.len() {
                return Err(Error::Validation(format!("split index {i} out of range")));
            }
            if !seen.insert(i) {
                return Err(Error::Validation(format!("record {} appears in more than one split slot", self.records[i].image.id)));
            }
        }
        let train_ids: HashSet<&str> = self.train.iter().map(|&i| self.records[i].image.id.as_str()).collect();
        if let Some(&i) = self.test.iter().find(|&&i| train_ids.contains(self.records[i].image.id.as_str())) {
            return Err(Error::Validation(format!(
                "overlapping splits: stimulus {} is in both train and test",
                self.records[i].image.id
            )));
        }
        let mask = self.records[0].signal.mask.clone();
        for r in &self.records {
            if r.signal.values.len() != self.d_x {
                return Err(Error::Validation(format!(
                    "record {} has a {}-dim signal, dataset declares {}",
                    r.image.id,
                    r.signal.values.len(),
                    self.d_x
                )));
            }
            if r.image.shape != self.image_shape {
                return Err(Error::Validation(format!(
                    "record {} has image shape {:?}, dataset declares {:?}",
                    r.image.id, r.image.shape, self.image_shape
                )));
            }
            if r.signal.mask != mask {
                return Err(Error::Validation(format!("record {} carries a different voxel mask", r.image.id)));
            }
        }
        Ok(())
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.records.first().and_then(|r| r.signal.mask.as_deref())
    }

    /// Encoder input width after masking.
    pub fn active_dim(&self) -> usize {
        self.records.first().map_or(self.d_x, |r| r.signal.active_dim())
    }

    /// Applies one voxel mask to every record.
    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.d_x {
            return dim_err(format!("mask of {} entries for {} voxels", mask.len(), self.d_x));
        }
        for r in &mut self.records {
            r.signal = r.signal.clone().with_mask(mask.clone())?;
        }
        Ok(self)
    }

    pub fn split(&self, s: Split) -> &[usize] {
        match s {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// `[N, active_dim]` batch of the selected signals.
    pub fn signal_batch(&self, idx: &[usize]) -> Result<Tensor> {
        let d = self.active_dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend(self.records[i].signal.active());
        }
        Tensor::new(vec![idx.len(), d], data)
    }

    /// `[N, C, H, W]` batch of the selected images.
    pub fn image_batch(&self, idx: &[usize]) -> Result<Tensor> {
        let [c, h, w] = self.image_shape;
        let mut data = Vec::with_capacity(idx.len() * c * h * w);
        for &i in idx {
            data.extend_from_slice(&self.records[i].image.pixels);
        }
        Tensor::new(vec![idx.len(), c, h, w], data)
    }

    /// Keeps the first `n_train` training and `n_test` test records.
    pub fn truncated(&self, n_train: usize, n_test: usize) -> Self {
        let mut d = self.clone();
        d.train.truncate(n_train);
        d.test.truncate(n_test);
        d
    }

    pub fn families(&self) -> Vec<String> {
        let mut f: Vec<String> = self.records.iter().map(|r| r.family.clone()).collect();
        f.sort();
        f.dedup();
        f
    }
}
