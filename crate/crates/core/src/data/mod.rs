//! Source datasets, reduced datasets and their on-disk formats.

mod blobs;
mod container;
mod idx;

pub use blobs::{make_blobs, BlobSpec};
pub use container::{
    decode, encode, header_json, load_reduced, read_header, save_reduced, CONTAINER_MAGIC,
    CONTAINER_VERSION,
};
pub use idx::{load_idx, parse_idx_images, parse_idx_labels};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::privileged::{AttentionLabels, FeatureLabelSet};
use crate::tensor::Tensor;

/// Images `[N, Ch, H, W]` in `[0, 1]` with integer labels in `0..classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let ds = LabeledDataset {
            images,
            labels,
            classes,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.images.shape();
        if s.len() != 4 {
            return Err(Error::Dataset(format!("images must be [N,Ch,H,W], got {s:?}")));
        }
        if s[0] != self.labels.len() || self.labels.is_empty() {
            return Err(Error::Dataset(format!(
                "{} images vs {} labels",
                s[0],
                self.labels.len()
            )));
        }
        if self.classes < 2 {
            return Err(Error::Dataset("need at least two classes".into()));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.classes) {
            return Err(Error::Dataset(format!("label {y} >= classes {}", self.classes)));
        }
        if !self.images.is_finite() {
            return Err(Error::Dataset("non-finite pixel".into()));
        }
        Ok(())
    }

    /// Checks the training-split invariant: every class occurs.
    pub fn validate_training(&self) -> Result<()> {
        self.validate()?;
        let counts = self.class_counts();
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Dataset(format!("class {c} has no examples")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[Ch, H, W]` of one example.
    pub fn input_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    /// Dataset indices of class `c`, ascending.
    pub fn class_indices(&self, c: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y == c)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<LabeledDataset> {
        Ok(LabeledDataset {
            images: self.images.select_axis0(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        })
    }
}

/// Per-class counts for a fractional budget: `floor(fraction * N)` examples
/// split evenly, remainder to the lowest class indices.
pub fn per_class_budget(fraction: f64, total: usize, classes: usize) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction {fraction} outside (0, 1]")));
    }
    let m = (fraction * total as f64).floor() as usize;
    let base = m / classes;
    let rem = m % classes;
    Ok((0..classes).map(|c| base + usize::from(c < rem)).collect())
}

/// Shuffled index batches covering `0..n` once; the last batch may be short.
pub fn minibatches(n: usize, batch: usize, rng: &mut crate::rng::Rng) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Up to `batch` indices of each class, sampled without replacement.
pub fn class_batch(pool: &[usize], batch: usize, rng: &mut crate::rng::Rng) -> Vec<usize> {
    use rand::seq::IndexedRandom;
    if batch >= pool.len() {
        return pool.to_vec();
    }
    pool.choose_multiple(rng, batch).copied().collect()
}

/// Where a reduced dataset came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub backend: String,
    pub config_hash: String,
    pub seed: u64,
}

/// A reduced dataset with optional privileged channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ReducedDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// `[M, C]`, rows sum to one.
    pub soft_labels: Option<Tensor>,
    pub features: Option<FeatureLabelSet>,
    pub attention: Option<AttentionLabels>,
    pub provenance: Provenance,
}

pub const SOFT_LABEL_TOLERANCE: f32 = 1e-5;

impl ReducedDataset {
    /// Wraps images and labels with no privileged channels.
    pub fn from_labeled(ds: &LabeledDataset) -> Self {
        ReducedDataset {
            images: ds.images.clone(),
            labels: ds.labels.clone(),
            classes: ds.classes,
            soft_labels: None,
            features: None,
            attention: None,
            provenance: Provenance::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn as_labeled(&self) -> LabeledDataset {
        LabeledDataset {
            images: self.images.clone(),
            labels: self.labels.clone(),
            classes: self.classes,
        }
    }

    pub fn class_indices(&self, c: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y == c)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.as_labeled().validate()?;
        let m = self.len();
        if let Some(s) = &self.soft_labels {
            if s.shape() != [m, self.classes] {
                return Err(Error::Dataset(format!(
                    "soft labels {:?}, expected [{m}, {}]",
                    s.shape(),
                    self.classes
                )));
            }
            for (i, row) in s.data().chunks(self.classes).enumerate() {
                let total: f32 = row.iter().sum();
                if (total - 1.0).abs() > SOFT_LABEL_TOLERANCE || row.iter().any(|&p| p < 0.0) {
                    return Err(Error::Dataset(format!(
                        "soft label row {i} is not a distribution (sum {total})"
                    )));
                }
            }
        }
        if let Some(f) = &self.features {
            f.validate()?;
            if f.len() != m {
                return Err(Error::Dataset(format!(
                    "{} feature sets for {m} examples",
                    f.len()
                )));
            }
        }
        if let Some(a) = &self.attention {
            a.validate()?;
            if a.len() != m {
                return Err(Error::Dataset(format!(
                    "{} attention labels for {m} examples",
                    a.len()
                )));
            }
        }
        Ok(())
    }
}
