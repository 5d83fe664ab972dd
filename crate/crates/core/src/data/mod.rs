//! Utterance containers, feature files and the synthetic verification corpus.

mod io;
mod synth;

pub use io::{
    load_features, load_features_checked, read_enrollments, read_manifest, save_features,
    write_enrollments, write_manifest, ManifestEntry, FEATURE_MAGIC,
};
pub use synth::{gen_synthetic_corpus, Corpus, CorpusSpec, Enrollment, PhraseInventory};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One utterance: `T × D` frames plus a `T × P` position matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub utterance_id: String,
    pub speaker_id: usize,
    pub phrase_id: usize,
    pub frames: Tensor,
    pub positions: Tensor,
}

impl FeatureSequence {
    pub fn new(
        utterance_id: impl Into<String>,
        speaker_id: usize,
        phrase_id: usize,
        frames: Tensor,
        positions: Tensor,
    ) -> Result<Self> {
        if frames.shape().len() != 2 || positions.shape().len() != 2 {
            return Err(Error::invalid("frames and positions must be matrices"));
        }
        if frames.rows() != positions.rows() {
            return Err(Error::shape("feature sequence", frames.shape(), positions.shape()));
        }
        Ok(FeatureSequence {
            utterance_id: utterance_id.into(),
            speaker_id,
            phrase_id,
            frames,
            positions,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn position_dim(&self) -> usize {
        self.positions.cols()
    }
}

/// How position rows are combined with frame rows before the frontend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PositionInjection {
    /// `[frames ‖ positions]`, width `D + P`.
    #[default]
    Concat,
    /// `frames + positions`; needs `D == P`.
    Add,
    /// Positions are dropped; the model sees frames only.
    None,
}

impl PositionInjection {
    pub fn input_dim(self, feature_dim: usize, position_dim: usize) -> Result<usize> {
        match self {
            PositionInjection::Concat => Ok(feature_dim + position_dim),
            PositionInjection::Add if feature_dim == position_dim => Ok(feature_dim),
            PositionInjection::None => Ok(feature_dim),
            PositionInjection::Add => Err(Error::Config(format!(
                "additive positions need equal widths, got D={feature_dim}, P={position_dim}"
            ))),
        }
    }

    /// Frontend input for `frames` with the given position matrix.
    pub fn combine(self, frames: &Tensor, positions: &Tensor) -> Result<Tensor> {
        let (t, d) = frames.dims2();
        let (t2, p) = positions.dims2();
        if t != t2 {
            return Err(Error::shape("position injection", frames.shape(), positions.shape()));
        }
        match self {
            PositionInjection::Concat => {
                let mut values = Vec::with_capacity(t * (d + p));
                for r in 0..t {
                    values.extend_from_slice(frames.row_slice(r));
                    values.extend_from_slice(positions.row_slice(r));
                }
                Tensor::new(&[t, d + p], values)
            }
            PositionInjection::Add => {
                if d != p {
                    return Err(Error::shape("additive positions", frames.shape(), positions.shape()));
                }
                let values = frames.values().iter().zip(positions.values()).map(|(a, b)| a + b).collect();
                Tensor::new(&[t, d], values)
            }
            PositionInjection::None => Ok(frames.clone()),
        }
    }
}

/// Per-dimension zero mean and unit variance over the utterance's frames.
/// Variances are floored at `1e-8`.
pub fn normalize_features(seq: &FeatureSequence) -> FeatureSequence {
    let (t, d) = seq.frames.dims2();
    let mut values = seq.frames.values().to_vec();
    for j in 0..d {
        let mean = (0..t).map(|r| values[r * d + j]).sum::<f64>() / t as f64;
        let var = (0..t).map(|r| (values[r * d + j] - mean).powi(2)).sum::<f64>() / t as f64;
        let inv = 1.0 / var.max(1e-8).sqrt();
        for r in 0..t {
            values[r * d + j] = (values[r * d + j] - mean) * inv;
        }
    }
    FeatureSequence {
        frames: Tensor::new(&[t, d], values).unwrap(),
        ..seq.clone()
    }
}
