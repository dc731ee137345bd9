//! The grounding network: joint encoding of voxel-grid/frame features with
//! token embeddings, attribute-aware masking, mixture-of-experts fusion, and
//! per-query box/token heads. Forward and backward passes are hand-written
//! and deterministic, so analytic gradients can be checked against central
//! finite differences.

mod backward;
mod forward;
mod gradcheck;
mod params;
#[cfg(test)]
mod tests;

pub use backward::{backward, sample_gradients, SampleGradients};
pub use forward::{
    encode, decode, featurize_frame, featurize_grid, forward, mask_states, moee_fuse,
    BranchTrace, ExpertFeatures, ForwardTrace, SampleFeatures, FRAME_STATS, GRID_STATS,
};
pub use gradcheck::gradient_check;
pub use params::{Expert, Params};

use crate::boxes::BoxXYWH;
use crate::error::{Error, Result};
use crate::text::{AttributeKind, AttributeMask, SoftTokenMap};

/// Dimension of the fixed sinusoidal position features mixed into each
/// visual patch embedding (4 frequencies x sin/cos x row/column).
pub const VIS_POS_DIM: usize = 16;

/// Dimension of the fixed sinusoidal position features for text tokens.
pub const TXT_POS_DIM: usize = 8;

/// Which sensor inputs the model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Modality {
    EventOnly,
    FrameOnly,
    Fusion,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::EventOnly => "event-only",
            Modality::FrameOnly => "frame-only",
            Modality::Fusion => "fusion",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "event-only" => Ok(Modality::EventOnly),
            "frame-only" => Ok(Modality::FrameOnly),
            "fusion" => Ok(Modality::Fusion),
            other => Err(Error::InvalidConfiguration(format!(
                "unknown modality '{other}' (expected event-only, frame-only, or fusion)"
            ))),
        }
    }
}

/// How the per-attribute expert features are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FusionStrategy {
    /// No attribute branches at all; the encoder states pass straight through.
    None,
    /// Unweighted mean of the expert tensors.
    Add,
    /// Channel concatenation followed by a learned projection back to C.
    Concat,
    /// Softmax attention over the expert descriptors, without gate noise.
    Attention,
    /// Noisy-gated mixture of experts.
    Moee,
}

impl FusionStrategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            FusionStrategy::None => "none",
            FusionStrategy::Add => "add",
            FusionStrategy::Concat => "concat",
            FusionStrategy::Attention => "attention",
            FusionStrategy::Moee => "moee",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FusionStrategy::None),
            "add" => Ok(FusionStrategy::Add),
            "concat" => Ok(FusionStrategy::Concat),
            "attention" => Ok(FusionStrategy::Attention),
            "moee" => Ok(FusionStrategy::Moee),
            other => Err(Error::InvalidConfiguration(format!(
                "unknown fusion strategy '{other}'"
            ))),
        }
    }
}

/// Model hyperparameters plus the corpus geometry the model was built for.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub channel_width: usize,
    pub num_queries: usize,
    pub visual_patch: usize,
    pub sigma_init: f64,
    pub modality: Modality,
    pub fusion: FusionStrategy,
    /// Active attribute subset, sorted by attribute index, never empty.
    pub attributes: Vec<AttributeKind>,
    pub seed: u64,
    pub sensor_width: u16,
    pub sensor_height: u16,
    pub bins: usize,
    pub vocab_size: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channel_width < 4 {
            return Err(Error::InvalidConfiguration("channel width must be at least 4".into()));
        }
        if self.num_queries < 1 {
            return Err(Error::InvalidConfiguration("need at least one query".into()));
        }
        if self.sigma_init < 0.0 {
            return Err(Error::InvalidConfiguration("sigma must be non-negative".into()));
        }
        if self.bins == 0 {
            return Err(Error::InvalidConfiguration("bin count must be positive".into()));
        }
        if self.visual_patch == 0
            || self.sensor_width as usize % self.visual_patch != 0
            || self.sensor_height as usize % self.visual_patch != 0
        {
            return Err(Error::InvalidConfiguration(format!(
                "visual patch {} must divide the {}x{} sensor",
                self.visual_patch, self.sensor_width, self.sensor_height
            )));
        }
        if self.attributes.is_empty() {
            return Err(Error::InvalidConfiguration("attribute subset must be non-empty".into()));
        }
        let mut sorted = self.attributes.clone();
        sorted.sort_by_key(|a| a.index());
        sorted.dedup();
        if sorted != self.attributes {
            return Err(Error::InvalidConfiguration(
                "attributes must be sorted and free of duplicates".into(),
            ));
        }
        if self.vocab_size == 0 {
            return Err(Error::InvalidConfiguration("vocabulary must be non-empty".into()));
        }
        Ok(())
    }

    pub fn active_attributes(&self) -> &[AttributeKind] {
        &self.attributes
    }

    pub fn patch_rows(&self) -> usize {
        self.sensor_height as usize / self.visual_patch
    }

    pub fn patch_cols(&self) -> usize {
        self.sensor_width as usize / self.visual_patch
    }

    pub fn visual_len(&self) -> usize {
        self.patch_rows() * self.patch_cols()
    }

    pub fn event_feature_dim(&self) -> usize {
        2 * self.bins * forward::GRID_STATS
    }

    pub fn frame_feature_dim(&self) -> usize {
        forward::FRAME_STATS
    }

    pub fn hidden_dim(&self) -> usize {
        (self.channel_width / 2).max(2)
    }
}

/// Hidden states over the concatenated visual+text sequence of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct JointStates {
    /// Row-major `seq_len x channels`.
    pub data: Vec<f64>,
    pub seq_len: usize,
    pub channels: usize,
    pub visual_len: usize,
}

impl JointStates {
    pub fn zeros(seq_len: usize, channels: usize, visual_len: usize) -> Self {
        JointStates { data: vec![0.0; seq_len * channels], seq_len, channels, visual_len }
    }

    #[inline]
    pub fn position(&self, l: usize) -> &[f64] {
        &self.data[l * self.channels..(l + 1) * self.channels]
    }

    #[inline]
    pub fn position_mut(&mut self, l: usize) -> &mut [f64] {
        &mut self.data[l * self.channels..(l + 1) * self.channels]
    }
}

/// Gate simplex over the four attributes. Inactive attributes hold weight 0,
/// so each row sums to 1 over the active subset.
#[derive(Debug, Clone, PartialEq)]
pub struct GateWeights {
    pub lambda: [f64; 4],
    pub sigma: f64,
    pub noise_enabled: bool,
}

impl GateWeights {
    pub fn uniform_over(attributes: &[AttributeKind]) -> Self {
        let mut lambda = [0.0; 4];
        for kind in attributes {
            lambda[kind.index()] = 1.0 / attributes.len() as f64;
        }
        GateWeights { lambda, sigma: 0.0, noise_enabled: false }
    }
}

/// Per-query predictions: boxes in normalized `(cx, cy, w, h)` form and one
/// token-distribution logit row per query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutput {
    pub boxes: Vec<BoxXYWH>,
    pub token_logits: Vec<Vec<f64>>,
}

/// A fully preprocessed training/evaluation sample.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub features: SampleFeatures,
    /// One mask per active attribute, in `config.attributes` order.
    pub masks: Vec<AttributeMask>,
    pub target_box: BoxXYWH,
    /// Pseudo-target token maps (one per active attribute, or a single
    /// union map when multi-attribute duplication is disabled).
    pub target_maps: Vec<SoftTokenMap>,
}
