//! The extraction network: a learned convolutional audio encoder/decoder,
//! a two-stream visual front end fused by addition, and a temporal
//! convolutional separator that estimates a non-negative mask over the
//! encoded mixture.

mod network;
mod visual;

pub use network::{ForwardOutput, Piave};
pub use visual::{apply_region_mask, FeatureFrames, Region, VisualStreamPair};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskActivation {
    Relu,
    Sigmoid,
}

/// Network hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Encoder kernel length in samples.
    pub enc_kernel: usize,
    /// Encoder hop in samples.
    pub enc_stride: usize,
    /// Encoder filters (N).
    pub enc_filters: usize,
    /// Bottleneck channels (B).
    pub bottleneck: usize,
    /// Hidden channels inside each temporal block (H).
    pub hidden: usize,
    /// Blocks per repeat; block `i` uses dilation `2^i`.
    pub blocks_per_repeat: usize,
    /// Repeats applied to audio alone, before visual fusion.
    pub audio_repeats: usize,
    /// Repeats applied after visual fusion.
    pub fusion_repeats: usize,
    /// Depthwise kernel size inside temporal blocks.
    pub tcn_kernel: usize,
    /// Visual embedding dimension (d).
    pub visual_dim: usize,
    /// Per-frame visual feature dimension of the input streams (v).
    pub visual_features: usize,
    pub mask_activation: MaskActivation,
    /// Whether the pose-invariant stream is part of the network. `false`
    /// gives the single-stream variant.
    pub pose_invariant_stream: bool,
    /// Region of the pose-invariant stream hidden at train and test time.
    pub region_mask: Region,
    pub sample_rate: u32,
    pub fps: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            enc_kernel: 40,
            enc_stride: 20,
            enc_filters: 128,
            bottleneck: 64,
            hidden: 128,
            blocks_per_repeat: 4,
            audio_repeats: 1,
            fusion_repeats: 2,
            tcn_kernel: 3,
            visual_dim: 32,
            visual_features: 16,
            mask_activation: MaskActivation::Relu,
            pose_invariant_stream: true,
            region_mask: Region::None,
            sample_rate: 8000,
            fps: 25,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("enc_kernel", self.enc_kernel),
            ("enc_stride", self.enc_stride),
            ("enc_filters", self.enc_filters),
            ("bottleneck", self.bottleneck),
            ("hidden", self.hidden),
            ("blocks_per_repeat", self.blocks_per_repeat),
            ("tcn_kernel", self.tcn_kernel),
            ("visual_dim", self.visual_dim),
            ("visual_features", self.visual_features),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.enc_stride > self.enc_kernel {
            return Err(Error::Config(format!(
                "enc_stride {} exceeds enc_kernel {}: decoder overlap-add would leave gaps",
                self.enc_stride, self.enc_kernel
            )));
        }
        if self.tcn_kernel % 2 == 0 {
            return Err(Error::Config("tcn_kernel must be odd".into()));
        }
        if self.sample_rate == 0 || self.fps == 0 {
            return Err(Error::Config("sample_rate and fps must be positive".into()));
        }
        Ok(())
    }

    /// Streams as this configuration consumes them: the pose-invariant view
    /// is dropped for the single-stream variant and region-masked otherwise.
    pub fn prepare_streams(&self, original: FeatureFrames, pose_invariant: FeatureFrames) -> Result<VisualStreamPair> {
        let pi = self.pose_invariant_stream.then_some(pose_invariant);
        let pair = VisualStreamPair::new(original, pi, self.fps)?;
        apply_region_mask(&pair, self.region_mask)
    }

    /// Encoder frame count for an input of `len` samples.
    pub fn frames_for(&self, len: usize) -> Option<usize> {
        (len >= self.enc_kernel).then(|| (len - self.enc_kernel) / self.enc_stride + 1)
    }
}
