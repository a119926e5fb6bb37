use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `n` frames of `v` features, stored frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrames {
    frames: usize,
    features: usize,
    data: Vec<f32>,
}

impl FeatureFrames {
    pub fn new(frames: usize, features: usize, data: Vec<f32>) -> Result<Self> {
        if frames * features != data.len() {
            return Err(Error::Dimension(format!(
                "{frames}×{features} frames need {} values, got {}",
                frames * features,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("visual features must be finite".into()));
        }
        Ok(Self {
            frames,
            features,
            data,
        })
    }

    pub fn zeros(frames: usize, features: usize) -> Self {
        Self {
            frames,
            features,
            data: vec![0.0; frames * features],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * self.features..(i + 1) * self.features]
    }

    pub fn frame_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.features..(i + 1) * self.features]
    }

    /// Feature-major copy (`features × frames`), the layout the network
    /// convolves over.
    pub fn transposed(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.data.len()];
        for t in 0..self.frames {
            for c in 0..self.features {
                out[c * self.frames + t] = self.data[t * self.features + c];
            }
        }
        out
    }
}

/// The two visual views of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualStreamPair {
    /// Original (possibly pose-corrupted) face track.
    pub original: FeatureFrames,
    /// Frontalized view; `None` when the stream is withheld from the
    /// network.
    pub pose_invariant: Option<FeatureFrames>,
    pub fps: u32,
}

impl VisualStreamPair {
    pub fn new(original: FeatureFrames, pose_invariant: Option<FeatureFrames>, fps: u32) -> Result<Self> {
        if let Some(pi) = &pose_invariant {
            if pi.frames() != original.frames() || pi.features() != original.features() {
                return Err(Error::Dimension(format!(
                    "streams differ: original {}×{}, pose-invariant {}×{}",
                    original.frames(),
                    original.features(),
                    pi.frames(),
                    pi.features()
                )));
            }
        }
        Ok(Self {
            original,
            pose_invariant,
            fps,
        })
    }

    pub fn frames(&self) -> usize {
        self.original.frames()
    }
}

/// Face region hidden from the pose-invariant stream. The first half of
/// the feature channels describes the lips, the second half the upper
/// face.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    None,
    Lip,
    Upper,
}

impl std::str::FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Region::None),
            "lip" => Ok(Region::Lip),
            "upper" => Ok(Region::Upper),
            other => Err(Error::Config(format!("unknown region {other}"))),
        }
    }
}

/// Zeroes one half of the pose-invariant stream's channels. The original
/// stream is never touched.
pub fn apply_region_mask(streams: &VisualStreamPair, region: Region) -> Result<VisualStreamPair> {
    let v = streams.original.features();
    if v % 2 != 0 {
        return Err(Error::Config(format!(
            "feature dimension {v} must be even to split lip and upper regions"
        )));
    }
    let mut out = streams.clone();
    let range = match region {
        Region::None => return Ok(out),
        Region::Lip => 0..v / 2,
        Region::Upper => v / 2..v,
    };
    if let Some(pi) = out.pose_invariant.as_mut() {
        for t in 0..pi.frames() {
            pi.frame_mut(t)[range.clone()].iter_mut().for_each(|x| *x = 0.0);
        }
    }
    Ok(out)
}
