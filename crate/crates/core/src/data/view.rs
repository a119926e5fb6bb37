//! Camera-view corruption of the original visual stream and the
//! pose-invariant view derived from clean features.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mix_seed, IDENTITY, LIP, UPPER};
use crate::error::{Error, Result};
use crate::model::FeatureFrames;

/// Seed of the fixed channel pairing shared by every view.
const PAIRING_SEED: u64 = 0x5eed_0f_7a15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewLevel {
    Front,
    Top,
    Down,
    Left30,
    Left60,
    Right30,
    Right60,
}

impl ViewLevel {
    pub const ALL: [ViewLevel; 7] = [
        ViewLevel::Front,
        ViewLevel::Top,
        ViewLevel::Down,
        ViewLevel::Left30,
        ViewLevel::Left60,
        ViewLevel::Right30,
        ViewLevel::Right60,
    ];

    pub fn strength(self) -> f64 {
        match self {
            ViewLevel::Front => 0.0,
            ViewLevel::Top | ViewLevel::Down => 0.3,
            ViewLevel::Left30 | ViewLevel::Right30 => 0.4,
            ViewLevel::Left60 | ViewLevel::Right60 => 0.7,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ViewLevel::Front => "front",
            ViewLevel::Top => "top",
            ViewLevel::Down => "down",
            ViewLevel::Left30 => "left30",
            ViewLevel::Left60 => "left60",
            ViewLevel::Right30 => "right30",
            ViewLevel::Right60 => "right60",
        }
    }
}

impl fmt::Display for ViewLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ViewLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ViewLevel::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown view level {s:?}")))
    }
}

fn pairs(range: std::ops::Range<usize>, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut idx: Vec<usize> = range.collect();
    idx.shuffle(rng);
    idx.chunks_exact(2).map(|c| (c[0], c[1])).collect()
}

/// Rotates each channel pair of both blocks by `±strength·π/2` and scales
/// the lip block by `1 - strength/2`. Pairing is fixed; the rotation
/// direction of each pair depends on `(seed, level)`.
pub fn corrupt_view(frames: &FeatureFrames, level: ViewLevel, seed: u64) -> Result<FeatureFrames> {
    if frames.features() < UPPER.end {
        return Err(Error::Dimension(format!(
            "view corruption needs {} feature channels, got {}",
            UPPER.end,
            frames.features()
        )));
    }
    let s = level.strength();
    let mut out = frames.clone();
    if s == 0.0 {
        return Ok(out);
    }
    let mut fixed = ChaCha8Rng::seed_from_u64(PAIRING_SEED);
    let mut all = pairs(LIP, &mut fixed);
    all.extend(pairs(UPPER, &mut fixed));
    let mut dir = ChaCha8Rng::seed_from_u64(mix_seed(seed, level as u64 + 1));
    let rotations: Vec<(usize, usize, f64, f64)> = all
        .into_iter()
        .map(|(i, j)| {
            let sign = if dir.random_bool(0.5) { 1.0 } else { -1.0 };
            let (sin, cos) = (sign * s * FRAC_PI_2).sin_cos();
            (i, j, sin, cos)
        })
        .collect();
    let atten = 1.0 - s / 2.0;
    for t in 0..out.frames() {
        let x = out.frame_mut(t);
        for &(i, j, sin, cos) in &rotations {
            let (a, b) = (x[i] as f64, x[j] as f64);
            x[i] = (cos * a - sin * b) as f32;
            x[j] = (sin * a + cos * b) as f32;
        }
        for v in &mut x[LIP] {
            *v = (*v as f64 * atten) as f32;
        }
    }
    Ok(out)
}

/// Clean frames with the identity channels cleared: frontal, expression
/// preserving, texture free.
pub fn pose_invariant_view(clean: &FeatureFrames) -> FeatureFrames {
    let mut out = clean.clone();
    if out.features() >= IDENTITY.end {
        for t in 0..out.frames() {
            out.frame_mut(t)[IDENTITY].fill(0.0);
        }
    }
    out
}
