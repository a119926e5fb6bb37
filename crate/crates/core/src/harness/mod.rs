//! Training, evaluation over camera views, ablations and model
//! checkpoints.

pub mod ablation;
pub mod eval;
pub mod loss;
pub mod schedule;
pub mod train;

pub use ablation::{run_ablation, AblationReport, Variant};
pub use eval::{aggregate_views, evaluate, evaluate_items, EvalOptions, MetricReport};
pub use schedule::{clip_global_norm, Adam, Decision, Schedule};
pub use train::{train, validation_si_sdr, TrainConfig, TrainHistory};

use std::path::Path;

use serde::Serialize;

use crate::autodiff::checkpoint;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Piave};

/// Short stable hash of a serializable configuration.
pub fn fingerprint<C: Serialize>(config: &C) -> String {
    let text = serde_json::to_string(config).expect("configs serialize");
    let h = text.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    });
    format!("{h:016x}")
}

/// Saves parameters with the model configuration (and any extra metadata)
/// in the sidecar.
pub fn save_model(path: &Path, model: &Piave<f32>, extra: serde_json::Value) -> Result<()> {
    let meta = serde_json::json!({
        "model_config": model.config(),
        "extra": extra,
    });
    checkpoint::save(path, model.params(), meta)
}

pub fn load_model(path: &Path) -> Result<(Piave<f32>, serde_json::Value)> {
    let (params, meta) = checkpoint::load(path)?;
    let config: ModelConfig = serde_json::from_value(
        meta.get("model_config")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("sidecar lacks model_config".into()))?,
    )?;
    let extra = meta.get("extra").cloned().unwrap_or_default();
    Ok((Piave::from_params(config, params)?, extra))
}
