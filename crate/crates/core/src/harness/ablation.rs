use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::eval::{evaluate_items, EvalOptions, MetricReport};
use super::train::{train, EpochRecord, TrainConfig, TrainHistory};
use crate::data::{CorpusItem, Split, ViewLevel};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Piave, Region};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    WoPf,
    MaskLip,
    MaskUpper,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::WoPf, Variant::MaskLip, Variant::MaskUpper];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WoPf => "wo_pf",
            Variant::MaskLip => "mask_lip",
            Variant::MaskUpper => "mask_upper",
        }
    }

    /// `base` adjusted to this variant.
    pub fn configure(self, base: &ModelConfig) -> ModelConfig {
        let (stream, region) = match self {
            Variant::Full => (true, Region::None),
            Variant::WoPf => (false, Region::None),
            Variant::MaskLip => (true, Region::Lip),
            Variant::MaskUpper => (true, Region::Upper),
        };
        ModelConfig {
            pose_invariant_stream: stream,
            region_mask: region,
            ..base.clone()
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub history: TrainHistory,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    /// Per-view SDR averaged over seeds.
    pub sdr: BTreeMap<ViewLevel, f64>,
    /// Per-view SI-SDR averaged over seeds.
    pub si_sdr: BTreeMap<ViewLevel, f64>,
    pub avg7: f64,
    pub avg6: f64,
    /// Avg(6) minus the w/o-PF variant's Avg(6).
    pub avg6_delta_vs_wo_pf: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub runs: Vec<AblationRun>,
    pub summary: Vec<VariantSummary>,
}

impl AblationReport {
    pub fn run(&self, variant: Variant, seed: u64) -> Option<&AblationRun> {
        self.runs.iter().find(|r| r.variant == variant && r.seed == seed)
    }

    /// `variant,seed,view,si_sdr,sdr` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,seed,view,si_sdr,sdr\n");
        for r in &self.runs {
            for v in &r.report.views {
                out.push_str(&format!(
                    "{},{},{},{:.6},{:.6}\n",
                    r.variant.name(),
                    r.seed,
                    v.view,
                    v.si_sdr,
                    v.sdr
                ));
            }
        }
        out
    }
}

/// Trains one variant with one seed and evaluates it on all seven views.
pub fn run_variant(
    variant: Variant,
    seed: u64,
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    data: (&[CorpusItem], &[CorpusItem], &[CorpusItem]),
    opts: &EvalOptions,
    progress: &mut dyn FnMut(Variant, u64, &EpochRecord, f64),
) -> Result<AblationRun> {
    let (train_items, val_items, test_items) = data;
    let model = Piave::new(variant.configure(base), seed)?;
    let cfg = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    let (model, history) = train(model, train_items, val_items, &cfg, |r, s| progress(variant, seed, r, s))?;
    let report = evaluate_items(&model, test_items, Split::Test, &ViewLevel::ALL, opts, Vec::new())?;
    Ok(AblationRun {
        variant,
        seed,
        history,
        report,
    })
}

/// Summarizes finished runs per variant.
pub fn summarize(seeds: &[u64], runs: Vec<AblationRun>) -> Result<AblationReport> {
    let mut variants: Vec<Variant> = runs.iter().map(|r| r.variant).collect();
    variants.sort();
    variants.dedup();
    let mut summary = Vec::new();
    for &v in &variants {
        let mine: Vec<&AblationRun> = runs.iter().filter(|r| r.variant == v).collect();
        let per_view = |f: fn(&super::eval::ViewSummary) -> f64| -> BTreeMap<ViewLevel, f64> {
            ViewLevel::ALL
                .iter()
                .map(|&view| {
                    let vals: Vec<f64> = mine.iter().filter_map(|r| r.report.view(view).map(f)).collect();
                    (view, vals.iter().sum::<f64>() / vals.len() as f64)
                })
                .collect()
        };
        let sdr = per_view(|s| s.sdr);
        let (avg7, avg6) = super::aggregate_views(&sdr)?;
        summary.push(VariantSummary {
            variant: v,
            si_sdr: per_view(|s| s.si_sdr),
            sdr,
            avg7,
            avg6,
            avg6_delta_vs_wo_pf: None,
        });
    }
    if let Some(base) = summary.iter().find(|s| s.variant == Variant::WoPf).map(|s| s.avg6) {
        for s in &mut summary {
            s.avg6_delta_vs_wo_pf = Some(s.avg6 - base);
        }
    }
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        runs,
        summary,
    })
}

/// Trains and evaluates every variant under every seed, identical data and
/// configuration otherwise.
pub fn run_ablation(
    variants: &[Variant],
    seeds: &[u64],
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    data: (&[CorpusItem], &[CorpusItem], &[CorpusItem]),
    opts: &EvalOptions,
    mut progress: impl FnMut(Variant, u64, &EpochRecord, f64),
) -> Result<AblationReport> {
    if seeds.is_empty() || variants.is_empty() {
        return Err(Error::Config("ablation needs at least one seed and one variant".into()));
    }
    let mut runs = Vec::new();
    for &seed in seeds {
        for &v in variants {
            runs.push(run_variant(v, seed, base, train_cfg, data, opts, &mut progress)?);
        }
    }
    summarize(seeds, runs)
}
