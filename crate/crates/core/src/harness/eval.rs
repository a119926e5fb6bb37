use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{corrupt_view, Corpus, CorpusItem, Split, ViewLevel};
use crate::dsp::{sdr, si_sdr, stoi, Waveform};
use crate::error::{Error, Result};
use crate::model::Piave;

/// Table-1 style averages: all seven views, and the six non-frontal ones.
pub fn aggregate_views(per_view: &BTreeMap<ViewLevel, f64>) -> Result<(f64, f64)> {
    let missing: Vec<&str> = ViewLevel::ALL
        .iter()
        .filter(|v| !per_view.contains_key(v))
        .map(|v| v.name())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!("missing views: {}", missing.join(", "))));
    }
    let all: f64 = ViewLevel::ALL.iter().map(|v| per_view[v]).sum();
    let front = per_view[&ViewLevel::Front];
    Ok((all / 7.0, (all - front) / 6.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub stoi: bool,
    /// Seed of the view corruption.
    pub view_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            stoi: true,
            view_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemMetrics {
    pub id: String,
    pub view: ViewLevel,
    pub si_sdr: f64,
    pub sdr: f64,
    pub stoi: Option<f64>,
    /// SI-SDR of the unprocessed mixture.
    pub si_sdr_mixture: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSummary {
    pub view: ViewLevel,
    pub items: usize,
    pub si_sdr: f64,
    pub sdr: f64,
    pub stoi: Option<f64>,
    pub si_sdr_mixture: f64,
    pub si_sdr_improvement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub seed: u64,
    pub config_fingerprint: String,
    pub split: Split,
    pub views: Vec<ViewSummary>,
    /// Mean SDR over all seven views, when all were evaluated.
    pub avg7: Option<f64>,
    /// Mean SDR over the six non-frontal views.
    pub avg6: Option<f64>,
    pub items: Vec<ItemMetrics>,
    pub failures: Vec<Failure>,
}

impl MetricReport {
    pub fn view(&self, v: ViewLevel) -> Option<&ViewSummary> {
        self.views.iter().find(|s| s.view == v)
    }

    /// One row per item and view.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,view,si_sdr,sdr,stoi,si_sdr_mixture\n");
        for m in &self.items {
            let stoi = m.stoi.map_or(String::new(), |s| format!("{s:.6}"));
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{},{:.6}\n",
                m.id, m.view, m.si_sdr, m.sdr, stoi, m.si_sdr_mixture
            ));
        }
        out
    }
}

/// Scores one estimate against its reference.
pub fn score(estimate: &Waveform, reference: &Waveform, mixture: &Waveform, with_stoi: bool) -> Result<(f64, f64, Option<f64>, f64)> {
    let a = si_sdr(estimate, reference)?.value;
    let b = sdr(estimate, reference)?.value;
    let c = if with_stoi { Some(stoi(estimate, reference)?.value) } else { None };
    let m = si_sdr(mixture, reference)?.value;
    Ok((a, b, c, m))
}

fn eval_item(model: &Piave<f32>, item: &CorpusItem, view: ViewLevel, opts: &EvalOptions) -> Result<ItemMetrics> {
    let original = corrupt_view(&item.original, view, opts.view_seed)?;
    let streams = model.config().prepare_streams(original, item.pose_invariant.clone())?;
    let est = model.extract(&item.mixture, &streams)?;
    let rate = model.config().sample_rate;
    let reference = Waveform::from_f32(&item.target, rate)?;
    let mixture = Waveform::from_f32(&item.mixture, rate)?;
    let (si, sd, st, mix) = score(&Waveform::from_f32(&est, rate)?, &reference, &mixture, opts.stoi)?;
    Ok(ItemMetrics {
        id: item.meta.id.clone(),
        view,
        si_sdr: si,
        sdr: sd,
        stoi: st,
        si_sdr_mixture: mix,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Evaluates preloaded items under each view. Loading failures, passed in
/// `failures`, are carried into the report.
pub fn evaluate_items(
    model: &Piave<f32>,
    items: &[CorpusItem],
    split: Split,
    views: &[ViewLevel],
    opts: &EvalOptions,
    failures: Vec<Failure>,
) -> Result<MetricReport> {
    if items.is_empty() {
        return Err(Error::Empty(format!("{} split has no loadable items", split.name())));
    }
    let jobs: Vec<(ViewLevel, &CorpusItem)> = views
        .iter()
        .flat_map(|&v| items.iter().map(move |i| (v, i)))
        .collect();
    let results: Vec<Result<ItemMetrics>> = crate::parallel::pool()
        .install(|| jobs.par_iter().map(|&(v, i)| eval_item(model, i, v, opts)).collect());
    let mut metrics = Vec::new();
    let mut failures = failures;
    for ((view, item), r) in jobs.iter().zip(results) {
        match r {
            Ok(m) => metrics.push(m),
            Err(e) => failures.push(Failure {
                id: format!("{}@{view}", item.meta.id),
                error: e.to_string(),
            }),
        }
    }
    let summaries: Vec<ViewSummary> = views
        .iter()
        .map(|&v| {
            let rows: Vec<&ItemMetrics> = metrics.iter().filter(|m| m.view == v).collect();
            let si = mean(rows.iter().map(|m| m.si_sdr));
            let mix = mean(rows.iter().map(|m| m.si_sdr_mixture));
            ViewSummary {
                view: v,
                items: rows.len(),
                si_sdr: si,
                sdr: mean(rows.iter().map(|m| m.sdr)),
                stoi: opts.stoi.then(|| mean(rows.iter().filter_map(|m| m.stoi))),
                si_sdr_mixture: mix,
                si_sdr_improvement: si - mix,
            }
        })
        .collect();
    let per_view: BTreeMap<ViewLevel, f64> = summaries.iter().map(|s| (s.view, s.sdr)).collect();
    let (avg7, avg6) = match aggregate_views(&per_view) {
        Ok((a, b)) => (Some(a), Some(b)),
        Err(_) => (None, None),
    };
    Ok(MetricReport {
        seed: opts.view_seed,
        config_fingerprint: super::fingerprint(model.config()),
        split,
        views: summaries,
        avg7,
        avg6,
        items: metrics,
        failures,
    })
}

/// Loads `split` from disk and evaluates it under each view.
pub fn evaluate(
    model: &Piave<f32>,
    corpus: &Corpus,
    split: Split,
    views: &[ViewLevel],
    opts: &EvalOptions,
) -> Result<MetricReport> {
    let metas: Vec<_> = corpus.manifest().items(split).cloned().collect();
    let loaded: Vec<Result<CorpusItem>> =
        crate::parallel::pool().install(|| metas.par_iter().map(|m| corpus.load(m)).collect());
    let mut items = Vec::new();
    let mut failures = Vec::new();
    for (meta, r) in metas.iter().zip(loaded) {
        match r {
            Ok(i) => items.push(i),
            Err(e) => failures.push(Failure {
                id: meta.id.clone(),
                error: e.to_string(),
            }),
        }
    }
    evaluate_items(model, &items, split, views, opts, failures)
}
