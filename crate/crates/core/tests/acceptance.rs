//! End-to-end acceptance suite. Runs every criterion in order, prints one
//! PASS/FAIL line each and exits non-zero if any failed.
//!
//! Filter with `cargo test --test acceptance -- <number>...`.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use piave::autodiff::gradcheck::{grad_check, op_suite, CheckableOp};
use piave::autodiff::{Graph, Tensor};
use piave::data::{build_corpus, Corpus, CorpusConfig, Split, ViewLevel};
use piave::dsp::{mix_at_snr, si_sdr, snr_db, Waveform};
use piave::geometry::{compose_geometry, default_topology, mean_shape, random_deformation, self_align, PoseParams};
use piave::harness::ablation::{run_ablation, AblationReport, Variant};
use piave::harness::eval::evaluate_items;
use piave::harness::loss::neg_si_sdr;
use piave::harness::schedule::{Decision, Schedule};
use piave::harness::train::{train, EpochRecord, TrainConfig};
use piave::harness::{aggregate_views, EvalOptions};
use piave::model::{FeatureFrames, ModelConfig, Piave, VisualStreamPair};

const CLIP: f64 = 5.0 + 1e-6;

/// Training budget for the toy efficacy run, CPU seconds.
const TOY_BUDGET_S: f64 = 30.0 * 60.0;
const TOY_EPOCHS: usize = 3;

/// Reduced corpus and network shared by the twelve ablation runs.
fn ablation_corpus() -> CorpusConfig {
    CorpusConfig {
        n_train: 400,
        n_val: 50,
        n_test: 60,
        duration_s: 2.0,
        seed: 2024,
        ..CorpusConfig::default()
    }
}

fn small_model() -> ModelConfig {
    ModelConfig {
        enc_filters: 64,
        bottleneck: 32,
        hidden: 64,
        visual_dim: 16,
        ..ModelConfig::default()
    }
}

fn ablation_train() -> TrainConfig {
    TrainConfig {
        max_epochs: 8,
        ..TrainConfig::default()
    }
}

const ABLATION_SEEDS: [u64; 3] = [1, 2, 3];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Process CPU time from `/proc`, falling back to wall time elsewhere.
fn cpu_seconds(wall: &Instant) -> f64 {
    let parsed = std::fs::read_to_string("/proc/self/stat").ok().and_then(|s| {
        let rest = &s[s.rfind(')')? + 2..];
        let fields: Vec<&str> = rest.split_whitespace().collect();
        let ticks: f64 = fields.get(11)?.parse::<f64>().ok()? + fields.get(12)?.parse::<f64>().ok()?;
        Some(ticks / 100.0)
    });
    parsed.unwrap_or_else(|| wall.elapsed().as_secs_f64())
}

fn random_wave(rng: &mut ChaCha8Rng, n: usize) -> Waveform {
    Waveform::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), 8000).unwrap()
}

fn geometry_round_trip() -> Outcome {
    let started = Instant::now();
    let mean = mean_shape();
    let landmarks = default_topology().landmark_vertices();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for i in 0..1000u64 {
        let pose = PoseParams::random(&mut rng, (0.5, 2.0), 1.0);
        let shape = random_deformation(&mean, i, 0.05);
        let posed = compose_geometry(&pose, &shape).unwrap();
        let est = self_align(&posed, &shape, &landmarks).unwrap();
        worst = worst.max(est.max_abs_diff(&pose));
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        worst < 1e-6 && secs < 5.0,
        format!("max component error {worst:.2e} over 1000 poses in {secs:.2} s"),
    )
}

/// Literal projection formula, evaluated term by term.
fn brute_force_si_sdr(est: &[f64], reference: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut yy = 0.0;
    for i in 0..reference.len() {
        dot += est[i] * reference[i];
        yy += reference[i] * reference[i];
    }
    let alpha = dot / yy;
    let mut target = 0.0;
    let mut residual = 0.0;
    for i in 0..reference.len() {
        let t = alpha * reference[i];
        target += t * t;
        residual += (t - est[i]) * (t - est[i]);
    }
    10.0 * (target / residual).log10()
}

fn si_sdr_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut scale_err: f64 = 0.0;
    let mut oracle_err: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(16..2000);
        let (e, r) = (random_wave(&mut rng, n), random_wave(&mut rng, n));
        let base = si_sdr(&e, &r).unwrap().value;
        for alpha in [0.1, 3.7, -2.0] {
            scale_err = scale_err.max((si_sdr(&e.scaled(alpha), &r).unwrap().value - base).abs());
        }
        oracle_err = oracle_err.max((base - brute_force_si_sdr(e.samples(), r.samples())).abs());
    }
    let hand = si_sdr(
        &Waveform::new(vec![1.0, 0.0], 8000).unwrap(),
        &Waveform::new(vec![1.0, 1.0], 8000).unwrap(),
    )
    .unwrap()
    .value;
    outcome(
        scale_err < 1e-6 && hand.abs() < 1e-12 && oracle_err < 1e-9,
        format!("scale |Δ| {scale_err:.1e}, hand case {hand:.1e} dB, oracle |Δ| {oracle_err:.1e} dB"),
    )
}

fn mixture_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for k in 0..=80 {
        let snr = -10.0 + 0.25 * k as f64;
        for _ in 0..5 {
            let n = rng.random_range(100..4000);
            let t = random_wave(&mut rng, n);
            let i = random_wave(&mut rng, n).scaled(rng.random_range(0.01..10.0));
            let m = mix_at_snr(&t, &i, snr).unwrap();
            worst = worst.max((snr_db(&t, &m.scaled_interferer) - snr).abs());
            count += 1;
        }
    }
    outcome(worst < 1e-9, format!("max |SNR error| {worst:.1e} dB over {count} mixtures in [-10, 10] dB"))
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        enc_kernel: 8,
        enc_stride: 4,
        enc_filters: 8,
        bottleneck: 5,
        hidden: 6,
        blocks_per_repeat: 2,
        audio_repeats: 1,
        fusion_repeats: 2,
        visual_dim: 4,
        visual_features: 16,
        sample_rate: 400,
        fps: 25,
        ..ModelConfig::default()
    }
}

fn tiny_inputs(seed: u64, config: &ModelConfig) -> (Vec<f64>, Vec<f64>, VisualStreamPair) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = 80;
    let mix: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let target: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let frames = len * config.fps as usize / config.sample_rate as usize;
    let mut stream = || {
        let data = (0..frames * config.visual_features).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        FeatureFrames::new(frames, config.visual_features, data).unwrap()
    };
    let streams = VisualStreamPair::new(stream(), Some(stream()), config.fps).unwrap();
    (mix, target, streams)
}

fn model_loss(model: &Piave<f64>, mix: &[f64], target: &[f64], streams: &VisualStreamPair) -> f64 {
    let mut g = Graph::new();
    let p = model.bind_frozen(&mut g);
    let out = model.forward(&mut g, &p, mix, streams).unwrap();
    let loss = neg_si_sdr(&mut g, out.estimate, target).unwrap();
    g.value(loss).data()[0]
}

/// Finite differences of the extraction loss with respect to every
/// parameter of a tiny network.
fn end_to_end_grad_error(seed: u64) -> f64 {
    let config = tiny_model();
    let model = Piave::<f64>::new(config.clone(), seed).unwrap();
    let (mix, target, streams) = tiny_inputs(seed, &config);

    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let out = model.forward(&mut g, &p, &mix, &streams).unwrap();
    let loss = neg_si_sdr(&mut g, out.estimate, &target).unwrap();
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = p.iter().map(|&v| g.grad(v).unwrap()).collect();

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut probe = Piave::from_params(config, model.params().clone()).unwrap();
    for (k, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = model.params().iter().nth(k).unwrap().value.data()[j];
            let mut at = |v: f64| {
                probe.params_mut().iter_mut().nth(k).unwrap().value.data_mut()[j] = v;
                model_loss(&probe, &mix, &target, &streams)
            };
            let fd = (at(orig + h) - at(orig - h)) / (2.0 * h);
            at(orig);
            worst = worst.max((grad.data()[j] - fd).abs() / fd.abs().max(1.0));
        }
    }
    worst
}

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let mut op_worst: f64 = 0.0;
    let mut worst_name = String::new();
    for entry in op_suite() {
        for seed in 0..20 {
            let r = grad_check(&entry.op, &entry.shapes, seed).unwrap();
            if r.max_rel_error > op_worst {
                op_worst = r.max_rel_error;
                worst_name = entry.op.name().to_string();
            }
        }
    }
    let e2e = (0..20).map(end_to_end_grad_error).fold(0.0, f64::max);
    let secs = started.elapsed().as_secs_f64();
    outcome(
        op_worst < 1e-4 && e2e < 1e-3 && secs < 60.0,
        format!("per-op max rel {op_worst:.1e} ({worst_name}), end-to-end {e2e:.1e}, {secs:.1} s"),
    )
}

fn table_aggregation() -> Outcome {
    let order = [
        ViewLevel::Front,
        ViewLevel::Top,
        ViewLevel::Down,
        ViewLevel::Left30,
        ViewLevel::Left60,
        ViewLevel::Right30,
        ViewLevel::Right60,
    ];
    let rows = [
        ("w/o PF", [9.712, 5.641, 5.698, 4.888, 1.875, 7.226, 4.532], 5.653, 4.977),
        ("Mask Lip", [10.277, 7.078, 5.301, 5.328, 5.804, 5.277, 5.107], 6.310, 5.649),
        ("Mask Upper", [9.974, 6.615, 6.718, 8.102, 5.951, 8.170, 6.142], 7.382, 6.950),
        ("full", [11.773, 8.923, 8.514, 8.583, 6.118, 8.387, 4.935], 8.176, 7.577),
    ];
    let mut worst: f64 = 0.0;
    for (_, values, avg7, avg6) in rows {
        let map: BTreeMap<ViewLevel, f64> = order.into_iter().zip(values).collect();
        let (a, b) = aggregate_views(&map).unwrap();
        worst = worst.max((a - avg7).abs()).max((b - avg6).abs());
    }
    outcome(worst <= 5e-4, format!("4 rows, max |Δ| {worst:.1e}"))
}

fn max_clipped(epochs: &[EpochRecord]) -> f64 {
    epochs.iter().map(|e| e.max_clipped_norm).fold(0.0, f64::max)
}

fn toy_training(clip_log: &mut Vec<f64>) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CorpusConfig::default();
    let wall = Instant::now();
    let cpu0 = cpu_seconds(&wall);
    build_corpus(&cfg, dir.path()).unwrap();
    let corpus = Corpus::open(dir.path()).unwrap();
    let train_items = corpus.load_split(Split::Train).unwrap();
    let val_items = corpus.load_split(Split::Val).unwrap();
    let test_items = corpus.load_split(Split::Test).unwrap();
    let tc = TrainConfig {
        max_epochs: TOY_EPOCHS,
        ..TrainConfig::default()
    };
    let model = Piave::new(ModelConfig::default(), 0).unwrap();
    let cpu_start = cpu_seconds(&wall);
    let (model, history) = train(model, &train_items, &val_items, &tc, |_, _| {}).unwrap();
    let cpu_train = cpu_seconds(&wall) - cpu_start;
    clip_log.push(max_clipped(&history.epochs));
    let opts = EvalOptions { stoi: false, view_seed: 0 };
    let report = evaluate_items(&model, &test_items, Split::Test, &[ViewLevel::Front], &opts, Vec::new()).unwrap();
    let front = report.view(ViewLevel::Front).unwrap();
    let total = cpu_seconds(&wall) - cpu0;
    outcome(
        front.si_sdr_improvement >= 5.0 && cpu_train <= TOY_BUDGET_S,
        format!(
            "front SI-SDRi {:.2} dB ({:.2} dB vs mixture {:.2} dB) after {} epochs; training {:.0} CPU-s, total {:.0} CPU-s",
            front.si_sdr_improvement,
            front.si_sdr,
            front.si_sdr_mixture,
            history.epochs.len(),
            cpu_train,
            total
        ),
    )
}

fn ablation(clip_log: &mut Vec<f64>) -> AblationReport {
    let dir = tempfile::tempdir().unwrap();
    build_corpus(&ablation_corpus(), dir.path()).unwrap();
    let corpus = Corpus::open(dir.path()).unwrap();
    let train_items = corpus.load_split(Split::Train).unwrap();
    let val_items = corpus.load_split(Split::Val).unwrap();
    let test_items = corpus.load_split(Split::Test).unwrap();
    let opts = EvalOptions { stoi: false, view_seed: 0 };
    let report = run_ablation(
        &Variant::ALL,
        &ABLATION_SEEDS,
        &small_model(),
        &ablation_train(),
        (&train_items, &val_items, &test_items),
        &opts,
        |_, _, _, _| {},
    )
    .unwrap();
    for r in &report.runs {
        clip_log.push(max_clipped(&r.history.epochs));
    }
    report
}

fn per_view_sdr(report: &AblationReport, v: Variant, seed: u64) -> BTreeMap<ViewLevel, f64> {
    let run = report.run(v, seed).unwrap();
    ViewLevel::ALL.iter().map(|&l| (l, run.report.view(l).unwrap().sdr)).collect()
}

fn mean_si_sdr(report: &AblationReport, v: Variant, seed: u64) -> f64 {
    let run = report.run(v, seed).unwrap();
    run.report.views.iter().map(|s| s.si_sdr).sum::<f64>() / run.report.views.len() as f64
}

fn pose_robustness(report: &AblationReport) -> Outcome {
    let mut wins = 0;
    let mut margins = Vec::new();
    for &seed in &ABLATION_SEEDS {
        let (_, full) = aggregate_views(&per_view_sdr(report, Variant::Full, seed)).unwrap();
        let (_, wo) = aggregate_views(&per_view_sdr(report, Variant::WoPf, seed)).unwrap();
        margins.push(full - wo);
        if full > wo {
            wins += 1;
        }
    }
    // w/o-PF SDR per strength level, averaged over views of that strength and seeds.
    let mut by_strength: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for &seed in &ABLATION_SEEDS {
        for (level, sdr) in per_view_sdr(report, Variant::WoPf, seed) {
            by_strength.entry((level.strength() * 10.0).round() as u32).or_default().push(sdr);
        }
    }
    let curve: Vec<(u32, f64)> = by_strength
        .into_iter()
        .map(|(s, v)| (s, v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    let monotone = curve.windows(2).all(|w| w[1].1 <= w[0].1);
    let curve_text: Vec<String> = curve.iter().map(|(s, v)| format!("{:.1}:{v:.2}", *s as f64 / 10.0)).collect();
    let margin_text: Vec<String> = margins.iter().map(|m| format!("{m:+.2}")).collect();
    outcome(
        wins >= 2 && monotone,
        format!(
            "Avg(6) full - w/o PF per seed [{}] dB ({wins}/3 positive); w/o-PF SDR by strength [{}]",
            margin_text.join(", "),
            curve_text.join(", ")
        ),
    )
}

fn ablation_ordering(report: &AblationReport) -> Outcome {
    let mut upper_over_lip = 0;
    let mut full_over_upper = 0;
    let mut rows = Vec::new();
    for &seed in &ABLATION_SEEDS {
        let full = mean_si_sdr(report, Variant::Full, seed);
        let upper = mean_si_sdr(report, Variant::MaskUpper, seed);
        let lip = mean_si_sdr(report, Variant::MaskLip, seed);
        full_over_upper += (full >= upper) as usize;
        upper_over_lip += (upper >= lip) as usize;
        rows.push(format!("{full:.2}/{upper:.2}/{lip:.2}"));
    }
    outcome(
        full_over_upper >= 2 && upper_over_lip >= 2,
        format!(
            "mean SI-SDR full/mask-upper/mask-lip per seed [{}]; full>=upper {full_over_upper}/3, upper>=lip {upper_over_lip}/3",
            rows.join(", ")
        ),
    )
}

fn schedule_semantics(clip_log: &[f64]) -> Outcome {
    use Decision::*;
    let cases: [(&[f64], &[Decision], f64); 3] = [
        (&[10.0, 9.8, 9.7, 9.6], &[Improved, Continue, Continue, Halved], 5e-4),
        (
            &[1.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5],
            &[Improved, Continue, Continue, Halved, Continue, Continue, Stop],
            5e-4,
        ),
        (
            &[1.0, 0.5, 0.5, 2.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
            &[Improved, Continue, Continue, Improved, Continue, Continue, Halved, Continue, Continue, Stop],
            5e-4,
        ),
    ];
    let mut ok = true;
    for (history, expected, lr) in cases {
        let mut s = Schedule::new(1e-3, 3, 6, 1e-4);
        let got: Vec<Decision> = history.iter().map(|&h| s.observe(h)).collect();
        ok &= got == expected && s.lr() == lr;
    }
    let worst = clip_log.iter().copied().fold(0.0, f64::max);
    let clipped = !clip_log.is_empty() && worst <= CLIP;
    outcome(
        ok && clipped,
        format!(
            "injected histories {}; max post-clip norm {worst:.4} over {} training runs",
            if ok { "match" } else { "differ" },
            clip_log.len()
        ),
    )
}

fn run_cli(bin: &str, args: &[&str], dir: &Path) -> Result<(), String> {
    let out = Command::new(bin)
        .args(args)
        .current_dir(dir)
        .env("PIAVE_THREADS", "1")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn pipeline_once(dir: &Path) -> Result<Vec<Vec<u8>>, String> {
    let bin = env!("CARGO_BIN_EXE_piave");
    let config = serde_json::json!({
        "corpus": {"n_train": 24, "n_val": 6, "n_test": 6, "duration_s": 1.0},
        "model": {"enc_filters": 16, "bottleneck": 8, "hidden": 16, "blocks_per_repeat": 2, "visual_dim": 8},
        "train": {"max_epochs": 2},
    });
    std::fs::write(dir.join("run.json"), config.to_string()).map_err(|e| e.to_string())?;
    run_cli(bin, &["gen-data", "--config", "run.json", "--seed", "7", "--root", "corpus"], dir)?;
    run_cli(
        bin,
        &["train", "--config", "run.json", "--seed", "7", "--corpus", "corpus", "--checkpoint", "m.ckpt", "--out", "history.json"],
        dir,
    )?;
    run_cli(
        bin,
        &["eval", "--config", "run.json", "--seed", "7", "--corpus", "corpus", "--checkpoint", "m.ckpt", "--out", "report.json", "--csv", "report.csv"],
        dir,
    )?;
    ["corpus/manifest.json", "history.json", "report.json", "report.csv", "m.ckpt"]
        .iter()
        .map(|f| std::fs::read(dir.join(f)).map_err(|e| format!("{f}: {e}")))
        .collect()
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    match (pipeline_once(a.path()), pipeline_once(b.path())) {
        (Ok(x), Ok(y)) => {
            let same = x == y;
            outcome(
                same,
                format!(
                    "manifest, history, report (JSON and CSV) and checkpoint {}",
                    if same { "byte-identical across two runs" } else { "differ" }
                ),
            )
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, format!("pipeline failed: {e}")),
    }
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |n: u32| filters.is_empty() || filters.iter().any(|f| f == &n.to_string());
    let needs_ablation = wanted(7) || wanted(8);
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut clip_log = Vec::new();
    let mut record = |n: u32, name: &'static str, o: Outcome| {
        println!("[{}] {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };

    if wanted(1) {
        record(1, "geometry round-trip", geometry_round_trip());
    }
    if wanted(2) {
        record(2, "SI-SDR correctness", si_sdr_correctness());
    }
    if wanted(3) {
        record(3, "mixture exactness", mixture_exactness());
    }
    if wanted(4) {
        record(4, "gradient suite", gradient_suite());
    }
    if wanted(5) {
        record(5, "view aggregation oracle", table_aggregation());
    }
    if wanted(6) {
        record(6, "toy training efficacy", toy_training(&mut clip_log));
    }
    if needs_ablation {
        let report = ablation(&mut clip_log);
        if wanted(7) {
            record(7, "pose-robustness trend", pose_robustness(&report));
        }
        if wanted(8) {
            record(8, "ablation ordering", ablation_ordering(&report));
        }
    }
    if wanted(9) {
        if clip_log.is_empty() {
            let dir = tempfile::tempdir().unwrap();
            let cfg = CorpusConfig { n_train: 16, n_val: 4, n_test: 4, duration_s: 1.0, ..CorpusConfig::default() };
            build_corpus(&cfg, dir.path()).unwrap();
            let corpus = Corpus::open(dir.path()).unwrap();
            let tc = TrainConfig { max_epochs: 2, ..TrainConfig::default() };
            let (_, h) = train(
                Piave::new(small_model(), 0).unwrap(),
                &corpus.load_split(Split::Train).unwrap(),
                &corpus.load_split(Split::Val).unwrap(),
                &tc,
                |_, _| {},
            )
            .unwrap();
            clip_log.push(max_clipped(&h.epochs));
        }
        record(9, "schedule semantics and clipping", schedule_semantics(&clip_log));
    }
    if wanted(10) {
        record(10, "determinism", determinism());
    }

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" ({failed:?})") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
