use std::sync::OnceLock;

use piave::data::{build_corpus, Corpus, CorpusConfig, CorpusItem, Split, ViewLevel};
use piave::harness::train::{calibrate_output_gain, train, TrainConfig, TrainHistory};
use piave::harness::{evaluate, load_model, save_model, EvalOptions};
use piave::model::{ModelConfig, Piave};

struct Fixture {
    _dir: tempfile::TempDir,
    corpus: Corpus,
    train: Vec<CorpusItem>,
    val: Vec<CorpusItem>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig {
            n_train: 12,
            n_val: 4,
            n_test: 3,
            duration_s: 1.0,
            seed: 5,
            ..CorpusConfig::default()
        };
        build_corpus(&cfg, dir.path()).unwrap();
        let corpus = Corpus::open(dir.path()).unwrap();
        let train = corpus.load_split(Split::Train).unwrap();
        let val = corpus.load_split(Split::Val).unwrap();
        Fixture {
            _dir: dir,
            corpus,
            train,
            val,
        }
    })
}

fn small() -> ModelConfig {
    ModelConfig {
        enc_filters: 16,
        bottleneck: 8,
        hidden: 16,
        blocks_per_repeat: 2,
        visual_dim: 8,
        ..ModelConfig::default()
    }
}

fn run(seed: u64) -> (Piave<f32>, TrainHistory) {
    let f = fixture();
    let cfg = TrainConfig {
        max_epochs: 2,
        seed,
        ..TrainConfig::default()
    };
    train(Piave::new(small(), seed).unwrap(), &f.train, &f.val, &cfg, |_, _| {}).unwrap()
}

#[test]
fn history_respects_clip_and_schedule() {
    let (_, h) = run(1);
    assert_eq!(h.epochs.len(), 2);
    for e in &h.epochs {
        assert!(e.max_clipped_norm <= 5.0 + 1e-6);
        assert!(e.max_raw_norm >= e.max_clipped_norm - 1e-9);
        assert_eq!(e.lr, 1e-3);
        assert!(e.train_loss.is_finite());
    }
    assert!(h.best_epoch >= 1);
    assert!(h.output_gain.is_finite() && h.output_gain != 0.0);
}

#[test]
fn same_seed_same_parameters() {
    let (a, ha) = run(3);
    let (b, hb) = run(3);
    assert_eq!(ha, hb);
    assert_eq!(a.params().iter().collect::<Vec<_>>(), b.params().iter().collect::<Vec<_>>());
}

#[test]
fn calibration_is_idempotent() {
    let (mut m, _) = run(2);
    let again = calibrate_output_gain(&mut m, &fixture().val).unwrap();
    assert!((again - 1.0).abs() < 1e-4, "{again}");
}

#[test]
fn calibration_undoes_a_sign_flip() {
    let (mut m, _) = run(2);
    m.scale_output(-0.5);
    let gain = calibrate_output_gain(&mut m, &fixture().val).unwrap();
    assert!((gain + 2.0).abs() < 1e-3, "{gain}");
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let f = fixture();
    let (m, _) = run(4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_model(&path, &m, serde_json::json!({"note": "x"})).unwrap();
    let (back, extra) = load_model(&path).unwrap();
    assert_eq!(extra["note"], "x");
    assert_eq!(back.config(), m.config());
    let item = &f.val[0];
    let s = m.config().prepare_streams(item.original.clone(), item.pose_invariant.clone()).unwrap();
    assert_eq!(m.extract(&item.mixture, &s).unwrap(), back.extract(&item.mixture, &s).unwrap());
}

#[test]
fn fine_tuning_starts_from_loaded_weights() {
    let f = fixture();
    let (m, _) = run(6);
    let cfg = TrainConfig {
        max_epochs: 1,
        lr_init: piave::harness::train::FINE_TUNE_LR,
        ..TrainConfig::default()
    };
    let (tuned, h) = train(Piave::from_params(small(), m.params().clone()).unwrap(), &f.train, &f.val, &cfg, |_, _| {}).unwrap();
    assert_eq!(h.epochs[0].lr, 1e-4);
    assert_eq!(tuned.params().len(), m.params().len());
}

#[test]
fn empty_splits_are_rejected() {
    let f = fixture();
    let cfg = TrainConfig::default();
    assert!(train(Piave::new(small(), 0).unwrap(), &f.train, &[], &cfg, |_, _| {}).is_err());
    assert!(train(Piave::new(small(), 0).unwrap(), &[], &f.val, &cfg, |_, _| {}).is_err());
}

#[test]
fn evaluation_report_shape() {
    let f = fixture();
    let (m, _) = run(7);
    let opts = EvalOptions { stoi: true, view_seed: 3 };
    let r = evaluate(&m, &f.corpus, Split::Test, &ViewLevel::ALL, &opts).unwrap();
    assert_eq!(r.views.len(), 7);
    assert_eq!(r.items.len(), 21);
    assert!(r.failures.is_empty());
    assert!(r.avg7.is_some() && r.avg6.is_some());
    assert!(r.views.iter().all(|v| v.stoi.is_some()));
    assert_eq!(r.to_csv().lines().count(), 22);
    let front = evaluate(&m, &f.corpus, Split::Test, &[ViewLevel::Front], &opts).unwrap();
    assert!(front.avg7.is_none());
}

#[test]
fn missing_item_files_are_reported_not_fatal() {
    let (m, _) = run(8);
    let dir = tempfile::tempdir().unwrap();
    let cfg = CorpusConfig {
        n_train: 2,
        n_val: 2,
        n_test: 3,
        duration_s: 1.0,
        ..CorpusConfig::default()
    };
    build_corpus(&cfg, dir.path()).unwrap();
    let corpus = Corpus::open(dir.path()).unwrap();
    let victim = corpus.manifest().items(Split::Test).next().unwrap().id.clone();
    std::fs::remove_file(dir.path().join("test").join(&victim).join("mix.wav")).unwrap();
    let opts = EvalOptions { stoi: false, view_seed: 0 };
    let r = evaluate(&m, &corpus, Split::Test, &[ViewLevel::Front], &opts).unwrap();
    assert_eq!(r.failures.len(), 1);
    assert_eq!(r.failures[0].id, victim);
    assert_eq!(r.items.len(), 2);
}
