use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use piave::autodiff::{checkpoint, Graph, ParamStore, Tensor};
use piave::data::{corrupt_view, gen_item, gen_utterance, CorpusConfig, SpeakerProfile, Split, ViewLevel};
use piave::dsp::{mix_at_snr, read_wav, si_sdr, snr_db, stoi, write_wav, Waveform};
use piave::geometry::{
    compose_geometry, default_topology, mean_shape, random_deformation, self_align, uv_pack, uv_unpack, PoseParams,
};
use piave::model::FeatureFrames;

fn signal(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, len).prop_filter("non-silent", |v| v.iter().any(|x| x.abs() > 1e-3))
}

fn wave(v: Vec<f64>) -> Waveform {
    Waveform::new(v, 8000).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn si_sdr_ignores_estimate_gain(
        (est, reference) in (64usize..400).prop_flat_map(|n| (signal(n..n + 1), signal(n..n + 1))),
        alpha in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0],
    ) {
        let base = si_sdr(&wave(est.clone()), &wave(reference.clone())).unwrap().value;
        let scaled = si_sdr(&wave(est.iter().map(|x| x * alpha).collect()), &wave(reference)).unwrap().value;
        prop_assert!((base - scaled).abs() < 1e-6, "{base} vs {scaled}");
    }

    #[test]
    fn mixture_hits_requested_snr(
        (t, i) in (32usize..300).prop_flat_map(|n| (signal(n..n + 1), signal(n..n + 1))),
        snr in -10.0f64..=10.0,
    ) {
        let target = wave(t);
        let m = mix_at_snr(&target, &wave(i), snr).unwrap();
        prop_assert!((snr_db(&target, &m.scaled_interferer) - snr).abs() < 1e-9);
        for ((x, y), z) in m.mixture.samples().iter().zip(target.samples()).zip(m.scaled_interferer.samples()) {
            prop_assert_eq!(*x, y + z);
        }
    }

    #[test]
    fn pose_round_trip(seed in any::<u64>(), amp in 0.0f64..0.05) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pose = PoseParams::random(&mut rng, (0.5, 2.0), 1.0);
        let shape = random_deformation(&mean_shape(), seed, amp);
        let posed = compose_geometry(&pose, &shape).unwrap();
        let lm = default_topology().landmark_vertices();
        let est = self_align(&posed, &shape, &lm).unwrap();
        prop_assert!(est.max_abs_diff(&pose) < 1e-6);
    }

    #[test]
    fn uv_pack_round_trip(seed in any::<u64>()) {
        let mesh = random_deformation(&mean_shape(), seed, 0.05);
        let back = uv_unpack(&uv_pack(&mesh, &default_topology()).unwrap()).unwrap();
        prop_assert_eq!(back.vertices(), mesh.vertices());
    }

    #[test]
    fn gradients_are_linear_in_the_upstream_weights(
        seed in any::<u64>(),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rand = |shape: &[usize], rng: &mut ChaCha8Rng| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| rand::Rng::random_range(rng, -1.0..1.0)).collect();
            Tensor::new(shape.to_vec(), data).unwrap()
        };
        let x = rand(&[3, 12], &mut rng);
        let w = rand(&[4, 3, 3], &mut rng);
        let (u, v) = (rand(&[4, 12], &mut rng), rand(&[4, 12], &mut rng));
        let grad_for = |probe: &Tensor<f64>| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone(), true);
            let wv = g.leaf(w.clone(), true);
            let y = g.conv1d(xv, wv, None, 1, 1, 1).unwrap();
            let s = g.sigmoid(y);
            let p = g.constant(probe.clone());
            let m = g.mul(s, p).unwrap();
            let l = g.sum(m);
            g.backward(l).unwrap();
            (g.grad(xv).unwrap(), g.grad(wv).unwrap())
        };
        let combo = Tensor::new(
            vec![4, 12],
            u.data().iter().zip(v.data()).map(|(p, q)| a * p + b * q).collect(),
        ).unwrap();
        let (gu, gv, gc) = (grad_for(&u), grad_for(&v), grad_for(&combo));
        for (i, (&c, (&p, &q))) in gc.0.data().iter().zip(gu.0.data().iter().zip(gv.0.data())).enumerate() {
            prop_assert!((c - (a * p + b * q)).abs() < 1e-12, "x[{i}]");
        }
        for (&c, (&p, &q)) in gc.1.data().iter().zip(gu.1.data().iter().zip(gv.1.data())) {
            prop_assert!((c - (a * p + b * q)).abs() < 1e-12);
        }
    }

    #[test]
    fn global_layer_norm_standardizes(
        data in prop::collection::vec(-10.0f64..10.0, 24),
    ) {
        let mean = data.iter().sum::<f64>() / 24.0;
        let var = data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 24.0;
        prop_assume!(var > 1e-3);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![4, 6], data).unwrap());
        let gain = g.constant(Tensor::full(&[4], 1.0));
        let bias = g.constant(Tensor::zeros(&[4]));
        let y = g.global_layer_norm(x, gain, bias).unwrap();
        let out = g.value(y).data();
        let m = out.iter().sum::<f64>() / 24.0;
        let v = out.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 24.0;
        prop_assert!(m.abs() < 1e-9);
        prop_assert!((v - 1.0).abs() < 1e-4, "variance {v}");
    }

    #[test]
    fn checkpoint_round_trip(values in prop::collection::vec(-1e6f32..1e6, 1..50), cols in 1usize..4) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let mut store = ParamStore::new();
        let n = values.len();
        store.push("a.w", Tensor::new(vec![n], values.clone()).unwrap()).unwrap();
        store.push("b", Tensor::new(vec![cols, 1], vec![0.5; cols]).unwrap()).unwrap();
        checkpoint::save(&path, &store, serde_json::json!({"k": 1})).unwrap();
        let (back, meta) = checkpoint::load(&path).unwrap();
        prop_assert_eq!(meta["k"].as_i64(), Some(1));
        let a: Vec<&piave::autodiff::Param<f32>> = store.iter().collect();
        let b: Vec<&piave::autodiff::Param<f32>> = back.iter().collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn wav_round_trip_within_one_lsb(samples in prop::collection::vec(-1.0f64..1.0, 1..400)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        write_wav(&path, &wave(samples.clone())).unwrap();
        let back = read_wav(&path).unwrap();
        prop_assert_eq!(back.sample_rate(), 8000);
        for (a, b) in back.samples().iter().zip(&samples) {
            prop_assert!((a - b).abs() <= 1.0 / 32767.0 + 1e-12);
        }
    }
}

fn distance(a: &FeatureFrames, b: &FeatureFrames) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn corruption_grows_with_strength(speaker in 0u32..50, seed in any::<u64>(), view_seed in any::<u64>()) {
        let clean = gen_utterance(&SpeakerProfile::from_seed(speaker, seed), 1.0, seed).unwrap().frames;
        let mut levels = ViewLevel::ALL.to_vec();
        levels.sort_by(|a, b| a.strength().total_cmp(&b.strength()));
        let d: Vec<(f64, f64)> = levels
            .iter()
            .map(|&l| (l.strength(), distance(&corrupt_view(&clean, l, view_seed).unwrap(), &clean)))
            .collect();
        prop_assert_eq!(d[0].1, 0.0);
        for w in d.windows(2) {
            if w[1].0 > w[0].0 {
                prop_assert!(w[1].1 > w[0].1, "{:?}", d);
            } else {
                prop_assert!((w[1].1 - w[0].1).abs() <= 1e-3 * w[1].1, "{:?}", d);
            }
        }
    }

    #[test]
    fn pose_invariant_stream_ignores_the_view(index in 0usize..20, view_seed in any::<u64>()) {
        let cfg = CorpusConfig { n_train: 20, duration_s: 1.0, ..CorpusConfig::default() };
        let item = gen_item(&cfg, Split::Train, index).unwrap();
        let model = piave::model::ModelConfig::default();
        let streams: Vec<_> = ViewLevel::ALL
            .iter()
            .map(|&v| {
                let orig = corrupt_view(&item.original, v, view_seed).unwrap();
                model.prepare_streams(orig, item.pose_invariant.clone()).unwrap()
            })
            .collect();
        for s in &streams[1..] {
            prop_assert_eq!(&s.pose_invariant, &streams[0].pose_invariant);
        }
    }
}

#[test]
fn stoi_stays_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..8 {
        let x: Vec<f64> = (0..8000).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let y: Vec<f64> = (0..8000).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let v = stoi(&wave(y), &wave(x)).unwrap().value;
        assert!((-1.0..=1.0).contains(&v), "{v}");
    }
}
