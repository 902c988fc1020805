use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vcm_core::analyzer::{accuracy_loss, evaluate, pretrain, softmax, Analyzer, AnalyzerError, PretrainConfig};
use vcm_core::autodiff::{Tape, Tensor};
use vcm_core::video::synth::NUM_CLASSES;
use vcm_core::video::{synth_dataset, Split, VideoClip};

fn ce(logits: &[f32], label: usize) -> f64 {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::new(vec![logits.len()], logits.to_vec()).unwrap());
    let loss = accuracy_loss(&mut tape, l, label).unwrap();
    tape.value(loss).item() as f64
}

#[test]
fn softmax_is_a_distribution_and_classify_is_pure() {
    let a = Analyzer::init(2);
    for c in synth_dataset(1, 8, Split::Val) {
        let l = a.classify(&c.clip).unwrap();
        assert_eq!(l.len(), NUM_CLASSES);
        let p = softmax(&l);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(p.iter().all(|&v| v >= 0.0));
        assert_eq!(a.classify(&c.clip).unwrap(), l);
    }
}

#[test]
fn untrained_accuracy_is_near_chance() {
    let val = synth_dataset(0, 512, Split::Val);
    for seed in [0, 1] {
        let acc = evaluate(&Analyzer::init(seed), &val).unwrap();
        assert!((acc - 0.125).abs() <= 0.05, "seed {seed}: {acc}");
    }
}

#[test]
fn rejects_wrong_geometry_and_label() {
    let c = VideoClip::luma(8, 32, 32, vec![0.5; 8 * 32 * 32]).unwrap();
    assert!(Analyzer::init(0).classify(&c).is_err());
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::zeros(&[NUM_CLASSES]));
    assert!(matches!(accuracy_loss(&mut tape, l, NUM_CLASSES), Err(AnalyzerError::Label(_))));
}

#[test]
fn cross_entropy_matches_direct_sum() {
    assert!((ce(&[0.0; 8], 3) - 8f64.ln()).abs() < 1e-6);
    let mut prev = f64::INFINITY;
    for margin in [1.0f32, 5.0, 10.0, 20.0, 40.0] {
        let mut l = [0.0f32; 8];
        l[5] = margin;
        let v = ce(&l, 5);
        assert!(v < prev);
        prev = v;
    }
    assert!(prev < 1e-6);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let logits: Vec<f32> = (0..8).map(|_| rng.random_range(-30.0f32..30.0)).collect();
        let label = rng.random_range(0..8);
        let denom: f64 = logits.iter().map(|&v| (v as f64).exp()).sum();
        let direct = -((logits[label] as f64).exp() / denom).ln();
        let got = ce(&logits, label);
        assert!((got - direct).abs() <= 1e-6 * direct.max(1.0), "{got} vs {direct}");
    }
}

fn short_config(steps: usize) -> PretrainConfig {
    PretrainConfig {
        seed: 3,
        max_steps: steps,
        eval_every: steps,
        min_accuracy: 0.0,
        ..PretrainConfig::default()
    }
}

#[test]
fn pretraining_starts_near_uniform_and_is_deterministic() {
    let train = synth_dataset(0, 32, Split::Train);
    let val = synth_dataset(0, 16, Split::Val);
    let (a, log_a) = pretrain(&train, &val, &short_config(3), |_, _, _| {}).unwrap();
    let (b, log_b) = pretrain(&train, &val, &short_config(3), |_, _, _| {}).unwrap();
    assert!((log_a.losses[0] - 8f64.ln()).abs() <= 0.2, "{}", log_a.losses[0]);
    assert_eq!(a.checksum(), b.checksum());
    assert_eq!(log_a.losses, log_b.losses);
    assert!(a.is_frozen());
    assert_ne!(a.checksum(), Analyzer::init(3).checksum());
}

#[test]
fn pretraining_reports_failure_below_floor() {
    let train = synth_dataset(0, 16, Split::Train);
    let val = synth_dataset(0, 16, Split::Val);
    let cfg = PretrainConfig {
        min_accuracy: 0.8,
        ..short_config(1)
    };
    assert!(matches!(
        pretrain(&train, &val, &cfg, |_, _, _| {}),
        Err(AnalyzerError::PretrainFailed { .. })
    ));
}

#[test]
fn checkpoint_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("analyzer.vcmp");
    let mut a = Analyzer::init(6);
    a.set_frozen(true);
    a.save(&path).unwrap();
    let b = Analyzer::load(&path).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.checksum(), b.checksum());
}
