use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcm_core::autodiff::{Tape, Tensor};
use vcm_core::codec::entropy::{sample_discrete_laplacian, LIKELIHOOD_FLOOR};
use vcm_core::codec::quant::{dequantize, quantize};
use vcm_core::codec::{
    collect_symbols, dct8_forward, dct8_inverse, encode_on_tape, predict_frame, quant_step, virtual_encode,
    CodecError, EntropyModel, PredMode, QuantMode, VirtualCodecConfig,
};
use vcm_core::video::{standard_clip, VideoClip};

const GRID: [f32; 5] = [30.0, 35.0, 40.0, 45.0, 50.0];

fn random_block(rng: &mut ChaCha8Rng) -> [f32; 64] {
    std::array::from_fn(|_| rng.random_range(-1.0f32..1.0))
}

#[test]
fn dct_constant_block() {
    for v in [0.0f32, 0.25, -1.5, 3.0] {
        let c = dct8_forward(&[v; 64]);
        assert!((c[0] - 8.0 * v).abs() < 1e-5);
        assert!(c[1..].iter().all(|a| a.abs() < 1e-5));
    }
}

#[test]
fn dct_roundtrip_and_parseval() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let x = random_block(&mut rng);
        let c = dct8_forward(&x);
        let back = dct8_inverse(&c);
        for (a, b) in back.iter().zip(&x) {
            assert!((a - b).abs() < 1e-5);
        }
        let ex: f64 = x.iter().map(|v| (*v as f64).powi(2)).sum();
        let ec: f64 = c.iter().map(|v| (*v as f64).powi(2)).sum();
        assert!((ex - ec).abs() < 1e-4);
    }
}

#[test]
fn quant_step_spot_values() {
    assert_eq!(quant_step(4.0), 1.0);
    assert_eq!(quant_step(10.0), 2.0);
    assert_eq!(quant_step(16.0), 4.0);
    assert!(VirtualCodecConfig::with_fq(3.5, QuantMode::Round).validate().is_err());
}

#[test]
fn round_mode_is_straight_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for f_q in [4.0, 22.0, 37.0] {
        let step = quant_step(f_q);
        let values: Vec<f32> = (0..256).map(|_| rng.random_range(-400.0f32..400.0)).collect();
        let mut tape = Tape::new();
        let c = tape.leaf(Tensor::new(vec![16, 16], values.clone()).unwrap(), true);
        let q = quantize(&mut tape, c, step, QuantMode::Round, &mut rng);
        for (qv, v) in tape.value(q).data().iter().zip(&values) {
            assert_eq!(qv.to_bits(), (v * (1.0 / step)).round().to_bits());
        }
        let d = dequantize(&mut tape, q, step);
        for (dv, v) in tape.value(d).data().iter().zip(&values) {
            assert!((dv - v).abs() <= step / 2.0 * (1.0 + 1e-6));
        }
        let s = tape.sum(q);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).unwrap().data().iter().all(|&x| x == 1.0 / step));
    }
}

fn flat(t: usize, v: f32) -> VideoClip {
    VideoClip::luma(t, 64, 64, vec![v; t * 64 * 64]).unwrap()
}

#[test]
fn static_clip_predicts_inter_zero() {
    let clip = standard_clip(0);
    let frame0 = Tensor::new(vec![64, 64], clip.plane(0)[..4096].to_vec()).unwrap();
    let cfg = VirtualCodecConfig::default();
    let (pred, decisions) = predict_frame(&frame0, Some(&frame0), &cfg).unwrap();
    assert!(decisions.iter().all(|d| d.mode == PredMode::Inter { dx: 0, dy: 0 }));
    assert_eq!(pred, frame0);
}

#[test]
fn flat_first_frame_is_dc() {
    let frame = Tensor::full(&[64, 64], 0.5);
    let (pred, decisions) = predict_frame(&frame, None, &VirtualCodecConfig::default()).unwrap();
    assert!(decisions.iter().all(|d| d.mode == PredMode::Dc && d.sad == 0.0));
    assert_eq!(pred, frame);
}

/// Exhaustive search written independently of the codec: the SAD-minimal
/// displacement over every in-frame candidate.
fn exhaustive_mv(cur: &[f32], reference: &[f32], y0: usize, x0: usize) -> (i32, i32, f64) {
    let mut best = (0, 0, f64::INFINITY);
    for dy in -7i32..=7 {
        for dx in -7i32..=7 {
            let (sy, sx) = (y0 as i32 - dy, x0 as i32 - dx);
            if sy < 0 || sx < 0 || sy + 16 > 64 || sx + 16 > 64 {
                continue;
            }
            let mut sad = 0f64;
            for y in 0..16 {
                for x in 0..16 {
                    let a = cur[(y0 + y) * 64 + x0 + x];
                    let b = reference[(sy as usize + y) * 64 + sx as usize + x];
                    sad += (a - b).abs() as f64;
                }
            }
            if sad < best.2 {
                best = (dx, dy, sad);
            }
        }
    }
    best
}

#[test]
fn translation_recovers_motion_vector() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // Random texture, then the same texture shifted right by 3 with a
    // constant border entering from the left.
    let reference: Vec<f32> = (0..4096).map(|_| rng.random_range(0.1f32..0.9)).collect();
    let current: Vec<f32> = (0..4096)
        .map(|i| {
            let (y, x) = (i / 64, i % 64);
            if x < 3 {
                0.5
            } else {
                reference[y * 64 + x - 3]
            }
        })
        .collect();
    let cur_t = Tensor::new(vec![64, 64], current.clone()).unwrap();
    let ref_t = Tensor::new(vec![64, 64], reference.clone()).unwrap();
    let (_, decisions) = predict_frame(&cur_t, Some(&ref_t), &VirtualCodecConfig::default()).unwrap();
    for d in &decisions {
        let (dx, dy, sad) = exhaustive_mv(&current, &reference, d.y, d.x);
        if d.x > 0 {
            assert_eq!(d.mode, PredMode::Inter { dx: 3, dy: 0 }, "block {:?}", (d.y, d.x));
            assert_eq!((dx, dy, sad), (3, 0, 0.0));
        }
    }
}

#[test]
fn predict_rejects_bad_geometry() {
    let a = Tensor::zeros(&[64, 64]);
    let b = Tensor::zeros(&[32, 64]);
    let cfg = VirtualCodecConfig::default();
    assert!(matches!(predict_frame(&a, Some(&b), &cfg), Err(CodecError::SizeMismatch { .. })));
    let odd = Tensor::zeros(&[24, 64]);
    assert!(matches!(predict_frame(&odd, None, &cfg), Err(CodecError::NotBlockAligned { .. })));
}

#[test]
fn cdf_monotone_and_probabilities_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut model = EntropyModel::default();
    for p in model.params_mut().data_mut() {
        *p += rng.random_range(-0.5f32..0.5);
    }
    for ch in 0..64 {
        // Strict monotonicity is checked on the logit; the sigmoid itself
        // saturates in double precision far in the tails.
        let (mut prev, mut prev_c) = (f64::NEG_INFINITY, 0.0);
        for i in 0..10_000 {
            let x = -25.0 + 50.0 * i as f64 / 9_999.0;
            let z = model.cdf_logit(ch, x);
            let c = model.cdf(ch, x);
            assert!((0.0..=1.0).contains(&c) && c >= prev_c);
            assert!(z > prev, "channel {ch} at {x}");
            (prev, prev_c) = (z, c);
        }
        for v in -40..=40 {
            let p = model.likelihood(ch, v as f64);
            assert!((LIKELIHOOD_FLOOR..=1.0).contains(&p));
        }
        let total: f64 = (-60..=60).map(|v| model.probability(ch, v as f64)).sum();
        assert!(total <= 1.0 + 1e-12);
    }
}

#[test]
fn fitted_laplacian_rate_matches_histogram_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let samples = sample_discrete_laplacian(&mut rng, 2.0, 20_000);
    let mut counts = std::collections::BTreeMap::new();
    for s in &samples {
        *counts.entry(*s as i64).or_insert(0usize) += 1;
    }
    let n = samples.len() as f64;
    let entropy: f64 = counts.values().map(|&c| -(c as f64 / n) * (c as f64 / n).log2()).sum();
    let mut model = EntropyModel::new(1);
    let bits = model.fit(&Tensor::new(vec![1, samples.len()], samples).unwrap(), 600, 2e-2).unwrap();
    assert!((bits - entropy).abs() < 0.1, "model {bits} vs histogram {entropy}");
}

#[test]
fn near_lossless_at_unit_step() {
    let clip = standard_clip(0);
    let rd = virtual_encode(&clip, &VirtualCodecConfig::with_fq(4.0, QuantMode::Round), &EntropyModel::default(), 0).unwrap();
    assert!(rd.distortion < 1e-4, "{}", rd.distortion);
    assert_eq!(rd.bpp, rd.rate / (8.0 * 64.0 * 64.0));
}

#[test]
fn rate_and_distortion_monotone_in_fq() {
    let clip = standard_clip(0);
    let mut model = EntropyModel::default();
    model.fit(&collect_symbols(std::slice::from_ref(&clip), &VirtualCodecConfig::default(), &GRID).unwrap(), 300, 2e-2).unwrap();
    let rds: Vec<_> = GRID
        .iter()
        .map(|&f| virtual_encode(&clip, &VirtualCodecConfig::with_fq(f, QuantMode::Round), &model, 0).unwrap())
        .collect();
    for w in rds.windows(2) {
        assert!(w[1].rate < w[0].rate, "rate {} -> {}", w[0].rate, w[1].rate);
        assert!(w[1].distortion >= w[0].distortion);
    }
}

#[test]
fn encode_is_deterministic_and_rate_additive() {
    let clip = standard_clip(3);
    let cfg = VirtualCodecConfig::with_fq(35.0, QuantMode::Noise);
    let model = EntropyModel::default();
    let a = virtual_encode(&clip, &cfg, &model, 7).unwrap();
    let b = virtual_encode(&clip, &cfg, &model, 7).unwrap();
    assert_eq!(a.side_info, b.side_info);
    assert_eq!(a.rate.to_bits(), b.rate.to_bits());
    assert_eq!(a.distortion.to_bits(), b.distortion.to_bits());

    let other = standard_clip(4);
    let s1 = collect_symbols(std::slice::from_ref(&clip), &VirtualCodecConfig::default(), &[35.0]).unwrap();
    let s2 = collect_symbols(std::slice::from_ref(&other), &VirtualCodecConfig::default(), &[35.0]).unwrap();
    let both = collect_symbols(&[clip, other], &VirtualCodecConfig::default(), &[35.0]).unwrap();
    let sum = model.bits(&s1).unwrap() + model.bits(&s2).unwrap();
    assert!((model.bits(&both).unwrap() - sum).abs() < 1e-9 * sum);
}

#[test]
fn encode_rejects_unaligned_and_non_luma() {
    let model = EntropyModel::default();
    let cfg = VirtualCodecConfig::default();
    let clip = VideoClip::luma(2, 24, 32, vec![0.5; 2 * 24 * 32]).unwrap();
    assert!(matches!(virtual_encode(&clip, &cfg, &model, 0), Err(CodecError::NotBlockAligned { .. })));
    let yuv = flat(2, 0.5).with_neutral_chroma().unwrap();
    assert!(matches!(virtual_encode(&yuv, &cfg, &model, 0), Err(CodecError::NotLuma)));
}

/// d(distortion + 0.001 * bits)/d(pixel) against central differences with a
/// fixed noise realization.
#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let clip = vcm_core::video::synth::synth_clip(17, vcm_core::video::Split::Train, 5, true).clip;
    let cfg = VirtualCodecConfig::with_fq(36.0, QuantMode::Noise);
    let mut model = EntropyModel::default();
    model.fit(&collect_symbols(std::slice::from_ref(&clip), &VirtualCodecConfig::default(), &[36.0]).unwrap(), 300, 2e-2).unwrap();
    let base = clip.luma_tensor().unwrap();

    let eval = |x: &Tensor, grad: bool| {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), grad);
        let src = tape.constant(base.clone());
        let params = tape.constant(model.params().clone());
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let rd = encode_on_tape(&mut tape, xv, src, params, &cfg, &mut rng).unwrap();
        let loss_f64 = rd.distortion_f64 + 1e-3 * rd.bits_f64;
        let g = grad.then(|| {
            let r = tape.scale(rd.bits, 1e-3);
            let l = tape.add(rd.distortion, r).unwrap();
            tape.backward(l).unwrap().take(xv).unwrap()
        });
        (loss_f64, g)
    };
    let (_, g) = eval(&base, true);
    let g = g.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-3f32;
    let mut worst = 0f64;
    for _ in 0..20 {
        let i = rng.random_range(0..base.len());
        let (mut plus, mut minus) = (base.clone(), base.clone());
        plus.data_mut()[i] += h;
        minus.data_mut()[i] -= h;
        let fd = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * h as f64);
        let a = g.data()[i] as f64;
        let rel = (a - fd).abs() / fd.abs().max(a.abs()).max(1e-4);
        worst = worst.max(rel);
    }
    assert!(worst < 5e-2, "worst relative error {worst}");
}
