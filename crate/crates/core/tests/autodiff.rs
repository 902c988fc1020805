use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcm_core::autodiff::{AutodiffError, Tape, Tensor, Var};

fn t(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Checks `d <w, f(inputs)> / d inputs` from backward against central
/// differences (h = 1e-3) of the same projection evaluated in f64.
fn check_gradients(
    seed: u64,
    inputs: &[Tensor],
    f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let probe_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.shape(out).to_vec()
    };
    let weights = random(&mut rng, &probe_shape, -1.0, 1.0);
    let project = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(o, w)| *o as f64 * *w as f64)
            .sum()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars).unwrap();
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();

    let h = 1e-3f32;
    let mut worst = 0f64;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).unwrap();
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let actual_h = (plus[k].data()[i] - minus[k].data()[i]) as f64;
            let fd = (project(&plus) - project(&minus)) / actual_h;
            let err = (analytic.data()[i] as f64 - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}

/// Values in `[lo, hi]` kept at least `gap` away from every point in `kinks`.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32, kinks: &[f32], gap: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.random_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn relu_sigmoid_and_square_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

    let z = tape.constant(Tensor::scalar(0.0));
    let s = tape.sigmoid(z);
    assert_eq!(tape.value(s).item(), 0.5);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0), true);
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 6.0);
}

#[test]
fn elementwise_errors() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2], &[1.0, 2.0]));
    let b = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
    assert!(matches!(tape.add(a, b), Err(AutodiffError::ShapeMismatch { .. })));
    assert!(matches!(tape.mse(a, b), Err(AutodiffError::ShapeMismatch { .. })));
    let z = tape.constant(t(&[2], &[1.0, 0.0]));
    assert!(matches!(tape.log(z), Err(AutodiffError::Domain { .. })));
    assert!(matches!(Tensor::new(vec![0], vec![]), Err(AutodiffError::EmptyTensor)));
}

#[test]
fn clamp01_passes_gradient_at_boundaries() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[4], &[-0.5, 0.0, 1.0, 1.5]), true);
    let c = tape.clamp01(x);
    assert_eq!(tape.value(c).data(), &[0.0, 0.0, 1.0, 1.0]);
    let loss = tape.sum(c);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
}

#[test]
fn reduce_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
    let m = tape.mean(x);
    assert_eq!(tape.value(m).item(), 2.0);
    let z = tape.constant(Tensor::zeros(&[5]));
    let s = tape.sum(z);
    assert_eq!(tape.value(s).item(), 0.0);
    let g = tape.backward(m).unwrap();
    for v in g.get(x).unwrap().data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-7);
    }
}

#[test]
fn mse_examples_and_loop_oracle() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2], &[0.0, 0.0]));
    let b = tape.constant(t(&[2], &[1.0, 1.0]));
    let m = tape.mse(a, b).unwrap();
    assert_eq!(tape.value(m).item(), 1.0);
    let same = tape.mse(b, b).unwrap();
    assert_eq!(tape.value(same).item(), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let x = random(&mut rng, &[7, 5], -2.0, 2.0);
        let y = random(&mut rng, &[7, 5], -2.0, 2.0);
        let mut oracle = 0f64;
        for i in 0..x.len() {
            let d = x.data()[i] as f64 - y.data()[i] as f64;
            oracle += d * d;
        }
        oracle /= x.len() as f64;
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(x), tape.constant(y));
        let ab = tape.mse(a, b).unwrap();
        let ba = tape.mse(b, a).unwrap();
        assert_eq!(tape.value(ab).item(), tape.value(ba).item());
        let rel = ((tape.value(ab).item() as f64 - oracle) / oracle).abs();
        assert!(rel < 1e-6, "rel err {rel}");
    }
}

fn conv2d_oracle(x: &Tensor, k: &Tensor, b: &Tensor) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, ks) = (k.shape()[0], k.shape()[2]);
    let r = (ks / 2) as isize;
    let mut out = vec![0f64; co * h * w];
    for o in 0..co {
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let mut s = b.data()[o] as f64;
                for ci in 0..c {
                    for ky in 0..ks as isize {
                        for kx in 0..ks as isize {
                            let (sy, sx) = (y + ky - r, xx + kx - r);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            let kv = k.data()[((o * c + ci) * ks + ky as usize) * ks + kx as usize];
                            s += kv as f64 * x.data()[(ci * h + sy as usize) * w + sx as usize] as f64;
                        }
                    }
                }
                out[(o * h + y as usize) * w + xx as usize] = s;
            }
        }
    }
    out
}

#[test]
fn conv2d_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, &[2, 5, 8], -1.0, 1.0);

    // 1x1 identity kernels
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let k = tape.constant(t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]));
    let y = tape.conv2d(xv, k, None).unwrap();
    assert_eq!(tape.value(y), &x);

    // zero kernels give bias planes
    let k0 = tape.constant(Tensor::zeros(&[3, 2, 3, 3]));
    let b = tape.constant(t(&[3], &[0.5, -1.0, 2.0]));
    let y0 = tape.conv2d(xv, k0, Some(b)).unwrap();
    for (o, plane) in tape.value(y0).data().chunks(40).enumerate() {
        assert!(plane.iter().all(|&v| v == [0.5, -1.0, 2.0][o]));
    }

    let bad = tape.constant(Tensor::zeros(&[3, 4, 3, 3]));
    assert!(tape.conv2d(xv, bad, None).is_err());
    let even = tape.constant(Tensor::zeros(&[3, 2, 2, 2]));
    assert!(tape.conv2d(xv, even, None).is_err());

    // random kernels against the nested-loop oracle on every code path
    for (seed, w, ks) in [(1u64, 8usize, 3usize), (2, 7, 3), (3, 16, 3), (4, 8, 1), (5, 7, 1), (6, 8, 5)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[3, 6, w], -1.0, 1.0);
        let k = random(&mut rng, &[13, 3, ks, ks], -1.0, 1.0);
        let b = random(&mut rng, &[13], -1.0, 1.0);
        let oracle = conv2d_oracle(&x, &k, &b);
        let mut tape = Tape::new();
        let (xv, kv, bv) = (tape.constant(x), tape.constant(k), tape.constant(b));
        let y = tape.conv2d(xv, kv, Some(bv)).unwrap();
        let max_diff = tape
            .value(y)
            .data()
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (*a as f64 - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-5, "max diff {max_diff}");
    }
}

fn temporal_oracle(x: &Tensor, k: &Tensor, b: &Tensor) -> Vec<f64> {
    let (tt, c, p) = (x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3]);
    let (co, kt) = (k.shape()[0], k.shape()[2]);
    let r = (kt / 2) as isize;
    let mut out = vec![0f64; tt * co * p];
    for t in 0..tt as isize {
        for o in 0..co {
            for px in 0..p {
                let mut s = b.data()[o] as f64;
                for ci in 0..c {
                    for j in 0..kt as isize {
                        let src = t + j - r;
                        if src < 0 || src >= tt as isize {
                            continue;
                        }
                        s += k.data()[(o * c + ci) * kt + j as usize] as f64
                            * x.data()[(src as usize * c + ci) * p + px] as f64;
                    }
                }
                out[(t as usize * co + o) * p + px] = s;
            }
        }
    }
    out
}

#[test]
fn conv_temporal_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[4, 1, 3, 3], 0.0, 1.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let id = tape.constant(t(&[1, 1, 1], &[1.0]));
    let y = tape.conv_temporal(xv, id, None).unwrap();
    assert_eq!(tape.value(y), &x);

    // constant-in-time input, averaging kernel: interior frames unchanged
    let frame: Vec<f32> = (0..9).map(|i| i as f32 / 9.0).collect();
    let clip: Vec<f32> = (0..4).flat_map(|_| frame.clone()).collect();
    let cv = tape.constant(t(&[4, 1, 3, 3], &clip));
    let avg = tape.constant(t(&[1, 1, 3], &[0.25, 0.5, 0.25]));
    let ya = tape.conv_temporal(cv, avg, None).unwrap();
    for tt in 1..3 {
        for (a, b) in tape.value(ya).data()[tt * 9..(tt + 1) * 9].iter().zip(&frame) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    let even = tape.constant(Tensor::zeros(&[1, 1, 2]));
    assert!(tape.conv_temporal(cv, even, None).is_err());
    let long = tape.constant(Tensor::zeros(&[1, 1, 5]));
    assert!(tape.conv_temporal(cv, long, None).is_err());

    // blocked path (plane a multiple of 8) and the plain loop
    for (h, w) in [(4usize, 6usize), (3, 3)] {
        let x = random(&mut rng, &[5, 3, h, w], -1.0, 1.0);
        let k = random(&mut rng, &[13, 3, 3], -1.0, 1.0);
        let b = random(&mut rng, &[13], -1.0, 1.0);
        let oracle = temporal_oracle(&x, &k, &b);
        let mut tape = Tape::new();
        let (xv, kv, bv) = (tape.constant(x), tape.constant(k), tape.constant(b));
        let y = tape.conv_temporal(xv, kv, Some(bv)).unwrap();
        let max_diff = tape
            .value(y)
            .data()
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (*a as f64 - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-5, "max diff {max_diff}");
    }
}

#[test]
fn backward_examples_and_errors() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[2, 3], 0.3), true);
    let y = tape.leaf(Tensor::full(&[4], 0.7), true);
    let loss = tape.sum(x);
    let g = tape.backward(loss).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    assert!(g.get(y).unwrap().data().iter().all(|&v| v == 0.0));
    assert_eq!(tape.backward(loss).unwrap_err(), AutodiffError::TapeConsumed);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[2], 0.3), true);
    let r = tape.relu(x);
    assert!(matches!(tape.backward(r), Err(AutodiffError::NonScalarLoss(_))));
}

#[test]
fn round_ste_forward_rounds_backward_is_identity() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[5], &[-1.5, -0.49, 0.5, 2.51, 7.0]), true);
    let r = tape.round_ste(x);
    assert_eq!(tape.value(r).data(), &[-2.0, -0.0, 1.0, 3.0, 7.0]);
    let loss = tape.sum(r);
    let g = tape.backward(loss).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn finite_difference_every_primitive() {
    type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>>;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let four = |rng: &mut ChaCha8Rng| random(rng, &[4], -2.0, 2.0);
        let cases: Vec<(&str, Vec<Tensor>, Build)> = vec![
            ("add", vec![four(&mut rng), four(&mut rng)], Box::new(|t, v| t.add(v[0], v[1]))),
            ("sub", vec![four(&mut rng), four(&mut rng)], Box::new(|t, v| t.sub(v[0], v[1]))),
            ("mul", vec![four(&mut rng), four(&mut rng)], Box::new(|t, v| t.mul(v[0], v[1]))),
            ("scale", vec![four(&mut rng)], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
            ("shift", vec![four(&mut rng)], Box::new(|t, v| Ok(t.shift(v[0], 0.3)))),
            (
                "relu",
                vec![away_from(&mut rng, &[4], -2.0, 2.0, &[0.0], 0.01)],
                Box::new(|t, v| Ok(t.relu(v[0]))),
            ),
            ("sigmoid", vec![four(&mut rng)], Box::new(|t, v| Ok(t.sigmoid(v[0])))),
            (
                "abs",
                vec![away_from(&mut rng, &[4], -2.0, 2.0, &[0.0], 0.01)],
                Box::new(|t, v| Ok(t.abs(v[0]))),
            ),
            ("log", vec![random(&mut rng, &[4], 0.2, 3.0)], Box::new(|t, v| t.log(v[0]))),
            (
                "clamp01",
                vec![away_from(&mut rng, &[4], -0.5, 1.5, &[0.0, 1.0], 0.01)],
                Box::new(|t, v| Ok(t.clamp01(v[0]))),
            ),
            ("sum", vec![four(&mut rng)], Box::new(|t, v| Ok(t.sum(v[0])))),
            ("mean", vec![four(&mut rng)], Box::new(|t, v| Ok(t.mean(v[0])))),
            ("mse", vec![four(&mut rng), four(&mut rng)], Box::new(|t, v| t.mse(v[0], v[1]))),
            (
                "reshape",
                vec![four(&mut rng)],
                Box::new(|t, v| t.reshape(v[0], &[2, 2])),
            ),
            (
                "gather",
                vec![four(&mut rng)],
                Box::new(|t, v| t.gather(v[0], vec![3, 0, 0, 2, 1], &[5])),
            ),
            (
                "concat",
                vec![random(&mut rng, &[2, 2], -2.0, 2.0), random(&mut rng, &[2, 1], -2.0, 2.0)],
                Box::new(|t, v| t.concat(&[v[0], v[1]], 1)),
            ),
            (
                "tile2d",
                vec![random(&mut rng, &[2, 2], -2.0, 2.0)],
                Box::new(|t, v| t.tile2d(v[0], (2, 3))),
            ),
            (
                "conv2d",
                vec![
                    random(&mut rng, &[1, 2, 2], -2.0, 2.0),
                    random(&mut rng, &[2, 1, 3, 3], -1.0, 1.0),
                    random(&mut rng, &[2], -1.0, 1.0),
                ],
                Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]))),
            ),
            (
                "conv2d_wide",
                vec![
                    random(&mut rng, &[2, 2, 2, 8], -2.0, 2.0),
                    random(&mut rng, &[5, 2, 3, 3], -1.0, 1.0),
                    random(&mut rng, &[5], -1.0, 1.0),
                ],
                Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]))),
            ),
            (
                "conv2d_pointwise",
                vec![
                    random(&mut rng, &[2, 7, 2, 4], -2.0, 2.0),
                    random(&mut rng, &[5, 7, 1, 1], -1.0, 1.0),
                    random(&mut rng, &[5], -1.0, 1.0),
                ],
                Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]))),
            ),
            (
                "conv_temporal_wide",
                vec![
                    random(&mut rng, &[4, 3, 2, 4], -2.0, 2.0),
                    random(&mut rng, &[5, 3, 3], -1.0, 1.0),
                    random(&mut rng, &[5], -1.0, 1.0),
                ],
                Box::new(|t, v| t.conv_temporal(v[0], v[1], Some(v[2]))),
            ),
            (
                "conv_temporal",
                vec![
                    random(&mut rng, &[4, 1, 1, 1], -2.0, 2.0),
                    random(&mut rng, &[2, 1, 3], -1.0, 1.0),
                    random(&mut rng, &[2], -1.0, 1.0),
                ],
                Box::new(|t, v| t.conv_temporal(v[0], v[1], Some(v[2]))),
            ),
            (
                "avg_pool2",
                vec![random(&mut rng, &[1, 2, 2], -2.0, 2.0)],
                Box::new(|t, v| t.avg_pool2(v[0])),
            ),
            (
                "global_avg_pool",
                vec![random(&mut rng, &[2, 2, 1, 1], -2.0, 2.0)],
                Box::new(|t, v| t.global_avg_pool(v[0])),
            ),
            (
                "linear",
                vec![four(&mut rng), random(&mut rng, &[3, 4], -1.0, 1.0), random(&mut rng, &[3], -1.0, 1.0)],
                Box::new(|t, v| t.linear(v[0], v[1], v[2])),
            ),
            ("cross_entropy", vec![four(&mut rng)], Box::new(|t, v| t.cross_entropy(v[0], 2))),
        ];
        for (name, inputs, build) in &cases {
            let err = check_gradients(seed, inputs, build.as_ref());
            assert!(err < 1e-3, "{name} seed {seed}: rel err {err}");
        }
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x0 = random(&mut rng, &[6], 0.1, 2.0);
    let grad_of = |which: u8| -> Vec<f32> {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let f = {
            let s = tape.sigmoid(x);
            tape.sum(s)
        };
        let g = {
            let l = tape.log(x).unwrap();
            let sq = tape.mul(l, x).unwrap();
            tape.mean(sq)
        };
        let loss = match which {
            0 => f,
            1 => g,
            _ => {
                let a = tape.scale(f, 2.5);
                let b = tape.scale(g, -0.75);
                tape.add(a, b).unwrap()
            }
        };
        tape.backward(loss).unwrap().get(x).unwrap().data().to_vec()
    };
    let (gf, gg, gc) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..gf.len() {
        let expect = 2.5 * gf[i] - 0.75 * gg[i];
        assert!((gc[i] - expect).abs() < 1e-5);
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&mut rng, &[3, 2, 8, 8], -1.0, 1.0);
        let k = random(&mut rng, &[4, 2, 3, 3], -1.0, 1.0);
        let mut tape = Tape::new();
        let (xv, kv) = (tape.leaf(x, true), tape.leaf(k, true));
        let y = tape.conv2d(xv, kv, None).unwrap();
        let s = tape.sigmoid(y);
        let loss = tape.mean(s);
        let value = tape.value(loss).item();
        let g = tape.backward(loss).unwrap();
        (value.to_bits(), g.get(xv).unwrap().clone(), g.get(kv).unwrap().clone())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}
