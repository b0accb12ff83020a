use lbq_core::aquant::{
    act_quantize_forward, act_quantize_train, dynamic_range, soft_membership, ActQuantParams, Region,
};
use lbq_core::optim::{AdamConfig, AdamState};
use lbq_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn mse(x: &Tensor, p: &ActQuantParams) -> f64 {
    let q = act_quantize_forward(x, p).unwrap();
    x.data()
        .iter()
        .zip(q.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / x.len() as f64
}

/// 99% standard normal, 1% at ±50.
pub fn long_tailed(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n)
        .map(|i| {
            if i % 100 == 0 {
                if rng.gen_bool(0.5) {
                    50.0
                } else {
                    -50.0
                }
            } else {
                rng.sample::<f32, _>(StandardNormal)
            }
        })
        .collect();
    Tensor::new(&[n], data).unwrap()
}

/// Adam on the MSE of `x` through the training quantizer.
pub fn train(x: &Tensor, mut p: ActQuantParams, steps: usize, lr: f32, clips: bool, knees: bool) -> ActQuantParams {
    let cfg = AdamConfig::default();
    let mut states: Vec<AdamState> = (0..4).map(|_| AdamState::new(1)).collect();
    for _ in 0..steps {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = p.place(&mut tape, clips, knees);
        let q = act_quantize_train(&mut tape, xv, &p, &vars).unwrap();
        let d = tape.sub(q, xv).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let loss = tape.mean(sq).unwrap();
        tape.backward(loss).unwrap();
        let g = vars.grads(&tape);
        let fields = [&mut p.knee_lo, &mut p.gap_raw, &mut p.clip_max, &mut p.clip_min];
        let grads = [g.knee_lo, g.gap_raw, g.clip_max, g.clip_min];
        let live = [knees, knees, clips, clips];
        for k in 0..4 {
            if live[k] {
                let mut t = Tensor::scalar(*fields[k]);
                states[k].step(&cfg, &mut t, &Tensor::scalar(grads[k]), lr).unwrap();
                *fields[k] = t.item();
            }
        }
        p.project();
        p.validate().unwrap();
    }
    p
}

/// Trained three-region MSE, single-region baseline MSE, and the largest
/// deviation of the soft masks' sum from one.
pub fn long_tail_comparison() -> (f64, f64, f64) {
    let x = long_tailed(4096, 1);
    let baseline = ActQuantParams::single_region(4).unwrap();
    let init = ActQuantParams::from_calibration(&x, [2, 4, 2], 4, 0.01, 0.99).unwrap();
    let trained = train(&x, init, 200, 1e-2, true, true);
    let mut worst = 0.0f64;
    for p in [&baseline, &init, &trained] {
        let [a, b, c] = soft_membership(&x, p);
        for i in 0..x.len() {
            let s = a.data()[i] as f64 + b.data()[i] as f64 + c.data()[i] as f64;
            worst = worst.max((s - 1.0).abs());
        }
    }
    (mse(&x, &trained), mse(&x, &baseline), worst)
}

#[test]
fn trained_knees_beat_single_region() {
    let (trained, baseline, mask_err) = long_tail_comparison();
    assert!(trained < baseline, "trained {trained} vs baseline {baseline}");
    assert!(mask_err <= 1e-6, "mask sum off by {mask_err}");
}

#[test]
fn clip_training_reduces_error() {
    let x = long_tailed(4096, 2);
    let start = ActQuantParams::single_region(4).unwrap();
    let trained = train(&x, start, 200, 1e-2, true, false);
    assert!(mse(&x, &trained) < mse(&x, &start), "{} vs {}", mse(&x, &trained), mse(&x, &start));
}

/// Direct transcription of the per-region rule, independent of the module.
fn scalar_reference(x: &[f32], k1: f32, k2: f32, c_max: f32, c_min: f32, bits: [u8; 3]) -> Vec<f32> {
    let region = |v: f32| if v < k1 { 0 } else if v < k2 { 1 } else { 2 };
    let mut out = x.to_vec();
    for j in 0..3 {
        let members: Vec<f32> = x.iter().copied().filter(|&v| region(v) == j).collect();
        if members.is_empty() {
            continue;
        }
        let mx = members.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mn = members.iter().copied().fold(f32::INFINITY, f32::min);
        let levels = ((1u32 << bits[j]) - 1) as f32;
        let alpha = (c_max * mx - c_min * mn) / levels;
        if !(alpha > 1e-6 * (c_max * mx).abs().max((c_min * mn).abs())) {
            continue;
        }
        let round = |v: f32| v.signum() * (v.abs() + 0.5).floor();
        let mu = -round(c_min * mn / alpha);
        for (o, &v) in out.iter_mut().zip(x) {
            if region(v) == j {
                *o = ((round(v / alpha + mu)).clamp(0.0, levels) - mu) * alpha;
            }
        }
    }
    out
}

#[test]
fn forward_matches_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn(&[4096], 1.0, &mut rng);
    let mut p = ActQuantParams::new(-1.2, 0.9, [2, 4, 2], 4).unwrap();
    p.clip_max = 0.8;
    p.clip_min = 0.95;
    let (k1, k2) = p.knees();
    let ours = act_quantize_forward(&x, &p).unwrap();
    let reference = scalar_reference(x.data(), k1, k2, p.clip_max, p.clip_min, p.bits);
    let m = |q: &[f32]| {
        x.data().iter().zip(q).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / x.len() as f64
    };
    assert!((m(ours.data()) - m(&reference)).abs() < 1e-6);
    // The same rule applies to cache entries.
    let kv = lbq_core::aquant::quantize_kv(&x, &p).unwrap();
    assert_eq!(kv, ours);
}

#[test]
fn range_and_clipping_examples() {
    let single = ActQuantParams::single_region(4).unwrap();
    let t = |v: &[f32]| Tensor::new(&[v.len()], v.to_vec()).unwrap();
    let ramp = t(&(0..16).map(|i| i as f32).collect::<Vec<_>>());
    assert_eq!(act_quantize_forward(&ramp, &single).unwrap(), ramp);
    let r = dynamic_range(&t(&[0.0, 30.0]), &single).unwrap();
    assert_eq!(r[1], Region::Affine { alpha: 2.0, mu: 0.0, levels: 15.0 });
    let r = dynamic_range(&t(&[-8.0, 7.0]), &single).unwrap();
    assert_eq!(r[1], Region::Affine { alpha: 1.0, mu: 8.0, levels: 15.0 });
    let clipped = ActQuantParams { clip_max: 0.1, ..single };
    let q = act_quantize_forward(&t(&[0.0, 100.0]), &clipped).unwrap();
    assert!((q.data()[1] - 10.0).abs() < 1e-5);
}

#[test]
fn clip_gradient_matches_finite_differences() {
    let x = long_tailed(512, 4);
    let p = ActQuantParams {
        clip_max: 0.7,
        clip_min: 0.9,
        ..ActQuantParams::single_region(4).unwrap()
    };
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = p.place(&mut tape, true, false);
    let q = act_quantize_train(&mut tape, xv, &p, &vars).unwrap();
    let d = tape.sub(q, xv).unwrap();
    let sq = tape.mul(d, d).unwrap();
    let loss = tape.mean(sq).unwrap();
    tape.backward(loss).unwrap();
    let analytic = vars.grads(&tape).clip_max as f64;
    // The straight-through surrogate in f64: every rounding keeps the offset it
    // had at the evaluation point while the scale moves.
    let levels = 15.0f64;
    let mx = x.data().iter().copied().fold(f32::MIN, f32::max) as f64;
    let mn = x.data().iter().copied().fold(f32::MAX, f32::min) as f64;
    let lo = p.clip_min as f64 * mn;
    let parts = |c: f64| {
        let alpha = (c * mx - lo) / levels;
        (alpha, lo / alpha)
    };
    let (a0, ratio0) = parts(p.clip_max as f64);
    let mu_shift = ratio0.round() - ratio0;
    let surrogate = |c: f32| {
        let (alpha, ratio) = parts(c as f64);
        let mu = -(ratio + mu_shift);
        x.data()
            .iter()
            .map(|&v| {
                let v = v as f64;
                let s0 = v / a0 - ratio0.round();
                let s = v / alpha + mu;
                let r = s + (s0.round() - s0);
                let code = if (0.0..=levels).contains(&s0.round()) { r } else { s0.round().clamp(0.0, levels) };
                (v - (code - mu) * alpha).powi(2)
            })
            .sum::<f64>()
            / x.len() as f64
    };
    let h = 1e-3f32;
    let fd = (surrogate(p.clip_max + h) - surrogate(p.clip_max - h)) / (2.0 * h as f64);
    let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs());
    assert!(rel < 1e-2, "analytic {analytic} fd {fd}");
}

#[test]
fn on_grid_input_has_zero_gradients() {
    let x = Tensor::new(&[16], (0..16).map(|i| i as f32).collect()).unwrap();
    let p = ActQuantParams::single_region(4).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let vars = p.place(&mut tape, true, true);
    let q = act_quantize_train(&mut tape, xv, &p, &vars).unwrap();
    let d = tape.sub(q, xv).unwrap();
    let sq = tape.mul(d, d).unwrap();
    let loss = tape.mean(sq).unwrap();
    tape.backward(loss).unwrap();
    let g = vars.grads(&tape);
    assert_eq!([g.knee_lo, g.gap_raw, g.clip_max, g.clip_min], [0.0; 4]);
}

fn params() -> impl Strategy<Value = ActQuantParams> {
    (-2.0f32..1.0, 0.05f32..3.0, 0.2f32..1.5, 0.2f32..1.5, 0.01f32..0.5).prop_map(|(k1, gap, cmax, cmin, tau)| {
        ActQuantParams {
            clip_max: cmax,
            clip_min: cmin,
            tau_scale: tau,
            ..ActQuantParams::new(k1, k1 + gap, [2, 4, 2], 4).unwrap()
        }
    })
}

fn sample() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-6.0f32..6.0, 2..200).prop_map(|v| Tensor::new(&[v.len()], v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn train_forward_is_bit_identical(x in sample(), p in params()) {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = p.place(&mut tape, true, true);
        let q = act_quantize_train(&mut tape, xv, &p, &vars).unwrap();
        prop_assert_eq!(tape.value(q), &act_quantize_forward(&x, &p).unwrap());
    }

    #[test]
    fn codebook_is_bounded(x in sample(), p in params()) {
        // Pass-through regions forward their inputs and have no codebook.
        let regions = dynamic_range(&x, &p).unwrap();
        let q = act_quantize_forward(&x, &p).unwrap();
        let mut v: Vec<u32> = (0..x.len())
            .filter(|&i| matches!(regions[p.region_of(x.data()[i])], Region::Affine { .. }))
            .map(|i| q.data()[i].to_bits())
            .collect();
        v.sort_unstable();
        v.dedup();
        prop_assert!(v.len() <= 4 + 16 + 4);
    }

    #[test]
    fn monotone_within_region(x in sample(), p in params()) {
        let q = act_quantize_forward(&x, &p).unwrap();
        for i in 0..x.len() {
            for j in 0..x.len() {
                let (a, b) = (x.data()[i], x.data()[j]);
                if a <= b && p.region_of(a) == p.region_of(b) {
                    prop_assert!(q.data()[i] <= q.data()[j]);
                }
            }
        }
    }

    #[test]
    fn soft_masks_partition_unity(x in sample(), p in params()) {
        let [a, b, c] = soft_membership(&x, &p);
        let tau = p.tau(&x);
        let (k1, k2) = p.knees();
        for i in 0..x.len() {
            let s = a.data()[i] + b.data()[i] + c.data()[i];
            prop_assert!((s - 1.0).abs() <= 1e-6);
            // Strictly inside (0, 1) wherever f32 can still resolve the sigmoid tails.
            let v = x.data()[i];
            if (v - k1).abs() < 12.0 * tau && (v - k2).abs() < 12.0 * tau {
                for m in [&a, &b, &c] {
                    prop_assert!(m.data()[i] > 0.0 && m.data()[i] < 1.0);
                }
            }
        }
    }

    #[test]
    fn knees_stay_ordered_under_training(seed in 0u64..1000) {
        let x = long_tailed(300, seed);
        let p = ActQuantParams::from_calibration(&x, [2, 4, 2], 4, 0.01, 0.99).unwrap();
        let t = train(&x, p, 10, 0.5, true, true);
        let (k1, k2) = t.knees();
        prop_assert!(k1 < k2);
    }
}

