use lbq_core::wquant::{reg_loss_value, QuantLinear, QuantTrainables};
use lbq_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn layer(rng: &mut ChaCha8Rng, n: usize, m: usize, gs: usize) -> QuantLinear {
    let c = m.div_ceil(gs);
    QuantLinear::new(
        Tensor::uniform(&[n, m], 0.0, 1.0, rng),
        Tensor::uniform(&[n, m], 0.0, 1.0, rng),
        Tensor::uniform(&[n, c], 0.1, 2.0, rng),
        Tensor::uniform(&[n, c], -1.0, 1.0, rng),
        Tensor::uniform(&[n, c], 0.1, 2.0, rng),
        Tensor::uniform(&[n, c], -1.0, 1.0, rng),
        gs,
        false,
    )
    .unwrap()
}

/// `Σ c ⊙ dequantize` in f64 from the hard bits and the given affine parameters.
fn weighted_sum(q: &QuantLinear, par: [&[f64]; 4], c: &[f64]) -> f64 {
    let (w, g) = q.hard_bits();
    let (m, gs, chunks) = (q.cols(), q.group_size(), q.n_chunks());
    (0..w.len())
        .map(|i| {
            let k = (i / m) * chunks + (i % m) / gs;
            let b = w.data()[i] as f64;
            let v = if g.data()[i] == 1.0 {
                par[0][k] * b + par[1][k]
            } else {
                par[2][k] * b + par[3][k]
            };
            c[i] * v
        })
        .sum()
}

#[test]
fn affine_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    for _ in 0..20 {
        let q = layer(&mut rng, 4, 10, 4);
        let c: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let vars = q.place(&mut tape, QuantTrainables { bits: false, affine: true }).unwrap();
        let w = vars.dequantize(&mut tape).unwrap();
        let cw = tape.constant(Tensor::new(&[4, 10], c.iter().map(|&v| v as f32).collect()).unwrap());
        let prod = tape.mul(w, cw).unwrap();
        let s = tape.sum(prod).unwrap();
        tape.backward(s).unwrap();
        let params = [&q.alpha0, &q.mu0, &q.alpha1, &q.mu1];
        let grads = [vars.alpha0, vars.mu0, vars.alpha1, vars.mu1].map(|v| tape.grad(v).unwrap());
        let base: Vec<Vec<f64>> = params.iter().map(|p| p.data().iter().map(|&v| v as f64).collect()).collect();
        for which in 0..4 {
            for k in 0..base[which].len() {
                let h = 1e-4;
                let eval = |d: f64| {
                    let mut b = base.clone();
                    b[which][k] += d;
                    weighted_sum(&q, [&b[0], &b[1], &b[2], &b[3]], &c)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = grads[which].data()[k] as f64;
                let rel = (an - fd).abs() / fd.abs().max(1e-3);
                assert!(rel < 1e-4, "param {which} entry {k}: {an} vs {fd}");
            }
        }
    }
}

#[test]
fn bit_gradients_equal_pass_through_graph() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let q = layer(&mut rng, 3, 8, 4);
    let c = Tensor::randn(&[3, 8], 1.0, &mut rng);
    let mut tape = Tape::new();
    let vars = q.place(&mut tape, QuantTrainables { bits: true, affine: true }).unwrap();
    let w = vars.dequantize(&mut tape).unwrap();
    let cw = tape.constant(c.clone());
    let prod = tape.mul(w, cw).unwrap();
    let s = tape.sum(prod).unwrap();
    tape.backward(s).unwrap();
    let (gw, gg) = (tape.grad(vars.w_fp).unwrap(), tape.grad(vars.g_fp).unwrap());

    // Hand-built: hard bits enter as `hard + (x − stop(x))`, everything else dense.
    let (wb, gb) = q.hard_bits();
    let mut t2 = Tape::new();
    let pass = |t: &mut Tape, hard: &Tensor, soft: &Tensor| {
        let x = t.leaf(soft.clone());
        let stopped = t.stop_gradient(x);
        let delta = t.sub(x, stopped).unwrap();
        let h = t.constant(hard.clone());
        (x, t.add(h, delta).unwrap())
    };
    let (wx, wbits) = pass(&mut t2, &wb, &q.w_fp);
    let (gx, gbits) = pass(&mut t2, &gb, &q.g_fp);
    let expand = |t: &mut Tape, p: &Tensor| {
        let data = (0..24).map(|i| p.data()[(i / 8) * 2 + (i % 8) / 4]).collect();
        t.constant(Tensor::new(&[3, 8], data).unwrap())
    };
    let (a0, m0, a1, m1) = (
        expand(&mut t2, &q.alpha0),
        expand(&mut t2, &q.mu0),
        expand(&mut t2, &q.alpha1),
        expand(&mut t2, &q.mu1),
    );
    let s0 = t2.mul(a0, wbits).unwrap();
    let l0 = t2.add(s0, m0).unwrap();
    let s1 = t2.mul(a1, wbits).unwrap();
    let l1 = t2.add(s1, m1).unwrap();
    let diff = t2.sub(l0, l1).unwrap();
    let picked = t2.mul(gbits, diff).unwrap();
    let w2 = t2.add(picked, l1).unwrap();
    let cw2 = t2.constant(c);
    let prod2 = t2.mul(w2, cw2).unwrap();
    let s2 = t2.sum(prod2).unwrap();
    t2.backward(s2).unwrap();
    let close = |a: &Tensor, b: &Tensor| a.max_abs_diff(b) <= 1e-6;
    assert!(close(&gw, &t2.grad(wx).unwrap()));
    assert!(close(&gg, &t2.grad(gx).unwrap()));
    assert_eq!(tape.value(w), t2.value(w2));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn smaller_beta_penalizes_less(g in 0.0f32..=1.0, b1 in 0.01f32..1.0, b2 in 0.01f32..1.0) {
        // |2g − 1| < 1, so lowering β lifts |2g − 1|^β toward one.
        let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
        let t = Tensor::scalar(g);
        let (a, b) = (reg_loss_value(&t, lo), reg_loss_value(&t, hi));
        prop_assert!(a <= b);
        let interior = [0.0f32, 0.5, 1.0].iter().all(|&k| (g - k).abs() > 0.01);
        if interior && hi - lo > 0.05 {
            prop_assert!(a < b);
        }
    }

    #[test]
    fn reg_loss_vanishes_only_on_binary(v in prop::collection::vec(prop_oneof![Just(0.0f32), Just(1.0f32), 0.0f32..=1.0], 1..30), beta in 0.01f32..=1.0) {
        let binary = v.iter().all(|&x| x == 0.0 || x == 1.0);
        let l = reg_loss_value(&Tensor::new(&[v.len()], v).unwrap(), beta);
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, binary);
    }
}
