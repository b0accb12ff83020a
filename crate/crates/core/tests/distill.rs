use lbq_core::distill::{
    anneal_beta, attach_quantizers, distill_sweep, eval_l_rec, freeze_all, reconstruction_loss, train_layer, LayerTrace,
    QuantizerInit, Stage, StageConfig, TargetMode,
};
use lbq_core::model::{DecoderLayer, LinearKind, LinearSlot, Model, ModelConfig};
use lbq_core::optim::{peak_resident_layers, reset_peak_residency};
use lbq_core::ptq::{ptq_initialize_model, EmConfig, InitMethod};
use lbq_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 40,
        d_model: 32,
        n_heads: 2,
        n_layers: layers,
        d_ff: 48,
        max_seq_len: 16,
        ..ModelConfig::default()
    }
}

fn seqs(seed: u64, count: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| (0..16).map(|_| rng.gen_range(0..40)).collect()).collect()
}

/// Teacher and its EM-initialized student.
fn pair(layers: usize, seed: u64) -> (Model, Model) {
    let teacher = Model::new(tiny(layers), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let student = ptq_initialize_model(&teacher, &seqs(seed + 1, 2), 16, InitMethod::Em, &EmConfig::default(), 0).unwrap();
    (teacher, student)
}

fn quick(mut cfg: StageConfig) -> StageConfig {
    cfg.batch = 2;
    cfg.lr_scale = 20.0;
    cfg
}

/// Layer-0 inputs and same-input teacher targets.
fn layer_data(teacher: &Model, student: &Model, s: &[Vec<usize>]) -> (Vec<Tensor>, Vec<Tensor>) {
    let xs: Vec<Tensor> = s.iter().map(|ids| student.hidden_states_prefix(ids, 0).unwrap()).collect();
    let ts = xs.iter().map(|x| teacher.layer_output(0, x, None).unwrap()).collect();
    (xs, ts)
}

fn strip(traces: &[LayerTrace]) -> Vec<(usize, Vec<(f64, f64, f32, f64)>, f64, f64, Option<usize>)> {
    traces
        .iter()
        .map(|t| {
            let steps = t.steps.iter().map(|s| (s.l_rec, s.l_reg, s.beta, s.polarization)).collect();
            (t.layer, steps, t.initial_l_rec, t.final_l_rec, t.diverged_at)
        })
        .collect()
}

#[test]
fn reconstruction_gradient_is_twice_the_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let t = Tensor::randn(&[3, 5], 1.0, &mut rng);
    let s = Tensor::randn(&[3, 5], 1.0, &mut rng);
    let mut tape = Tape::new();
    let tv = tape.constant(t.clone());
    let sv = tape.leaf(s.clone());
    let l = reconstruction_loss(&mut tape, tv, sv).unwrap();
    tape.backward(l).unwrap();
    let g = tape.grad(sv).unwrap();
    let loss = |x: &[f64]| x.iter().zip(t.data()).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>();
    let base: Vec<f64> = s.data().iter().map(|&v| v as f64).collect();
    for i in 0..15 {
        let mut p = base.clone();
        let mut m = base.clone();
        p[i] += 1e-4;
        m[i] -= 1e-4;
        let fd = (loss(&p) - loss(&m)) / 2e-4;
        assert!((g.data()[i] as f64 - fd).abs() < 1e-4 * fd.abs().max(1.0));
        assert!((fd - 2.0 * (base[i] - t.data()[i] as f64)).abs() < 1e-6);
    }
}

fn two_level_teacher() -> Model {
    let mut teacher = Model::new(tiny(1), &mut ChaCha8Rng::seed_from_u64(71)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(72);
    for kind in LinearKind::ALL {
        let slot = teacher.layers[0].linear_mut(kind);
        let (n, m) = slot.shape();
        let data = (0..n * m).map(|_| if rng.gen_bool(0.5) { 0.125 } else { -0.0625 }).collect();
        *slot = LinearSlot::Full(Tensor::new(&[n, m], data).unwrap());
    }
    teacher
}

#[test]
fn exact_student_is_stationary_without_regularizer() {
    let teacher = two_level_teacher();
    let mut student = ptq_initialize_model(&teacher, &seqs(73, 2), 16, InitMethod::Em, &EmConfig::default(), 0).unwrap();
    let before = student.clone();
    let cfg = StageConfig {
        lambda: 0.0,
        ..quick(StageConfig::wat())
    };
    let traces = distill_sweep(&teacher, &mut student, &seqs(74, 4), &cfg, TargetMode::SameInput).unwrap();
    assert_eq!(traces[0].initial_l_rec, 0.0);
    assert!(traces[0].steps.iter().all(|s| s.l_rec == 0.0));
    assert_eq!(student, before);
}

#[test]
fn wat_reduces_error_and_follows_beta_schedule() {
    let (teacher, mut student) = pair(1, 75);
    let cfg = quick(StageConfig::wat());
    let traces = distill_sweep(&teacher, &mut student, &seqs(76, 8), &cfg, TargetMode::SameInput).unwrap();
    let t = &traces[0];
    assert!(t.final_l_rec < t.initial_l_rec, "{} → {}", t.initial_l_rec, t.final_l_rec);
    let total = t.steps.len();
    assert_eq!(total, cfg.epochs * 4);
    for s in &t.steps {
        assert_eq!(s.beta, anneal_beta(s.step, total - 1, cfg.beta_start, cfg.beta_end));
    }
}

fn snapshot(layer: &DecoderLayer) -> [Vec<Tensor>; 3] {
    let q: Vec<_> = layer.linears.iter().map(|s| s.quant().unwrap()).collect();
    [
        q.iter().flat_map(|q| [q.w_fp.clone(), q.g_fp.clone()]).collect(),
        q.iter().flat_map(|q| [q.alpha0.clone(), q.mu0.clone(), q.alpha1.clone(), q.mu1.clone()]).collect(),
        vec![layer.attn_norm.clone(), layer.mlp_norm.clone()],
    ]
}

fn act_state(layer: &DecoderLayer) -> Vec<(f32, f32, f32, f32)> {
    layer.act.iter().flatten().map(|p| (p.knee_lo, p.gap_raw, p.clip_max, p.clip_min)).collect()
}

fn all_differ(a: &[Tensor], b: &[Tensor]) -> bool {
    a.iter().zip(b).all(|(x, y)| x != y)
}

#[test]
fn stages_touch_only_their_parameters() {
    let (teacher, mut student) = pair(1, 77);
    let s = seqs(78, 4);

    let (xs, ts) = layer_data(&teacher, &student, &s);
    let before = snapshot(&student.layers[0]);
    train_layer(&student.config.clone(), &mut student.layers[0], 0, &xs, &ts, &quick(StageConfig::wat())).unwrap();
    let after = snapshot(&student.layers[0]);
    assert!(all_differ(&before[0], &after[0]), "bits untouched by weight training");
    assert!(all_differ(&before[1], &after[1]), "affine untouched by weight training");
    assert_eq!(before[2], after[2]);

    freeze_all(&mut student).unwrap();
    attach_quantizers(&mut student, &s[0], &QuantizerInit::default()).unwrap();
    let (xs, ts) = layer_data(&teacher, &student, &s);
    let before = snapshot(&student.layers[0]);
    let acts = act_state(&student.layers[0]);
    let t = train_layer(&student.config.clone(), &mut student.layers[0], 0, &xs, &ts, &quick(StageConfig::aar())).unwrap();
    let after = snapshot(&student.layers[0]);
    assert_eq!(before[0], after[0], "frozen bits changed");
    assert!(all_differ(&before[1], &after[1]));
    assert_eq!(before[2], after[2]);
    let moved = act_state(&student.layers[0]);
    for (a, b) in acts.iter().zip(&moved) {
        assert!(a.0 != b.0 && a.1 != b.1 && a.2 != b.2 && a.3 != b.3, "{a:?} → {b:?}");
    }
    assert!(t.final_l_rec < t.initial_l_rec);
    assert!(t.steps.iter().all(|s| s.l_reg == 0.0));
}

#[test]
fn aar_refines_every_layer() {
    let (teacher, mut student) = pair(2, 79);
    let s = seqs(80, 16);
    distill_sweep(&teacher, &mut student, &s, &quick(StageConfig::wat()), TargetMode::SameInput).unwrap();
    freeze_all(&mut student).unwrap();
    attach_quantizers(&mut student, &s[0], &QuantizerInit::default()).unwrap();
    let traces = distill_sweep(&teacher, &mut student, &s, &quick(StageConfig::aar()), TargetMode::SameInput).unwrap();
    for t in &traces {
        assert!(t.final_l_rec < t.initial_l_rec, "layer {}: {} → {}", t.layer, t.initial_l_rec, t.final_l_rec);
    }
}

#[test]
fn aar_requires_frozen_bits_and_quantizers() {
    let (teacher, mut student) = pair(1, 81);
    let s = seqs(82, 2);
    let aar = quick(StageConfig::aar());
    assert!(distill_sweep(&teacher, &mut student, &s, &aar, TargetMode::SameInput).is_err());
    freeze_all(&mut student).unwrap();
    assert!(distill_sweep(&teacher, &mut student, &s, &aar, TargetMode::SameInput).is_err());
    assert!(distill_sweep(&teacher, &mut student, &s, &quick(StageConfig::wat()), TargetMode::SameInput).is_err());
}

#[test]
fn joint_without_quantizers_is_weight_training() {
    let (teacher, student) = pair(2, 83);
    let s = seqs(84, 4);
    let (mut a, mut b) = (student.clone(), student);
    let ta = distill_sweep(&teacher, &mut a, &s, &quick(StageConfig::wat()), TargetMode::SameInput).unwrap();
    let tb = distill_sweep(&teacher, &mut b, &s, &quick(StageConfig::joint()), TargetMode::SameInput).unwrap();
    assert_eq!(strip(&ta), strip(&tb));
    assert!(tb.iter().all(|t| t.stage == Stage::Joint));
    assert_eq!(a, b);
}

#[test]
fn runaway_joint_run_is_flagged() {
    let (teacher, mut student) = pair(2, 85);
    let s = seqs(86, 8);
    attach_quantizers(&mut student, &s[0], &QuantizerInit::default()).unwrap();
    let cfg = StageConfig {
        lr_scale: 1e6,
        ..quick(StageConfig::joint())
    };
    let traces = distill_sweep(&teacher, &mut student, &s, &cfg, TargetMode::SameInput).unwrap();
    let last = traces.last().unwrap();
    assert!(last.diverged_at.is_some());
    assert!(traces.iter().flat_map(|t| &t.steps).all(|s| s.l_rec.is_finite()));
    // The same settings abort weight training outright.
    let (teacher, mut student) = pair(2, 85);
    let cfg = StageConfig {
        lr_scale: 1e6,
        ..quick(StageConfig::wat())
    };
    assert!(distill_sweep(&teacher, &mut student, &s, &cfg, TargetMode::SameInput).is_err());
}

#[test]
fn sweeps_are_deterministic_and_one_layer_at_a_time() {
    let (teacher, student) = pair(3, 87);
    let s = seqs(88, 4);
    let (mut a, mut b) = (student.clone(), student);
    reset_peak_residency();
    let ta = distill_sweep(&teacher, &mut a, &s, &quick(StageConfig::wat()), TargetMode::Trajectory).unwrap();
    assert_eq!(peak_resident_layers(), 1);
    let tb = distill_sweep(&teacher, &mut b, &s, &quick(StageConfig::wat()), TargetMode::Trajectory).unwrap();
    assert_eq!(strip(&ta), strip(&tb));
    assert_eq!(a, b);
}

#[test]
fn quantized_prefix_changes_deeper_inputs() {
    let (teacher, mut student) = pair(2, 89);
    let s = seqs(90, 4);
    distill_sweep(&teacher, &mut student, &s, &quick(StageConfig::wat()), TargetMode::SameInput).unwrap();
    let ids = &s[0];
    assert_eq!(student.hidden_states_prefix(ids, 0).unwrap(), teacher.hidden_states_prefix(ids, 0).unwrap());
    assert_ne!(student.hidden_states_prefix(ids, 1).unwrap(), teacher.hidden_states_prefix(ids, 1).unwrap());
}

#[test]
fn single_layer_model_distills() {
    let (teacher, mut student) = pair(1, 91);
    let s = seqs(92, 4);
    let traces = distill_sweep(&teacher, &mut student, &s, &quick(StageConfig::wat()), TargetMode::Trajectory).unwrap();
    assert_eq!(traces.len(), 1);
    let (xs, ts) = layer_data(&teacher, &student, &s);
    let direct = eval_l_rec(&student.config, &student.layers[0], &xs, &ts).unwrap();
    assert_eq!(direct, traces[0].final_l_rec);
}

#[test]
fn stronger_regularizer_polarizes_more() {
    let (teacher, student) = pair(1, 90);
    let data = seqs(91, 8);
    let outcomes: Vec<(f64, f64, f64)> = [0.0, 0.01, 0.05, 0.2]
        .into_iter()
        .map(|lambda| {
            let mut s = student.clone();
            let cfg = StageConfig {
                lambda,
                relax_margin: 0.05,
                ..quick(StageConfig::wat())
            };
            let t = distill_sweep(&teacher, &mut s, &data, &cfg, TargetMode::SameInput).unwrap().remove(0);
            (t.final_l_rec, t.final_l_reg, t.steps.last().unwrap().polarization)
        })
        .collect();
    for o in &outcomes {
        assert!(o.0.is_finite() && o.1.is_finite(), "{outcomes:?}");
    }
    for w in outcomes.windows(2) {
        assert!(w[1].1 <= w[0].1, "{outcomes:?}");
    }
}
