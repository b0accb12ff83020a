//! Layer-wise distillation of a quantized student against a full-precision teacher.
//!
//! Weight-aware training (WAT) learns the relaxed bits and affine parameters
//! with activations in full precision. Activation-aware refinement (AAR)
//! freezes the bits, attaches activation quantizers and learns only the affine
//! and quantizer parameters. Both sweep the layers shallow to deep.

use std::time::Instant;

use crate::aquant::ActQuantParams;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{layer_forward, ActSite, DecoderLayer, LayerTrain, LayerVars, Model, ModelConfig, SiteRecord, SlotVars};
use crate::optim::{AdamConfig, AdamState, ResidencyGuard};
use crate::tensor::Tensor;
use crate::wquant::{polarization_fraction, reg_loss, QuantTrainables, BETA_MIN};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Weight-aware training.
    Wat,
    /// Activation-aware refinement.
    Aar,
    /// Everything trained at once, with activation quantizers live.
    Joint,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Wat => "wat",
            Stage::Aar => "aar",
            Stage::Joint => "joint",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    /// Sequences per batch.
    pub batch: usize,
    pub lr_w: f32,
    pub lr_g: f32,
    pub lr_affine: f32,
    pub lr_clip: f32,
    pub lr_knee: f32,
    /// Multiplies every learning rate.
    pub lr_scale: f32,
    pub lambda: f32,
    pub beta_start: f32,
    pub beta_end: f32,
    /// Distance from 0/1 given to exact bitmap entries before WAT.
    pub relax_margin: f32,
    pub divergence_factor: f64,
    pub adam: AdamConfig,
}

impl StageConfig {
    pub fn wat() -> Self {
        Self {
            stage: Stage::Wat,
            epochs: 2,
            batch: 4,
            lr_w: 2e-5,
            lr_g: 1e-4,
            lr_affine: 1e-4,
            lr_clip: 1e-4,
            lr_knee: 5e-4,
            lr_scale: 1.0,
            lambda: 0.05,
            beta_start: 1.0,
            beta_end: BETA_MIN,
            relax_margin: 0.0,
            divergence_factor: 1e3,
            adam: AdamConfig::default(),
        }
    }

    pub fn aar() -> Self {
        Self {
            stage: Stage::Aar,
            epochs: 1,
            lr_affine: 1e-5,
            ..Self::wat()
        }
    }

    pub fn joint() -> Self {
        Self {
            stage: Stage::Joint,
            ..Self::wat()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lrs = [
            self.lr_w,
            self.lr_g,
            self.lr_affine,
            self.lr_clip,
            self.lr_knee,
            self.lr_scale,
        ];
        if lrs.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::contract("learning rates must be positive"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::contract("lambda must be non-negative"));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::contract("epochs and batch must be positive"));
        }
        if !(BETA_MIN..=1.0).contains(&self.beta_end) || !(BETA_MIN..=1.0).contains(&self.beta_start) {
            return Err(Error::contract("beta bounds must lie in [0.01, 1]"));
        }
        if !(0.0..0.5).contains(&self.relax_margin) {
            return Err(Error::contract("relax margin must be in [0, 0.5)"));
        }
        Ok(())
    }

    fn trains(&self) -> LayerTrain {
        match self.stage {
            Stage::Wat => LayerTrain {
                quant: QuantTrainables {
                    bits: true,
                    affine: true,
                },
                ..LayerTrain::FROZEN
            },
            Stage::Aar => LayerTrain {
                quant: QuantTrainables {
                    bits: false,
                    affine: true,
                },
                act_clips: true,
                act_knees: true,
                ..LayerTrain::FROZEN
            },
            Stage::Joint => LayerTrain {
                quant: QuantTrainables {
                    bits: true,
                    affine: true,
                },
                act_clips: true,
                act_knees: true,
                ..LayerTrain::FROZEN
            },
        }
    }
}

/// Linear β schedule from `start` at step 0 to `end` at `total`.
pub fn anneal_beta(step: usize, total: usize, start: f32, end: f32) -> f32 {
    if total == 0 {
        return end;
    }
    let t = step.min(total) as f32 / total as f32;
    start * (1.0 - t) + end * t
}

/// `Σ (O_T − O_S)²`.
pub fn reconstruction_loss(tape: &mut Tape, teacher: Var, student: Var) -> Result<Var> {
    if tape.value(teacher).shape() != tape.value(student).shape() {
        return Err(Error::shape("reconstruction_loss", "teacher and student shapes differ"));
    }
    let d = tape.sub(student, teacher)?;
    let sq = tape.mul(d, d)?;
    tape.sum(sq)
}

/// `L_rec + λ·L_reg`.
pub fn total_loss(tape: &mut Tape, l_rec: Var, l_reg: Option<Var>, lambda: f32) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::contract("lambda must be non-negative"));
    }
    match l_reg {
        Some(r) if lambda > 0.0 => {
            let w = tape.scale(r, lambda)?;
            tape.add(l_rec, w)
        }
        _ => Ok(l_rec),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub layer: usize,
    pub step: usize,
    pub l_rec: f64,
    pub l_reg: f64,
    pub beta: f32,
    pub polarization: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub layer: usize,
    pub stage: Stage,
    pub steps: Vec<StepRecord>,
    /// Mean per-sequence reconstruction error before the first step.
    pub initial_l_rec: f64,
    /// Same measure after the last step.
    pub final_l_rec: f64,
    pub initial_l_reg: f64,
    pub final_l_reg: f64,
    /// Step at which the loss tripped the divergence threshold.
    pub diverged_at: Option<usize>,
}

/// Mean per-sequence `Σ (O_T − O_S)²` of one layer under its forward pass.
pub fn eval_l_rec(cfg: &ModelConfig, layer: &DecoderLayer, inputs: &[Tensor], targets: &[Tensor]) -> Result<f64> {
    if inputs.len() != targets.len() || inputs.is_empty() {
        return Err(Error::shape("eval_l_rec", "need matching, non-empty inputs and targets"));
    }
    let mut total = 0.0f64;
    for (x, t) in inputs.iter().zip(targets) {
        let mut tape = Tape::new();
        let lv = LayerVars::place(&mut tape, layer, LayerTrain::FROZEN)?;
        let xv = tape.constant(x.clone());
        let y = layer_forward(&mut tape, cfg, layer, &lv, xv, None, None)?;
        let y = tape.value(y);
        if y.shape() != t.shape() {
            return Err(Error::shape("eval_l_rec", "output and target shapes differ"));
        }
        total += y
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>();
    }
    Ok(total / inputs.len() as f64)
}

fn layer_reg_value(layer: &DecoderLayer, beta: f32) -> f64 {
    layer
        .linears
        .iter()
        .filter_map(|s| s.quant())
        .map(|q| q.reg_loss_value(beta))
        .sum()
}

/// Share of near-binary bitmap entries over all relaxed slots of a layer.
pub fn layer_polarization(layer: &DecoderLayer, threshold: f32) -> f64 {
    let (mut hits, mut total) = (0.0f64, 0usize);
    for q in layer.linears.iter().filter_map(|s| s.quant()) {
        hits += polarization_fraction(&q.g_fp, threshold) * q.g_fp.len() as f64;
        total += q.g_fp.len();
    }
    if total == 0 {
        1.0
    } else {
        hits / total as f64
    }
}

pub const POLARIZATION_THRESHOLD: f32 = 0.99;

/// Adam state for every trainable tensor of one layer, in placement order.
struct LayerOptimizer {
    quant: Vec<[AdamState; 6]>,
    act: Vec<[AdamState; 4]>,
    _resident: ResidencyGuard,
}

impl LayerOptimizer {
    fn new(layer: &DecoderLayer) -> Self {
        let quant = layer
            .linears
            .iter()
            .map(|s| {
                let (n, m) = s.shape();
                let c = s.quant().map_or(0, |q| q.n_chunks());
                [
                    AdamState::new(n * m),
                    AdamState::new(n * m),
                    AdamState::new(n * c),
                    AdamState::new(n * c),
                    AdamState::new(n * c),
                    AdamState::new(n * c),
                ]
            })
            .collect();
        let act = (0..6).map(|_| std::array::from_fn(|_| AdamState::new(1))).collect();
        Self {
            quant,
            act,
            _resident: ResidencyGuard::acquire(),
        }
    }
}

fn scalar_step(st: &mut AdamState, adam: &AdamConfig, value: &mut f32, grad: f32, lr: f32) -> Result<()> {
    let mut p = Tensor::scalar(*value);
    st.step(adam, &mut p, &Tensor::scalar(grad), lr)?;
    *value = p.item();
    Ok(())
}

fn apply_updates(
    layer: &mut DecoderLayer,
    vars: &LayerVars,
    tape: &Tape,
    opt: &mut LayerOptimizer,
    cfg: &StageConfig,
) -> Result<()> {
    let s = cfg.lr_scale;
    let train = cfg.trains();
    for (i, slot) in layer.linears.iter_mut().enumerate() {
        let (Some(q), SlotVars::Quant(qv)) = (slot.quant_mut(), &vars.linears[i]) else {
            continue;
        };
        if q.is_frozen() && (tape.grad(qv.w_fp).is_some() || tape.grad(qv.g_fp).is_some()) {
            return Err(Error::contract("gradient reached frozen weight bits"));
        }
        let st = &mut opt.quant[i];
        if train.quant.bits {
            if let Some(g) = tape.grad(qv.w_fp) {
                st[0].step(&cfg.adam, &mut q.w_fp, &g, cfg.lr_w * s)?;
            }
            if let Some(g) = tape.grad(qv.g_fp) {
                st[1].step(&cfg.adam, &mut q.g_fp, &g, cfg.lr_g * s)?;
            }
        }
        if train.quant.affine {
            let pairs = [
                (qv.alpha0, &mut q.alpha0),
                (qv.mu0, &mut q.mu0),
                (qv.alpha1, &mut q.alpha1),
                (qv.mu1, &mut q.mu1),
            ];
            for (k, (v, t)) in pairs.into_iter().enumerate() {
                if let Some(g) = tape.grad(v) {
                    st[2 + k].step(&cfg.adam, t, &g, cfg.lr_affine * s)?;
                }
            }
        }
        q.project();
    }
    for (i, site) in layer.act.iter_mut().enumerate() {
        let (Some(p), Some(av)) = (site.as_mut(), vars.act[i].as_ref()) else {
            continue;
        };
        let g = av.grads(tape);
        let st = &mut opt.act[i];
        if train.act_knees {
            scalar_step(&mut st[0], &cfg.adam, &mut p.knee_lo, g.knee_lo, cfg.lr_knee * s)?;
            scalar_step(&mut st[1], &cfg.adam, &mut p.gap_raw, g.gap_raw, cfg.lr_knee * s)?;
        }
        if train.act_clips {
            scalar_step(&mut st[2], &cfg.adam, &mut p.clip_max, g.clip_max, cfg.lr_clip * s)?;
            scalar_step(&mut st[3], &cfg.adam, &mut p.clip_min, g.clip_min, cfg.lr_clip * s)?;
        }
        p.project();
    }
    Ok(())
}

fn check_stage_preconditions(layer: &DecoderLayer, stage: Stage) -> Result<()> {
    let quants: Vec<_> = layer.linears.iter().filter_map(|s| s.quant()).collect();
    if quants.len() != layer.linears.len() {
        return Err(Error::contract("distillation needs every slot quantized-relaxed"));
    }
    match stage {
        Stage::Wat | Stage::Joint if quants.iter().any(|q| q.is_frozen()) => {
            Err(Error::contract("weight training on a frozen layer"))
        }
        Stage::Aar if quants.iter().any(|q| !q.is_frozen()) => {
            Err(Error::contract("activation refinement needs frozen weights"))
        }
        Stage::Aar if !layer.has_act_quant() => {
            Err(Error::contract("activation quantizers are not attached"))
        }
        _ => Ok(()),
    }
}

/// Trains one layer on `(inputs, targets)` pairs of shape `[seq × d]`.
pub fn train_layer(
    cfg_model: &ModelConfig,
    layer: &mut DecoderLayer,
    index: usize,
    inputs: &[Tensor],
    targets: &[Tensor],
    cfg: &StageConfig,
) -> Result<LayerTrace> {
    cfg.validate()?;
    check_stage_preconditions(layer, cfg.stage)?;
    if inputs.len() != targets.len() || inputs.is_empty() {
        return Err(Error::shape("train_layer", "need matching, non-empty inputs and targets"));
    }
    if cfg.stage != Stage::Aar && cfg.relax_margin > 0.0 {
        for q in layer.linears.iter_mut().filter_map(|s| s.quant_mut()) {
            q.relax_bitmap(cfg.relax_margin)?;
        }
    }
    let with_reg = cfg.stage != Stage::Aar;
    let initial_l_rec = eval_l_rec(cfg_model, layer, inputs, targets)?;
    let initial_l_reg = if with_reg {
        layer_reg_value(layer, cfg.beta_start)
    } else {
        0.0
    };
    let per_epoch = inputs.len().div_ceil(cfg.batch);
    let total = cfg.epochs * per_epoch;
    let mut opt = LayerOptimizer::new(layer);
    let mut steps = Vec::with_capacity(total);
    let mut first_loss: Option<f64> = None;
    let mut diverged_at = None;
    let train = cfg.trains();
    for step in 0..total {
        let started = Instant::now();
        let b = step % per_epoch;
        let lo = b * cfg.batch;
        let hi = (lo + cfg.batch).min(inputs.len());
        let beta = anneal_beta(step, total.saturating_sub(1), cfg.beta_start, cfg.beta_end);
        let mut tape = Tape::new();
        let outcome = (|| -> Result<(f64, f64, LayerVars)> {
            let vars = LayerVars::place(&mut tape, layer, train)?;
            let mut rec: Option<Var> = None;
            for (x, t) in inputs[lo..hi].iter().zip(&targets[lo..hi]) {
                let xv = tape.constant(x.clone());
                let tv = tape.constant(t.clone());
                let y = layer_forward(&mut tape, cfg_model, layer, &vars, xv, None, None)?;
                let l = reconstruction_loss(&mut tape, tv, y)?;
                rec = Some(match rec {
                    None => l,
                    Some(r) => tape.add(r, l)?,
                });
            }
            let rec = rec.expect("non-empty batch");
            let reg = if with_reg {
                let mut acc: Option<Var> = None;
                for sv in &vars.linears {
                    if let SlotVars::Quant(qv) = sv {
                        let r = reg_loss(&mut tape, qv.g_fp, beta)?;
                        acc = Some(match acc {
                            None => r,
                            Some(a) => tape.add(a, r)?,
                        });
                    }
                }
                acc
            } else {
                None
            };
            let loss = total_loss(&mut tape, rec, reg, cfg.lambda)?;
            tape.backward(loss)?;
            let l_rec = tape.value(rec).item() as f64 / (hi - lo) as f64;
            let l_reg = reg.map_or(0.0, |r| tape.value(r).item() as f64);
            Ok((l_rec, l_reg, vars))
        })();
        let (l_rec, l_reg, vars) = match outcome {
            Ok(v) => v,
            Err(Error::Numeric { detail, .. }) => {
                if cfg.stage == Stage::Joint {
                    diverged_at = Some(step);
                    break;
                }
                return Err(Error::Divergence {
                    layer: index,
                    step,
                    detail,
                });
            }
            Err(e) => return Err(e),
        };
        let loss = l_rec + cfg.lambda as f64 * l_reg;
        let reference = *first_loss.get_or_insert(loss);
        if !loss.is_finite() || (reference > 0.0 && loss > cfg.divergence_factor * reference) {
            if cfg.stage == Stage::Joint {
                diverged_at = Some(step);
                break;
            }
            return Err(Error::Divergence {
                layer: index,
                step,
                detail: format!("loss {loss} against initial {reference}"),
            });
        }
        if let Err(e) = apply_updates(layer, &vars, &tape, &mut opt, cfg) {
            match e {
                Error::Numeric { .. } if cfg.stage == Stage::Joint => {
                    diverged_at = Some(step);
                    break;
                }
                Error::Numeric { detail, .. } => {
                    return Err(Error::Divergence {
                        layer: index,
                        step,
                        detail,
                    })
                }
                e => return Err(e),
            }
        }
        steps.push(StepRecord {
            layer: index,
            step,
            l_rec,
            l_reg,
            beta,
            polarization: layer_polarization(layer, POLARIZATION_THRESHOLD),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    let final_l_rec = match eval_l_rec(cfg_model, layer, inputs, targets) {
        Ok(v) => v,
        Err(Error::Numeric { .. }) if diverged_at.is_some() => f64::INFINITY,
        Err(e) => return Err(e),
    };
    let final_l_reg = if with_reg {
        layer_reg_value(layer, cfg.beta_end)
    } else {
        0.0
    };
    Ok(LayerTrace {
        layer: index,
        stage: cfg.stage,
        steps,
        initial_l_rec,
        final_l_rec,
        initial_l_reg,
        final_l_reg,
        diverged_at,
    })
}

/// Teacher hidden states per sequence: embeddings then each layer's output.
pub fn teacher_states(teacher: &Model, seqs: &[Vec<usize>]) -> Result<Vec<Vec<Tensor>>> {
    seqs.iter().map(|s| teacher.hidden_states(s)).collect()
}

fn targets_for(states: &[Vec<Tensor>], layer: usize) -> Vec<Tensor> {
    states.iter().map(|s| s[layer + 1].clone()).collect()
}

/// Student inputs to layer 0 (the embeddings, kept in full precision).
fn embeddings(student: &Model, seqs: &[Vec<usize>]) -> Result<Vec<Tensor>> {
    seqs.iter()
        .map(|s| Ok(student.hidden_states_prefix(s, 0)?))
        .collect()
}

impl Model {
    /// Input to layer `upto`, running the current layers `0..upto` in their forward mode.
    pub fn hidden_states_prefix(&self, ids: &[usize], upto: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.place(&mut tape, &[], false)?;
        let mut x = self.embed_tokens(&mut tape, &vars, ids, 0)?;
        for (layer, lv) in self.layers.iter().zip(&vars.layers).take(upto) {
            x = layer_forward(&mut tape, &self.config, layer, lv, x, None, None)?;
        }
        Ok(tape.value(x).clone())
    }
}

/// Where each layer's reconstruction targets come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetMode {
    /// The teacher's own hidden states, so a layer also learns to undo
    /// error accumulated upstream.
    Trajectory,
    /// The teacher layer applied to the student's input at that layer.
    SameInput,
}

/// Progressive shallow-to-deep sweep of one stage over every layer.
pub fn distill_sweep(
    teacher: &Model,
    student: &mut Model,
    seqs: &[Vec<usize>],
    cfg: &StageConfig,
    mode: TargetMode,
) -> Result<Vec<LayerTrace>> {
    if teacher.layers.len() != student.layers.len() {
        return Err(Error::shape("distill", "teacher and student depths differ"));
    }
    let states = match mode {
        TargetMode::Trajectory => Some(teacher_states(teacher, seqs)?),
        TargetMode::SameInput => None,
    };
    let mut inputs = embeddings(student, seqs)?;
    let mut traces = Vec::with_capacity(student.layers.len());
    for l in 0..student.layers.len() {
        let targets = match &states {
            Some(st) => targets_for(st, l),
            None => inputs
                .iter()
                .map(|x| teacher.layer_output(l, x, None))
                .collect::<Result<_>>()?,
        };
        let trace = train_layer(&student.config, &mut student.layers[l], l, &inputs, &targets, cfg)?;
        let diverged = trace.diverged_at.is_some();
        traces.push(trace);
        if diverged {
            break;
        }
        inputs = inputs
            .iter()
            .map(|x| student.layer_output(l, x, None))
            .collect::<Result<_>>()?;
    }
    Ok(traces)
}

/// Freezes every relaxed slot to its hard bits.
pub fn freeze_all(student: &mut Model) -> Result<()> {
    for layer in &mut student.layers {
        for q in layer.linears.iter_mut().filter_map(|s| s.quant_mut()) {
            if !q.is_frozen() {
                q.freeze()?;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerInit {
    pub bits: [u8; 3],
    pub total_bits: u8,
    pub lo_pct: f32,
    pub hi_pct: f32,
    pub tau_scale: f32,
    pub kv: bool,
    /// One region at `total_bits` instead of knee regions.
    pub single_region: bool,
}

impl Default for QuantizerInit {
    fn default() -> Self {
        Self {
            bits: [2, 4, 2],
            total_bits: 4,
            lo_pct: 0.01,
            hi_pct: 0.99,
            tau_scale: 0.05,
            kv: true,
            single_region: false,
        }
    }
}

/// Attaches activation quantizers to every layer, with knees from the values
/// seen at each site on `calib` (layers below already quantized).
pub fn attach_quantizers(student: &mut Model, calib: &[usize], init: &QuantizerInit) -> Result<()> {
    let mut x = student.hidden_states_prefix(calib, 0)?;
    for l in 0..student.layers.len() {
        let mut rec = SiteRecord::default();
        student.layer_output(l, &x, Some(&mut rec))?;
        for site in ActSite::ALL {
            if site.is_kv() && !init.kv {
                student.layers[l].act[site as usize] = None;
                continue;
            }
            let sample = rec
                .get(site)
                .ok_or_else(|| Error::contract(format!("site {} not recorded", site.name())))?;
            let mut p = if init.single_region {
                ActQuantParams::single_region(init.total_bits)?
            } else {
                ActQuantParams::from_calibration(sample, init.bits, init.total_bits, init.lo_pct, init.hi_pct)?
            };
            p.tau_scale = init.tau_scale;
            p.validate()?;
            student.layers[l].act[site as usize] = Some(p);
        }
        x = student.layer_output(l, &x, None)?;
    }
    Ok(())
}

/// Removes every activation quantizer.
pub fn detach_quantizers(student: &mut Model) {
    for layer in &mut student.layers {
        layer.act = Default::default();
    }
}

/// Mean of the per-layer final reconstruction errors.
pub fn mean_final_l_rec(traces: &[LayerTrace]) -> f64 {
    if traces.is_empty() {
        return f64::NAN;
    }
    traces.iter().map(|t| t.final_l_rec).sum::<f64>() / traces.len() as f64
}
