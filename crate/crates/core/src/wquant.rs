//! The W(1+1) weight format: a binary weight plane, a binary group bitmap,
//! and two affine pairs per row chunk.
//!
//! Each element dequantizes as `G·(α₀·W_b + μ₀) + (1−G)·(α₁·W_b + μ₁)`, so
//! a `(row, chunk)` cell can take at most four values. During training the
//! bit planes are relaxed to real surrogates `W_FP`, `G_FP` that are
//! thresholded in the forward pass and passed straight through backward.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest annealing exponent accepted by [`reg_loss`].
pub const BETA_MIN: f32 = 0.01;

/// Min-max affine pair for one chunk: levels `{μ, α+μ} = {min, max}`.
pub fn init_affine_minmax(chunk: &[f32]) -> (f32, f32) {
    debug_assert!(!chunk.is_empty());
    let (lo, hi) = chunk
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    (hi - lo, lo)
}

/// 1 where `x >= 0.5`, else 0.
pub fn clamp_binarize(x: &Tensor) -> Tensor {
    x.mask_ge(0.5)
}

fn is_binary(t: &Tensor) -> bool {
    t.data().iter().all(|&x| x == 0.0 || x == 1.0)
}

/// Polarization penalty `Σ (1 − |2g − 1|^β)²` built on the tape.
pub fn reg_loss(tape: &mut Tape, g: Var, beta: f32) -> Result<Var> {
    if !(BETA_MIN..=1.0).contains(&beta) {
        return Err(Error::contract(format!(
            "beta {beta} outside [{BETA_MIN}, 1]"
        )));
    }
    let two_g = tape.scale(g, 2.0)?;
    let centred = tape.add_scalar(two_g, -1.0)?;
    let dist = tape.abs(centred)?;
    let powered = tape.pow(dist, beta)?;
    let gap = tape.rsub_scalar(1.0, powered)?;
    let sq = tape.mul(gap, gap)?;
    tape.sum(sq)
}

/// Tape-free value of [`reg_loss`].
pub fn reg_loss_value(g: &Tensor, beta: f32) -> f64 {
    g.data()
        .iter()
        .map(|&x| {
            let t = (2.0 * x - 1.0).abs().powf(beta);
            ((1.0 - t) as f64).powi(2)
        })
        .sum()
}

/// Share of entries with `|2g − 1| > threshold`.
pub fn polarization_fraction(g: &Tensor, threshold: f32) -> f64 {
    let hits = g
        .data()
        .iter()
        .filter(|&&x| (2.0 * x - 1.0).abs() > threshold)
        .count();
    hits as f64 / g.len() as f64
}

/// Which parts of a [`QuantLinear`] become trainable leaves on a tape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct QuantTrainables {
    pub bits: bool,
    pub affine: bool,
}

impl QuantTrainables {
    pub const NONE: Self = Self {
        bits: false,
        affine: false,
    };
}

/// Relaxed quantization state of one `n×m` linear layer.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantLinear {
    n: usize,
    m: usize,
    group_size: usize,
    pub w_fp: Tensor,
    pub g_fp: Tensor,
    /// Scale/offset for entries with `G = 1`, one per `(row, chunk)`.
    pub alpha0: Tensor,
    pub mu0: Tensor,
    /// Scale/offset for entries with `G = 0`.
    pub alpha1: Tensor,
    pub mu1: Tensor,
    frozen: bool,
}

impl QuantLinear {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        w_fp: Tensor,
        g_fp: Tensor,
        alpha0: Tensor,
        mu0: Tensor,
        alpha1: Tensor,
        mu1: Tensor,
        group_size: usize,
        frozen: bool,
    ) -> Result<Self> {
        let (n, m) = match w_fp.shape() {
            [n, m] => (*n, *m),
            s => return Err(Error::shape("quant_linear", format!("{s:?} is not 2-D"))),
        };
        if group_size == 0 {
            return Err(Error::shape("quant_linear", "group size must be positive"));
        }
        if g_fp.shape() != w_fp.shape() {
            return Err(Error::shape("quant_linear", "bitmap shape differs from weights"));
        }
        let chunks = m.div_ceil(group_size);
        for p in [&alpha0, &mu0, &alpha1, &mu1] {
            if p.shape() != [n, chunks] {
                return Err(Error::shape(
                    "quant_linear",
                    format!("affine params {:?}, expected [{n}, {chunks}]", p.shape()),
                ));
            }
        }
        if frozen && !(is_binary(&w_fp) && is_binary(&g_fp)) {
            return Err(Error::contract("frozen layer with non-binary bit planes"));
        }
        let mut q = Self {
            n,
            m,
            group_size,
            w_fp,
            g_fp,
            alpha0,
            mu0,
            alpha1,
            mu1,
            frozen,
        };
        q.project();
        Ok(q)
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn cols(&self) -> usize {
        self.m
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn n_chunks(&self) -> usize {
        self.m.div_ceil(self.group_size)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Hard `(W_B, G_B)` planes.
    pub fn hard_bits(&self) -> (Tensor, Tensor) {
        (clamp_binarize(&self.w_fp), clamp_binarize(&self.g_fp))
    }

    /// Keeps `G_FP` inside `[0, 1]`; called after every optimizer step.
    pub fn project(&mut self) {
        for g in self.g_fp.data_mut() {
            *g = g.clamp(0.0, 1.0);
        }
    }

    /// Sets every bitmap entry to `margin` or `1 − margin` according to its
    /// hard bit, so the hard bits are unchanged.
    pub fn relax_bitmap(&mut self, margin: f32) -> Result<()> {
        if self.frozen {
            return Err(Error::contract("cannot relax a frozen layer"));
        }
        if !(0.0..0.5).contains(&margin) {
            return Err(Error::contract(format!("margin {margin} outside [0, 0.5)")));
        }
        for g in self.g_fp.data_mut() {
            *g = if *g >= 0.5 { 1.0 - margin } else { margin };
        }
        Ok(())
    }

    /// Places the layer on a tape; frozen bit planes can only enter as constants.
    pub fn place(&self, tape: &mut Tape, train: QuantTrainables) -> Result<QuantVars> {
        if self.frozen && train.bits {
            return Err(Error::contract(
                "frozen weight/bitmap planes cannot be trained",
            ));
        }
        let mut put = |t: &Tensor, trainable: bool| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        Ok(QuantVars {
            w_fp: put(&self.w_fp, train.bits),
            g_fp: put(&self.g_fp, train.bits),
            alpha0: put(&self.alpha0, train.affine),
            mu0: put(&self.mu0, train.affine),
            alpha1: put(&self.alpha1, train.affine),
            mu1: put(&self.mu1, train.affine),
            group_size: self.group_size,
            cols: self.m,
        })
    }

    /// Dense dequantized weights. `hard = false` is the training-mode
    /// composition, which has the same forward value but is rejected once frozen.
    pub fn dequantize(&self, hard: bool) -> Result<Tensor> {
        if self.frozen && !hard {
            return Err(Error::contract("frozen layers only dequantize in hard mode"));
        }
        let mut tape = Tape::new();
        let vars = self.place(&mut tape, QuantTrainables::NONE)?;
        let w = vars.dequantize(&mut tape)?;
        Ok(tape.value(w).clone())
    }

    /// Replaces the relaxed planes with their hard bits. Only the affine
    /// parameters may be trained afterwards.
    pub fn freeze(&mut self) -> Result<()> {
        if self.frozen {
            return Err(Error::contract("layer is already frozen"));
        }
        let (w, g) = self.hard_bits();
        self.w_fp = w;
        self.g_fp = g;
        self.frozen = true;
        Ok(())
    }

    pub fn reg_loss_value(&self, beta: f32) -> f64 {
        reg_loss_value(&self.g_fp, beta)
    }
}

/// A [`QuantLinear`] as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct QuantVars {
    pub w_fp: Var,
    pub g_fp: Var,
    pub alpha0: Var,
    pub mu0: Var,
    pub alpha1: Var,
    pub mu1: Var,
    group_size: usize,
    cols: usize,
}

impl QuantVars {
    /// Grouped dequantization with straight-through bit planes.
    pub fn dequantize(&self, tape: &mut Tape) -> Result<Var> {
        let wb = tape.ste_binarize(self.w_fp)?;
        let gb = tape.ste_binarize(self.g_fp)?;
        let (gs, m) = (self.group_size, self.cols);
        let a0 = tape.repeat_cols(self.alpha0, gs, m)?;
        let m0 = tape.repeat_cols(self.mu0, gs, m)?;
        let a1 = tape.repeat_cols(self.alpha1, gs, m)?;
        let m1 = tape.repeat_cols(self.mu1, gs, m)?;
        let s0 = tape.mul(a0, wb)?;
        let lev0 = tape.add(s0, m0)?;
        let s1 = tape.mul(a1, wb)?;
        let lev1 = tape.add(s1, m1)?;
        let not_g = tape.rsub_scalar(1.0, gb)?;
        let pick0 = tape.mul(gb, lev0)?;
        let pick1 = tape.mul(not_g, lev1)?;
        tape.add(pick0, pick1)
    }
}
