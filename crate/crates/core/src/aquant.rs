//! Dynamic asymmetric activation quantization with two learnable knee points.
//!
//! The knees split the real line into three regions (`x < k1`, `k1 <= x < k2`,
//! `x >= k2`). Each region gets its own scale and offset computed from the
//! clipped extrema of the values that fall inside it, freshly on every call.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{round_half_away, sigmoid, softplus, softplus_inv, Tensor};

pub const CLIP_MIN: f32 = 1e-3;
pub const CLIP_MAX: f32 = 1.5;
/// Smallest temperature; keeps the soft masks finite for constant inputs.
pub const TAU_FLOOR: f32 = 1e-6;
/// Knee value used to push a region outside any realistic data range.
pub const FAR_KNEE: f32 = 1e9;

/// Quantizer state for one activation site.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActQuantParams {
    pub knee_lo: f32,
    /// Unconstrained gap; the upper knee is `knee_lo + softplus(gap_raw)`.
    pub gap_raw: f32,
    /// Multiplies the region maximum (`c_α`).
    pub clip_max: f32,
    /// Multiplies the region minimum (`c_β`).
    pub clip_min: f32,
    pub bits: [u8; 3],
    /// `τ = tau_scale · std(X)`.
    pub tau_scale: f32,
    pub total_bits: u8,
}

/// Per-region dequantization rule for one call.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Region {
    /// No element fell in the region.
    Empty,
    /// Degenerate range; values are forwarded unchanged.
    PassThrough,
    Affine { alpha: f32, mu: f32, levels: f32 },
}

impl Region {
    #[inline]
    pub fn code(&self, x: f32) -> Option<f32> {
        match *self {
            Region::Affine { alpha, mu, levels } => {
                Some(round_half_away(x / alpha + mu).clamp(0.0, levels))
            }
            _ => None,
        }
    }

    #[inline]
    pub fn apply(&self, x: f32) -> f32 {
        match *self {
            Region::Affine { alpha, mu, .. } => (self.code(x).unwrap() - mu) * alpha,
            _ => x,
        }
    }
}

impl ActQuantParams {
    pub fn new(knee_lo: f32, knee_hi: f32, bits: [u8; 3], total_bits: u8) -> Result<Self> {
        if !(knee_lo.is_finite() && knee_hi.is_finite() && knee_hi > knee_lo) {
            return Err(Error::contract(format!(
                "knees must satisfy k1 < k2, got {knee_lo} and {knee_hi}"
            )));
        }
        let p = Self {
            knee_lo,
            gap_raw: softplus_inv(knee_hi - knee_lo),
            clip_max: 1.0,
            clip_min: 1.0,
            bits,
            tau_scale: 0.05,
            total_bits,
        };
        p.validate()?;
        Ok(p)
    }

    /// One effective region at `bits` resolution; the tails sit outside any data.
    pub fn single_region(bits: u8) -> Result<Self> {
        Self::new(-FAR_KNEE, FAR_KNEE, [1, bits, 1], bits)
    }

    /// Knees at the `lo_pct`/`hi_pct` quantiles of `sample`.
    pub fn from_calibration(
        sample: &Tensor,
        bits: [u8; 3],
        total_bits: u8,
        lo_pct: f32,
        hi_pct: f32,
    ) -> Result<Self> {
        if sample.is_empty() || !sample.all_finite() {
            return Err(Error::numeric("act_calibrate", "empty or non-finite sample"));
        }
        let mut v = sample.data().to_vec();
        v.sort_by(f32::total_cmp);
        let at = |p: f32| v[((p * (v.len() - 1) as f32).round() as usize).min(v.len() - 1)];
        let k1 = at(lo_pct);
        let mut k2 = at(hi_pct);
        let min_gap = 1e-3 * k1.abs().max(1.0);
        if k2 - k1 < min_gap {
            k2 = k1 + min_gap;
        }
        Self::new(k1, k2, bits, total_bits)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits.iter().any(|&b| b == 0 || b > 8) {
            return Err(Error::contract("region bit widths must be in 1..=8"));
        }
        let codes: u32 = self.bits.iter().map(|&b| 1u32 << b).sum();
        if self.total_bits == 0 || self.total_bits > 8 || codes > 1u32 << (self.total_bits + 1) {
            return Err(Error::contract(format!(
                "{codes} region codes exceed the budget of {} bits",
                self.total_bits
            )));
        }
        if !(self.tau_scale > 0.0) {
            return Err(Error::contract("temperature scale must be positive"));
        }
        if !(self.clip_max > 0.0 && self.clip_min > 0.0) {
            return Err(Error::contract("clip factors must be positive"));
        }
        let (k1, k2) = self.knees();
        if !(k2 > k1) {
            return Err(Error::contract("knee ordering violated"));
        }
        Ok(())
    }

    pub fn knees(&self) -> (f32, f32) {
        (self.knee_lo, self.knee_lo + softplus(self.gap_raw))
    }

    pub fn levels(&self, region: usize) -> f32 {
        ((1u32 << self.bits[region]) - 1) as f32
    }

    pub fn tau(&self, x: &Tensor) -> f32 {
        (self.tau_scale * x.std()).max(TAU_FLOOR)
    }

    /// Restores the parameter constraints after an optimizer step.
    pub fn project(&mut self) {
        self.clip_max = self.clip_max.clamp(CLIP_MIN, CLIP_MAX);
        self.clip_min = self.clip_min.clamp(CLIP_MIN, CLIP_MAX);
        let min_gap = 1e-4 * self.knee_lo.abs().max(1.0);
        self.gap_raw = self.gap_raw.max(softplus_inv(min_gap));
    }

    #[inline]
    pub fn region_of(&self, x: f32) -> usize {
        let (k1, k2) = self.knees();
        region_index(x, k1, k2)
    }

    /// Places the trainable scalars on a tape as leaves (or constants).
    pub fn place(&self, tape: &mut Tape, train_clips: bool, train_knees: bool) -> ActQuantVars {
        let mut put = |v: f32, trainable: bool| {
            if trainable {
                tape.leaf(Tensor::scalar(v))
            } else {
                tape.constant(Tensor::scalar(v))
            }
        };
        ActQuantVars {
            knee_lo: put(self.knee_lo, train_knees),
            gap_raw: put(self.gap_raw, train_knees),
            clip_max: put(self.clip_max, train_clips),
            clip_min: put(self.clip_min, train_clips),
        }
    }
}

#[inline]
fn region_index(x: f32, k1: f32, k2: f32) -> usize {
    if x < k1 {
        0
    } else if x < k2 {
        1
    } else {
        2
    }
}

/// Range below which a region is treated as constant.
fn degenerate(alpha: f32, hi: f32, lo: f32) -> bool {
    !(alpha > 1e-6 * hi.abs().max(lo.abs())) || !alpha.is_finite()
}

/// Scale and offset of a region from its extrema.
pub fn region_affine(max: f32, min: f32, clip_max: f32, clip_min: f32, bits: u8) -> Region {
    let levels = ((1u32 << bits) - 1) as f32;
    let hi = clip_max * max;
    let lo = clip_min * min;
    let alpha = (hi - lo) / levels;
    if degenerate(alpha, hi, lo) {
        return Region::PassThrough;
    }
    let mu = -round_half_away(lo / alpha);
    Region::Affine { alpha, mu, levels }
}

fn check_input(x: &Tensor) -> Result<()> {
    if x.is_empty() {
        return Err(Error::shape("act_quant", "empty activation tensor"));
    }
    x.ensure_finite("act_quant")
}

/// Per-region extrema, `None` for empty regions.
fn region_extrema(x: &[f32], k1: f32, k2: f32) -> [Option<(f32, f32)>; 3] {
    let mut ext: [Option<(f32, f32)>; 3] = [None; 3];
    for &v in x {
        let e = &mut ext[region_index(v, k1, k2)];
        *e = Some(match *e {
            None => (v, v),
            Some((mx, mn)) => (if v > mx { v } else { mx }, if v < mn { v } else { mn }),
        });
    }
    ext
}

/// Scale/offset of each region for this tensor.
pub fn dynamic_range(x: &Tensor, p: &ActQuantParams) -> Result<[Region; 3]> {
    check_input(x)?;
    let (k1, k2) = p.knees();
    let ext = region_extrema(x.data(), k1, k2);
    Ok(std::array::from_fn(|j| match ext[j] {
        None => Region::Empty,
        Some((mx, mn)) => region_affine(mx, mn, p.clip_max, p.clip_min, p.bits[j]),
    }))
}

/// Hard-partitioned fake quantization.
pub fn act_quantize_forward(x: &Tensor, p: &ActQuantParams) -> Result<Tensor> {
    let regions = dynamic_range(x, p)?;
    let (k1, k2) = p.knees();
    Ok(x.map(|v| regions[region_index(v, k1, k2)].apply(v)))
}

/// Round-trips a key or value block through the cache's quantizer.
pub fn quantize_kv(entry: &Tensor, p: &ActQuantParams) -> Result<Tensor> {
    act_quantize_forward(entry, p)
}

/// Integer codes for the packed runtime.
#[derive(Clone, Debug, PartialEq)]
pub struct ActCodes {
    pub regions: [Region; 3],
    /// Region of each element.
    pub region: Vec<u8>,
    /// Code within the region; 0 for pass-through elements.
    pub code: Vec<u8>,
}

pub fn act_encode(x: &Tensor, p: &ActQuantParams) -> Result<ActCodes> {
    let regions = dynamic_range(x, p)?;
    let (k1, k2) = p.knees();
    let mut region = Vec::with_capacity(x.len());
    let mut code = Vec::with_capacity(x.len());
    for &v in x.data() {
        let j = region_index(v, k1, k2);
        region.push(j as u8);
        code.push(regions[j].code(v).unwrap_or(0.0) as u8);
    }
    Ok(ActCodes {
        regions,
        region,
        code,
    })
}

/// Soft region memberships as differences of temperature-scaled sigmoids.
pub fn soft_membership(x: &Tensor, p: &ActQuantParams) -> [Tensor; 3] {
    let (k1, k2) = p.knees();
    let tau = p.tau(x);
    let s1 = x.map(|v| sigmoid((v - k1) * (1.0 / tau)));
    let s2 = x.map(|v| sigmoid((v - k2) * (1.0 / tau)));
    let pi1 = s1.map(|a| 1.0 - a);
    let pi2 = Tensor::new(
        s1.shape(),
        s1.data().iter().zip(s2.data()).map(|(a, b)| a - b).collect(),
    )
    .expect("same shape");
    [pi1, pi2, s2]
}

/// Tape handles for the trainable quantizer scalars.
#[derive(Clone, Copy, Debug)]
pub struct ActQuantVars {
    pub knee_lo: Var,
    pub gap_raw: Var,
    pub clip_max: Var,
    pub clip_min: Var,
}

impl ActQuantVars {
    pub fn grads(&self, tape: &Tape) -> ActQuantGrads {
        let g = |v: Var| tape.grad(v).map(|t| t.item()).unwrap_or(0.0);
        ActQuantGrads {
            knee_lo: g(self.knee_lo),
            gap_raw: g(self.gap_raw),
            clip_max: g(self.clip_max),
            clip_min: g(self.clip_min),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ActQuantGrads {
    pub knee_lo: f32,
    pub gap_raw: f32,
    pub clip_max: f32,
    pub clip_min: f32,
}

/// Surrogate region indicators: hard forward, soft-membership backward.
pub fn surrogate_indicators(
    tape: &mut Tape,
    x: Var,
    p: &ActQuantParams,
    vars: &ActQuantVars,
) -> Result<[Var; 3]> {
    let xv = tape.value(x).clone();
    let tau = p.tau(&xv);
    let gap = tape.softplus(vars.gap_raw)?;
    let k2 = tape.add(vars.knee_lo, gap)?;
    let (k1v, k2v) = (tape.value(vars.knee_lo).item(), tape.value(k2).item());
    let d1 = tape.sub(x, vars.knee_lo)?;
    let z1 = tape.scale(d1, 1.0 / tau)?;
    let s1 = tape.sigmoid(z1)?;
    let d2 = tape.sub(x, k2)?;
    let z2 = tape.scale(d2, 1.0 / tau)?;
    let s2 = tape.sigmoid(z2)?;
    let pi1 = tape.rsub_scalar(1.0, s1)?;
    let pi2 = tape.sub(s1, s2)?;
    let soft = [pi1, pi2, s2];
    let mut out = [x; 3];
    for (j, slot) in out.iter_mut().enumerate() {
        let hard = xv.map(|v| (region_index(v, k1v, k2v) == j) as u8 as f32);
        *slot = tape.straight_through(hard, soft[j])?;
    }
    Ok(out)
}

/// Differentiable fake quantization whose forward equals [`act_quantize_forward`].
pub fn act_quantize_train(
    tape: &mut Tape,
    x: Var,
    p: &ActQuantParams,
    vars: &ActQuantVars,
) -> Result<Var> {
    check_input(tape.value(x))?;
    let xv = tape.value(x).clone();
    let indicators = surrogate_indicators(tape, x, p, vars)?;
    let k1 = tape.value(vars.knee_lo).item();
    let k2 = k1 + softplus(tape.value(vars.gap_raw).item());
    let ext = region_extrema(xv.data(), k1, k2);
    let (cmax, cmin) = (
        tape.value(vars.clip_max).item(),
        tape.value(vars.clip_min).item(),
    );
    let mut total: Option<Var> = None;
    for j in 0..3 {
        let Some((mx, mn)) = ext[j] else { continue };
        let region = region_affine(mx, mn, cmax, cmin, p.bits[j]);
        let xq = match region {
            Region::Empty => unreachable!("region has members"),
            Region::PassThrough => x,
            Region::Affine { levels, .. } => {
                let mask = xv.map(|v| (region_index(v, k1, k2) == j) as u8 as f32);
                let maxv = tape.masked_max(x, &mask)?;
                let minv = tape.masked_min(x, &mask)?;
                let hi = tape.mul(vars.clip_max, maxv)?;
                let lo = tape.mul(vars.clip_min, minv)?;
                let span = tape.sub(hi, lo)?;
                let lv = tape.scalar(levels);
                let alpha = tape.div(span, lv)?;
                let ratio = tape.div(lo, alpha)?;
                let rounded = tape.ste_round(ratio)?;
                let mu = tape.neg(rounded)?;
                let xs = tape.div(x, alpha)?;
                let s = tape.add(xs, mu)?;
                let r = tape.ste_round(s)?;
                let q = tape.clamp(r, 0.0, levels)?;
                let centered = tape.sub(q, mu)?;
                tape.mul(centered, alpha)?
            }
        };
        let part = tape.mul(indicators[j], xq)?;
        total = Some(match total {
            None => part,
            Some(t) => tape.add(t, part)?,
        });
    }
    Ok(total.expect("non-empty input has at least one region"))
}
