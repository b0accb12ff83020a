//! Post-training initialization of the W(1+1) weight format.
//!
//! Each row chunk is fit independently: the two group bits and the binary
//! weight bit together address a free 4-level codebook, so the fit is a
//! Hessian-weighted 4-level scalar clustering.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ActSite, LinearKind, LinearSlot, Model, SiteRecord};
use crate::tensor::Tensor;
use crate::wquant::{init_affine_minmax, QuantLinear};

/// Diagonal proxy of a layer's reconstruction Hessian.
#[derive(Clone, Debug, PartialEq)]
pub struct HessianEstimate {
    pub h: Vec<f32>,
    pub sample_count: usize,
}

/// Streams calibration inputs into a running second moment.
#[derive(Clone, Debug)]
pub struct HessianAccumulator {
    sums: Vec<f64>,
    count: usize,
}

impl HessianAccumulator {
    pub fn new(features: usize) -> Self {
        Self {
            sums: vec![0.0; features],
            count: 0,
        }
    }

    /// Adds a `[tokens × features]` block.
    pub fn add(&mut self, x: &Tensor) -> Result<()> {
        let m = self.sums.len();
        if x.last_dim() != m || x.shape().len() != 2 {
            return Err(Error::shape(
                "hessian",
                format!("expected [_ × {m}], got {:?}", x.shape()),
            ));
        }
        for row in x.data().chunks(m) {
            for (s, &v) in self.sums.iter_mut().zip(row) {
                *s += v as f64 * v as f64;
            }
        }
        self.count += x.len() / m;
        Ok(())
    }

    pub fn finish(&self) -> Result<HessianEstimate> {
        if self.count == 0 {
            return Err(Error::contract("no calibration data"));
        }
        let n = self.count as f64;
        Ok(HessianEstimate {
            h: self.sums.iter().map(|s| (2.0 * s / n) as f32).collect(),
            sample_count: self.count,
        })
    }
}

/// `h_i = (2/N) Σ x_i²` over every token of every batch.
pub fn estimate_hessian_diag(batches: &[Tensor]) -> Result<HessianEstimate> {
    let first = batches
        .first()
        .ok_or_else(|| Error::contract("no calibration data"))?;
    let mut acc = HessianAccumulator::new(first.last_dim());
    for b in batches {
        acc.add(b)?;
    }
    acc.finish()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmConfig {
    pub max_iters: usize,
    pub restarts: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            restarts: 8,
        }
    }
}

/// Result of fitting one chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupFit {
    pub g_bits: Vec<u8>,
    pub w_bits: Vec<u8>,
    pub alpha0: f32,
    pub mu0: f32,
    pub alpha1: f32,
    pub mu1: f32,
    /// `Σ h (w − ŵ)²` at the fitted levels. The f32 affine parameters can
    /// add up to an ulp of rounding on top of this.
    pub error: f64,
}

impl GroupFit {
    #[inline]
    pub fn value(&self, i: usize) -> f32 {
        let wb = self.w_bits[i] as f32;
        if self.g_bits[i] == 1 {
            self.alpha0 * wb + self.mu0
        } else {
            self.alpha1 * wb + self.mu1
        }
    }

    pub fn levels(&self) -> [f32; 4] {
        [
            self.mu0,
            self.alpha0 + self.mu0,
            self.mu1,
            self.alpha1 + self.mu1,
        ]
    }
}

fn weighted_error(w: &[f32], h: &[f64], fit: &GroupFit) -> f64 {
    (0..w.len())
        .map(|i| {
            let d = w[i] as f64 - fit.value(i) as f64;
            h[i] * d * d
        })
        .sum()
}

/// Chooses a scale `a` with `a + lo == hi` in f32 when one exists nearby.
fn exact_scale(lo: f32, hi: f32) -> f32 {
    let base = hi - lo;
    let mut best = base;
    let mut best_err = ((base + lo) - hi).abs();
    let (mut up, mut down) = (base, base);
    for _ in 0..4 {
        if best_err == 0.0 {
            break;
        }
        up = up.next_up();
        down = down.next_down();
        for a in [up, down] {
            let e = ((a + lo) - hi).abs();
            if e < best_err && a >= 0.0 {
                best = a;
                best_err = e;
            }
        }
    }
    best
}

/// Turns four sorted levels and per-element cluster ids into bit planes.
fn decode(levels: [f64; 4], assign: &[usize]) -> GroupFit {
    let l = levels.map(|v| v as f32);
    GroupFit {
        g_bits: assign.iter().map(|&a| (a < 2) as u8).collect(),
        w_bits: assign.iter().map(|&a| (a % 2) as u8).collect(),
        alpha0: exact_scale(l[0], l[1]),
        mu0: l[0],
        alpha1: exact_scale(l[2], l[3]),
        mu1: l[2],
        error: 0.0,
    }
}

fn nearest(v: f64, levels: &[f64; 4]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, &l) in levels.iter().enumerate() {
        let d = (v - l).abs();
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

/// Lloyd iterations from `levels`. A level left without members moves to
/// the element with the largest weighted error, which never raises the error.
fn lloyd(w: &[f64], h: &[f64], mut levels: [f64; 4], max_iters: usize) -> ([f64; 4], Vec<usize>) {
    let mut assign: Vec<usize> = w.iter().map(|&v| nearest(v, &levels)).collect();
    for _ in 0..max_iters {
        let mut num = [0.0f64; 4];
        let mut den = [0.0f64; 4];
        for ((&v, &hv), &a) in w.iter().zip(h).zip(&assign) {
            num[a] += hv * v;
            den[a] += hv;
        }
        for k in 0..4 {
            if den[k] > 0.0 {
                levels[k] = num[k] / den[k];
            }
        }
        for k in 0..4 {
            if den[k] == 0.0 {
                let worst = (0..w.len()).max_by(|&i, &j| {
                    let ei = h[i] * (w[i] - levels[nearest(w[i], &levels)]).powi(2);
                    let ej = h[j] * (w[j] - levels[nearest(w[j], &levels)]).powi(2);
                    ei.total_cmp(&ej).then(j.cmp(&i))
                });
                if let Some(i) = worst {
                    levels[k] = w[i];
                }
            }
        }
        let next: Vec<usize> = w.iter().map(|&v| nearest(v, &levels)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    (levels, assign)
}

/// Seeds spread by weighted squared distance to the levels chosen so far.
fn spread_seed(w: &[f64], h: &[f64], rng: &mut ChaCha8Rng) -> [f64; 4] {
    let pick = |weights: &[f64], rng: &mut ChaCha8Rng| {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return rng.gen_range(0..weights.len());
        }
        let mut t = rng.gen::<f64>() * total;
        for (i, &x) in weights.iter().enumerate() {
            if t < x {
                return i;
            }
            t -= x;
        }
        weights.len() - 1
    };
    let mut levels = vec![w[pick(h, rng)]];
    while levels.len() < 4 {
        let d: Vec<f64> = w
            .iter()
            .zip(h)
            .map(|(&v, &hv)| hv * levels.iter().map(|l| (v - l).powi(2)).fold(f64::INFINITY, f64::min))
            .collect();
        levels.push(w[pick(&d, rng)]);
    }
    let mut out = [levels[0], levels[1], levels[2], levels[3]];
    out.sort_by(f64::total_cmp);
    out
}

/// Sorts levels ascending and relabels the assignment to match.
fn canonical(levels: [f64; 4], assign: &[usize]) -> ([f64; 4], Vec<usize>) {
    let mut order = [0usize, 1, 2, 3];
    order.sort_by(|&a, &b| levels[a].total_cmp(&levels[b]).then(a.cmp(&b)));
    let mut rank = [0usize; 4];
    for (r, &k) in order.iter().enumerate() {
        rank[k] = r;
    }
    (
        order.map(|k| levels[k]),
        assign.iter().map(|&a| rank[a]).collect(),
    )
}

/// Quartiles of the distinct values; with four or fewer they are all used.
fn quartile_seed(distinct: &[f64]) -> [f64; 4] {
    let n = distinct.len();
    if n <= 4 {
        return std::array::from_fn(|k| distinct[k.min(n - 1)]);
    }
    std::array::from_fn(|k| distinct[(((2 * k + 1) * n) / 8).min(n - 1)])
}

/// Hessian-weighted 4-level fit of one chunk with multiple restarts.
pub fn em_group_fit(w: &[f32], h: &[f32], cfg: &EmConfig, seed: u64) -> Result<GroupFit> {
    if w.is_empty() {
        return Err(Error::shape("em_group_fit", "empty chunk"));
    }
    if w.len() != h.len() {
        return Err(Error::shape("em_group_fit", "weights and Hessian lengths differ"));
    }
    if w.iter().chain(h).any(|v| !v.is_finite()) || h.iter().any(|&v| v < 0.0) {
        return Err(Error::numeric("em_group_fit", "non-finite weights or negative Hessian"));
    }
    let wd: Vec<f64> = w.iter().map(|&v| v as f64).collect();
    let hd: Vec<f64> = if h.iter().all(|&v| v == 0.0) {
        vec![1.0; h.len()]
    } else {
        h.iter().map(|&v| v as f64).collect()
    };
    let mut distinct = wd.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<GroupFit> = None;
    for restart in 0..cfg.restarts.max(1) {
        let init = if restart == 0 {
            quartile_seed(&distinct)
        } else {
            spread_seed(&wd, &hd, &mut rng)
        };
        let (levels, assign) = lloyd(&wd, &hd, init, cfg.max_iters);
        let (levels, assign) = canonical(levels, &assign);
        let mut fit = decode(levels, &assign);
        fit.error = wd
            .iter()
            .zip(&hd)
            .zip(&assign)
            .map(|((&v, &hv), &a)| hv * (v - levels[a]).powi(2))
            .sum();
        if best.as_ref().map_or(true, |b| fit.error < b.error) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Round-to-nearest baseline: min-max levels, a single group.
pub fn rtn_group_fit(w: &[f32], h: &[f32]) -> Result<GroupFit> {
    if w.is_empty() || w.len() != h.len() {
        return Err(Error::shape("rtn_group_fit", "bad chunk"));
    }
    let (alpha, mu) = init_affine_minmax(w);
    let mut fit = GroupFit {
        g_bits: vec![1; w.len()],
        w_bits: w.iter().map(|&v| (v - mu >= alpha / 2.0) as u8).collect(),
        alpha0: alpha,
        mu0: mu,
        alpha1: alpha,
        mu1: mu,
        error: 0.0,
    };
    let hd: Vec<f64> = h.iter().map(|&v| v as f64).collect();
    fit.error = weighted_error(w, &hd, &fit);
    Ok(fit)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMethod {
    Em,
    Rtn,
}

/// Seed for one chunk, independent of evaluation order.
pub fn chunk_seed(base: u64, row: usize, chunk: usize) -> u64 {
    let mut z = base ^ ((row as u64) << 32 | chunk as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fits every row chunk of `w: [n×m]` and loads the result as a relaxed layer.
pub fn ptq_initialize_layer(
    w: &Tensor,
    hess: &HessianEstimate,
    group_size: usize,
    method: InitMethod,
    cfg: &EmConfig,
    seed: u64,
) -> Result<QuantLinear> {
    let (n, m) = match w.shape() {
        [n, m] => (*n, *m),
        s => return Err(Error::shape("ptq_init", format!("{s:?} is not 2-D"))),
    };
    if hess.h.len() != m {
        return Err(Error::shape(
            "ptq_init",
            format!("Hessian has {} entries for {m} inputs", hess.h.len()),
        ));
    }
    if group_size == 0 {
        return Err(Error::shape("ptq_init", "group size must be positive"));
    }
    let chunks = m.div_ceil(group_size);
    let rows: Vec<Result<Vec<GroupFit>>> = (0..n)
        .into_par_iter()
        .map(|r| {
            (0..chunks)
                .map(|c| {
                    let lo = c * group_size;
                    let hi = (lo + group_size).min(m);
                    let seg = &w.row(r)[lo..hi];
                    let hs = &hess.h[lo..hi];
                    match method {
                        InitMethod::Em => em_group_fit(seg, hs, cfg, chunk_seed(seed, r, c)),
                        InitMethod::Rtn => rtn_group_fit(seg, hs),
                    }
                })
                .collect()
        })
        .collect();
    let mut w_fp = vec![0.0f32; n * m];
    let mut g_fp = vec![0.0f32; n * m];
    let mut params = [(); 4].map(|_| vec![0.0f32; n * chunks]);
    for (r, fits) in rows.into_iter().enumerate() {
        for (c, fit) in fits?.into_iter().enumerate() {
            let lo = c * group_size;
            for (i, (&wb, &gb)) in fit.w_bits.iter().zip(&fit.g_bits).enumerate() {
                w_fp[r * m + lo + i] = wb as f32;
                g_fp[r * m + lo + i] = gb as f32;
            }
            let k = r * chunks + c;
            params[0][k] = fit.alpha0;
            params[1][k] = fit.mu0;
            params[2][k] = fit.alpha1;
            params[3][k] = fit.mu1;
        }
    }
    let [a0, m0, a1, m1] = params.map(|p| Tensor::new(&[n, chunks], p).expect("sized"));
    QuantLinear::new(
        Tensor::new(&[n, m], w_fp)?,
        Tensor::new(&[n, m], g_fp)?,
        a0,
        m0,
        a1,
        m1,
        group_size,
        false,
    )
}

/// Replaces every full-precision projection of `teacher` with a relaxed
/// quantized one fit to the teacher's own calibration activations.
pub fn ptq_initialize_model(
    teacher: &Model,
    calib: &[Vec<usize>],
    group_size: usize,
    method: InitMethod,
    cfg: &EmConfig,
    seed: u64,
) -> Result<Model> {
    if calib.is_empty() {
        return Err(Error::contract("no calibration data"));
    }
    let mut student = teacher.clone();
    let mut xs: Vec<Tensor> = calib
        .iter()
        .map(|ids| teacher.hidden_states_prefix(ids, 0))
        .collect::<Result<_>>()?;
    for l in 0..teacher.layers.len() {
        let mut acc: [Option<HessianAccumulator>; 6] = Default::default();
        let mut next = Vec::with_capacity(xs.len());
        for x in &xs {
            let mut rec = SiteRecord::default();
            next.push(teacher.layer_output(l, x, Some(&mut rec))?);
            for site in ActSite::ALL.iter().filter(|s| !s.is_kv()) {
                let v = rec.get(*site).expect("linear input recorded");
                acc[*site as usize]
                    .get_or_insert_with(|| HessianAccumulator::new(v.last_dim()))
                    .add(v)?;
            }
        }
        for kind in LinearKind::ALL {
            let LinearSlot::Full(w) = teacher.layers[l].linear(kind) else {
                return Err(Error::contract("teacher slots must be full precision"));
            };
            let hess = acc[kind.input_site() as usize]
                .as_ref()
                .expect("accumulated")
                .finish()?;
            let layer_seed = chunk_seed(seed, l, kind as usize);
            let q = ptq_initialize_layer(w, &hess, group_size, method, cfg, layer_seed)?;
            *student.layers[l].linear_mut(kind) = LinearSlot::Relaxed(q);
        }
        xs = next;
    }
    Ok(student)
}

/// `‖W − Ŵ‖_F / ‖W‖_F`.
pub fn relative_frobenius_error(w: &Tensor, approx: &Tensor) -> f64 {
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (&a, &b) in w.data().iter().zip(approx.data()) {
        num += (a as f64 - b as f64).powi(2);
        den += (a as f64).powi(2);
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}
