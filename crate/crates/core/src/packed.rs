//! Bit-packed W(1+1) layers and the bit-plane matrix product.
//!
//! Storage packs `W_B` and `G_B` as flat row-major bit streams, bit `i` in
//! word `i / 64` at position `i % 64`. The kernel uses a derived layout where
//! every row chunk starts on a word boundary.

use half::f16;

use crate::aquant::{act_encode, ActCodes, ActQuantParams, Region};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wquant::QuantLinear;

/// Packs a `{0,1}` tensor into little-endian 64-bit words.
pub fn pack(bits: &Tensor) -> Result<Vec<u64>> {
    let mut words = vec![0u64; bits.len().div_ceil(64)];
    for (i, &b) in bits.data().iter().enumerate() {
        if b == 1.0 {
            words[i / 64] |= 1u64 << (i % 64);
        } else if b != 0.0 {
            return Err(Error::contract(format!("pack: non-binary value {b} at {i}")));
        }
    }
    Ok(words)
}

pub fn unpack(words: &[u64], n: usize, m: usize) -> Result<Tensor> {
    if words.len() != (n * m).div_ceil(64) {
        return Err(Error::shape(
            "unpack",
            format!("{} words for {n}×{m} bits", words.len()),
        ));
    }
    let data = (0..n * m)
        .map(|i| ((words[i / 64] >> (i % 64)) & 1) as f32)
        .collect();
    Tensor::new(&[n, m], data)
}

#[inline]
fn get_bit(words: &[u64], i: usize) -> bool {
    (words[i / 64] >> (i % 64)) & 1 == 1
}

/// Word-aligned copies of the bit planes, one run of `wpc` words per row chunk,
/// with the three weight patterns (`G∧W`, `G`, `W`) interleaved per word.
#[derive(Clone, Debug)]
struct Kernel {
    chunks: usize,
    wpc: usize,
    pats: Vec<[u64; 3]>,
    valid: Vec<u64>,
    /// `[α₀, μ₀, α₁, μ₁]` per row chunk, widened once.
    par: Vec<[f32; 4]>,
}

impl Kernel {
    fn build(n: usize, m: usize, gs: usize, wbits: &[u64], gbits: &[u64], params: &[Vec<f16>; 4]) -> Self {
        let chunks = m.div_ceil(gs);
        let wpc = gs.div_ceil(64);
        let mut pats = vec![[0u64; 3]; n * chunks * wpc];
        let mut valid = vec![0u64; chunks * wpc];
        for c in 0..chunks {
            for l in 0..gs.min(m - c * gs) {
                valid[c * wpc + l / 64] |= 1u64 << (l % 64);
            }
        }
        for r in 0..n {
            for c in 0..chunks {
                let base = (r * chunks + c) * wpc;
                for l in 0..gs.min(m - c * gs) {
                    let i = r * m + c * gs + l;
                    let bit = 1u64 << (l % 64);
                    let (wb, gb) = (get_bit(wbits, i), get_bit(gbits, i));
                    let word = &mut pats[base + l / 64];
                    if wb && gb {
                        word[0] |= bit;
                    }
                    if gb {
                        word[1] |= bit;
                    }
                    if wb {
                        word[2] |= bit;
                    }
                }
            }
        }
        let par = (0..n * chunks)
            .map(|k| std::array::from_fn(|j| params[j][k].to_f32()))
            .collect();
        Self {
            chunks,
            wpc,
            pats,
            valid,
            par,
        }
    }
}

/// A frozen quantized linear layer in packed form.
#[derive(Clone, Debug)]
pub struct PackedLayer {
    n: usize,
    m: usize,
    group_size: usize,
    weight_bits: Vec<u64>,
    bitmap_bits: Vec<u64>,
    alpha0: Vec<f16>,
    mu0: Vec<f16>,
    alpha1: Vec<f16>,
    mu1: Vec<f16>,
    /// Quantizer of the layer's input activations, if attached.
    pub act: Option<ActQuantParams>,
    kernel: Kernel,
}

impl PartialEq for PackedLayer {
    fn eq(&self, o: &Self) -> bool {
        self.n == o.n
            && self.m == o.m
            && self.group_size == o.group_size
            && self.weight_bits == o.weight_bits
            && self.bitmap_bits == o.bitmap_bits
            && self.alpha0 == o.alpha0
            && self.mu0 == o.mu0
            && self.alpha1 == o.alpha1
            && self.mu1 == o.mu1
            && self.act == o.act
    }
}

impl PackedLayer {
    /// Packs the hard bits of `q`; affine parameters are rounded to f16.
    pub fn from_quant(q: &QuantLinear, act: Option<ActQuantParams>) -> Result<Self> {
        let (w, g) = q.hard_bits();
        let h = |t: &Tensor| t.data().iter().map(|&v| f16::from_f32(v)).collect();
        Self::from_parts(
            q.rows(),
            q.cols(),
            q.group_size(),
            pack(&w)?,
            pack(&g)?,
            [h(&q.alpha0), h(&q.mu0), h(&q.alpha1), h(&q.mu1)],
            act,
        )
    }

    pub fn from_parts(
        n: usize,
        m: usize,
        group_size: usize,
        weight_bits: Vec<u64>,
        bitmap_bits: Vec<u64>,
        params: [Vec<f16>; 4],
        act: Option<ActQuantParams>,
    ) -> Result<Self> {
        if n == 0 || m == 0 || group_size == 0 {
            return Err(Error::shape("packed_layer", "extents must be positive"));
        }
        let words = (n * m).div_ceil(64);
        if weight_bits.len() != words || bitmap_bits.len() != words {
            return Err(Error::shape("packed_layer", "bit plane length mismatch"));
        }
        let chunks = m.div_ceil(group_size);
        if params.iter().any(|p| p.len() != n * chunks) {
            return Err(Error::shape("packed_layer", "parameter count mismatch"));
        }
        if params.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::numeric("packed_layer", "non-finite affine parameter"));
        }
        let kernel = Kernel::build(n, m, group_size, &weight_bits, &bitmap_bits, &params);
        let [alpha0, mu0, alpha1, mu1] = params;
        Ok(Self {
            n,
            m,
            group_size,
            weight_bits,
            bitmap_bits,
            alpha0,
            mu0,
            alpha1,
            mu1,
            act,
            kernel,
        })
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
        self.kernel.chunks
    }

    pub fn weight_bits(&self) -> &[u64] {
        &self.weight_bits
    }

    pub fn bitmap_bits(&self) -> &[u64] {
        &self.bitmap_bits
    }

    /// `[α₀, μ₀, α₁, μ₁]`, each `n × chunks`.
    pub fn params(&self) -> [&[f16]; 4] {
        [&self.alpha0, &self.mu0, &self.alpha1, &self.mu1]
    }

    #[inline]
    fn weight(&self, r: usize, i: usize) -> f32 {
        let k = r * self.kernel.chunks + i / self.group_size;
        let e = r * self.m + i;
        let wb = get_bit(&self.weight_bits, e) as u8 as f32;
        let gb = get_bit(&self.bitmap_bits, e) as u8 as f32;
        let [a0, m0, a1, m1] = self.kernel.par[k];
        let lev0 = a0 * wb + m0;
        let lev1 = a1 * wb + m1;
        gb * lev0 + (1.0 - gb) * lev1
    }

    /// Dense `n × m` weights.
    pub fn dequantize(&self) -> Tensor {
        let data = (0..self.n)
            .flat_map(|r| (0..self.m).map(move |i| (r, i)))
            .map(|(r, i)| self.weight(r, i))
            .collect();
        Tensor::new(&[self.n, self.m], data).expect("sized")
    }

    /// Recovers a frozen relaxed layer holding the packed values.
    pub fn to_quant(&self) -> Result<QuantLinear> {
        let chunks = self.kernel.chunks;
        let f = |v: &[f16]| {
            Tensor::new(&[self.n, chunks], v.iter().map(|x| x.to_f32()).collect())
        };
        QuantLinear::new(
            unpack(&self.weight_bits, self.n, self.m)?,
            unpack(&self.bitmap_bits, self.n, self.m)?,
            f(&self.alpha0)?,
            f(&self.mu0)?,
            f(&self.alpha1)?,
            f(&self.mu1)?,
            self.group_size,
            true,
        )
    }
}

/// Integer-core term of one affine activation region.
#[derive(Clone, Copy, Debug)]
struct RegionTerm {
    region: usize,
    alpha: f32,
    mu: i32,
    /// Offset of the region mask among a word's planes; bit planes follow.
    q0: usize,
    bits: usize,
}

const MAX_PLANES: usize = 3 * 9;

fn region_terms(codes: &ActCodes, bits: [u8; 3]) -> (Vec<RegionTerm>, usize) {
    let mut q0 = 0;
    let mut terms = Vec::new();
    for (j, r) in codes.regions.iter().enumerate() {
        if let Region::Affine { alpha, mu, .. } = *r {
            terms.push(RegionTerm {
                region: j,
                alpha,
                mu: mu as i32,
                q0,
                bits: bits[j] as usize,
            });
            q0 += 1 + bits[j] as usize;
        }
    }
    (terms, q0)
}

/// Bit planes of one token's activation codes: for every kernel word, the
/// `nq` planes (region mask then its code bits, per affine region).
struct TokenPlanes {
    words: Vec<u64>,
    nq: usize,
    /// Columns whose region forwards values unchanged.
    passthrough: Vec<usize>,
}

fn token_planes(
    codes: &ActCodes,
    row: usize,
    m: usize,
    gs: usize,
    kernel: &Kernel,
    terms: &[RegionTerm],
    nq: usize,
) -> TokenPlanes {
    let mut slot = [None; 3];
    for t in terms {
        slot[t.region] = Some(*t);
    }
    let mut words = vec![0u64; kernel.chunks * kernel.wpc * nq];
    let mut passthrough = Vec::new();
    for i in 0..m {
        let e = row * m + i;
        let Some(t) = slot[codes.region[e] as usize] else {
            passthrough.push(i);
            continue;
        };
        let (c, l) = (i / gs, i % gs);
        let base = (c * kernel.wpc + l / 64) * nq + t.q0;
        let bit = 1u64 << (l % 64);
        words[base] |= bit;
        let code = codes.code[e];
        for b in 0..t.bits {
            if (code >> b) & 1 == 1 {
                words[base + 1 + b] |= bit;
            }
        }
    }
    TokenPlanes {
        words,
        nq,
        passthrough,
    }
}

/// `Σ_j α_j (Σ_b 2^b·cnt_jb − μ_j·cnt_j)` from one pattern's plane counts.
#[inline(always)]
fn combine(counts: &[i32; MAX_PLANES], terms: &[RegionTerm]) -> f32 {
    let mut acc = 0.0f32;
    for t in terms {
        let mut s = 0i32;
        for b in 0..t.bits {
            s += counts[t.q0 + 1 + b] << b;
        }
        acc += t.alpha * (s - t.mu * counts[t.q0]) as f32;
    }
    acc
}

#[inline(always)]
fn rows_kernel(layer: &PackedLayer, tp: &TokenPlanes, terms: &[RegionTerm], x_row: &[f32], out: &mut [f32]) {
    let k = &layer.kernel;
    let (wpc, nq) = (k.wpc, tp.nq);
    let t_all: Vec<f32> = (0..k.chunks)
        .map(|c| {
            let mut counts = [0i32; MAX_PLANES];
            for w in 0..wpc {
                let p = k.valid[c * wpc + w];
                let planes = &tp.words[(c * wpc + w) * nq..][..nq];
                for (cnt, &v) in counts.iter_mut().zip(planes) {
                    *cnt += (p & v).count_ones() as i32;
                }
            }
            combine(&counts, terms)
        })
        .collect();
    for (r, y) in out.iter_mut().enumerate() {
        let mut acc = 0.0f32;
        for (c, &t_all_c) in t_all.iter().enumerate() {
            let base = (r * k.chunks + c) * wpc;
            let mut cgw = [0i32; MAX_PLANES];
            let mut cg = [0i32; MAX_PLANES];
            let mut cw = [0i32; MAX_PLANES];
            for w in 0..wpc {
                let [pgw, pg, pw] = k.pats[base + w];
                let planes = &tp.words[(c * wpc + w) * nq..][..nq];
                for (q, &v) in planes.iter().enumerate() {
                    cgw[q] += (pgw & v).count_ones() as i32;
                    cg[q] += (pg & v).count_ones() as i32;
                    cw[q] += (pw & v).count_ones() as i32;
                }
            }
            let (t_gw, t_g, t_w) = (combine(&cgw, terms), combine(&cg, terms), combine(&cw, terms));
            let [a0, m0, a1, m1] = k.par[r * k.chunks + c];
            acc += a0 * t_gw + m0 * t_g + a1 * (t_w - t_gw) + m1 * (t_all_c - t_g);
        }
        for &i in &tp.passthrough {
            acc += layer.weight(r, i) * x_row[i];
        }
        *y = acc;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn rows_kernel_popcnt(layer: &PackedLayer, tp: &TokenPlanes, terms: &[RegionTerm], x_row: &[f32], out: &mut [f32]) {
    rows_kernel(layer, tp, terms, x_row, out)
}

fn dispatch_rows(layer: &PackedLayer, tp: &TokenPlanes, terms: &[RegionTerm], x_row: &[f32], out: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("popcnt") {
        // SAFETY: the CPU supports popcnt, checked just above.
        unsafe { rows_kernel_popcnt(layer, tp, terms, x_row, out) };
        return;
    }
    rows_kernel(layer, tp, terms, x_row, out)
}

/// `y = x̂ · W_qᵀ` for activation codes of `x: [t × m]`.
///
/// `x` supplies the raw values of elements whose region is pass-through.
pub fn packed_matmul(codes: &ActCodes, x: &Tensor, bits: [u8; 3], layer: &PackedLayer) -> Result<Tensor> {
    let (t, m) = match x.shape() {
        [t, m] => (*t, *m),
        s => return Err(Error::shape("packed_matmul", format!("{s:?} is not 2-D"))),
    };
    if m != layer.m {
        return Err(Error::shape(
            "packed_matmul",
            format!("input width {m} differs from layer width {}", layer.m),
        ));
    }
    if codes.code.len() != t * m || codes.region.len() != t * m {
        return Err(Error::shape("packed_matmul", "code count differs from input"));
    }
    for (&c, &j) in codes.code.iter().zip(&codes.region) {
        if j > 2 || u32::from(c) >= 1u32 << bits[j as usize] {
            return Err(Error::contract(format!("activation code {c} overflows region {j}")));
        }
    }
    let (terms, nq) = region_terms(codes, bits);
    let mut out = vec![0.0f32; t * layer.n];
    for (row, y) in out.chunks_mut(layer.n).enumerate() {
        let tp = token_planes(codes, row, m, layer.group_size, &layer.kernel, &terms, nq);
        dispatch_rows(layer, &tp, &terms, x.row(row), y);
    }
    let y = Tensor::new(&[t, layer.n], out)?;
    y.ensure_finite("packed_matmul")?;
    Ok(y)
}

/// Quantizes `x` with `p` and runs the packed product.
pub fn packed_linear(x: &Tensor, p: &ActQuantParams, layer: &PackedLayer) -> Result<Tensor> {
    let codes = act_encode(x, p)?;
    packed_matmul(&codes, x, p.bits, layer)
}

/// Dense float product `x · Wᵀ`, accumulated sequentially per output.
pub fn naive_dense_matmul(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (t, m) = x.dims2();
    let (n, m2) = w.dims2();
    if m != m2 {
        return Err(Error::shape("naive_dense_matmul", "inner dimensions differ"));
    }
    let mut out = vec![0.0f32; t * n];
    for r in 0..t {
        let xr = x.row(r);
        for c in 0..n {
            let wr = w.row(c);
            let mut acc = 0.0f32;
            for i in 0..m {
                acc += xr[i] * wr[i];
            }
            out[r * n + c] = acc;
        }
    }
    Tensor::new(&[t, n], out)
}

/// Storage accounting of one quantized layer, in bits per weight.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMemory {
    pub name: String,
    pub n: usize,
    pub m: usize,
    pub group_size: usize,
    pub bits_q: f64,
    pub bits_g: f64,
    /// Four 16-bit parameters per row chunk, as stored.
    pub bits_p: f64,
    /// One 16-bit scale and a 1-bit offset per group.
    pub bits_p_nominal: f64,
    pub bits_fp: f64,
}

impl LayerMemory {
    pub fn new(name: impl Into<String>, n: usize, m: usize, group_size: usize) -> Self {
        let chunks = m.div_ceil(group_size) as f64;
        Self {
            name: name.into(),
            n,
            m,
            group_size,
            bits_q: 1.0,
            bits_g: 1.0,
            bits_p: 64.0 * chunks / m as f64,
            bits_p_nominal: 17.0 * chunks / m as f64,
            bits_fp: 16.0,
        }
    }

    pub fn weights(&self) -> usize {
        self.n * self.m
    }

    pub fn effective_bits(&self) -> f64 {
        self.bits_q + self.bits_g + self.bits_p
    }

    pub fn ratio(&self) -> f64 {
        self.effective_bits() / self.bits_fp
    }

    pub fn effective_bits_nominal(&self) -> f64 {
        self.bits_q + self.bits_g + self.bits_p_nominal
    }

    pub fn ratio_nominal(&self) -> f64 {
        self.effective_bits_nominal() / self.bits_fp
    }
}

/// Memory of all quantized layers plus the untouched full-precision parts.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryReport {
    pub layers: Vec<LayerMemory>,
    /// Parameters kept in full precision (embeddings, norms, output head).
    pub unquantized_params: usize,
}

impl MemoryReport {
    fn weighted(&self, f: impl Fn(&LayerMemory) -> f64) -> f64 {
        let total: usize = self.layers.iter().map(LayerMemory::weights).sum();
        if total == 0 {
            return 0.0;
        }
        self.layers
            .iter()
            .map(|l| f(l) * l.weights() as f64)
            .sum::<f64>()
            / total as f64
    }

    pub fn effective_bits(&self) -> f64 {
        self.weighted(LayerMemory::effective_bits)
    }

    pub fn ratio(&self) -> f64 {
        self.weighted(LayerMemory::ratio)
    }

    pub fn ratio_nominal(&self) -> f64 {
        self.weighted(LayerMemory::ratio_nominal)
    }

    pub fn quantized_bytes(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.effective_bits() * l.weights() as f64 / 8.0)
            .sum()
    }

    pub fn unquantized_bytes(&self) -> f64 {
        self.unquantized_params as f64 * 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bit_order_convention() {
        let alt: Vec<f32> = (0..64).map(|i| ((i + 1) % 2) as f32).collect();
        let words = pack(&Tensor::new(&[1, 64], alt).unwrap()).unwrap();
        assert_eq!(words, vec![0x5555_5555_5555_5555]);
        let alt: Vec<f32> = (0..64).map(|i| (i % 2) as f32).collect();
        let words = pack(&Tensor::new(&[1, 64], alt).unwrap()).unwrap();
        assert_eq!(words, vec![0xAAAA_AAAA_AAAA_AAAA]);
        assert_eq!(pack(&Tensor::zeros(&[3, 50])).unwrap(), vec![0; 3]);
    }

    fn random_layer(rng: &mut ChaCha8Rng, n: usize, m: usize, gs: usize) -> PackedLayer {
        let chunks = m.div_ceil(gs);
        let bits = |rng: &mut ChaCha8Rng| {
            Tensor::new(&[n, m], (0..n * m).map(|_| rng.gen_range(0..2) as f32).collect()).unwrap()
        };
        let par = |rng: &mut ChaCha8Rng| Tensor::randn(&[n, chunks], 1.0, rng);
        let q = QuantLinear::new(
            bits(rng),
            bits(rng),
            par(rng),
            par(rng),
            par(rng),
            par(rng),
            gs,
            true,
        )
        .unwrap();
        PackedLayer::from_quant(&q, None).unwrap()
    }

    #[test]
    fn matches_dense_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for (n, m, gs) in [(5, 70, 32), (8, 128, 128), (3, 200, 64), (4, 64, 128)] {
            let layer = random_layer(&mut rng, n, m, gs);
            let x = Tensor::randn(&[6, m], 2.0, &mut rng);
            let p = ActQuantParams::from_calibration(&x, [2, 4, 2], 4, 0.02, 0.98).unwrap();
            let y = packed_linear(&x, &p, &layer).unwrap();
            let xq = crate::aquant::act_quantize_forward(&x, &p).unwrap();
            let reference = naive_dense_matmul(&xq, &layer.dequantize()).unwrap();
            assert!(y.max_abs_diff(&reference) < 1e-3, "{n}x{m}/{gs}");
        }
    }

    #[test]
    fn pack_rejects_non_binary() {
        assert!(pack(&Tensor::new(&[2], vec![1.0, 0.5]).unwrap()).is_err());
    }

    #[test]
    fn nominal_ratio_exact() {
        let l = LayerMemory::new("x", 4096, 4096, 128);
        assert_eq!(l.bits_p_nominal, 17.0 / 128.0);
        assert_eq!(l.ratio_nominal(), 273.0 / 2048.0);
        assert_eq!(l.bits_p, 0.5);
        let whole = LayerMemory::new("x", 8, 4096, 4096);
        assert!(whole.bits_p_nominal < l.bits_p_nominal);
    }
}
