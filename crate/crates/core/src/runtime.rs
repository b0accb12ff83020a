//! Frozen-model packing, memory accounting and the matmul benchmark.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aquant::ActQuantParams;
use crate::error::{Error, Result};
use crate::model::{LinearKind, LinearSlot, Model};
use crate::packed::{naive_dense_matmul, packed_linear, LayerMemory, MemoryReport, PackedLayer};
use crate::tensor::Tensor;
use crate::wquant::QuantLinear;

/// Replaces every frozen relaxed slot with its bit-packed form, carrying the
/// quantizer of the slot's input site.
pub fn pack_model(model: &mut Model) -> Result<()> {
    for layer in &mut model.layers {
        for kind in LinearKind::ALL {
            let act = layer.site(kind.input_site()).copied();
            let slot = layer.linear_mut(kind);
            if let LinearSlot::Relaxed(q) = slot {
                if !q.is_frozen() {
                    return Err(Error::contract("only frozen layers can be packed"));
                }
                *slot = LinearSlot::Packed(Box::new(PackedLayer::from_quant(q, act)?));
            }
        }
    }
    Ok(())
}

/// Storage accounting for a model whose linear slots are all packed.
pub fn memory_report(model: &Model) -> Result<MemoryReport> {
    let mut layers = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        for kind in LinearKind::ALL {
            match layer.linear(kind) {
                LinearSlot::Packed(p) => layers.push(LayerMemory::new(
                    format!("layers.{i}.{}", kind.name()),
                    p.rows(),
                    p.cols(),
                    p.group_size(),
                )),
                _ => return Err(Error::contract(format!("layers.{i}.{} is not packed", kind.name()))),
            }
        }
    }
    Ok(MemoryReport {
        layers,
        unquantized_params: model.unquantized_param_count(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub shape: (usize, usize),
    pub kernel: &'static str,
    pub rep: usize,
    pub ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSummary {
    pub shape: (usize, usize),
    pub packed_median_ms: f64,
    pub dense_median_ms: f64,
    /// Largest deviation of the packed result from the dense reference.
    pub max_abs_err: f32,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

fn random_packed(rng: &mut ChaCha8Rng, n: usize, m: usize, gs: usize, act: ActQuantParams) -> Result<PackedLayer> {
    let chunks = m.div_ceil(gs);
    let mut bits = || Tensor::new(&[n, m], (0..n * m).map(|_| rng.gen_range(0..2u8) as f32).collect());
    let (w, g) = (bits()?, bits()?);
    let scale = 0.02;
    let mut par = |mean: f32| Tensor::new(&[n, chunks], (0..n * chunks).map(|_| mean + rng.gen_range(-scale..scale)).collect());
    let q = QuantLinear::new(w, g, par(0.05)?, par(-0.02)?, par(0.03)?, par(0.01)?, gs, true)?;
    PackedLayer::from_quant(&q, Some(act))
}

/// Times the packed bit-plane product against the naive dense float kernel
/// on a `tokens × m` input for each `(n, m)` shape.
pub fn bench_matmul(
    shapes: &[(usize, usize)],
    tokens: usize,
    reps: usize,
    group_size: usize,
    seed: u64,
) -> Result<(Vec<BenchRow>, Vec<BenchSummary>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let act = ActQuantParams::new(-1.5, 1.5, [2, 4, 2], 4)?;
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for &(n, m) in shapes {
        let layer = random_packed(&mut rng, n, m, group_size, act)?;
        let x = Tensor::randn(&[tokens, m], 1.0, &mut rng);
        let w = layer.dequantize();
        let xq = crate::aquant::act_quantize_forward(&x, &act)?;
        let reference = naive_dense_matmul(&xq, &w)?;
        let packed = packed_linear(&x, &act, &layer)?;
        let max_abs_err = packed.max_abs_diff(&reference);
        let tol = 1e-3 * reference.data().iter().fold(1.0f32, |a, &b| a.max(b.abs()));
        if max_abs_err > tol {
            return Err(Error::contract(format!(
                "packed kernel deviates by {max_abs_err} at {n}x{m}"
            )));
        }
        let (mut tp, mut td) = (Vec::with_capacity(reps), Vec::with_capacity(reps));
        for rep in 0..reps {
            let t0 = Instant::now();
            std::hint::black_box(packed_linear(std::hint::black_box(&x), &act, &layer)?);
            let ms = t0.elapsed().as_secs_f64() * 1e3;
            tp.push(ms);
            rows.push(BenchRow { shape: (n, m), kernel: "packed", rep, ms });

            let t0 = Instant::now();
            std::hint::black_box(naive_dense_matmul(std::hint::black_box(&xq), &w)?);
            let ms = t0.elapsed().as_secs_f64() * 1e3;
            td.push(ms);
            rows.push(BenchRow { shape: (n, m), kernel: "dense", rep, ms });
        }
        summaries.push(BenchSummary {
            shape: (n, m),
            packed_median_ms: median(&tp),
            dense_median_ms: median(&td),
            max_abs_err,
        });
    }
    Ok((rows, summaries))
}

/// CSV with header `shape,kernel,rep,ms`.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("shape,kernel,rep,ms\n");
    for r in rows {
        s.push_str(&format!("{}x{},{},{},{:.4}\n", r.shape.0, r.shape.1, r.kernel, r.rep, r.ms));
    }
    s
}
