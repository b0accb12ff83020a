//! One check per acceptance criterion. Each prints a `criterion N: PASS|FAIL`
//! line straight to stderr (bypassing capture), then asserts.

#[path = "../../core/tests/act_quant.rs"]
mod act_quant;
#[path = "../../core/tests/gradients.rs"]
mod gradients;
#[path = "../../core/tests/packed.rs"]
mod packed;
#[path = "../../core/tests/ptq.rs"]
mod ptq;

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use lbq_cli::metrics::{read_metrics, MetricRecord};
use lbq_cli::report::{latest_runs, mean_final_l_rec};
use lbq_core::packed::{LayerMemory, MemoryReport};
use lbq_core::runtime::bench_matmul;

const SEED: u64 = 0;

/// Keeps timed checks from sharing the core with each other.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: usize, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n}: {verdict} {detail}");
}

struct Run {
    dir: tempfile::TempDir,
    code: i32,
    elapsed: Duration,
    latest: BTreeMap<String, Vec<MetricRecord>>,
}

impl Run {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn records(&self, stage: &str) -> &[MetricRecord] {
        self.latest.get(stage).map(Vec::as_slice).unwrap_or(&[])
    }

    fn scalar(&self, stage: &str, metric: &str) -> f64 {
        self.records(stage)
            .iter()
            .find(|r| r.metric == metric && r.layer.is_none() && r.step.is_none())
            .unwrap_or_else(|| panic!("{stage}/{metric} missing"))
            .value
    }

    fn per_layer(&self, stage: &str, metric: &str) -> Vec<f64> {
        self.records(stage)
            .iter()
            .filter(|r| r.metric == metric && r.layer.is_some() && r.step.is_none())
            .map(|r| r.value)
            .collect()
    }
}

fn pipeline_run() -> Run {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("lbq.conf");
    std::fs::write(&cfg, format!("seed = {SEED}\n")).unwrap();
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_lbq"))
        .args(["pipeline", "--config"])
        .arg(&cfg)
        .env_remove("LBQ_SEED")
        .output()
        .unwrap();
    let elapsed = start.elapsed();
    let code = out.status.code().unwrap_or(-1);
    assert!(
        code == 0 || code == 4,
        "pipeline exited {code}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let latest = latest_runs(&read_metrics(&dir.path().join("metrics.jsonl")).unwrap());
    Run { dir, code, elapsed, latest }
}

fn shared() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(pipeline_run)
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let v = f();
    (v, start.elapsed())
}

#[test]
fn criterion_01_gradient_suite() {
    let _g = serial();
    let suites: [(&str, fn()); 8] = [
        ("binary_ops", gradients::binary_ops),
        ("scalar_ops", gradients::scalar_ops),
        ("linear_algebra", gradients::linear_algebra),
        ("pointwise", gradients::pointwise),
        ("reductions_and_normalizers", gradients::reductions_and_normalizers),
        ("straight_through_surrogates", gradients::straight_through_surrogates),
        ("grouped_dequantization_surrogate", gradients::grouped_dequantization_surrogate),
        ("soft_mask_surrogate", gradients::soft_mask_surrogate),
    ];
    let (failed, t) = timed(|| {
        suites
            .iter()
            .filter(|(_, f)| catch_unwind(AssertUnwindSafe(f)).is_err())
            .map(|(name, _)| *name)
            .collect::<Vec<_>>()
    });
    let pass = failed.is_empty() && t < Duration::from_secs(120);
    report(1, pass, &format!("failed suites {failed:?}, {:.2}s", t.as_secs_f64()));
    assert!(pass);
}

#[test]
fn criterion_02_em_oracle() {
    let _g = serial();
    let (worst, t) = timed(ptq::em_oracle_worst_ratio);
    let pass = worst <= 1.05 && t < Duration::from_secs(60);
    report(2, pass, &format!("worst ratio to optimum {worst:.6}, {:.2}s", t.as_secs_f64()));
    assert!(pass);
}

#[test]
fn criterion_03_packed_equivalence() {
    let _g = serial();
    let ((worst, failures), t) = timed(|| (packed::packed_oracle_worst(), packed::pack_round_trip_failures()));
    let pass = worst < 1e-3 && failures == 0 && t < Duration::from_secs(120);
    report(
        3,
        pass,
        &format!("max abs err {worst:e}, round-trip failures {failures}/1000, {:.2}s", t.as_secs_f64()),
    );
    assert!(pass);
}

#[test]
fn criterion_04_memory_formula() {
    let (bits_p_nominal, ratio) = packed::nominal_ratio();
    let l = LayerMemory::new("q_proj", 4096, 4096, 128);
    let mem = MemoryReport {
        layers: vec![l.clone(), l.clone()],
        unquantized_params: 0,
    };
    let exact = 273.0 / 2048.0;
    let pass = bits_p_nominal == 17.0 / 128.0
        && ratio == exact
        && mem.ratio_nominal() == exact
        && (1.0 / ratio - 7.5).abs() < 0.01
        && (13.5 * ratio - 1.8).abs() < 0.05;
    report(
        4,
        pass,
        &format!(
            "ratio {ratio} (= 273/2048), {:.3}x, 13.5 GB -> {:.3} GB; Bits_p {bits_p_nominal:.4} vs quoted 0.148; stored layout {:.4}",
            1.0 / ratio,
            13.5 * ratio,
            l.ratio()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_05_ablation_direction() {
    let _g = serial();
    let run = shared();
    let ptq = run.scalar("eval", "ppl.ptq.a16.valid");
    let wat = run.scalar("eval", "ppl.wat.a16.valid");
    let naive = run.scalar("eval", "ppl.wat-naive.a4.valid");
    let aar = run.scalar("eval", "ppl.aar.a4.valid");
    let pass = ptq > wat && naive > aar && run.elapsed < Duration::from_secs(30 * 60);
    report(
        5,
        pass,
        &format!(
            "ptq {ptq:.4} > wat {wat:.4}; wat+naive a4 {naive:.4} > aar {aar:.4}; pipeline {:.0}s",
            run.elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_06_joint_vs_decoupled() {
    let _g = serial();
    let run = shared();
    let joint = mean_final_l_rec(run.records("joint-probe")).unwrap();
    let decoupled = mean_final_l_rec(run.records("train-aar")).unwrap();
    let diverged = run.scalar("joint-probe", "diverged") == 1.0;
    let pass = joint >= decoupled || diverged;
    report(
        6,
        pass,
        &format!("joint mean L_rec {joint:.4} vs decoupled {decoupled:.4}, diverged {diverged}, exit {}", run.code),
    );
    assert!(pass);
}

#[test]
fn criterion_07_init_ablation() {
    let _g = serial();
    let run = shared();
    let em = run.scalar("eval", "ppl.wat.a16.valid");
    let rtn = run.scalar("eval", "ppl.wat-rtn.a16.valid");
    let pass = em <= rtn;
    report(7, pass, &format!("EM -> WAT {em:.4} <= RTN -> WAT {rtn:.4}"));
    assert!(pass);
}

#[test]
fn criterion_08_polarization() {
    let _g = serial();
    let run = shared();
    let pol = run.per_layer("train-wat", "final_polarization");
    let init: f64 = run.per_layer("train-wat", "initial_l_reg").iter().sum();
    let fin: f64 = run.per_layer("train-wat", "final_l_reg").iter().sum();
    let mean = pol.iter().sum::<f64>() / pol.len() as f64;
    let pass = !pol.is_empty() && mean >= 0.95 && fin < 0.01 * init;
    report(
        8,
        pass,
        &format!("polarization {mean:.4} (per layer {pol:.3?}), L_reg {fin:.3e} vs initial {init:.3e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_09_activation_quantizer() {
    let _g = serial();
    let (trained, baseline, mask_err) = act_quant::long_tail_comparison();
    let pass = trained < baseline && mask_err <= 1e-6;
    report(
        9,
        pass,
        &format!("trained MSE {trained:.5} < single-region {baseline:.5}; max mask-sum error {mask_err:e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_10_packed_beats_dense() {
    let _g = serial();
    let (_, summaries) = bench_matmul(&[(4096, 4096)], 1, 20, 128, SEED).unwrap();
    let s = &summaries[0];
    let pass = s.packed_median_ms < s.dense_median_ms;
    report(
        10,
        pass,
        &format!(
            "4096x4096 median packed {:.3} ms vs dense {:.3} ms, max abs err {:e}",
            s.packed_median_ms, s.dense_median_ms, s.max_abs_err
        ),
    );
    assert!(pass);
}

fn files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let ck = root.join("checkpoints");
    for e in std::fs::read_dir(&ck).unwrap() {
        let p = e.unwrap().path();
        out.insert(format!("checkpoints/{}", p.file_name().unwrap().to_string_lossy()), std::fs::read(&p).unwrap());
    }
    out.insert("metrics.jsonl".into(), std::fs::read(root.join("metrics.jsonl")).unwrap());
    out
}

#[test]
fn criterion_11_determinism() {
    let _g = serial();
    let first = shared();
    let second = pipeline_run();
    let (a, b) = (files(first.dir.path()), files(second.dir.path()));
    let differing: Vec<&String> = a
        .keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .collect();
    let pass = differing.is_empty() && first.code == second.code;
    report(11, pass, &format!("{} files compared, differing {differing:?}", a.len()));
    assert!(pass);
}

#[test]
fn wat_polarization_rises_late_in_training() {
    let _g = serial();
    let run = shared();
    let mut curves: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    for r in run.records("train-wat") {
        if let (Some(l), Some(s), "polarization") = (r.layer, r.step, r.metric.as_str()) {
            curves.entry(l).or_default().push((s, r.value));
        }
    }
    assert!(!curves.is_empty());
    for (l, mut c) in curves {
        c.sort_by_key(|p| p.0);
        let tail = &c[c.len() - c.len() / 5..];
        for w in tail.windows(2) {
            assert!(w[1].1 >= w[0].1, "layer {l}: polarization fell from {} to {}", w[0].1, w[1].1);
        }
    }
}

#[test]
fn aar_lowers_every_layer_error() {
    let _g = serial();
    let run = shared();
    let init = run.per_layer("train-aar", "initial_l_rec");
    let fin = run.per_layer("train-aar", "final_l_rec");
    assert_eq!(init.len(), fin.len());
    for (l, (a, b)) in init.iter().zip(&fin).enumerate() {
        assert!(b < a, "layer {l}: {a} -> {b}");
    }
}

#[test]
fn report_tables_match_metrics() {
    let _g = serial();
    let run = shared();
    let table = std::fs::read_to_string(run.path("report/layer_rec.csv")).unwrap();
    for stage in ["train-wat", "train-aar", "joint-probe"] {
        let fin = run.per_layer(stage, "final_l_rec");
        let mean = fin.iter().sum::<f64>() / fin.len() as f64;
        let row = table.lines().find(|l| l.starts_with(&format!("{stage},mean,"))).unwrap();
        let cell: f64 = row.split(',').nth(3).unwrap().parse().unwrap();
        assert!((cell - mean).abs() < 1e-9, "{stage}: {cell} vs {mean}");
    }
    let ablation = std::fs::read_to_string(run.path("report/ablation.csv")).unwrap();
    assert_eq!(ablation.lines().count(), 5);
    let aar = ablation.lines().find(|l| l.starts_with("aar,a4,")).unwrap();
    let cell: f64 = aar.split(',').nth(2).unwrap().parse().unwrap();
    assert_eq!(cell, run.scalar("eval", "ppl.aar.a4.valid"));
    for name in ["checkpoints/teacher.lbq", "checkpoints/packed.lbq", "checkpoints/wat-rtn.lbq"] {
        assert!(run.path(name).is_file(), "{name}");
    }
}
