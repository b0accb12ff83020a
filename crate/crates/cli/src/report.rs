//! CSV tables assembled from the metrics file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};
use crate::metrics::{read_metrics, MetricRecord};

/// Records of the most recent run of each stage.
pub fn latest_runs(records: &[MetricRecord]) -> BTreeMap<String, Vec<MetricRecord>> {
    let mut last: BTreeMap<&str, &str> = BTreeMap::new();
    for r in records {
        last.insert(&r.stage, &r.run_id);
    }
    let mut out: BTreeMap<String, Vec<MetricRecord>> = BTreeMap::new();
    for r in records {
        if last.get(r.stage.as_str()) == Some(&r.run_id.as_str()) {
            out.entry(r.stage.clone()).or_default().push(r.clone());
        }
    }
    out
}

struct Runs(BTreeMap<String, Vec<MetricRecord>>);

impl Runs {
    fn records(&self, stage: &str) -> &[MetricRecord] {
        self.0.get(stage).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Last value of a run-level metric (no layer, no step).
    fn scalar(&self, stage: &str, metric: &str) -> Option<f64> {
        self.records(stage)
            .iter()
            .rev()
            .find(|r| r.metric == metric && r.layer.is_none() && r.step.is_none())
            .map(|r| r.value)
    }

    fn per_layer(&self, stage: &str, metric: &str) -> BTreeMap<usize, f64> {
        self.records(stage)
            .iter()
            .filter(|r| r.metric == metric && r.step.is_none())
            .filter_map(|r| r.layer.map(|l| (l, r.value)))
            .collect()
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Mean of the per-layer `final_l_rec` records of a stage.
pub fn mean_final_l_rec(records: &[MetricRecord]) -> Option<f64> {
    let v: Vec<f64> = records
        .iter()
        .filter(|r| r.metric == "final_l_rec" && r.layer.is_some() && r.step.is_none())
        .map(|r| r.value)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

const TRAINED_STAGES: [&str; 4] = ["train-wat", "train-aar", "joint-probe", "train-wat:rtn"];

fn ablation(runs: &Runs) -> String {
    let rows = [
        ("ptq-init", "a16", "ptq.a16"),
        ("wat", "a16", "wat.a16"),
        ("wat + naive a4", "a4", "wat-naive.a4"),
        ("aar", "a4", "aar.a4"),
    ];
    let mut out = String::from("row,activations,ppl_valid,ppl_train\n");
    for (row, mode, key) in rows {
        let v = runs.scalar("eval", &format!("ppl.{key}.valid"));
        let t = runs.scalar("eval", &format!("ppl.{key}.train"));
        let _ = writeln!(out, "{row},{mode},{},{}", cell(v), cell(t));
    }
    out
}

fn perplexities(runs: &Runs) -> String {
    let mut out = String::from("model,activations,split,ppl\n");
    for stage in ["eval", "joint-probe"] {
        for r in runs.records(stage) {
            let Some(rest) = r.metric.strip_prefix("ppl.") else {
                continue;
            };
            let parts: Vec<&str> = rest.rsplitn(3, '.').collect();
            if let [split, mode, model] = parts[..] {
                let _ = writeln!(out, "{model},{mode},{split},{}", r.value);
            }
        }
    }
    out
}

fn init_ablation(runs: &Runs) -> String {
    let mut out = String::from("init,ptq_ppl_valid,wat_ppl_valid\n");
    for (init, suffix) in [("em", ""), ("rtn", "-rtn")] {
        let p = runs.scalar("eval", &format!("ppl.ptq{suffix}.a16.valid"));
        let w = runs.scalar("eval", &format!("ppl.wat{suffix}.a16.valid"));
        if p.is_some() || w.is_some() {
            let _ = writeln!(out, "{init},{},{}", cell(p), cell(w));
        }
    }
    out
}

fn layer_rec(runs: &Runs) -> String {
    let mut out = String::from("stage,layer,initial_l_rec,final_l_rec,initial_l_reg,final_l_reg\n");
    for stage in TRAINED_STAGES {
        let init = runs.per_layer(stage, "initial_l_rec");
        let fin = runs.per_layer(stage, "final_l_rec");
        let init_reg = runs.per_layer(stage, "initial_l_reg");
        let fin_reg = runs.per_layer(stage, "final_l_reg");
        for (&l, &f) in &fin {
            let _ = writeln!(
                out,
                "{stage},{l},{},{f},{},{}",
                cell(init.get(&l).copied()),
                cell(init_reg.get(&l).copied()),
                cell(fin_reg.get(&l).copied())
            );
        }
        if let Some(mean) = mean_final_l_rec(runs.records(stage)) {
            let _ = writeln!(out, "{stage},mean,,{mean},,");
        }
    }
    out
}

fn loss_curves(runs: &Runs) -> String {
    let mut out = String::from("stage,layer,step,l_rec,l_reg,beta,polarization\n");
    for stage in TRAINED_STAGES {
        let mut rows: BTreeMap<(usize, usize), [Option<f64>; 4]> = BTreeMap::new();
        for r in runs.records(stage) {
            let (Some(l), Some(s)) = (r.layer, r.step) else {
                continue;
            };
            let col = match r.metric.as_str() {
                "l_rec" => 0,
                "l_reg" => 1,
                "beta" => 2,
                "polarization" => 3,
                _ => continue,
            };
            rows.entry((l, s)).or_default()[col] = Some(r.value);
        }
        for ((l, s), v) in rows {
            let _ = writeln!(out, "{stage},{l},{s},{},{},{},{}", cell(v[0]), cell(v[1]), cell(v[2]), cell(v[3]));
        }
    }
    out
}

fn memory(runs: &Runs) -> String {
    let mut out = String::from("metric,value\n");
    for r in runs.records("train-aar") {
        if let Some(name) = r.metric.strip_prefix("memory.") {
            let _ = writeln!(out, "{name},{}", r.value);
        }
    }
    out
}

fn joint(runs: &Runs) -> String {
    let mut out = String::from("diverged,mean_final_l_rec_joint,mean_final_l_rec_decoupled\n");
    if runs.0.contains_key("joint-probe") {
        let _ = writeln!(
            out,
            "{},{},{}",
            cell(runs.scalar("joint-probe", "diverged")),
            cell(mean_final_l_rec(runs.records("joint-probe"))),
            cell(mean_final_l_rec(runs.records("train-aar")))
        );
    }
    out
}

/// Writes every table into the report directory.
pub fn write_report(cfg: &PipelineConfig) -> CliResult<()> {
    let runs = Runs(latest_runs(&read_metrics(&cfg.run.metrics_path)?));
    let dir = &cfg.run.report_dir;
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let tables = [
        ("ablation.csv", ablation(&runs)),
        ("perplexity.csv", perplexities(&runs)),
        ("init_ablation.csv", init_ablation(&runs)),
        ("layer_rec.csv", layer_rec(&runs)),
        ("loss_curves.csv", loss_curves(&runs)),
        ("memory.csv", memory(&runs)),
        ("joint.csv", joint(&runs)),
    ];
    for (name, text) in tables {
        write(&dir.join(name), &text)?;
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}
