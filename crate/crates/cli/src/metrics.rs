//! Line-delimited JSON metric records.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run_id: String,
    pub stage: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    pub metric: String,
    #[serde(with = "float")]
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    pub wall_ms: Option<f64>,
}

/// Finite values as JSON numbers, the rest as `"NaN"`, `"inf"`, `"-inf"`.
mod float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("NaN")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "NaN" => Ok(f64::NAN),
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                _ => Err(serde::de::Error::custom(format!("bad float {t:?}"))),
            },
        }
    }
}

pub fn read_metrics(path: &Path) -> CliResult<Vec<MetricRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            CliError::io(
                path,
                std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", n + 1)),
            )
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Appends records for one command invocation under a single run id.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
    run_id: String,
    stage: String,
    started: Option<Instant>,
}

impl MetricsWriter {
    /// The run id is `<stage>-<config hash>-<n>` where `n` counts earlier runs
    /// of the same stage and config already in the file.
    pub fn open(path: &Path, stage: &str, config_hash: u32, record_wall_time: bool) -> CliResult<Self> {
        let prefix = format!("{stage}-{config_hash:08x}-");
        let earlier: BTreeSet<String> = read_metrics(path)?
            .into_iter()
            .filter(|r| r.run_id.starts_with(&prefix))
            .map(|r| r.run_id)
            .collect();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| CliError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
            run_id: format!("{prefix}{}", earlier.len()),
            stage: stage.to_string(),
            started: record_wall_time.then(Instant::now),
        })
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn emit(&mut self, metric: &str, value: f64, layer: Option<usize>, step: Option<usize>) -> CliResult<()> {
        let rec = MetricRecord {
            run_id: self.run_id.clone(),
            stage: self.stage.clone(),
            layer,
            metric: metric.to_string(),
            value,
            step,
            wall_ms: self.started.map(|t| t.elapsed().as_secs_f64() * 1e3),
        };
        let line = serde_json::to_string(&rec).expect("metric records serialize");
        writeln!(self.out, "{line}").map_err(|e| CliError::io(&self.path, e))
    }

    pub fn finish(mut self) -> CliResult<()> {
        self.out.flush().map_err(|e| CliError::io(&self.path, e))
    }
}
