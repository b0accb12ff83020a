//! Flat `key = value` pipeline configuration with `[section]` headers.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use lbq_core::distill::{QuantizerInit, StageConfig, TargetMode};
use lbq_core::model::{ModelConfig, PretrainConfig};
use lbq_core::ptq::{EmConfig, InitMethod};

use crate::corpus::CorpusSource;
use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub corpus: CorpusSource,
    pub corpus_len: usize,
    /// Tokens held out at the end of the generated stream.
    pub valid_len: usize,
    /// Leading training tokens scored by `eval`.
    pub train_eval_tokens: usize,
    pub eval_window: usize,
    pub checkpoint_dir: PathBuf,
    pub metrics_path: PathBuf,
    pub report_dir: PathBuf,
    pub init: InitMethod,
    pub targets: TargetMode,
    pub kv_quant: bool,
    pub joint_probe: bool,
    /// Also run an RTN-initialized branch for the initialization ablation.
    pub init_ablation: bool,
    pub bench: bool,
    pub record_wall_time: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PtqSettings {
    pub calib_samples: usize,
    pub group_size: usize,
    pub em: EmConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSettings {
    pub shapes: Vec<(usize, usize)>,
    pub reps: usize,
    pub tokens: usize,
    pub group_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub run: RunConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub ptq: PtqSettings,
    /// Distillation sequences shared by every stage.
    pub samples: usize,
    pub wat: StageConfig,
    pub aar: StageConfig,
    pub quant: QuantizerInit,
    pub joint: StageConfig,
    pub bench: BenchSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let wat = StageConfig {
            lr_g: 1e-3,
            lr_scale: 10.0,
            lambda: 5e5,
            relax_margin: 0.05,
            ..StageConfig::wat()
        };
        Self {
            seed: 0,
            run: RunConfig {
                corpus: CorpusSource::Markov,
                corpus_len: 60_000,
                valid_len: 8_192,
                train_eval_tokens: 8_192,
                eval_window: 128,
                checkpoint_dir: "checkpoints".into(),
                metrics_path: "metrics.jsonl".into(),
                report_dir: "report".into(),
                init: InitMethod::Em,
                targets: TargetMode::SameInput,
                kv_quant: true,
                joint_probe: true,
                init_ablation: true,
                bench: false,
                record_wall_time: false,
            },
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            ptq: PtqSettings {
                calib_samples: 16,
                group_size: 128,
                em: EmConfig::default(),
            },
            samples: 128,
            aar: StageConfig {
                lr_scale: 10.0,
                ..StageConfig::aar()
            },
            quant: QuantizerInit::default(),
            joint: joint_defaults(&wat),
            wat,
            bench: BenchSettings {
                shapes: vec![(4096, 4096), (11008, 4096), (4096, 11008)],
                reps: 20,
                tokens: 1,
                group_size: 128,
            },
        }
    }
}

const OUTPUT_KEYS: [&str; 3] = ["checkpoint_dir", "metrics_path", "report_dir"];

/// Joint training uses the weight-side settings of WAT.
fn joint_defaults(wat: &StageConfig) -> StageConfig {
    StageConfig {
        lr_w: wat.lr_w,
        lr_g: wat.lr_g,
        lr_affine: wat.lr_affine,
        lr_scale: wat.lr_scale,
        lambda: wat.lambda,
        relax_margin: wat.relax_margin,
        lr_clip: 1e-4,
        lr_knee: 5e-4,
        ..StageConfig::joint()
    }
}

/// Text form of one config value.
trait ConfigValue: Sized {
    fn parse(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! display_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

display_value!(usize, u64, u8, f32, f64, bool);

impl ConfigValue for PathBuf {
    fn parse(s: &str) -> Result<Self, String> {
        if s.is_empty() {
            Err("empty path".into())
        } else {
            Ok(PathBuf::from(s))
        }
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

impl ConfigValue for CorpusSource {
    fn parse(s: &str) -> Result<Self, String> {
        s.parse()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for InitMethod {
    fn parse(s: &str) -> Result<Self, String> {
        match s {
            "em" => Ok(InitMethod::Em),
            "rtn" => Ok(InitMethod::Rtn),
            _ => Err(format!("unknown init method {s:?} (em | rtn)")),
        }
    }
    fn render(&self) -> String {
        match self {
            InitMethod::Em => "em",
            InitMethod::Rtn => "rtn",
        }
        .into()
    }
}

impl ConfigValue for TargetMode {
    fn parse(s: &str) -> Result<Self, String> {
        match s {
            "same_input" => Ok(TargetMode::SameInput),
            "trajectory" => Ok(TargetMode::Trajectory),
            _ => Err(format!("unknown target mode {s:?} (same_input | trajectory)")),
        }
    }
    fn render(&self) -> String {
        match self {
            TargetMode::SameInput => "same_input",
            TargetMode::Trajectory => "trajectory",
        }
        .into()
    }
}

impl ConfigValue for [u8; 3] {
    fn parse(s: &str) -> Result<Self, String> {
        let v: Vec<u8> = s
            .split(',')
            .map(|p| p.trim().parse().map_err(|e| format!("{e}")))
            .collect::<Result<_, _>>()?;
        v.try_into().map_err(|_| "expected three comma-separated values".to_string())
    }
    fn render(&self) -> String {
        format!("{},{},{}", self[0], self[1], self[2])
    }
}

impl ConfigValue for Vec<(usize, usize)> {
    fn parse(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|p| {
                let (a, b) = p
                    .trim()
                    .split_once('x')
                    .ok_or_else(|| format!("shape {p:?} is not NxM"))?;
                Ok((
                    a.parse().map_err(|e| format!("{e}"))?,
                    b.parse().map_err(|e| format!("{e}"))?,
                ))
            })
            .collect()
    }
    fn render(&self) -> String {
        self.iter()
            .map(|(a, b)| format!("{a}x{b}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

macro_rules! config_fields {
    ($( $sec:literal . $key:literal => $($f:ident).+ ),* $(,)?) => {
        impl PipelineConfig {
            /// Every `(section, key, value)` in file order.
            pub fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
                vec![$( ($sec, $key, self.$($f).+.render()) ),*]
            }

            fn set(&mut self, section: &str, key: &str, value: &str) -> CliResult<()> {
                match (section, key) {
                    $( ($sec, $key) => {
                        self.$($f).+ = ConfigValue::parse(value).map_err(|e| {
                            CliError::Config(format!("{}: {e}", qualified($sec, $key)))
                        })?;
                    } )*
                    _ => return Err(CliError::Config(format!("unknown key {}", qualified(section, key)))),
                }
                Ok(())
            }
        }
    };
}

config_fields! {
    "" . "seed" => seed,
    "run" . "corpus" => run.corpus,
    "run" . "corpus_len" => run.corpus_len,
    "run" . "valid_len" => run.valid_len,
    "run" . "train_eval_tokens" => run.train_eval_tokens,
    "run" . "eval_window" => run.eval_window,
    "run" . "checkpoint_dir" => run.checkpoint_dir,
    "run" . "metrics_path" => run.metrics_path,
    "run" . "report_dir" => run.report_dir,
    "run" . "init" => run.init,
    "run" . "targets" => run.targets,
    "run" . "kv_quant" => run.kv_quant,
    "run" . "joint_probe" => run.joint_probe,
    "run" . "init_ablation" => run.init_ablation,
    "run" . "bench" => run.bench,
    "run" . "record_wall_time" => run.record_wall_time,
    "model" . "vocab_size" => model.vocab_size,
    "model" . "d_model" => model.d_model,
    "model" . "n_heads" => model.n_heads,
    "model" . "n_layers" => model.n_layers,
    "model" . "d_ff" => model.d_ff,
    "model" . "max_seq_len" => model.max_seq_len,
    "model" . "rms_norm_eps" => model.rms_norm_eps,
    "pretrain" . "steps" => pretrain.steps,
    "pretrain" . "batch" => pretrain.batch,
    "pretrain" . "seq_len" => pretrain.seq_len,
    "pretrain" . "lr" => pretrain.lr,
    "ptq" . "calib_samples" => ptq.calib_samples,
    "ptq" . "group_size" => ptq.group_size,
    "ptq" . "em_max_iters" => ptq.em.max_iters,
    "ptq" . "em_restarts" => ptq.em.restarts,
    "distill" . "samples" => samples,
    "wat" . "epochs" => wat.epochs,
    "wat" . "batch" => wat.batch,
    "wat" . "lr_w" => wat.lr_w,
    "wat" . "lr_g" => wat.lr_g,
    "wat" . "lr_affine" => wat.lr_affine,
    "wat" . "lr_scale" => wat.lr_scale,
    "wat" . "lambda" => wat.lambda,
    "wat" . "beta_start" => wat.beta_start,
    "wat" . "beta_end" => wat.beta_end,
    "wat" . "relax_margin" => wat.relax_margin,
    "aar" . "epochs" => aar.epochs,
    "aar" . "batch" => aar.batch,
    "aar" . "lr_affine" => aar.lr_affine,
    "aar" . "lr_clip" => aar.lr_clip,
    "aar" . "lr_knee" => aar.lr_knee,
    "aar" . "lr_scale" => aar.lr_scale,
    "aar" . "bits" => quant.bits,
    "aar" . "total_bits" => quant.total_bits,
    "aar" . "knee_lo_pct" => quant.lo_pct,
    "aar" . "knee_hi_pct" => quant.hi_pct,
    "aar" . "tau_scale" => quant.tau_scale,
    "joint" . "epochs" => joint.epochs,
    "joint" . "batch" => joint.batch,
    "joint" . "lr_w" => joint.lr_w,
    "joint" . "lr_g" => joint.lr_g,
    "joint" . "lr_affine" => joint.lr_affine,
    "joint" . "lr_clip" => joint.lr_clip,
    "joint" . "lr_knee" => joint.lr_knee,
    "joint" . "lr_scale" => joint.lr_scale,
    "joint" . "lambda" => joint.lambda,
    "joint" . "relax_margin" => joint.relax_margin,
    "joint" . "divergence_factor" => joint.divergence_factor,
    "bench" . "shapes" => bench.shapes,
    "bench" . "reps" => bench.reps,
    "bench" . "tokens" => bench.tokens,
    "bench" . "group_size" => bench.group_size,
}

fn qualified(section: &str, key: &str) -> String {
    if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    }
}

impl PipelineConfig {
    /// Parses config text. Every key is optional except `seed`.
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut cfg = PipelineConfig::default();
        let mut section = String::new();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                section = name
                    .strip_suffix(']')
                    .ok_or_else(|| CliError::Config(format!("line {}: unterminated section", n + 1)))?
                    .trim()
                    .to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = k.trim();
            if !seen.insert((section.clone(), key.to_string())) {
                return Err(CliError::Config(format!(
                    "line {}: duplicate key {}",
                    n + 1,
                    qualified(&section, key)
                )));
            }
            cfg.set(&section, key, v.trim())?;
        }
        if !seen.contains(&(String::new(), "seed".to_string())) {
            return Err(CliError::Config("seed is mandatory".into()));
        }
        Ok(cfg)
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let mut current = None;
        for (sec, key, value) in self.entries() {
            if current != Some(sec) {
                if !sec.is_empty() {
                    let _ = write!(out, "\n[{sec}]\n");
                }
                current = Some(sec);
            }
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    /// Applies one `section.key=value` (or `key=value` for top-level keys).
    pub fn apply_override(&mut self, arg: &str) -> CliResult<()> {
        let (k, v) = arg
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {arg:?} is not key=value")))?;
        let (section, key) = k.trim().split_once('.').unwrap_or(("", k.trim()));
        self.set(section, key, v.trim())
    }

    /// Joins relative paths onto `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.run.checkpoint_dir,
            &mut self.run.metrics_path,
            &mut self.run.report_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let CorpusSource::File(p) = &mut self.run.corpus {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let cfg_err = |e: lbq_core::Error| CliError::Config(e.to_string());
        self.model.validate().map_err(cfg_err)?;
        for s in [&self.wat, &self.aar, &self.joint] {
            s.validate().map_err(cfg_err)?;
        }
        if let CorpusSource::File(p) = &self.run.corpus {
            if !p.is_file() {
                return Err(CliError::Config(format!("corpus file {} not found", p.display())));
            }
        }
        let seq = self.model.max_seq_len;
        if self.run.corpus_len < seq * 2 || self.run.valid_len < 2 {
            return Err(CliError::Config("corpus too short for one window".into()));
        }
        if self.samples == 0 || self.ptq.calib_samples == 0 || self.ptq.calib_samples > self.samples {
            return Err(CliError::Config("need 0 < ptq.calib_samples <= distill.samples".into()));
        }
        if self.ptq.group_size == 0 || self.bench.group_size == 0 {
            return Err(CliError::Config("group sizes must be positive".into()));
        }
        if self.run.eval_window < 2 || self.run.eval_window > seq {
            return Err(CliError::Config("eval_window must lie in [2, max_seq_len]".into()));
        }
        if self.pretrain.steps == 0 || self.pretrain.batch == 0 || !(self.pretrain.lr > 0.0) {
            return Err(CliError::Config("pretraining needs positive steps, batch and lr".into()));
        }
        let q = &self.quant;
        lbq_core::aquant::ActQuantParams::new(-1.0, 1.0, q.bits, q.total_bits).map_err(cfg_err)?;
        if !(0.0..0.5).contains(&q.lo_pct) || !(0.5..1.0).contains(&q.hi_pct) || !(q.tau_scale > 0.0) {
            return Err(CliError::Config("knee percentiles or tau_scale out of range".into()));
        }
        Ok(())
    }

    /// Stable hash of every setting except where outputs are written.
    pub fn hash(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for (sec, key, value) in self.entries() {
            if sec == "run" && OUTPUT_KEYS.contains(&key) {
                continue;
            }
            h.update(format!("{sec}.{key}={value}\n").as_bytes());
        }
        h.finalize()
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            seed: self.seed,
            ..self.pretrain.clone()
        }
    }

    pub fn quantizer_init(&self) -> QuantizerInit {
        QuantizerInit {
            kv: self.run.kv_quant,
            ..self.quant.clone()
        }
    }
}

/// Reads, overrides and validates a config file. `env_seed` is the value of
/// `LBQ_SEED`, applied before the explicit overrides.
pub fn load_config(path: &Path, overrides: &[String], env_seed: Option<&str>) -> CliResult<PipelineConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut cfg = PipelineConfig::parse(&text)?;
    if let Some(s) = env_seed {
        cfg.seed = s
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("LBQ_SEED={s:?} is not an integer")))?;
    }
    for o in overrides {
        cfg.apply_override(o)?;
    }
    let base = path.parent().unwrap_or(Path::new("."));
    cfg.resolve_paths(base);
    cfg.validate()?;
    Ok(cfg)
}
