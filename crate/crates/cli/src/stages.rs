//! Pipeline commands. Each reads the config and its input checkpoint, checks
//! the input's stage tag, and writes its own checkpoint and metrics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lbq_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use lbq_core::distill::{
    attach_quantizers, distill_sweep, freeze_all, layer_polarization, mean_final_l_rec, LayerTrace,
    POLARIZATION_THRESHOLD,
};
use lbq_core::model::{perplexity, pretrain, LinearKind, Model};
use lbq_core::ptq::{ptq_initialize_model, relative_frobenius_error, InitMethod};
use lbq_core::runtime::{bench_csv, bench_matmul, memory_report, pack_model};

use crate::config::PipelineConfig;
use crate::corpus::{sample_windows, splits, Splits};
use crate::error::{CliError, CliResult};
use crate::metrics::MetricsWriter;
use crate::report::write_report;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    PretrainTeacher,
    PtqInit,
    TrainWat,
    TrainAar,
    Eval,
    Bench,
    JointProbe,
    Report,
    /// Every stage in order, then the report.
    Pipeline,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::PretrainTeacher => "pretrain-teacher",
            Command::PtqInit => "ptq-init",
            Command::TrainWat => "train-wat",
            Command::TrainAar => "train-aar",
            Command::Eval => "eval",
            Command::Bench => "bench",
            Command::JointProbe => "joint-probe",
            Command::Report => "report",
            Command::Pipeline => "pipeline",
        }
    }
}

/// What a command observed beyond success.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Outcome {
    /// Set when the joint probe tripped its divergence threshold.
    pub diverged: bool,
}

/// Stage tag stored in a checkpoint, with the file and producing command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Artifact {
    Teacher,
    Ptq,
    Wat,
    Aar,
    Packed,
}

impl Artifact {
    pub fn tag(self) -> &'static str {
        match self {
            Artifact::Teacher => "teacher",
            Artifact::Ptq => "ptq-init",
            Artifact::Wat => "wat",
            Artifact::Aar => "aar",
            Artifact::Packed => "packed",
        }
    }

    fn producer(self) -> Command {
        match self {
            Artifact::Teacher => Command::PretrainTeacher,
            Artifact::Ptq => Command::PtqInit,
            Artifact::Wat => Command::TrainWat,
            Artifact::Aar | Artifact::Packed => Command::TrainAar,
        }
    }

    fn initialized(self) -> bool {
        !matches!(self, Artifact::Teacher)
    }
}

fn init_name(init: InitMethod) -> &'static str {
    match init {
        InitMethod::Em => "em",
        InitMethod::Rtn => "rtn",
    }
}

/// Checkpoint file of `art` under the config's init method.
pub fn artifact_path(cfg: &PipelineConfig, art: Artifact) -> PathBuf {
    let suffix = match (art.initialized(), cfg.run.init) {
        (true, InitMethod::Rtn) => "-rtn",
        _ => "",
    };
    cfg.run.checkpoint_dir.join(format!("{}{suffix}.lbq", art.tag()))
}

/// Label used for metrics of `art`, e.g. `wat` or `wat-rtn`.
fn model_label(cfg: &PipelineConfig, art: Artifact) -> String {
    match (art.initialized(), cfg.run.init) {
        (true, InitMethod::Rtn) => format!("{}-rtn", short_label(art)),
        _ => short_label(art).to_string(),
    }
}

fn short_label(art: Artifact) -> &'static str {
    match art {
        Artifact::Ptq => "ptq",
        a => a.tag(),
    }
}

/// Metric stage name of a command under the config's init method.
fn stage_label(cfg: &PipelineConfig, cmd: Command) -> String {
    let variant = matches!(cmd, Command::PtqInit | Command::TrainWat | Command::TrainAar);
    match (variant, cfg.run.init) {
        (true, InitMethod::Rtn) => format!("{}:rtn", cmd.name()),
        _ => cmd.name().to_string(),
    }
}

fn load_stage(cfg: &PipelineConfig, art: Artifact, command: Command) -> CliResult<Checkpoint> {
    let path = artifact_path(cfg, art);
    let ordering = |detail: String| CliError::Ordering {
        command: command.name().into(),
        missing: art.producer().name().into(),
        detail,
    };
    if !path.exists() {
        return Err(ordering(format!("{} does not exist", path.display())));
    }
    let ck = load_checkpoint(&path).map_err(|e| match e {
        lbq_core::Error::Io(io) => CliError::io(&path, io),
        e => CliError::Core(e),
    })?;
    match ck.meta.get("stage") {
        Some(tag) if tag == art.tag() => Ok(ck),
        other => Err(ordering(format!(
            "{} is tagged {:?}, expected {:?}",
            path.display(),
            other.map(String::as_str).unwrap_or("<none>"),
            art.tag()
        ))),
    }
}

fn save_stage(cfg: &PipelineConfig, art: Artifact, model: &Model) -> CliResult<PathBuf> {
    let path = artifact_path(cfg, art);
    save_tagged(cfg, &path, art.tag(), model)?;
    Ok(path)
}

fn save_tagged(cfg: &PipelineConfig, path: &Path, tag: &str, model: &Model) -> CliResult<()> {
    let mut meta = BTreeMap::new();
    meta.insert("stage".to_string(), tag.to_string());
    meta.insert("init".to_string(), init_name(cfg.run.init).to_string());
    meta.insert("config".to_string(), format!("{:08x}", cfg.hash()));
    meta.insert("seed".to_string(), cfg.seed.to_string());
    save_checkpoint(&Checkpoint { model: model.clone(), meta }, path).map_err(|e| match e {
        lbq_core::Error::Io(io) => CliError::io(path, io),
        e => CliError::Core(e),
    })
}

/// Corpus splits and the distillation windows derived from the config.
pub struct Data {
    pub splits: Splits,
    pub samples: Vec<Vec<usize>>,
}

impl Data {
    pub fn load(cfg: &PipelineConfig) -> CliResult<Self> {
        let splits = splits(&cfg.run.corpus, cfg.run.corpus_len, cfg.run.valid_len, cfg.seed)?;
        let samples = sample_windows(&splits.train, cfg.samples, cfg.model.max_seq_len)?;
        Ok(Self { splits, samples })
    }

    fn calib(&self, cfg: &PipelineConfig) -> &[Vec<usize>] {
        &self.samples[..cfg.ptq.calib_samples]
    }

    fn train_eval(&self, cfg: &PipelineConfig) -> &[usize] {
        let n = cfg.run.train_eval_tokens.min(self.splits.train.len());
        &self.splits.train[..n]
    }
}

fn writer(cfg: &PipelineConfig, cmd: Command) -> CliResult<MetricsWriter> {
    MetricsWriter::open(
        &cfg.run.metrics_path,
        &stage_label(cfg, cmd),
        cfg.hash(),
        cfg.run.record_wall_time,
    )
}

fn emit_traces(w: &mut MetricsWriter, traces: &[LayerTrace]) -> CliResult<()> {
    for t in traces {
        let l = Some(t.layer);
        for s in &t.steps {
            let step = Some(s.step);
            w.emit("l_rec", s.l_rec, l, step)?;
            w.emit("l_reg", s.l_reg, l, step)?;
            w.emit("beta", s.beta as f64, l, step)?;
            w.emit("polarization", s.polarization, l, step)?;
        }
        w.emit("initial_l_rec", t.initial_l_rec, l, None)?;
        w.emit("final_l_rec", t.final_l_rec, l, None)?;
        w.emit("initial_l_reg", t.initial_l_reg, l, None)?;
        w.emit("final_l_reg", t.final_l_reg, l, None)?;
        if let Some(at) = t.diverged_at {
            w.emit("diverged_at", at as f64, l, None)?;
        }
    }
    w.emit("mean_final_l_rec", mean_final_l_rec(traces), None, None)
}

/// Perplexity of `model` on both splits, as `ppl.<label>.<mode>.<split>`.
fn emit_ppl(w: &mut MetricsWriter, cfg: &PipelineConfig, data: &Data, model: &Model, label: &str) -> CliResult<()> {
    let mode = if model.layers.iter().any(|l| l.has_act_quant()) {
        "a4"
    } else {
        "a16"
    };
    for (split, tokens) in [("valid", &data.splits.valid[..]), ("train", data.train_eval(cfg))] {
        let ppl = perplexity(model, tokens, cfg.run.eval_window)?;
        w.emit(&format!("ppl.{label}.{mode}.{split}"), ppl, None, None)?;
    }
    Ok(())
}

fn pretrain_teacher(cfg: &PipelineConfig, data: &Data) -> CliResult<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut teacher = Model::new(cfg.model.clone(), &mut rng)?;
    let losses = pretrain(&mut teacher, &data.splits.train, &cfg.pretrain_config())?;
    let mut w = writer(cfg, Command::PretrainTeacher)?;
    for (i, l) in losses.iter().enumerate() {
        w.emit("loss", *l as f64, None, Some(i))?;
    }
    save_stage(cfg, Artifact::Teacher, &teacher)?;
    w.finish()
}

fn ptq_init(cfg: &PipelineConfig, data: &Data) -> CliResult<()> {
    let teacher = load_stage(cfg, Artifact::Teacher, Command::PtqInit)?.model;
    let student = ptq_initialize_model(
        &teacher,
        data.calib(cfg),
        cfg.ptq.group_size,
        cfg.run.init,
        &cfg.ptq.em,
        cfg.seed,
    )?;
    let mut w = writer(cfg, Command::PtqInit)?;
    for (l, (t, s)) in teacher.layers.iter().zip(&student.layers).enumerate() {
        for kind in LinearKind::ALL {
            let err = relative_frobenius_error(&t.linear(kind).dense()?, &s.linear(kind).dense()?);
            w.emit(&format!("rel_err.{}", kind.name()), err, Some(l), None)?;
        }
    }
    save_stage(cfg, Artifact::Ptq, &student)?;
    w.finish()
}

fn train_wat(cfg: &PipelineConfig, data: &Data) -> CliResult<()> {
    let teacher = load_stage(cfg, Artifact::Teacher, Command::TrainWat)?.model;
    let mut student = load_stage(cfg, Artifact::Ptq, Command::TrainWat)?.model;
    let mut w = writer(cfg, Command::TrainWat)?;
    let traces = match distill_sweep(&teacher, &mut student, &data.samples, &cfg.wat, cfg.run.targets) {
        Ok(t) => t,
        Err(e) => {
            let partial = cfg.run.checkpoint_dir.join("wat.partial.lbq");
            save_tagged(cfg, &partial, "wat-partial", &student)?;
            w.finish()?;
            return Err(e.into());
        }
    };
    emit_traces(&mut w, &traces)?;
    for (l, layer) in student.layers.iter().enumerate() {
        w.emit("final_polarization", layer_polarization(layer, POLARIZATION_THRESHOLD), Some(l), None)?;
    }
    freeze_all(&mut student)?;
    save_stage(cfg, Artifact::Wat, &student)?;
    w.finish()
}

fn train_aar(cfg: &PipelineConfig, data: &Data) -> CliResult<()> {
    let teacher = load_stage(cfg, Artifact::Teacher, Command::TrainAar)?.model;
    let mut student = load_stage(cfg, Artifact::Wat, Command::TrainAar)?.model;
    let mut w = writer(cfg, Command::TrainAar)?;
    attach_quantizers(&mut student, &data.samples[0], &cfg.quantizer_init())?;
    let traces = match distill_sweep(&teacher, &mut student, &data.samples, &cfg.aar, cfg.run.targets) {
        Ok(t) => t,
        Err(e) => {
            let partial = cfg.run.checkpoint_dir.join("aar.partial.lbq");
            save_tagged(cfg, &partial, "aar-partial", &student)?;
            w.finish()?;
            return Err(e.into());
        }
    };
    emit_traces(&mut w, &traces)?;
    save_stage(cfg, Artifact::Aar, &student)?;
    pack_model(&mut student)?;
    let mem = memory_report(&student)?;
    let first = &mem.layers[0];
    w.emit("memory.bits_p", first.bits_p, None, None)?;
    w.emit("memory.bits_p_nominal", first.bits_p_nominal, None, None)?;
    w.emit("memory.effective_bits", mem.effective_bits(), None, None)?;
    w.emit("memory.ratio", mem.ratio(), None, None)?;
    w.emit("memory.ratio_nominal", mem.ratio_nominal(), None, None)?;
    w.emit("memory.quantized_bytes", mem.quantized_bytes(), None, None)?;
    w.emit("memory.unquantized_bytes", mem.unquantized_bytes(), None, None)?;
    save_stage(cfg, Artifact::Packed, &student)?;
    w.finish()
}

fn eval(cfg: &PipelineConfig, data: &Data) -> CliResult<()> {
    let teacher = load_stage(cfg, Artifact::Teacher, Command::Eval)?.model;
    let mut w = writer(cfg, Command::Eval)?;
    emit_ppl(&mut w, cfg, data, &teacher, "teacher")?;
    let mut variants = vec![cfg.clone()];
    if cfg.run.init == InitMethod::Em {
        let mut rtn = cfg.clone();
        rtn.run.init = InitMethod::Rtn;
        variants.push(rtn);
    }
    for v in &variants {
        for art in [Artifact::Ptq, Artifact::Wat, Artifact::Aar, Artifact::Packed] {
            if !artifact_path(v, art).exists() {
                continue;
            }
            let model = load_stage(v, art, Command::Eval)?.model;
            emit_ppl(&mut w, cfg, data, &model, &model_label(v, art))?;
            if art == Artifact::Wat {
                let mut naive = model;
                attach_quantizers(&mut naive, &data.samples[0], &cfg.quantizer_init())?;
                emit_ppl(&mut w, cfg, data, &naive, &format!("{}-naive", model_label(v, art)))?;
            }
        }
    }
    w.finish()
}

fn bench(cfg: &PipelineConfig) -> CliResult<()> {
    let b = &cfg.bench;
    let (rows, summaries) = bench_matmul(&b.shapes, b.tokens, b.reps, b.group_size, cfg.seed)?;
    let dir = &cfg.run.report_dir;
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let path = dir.join("bench.csv");
    std::fs::write(&path, bench_csv(&rows)).map_err(|e| CliError::io(&path, e))?;
    let mut w = writer(cfg, Command::Bench)?;
    for s in summaries {
        let shape = format!("{}x{}", s.shape.0, s.shape.1);
        w.emit(&format!("median_ms.packed.{shape}"), s.packed_median_ms, None, None)?;
        w.emit(&format!("median_ms.dense.{shape}"), s.dense_median_ms, None, None)?;
        w.emit(&format!("max_abs_err.{shape}"), s.max_abs_err as f64, None, None)?;
    }
    w.finish()
}

fn joint_probe(cfg: &PipelineConfig, data: &Data) -> CliResult<Outcome> {
    let teacher = load_stage(cfg, Artifact::Teacher, Command::JointProbe)?.model;
    let mut student = load_stage(cfg, Artifact::Ptq, Command::JointProbe)?.model;
    let mut w = writer(cfg, Command::JointProbe)?;
    attach_quantizers(&mut student, &data.samples[0], &cfg.quantizer_init())?;
    let traces = distill_sweep(&teacher, &mut student, &data.samples, &cfg.joint, cfg.run.targets)?;
    emit_traces(&mut w, &traces)?;
    let diverged = traces.iter().any(|t| t.diverged_at.is_some());
    w.emit("diverged", diverged as u8 as f64, None, None)?;
    if diverged {
        for split in ["valid", "train"] {
            w.emit(&format!("ppl.joint.a4.{split}"), f64::NAN, None, None)?;
        }
    } else {
        freeze_all(&mut student)?;
        emit_ppl(&mut w, cfg, data, &student, "joint")?;
    }
    w.finish()?;
    Ok(Outcome { diverged })
}

/// Runs one command.
pub fn run_command(cmd: Command, cfg: &PipelineConfig) -> CliResult<Outcome> {
    let data = || Data::load(cfg);
    match cmd {
        Command::PretrainTeacher => pretrain_teacher(cfg, &data()?)?,
        Command::PtqInit => ptq_init(cfg, &data()?)?,
        Command::TrainWat => train_wat(cfg, &data()?)?,
        Command::TrainAar => train_aar(cfg, &data()?)?,
        Command::Eval => eval(cfg, &data()?)?,
        Command::Bench => bench(cfg)?,
        Command::JointProbe => return joint_probe(cfg, &data()?),
        Command::Report => write_report(cfg)?,
        Command::Pipeline => return pipeline(cfg),
    }
    Ok(Outcome::default())
}

fn pipeline(cfg: &PipelineConfig) -> CliResult<Outcome> {
    let data = Data::load(cfg)?;
    pretrain_teacher(cfg, &data)?;
    ptq_init(cfg, &data)?;
    train_wat(cfg, &data)?;
    train_aar(cfg, &data)?;
    if cfg.run.init_ablation && cfg.run.init == InitMethod::Em {
        let mut rtn = cfg.clone();
        rtn.run.init = InitMethod::Rtn;
        ptq_init(&rtn, &data)?;
        train_wat(&rtn, &data)?;
    }
    eval(cfg, &data)?;
    let outcome = if cfg.run.joint_probe {
        joint_probe(cfg, &data)?
    } else {
        Outcome::default()
    };
    if cfg.run.bench {
        bench(cfg)?;
    }
    write_report(cfg)?;
    Ok(outcome)
}
