//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `LBQ1`, `u32` version, `u32` record count,
//! then records of
//! `u8 kind | u32 path len | path | u32 ndims | u64 dims.. | u32 group_size | u64 payload len | payload | u32 crc32`
//! where the CRC covers every byte of the record before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use half::f16;

use crate::aquant::ActQuantParams;
use crate::error::{Error, Result};
use crate::model::{ActSite, DecoderLayer, LinearKind, LinearSlot, Model, ModelConfig};
use crate::packed::PackedLayer;
use crate::tensor::Tensor;
use crate::wquant::QuantLinear;

pub const MAGIC: &[u8; 4] = b"LBQ1";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum RecordKind {
    FpWeights = 0,
    RelaxedQuant = 1,
    PackedQuant = 2,
    ActParams = 3,
    Config = 4,
}

impl RecordKind {
    fn from_u8(b: u8) -> Result<Self> {
        Ok(match b {
            0 => RecordKind::FpWeights,
            1 => RecordKind::RelaxedQuant,
            2 => RecordKind::PackedQuant,
            3 => RecordKind::ActParams,
            4 => RecordKind::Config,
            _ => return Err(Error::Format(format!("unknown record kind {b}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub kind: RecordKind,
    pub path: String,
    pub dims: Vec<u64>,
    pub group_size: u32,
    pub payload: Vec<u8>,
}

/// A model plus free-form metadata such as the pipeline stage.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: BTreeMap<String, String>,
}

// ---------------------------------------------------------------- byte helpers

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for &x in v {
            self.f32(x);
        }
    }
    fn bytes(&mut self, v: &[u8]) {
        self.0.extend_from_slice(v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        (0..n).map(|_| self.f32()).collect()
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn len_of(n: u64) -> Result<usize> {
    usize::try_from(n).map_err(|_| Error::Format("length overflow".into()))
}

// ---------------------------------------------------------------- records

fn encode_record(w: &mut Writer, r: &Record) {
    let start = w.0.len();
    w.u8(r.kind as u8);
    w.u32(r.path.len() as u32);
    w.bytes(r.path.as_bytes());
    w.u32(r.dims.len() as u32);
    for &d in &r.dims {
        w.u64(d);
    }
    w.u32(r.group_size);
    w.u64(r.payload.len() as u64);
    w.bytes(&r.payload);
    let crc = crc32fast::hash(&w.0[start..]);
    w.u32(crc);
}

fn decode_record(rd: &mut Reader) -> Result<Record> {
    let start = rd.pos;
    let kind = RecordKind::from_u8(rd.u8()?)?;
    let plen = rd.u32()? as usize;
    let path = String::from_utf8(rd.take(plen)?.to_vec())
        .map_err(|_| Error::Format("record path is not UTF-8".into()))?;
    let nd = rd.u32()? as usize;
    if nd > 8 {
        return Err(Error::Format(format!("{nd} dimensions in record {path}")));
    }
    let dims = (0..nd).map(|_| rd.u64()).collect::<Result<Vec<_>>>()?;
    let group_size = rd.u32()?;
    let len = len_of(rd.u64()?)?;
    let payload = rd.take(len)?.to_vec();
    let expect = crc32fast::hash(&rd.buf[start..rd.pos]);
    let crc = rd.u32()?;
    if crc != expect {
        return Err(Error::Format(format!("checksum mismatch in record {path}")));
    }
    Ok(Record {
        kind,
        path,
        dims,
        group_size,
        payload,
    })
}

pub fn encode_records(records: &[Record]) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u32(records.len() as u32);
    for r in records {
        encode_record(&mut w, r);
    }
    w.0
}

pub fn decode_records(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut rd = Reader::new(bytes);
    if rd.take(4).map_err(|_| Error::Format("missing magic".into()))? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = rd.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n = rd.u32()? as usize;
    let records = (0..n)
        .map(|_| decode_record(&mut rd))
        .collect::<Result<Vec<_>>>()?;
    if !rd.done() {
        return Err(Error::Format("trailing bytes".into()));
    }
    Ok(records)
}

// ---------------------------------------------------------------- payloads

fn fp_record(path: String, t: &Tensor) -> Record {
    let mut w = Writer::default();
    w.f32s(t.data());
    Record {
        kind: RecordKind::FpWeights,
        path,
        dims: t.shape().iter().map(|&d| d as u64).collect(),
        group_size: 0,
        payload: w.0,
    }
}

fn dims_usize(r: &Record) -> Result<Vec<usize>> {
    r.dims.iter().map(|&d| len_of(d)).collect()
}

fn fp_tensor(r: &Record) -> Result<Tensor> {
    let shape = dims_usize(r)?;
    let n: usize = shape.iter().product();
    let mut rd = Reader::new(&r.payload);
    let data = rd.f32s(n)?;
    if !rd.done() {
        return Err(Error::Format(format!("payload size mismatch in {}", r.path)));
    }
    Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))
}

fn relaxed_record(path: String, q: &QuantLinear) -> Record {
    let mut w = Writer::default();
    w.u8(q.is_frozen() as u8);
    for t in [&q.w_fp, &q.g_fp, &q.alpha0, &q.mu0, &q.alpha1, &q.mu1] {
        w.f32s(t.data());
    }
    Record {
        kind: RecordKind::RelaxedQuant,
        path,
        dims: vec![q.rows() as u64, q.cols() as u64],
        group_size: q.group_size() as u32,
        payload: w.0,
    }
}

fn nm(r: &Record) -> Result<(usize, usize, usize)> {
    match dims_usize(r)?.as_slice() {
        &[n, m] if r.group_size > 0 => Ok((n, m, r.group_size as usize)),
        _ => Err(Error::Format(format!("bad dims for {}", r.path))),
    }
}

fn relaxed_layer(r: &Record) -> Result<QuantLinear> {
    let (n, m, gs) = nm(r)?;
    let chunks = m.div_ceil(gs);
    let mut rd = Reader::new(&r.payload);
    let frozen = rd.u8()? == 1;
    let mut t = |rows: usize, cols: usize| -> Result<Tensor> {
        let data = rd.f32s(rows * cols)?;
        Tensor::new(&[rows, cols], data).map_err(|e| Error::Format(e.to_string()))
    };
    let (w, g) = (t(n, m)?, t(n, m)?);
    let (a0, m0, a1, m1) = (t(n, chunks)?, t(n, chunks)?, t(n, chunks)?, t(n, chunks)?);
    if !rd.done() {
        return Err(Error::Format(format!("payload size mismatch in {}", r.path)));
    }
    QuantLinear::new(w, g, a0, m0, a1, m1, gs, frozen).map_err(|e| Error::Format(e.to_string()))
}

fn write_act(w: &mut Writer, p: &ActQuantParams) {
    w.f32(p.knee_lo);
    w.f32(p.gap_raw);
    w.f32(p.clip_max);
    w.f32(p.clip_min);
    for b in p.bits {
        w.u8(b);
    }
    // Temperature policy: 0 = scaled standard deviation.
    w.u8(0);
    w.f32(p.tau_scale);
    w.u8(p.total_bits);
}

fn read_act(rd: &mut Reader) -> Result<ActQuantParams> {
    let knee_lo = rd.f32()?;
    let gap_raw = rd.f32()?;
    let clip_max = rd.f32()?;
    let clip_min = rd.f32()?;
    let bits = [rd.u8()?, rd.u8()?, rd.u8()?];
    let policy = rd.u8()?;
    if policy != 0 {
        return Err(Error::Format(format!("unknown temperature policy {policy}")));
    }
    let p = ActQuantParams {
        knee_lo,
        gap_raw,
        clip_max,
        clip_min,
        bits,
        tau_scale: rd.f32()?,
        total_bits: rd.u8()?,
    };
    p.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(p)
}

fn packed_record(path: String, p: &PackedLayer) -> Record {
    let mut w = Writer::default();
    for &x in p.weight_bits().iter().chain(p.bitmap_bits()) {
        w.u64(x);
    }
    for plane in p.params() {
        for v in plane {
            w.bytes(&v.to_bits().to_le_bytes());
        }
    }
    match &p.act {
        Some(a) => {
            w.u8(1);
            write_act(&mut w, a);
        }
        None => w.u8(0),
    }
    Record {
        kind: RecordKind::PackedQuant,
        path,
        dims: vec![p.rows() as u64, p.cols() as u64],
        group_size: p.group_size() as u32,
        payload: w.0,
    }
}

fn packed_layer(r: &Record) -> Result<PackedLayer> {
    let (n, m, gs) = nm(r)?;
    let words = (n * m).div_ceil(64);
    let chunks = m.div_ceil(gs);
    let mut rd = Reader::new(&r.payload);
    let wb = (0..words).map(|_| rd.u64()).collect::<Result<Vec<_>>>()?;
    let gb = (0..words).map(|_| rd.u64()).collect::<Result<Vec<_>>>()?;
    let mut plane = || -> Result<Vec<f16>> {
        (0..n * chunks).map(|_| Ok(f16::from_bits(rd.u16()?))).collect()
    };
    let params = [plane()?, plane()?, plane()?, plane()?];
    let act = match rd.u8()? {
        0 => None,
        1 => Some(read_act(&mut rd)?),
        b => return Err(Error::Format(format!("bad activation flag {b}"))),
    };
    if !rd.done() {
        return Err(Error::Format(format!("payload size mismatch in {}", r.path)));
    }
    PackedLayer::from_parts(n, m, gs, wb, gb, params, act).map_err(|e| Error::Format(e.to_string()))
}

fn act_record(path: String, p: &ActQuantParams) -> Record {
    let mut w = Writer::default();
    write_act(&mut w, p);
    Record {
        kind: RecordKind::ActParams,
        path,
        dims: vec![],
        group_size: 0,
        payload: w.0,
    }
}

fn config_record(path: &str, pairs: &[(String, String)]) -> Record {
    let text: String = pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    Record {
        kind: RecordKind::Config,
        path: path.to_string(),
        dims: vec![],
        group_size: 0,
        payload: text.into_bytes(),
    }
}

fn parse_pairs(r: &Record) -> Result<BTreeMap<String, String>> {
    let text = std::str::from_utf8(&r.payload)
        .map_err(|_| Error::Format(format!("config {} is not UTF-8", r.path)))?;
    text.lines()
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Format(format!("bad config line {l:?}")))
        })
        .collect()
}

fn model_config_pairs(c: &ModelConfig) -> Vec<(String, String)> {
    [
        ("vocab_size", c.vocab_size.to_string()),
        ("d_model", c.d_model.to_string()),
        ("n_heads", c.n_heads.to_string()),
        ("n_layers", c.n_layers.to_string()),
        ("d_ff", c.d_ff.to_string()),
        ("max_seq_len", c.max_seq_len.to_string()),
        ("rms_norm_eps", format!("{:08x}", c.rms_norm_eps.to_bits())),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn model_config_from(pairs: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let get = |k: &str| -> Result<usize> {
        pairs
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format(format!("model config lacks {k}")))
    };
    let eps = pairs
        .get("rms_norm_eps")
        .and_then(|v| u32::from_str_radix(v, 16).ok())
        .map(f32::from_bits)
        .ok_or_else(|| Error::Format("model config lacks rms_norm_eps".into()))?;
    let c = ModelConfig {
        vocab_size: get("vocab_size")?,
        d_model: get("d_model")?,
        n_heads: get("n_heads")?,
        n_layers: get("n_layers")?,
        d_ff: get("d_ff")?,
        max_seq_len: get("max_seq_len")?,
        rms_norm_eps: eps,
    };
    c.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(c)
}

// ---------------------------------------------------------------- model

pub fn checkpoint_records(ck: &Checkpoint) -> Vec<Record> {
    let m = &ck.model;
    let mut out = vec![config_record("model", &model_config_pairs(&m.config))];
    let meta: Vec<(String, String)> = ck.meta.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    out.push(config_record("meta", &meta));
    out.push(fp_record("embed".into(), &m.embed));
    out.push(fp_record("pos".into(), &m.pos));
    for (i, l) in m.layers.iter().enumerate() {
        out.push(fp_record(format!("layers.{i}.attn_norm"), &l.attn_norm));
        out.push(fp_record(format!("layers.{i}.mlp_norm"), &l.mlp_norm));
        for kind in LinearKind::ALL {
            let path = format!("layers.{i}.{}", kind.name());
            out.push(match l.linear(kind) {
                LinearSlot::Full(w) => fp_record(path, w),
                LinearSlot::Relaxed(q) => relaxed_record(path, q),
                LinearSlot::Packed(p) => packed_record(path, p),
            });
        }
        for site in ActSite::ALL {
            if let Some(p) = l.site(site) {
                out.push(act_record(format!("layers.{i}.act.{}", site.name()), p));
            }
        }
    }
    out.push(fp_record("final_norm".into(), &m.final_norm));
    out.push(fp_record("lm_head".into(), &m.lm_head));
    out
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    encode_records(&checkpoint_records(ck))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let records = decode_records(bytes)?;
    let mut by_path: BTreeMap<&str, &Record> = BTreeMap::new();
    for r in &records {
        if by_path.insert(r.path.as_str(), r).is_some() {
            return Err(Error::Format(format!("duplicate record {}", r.path)));
        }
    }
    let get = |p: &str| -> Result<&Record> {
        by_path
            .get(p)
            .copied()
            .ok_or_else(|| Error::Format(format!("missing record {p}")))
    };
    let want = |r: &Record, kind: RecordKind| -> Result<()> {
        if r.kind == kind {
            Ok(())
        } else {
            Err(Error::Format(format!("record {} has kind {:?}", r.path, r.kind)))
        }
    };
    let fp = |p: &str| -> Result<Tensor> {
        let r = get(p)?;
        want(r, RecordKind::FpWeights)?;
        fp_tensor(r)
    };
    let cfg_rec = get("model")?;
    want(cfg_rec, RecordKind::Config)?;
    let config = model_config_from(&parse_pairs(cfg_rec)?)?;
    let meta_rec = get("meta")?;
    want(meta_rec, RecordKind::Config)?;
    let meta = parse_pairs(meta_rec)?;
    let (v, d) = (config.vocab_size, config.d_model);
    let check = |t: Tensor, shape: &[usize], p: &str| -> Result<Tensor> {
        if t.shape() == shape {
            Ok(t)
        } else {
            Err(Error::Format(format!("record {p} has shape {:?}", t.shape())))
        }
    };
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let norm = |name: &str| {
            let p = format!("layers.{i}.{name}");
            check(fp(&p)?, &[d], &p)
        };
        let attn_norm = norm("attn_norm")?;
        let mlp_norm = norm("mlp_norm")?;
        let mut slots = Vec::with_capacity(7);
        for kind in LinearKind::ALL {
            let p = format!("layers.{i}.{}", kind.name());
            let r = get(&p)?;
            let slot = match r.kind {
                RecordKind::FpWeights => LinearSlot::Full(fp_tensor(r)?),
                RecordKind::RelaxedQuant => LinearSlot::Relaxed(relaxed_layer(r)?),
                RecordKind::PackedQuant => LinearSlot::Packed(Box::new(packed_layer(r)?)),
                k => return Err(Error::Format(format!("record {p} has kind {k:?}"))),
            };
            let (n, m) = config.linear_shape(kind);
            if slot.shape() != (n, m) {
                return Err(Error::Format(format!("record {p} has the wrong shape")));
            }
            slots.push(slot);
        }
        let mut act: [Option<ActQuantParams>; 6] = Default::default();
        for site in ActSite::ALL {
            if let Some(r) = by_path.get(format!("layers.{i}.act.{}", site.name()).as_str()) {
                want(r, RecordKind::ActParams)?;
                let mut rd = Reader::new(&r.payload);
                act[site as usize] = Some(read_act(&mut rd)?);
                if !rd.done() {
                    return Err(Error::Format(format!("payload size mismatch in {}", r.path)));
                }
            }
        }
        layers.push(DecoderLayer {
            attn_norm,
            mlp_norm,
            linears: slots.try_into().expect("seven slots"),
            act,
        });
    }
    let model = Model {
        embed: check(fp("embed")?, &[v, d], "embed")?,
        pos: check(fp("pos")?, &[config.max_seq_len, d], "pos")?,
        layers,
        final_norm: check(fp("final_norm")?, &[d], "final_norm")?,
        lm_head: check(fp("lm_head")?, &[v, d], "lm_head")?,
        config,
    };
    let expected = checkpoint_records(&Checkpoint {
        model: model.clone(),
        meta: meta.clone(),
    })
    .len();
    if expected != records.len() {
        return Err(Error::Format("unexpected extra records".into()));
    }
    Ok(Checkpoint { model, meta })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(ck))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
