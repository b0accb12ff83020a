//! Toy decoder-only transformer: learned positions, pre-norm RMSNorm,
//! causal multi-head attention and a SwiGLU MLP.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::aquant::{act_quantize_train, ActQuantParams, ActQuantVars};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::packed::{packed_linear, PackedLayer};
use crate::tensor::Tensor;
use crate::wquant::{QuantLinear, QuantTrainables, QuantVars};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub rms_norm_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            d_ff: 192,
            max_seq_len: 128,
            rms_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            self.vocab_size,
            self.d_model,
            self.n_heads,
            self.n_layers,
            self.d_ff,
            self.max_seq_len,
        ];
        if extents.contains(&0) {
            return Err(Error::contract("model extents must be at least 1"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::contract(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if !(self.rms_norm_eps > 0.0) {
            return Err(Error::contract("rms_norm_eps must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `(out, in)` extents of each projection.
    pub fn linear_shape(&self, kind: LinearKind) -> (usize, usize) {
        let (d, f) = (self.d_model, self.d_ff);
        match kind {
            LinearKind::Q | LinearKind::K | LinearKind::V | LinearKind::O => (d, d),
            LinearKind::Up | LinearKind::Gate => (f, d),
            LinearKind::Down => (d, f),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LinearKind {
    Q,
    K,
    V,
    O,
    Up,
    Gate,
    Down,
}

impl LinearKind {
    pub const ALL: [LinearKind; 7] = [
        LinearKind::Q,
        LinearKind::K,
        LinearKind::V,
        LinearKind::O,
        LinearKind::Up,
        LinearKind::Gate,
        LinearKind::Down,
    ];

    pub fn name(self) -> &'static str {
        ["q", "k", "v", "o", "up", "gate", "down"][self as usize]
    }

    /// Activation site feeding this projection.
    pub fn input_site(self) -> ActSite {
        match self {
            LinearKind::Q | LinearKind::K | LinearKind::V => ActSite::AttnIn,
            LinearKind::O => ActSite::OIn,
            LinearKind::Up | LinearKind::Gate => ActSite::MlpIn,
            LinearKind::Down => ActSite::DownIn,
        }
    }
}

/// Places where activations are quantized: linear inputs and the K/V cache.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ActSite {
    AttnIn,
    OIn,
    MlpIn,
    DownIn,
    Key,
    Value,
}

impl ActSite {
    pub const ALL: [ActSite; 6] = [
        ActSite::AttnIn,
        ActSite::OIn,
        ActSite::MlpIn,
        ActSite::DownIn,
        ActSite::Key,
        ActSite::Value,
    ];

    pub fn name(self) -> &'static str {
        ["attn_in", "o_in", "mlp_in", "down_in", "key", "value"][self as usize]
    }

    pub fn is_kv(self) -> bool {
        matches!(self, ActSite::Key | ActSite::Value)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LinearSlot {
    Full(Tensor),
    Relaxed(QuantLinear),
    Packed(Box<PackedLayer>),
}

impl LinearSlot {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            LinearSlot::Full(w) => w.dims2(),
            LinearSlot::Relaxed(q) => (q.rows(), q.cols()),
            LinearSlot::Packed(p) => (p.rows(), p.cols()),
        }
    }

    /// Dense weights as the forward pass sees them.
    pub fn dense(&self) -> Result<Tensor> {
        match self {
            LinearSlot::Full(w) => Ok(w.clone()),
            LinearSlot::Relaxed(q) => q.dequantize(true),
            LinearSlot::Packed(p) => Ok(p.dequantize()),
        }
    }

    pub fn quant(&self) -> Option<&QuantLinear> {
        match self {
            LinearSlot::Relaxed(q) => Some(q),
            _ => None,
        }
    }

    pub fn quant_mut(&mut self) -> Option<&mut QuantLinear> {
        match self {
            LinearSlot::Relaxed(q) => Some(q),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub attn_norm: Tensor,
    pub mlp_norm: Tensor,
    /// Indexed by [`LinearKind`].
    pub linears: [LinearSlot; 7],
    /// Indexed by [`ActSite`]; `None` keeps the site in full precision.
    pub act: [Option<ActQuantParams>; 6],
}

impl DecoderLayer {
    pub fn linear(&self, kind: LinearKind) -> &LinearSlot {
        &self.linears[kind as usize]
    }

    pub fn linear_mut(&mut self, kind: LinearKind) -> &mut LinearSlot {
        &mut self.linears[kind as usize]
    }

    pub fn site(&self, site: ActSite) -> Option<&ActQuantParams> {
        self.act[site as usize].as_ref()
    }

    pub fn has_act_quant(&self) -> bool {
        self.act.iter().any(Option::is_some)
    }
}

/// What a placed layer exposes as trainable leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct LayerTrain {
    /// Full-precision projection weights and norm gains.
    pub full: bool,
    pub quant: QuantTrainables,
    pub act_clips: bool,
    pub act_knees: bool,
}

impl LayerTrain {
    pub const FROZEN: Self = Self {
        full: false,
        quant: QuantTrainables::NONE,
        act_clips: false,
        act_knees: false,
    };
}

#[derive(Clone, Copy, Debug)]
pub enum SlotVars {
    Dense(Var),
    Quant(QuantVars),
    Packed,
}

/// A decoder layer's parameters as tape nodes.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub attn_norm: Var,
    pub mlp_norm: Var,
    pub linears: [SlotVars; 7],
    pub act: [Option<ActQuantVars>; 6],
}

impl LayerVars {
    pub fn place(tape: &mut Tape, layer: &DecoderLayer, train: LayerTrain) -> Result<Self> {
        let put = |tape: &mut Tape, t: &Tensor, trainable: bool| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let attn_norm = put(tape, &layer.attn_norm, train.full);
        let mlp_norm = put(tape, &layer.mlp_norm, train.full);
        let mut linears = [SlotVars::Packed; 7];
        for (slot, vars) in layer.linears.iter().zip(linears.iter_mut()) {
            *vars = match slot {
                LinearSlot::Full(w) => SlotVars::Dense(put(tape, w, train.full)),
                LinearSlot::Relaxed(q) => SlotVars::Quant(q.place(tape, train.quant)?),
                LinearSlot::Packed(_) => SlotVars::Packed,
            };
        }
        let act = std::array::from_fn(|i| {
            layer.act[i]
                .as_ref()
                .map(|p| p.place(tape, train.act_clips, train.act_knees))
        });
        Ok(Self {
            attn_norm,
            mlp_norm,
            linears,
            act,
        })
    }
}

/// Raw values arriving at each activation site during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct SiteRecord {
    pub values: [Option<Tensor>; 6],
}

impl SiteRecord {
    pub fn get(&self, site: ActSite) -> Option<&Tensor> {
        self.values[site as usize].as_ref()
    }
}

/// Keys and values of one layer, `[positions × d_model]` with heads in column blocks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerCache {
    pub k: Option<Tensor>,
    pub v: Option<Tensor>,
}

impl LayerCache {
    pub fn len(&self) -> usize {
        self.k.as_ref().map_or(0, |k| k.shape()[0])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn append(&mut self, k: &Tensor, v: &Tensor) -> Result<()> {
        let cat = |old: &Option<Tensor>, new: &Tensor| -> Result<Tensor> {
            match old {
                None => Ok(new.clone()),
                Some(o) => {
                    let mut data = o.data().to_vec();
                    data.extend_from_slice(new.data());
                    Tensor::new(&[o.shape()[0] + new.shape()[0], new.shape()[1]], data)
                }
            }
        };
        self.k = Some(cat(&self.k, k)?);
        self.v = Some(cat(&self.v, v)?);
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvCache {
    pub layers: Vec<LayerCache>,
}

impl KvCache {
    pub fn new(n_layers: usize) -> Self {
        Self {
            layers: vec![LayerCache::default(); n_layers],
        }
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, LayerCache::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn apply_site(
    tape: &mut Tape,
    layer: &DecoderLayer,
    vars: &LayerVars,
    site: ActSite,
    x: Var,
    record: &mut Option<&mut SiteRecord>,
) -> Result<Var> {
    if let Some(r) = record.as_deref_mut() {
        r.values[site as usize] = Some(tape.value(x).clone());
    }
    match (&layer.act[site as usize], &vars.act[site as usize]) {
        (Some(p), Some(v)) => act_quantize_train(tape, x, p, v),
        _ => Ok(x),
    }
}

fn apply_linear(
    tape: &mut Tape,
    layer: &DecoderLayer,
    vars: &LayerVars,
    kind: LinearKind,
    raw: Var,
    quantized: Var,
) -> Result<Var> {
    match (&vars.linears[kind as usize], layer.linear(kind)) {
        (SlotVars::Dense(w), _) => tape.linear(quantized, *w),
        (SlotVars::Quant(q), _) => {
            let w = q.dequantize(tape)?;
            tape.linear(quantized, w)
        }
        (SlotVars::Packed, LinearSlot::Packed(p)) => match layer.site(kind.input_site()) {
            Some(params) => {
                let y = packed_linear(tape.value(raw), params, p)?;
                Ok(tape.constant(y))
            }
            None => {
                let w = tape.constant(p.dequantize());
                tape.linear(quantized, w)
            }
        },
        _ => Err(Error::contract("placed slot differs from layer slot")),
    }
}

/// One decoder layer over `x: [s × d]`, attending to cached positions first.
pub fn layer_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    layer: &DecoderLayer,
    vars: &LayerVars,
    x: Var,
    cache: Option<&mut LayerCache>,
    mut record: Option<&mut SiteRecord>,
) -> Result<Var> {
    let (s, d) = match tape.value(x).shape() {
        [s, d] => (*s, *d),
        sh => return Err(Error::shape("decoder", format!("{sh:?} is not 2-D"))),
    };
    if d != cfg.d_model {
        return Err(Error::shape("decoder", format!("width {d} != d_model {}", cfg.d_model)));
    }
    let past = cache.as_ref().map_or(0, |c| c.len());
    if past + s > cfg.max_seq_len {
        return Err(Error::shape(
            "decoder",
            format!("sequence {} exceeds max_seq_len {}", past + s, cfg.max_seq_len),
        ));
    }
    let eps = cfg.rms_norm_eps;
    let h = tape.rms_norm(x, vars.attn_norm, eps)?;
    let hq = apply_site(tape, layer, vars, ActSite::AttnIn, h, &mut record)?;
    let q = apply_linear(tape, layer, vars, LinearKind::Q, h, hq)?;
    let k = apply_linear(tape, layer, vars, LinearKind::K, h, hq)?;
    let v = apply_linear(tape, layer, vars, LinearKind::V, h, hq)?;
    let k = apply_site(tape, layer, vars, ActSite::Key, k, &mut record)?;
    let v = apply_site(tape, layer, vars, ActSite::Value, v, &mut record)?;

    let (k_all, v_all) = match cache {
        Some(c) => {
            let (kn, vn) = (tape.value(k).clone(), tape.value(v).clone());
            let joined = match (&c.k, &c.v) {
                (Some(pk), Some(pv)) => {
                    let pk = tape.constant(pk.clone());
                    let pv = tape.constant(pv.clone());
                    (tape.concat(&[pk, k], 0)?, tape.concat(&[pv, v], 0)?)
                }
                _ => (k, v),
            };
            c.append(&kn, &vn)?;
            joined
        }
        None => (k, v),
    };

    let hd = cfg.head_dim();
    let inv_sqrt = 1.0 / (hd as f32).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for head in 0..cfg.n_heads {
        let qh = tape.slice(q, 1, head * hd, hd)?;
        let kh = tape.slice(k_all, 1, head * hd, hd)?;
        let vh = tape.slice(v_all, 1, head * hd, hd)?;
        let scores = tape.linear(qh, kh)?;
        let scores = tape.scale(scores, inv_sqrt)?;
        let probs = tape.causal_softmax(scores, past)?;
        heads.push(tape.matmul(probs, vh)?);
    }
    let attn = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat(&heads, 1)?
    };
    let aq = apply_site(tape, layer, vars, ActSite::OIn, attn, &mut record)?;
    let o = apply_linear(tape, layer, vars, LinearKind::O, attn, aq)?;
    let x1 = tape.add(x, o)?;

    let h2 = tape.rms_norm(x1, vars.mlp_norm, eps)?;
    let h2q = apply_site(tape, layer, vars, ActSite::MlpIn, h2, &mut record)?;
    let up = apply_linear(tape, layer, vars, LinearKind::Up, h2, h2q)?;
    let gate = apply_linear(tape, layer, vars, LinearKind::Gate, h2, h2q)?;
    let act = tape.silu(gate)?;
    let mid = tape.mul(act, up)?;
    let mq = apply_site(tape, layer, vars, ActSite::DownIn, mid, &mut record)?;
    let down = apply_linear(tape, layer, vars, LinearKind::Down, mid, mq)?;
    tape.add(x1, down)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: Tensor,
    pub pos: Tensor,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: Tensor,
    pub lm_head: Tensor,
}

/// Placed embedding and head parameters.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embed: Var,
    pub pos: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
    pub lm_head: Var,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (v, d) = (config.vocab_size, config.d_model);
        let resid = 1.0 / (2.0 * config.n_layers as f32).sqrt();
        let embed = Tensor::randn(&[v, d], 0.3, rng);
        let pos = Tensor::randn(&[config.max_seq_len, d], 0.1, rng);
        let layers = (0..config.n_layers)
            .map(|_| {
                let linears = LinearKind::ALL.map(|kind| {
                    let (n, m) = config.linear_shape(kind);
                    let mut std = 1.0 / (m as f32).sqrt();
                    if matches!(kind, LinearKind::O | LinearKind::Down) {
                        std *= resid;
                    }
                    LinearSlot::Full(Tensor::randn(&[n, m], std, rng))
                });
                DecoderLayer {
                    attn_norm: Tensor::full(&[d], 1.0),
                    mlp_norm: Tensor::full(&[d], 1.0),
                    linears,
                    act: Default::default(),
                }
            })
            .collect();
        let lm_head = Tensor::randn(&[v, d], 1.0 / (d as f32).sqrt(), rng);
        Ok(Self {
            config,
            embed,
            pos,
            layers,
            final_norm: Tensor::full(&[d], 1.0),
            lm_head,
        })
    }

    pub fn place(&self, tape: &mut Tape, train: &[LayerTrain], train_outer: bool) -> Result<ModelVars> {
        let put = |tape: &mut Tape, t: &Tensor| {
            if train_outer {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let embed = put(tape, &self.embed);
        let pos = put(tape, &self.pos);
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let t = train.get(i).copied().unwrap_or(LayerTrain::FROZEN);
                LayerVars::place(tape, l, t)
            })
            .collect::<Result<Vec<_>>>()?;
        let final_norm = put(tape, &self.final_norm);
        let lm_head = put(tape, &self.lm_head);
        Ok(ModelVars {
            embed,
            pos,
            layers,
            final_norm,
            lm_head,
        })
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::shape("model", "no tokens"));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::shape(
                "model",
                format!("token {bad} outside vocab {}", self.config.vocab_size),
            ));
        }
        Ok(())
    }

    /// Token plus position embeddings for positions `offset..offset+len`.
    pub fn embed_tokens(&self, tape: &mut Tape, vars: &ModelVars, ids: &[usize], offset: usize) -> Result<Var> {
        self.check_ids(ids)?;
        if offset + ids.len() > self.config.max_seq_len {
            return Err(Error::shape(
                "model",
                format!(
                    "sequence {} exceeds max_seq_len {}",
                    offset + ids.len(),
                    self.config.max_seq_len
                ),
            ));
        }
        let tok = tape.embedding(vars.embed, ids)?;
        let positions: Vec<usize> = (offset..offset + ids.len()).collect();
        let pos = tape.embedding(vars.pos, &positions)?;
        tape.add(tok, pos)
    }

    pub fn head(&self, tape: &mut Tape, vars: &ModelVars, x: Var) -> Result<Var> {
        let h = tape.rms_norm(x, vars.final_norm, self.config.rms_norm_eps)?;
        tape.linear(h, vars.lm_head)
    }

    /// Logits `[s × vocab]` on the tape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        ids: &[usize],
        mut cache: Option<&mut KvCache>,
    ) -> Result<Var> {
        let offset = cache.as_ref().map_or(0, |c| c.len());
        let mut x = self.embed_tokens(tape, vars, ids, offset)?;
        for (i, (layer, lv)) in self.layers.iter().zip(&vars.layers).enumerate() {
            let lc = cache.as_deref_mut().map(|c| &mut c.layers[i]);
            x = layer_forward(tape, &self.config, layer, lv, x, lc, None)?;
        }
        self.head(tape, vars, x)
    }

    pub fn logits(&self, ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.place(&mut tape, &[], false)?;
        let y = self.forward(&mut tape, &vars, ids, None)?;
        Ok(tape.value(y).clone())
    }

    /// Logits for new tokens, extending `cache`.
    pub fn logits_cached(&self, ids: &[usize], cache: &mut KvCache) -> Result<Tensor> {
        if cache.layers.len() != self.layers.len() {
            return Err(Error::shape("model", "cache has the wrong number of layers"));
        }
        let mut tape = Tape::new();
        let vars = self.place(&mut tape, &[], false)?;
        let y = self.forward(&mut tape, &vars, ids, Some(cache))?;
        Ok(tape.value(y).clone())
    }

    /// Input to every layer followed by the last layer's output.
    pub fn hidden_states(&self, ids: &[usize]) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let vars = self.place(&mut tape, &[], false)?;
        let mut x = self.embed_tokens(&mut tape, &vars, ids, 0)?;
        let mut out = vec![tape.value(x).clone()];
        for (layer, lv) in self.layers.iter().zip(&vars.layers) {
            x = layer_forward(&mut tape, &self.config, layer, lv, x, None, None)?;
            out.push(tape.value(x).clone());
        }
        Ok(out)
    }

    /// Runs layer `index` alone on `x`, optionally recording its site inputs.
    pub fn layer_output(&self, index: usize, x: &Tensor, record: Option<&mut SiteRecord>) -> Result<Tensor> {
        let layer = self
            .layers
            .get(index)
            .ok_or_else(|| Error::shape("model", format!("no layer {index}")))?;
        let mut tape = Tape::new();
        let lv = LayerVars::place(&mut tape, layer, LayerTrain::FROZEN)?;
        let xv = tape.constant(x.clone());
        let y = layer_forward(&mut tape, &self.config, layer, &lv, xv, None, record)?;
        Ok(tape.value(y).clone())
    }

    /// Parameters kept in full precision regardless of quantization.
    pub fn unquantized_param_count(&self) -> usize {
        let norms: usize = self
            .layers
            .iter()
            .map(|l| l.attn_norm.len() + l.mlp_norm.len())
            .sum();
        self.embed.len() + self.pos.len() + self.final_norm.len() + self.lm_head.len() + norms
    }
}

/// Anything that maps a token window to next-token logits.
pub trait LogitModel: Sync {
    fn vocab_size(&self) -> usize;
    fn max_window(&self) -> usize;
    fn window_logits(&self, ids: &[usize]) -> Result<Tensor>;
}

impl LogitModel for Model {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_window(&self) -> usize {
        self.config.max_seq_len
    }

    fn window_logits(&self, ids: &[usize]) -> Result<Tensor> {
        self.logits(ids)
    }
}

/// Summed next-token negative log-likelihood, in f64.
pub fn nll_sum(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let (s, v) = logits.dims2();
    if targets.len() != s {
        return Err(Error::shape("nll", "one target per logit row"));
    }
    let mut total = 0.0f64;
    for (row, &t) in logits.data().chunks(v).zip(targets) {
        if t >= v {
            return Err(Error::shape("nll", "target outside vocab"));
        }
        let mx = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let lse = row.iter().map(|&z| (z as f64 - mx).exp()).sum::<f64>().ln() + mx;
        total += lse - row[t] as f64;
    }
    Ok(total)
}

/// `exp(mean NLL)` over non-overlapping windows of `window` predictions.
pub fn perplexity(model: &impl LogitModel, corpus: &[usize], window: usize) -> Result<f64> {
    if corpus.len() < 2 {
        return Err(Error::contract("perplexity needs at least two tokens"));
    }
    let window = window.clamp(1, model.max_window());
    let starts: Vec<usize> = (0..corpus.len() - 1).step_by(window).collect();
    let parts: Vec<Result<(f64, usize)>> = starts
        .par_iter()
        .map(|&st| {
            let end = (st + window).min(corpus.len() - 1);
            let logits = model.window_logits(&corpus[st..end])?;
            Ok((nll_sum(&logits, &corpus[st + 1..end + 1])?, end - st))
        })
        .collect();
    let (mut nll, mut count) = (0.0f64, 0usize);
    for p in parts {
        let (a, b) = p?;
        nll += a;
        count += b;
    }
    let ppl = (nll / count as f64).exp();
    if !ppl.is_finite() {
        return Err(Error::numeric("perplexity", "non-finite perplexity"));
    }
    Ok(ppl)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 4,
            seq_len: 128,
            lr: 3e-3,
            seed: 0,
        }
    }
}

fn full_params_mut(model: &mut Model) -> Result<Vec<&mut Tensor>> {
    let mut out: Vec<&mut Tensor> = vec![&mut model.embed, &mut model.pos];
    for layer in &mut model.layers {
        out.push(&mut layer.attn_norm);
        out.push(&mut layer.mlp_norm);
        for slot in &mut layer.linears {
            match slot {
                LinearSlot::Full(w) => out.push(w),
                _ => return Err(Error::contract("pretraining needs full-precision slots")),
            }
        }
    }
    out.push(&mut model.final_norm);
    out.push(&mut model.lm_head);
    Ok(out)
}

fn full_vars(vars: &ModelVars) -> Vec<Var> {
    let mut out = vec![vars.embed, vars.pos];
    for l in &vars.layers {
        out.push(l.attn_norm);
        out.push(l.mlp_norm);
        for s in &l.linears {
            if let SlotVars::Dense(v) = s {
                out.push(*v);
            }
        }
    }
    out.push(vars.final_norm);
    out.push(vars.lm_head);
    out
}

/// Trains every parameter with Adam on random windows; returns per-step mean loss.
pub fn pretrain(model: &mut Model, corpus: &[usize], cfg: &PretrainConfig) -> Result<Vec<f32>> {
    let seq = cfg.seq_len.min(model.config.max_seq_len);
    if corpus.len() < seq + 1 {
        return Err(Error::contract("corpus shorter than one training window"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let adam = AdamConfig::default();
    let mut states: Vec<AdamState> = full_params_mut(model)?
        .iter()
        .map(|t| AdamState::new(t.len()))
        .collect();
    let train = vec![
        LayerTrain {
            full: true,
            ..LayerTrain::FROZEN
        };
        model.layers.len()
    ];
    let starts: Vec<usize> = (0..corpus.len() - seq).collect();
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let vars = model.place(&mut tape, &train, true)?;
        let mut total: Option<Var> = None;
        for &st in starts.choose_multiple(&mut rng, cfg.batch) {
            let logits = model.forward(&mut tape, &vars, &corpus[st..st + seq], None)?;
            let loss = tape.cross_entropy(logits, &corpus[st + 1..st + seq + 1])?;
            total = Some(match total {
                None => loss,
                Some(t) => tape.add(t, loss)?,
            });
        }
        let total = total.ok_or_else(|| Error::contract("batch size must be positive"))?;
        let mean = tape.scale(total, 1.0 / cfg.batch as f32)?;
        tape.backward(mean)?;
        losses.push(tape.value(mean).item());
        let var_list = full_vars(&vars);
        for ((p, st), v) in full_params_mut(model)?.into_iter().zip(&mut states).zip(var_list) {
            if let Some(g) = tape.grad(v) {
                st.step(&adam, p, &g, cfg.lr)?;
            }
        }
    }
    Ok(losses)
}
