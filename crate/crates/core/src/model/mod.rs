//! Audio-to-text transformer: a frozen frame encoder, a learnable
//! projection into the text width, and a frozen pre-norm decoder whose
//! blocks each gain a learnable cross-attention sublayer right after
//! self-attention.

mod checkpoint;
mod pretrain;

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, World, BOS, EOS};
use crate::decode::LanguageModel;
use crate::numerics::{argmax, log_softmax, Graph, NumericsError, Segment, Tensor, Var, LAYER_NORM_EPS};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use pretrain::{pretrain_frozen_parts, PretrainConfig, PretrainReport};

/// Amplitude of the sinusoidal frame positions added before the encoder.
const POSITION_SCALE: f64 = 0.1;
const INIT_STD: f64 = 0.02;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("config error in `{field}`: {message}")]
    Config { field: &'static str, message: String },
    #[error("length error: {0}")]
    Length(String),
    #[error("incompatible checkpoint, differing: {}", .0.join(", "))]
    Compatibility(Vec<String>),
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Encoder width; also the width of the audio features.
    pub d_audio: usize,
    pub d_text: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_audio_frames: usize,
    /// Longest decoder input, start symbol included.
    pub max_text_len: usize,
    pub dropout: f64,
    pub encoder_blocks: usize,
    pub encoder_heads: usize,
    pub encoder_positions: bool,
    /// MLP hidden width as a multiple of the block width.
    pub ff_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_audio: 48,
            d_text: 64,
            n_blocks: 4,
            n_heads: 4,
            vocab_size: World::default().vocab.len(),
            max_audio_frames: 128,
            max_text_len: 24,
            dropout: 0.1,
            encoder_blocks: 2,
            encoder_heads: 4,
            encoder_positions: true,
            ff_mult: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("d_audio", self.d_audio),
            ("d_text", self.d_text),
            ("n_blocks", self.n_blocks),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_audio_frames", self.max_audio_frames),
            ("max_text_len", self.max_text_len),
            ("encoder_heads", self.encoder_heads),
            ("ff_mult", self.ff_mult),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(ModelError::Config {
                    field,
                    message: "must be positive".into(),
                });
            }
        }
        if !self.d_text.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config {
                field: "n_heads",
                message: format!("d_text {} not divisible by {}", self.d_text, self.n_heads),
            });
        }
        if !self.d_audio.is_multiple_of(self.encoder_heads) {
            return Err(ModelError::Config {
                field: "encoder_heads",
                message: format!("d_audio {} not divisible by {}", self.d_audio, self.encoder_heads),
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config {
                field: "dropout",
                message: format!("{} outside [0, 1)", self.dropout),
            });
        }
        if self.vocab_size <= EOS {
            return Err(ModelError::Config {
                field: "vocab_size",
                message: "vocabulary must hold the special tokens".into(),
            });
        }
        Ok(())
    }

    /// One `key=value` line per field, in declaration order.
    pub fn to_canonical(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.fields() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    fn fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("d_audio", self.d_audio.to_string()),
            ("d_text", self.d_text.to_string()),
            ("n_blocks", self.n_blocks.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("max_audio_frames", self.max_audio_frames.to_string()),
            ("max_text_len", self.max_text_len.to_string()),
            ("dropout", self.dropout.to_string()),
            ("encoder_blocks", self.encoder_blocks.to_string()),
            ("encoder_heads", self.encoder_heads.to_string()),
            ("encoder_positions", self.encoder_positions.to_string()),
            ("ff_mult", self.ff_mult.to_string()),
        ]
    }

    pub fn from_canonical(text: &str) -> Result<Self, ModelError> {
        let map: HashMap<&str, &str> = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .collect();
        let get = |k: &'static str| {
            map.get(k)
                .copied()
                .ok_or_else(|| ModelError::Format(format!("config field {k} missing")))
        };
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, ModelError> {
            v.parse()
                .map_err(|_| ModelError::Format(format!("config field {k}: bad value {v}")))
        }
        Ok(Self {
            d_audio: num("d_audio", get("d_audio")?)?,
            d_text: num("d_text", get("d_text")?)?,
            n_blocks: num("n_blocks", get("n_blocks")?)?,
            n_heads: num("n_heads", get("n_heads")?)?,
            vocab_size: num("vocab_size", get("vocab_size")?)?,
            max_audio_frames: num("max_audio_frames", get("max_audio_frames")?)?,
            max_text_len: num("max_text_len", get("max_text_len")?)?,
            dropout: num("dropout", get("dropout")?)?,
            encoder_blocks: num("encoder_blocks", get("encoder_blocks")?)?,
            encoder_heads: num("encoder_heads", get("encoder_heads")?)?,
            encoder_positions: num("encoder_positions", get("encoder_positions")?)?,
            ff_mult: num("ff_mult", get("ff_mult")?)?,
        })
    }

    /// Names of fields whose values differ; dropout is a training knob and
    /// is ignored.
    pub fn differing_fields(&self, other: &Self) -> Vec<String> {
        self.fields()
            .into_iter()
            .zip(other.fields())
            .filter(|((k, a), (_, b))| *k != "dropout" && a != b)
            .map(|((k, _), _)| k.to_string())
            .collect()
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    Decoder,
    /// Projection and cross-attention: the only learnable group.
    Adapter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
}

impl Parameter {
    pub fn learnable(&self) -> bool {
        self.group == ParamGroup::Adapter
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParameterPartition {
    pub frozen: Vec<String>,
    pub learnable: Vec<String>,
    pub total: usize,
    pub learnable_count: usize,
    pub fraction: f64,
}

/// Learnable parameters of the adapter at the given widths: per block four
/// square projections with biases plus one affine layer norm, and the
/// audio-to-text projection.
pub fn adapter_parameter_count(d_audio: usize, d_text: usize, n_blocks: usize) -> usize {
    n_blocks * (4 * (d_text * d_text + d_text) + 2 * d_text) + d_audio * d_text + d_text
}

#[derive(Clone, Copy, Debug)]
struct AttnIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Clone, Copy, Debug)]
struct MlpIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Copy, Debug)]
struct EncBlock {
    ln1: (usize, usize),
    attn: AttnIdx,
    ln2: (usize, usize),
    mlp: MlpIdx,
}

#[derive(Clone, Copy, Debug)]
struct DecBlock {
    ln1: (usize, usize),
    self_attn: AttnIdx,
    ln_cross: (usize, usize),
    cross: AttnIdx,
    ln2: (usize, usize),
    mlp: MlpIdx,
}

#[derive(Clone, Debug)]
struct Layout {
    enc: Vec<EncBlock>,
    enc_ln: (usize, usize),
    proj_w: usize,
    proj_b: usize,
    tok: usize,
    pos: usize,
    dec: Vec<DecBlock>,
    ln_f: (usize, usize),
}

enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

struct Builder {
    params: Vec<Parameter>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init, group: ParamGroup) -> usize {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Normal(std) => {
                let normal = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| normal.sample(&mut self.rng)).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        let value = Tensor::new(shape, data).expect("positive dims");
        self.params.push(Parameter { name, value, group });
        self.params.len() - 1
    }

    fn ln(&mut self, prefix: &str, d: usize, group: ParamGroup) -> (usize, usize) {
        (
            self.add(format!("{prefix}.gain"), &[d], Init::Ones, group),
            self.add(format!("{prefix}.bias"), &[d], Init::Zeros, group),
        )
    }

    fn attn(&mut self, prefix: &str, d: usize, group: ParamGroup, zero_out: bool) -> AttnIdx {
        let lin = |b: &mut Self, n: &str, zero: bool| {
            let init = if zero { Init::Zeros } else { Init::Normal(INIT_STD) };
            (
                b.add(format!("{prefix}.{n}.weight"), &[d, d], init, group),
                b.add(format!("{prefix}.{n}.bias"), &[d], Init::Zeros, group),
            )
        };
        let (wq, bq) = lin(self, "q", false);
        let (wk, bk) = lin(self, "k", false);
        let (wv, bv) = lin(self, "v", false);
        let (wo, bo) = lin(self, "out", zero_out);
        AttnIdx {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn mlp(&mut self, prefix: &str, d: usize, hidden: usize, group: ParamGroup) -> MlpIdx {
        MlpIdx {
            w1: self.add(format!("{prefix}.fc.weight"), &[d, hidden], Init::Normal(INIT_STD), group),
            b1: self.add(format!("{prefix}.fc.bias"), &[hidden], Init::Zeros, group),
            w2: self.add(format!("{prefix}.proj.weight"), &[hidden, d], Init::Normal(INIT_STD), group),
            b2: self.add(format!("{prefix}.proj.bias"), &[d], Init::Zeros, group),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AudioToTextModel {
    config: ModelConfig,
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
    layout: Layout,
}

/// Deterministic initialization; cross-attention output projections start
/// at zero so the untrained model reproduces the decoder alone.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<AudioToTextModel, ModelError> {
    config.validate()?;
    let mut b = Builder {
        params: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let (da, dt) = (config.d_audio, config.d_text);
    let enc = (0..config.encoder_blocks)
        .map(|i| {
            let p = format!("encoder.blocks.{i}");
            EncBlock {
                ln1: b.ln(&format!("{p}.ln1"), da, ParamGroup::Encoder),
                attn: b.attn(&format!("{p}.attn"), da, ParamGroup::Encoder, false),
                ln2: b.ln(&format!("{p}.ln2"), da, ParamGroup::Encoder),
                mlp: b.mlp(&format!("{p}.mlp"), da, da * config.ff_mult, ParamGroup::Encoder),
            }
        })
        .collect();
    let enc_ln = b.ln("encoder.ln_f", da, ParamGroup::Encoder);
    let proj_w = b.add(
        "projection.weight".into(),
        &[da, dt],
        Init::Normal(1.0 / (da as f64).sqrt()),
        ParamGroup::Adapter,
    );
    let proj_b = b.add("projection.bias".into(), &[dt], Init::Zeros, ParamGroup::Adapter);
    let tok = b.add(
        "decoder.token_embedding".into(),
        &[config.vocab_size, dt],
        Init::Normal(INIT_STD),
        ParamGroup::Decoder,
    );
    let pos = b.add(
        "decoder.position_embedding".into(),
        &[config.max_text_len, dt],
        Init::Normal(INIT_STD / 2.0),
        ParamGroup::Decoder,
    );
    let dec = (0..config.n_blocks)
        .map(|i| {
            let p = format!("decoder.blocks.{i}");
            DecBlock {
                ln1: b.ln(&format!("{p}.ln1"), dt, ParamGroup::Decoder),
                self_attn: b.attn(&format!("{p}.self_attn"), dt, ParamGroup::Decoder, false),
                ln_cross: b.ln(&format!("{p}.cross_ln"), dt, ParamGroup::Adapter),
                cross: b.attn(&format!("{p}.cross_attn"), dt, ParamGroup::Adapter, true),
                ln2: b.ln(&format!("{p}.ln2"), dt, ParamGroup::Decoder),
                mlp: b.mlp(&format!("{p}.mlp"), dt, dt * config.ff_mult, ParamGroup::Decoder),
            }
        })
        .collect();
    let ln_f = b.ln("decoder.ln_f", dt, ParamGroup::Decoder);
    let index = b
        .params
        .iter()
        .enumerate()
        .map(|(i, p)| (p.name.clone(), i))
        .collect();
    Ok(AudioToTextModel {
        config: config.clone(),
        params: b.params,
        index,
        layout: Layout {
            enc,
            enc_ln,
            proj_w,
            proj_b,
            tok,
            pos,
            dec,
            ln_f,
        },
    })
}

/// A training example: cached encoder output and the caption it should
/// produce (no start or end symbols).
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub encoded: &'a Tensor,
    pub target: &'a [TokenId],
}

/// Graph-side view of the model for one forward pass.
pub(crate) struct Pass<'m> {
    model: &'m AudioToTextModel,
    vars: Vec<Option<Var>>,
    trainable: Option<ParamGroup>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'m> Pass<'m> {
    pub(crate) fn new(
        model: &'m AudioToTextModel,
        trainable: Option<ParamGroup>,
        dropout_seed: Option<u64>,
    ) -> Self {
        let p = model.config.dropout;
        Self {
            model,
            vars: vec![None; model.params.len()],
            trainable,
            dropout: dropout_seed
                .filter(|_| p > 0.0)
                .map(|s| (p, ChaCha8Rng::seed_from_u64(s))),
        }
    }

    fn p(&mut self, g: &mut Graph, idx: usize) -> Var {
        if let Some(v) = self.vars[idx] {
            return v;
        }
        let param = &self.model.params[idx];
        let v = g.leaf_with(&param.value, Some(param.group) == self.trainable);
        self.vars[idx] = Some(v);
        v
    }

    /// `(parameter index, leaf)` for every tracked parameter touched so far.
    pub(crate) fn tracked(&self) -> Vec<(usize, Var)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                v.filter(|_| Some(self.model.params[i].group) == self.trainable)
                    .map(|v| (i, v))
            })
            .collect()
    }

    fn linear(&mut self, g: &mut Graph, x: Var, w: usize, b: usize) -> Result<Var, ModelError> {
        let (w, b) = (self.p(g, w), self.p(g, b));
        let y = g.matmul(x, w)?;
        Ok(g.add_row(y, b)?)
    }

    fn ln(&mut self, g: &mut Graph, x: Var, (gain, bias): (usize, usize)) -> Result<Var, ModelError> {
        let (gain, bias) = (self.p(g, gain), self.p(g, bias));
        Ok(g.layer_norm(x, Some(gain), Some(bias), LAYER_NORM_EPS)?)
    }

    fn drop(&mut self, g: &mut Graph, x: Var) -> Result<Var, ModelError> {
        let Some((p, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 / (1.0 - *p);
        let mask: Vec<f64> = (0..g.value(x).len())
            .map(|_| if rng.random::<f64>() < *p { 0.0 } else { keep })
            .collect();
        Ok(g.mul_const(x, mask)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &mut self,
        g: &mut Graph,
        idx: AttnIdx,
        xq: Var,
        xkv: Var,
        heads: usize,
        segments: &[Segment],
        causal: bool,
    ) -> Result<Var, ModelError> {
        let q = self.linear(g, xq, idx.wq, idx.bq)?;
        let k = self.linear(g, xkv, idx.wk, idx.bk)?;
        let v = self.linear(g, xkv, idx.wv, idx.bv)?;
        let a = g.attention(q, k, v, heads, segments, causal)?;
        self.linear(g, a, idx.wo, idx.bo)
    }

    fn mlp(&mut self, g: &mut Graph, x: Var, idx: MlpIdx) -> Result<Var, ModelError> {
        let h = self.linear(g, x, idx.w1, idx.b1)?;
        let h = g.gelu(h);
        self.linear(g, h, idx.w2, idx.b2)
    }

    /// Encoder over row-stacked frame sequences of the given lengths.
    pub(crate) fn encoder(
        &mut self,
        g: &mut Graph,
        frames: Var,
        lengths: &[usize],
    ) -> Result<Var, ModelError> {
        let cfg = &self.model.config;
        let mut x = frames;
        if cfg.encoder_positions {
            let pe = positions(lengths, cfg.d_audio);
            let pe = g.constant(&[pe.len() / cfg.d_audio, cfg.d_audio], pe)?;
            x = g.add(x, pe)?;
        }
        let segments = stacked(lengths)
            .map(|(s, l)| Segment::square(s, l))
            .collect::<Vec<_>>();
        let heads = cfg.encoder_heads;
        for block in self.model.layout.enc.clone() {
            let h = self.ln(g, x, block.ln1)?;
            let a = self.attention(g, block.attn, h, h, heads, &segments, false)?;
            let a = self.drop(g, a)?;
            x = g.add(x, a)?;
            let h = self.ln(g, x, block.ln2)?;
            let m = self.mlp(g, h, block.mlp)?;
            let m = self.drop(g, m)?;
            x = g.add(x, m)?;
        }
        let ln = self.model.layout.enc_ln;
        self.ln(g, x, ln)
    }

    /// Projected, normalized audio memory used as cross-attention keys and values.
    pub(crate) fn memory(&mut self, g: &mut Graph, encoded: Var) -> Result<Var, ModelError> {
        let (w, b) = (self.model.layout.proj_w, self.model.layout.proj_b);
        let m = self.linear(g, encoded, w, b)?;
        Ok(g.layer_norm(m, None, None, LAYER_NORM_EPS)?)
    }

    /// Decoder logits for row-stacked inputs; `memory` pairs the stacked
    /// audio memory with each input's frame count.
    pub(crate) fn decoder(
        &mut self,
        g: &mut Graph,
        inputs: &[&[TokenId]],
        memory: Option<(Var, &[usize])>,
    ) -> Result<Var, ModelError> {
        let cfg = self.model.config.clone();
        let mut ids = Vec::new();
        let mut pos_ids = Vec::new();
        for inp in inputs {
            if inp.is_empty() || inp.len() > cfg.max_text_len {
                return Err(ModelError::Length(format!(
                    "decoder input of length {} (limit {})",
                    inp.len(),
                    cfg.max_text_len
                )));
            }
            ids.extend_from_slice(inp);
            pos_ids.extend(0..inp.len());
        }
        let lengths: Vec<usize> = inputs.iter().map(|i| i.len()).collect();
        let tok = self.p(g, self.model.layout.tok);
        let pos = self.p(g, self.model.layout.pos);
        let te = g.gather_rows(tok, &ids)?;
        let pe = g.gather_rows(pos, &pos_ids)?;
        let mut x = g.add(te, pe)?;
        let self_segments: Vec<Segment> = stacked(&lengths)
            .map(|(s, l)| Segment::square(s, l))
            .collect();
        let cross_segments: Option<Vec<Segment>> = memory.map(|(_, frames)| {
            stacked(&lengths)
                .zip(stacked(frames))
                .map(|((qs, ql), (ks, kl))| Segment {
                    q_start: qs,
                    q_len: ql,
                    k_start: ks,
                    k_len: kl,
                })
                .collect()
        });
        for block in self.model.layout.dec.clone() {
            let h = self.ln(g, x, block.ln1)?;
            let a = self.attention(g, block.self_attn, h, h, cfg.n_heads, &self_segments, true)?;
            let a = self.drop(g, a)?;
            x = g.add(x, a)?;
            if let (Some((mem, _)), Some(segs)) = (memory, cross_segments.as_ref()) {
                let h = self.ln(g, x, block.ln_cross)?;
                let c = self.attention(g, block.cross, h, mem, cfg.n_heads, segs, false)?;
                let c = self.drop(g, c)?;
                x = g.add(x, c)?;
            }
            let h = self.ln(g, x, block.ln2)?;
            let m = self.mlp(g, h, block.mlp)?;
            let m = self.drop(g, m)?;
            x = g.add(x, m)?;
        }
        let ln_f = self.model.layout.ln_f;
        let x = self.ln(g, x, ln_f)?;
        let head = g.transpose(tok)?;
        Ok(g.matmul(x, head)?)
    }
}

/// `(start, len)` of consecutive blocks.
fn stacked(lengths: &[usize]) -> impl Iterator<Item = (usize, usize)> + '_ {
    lengths.iter().scan(0, |start, &len| {
        let s = *start;
        *start += len;
        Some((s, len))
    })
}

fn positions(lengths: &[usize], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(lengths.iter().sum::<usize>() * d);
    for &len in lengths {
        for t in 0..len {
            for i in 0..d {
                let freq = 1.0 / 10000f64.powf((i / 2 * 2) as f64 / d as f64);
                let angle = t as f64 * freq;
                out.push(POSITION_SCALE * if i % 2 == 0 { angle.sin() } else { angle.cos() });
            }
        }
    }
    out
}

fn stack_rows(parts: &[&Tensor]) -> (Vec<f64>, Vec<usize>) {
    let mut data = Vec::new();
    let mut lengths = Vec::new();
    for t in parts {
        data.extend_from_slice(t.data());
        lengths.push(t.shape()[0]);
    }
    (data, lengths)
}

impl AudioToTextModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i].value)
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn set_dropout(&mut self, p: f64) -> Result<(), ModelError> {
        let mut c = self.config.clone();
        c.dropout = p;
        c.validate()?;
        self.config = c;
        Ok(())
    }

    pub fn partition(&self) -> ParameterPartition {
        let mut frozen = Vec::new();
        let mut learnable = Vec::new();
        let (mut total, mut lcount) = (0, 0);
        for p in &self.params {
            total += p.value.numel();
            if p.learnable() {
                lcount += p.value.numel();
                learnable.push(p.name.clone());
            } else {
                frozen.push(p.name.clone());
            }
        }
        ParameterPartition {
            frozen,
            learnable,
            total,
            learnable_count: lcount,
            fraction: lcount as f64 / total as f64,
        }
    }

    /// `(total, learnable, learnable / total)`.
    pub fn count_parameters(&self) -> (usize, usize, f64) {
        let p = self.partition();
        (p.total, p.learnable_count, p.fraction)
    }

    fn check_frames(&self, frames: &Tensor) -> Result<(), ModelError> {
        let (t, d) = frames.matrix_dims();
        if d != self.config.d_audio {
            return Err(ModelError::Length(format!(
                "audio width {d}, model expects {}",
                self.config.d_audio
            )));
        }
        if t > self.config.max_audio_frames {
            return Err(ModelError::Length(format!(
                "{t} audio frames exceed the limit of {}",
                self.config.max_audio_frames
            )));
        }
        Ok(())
    }

    /// Frozen encoder output for several frame matrices (`T_i × d_audio` each).
    pub fn encode_batch(&self, frames: &[&Tensor]) -> Result<Vec<Tensor>, ModelError> {
        for f in frames {
            self.check_frames(f)?;
        }
        if frames.is_empty() {
            return Ok(Vec::new());
        }
        let (data, lengths) = stack_rows(frames);
        let mut g = Graph::new();
        let x = g.constant(&[data.len() / self.config.d_audio, self.config.d_audio], data)?;
        let mut pass = Pass::new(self, None, None);
        let y = pass.encoder(&mut g, x, &lengths)?;
        let d = self.config.d_audio;
        let out = g.value(y);
        Ok(stacked(&lengths)
            .map(|(s, l)| Tensor::new(&[l, d], out[s * d..(s + l) * d].to_vec()).expect("rows"))
            .collect())
    }

    pub fn encode(&self, frames: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.encode_batch(&[frames])?.remove(0))
    }

    /// Logits `L × V` for decoder input `prefix` (start symbol included)
    /// conditioned on raw audio frames.
    pub fn forward(&self, frames: &Tensor, prefix: &[TokenId]) -> Result<Tensor, ModelError> {
        let encoded = self.encode(frames)?;
        self.forward_encoded(&encoded, prefix)
    }

    /// As [`forward`](Self::forward) but from a cached encoder output.
    pub fn forward_encoded(&self, encoded: &Tensor, prefix: &[TokenId]) -> Result<Tensor, ModelError> {
        self.check_frames(encoded)?;
        let mut g = Graph::new();
        let mem = g.leaf_with(encoded, false);
        let mut pass = Pass::new(self, None, None);
        let mem = pass.memory(&mut g, mem)?;
        let lens = [encoded.shape()[0]];
        let logits = pass.decoder(&mut g, &[prefix], Some((mem, &lens)))?;
        Ok(g.tensor(logits))
    }

    /// Logits of the frozen decoder alone, without any audio.
    pub fn lm_logits(&self, prefix: &[TokenId]) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let mut pass = Pass::new(self, None, None);
        let logits = pass.decoder(&mut g, &[prefix], None)?;
        Ok(g.tensor(logits))
    }

    /// Last-position logits for several (encoded audio, decoder input) pairs.
    pub fn next_logits_multi(
        &self,
        encoded: &[&Tensor],
        inputs: &[&[TokenId]],
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        assert_eq!(encoded.len(), inputs.len());
        for e in encoded {
            self.check_frames(e)?;
        }
        let (data, frames) = stack_rows(encoded);
        let mut g = Graph::new();
        let mem = g.constant(&[data.len() / self.config.d_audio, self.config.d_audio], data)?;
        let mut pass = Pass::new(self, None, None);
        let mem = pass.memory(&mut g, mem)?;
        let logits = pass.decoder(&mut g, inputs, Some((mem, &frames)))?;
        let v = self.config.vocab_size;
        let all = g.value(logits);
        let lengths: Vec<usize> = inputs.iter().map(|i| i.len()).collect();
        Ok(stacked(&lengths)
            .map(|(s, l)| all[(s + l - 1) * v..(s + l) * v].to_vec())
            .collect())
    }

    /// Teacher-forced mean cross-entropy over a batch. Returns the loss and
    /// the tracked parameter leaves of `trainable`.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        examples: &[Example<'_>],
        trainable: Option<ParamGroup>,
        dropout_seed: Option<u64>,
    ) -> Result<(Var, Vec<(usize, Var)>), ModelError> {
        if examples.is_empty() {
            return Err(ModelError::Data("empty batch".into()));
        }
        let mut inputs = Vec::with_capacity(examples.len());
        let mut targets = Vec::new();
        let mut encoded = Vec::with_capacity(examples.len());
        for ex in examples {
            self.check_frames(ex.encoded)?;
            let mut inp = Vec::with_capacity(ex.target.len() + 1);
            inp.push(BOS);
            inp.extend_from_slice(ex.target);
            inputs.push(inp);
            targets.extend_from_slice(ex.target);
            targets.push(EOS);
            encoded.push(ex.encoded);
        }
        let (data, frames) = stack_rows(&encoded);
        let mem = g.constant(&[data.len() / self.config.d_audio, self.config.d_audio], data)?;
        let mut pass = Pass::new(self, trainable, dropout_seed);
        let mem = pass.memory(g, mem)?;
        let refs: Vec<&[TokenId]> = inputs.iter().map(Vec::as_slice).collect();
        let logits = pass.decoder(g, &refs, Some((mem, &frames)))?;
        let loss = g.cross_entropy(logits, &targets, usize::MAX)?;
        Ok((loss, pass.tracked()))
    }

    /// Wraps cached encoder output as a next-token model for decoding.
    pub fn conditioned<'a>(&'a self, encoded: &'a Tensor) -> Conditioned<'a> {
        Conditioned {
            model: self,
            encoded,
        }
    }

    /// Greedy decoding of many utterances at once; outputs exclude EOS.
    pub fn greedy_batch(&self, encoded: &[&Tensor], max_len: usize) -> Result<Vec<Vec<TokenId>>, ModelError> {
        let max_len = max_len.min(self.config.max_text_len);
        let mut seqs: Vec<Vec<TokenId>> = vec![vec![BOS]; encoded.len()];
        let mut active: Vec<usize> = (0..encoded.len()).collect();
        while !active.is_empty() {
            let enc: Vec<&Tensor> = active.iter().map(|&i| encoded[i]).collect();
            let inp: Vec<&[TokenId]> = active.iter().map(|&i| seqs[i].as_slice()).collect();
            let logits = self.next_logits_multi(&enc, &inp)?;
            let mut still = Vec::new();
            for (&i, l) in active.iter().zip(&logits) {
                let next = argmax(l);
                if next == EOS {
                    continue;
                }
                seqs[i].push(next);
                // seqs carry the start symbol
                if seqs[i].len() <= max_len && seqs[i].len() < self.config.max_text_len {
                    still.push(i);
                }
            }
            active = still;
        }
        Ok(seqs.into_iter().map(|mut s| s.split_off(1)).collect())
    }
}

/// The model bound to one utterance's audio.
pub struct Conditioned<'a> {
    model: &'a AudioToTextModel,
    encoded: &'a Tensor,
}

impl Conditioned<'_> {
    fn forced_eos(&self) -> Vec<f64> {
        (0..self.model.config.vocab_size)
            .map(|t| if t == EOS { 0.0 } else { f64::NEG_INFINITY })
            .collect()
    }
}

impl LanguageModel for Conditioned<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn next_logits(&self, prefix: &[TokenId]) -> Vec<f64> {
        self.next_logits_batch(&[prefix]).remove(0)
    }

    /// Prefixes that would overflow the position table can only end.
    fn next_logits_batch(&self, prefixes: &[&[TokenId]]) -> Vec<Vec<f64>> {
        let limit = self.model.config.max_text_len;
        let inputs: Vec<Vec<TokenId>> = prefixes
            .iter()
            .map(|p| std::iter::once(BOS).chain(p.iter().copied()).collect())
            .collect();
        let fits: Vec<usize> = (0..inputs.len()).filter(|&i| inputs[i].len() <= limit).collect();
        let enc: Vec<&Tensor> = fits.iter().map(|_| self.encoded).collect();
        let inp: Vec<&[TokenId]> = fits.iter().map(|&i| inputs[i].as_slice()).collect();
        let mut computed = if fits.is_empty() {
            Vec::new()
        } else {
            self.model
                .next_logits_multi(&enc, &inp)
                .expect("encoded audio validated on construction")
        }
        .into_iter();
        (0..inputs.len())
            .map(|i| {
                if inputs[i].len() <= limit {
                    computed.next().expect("one row per fitting prefix")
                } else {
                    self.forced_eos()
                }
            })
            .collect()
    }
}

/// Perplexity of the decoder alone on `texts` (each scored with EOS).
pub fn lm_perplexity(model: &AudioToTextModel, texts: &[Vec<TokenId>]) -> Result<f64, ModelError> {
    if texts.is_empty() {
        return Err(ModelError::Data("no texts to score".into()));
    }
    let mut nll = 0.0;
    let mut count = 0usize;
    for chunk in texts.chunks(64) {
        let inputs: Vec<Vec<TokenId>> = chunk
            .iter()
            .map(|t| std::iter::once(BOS).chain(t.iter().copied()).collect())
            .collect();
        let refs: Vec<&[TokenId]> = inputs.iter().map(Vec::as_slice).collect();
        let mut g = Graph::new();
        let mut pass = Pass::new(model, None, None);
        let logits = pass.decoder(&mut g, &refs, None)?;
        let v = model.config.vocab_size;
        let vals = g.value(logits);
        let mut row = 0;
        for t in chunk {
            for (i, &target) in t.iter().chain(std::iter::once(&EOS)).enumerate() {
                let lp = log_softmax(&vals[(row + i) * v..(row + i + 1) * v]);
                nll -= lp[target];
                count += 1;
            }
            row += t.len() + 1;
        }
    }
    Ok((nll / count as f64).exp())
}
