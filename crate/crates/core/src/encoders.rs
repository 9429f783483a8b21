//! The vision adapter and the two language encoders of the dual-encoder
//! model, plus [`Model`], which owns their parameters.
//!
//! All encoders run on a [`Tape`] with parameters bound through a
//! [`Binding`]. Utterances in a batch are packed end to end (pads removed),
//! so position-wise layers are one matrix product over every token and
//! attention runs per sequence inside [`Tape::causal_attention`].

use numcore::{Binding, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{EOS_ID, PAD_ID};
use crate::error::{Error, Result};
use crate::seed::{self, streams};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const EMBED_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Embedding encoder with positions, contrastive loss.
    #[serde(rename = "cvcl")]
    Cvcl,
    /// Transformer decoder encoder, contrastive loss.
    #[serde(rename = "cvcl_t")]
    CvclT,
    /// Transformer decoder encoder, contrastive plus next-word loss.
    #[serde(rename = "cvcl_t_lm")]
    CvclTLm,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Cvcl, Variant::CvclT, Variant::CvclTLm];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Cvcl => "cvcl",
            Variant::CvclT => "cvcl_t",
            Variant::CvclTLm => "cvcl_t_lm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn tag(self) -> u32 {
        match self {
            Variant::Cvcl => 0,
            Variant::CvclT => 1,
            Variant::CvclTLm => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.tag() == tag)
    }

    pub fn uses_transformer(self) -> bool {
        !matches!(self, Variant::Cvcl)
    }

    pub fn uses_lm(self) -> bool {
        matches!(self, Variant::CvclTLm)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    pub vision_dropout: f64,
    pub language_dropout: f64,
}

impl ModelConfig {
    /// Full-size defaults: D = 512, 2 layers, 8 heads, feed-forward 4D,
    /// dropout 0.1, sequences up to 48 tokens.
    pub fn new(variant: Variant, feature_dim: usize, vocab_size: usize) -> Self {
        Self {
            variant,
            feature_dim,
            embed_dim: 512,
            vocab_size,
            max_len: crate::corpus::DEFAULT_MAX_LEN,
            n_heads: 8,
            n_layers: 2,
            ffn_dim: 2048,
            vision_dropout: 0.1,
            language_dropout: 0.1,
        }
    }

    pub fn with_embed_dim(mut self, dim: usize) -> Self {
        self.embed_dim = dim;
        self.ffn_dim = 4 * dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.feature_dim == 0 || self.embed_dim == 0 || self.max_len == 0 {
            return bad("feature_dim, embed_dim and max_len must be positive".into());
        }
        if self.vocab_size < 4 {
            return bad(format!("vocab_size {} leaves no room for words", self.vocab_size));
        }
        if self.variant.uses_transformer() {
            if self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
                return bad(format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.n_heads));
            }
            if self.n_layers == 0 || self.ffn_dim == 0 {
                return bad("transformer needs at least one layer and a feed-forward width".into());
            }
        }
        for (name, p) in [("vision_dropout", self.vision_dropout), ("language_dropout", self.language_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1)"));
            }
        }
        Ok(())
    }
}

/// Train mode carries the dropout RNG; eval mode disables dropout.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut seed::Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    fn dropout(&mut self, tape: &mut Tape, x: Var, p: f64) -> Result<Var> {
        match self {
            Mode::Train(rng) if p > 0.0 => Ok(tape.dropout(x, 1.0 - p, *rng)?),
            _ => Ok(x),
        }
    }
}

fn xavier(rng: &mut seed::Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
    Tensor::matrix(fan_in, fan_out, data).unwrap()
}

fn normal(rng: &mut seed::Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let n = Normal::new(0.0, std).unwrap();
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| n.sample(rng)).collect()).unwrap()
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, rng: &mut seed::Rng, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            weight: store.insert(format!("{name}.weight"), xavier(rng, fan_in, fan_out))?,
            bias: store.insert(format!("{name}.bias"), Tensor::vector(vec![0.0; fan_out]))?,
        })
    }

    fn lookup(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            weight: param_id(store, &format!("{name}.weight"))?,
            bias: param_id(store, &format!("{name}.bias"))?,
        })
    }

    fn forward(&self, tape: &mut Tape, b: &Binding, x: Var) -> Result<Var> {
        let y = tape.matmul(x, b.var(self.weight))?;
        Ok(tape.add_bias(y, b.var(self.bias))?)
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.insert(format!("{name}.gamma"), Tensor::vector(vec![1.0; dim]))?,
            beta: store.insert(format!("{name}.beta"), Tensor::vector(vec![0.0; dim]))?,
        })
    }

    fn lookup(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            gamma: param_id(store, &format!("{name}.gamma"))?,
            beta: param_id(store, &format!("{name}.beta"))?,
        })
    }

    fn forward(&self, tape: &mut Tape, b: &Binding, x: Var) -> Result<Var> {
        Ok(tape.layer_norm(x, b.var(self.gamma), b.var(self.beta), LAYER_NORM_EPS)?)
    }
}

fn param_id(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
}

/// Linear projection of frozen frame features, then layer norm and dropout.
#[derive(Clone, Debug)]
pub struct VisionAdapter {
    proj: Linear,
    norm: LayerNorm,
    dropout: f64,
    feature_dim: usize,
}

impl VisionAdapter {
    /// Frames `[B, F]` to embeddings `[B, D]`. The features enter the tape as
    /// constants, so no gradient reaches them.
    pub fn forward(&self, tape: &mut Tape, b: &Binding, frames: &[&[f64]], mode: &mut Mode) -> Result<Var> {
        if let Some(f) = frames.iter().find(|f| f.len() != self.feature_dim) {
            return Err(Error::Data(format!(
                "frame has {} features, adapter expects {}",
                f.len(),
                self.feature_dim
            )));
        }
        let x = tape.constant(Tensor::from_rows(frames)?)?;
        self.forward_var(tape, b, x, mode)
    }

    /// As [`VisionAdapter::forward`] with the features already on the tape.
    pub fn forward_var(&self, tape: &mut Tape, b: &Binding, x: Var, mode: &mut Mode) -> Result<Var> {
        let h = self.proj.forward(tape, b, x)?;
        let h = self.norm.forward(tape, b, h)?;
        mode.dropout(tape, h, self.dropout)
    }
}

/// Packed batch of utterances with pads removed.
struct Packed {
    ids: Vec<usize>,
    positions: Vec<usize>,
    offsets: Vec<usize>,
}

fn pack(seqs: &[Vec<u32>], max_len: usize, need_eos: bool) -> Result<Packed> {
    let mut p = Packed {
        ids: Vec::new(),
        positions: Vec::new(),
        offsets: vec![0],
    };
    for (i, s) in seqs.iter().enumerate() {
        let toks: Vec<u32> = s.iter().copied().filter(|&t| t != PAD_ID).collect();
        if toks.is_empty() {
            return Err(Error::Data(format!("utterance {i} has no non-pad tokens")));
        }
        if toks.len() > max_len {
            return Err(Error::Data(format!(
                "utterance {i} has {} tokens, max_len is {max_len}",
                toks.len()
            )));
        }
        if need_eos && *toks.last().unwrap() != EOS_ID {
            return Err(Error::Data(format!("utterance {i} does not end in <eos>")));
        }
        p.ids.extend(toks.iter().map(|&t| t as usize));
        p.positions.extend(0..toks.len());
        p.offsets.push(p.ids.len());
    }
    Ok(p)
}

/// Mean of token plus learned absolute position embeddings.
#[derive(Clone, Debug)]
pub struct EmbeddingEncoder {
    tokens: ParamId,
    positions: ParamId,
    dropout: f64,
    max_len: usize,
}

impl EmbeddingEncoder {
    /// One `[B, D]` embedding per utterance; `<pad>` positions are excluded
    /// from the average, `<eos>` is included.
    pub fn forward(&self, tape: &mut Tape, b: &Binding, seqs: &[Vec<u32>], mode: &mut Mode) -> Result<Var> {
        let p = pack(seqs, self.max_len, false)?;
        let tok = tape.gather(b.var(self.tokens), &p.ids)?;
        let pos = tape.gather(b.var(self.positions), &p.positions)?;
        let x = tape.add(tok, pos)?;
        let x = mode.dropout(tape, x, self.dropout)?;
        Ok(tape.segment_mean(x, &p.offsets)?)
    }

    pub fn token_table(&self) -> ParamId {
        self.tokens
    }

    pub fn position_table(&self) -> ParamId {
        self.positions
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln1: LayerNorm,
    qkv: Linear,
    out: Linear,
    ln2: LayerNorm,
    up: Linear,
    down: Linear,
}

/// Pre-norm causal transformer decoder with tied input and output
/// embeddings.
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    tokens: ParamId,
    positions: ParamId,
    layers: Vec<DecoderLayer>,
    final_norm: LayerNorm,
    heads: usize,
    dropout: f64,
    max_len: usize,
}

/// Final-layer hidden states of a packed batch.
pub struct Hidden {
    pub states: Var,
    pub offsets: Vec<usize>,
    pub ids: Vec<usize>,
}

impl TransformerEncoder {
    pub fn hidden(&self, tape: &mut Tape, b: &Binding, seqs: &[Vec<u32>], mode: &mut Mode) -> Result<Hidden> {
        self.hidden_layers(tape, b, seqs, mode, self.layers.len())
    }

    /// Hidden states after the first `depth` layers (before the final norm
    /// unless `depth` is the full stack).
    pub fn hidden_layers(
        &self,
        tape: &mut Tape,
        b: &Binding,
        seqs: &[Vec<u32>],
        mode: &mut Mode,
        depth: usize,
    ) -> Result<Hidden> {
        let p = pack(seqs, self.max_len, true)?;
        let tok = tape.gather(b.var(self.tokens), &p.ids)?;
        let pos = tape.gather(b.var(self.positions), &p.positions)?;
        let mut x = tape.add(tok, pos)?;
        x = mode.dropout(tape, x, self.dropout)?;
        for layer in &self.layers[..depth] {
            let h = layer.ln1.forward(tape, b, x)?;
            let qkv = layer.qkv.forward(tape, b, h)?;
            let a = tape.causal_attention(qkv, &p.offsets, self.heads)?;
            let a = layer.out.forward(tape, b, a)?;
            let a = mode.dropout(tape, a, self.dropout)?;
            x = tape.add(x, a)?;

            let h = layer.ln2.forward(tape, b, x)?;
            let h = layer.up.forward(tape, b, h)?;
            let h = tape.gelu(h)?;
            let h = layer.down.forward(tape, b, h)?;
            let h = mode.dropout(tape, h, self.dropout)?;
            x = tape.add(x, h)?;
        }
        if depth == self.layers.len() {
            x = self.final_norm.forward(tape, b, x)?;
        }
        Ok(Hidden {
            states: x,
            offsets: p.offsets,
            ids: p.ids,
        })
    }

    /// Hidden state at each utterance's `<eos>`, `[B, D]`.
    pub fn eos_states(&self, tape: &mut Tape, h: &Hidden) -> Result<Var> {
        let last: Vec<usize> = h.offsets[1..].iter().map(|o| o - 1).collect();
        Ok(tape.gather(h.states, &last)?)
    }

    pub fn forward(&self, tape: &mut Tape, b: &Binding, seqs: &[Vec<u32>], mode: &mut Mode) -> Result<Var> {
        let h = self.hidden(tape, b, seqs, mode)?;
        self.eos_states(tape, &h)
    }

    /// Next-token logits `[tokens, V]` through the tied embedding table, and
    /// the target id for every position (`None` at each `<eos>`).
    pub fn lm_logits(&self, tape: &mut Tape, b: &Binding, h: &Hidden) -> Result<(Var, Vec<Option<usize>>)> {
        let logits = tape.matmul_nt(h.states, b.var(self.tokens))?;
        let mut targets = vec![None; h.ids.len()];
        for w in h.offsets.windows(2) {
            for t in w[0]..w[1] - 1 {
                targets[t] = Some(h.ids[t + 1]);
            }
        }
        Ok((logits, targets))
    }

    pub fn token_table(&self) -> ParamId {
        self.tokens
    }

    pub fn position_table(&self) -> ParamId {
        self.positions
    }
}

#[derive(Clone, Debug)]
pub enum LanguageEncoder {
    Embedding(EmbeddingEncoder),
    Transformer(TransformerEncoder),
}

/// Outputs of one forward pass over a batch.
pub struct Forward {
    pub frames: Var,
    pub utterances: Var,
    pub lm: Option<(Var, Vec<Option<usize>>)>,
}

/// A dual-encoder model: configuration, parameters and encoder layout.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    vision: VisionAdapter,
    language: LanguageEncoder,
}

impl Model {
    /// Fresh parameters from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed, streams::INIT);
        let mut store = ParamStore::new();
        let (f, d) = (config.feature_dim, config.embed_dim);
        Linear::new(&mut store, &mut rng, "vision.proj", f, d)?;
        LayerNorm::new(&mut store, "vision.ln", d)?;
        let v = config.vocab_size;
        store.insert("text.tok_emb", normal(&mut rng, v, d, EMBED_INIT_STD))?;
        store.insert("text.pos_emb", normal(&mut rng, config.max_len, d, EMBED_INIT_STD))?;
        if config.variant.uses_transformer() {
            for i in 0..config.n_layers {
                let n = format!("text.layers.{i}");
                LayerNorm::new(&mut store, &format!("{n}.ln1"), d)?;
                Linear::new(&mut store, &mut rng, &format!("{n}.attn.qkv"), d, 3 * d)?;
                Linear::new(&mut store, &mut rng, &format!("{n}.attn.out"), d, d)?;
                LayerNorm::new(&mut store, &format!("{n}.ln2"), d)?;
                Linear::new(&mut store, &mut rng, &format!("{n}.ffn.up"), d, config.ffn_dim)?;
                Linear::new(&mut store, &mut rng, &format!("{n}.ffn.down"), config.ffn_dim, d)?;
            }
            LayerNorm::new(&mut store, "text.ln_f", d)?;
        }
        Self::from_params(config, store)
    }

    /// Wraps existing parameters, checking that every expected tensor is
    /// present with the right shape and nothing else is.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = expected_shapes(&config);
        if expected.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            let t = params
                .by_name(name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        let vision = VisionAdapter {
            proj: Linear::lookup(&params, "vision.proj")?,
            norm: LayerNorm::lookup(&params, "vision.ln")?,
            dropout: config.vision_dropout,
            feature_dim: config.feature_dim,
        };
        let tokens = param_id(&params, "text.tok_emb")?;
        let positions = param_id(&params, "text.pos_emb")?;
        let language = if config.variant.uses_transformer() {
            let layers = (0..config.n_layers)
                .map(|i| {
                    let n = format!("text.layers.{i}");
                    Ok(DecoderLayer {
                        ln1: LayerNorm::lookup(&params, &format!("{n}.ln1"))?,
                        qkv: Linear::lookup(&params, &format!("{n}.attn.qkv"))?,
                        out: Linear::lookup(&params, &format!("{n}.attn.out"))?,
                        ln2: LayerNorm::lookup(&params, &format!("{n}.ln2"))?,
                        up: Linear::lookup(&params, &format!("{n}.ffn.up"))?,
                        down: Linear::lookup(&params, &format!("{n}.ffn.down"))?,
                    })
                })
                .collect::<Result<_>>()?;
            LanguageEncoder::Transformer(TransformerEncoder {
                tokens,
                positions,
                layers,
                final_norm: LayerNorm::lookup(&params, "text.ln_f")?,
                heads: config.n_heads,
                dropout: config.language_dropout,
                max_len: config.max_len,
            })
        } else {
            LanguageEncoder::Embedding(EmbeddingEncoder {
                tokens,
                positions,
                dropout: config.language_dropout,
                max_len: config.max_len,
            })
        };
        Ok(Self {
            config,
            params,
            vision,
            language,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn vision(&self) -> &VisionAdapter {
        &self.vision
    }

    pub fn language(&self) -> &LanguageEncoder {
        &self.language
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Binding> {
        Ok(self.params.bind(tape, trainable)?)
    }

    pub fn encode_frames(&self, tape: &mut Tape, b: &Binding, frames: &[&[f64]], mode: &mut Mode) -> Result<Var> {
        self.vision.forward(tape, b, frames, mode)
    }

    pub fn encode_utterances(&self, tape: &mut Tape, b: &Binding, seqs: &[Vec<u32>], mode: &mut Mode) -> Result<Var> {
        match &self.language {
            LanguageEncoder::Embedding(e) => e.forward(tape, b, seqs, mode),
            LanguageEncoder::Transformer(t) => t.forward(tape, b, seqs, mode),
        }
    }

    /// Frame and utterance embeddings for a batch of matched pairs, plus LM
    /// logits for the joint variant.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Binding,
        frames: &[&[f64]],
        seqs: &[Vec<u32>],
        mode: &mut Mode,
    ) -> Result<Forward> {
        let frames = self.vision.forward(tape, b, frames, mode)?;
        match &self.language {
            LanguageEncoder::Embedding(e) => {
                let utterances = e.forward(tape, b, seqs, mode)?;
                Ok(Forward {
                    frames,
                    utterances,
                    lm: None,
                })
            }
            LanguageEncoder::Transformer(t) => {
                let h = t.hidden(tape, b, seqs, mode)?;
                let utterances = t.eos_states(tape, &h)?;
                let lm = if self.config.variant.uses_lm() {
                    Some(t.lm_logits(tape, b, &h)?)
                } else {
                    None
                };
                Ok(Forward {
                    frames,
                    utterances,
                    lm,
                })
            }
        }
    }

    /// Eval-mode frame embeddings, one row per frame.
    pub fn embed_frames(&self, frames: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false)?;
        let v = self.encode_frames(&mut tape, &b, frames, &mut Mode::Eval)?;
        Ok(rows(tape.value(v)))
    }

    /// Eval-mode utterance embeddings.
    pub fn embed_utterances(&self, seqs: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false)?;
        let v = self.encode_utterances(&mut tape, &b, seqs, &mut Mode::Eval)?;
        Ok(rows(tape.value(v)))
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn expected_shapes(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (f, d) = (c.feature_dim, c.embed_dim);
    let mut v: Vec<(String, Vec<usize>)> = vec![
        ("vision.proj.weight".into(), vec![f, d]),
        ("vision.proj.bias".into(), vec![d]),
        ("vision.ln.gamma".into(), vec![d]),
        ("vision.ln.beta".into(), vec![d]),
        ("text.tok_emb".into(), vec![c.vocab_size, d]),
        ("text.pos_emb".into(), vec![c.max_len, d]),
    ];
    if c.variant.uses_transformer() {
        for i in 0..c.n_layers {
            let n = format!("text.layers.{i}");
            v.push((format!("{n}.ln1.gamma"), vec![d]));
            v.push((format!("{n}.ln1.beta"), vec![d]));
            v.push((format!("{n}.attn.qkv.weight"), vec![d, 3 * d]));
            v.push((format!("{n}.attn.qkv.bias"), vec![3 * d]));
            v.push((format!("{n}.attn.out.weight"), vec![d, d]));
            v.push((format!("{n}.attn.out.bias"), vec![d]));
            v.push((format!("{n}.ln2.gamma"), vec![d]));
            v.push((format!("{n}.ln2.beta"), vec![d]));
            v.push((format!("{n}.ffn.up.weight"), vec![d, c.ffn_dim]));
            v.push((format!("{n}.ffn.up.bias"), vec![c.ffn_dim]));
            v.push((format!("{n}.ffn.down.weight"), vec![c.ffn_dim, d]));
            v.push((format!("{n}.ffn.down.bias"), vec![d]));
        }
        v.push(("text.ln_f.gamma".into(), vec![d]));
        v.push(("text.ln_f.beta".into(), vec![d]));
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            feature_dim: 8,
            embed_dim: 8,
            vocab_size: 11,
            max_len: 48,
            n_heads: 2,
            n_layers: 2,
            ffn_dim: 32,
            vision_dropout: 0.1,
            language_dropout: 0.1,
        }
    }

    #[test]
    fn full_size_defaults() {
        let c = ModelConfig::new(Variant::CvclT, 768, 100);
        assert_eq!((c.embed_dim, c.n_layers, c.n_heads, c.max_len), (512, 2, 8, 48));
        assert_eq!((c.vision_dropout, c.language_dropout), (0.1, 0.1));
        c.validate().unwrap();
    }

    #[test]
    fn config_validation() {
        let mut c = toy(Variant::CvclT);
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = toy(Variant::Cvcl);
        c.vision_dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn identity_projection_in_eval_mode_is_layer_norm() {
        let mut m = Model::init(toy(Variant::Cvcl), 0).unwrap();
        let eye: Vec<f64> = (0..64).map(|i| if i % 9 == 0 { 1.0 } else { 0.0 }).collect();
        let w = m.params().id("vision.proj.weight").unwrap();
        *m.params_mut().get_mut(w) = Tensor::matrix(8, 8, eye).unwrap();
        let x: Vec<f64> = (0..8).map(|i| i as f64 * 0.5 - 1.0).collect();
        let out = m.embed_frames(&[&x]).unwrap();
        let mean = x.iter().sum::<f64>() / 8.0;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        for (o, v) in out[0].iter().zip(&x) {
            assert!((o - (v - mean) / (var + LAYER_NORM_EPS).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn train_and_eval_differ_only_by_dropout() {
        let m = Model::init(toy(Variant::Cvcl), 1).unwrap();
        let x = vec![0.3; 8];
        let eval = m.embed_frames(&[&x]).unwrap().remove(0);
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, true).unwrap();
        let mut rng = seed::rng(5, 0);
        let v = m.encode_frames(&mut tape, &b, &[&x], &mut Mode::Train(&mut rng)).unwrap();
        for (t, e) in tape.value(v).data().iter().zip(&eval) {
            assert!(*t == 0.0 || (t - e / 0.9).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_dimension_is_checked() {
        let m = Model::init(toy(Variant::Cvcl), 1).unwrap();
        assert!(m.embed_frames(&[&[0.0; 7]]).is_err());
    }

    #[test]
    fn single_token_is_embedding_plus_first_position() {
        let m = Model::init(toy(Variant::Cvcl), 2).unwrap();
        let out = m.embed_utterances(&[vec![5]]).unwrap().remove(0);
        let tok = m.params().by_name("text.tok_emb").unwrap().row(5).to_vec();
        let pos = m.params().by_name("text.pos_emb").unwrap().row(0).to_vec();
        for i in 0..8 {
            assert!((out[i] - tok[i] - pos[i]).abs() < 1e-15);
        }
        assert!(m.embed_utterances(&[vec![PAD_ID, PAD_ID]]).is_err());
    }

    #[test]
    fn pads_are_ignored_in_the_average() {
        let m = Model::init(toy(Variant::Cvcl), 2).unwrap();
        let a = m.embed_utterances(&[vec![5, 6, EOS_ID]]).unwrap();
        let b = m.embed_utterances(&[vec![5, 6, EOS_ID, PAD_ID, PAD_ID]]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn transformer_needs_eos() {
        let m = Model::init(toy(Variant::CvclT), 3).unwrap();
        assert!(m.embed_utterances(&[vec![5, 6]]).is_err());
        assert!(m.embed_utterances(&[vec![5, 6, EOS_ID]]).is_ok());
    }

    #[test]
    fn from_params_rejects_wrong_layout() {
        let m = Model::init(toy(Variant::CvclT), 3).unwrap();
        assert!(Model::from_params(toy(Variant::Cvcl), m.params().clone()).is_err());
        let mut c = toy(Variant::CvclT);
        c.vocab_size = 12;
        assert!(Model::from_params(c, m.params().clone()).is_err());
    }
}
