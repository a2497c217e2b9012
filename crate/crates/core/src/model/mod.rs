//! Hybrid CTC/attention network.
//!
//! Conformer encoder over conv-subsampled features, a linear CTC head, and a
//! pre-norm transformer decoder. The sememe variants plug into the decoder:
//!
//! - `sp`: a sigmoid head predicting the next token's sememes from `g`.
//! - `se`: token embeddings plus the mean embedding of their sememes.
//! - `sep`: `[e; c]` through a stack of linear layers back to `d_model`.
//!
//! Every utterance is processed at its true length, so padding never reaches
//! attention, convolution or normalisation.

mod checkpoint;

pub use checkpoint::{config_diff, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

use crate::error::{Error, Result};
use crate::lexicon::SememeLexicon;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Sp,
    Se,
    Sep,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::Sp, Mode::Se, Mode::Sep];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Sp => "sp",
            Mode::Se => "se",
            Mode::Sep => "sep",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown mode {s:?} (expected baseline, sp, se or sep)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    pub conv_kernel: usize,
    pub feature_dim: usize,
    /// Total vocabulary size including blank, unk and sos/eos.
    pub vocab_size: usize,
    pub sememe_count: usize,
    pub mode: Mode,
    /// Sememe prediction head; always on in `sp`, optional in `se`/`sep`.
    pub sememe_prediction: bool,
    /// Widths of the sememe encoder stack; empty means `[2d, d/2, d]`.
    pub sememe_encoder_dims: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            encoder_blocks: 2,
            decoder_blocks: 2,
            d_ffn: 256,
            dropout: 0.1,
            conv_kernel: 15,
            feature_dim: 80,
            vocab_size: 60,
            sememe_count: 24,
            mode: Mode::Baseline,
            sememe_prediction: false,
            sememe_encoder_dims: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.d_ffn == 0 || self.feature_dim == 0 {
            return bad("d_ffn and feature_dim must be positive".into());
        }
        if self.vocab_size < 4 {
            return bad("vocab_size must be at least 4".into());
        }
        if self.conv_kernel % 2 == 0 {
            return bad(format!("conv_kernel {} must be odd", self.conv_kernel));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if self.uses_sememes() && self.sememe_count == 0 {
            return bad("sememe modes need sememe_count >= 1".into());
        }
        if self.mode == Mode::Baseline && self.sememe_prediction {
            return bad("baseline mode cannot enable sememe prediction".into());
        }
        if self.mode == Mode::Sep {
            let dims = self.encoder_dims();
            let d = self.d_model;
            if dims.len() < 2 || dims[0] != 2 * d || dims[dims.len() - 1] != d || dims.contains(&0) {
                return bad(format!(
                    "sememe_encoder_dims {dims:?} must start at {} and end at {d}",
                    2 * d
                ));
            }
        }
        Ok(())
    }

    pub fn uses_sememes(&self) -> bool {
        self.mode != Mode::Baseline
    }

    pub fn predicts_sememes(&self) -> bool {
        self.mode == Mode::Sp || (self.mode != Mode::Baseline && self.sememe_prediction)
    }

    /// Resolved sememe encoder widths.
    pub fn encoder_dims(&self) -> Vec<usize> {
        if self.sememe_encoder_dims.is_empty() {
            vec![2 * self.d_model, (self.d_model / 2).max(1), self.d_model]
        } else {
            self.sememe_encoder_dims.clone()
        }
    }

    pub fn sos(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn eos(&self) -> usize {
        self.vocab_size - 1
    }
}

/// Output length of two kernel-3, stride-2 convolutions without padding.
pub fn subsampled_length(frames: usize) -> Result<usize> {
    if frames < 7 {
        return Err(Error::TooShort { frames, min: 7 });
    }
    let f = |n: usize| (n - 3) / 2 + 1;
    Ok(f(f(frames)))
}

/// Sinusoidal position table, `rows × d`.
pub fn positional_encoding(rows: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; rows * d];
    for pos in 0..rows {
        for i in 0..d {
            let expo = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(expo);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(rows, d, data).unwrap()
}

#[derive(Debug, Clone)]
pub struct DecoderOutputs {
    pub g: Tensor,
    pub logits: Tensor,
    pub sememe_probs: Option<Tensor>,
}

/// Graph handles produced by [`Model::decode_tokens`].
#[derive(Debug, Clone, Copy)]
pub struct DecoderVars {
    pub g: Var,
    pub logits: Var,
    /// Pre-sigmoid sememe scores.
    pub sememe_logits: Option<Var>,
}

#[derive(Debug, Clone)]
struct Lin {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Attn {
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
}

#[derive(Debug, Clone)]
struct Ffn {
    ln: Norm,
    up: Lin,
    down: Lin,
}

#[derive(Debug, Clone)]
struct ConvModule {
    ln: Norm,
    pw1: Lin,
    dw_w: ParamId,
    dw_b: ParamId,
    ln2: Norm,
    pw2: Lin,
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    ff1: Ffn,
    att_ln: Norm,
    att: Attn,
    conv: ConvModule,
    ff2: Ffn,
    ln: Norm,
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    self_ln: Norm,
    self_att: Attn,
    src_ln: Norm,
    src_att: Attn,
    ff_ln: Norm,
    up: Lin,
    down: Lin,
}

#[derive(Debug, Clone)]
struct Layout {
    sub1: Lin,
    sub2: Lin,
    proj: Lin,
    encoder: Vec<EncoderBlock>,
    ctc: Lin,
    embed: ParamId,
    decoder: Vec<DecoderBlock>,
    dec_ln: Norm,
    out: Lin,
    sememe_table: Option<ParamId>,
    sememe_encoder: Vec<Lin>,
    sememe_head: Option<Lin>,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Lin {
        let a = (6.0 / (din + dout) as f64).sqrt();
        let w = (0..din * dout).map(|_| self.rng.random_range(-a..a)).collect();
        Lin {
            w: self.store.add(format!("{name}.w"), Tensor::matrix(din, dout, w).unwrap(), true),
            b: self.store.add(format!("{name}.b"), Tensor::zeros(&[dout]), true),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            g: self.store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0), true),
            b: self.store.add(format!("{name}.beta"), Tensor::zeros(&[d]), true),
        }
    }

    fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).unwrap();
        let data = (0..rows * cols).map(|_| dist.sample(&mut self.rng)).collect();
        self.store.add(name, Tensor::matrix(rows, cols, data).unwrap(), true)
    }

    fn attn(&mut self, name: &str, d: usize) -> Attn {
        Attn {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, h: usize) -> Ffn {
        Ffn {
            ln: self.norm(&format!("{name}.ln"), d),
            up: self.linear(&format!("{name}.up"), d, h),
            down: self.linear(&format!("{name}.down"), h, d),
        }
    }
}

/// Network parameters plus the lexicon used by the sememe mechanisms.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub lexicon: SememeLexicon,
    layout: Layout,
}

impl Model {
    /// Randomly initialised model. `lexicon` must cover `vocab_size` tokens
    /// and `sememe_count` sememes whenever the mode uses sememes.
    pub fn new(config: ModelConfig, lexicon: SememeLexicon, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.uses_sememes()
            && (lexicon.vocab_size() != config.vocab_size || lexicon.sememe_count() != config.sememe_count)
        {
            return Err(Error::config(format!(
                "lexicon covers {} tokens / {} sememes, model expects {} / {}",
                lexicon.vocab_size(),
                lexicon.sememe_count(),
                config.vocab_size,
                config.sememe_count
            )));
        }
        let mut params = ParamStore::new();
        let layout = build_layout(&config, &mut params, seed);
        Ok(Self {
            config,
            params,
            lexicon,
            layout,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    /// Sememe embedding table, present in `se` and `sep` modes.
    pub fn sememe_table(&self) -> Option<ParamId> {
        self.layout.sememe_table
    }

    /// `(weight, bias)` of the sememe prediction head.
    pub fn sememe_head(&self) -> Option<(ParamId, ParamId)> {
        self.layout.sememe_head.as_ref().map(|l| (l.w, l.b))
    }

    fn lin(&self, g: &mut Graph<'_>, p: &Lin, x: Var) -> Var {
        let (w, b) = (g.param(p.w), g.param(p.b));
        g.linear(x, w, Some(b))
    }

    fn norm(&self, g: &mut Graph<'_>, p: &Norm, x: Var) -> Var {
        let (gamma, beta) = (g.param(p.g), g.param(p.b));
        g.layer_norm(x, gamma, beta, LN_EPS)
    }

    fn mha(&self, g: &mut Graph<'_>, p: &Attn, xq: Var, xkv: Var, causal: bool) -> Var {
        let q = self.lin(g, &p.q, xq);
        let k = self.lin(g, &p.k, xkv);
        let v = self.lin(g, &p.v, xkv);
        let a = g.attention(q, k, v, self.config.heads, causal);
        self.lin(g, &p.o, a)
    }

    fn ffn(&self, g: &mut Graph<'_>, p: &Ffn, x: Var) -> Var {
        let h = self.norm(g, &p.ln, x);
        let h = self.lin(g, &p.up, h);
        let h = g.silu(h);
        let h = g.dropout(h, self.config.dropout);
        self.lin(g, &p.down, h)
    }

    fn residual(&self, g: &mut Graph<'_>, x: Var, y: Var, scale: f64) -> Var {
        let y = g.dropout(y, self.config.dropout);
        let y = if scale == 1.0 { y } else { g.scale(y, scale) };
        g.add(x, y)
    }

    fn encoder_block(&self, g: &mut Graph<'_>, p: &EncoderBlock, x: Var) -> Var {
        let y = self.ffn(g, &p.ff1, x);
        let x = self.residual(g, x, y, 0.5);
        let y = self.norm(g, &p.att_ln, x);
        let y = self.mha(g, &p.att, y, y, false);
        let x = self.residual(g, x, y, 1.0);
        let c = &p.conv;
        let y = self.norm(g, &c.ln, x);
        let y = self.lin(g, &c.pw1, y);
        let y = g.glu(y);
        let (w, b) = (g.param(c.dw_w), g.param(c.dw_b));
        let y = g.depthwise_conv(y, w, b);
        let y = self.norm(g, &c.ln2, y);
        let y = g.silu(y);
        let y = self.lin(g, &c.pw2, y);
        let x = self.residual(g, x, y, 1.0);
        let y = self.ffn(g, &p.ff2, x);
        let x = self.residual(g, x, y, 0.5);
        self.norm(g, &p.ln, x)
    }

    fn decoder_block(&self, g: &mut Graph<'_>, p: &DecoderBlock, x: Var, h: Var) -> Var {
        let y = self.norm(g, &p.self_ln, x);
        let y = self.mha(g, &p.self_att, y, y, true);
        let x = self.residual(g, x, y, 1.0);
        let y = self.norm(g, &p.src_ln, x);
        let y = self.mha(g, &p.src_att, y, h, false);
        let x = self.residual(g, x, y, 1.0);
        let y = self.norm(g, &p.ff_ln, x);
        let y = self.lin(g, &p.up, y);
        let y = g.relu(y);
        let y = g.dropout(y, self.config.dropout);
        let y = self.lin(g, &p.down, y);
        self.residual(g, x, y, 1.0)
    }

    /// Encoder over the first `length` rows of `features`; returns `H` with
    /// `subsampled_length(length)` rows.
    pub fn encode(&self, g: &mut Graph<'_>, features: &Tensor, length: usize) -> Result<Var> {
        subsampled_length(length)?;
        if length > features.rows() || features.cols() != self.config.feature_dim {
            return Err(Error::arg(format!(
                "features {:?} incompatible with length {length} and dim {}",
                features.shape(),
                self.config.feature_dim
            )));
        }
        let x = g.input(features.take_rows(length));
        self.encode_var(g, x)
    }

    /// Encoder over a graph node holding unpadded features.
    pub fn encode_var(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        subsampled_length(g.value(x).rows())?;
        let l = &self.layout;
        let x = g.unfold(x, 3, 2);
        let x = self.lin(g, &l.sub1, x);
        let x = g.relu(x);
        let x = g.unfold(x, 3, 2);
        let x = self.lin(g, &l.sub2, x);
        let x = g.relu(x);
        let x = self.lin(g, &l.proj, x);
        let x = self.add_positions(g, x);
        let mut x = g.dropout(x, self.config.dropout);
        for block in &l.encoder {
            x = self.encoder_block(g, block, x);
        }
        Ok(x)
    }

    fn add_positions(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let rows = g.value(x).rows();
        let pe = g.input(positional_encoding(rows, self.config.d_model));
        g.add(x, pe)
    }

    /// Frame-level log-distributions over the vocabulary.
    pub fn ctc_head(&self, g: &mut Graph<'_>, h: Var) -> Var {
        let z = self.lin(g, &self.layout.ctc, h);
        g.log_softmax(z)
    }

    /// Token embeddings scaled by `sqrt(d_model)`.
    pub fn embed_tokens(&self, g: &mut Graph<'_>, tokens: &[usize]) -> Result<Var> {
        self.check_ids(tokens)?;
        let table = g.param(self.layout.embed);
        let e = g.embedding(table, tokens);
        Ok(g.scale(e, (self.config.d_model as f64).sqrt()))
    }

    fn check_ids(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            Some(t) => Err(Error::arg(format!(
                "token id {t} out of range for vocabulary of {}",
                self.config.vocab_size
            ))),
            None => Ok(()),
        }
    }

    /// Mean sememe embedding per token; zero rows for tokens without sememes.
    pub fn sememe_avg(&self, g: &mut Graph<'_>, tokens: &[usize]) -> Result<Var> {
        self.check_ids(tokens)?;
        let id = self
            .layout
            .sememe_table
            .ok_or_else(|| Error::arg("model has no sememe embedding table"))?;
        let table = g.param(id);
        Ok(g.bag_mean(table, &self.lexicon.bags(tokens)))
    }

    /// `Ê = E + C`.
    pub fn sememe_enhance(&self, g: &mut Graph<'_>, e: Var, c: Var) -> Result<Var> {
        sememe_enhance(g, e, c)
    }

    /// `[E ; C]` through the sememe encoder stack.
    pub fn sememe_encode(&self, g: &mut Graph<'_>, e: Var, c: Var) -> Result<Var> {
        if g.value(e).rows() != g.value(c).rows() {
            return Err(Error::arg("sememe_encode needs equal row counts"));
        }
        let mut x = g.concat_cols(e, c);
        let stack = &self.layout.sememe_encoder;
        for (i, layer) in stack.iter().enumerate() {
            x = self.lin(g, layer, x);
            if i + 1 < stack.len() {
                x = g.silu(x);
            }
        }
        Ok(x)
    }

    /// Decoder input representation: embeddings, sememe mechanism, positions.
    fn decoder_input(&self, g: &mut Graph<'_>, tokens_in: &[usize]) -> Result<Var> {
        let e = self.embed_tokens(g, tokens_in)?;
        let x = match self.config.mode {
            Mode::Baseline | Mode::Sp => e,
            Mode::Se => {
                let c = self.sememe_avg(g, tokens_in)?;
                self.sememe_enhance(g, e, c)?
            }
            Mode::Sep => {
                let c = self.sememe_avg(g, tokens_in)?;
                self.sememe_encode(g, e, c)?
            }
        };
        let x = self.add_positions(g, x);
        Ok(g.dropout(x, self.config.dropout))
    }

    /// Teacher-forced decoder pass; `tokens_in` starts with sos.
    pub fn decode_tokens(&self, g: &mut Graph<'_>, h: Var, tokens_in: &[usize]) -> Result<DecoderVars> {
        match tokens_in.first() {
            None => return Err(Error::arg("decoder input is empty")),
            Some(&t) if t != self.config.sos() => {
                return Err(Error::arg(format!("decoder input must start with sos, got {t}")))
            }
            _ => {}
        }
        let l = &self.layout;
        let mut x = self.decoder_input(g, tokens_in)?;
        for block in &l.decoder {
            x = self.decoder_block(g, block, x, h);
        }
        let gv = self.norm(g, &l.dec_ln, x);
        let logits = self.lin(g, &l.out, gv);
        let sememe_logits = l.sememe_head.as_ref().map(|p| self.lin(g, p, gv));
        Ok(DecoderVars {
            g: gv,
            logits,
            sememe_logits,
        })
    }

    /// Encoder block `index` applied to `x` (`T × d_model`).
    pub fn encoder_layer(&self, g: &mut Graph<'_>, index: usize, x: Var) -> Var {
        self.encoder_block(g, &self.layout.encoder[index], x)
    }

    /// Decoder block `index` applied to `x` with memory `h`.
    pub fn decoder_layer(&self, g: &mut Graph<'_>, index: usize, x: Var, h: Var) -> Var {
        self.decoder_block(g, &self.layout.decoder[index], x, h)
    }

    /// Inference-time encoder output.
    pub fn encode_features(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let h = self.encode(&mut g, features, features.rows())?;
        Ok(g.value(h).clone())
    }

    pub fn ctc_log_probs(&self, h: &Tensor) -> Tensor {
        let mut g = Graph::new(&self.params);
        let hv = g.input(h.clone());
        let lp = self.ctc_head(&mut g, hv);
        g.value(lp).clone()
    }

    pub fn decoder_outputs(&self, h: &Tensor, tokens_in: &[usize]) -> Result<DecoderOutputs> {
        let mut g = Graph::new(&self.params);
        let hv = g.input(h.clone());
        let out = self.decode_tokens(&mut g, hv, tokens_in)?;
        let sememe_probs = out.sememe_logits.map(|s| {
            let p = g.sigmoid(s);
            g.value(p).clone()
        });
        Ok(DecoderOutputs {
            g: g.value(out.g).clone(),
            logits: g.value(out.logits).clone(),
            sememe_probs,
        })
    }

    /// Decoder log-probabilities `log P(token | tokens_in[..=i], H)` per position.
    pub fn decoder_log_probs(&self, h: &Tensor, tokens_in: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let hv = g.input(h.clone());
        let out = self.decode_tokens(&mut g, hv, tokens_in)?;
        let lp = g.log_softmax(out.logits);
        Ok(g.value(lp).clone())
    }

    /// Copies every parameter whose name also exists in `other` (shapes must agree).
    pub fn transplant_from(&mut self, other: &Model) -> usize {
        let mut copied = 0;
        for (_, src) in other.params.iter() {
            if let Some(id) = self.params.find(&src.name) {
                let dst = self.params.get_mut(id);
                if dst.value.shape() == src.value.shape() {
                    dst.value = src.value.clone();
                    copied += 1;
                }
            }
        }
        copied
    }
}

/// `Ê = E + C` with a shape check.
pub fn sememe_enhance(g: &mut Graph<'_>, e: Var, c: Var) -> Result<Var> {
    if g.value(e).shape() != g.value(c).shape() {
        return Err(Error::arg(format!(
            "sememe_enhance shape mismatch {:?} vs {:?}",
            g.value(e).shape(),
            g.value(c).shape()
        )));
    }
    Ok(g.add(e, c))
}

fn build_layout(c: &ModelConfig, store: &mut ParamStore, seed: u64) -> Layout {
    let mut init = Init {
        store,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let d = c.d_model;
    let sub1 = init.linear("enc.sub1", 3 * c.feature_dim, d);
    let sub2 = init.linear("enc.sub2", 3 * d, d);
    let proj = init.linear("enc.proj", d, d);
    let encoder = (0..c.encoder_blocks)
        .map(|i| {
            let n = format!("enc.{i}");
            EncoderBlock {
                ff1: init.ffn(&format!("{n}.ff1"), d, c.d_ffn),
                att_ln: init.norm(&format!("{n}.att_ln"), d),
                att: init.attn(&format!("{n}.att"), d),
                conv: ConvModule {
                    ln: init.norm(&format!("{n}.conv.ln"), d),
                    pw1: init.linear(&format!("{n}.conv.pw1"), d, 2 * d),
                    dw_w: {
                        let a = (1.0 / c.conv_kernel as f64).sqrt();
                        let w = (0..c.conv_kernel * d).map(|_| init.rng.random_range(-a..a)).collect();
                        init.store.add(
                            format!("{n}.conv.dw.w"),
                            Tensor::matrix(c.conv_kernel, d, w).unwrap(),
                            true,
                        )
                    },
                    dw_b: init.store.add(format!("{n}.conv.dw.b"), Tensor::zeros(&[d]), true),
                    ln2: init.norm(&format!("{n}.conv.ln2"), d),
                    pw2: init.linear(&format!("{n}.conv.pw2"), d, d),
                },
                ff2: init.ffn(&format!("{n}.ff2"), d, c.d_ffn),
                ln: init.norm(&format!("{n}.ln"), d),
            }
        })
        .collect();
    let ctc = init.linear("ctc", d, c.vocab_size);
    let embed = init.normal("dec.embed", c.vocab_size, d, 1.0 / (d as f64).sqrt());
    let decoder = (0..c.decoder_blocks)
        .map(|i| {
            let n = format!("dec.{i}");
            DecoderBlock {
                self_ln: init.norm(&format!("{n}.self_ln"), d),
                self_att: init.attn(&format!("{n}.self_att"), d),
                src_ln: init.norm(&format!("{n}.src_ln"), d),
                src_att: init.attn(&format!("{n}.src_att"), d),
                ff_ln: init.norm(&format!("{n}.ff_ln"), d),
                up: init.linear(&format!("{n}.ff.up"), d, c.d_ffn),
                down: init.linear(&format!("{n}.ff.down"), c.d_ffn, d),
            }
        })
        .collect();
    let dec_ln = init.norm("dec.ln", d);
    let out = init.linear("dec.out", d, c.vocab_size);
    let sememe_table = matches!(c.mode, Mode::Se | Mode::Sep)
        .then(|| init.normal("sememe.table", c.sememe_count, d, 1.0));
    let sememe_encoder = if c.mode == Mode::Sep {
        c.encoder_dims()
            .windows(2)
            .enumerate()
            .map(|(i, w)| init.linear(&format!("sememe.encoder.{i}"), w[0], w[1]))
            .collect()
    } else {
        Vec::new()
    };
    let sememe_head = c
        .predicts_sememes()
        .then(|| init.linear("sememe.head", d, c.sememe_count));
    Layout {
        sub1,
        sub2,
        proj,
        encoder,
        ctc,
        embed,
        decoder,
        dec_ln,
        out,
        sememe_table,
        sememe_encoder,
        sememe_head,
    }
}

#[cfg(test)]
mod tests;
