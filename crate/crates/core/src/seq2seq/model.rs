use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::vocab::{Vocabulary, BOS, EOS};
use crate::error::{contract, Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_ff: usize,
    pub max_input_len: usize,
    pub max_target_len: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            d_ff: 256,
            max_input_len: 128,
            max_target_len: 32,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("d_ff", self.d_ff),
            ("max_input_len", self.max_input_len),
            ("max_target_len", self.max_target_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return contract(format!("model dimension {name} is zero"));
        }
        if self.d_model % self.heads != 0 {
            return contract(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.d_model < 2 {
            return Err(Error::DegenerateAxis(self.d_model));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return contract("init_std must be positive");
        }
        Ok(())
    }

    /// Closed-form parameter count for a vocabulary of `vocab` tokens.
    pub fn param_count(&self, vocab: usize) -> usize {
        let d = self.d_model;
        let attn = 4 * (d * d + d);
        let ln = 2 * d;
        let ff = d * self.d_ff + self.d_ff + self.d_ff * d + d;
        let enc_layer = ln + attn + ln + ff;
        let dec_layer = ln + attn + ln + attn + ln + ff;
        vocab * d
            + self.max_input_len * d
            + self.max_target_len * d
            + self.enc_layers * enc_layer
            + ln
            + self.dec_layers * dec_layer
            + ln
            + vocab * d
    }
}

#[derive(Debug, Clone)]
struct Attn {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Debug, Clone)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct FeedForward {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct EncLayer {
    ln1: Norm,
    attn: Attn,
    ln2: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct DecLayer {
    ln1: Norm,
    self_attn: Attn,
    ln2: Norm,
    cross: Attn,
    ln3: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: usize,
    pos_enc: usize,
    pos_dec: usize,
    enc: Vec<EncLayer>,
    enc_ln: Norm,
    dec: Vec<DecLayer>,
    dec_ln: Norm,
    out_embed: usize,
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

struct Builder<'a> {
    names: Vec<String>,
    params: Vec<Arc<Tensor>>,
    rng: ChaCha8Rng,
    normal: &'a Normal<f64>,
}

impl Builder<'_> {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Normal => (0..n).map(|_| self.normal.sample(&mut self.rng)).collect(),
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        self.names.push(name);
        self.params.push(Arc::new(Tensor::new(shape, data).expect("shape product")));
        self.params.len() - 1
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            g: self.push(format!("{prefix}.g"), vec![d], Init::Ones),
            b: self.push(format!("{prefix}.b"), vec![d], Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> Attn {
        let lin = |s: &mut Self, n: &str| {
            (
                s.push(format!("{prefix}.w{n}"), vec![d, d], Init::Normal),
                s.push(format!("{prefix}.b{n}"), vec![d], Init::Zeros),
            )
        };
        let (wq, bq) = lin(self, "q");
        let (wk, bk) = lin(self, "k");
        let (wv, bv) = lin(self, "v");
        let (wo, bo) = lin(self, "o");
        Attn {
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

    fn ff(&mut self, prefix: &str, d: usize, hidden: usize) -> FeedForward {
        FeedForward {
            w1: self.push(format!("{prefix}.w1"), vec![d, hidden], Init::Normal),
            b1: self.push(format!("{prefix}.b1"), vec![hidden], Init::Zeros),
            w2: self.push(format!("{prefix}.w2"), vec![hidden, d], Init::Normal),
            b2: self.push(format!("{prefix}.b2"), vec![d], Init::Zeros),
        }
    }
}

fn build_layout(config: &ModelConfig, vocab: usize, seed: u64) -> (Layout, Vec<String>, Vec<Arc<Tensor>>) {
    let normal = Normal::new(0.0, config.init_std).expect("validated std");
    let mut b = Builder {
        names: vec![],
        params: vec![],
        rng: ChaCha8Rng::seed_from_u64(seed),
        normal: &normal,
    };
    let d = config.d_model;
    let embed = b.push("embed".into(), vec![vocab, d], Init::Normal);
    let pos_enc = b.push("pos_enc".into(), vec![config.max_input_len, d], Init::Normal);
    let pos_dec = b.push("pos_dec".into(), vec![config.max_target_len, d], Init::Normal);
    let enc = (0..config.enc_layers)
        .map(|l| {
            let p = format!("enc.{l}");
            EncLayer {
                ln1: b.norm(&format!("{p}.ln1"), d),
                attn: b.attn(&format!("{p}.attn"), d),
                ln2: b.norm(&format!("{p}.ln2"), d),
                ff: b.ff(&format!("{p}.ff"), d, config.d_ff),
            }
        })
        .collect();
    let enc_ln = b.norm("enc.ln", d);
    let dec = (0..config.dec_layers)
        .map(|l| {
            let p = format!("dec.{l}");
            DecLayer {
                ln1: b.norm(&format!("{p}.ln1"), d),
                self_attn: b.attn(&format!("{p}.self"), d),
                ln2: b.norm(&format!("{p}.ln2"), d),
                cross: b.attn(&format!("{p}.cross"), d),
                ln3: b.norm(&format!("{p}.ln3"), d),
                ff: b.ff(&format!("{p}.ff"), d, config.d_ff),
            }
        })
        .collect();
    let dec_ln = b.norm("dec.ln", d);
    let out_embed = b.push("out_embed".into(), vec![vocab, d], Init::Normal);
    let layout = Layout {
        embed,
        pos_enc,
        pos_dec,
        enc,
        enc_ln,
        dec,
        dec_ln,
        out_embed,
    };
    (layout, b.names, b.params)
}

/// Model parameters bound to a tape, in [`Seq2SeqModel::param_names`] order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Per-parameter gradients; untouched parameters get zeros.
    pub fn collect(&self, tape: &Tape, grads: &Gradients) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .map(|&v| {
                grads
                    .get(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
            })
            .collect()
    }
}

/// Encoder-decoder transformer with untied input and output embeddings.
///
/// Pre-norm blocks; the decoder's next-token scores are `E · f_dec` where `E`
/// is the `[V × d]` output embedding (`out_embed`) and carries no bias.
#[derive(Debug, Clone)]
pub struct Seq2SeqModel {
    config: ModelConfig,
    vocab: Arc<Vocabulary>,
    seed: u64,
    names: Vec<String>,
    params: Vec<Arc<Tensor>>,
    layout: Layout,
}

impl Seq2SeqModel {
    pub fn init(config: ModelConfig, vocab: Arc<Vocabulary>, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.is_empty() {
            return contract("empty vocabulary");
        }
        let (layout, names, params) = build_layout(&config, vocab.len(), seed);
        Ok(Self {
            config,
            vocab,
            seed,
            names,
            params,
            layout,
        })
    }

    /// Rebuilds a model around previously saved parameter values.
    pub fn from_parts(
        config: ModelConfig,
        vocab: Arc<Vocabulary>,
        seed: u64,
        values: Vec<Tensor>,
    ) -> Result<Self> {
        let mut model = Self::init(config, vocab, seed)?;
        if values.len() != model.params.len() {
            return contract(format!(
                "expected {} parameter tensors, got {}",
                model.params.len(),
                values.len()
            ));
        }
        for (slot, v) in model.params.iter_mut().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::Shape {
                    op: "from_parts",
                    left: slot.shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            *slot = Arc::new(v);
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Arc<Tensor>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Arc<Tensor>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Index of the output embedding `E` in [`Self::params`].
    pub fn out_embed_index(&self) -> usize {
        self.layout.out_embed
    }

    pub fn out_embed(&self) -> &Tensor {
        &self.params[self.layout.out_embed]
    }

    pub fn set_out_embed(&mut self, t: Tensor) -> Result<()> {
        if t.shape() != self.out_embed().shape() {
            return Err(Error::Shape {
                op: "set_out_embed",
                left: self.out_embed().shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
        self.params[self.layout.out_embed] = Arc::new(t);
        Ok(())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&self.params[i])
    }

    /// Replaces a named parameter; the shape must match.
    pub fn set_param(&mut self, name: &str, t: Tensor) -> Result<()> {
        let Some(i) = self.names.iter().position(|n| n == name) else {
            return contract(format!("no parameter named {name}"));
        };
        if self.params[i].shape() != t.shape() {
            return Err(Error::Shape {
                op: "set_param",
                left: self.params[i].shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
        self.params[i] = Arc::new(t);
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, track: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if track {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    fn linear(&self, tape: &mut Tape, p: &Bound, x: Var, w: usize, b: usize) -> Result<Var> {
        let y = tape.matmul(x, p.vars[w])?;
        tape.add_bias(y, p.vars[b])
    }

    fn norm(&self, tape: &mut Tape, p: &Bound, x: Var, n: &Norm) -> Result<Var> {
        tape.layer_norm(x, p.vars[n.g], p.vars[n.b])
    }

    fn attention(
        &self,
        tape: &mut Tape,
        p: &Bound,
        a: &Attn,
        query: Var,
        source: Var,
        causal: bool,
    ) -> Result<Var> {
        let q = self.linear(tape, p, query, a.wq, a.bq)?;
        let k = self.linear(tape, p, source, a.wk, a.bk)?;
        let v = self.linear(tape, p, source, a.wv, a.bv)?;
        let dh = self.config.d_model / self.config.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let s = tape.matmul_bt(qh, kh)?;
            let s = tape.scale(s, scale);
            let w = if causal {
                tape.causal_softmax_rows(s)?
            } else {
                tape.softmax_rows(s)?
            };
            heads.push(tape.matmul(w, vh)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        self.linear(tape, p, cat, a.wo, a.bo)
    }

    fn feed_forward(&self, tape: &mut Tape, p: &Bound, f: &FeedForward, x: Var) -> Result<Var> {
        let h = self.linear(tape, p, x, f.w1, f.b1)?;
        let h = tape.gelu(h);
        self.linear(tape, p, h, f.w2, f.b2)
    }

    /// Clips `ids` to the maximum input length.
    pub fn clip_input<'a>(&self, ids: &'a [usize]) -> Result<&'a [usize]> {
        if ids.is_empty() {
            return contract("empty input sequence");
        }
        if ids.len() > self.config.max_input_len {
            log::warn!(
                "input of {} tokens truncated to {}",
                ids.len(),
                self.config.max_input_len
            );
            return Ok(&ids[..self.config.max_input_len]);
        }
        Ok(ids)
    }

    /// Encoder states `[n × d]`.
    pub fn encode_on(&self, tape: &mut Tape, p: &Bound, ids: &[usize]) -> Result<Var> {
        let ids = self.clip_input(ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = tape.gather_rows(p.vars[self.layout.embed], ids)?;
        let pos = tape.gather_rows(p.vars[self.layout.pos_enc], &positions)?;
        let mut x = tape.add(tok, pos)?;
        for layer in &self.layout.enc {
            let h = self.norm(tape, p, x, &layer.ln1)?;
            let a = self.attention(tape, p, &layer.attn, h, h, false)?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, p, x, &layer.ln2)?;
            let f = self.feed_forward(tape, p, &layer.ff, h)?;
            x = tape.add(x, f)?;
        }
        self.norm(tape, p, x, &self.layout.enc_ln)
    }

    /// Decoder states `f_dec` for every prefix position, `[m × d]`.
    pub fn decode_states_on(
        &self,
        tape: &mut Tape,
        p: &Bound,
        memory: Var,
        prefix: &[usize],
    ) -> Result<Var> {
        if prefix.first() != Some(&BOS) {
            return contract("decoder prefix must start with BOS");
        }
        if prefix.len() > self.config.max_target_len {
            return contract(format!(
                "prefix of {} tokens exceeds max target length {}",
                prefix.len(),
                self.config.max_target_len
            ));
        }
        let positions: Vec<usize> = (0..prefix.len()).collect();
        let tok = tape.gather_rows(p.vars[self.layout.embed], prefix)?;
        let pos = tape.gather_rows(p.vars[self.layout.pos_dec], &positions)?;
        let mut y = tape.add(tok, pos)?;
        for layer in &self.layout.dec {
            let h = self.norm(tape, p, y, &layer.ln1)?;
            let a = self.attention(tape, p, &layer.self_attn, h, h, true)?;
            y = tape.add(y, a)?;
            let h = self.norm(tape, p, y, &layer.ln2)?;
            let c = self.attention(tape, p, &layer.cross, h, memory, false)?;
            y = tape.add(y, c)?;
            let h = self.norm(tape, p, y, &layer.ln3)?;
            let f = self.feed_forward(tape, p, &layer.ff, h)?;
            y = tape.add(y, f)?;
        }
        self.norm(tape, p, y, &self.layout.dec_ln)
    }

    /// Next-token scores `E · f_dec` for every position, `[m × V]`.
    pub fn logits_on(&self, tape: &mut Tape, p: &Bound, states: Var) -> Result<Var> {
        tape.matmul_bt(states, p.vars[self.layout.out_embed])
    }

    pub fn encode(&self, ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let m = self.encode_on(&mut tape, &p, ids)?;
        Ok(tape.value(m).clone())
    }

    /// Mean-pooled encoder state, the sequence representation.
    pub fn pooled(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let m = self.encode_on(&mut tape, &p, ids)?;
        let pooled = tape.mean_rows(m)?;
        Ok(tape.value(pooled).data().to_vec())
    }

    /// Pre-softmax scores for the token following `prefix`.
    pub fn decoder_logits(&self, memory: &Tensor, prefix: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let mem = tape.constant(memory.clone());
        let states = self.decode_states_on(&mut tape, &p, mem, prefix)?;
        let logits = self.logits_on(&mut tape, &p, states)?;
        let last = tape.value(logits).row(prefix.len() - 1).to_vec();
        Ok(Tensor::vector(last))
    }

    /// Greedy decoding; stops at EOS (not returned) or after `max_len` tokens.
    /// Ties go to the lowest token id.
    pub fn greedy_decode(&self, ids: &[usize], max_len: usize) -> Result<Vec<usize>> {
        if max_len == 0 {
            return contract("max_len must be at least 1");
        }
        let memory = Arc::new(self.encode(ids)?);
        let steps = max_len.min(self.config.max_target_len);
        let mut prefix = vec![BOS];
        for _ in 0..steps {
            let mut tape = Tape::new();
            let p = self.bind(&mut tape, false);
            let mem = tape.constant(memory.clone());
            let states = self.decode_states_on(&mut tape, &p, mem, &prefix)?;
            let logits = self.logits_on(&mut tape, &p, states)?;
            let next = argmax(tape.value(logits).row(prefix.len() - 1));
            if next == EOS {
                break;
            }
            prefix.push(next);
        }
        Ok(prefix.split_off(1))
    }
}

/// Index of the largest value; the earliest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
