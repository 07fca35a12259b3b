//! Byte-level tokenizer and a small pre-norm decoder transformer with
//! low-rank adapters on the attention projections.
//!
//! The model serves two roles: mean-pooled text encoding into a D-vector and
//! next-token prediction for distillation and generation. Training runs on a
//! [`Tape`]; inference runs through [`Runner`], which keeps a per-layer
//! key/value cache and shares the tape's kernels, so both paths produce
//! bitwise-identical numbers.

use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::{kernels, Tape, Tensor, TensorError, Var};

pub const PAD: usize = 256;
pub const BOS: usize = 257;
pub const EOS: usize = 258;
pub const SEP: usize = 259;
pub const VOCAB_SIZE: usize = 260;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds the maximum length {max}")]
    TooLong { len: usize, max: usize },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EncoderError> = std::result::Result<T, E>;

/// Raw byte tokens of `text`, with no special tokens.
pub fn byte_tokens(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

/// `[BOS] bytes [EOS]`, with the bytes truncated so the total is at most `max_len`.
pub fn tokenize(text: &str, max_len: usize) -> Vec<usize> {
    let keep = max_len.saturating_sub(2);
    let mut out = Vec::with_capacity(keep.min(text.len()) + 2);
    out.push(BOS);
    out.extend(text.bytes().take(keep).map(usize::from));
    out.push(EOS);
    out
}

/// Drops special tokens and decodes the remaining bytes (lossily, since
/// truncation or generation may split a multi-byte character).
pub fn detokenize(tokens: &[usize]) -> String {
    let bytes: Vec<u8> = tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub max_len: usize,
    pub lora_rank: usize,
    pub lora_dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 128,
            heads: 4,
            max_len: 256,
            lora_rank: 8,
            lora_dropout: 0.05,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(EncoderError::Config(m));
        if self.layers == 0 {
            return fail("layers must be at least 1".into());
        }
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return fail(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.max_len < 16 {
            return fail(format!("max_len {} below 16", self.max_len));
        }
        if self.lora_rank == 0 {
            return fail("lora_rank must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.lora_dropout) {
            return fail(format!("lora_dropout {} outside [0, 1)", self.lora_dropout));
        }
        Ok(())
    }

    fn ffn(&self) -> usize {
        4 * self.hidden
    }
}

// Per-layer tensor slots, in checkpoint order.
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const WQ: usize = 2;
const LORA_A: usize = 6; // q, k, v, o pairs occupy slots 6..14 as (A, B)
const LN2_G: usize = 14;
const LN2_B: usize = 15;
const W1: usize = 16;
const B1: usize = 17;
const W2: usize = 18;
const B2: usize = 19;
const SLOTS: usize = 20;

const SLOT_NAMES: [&str; SLOTS] = [
    "ln1.gain", "ln1.bias", "attn.q", "attn.k", "attn.v", "attn.o", "lora.q.a", "lora.q.b", "lora.k.a",
    "lora.k.b", "lora.v.a", "lora.v.b", "lora.o.a", "lora.o.b", "ln2.gain", "ln2.bias", "ffn.w1", "ffn.b1",
    "ffn.w2", "ffn.b2",
];

fn slot_trainable(slot: usize) -> bool {
    matches!(slot, LN1_G | LN1_B | LN2_G | LN2_B) || (LORA_A..LORA_A + 8).contains(&slot)
}

/// All encoder weights in one flat, fixed order:
/// embedding, `layers × SLOTS` per-layer tensors, final norm gain/bias, output head.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    tensors: Vec<Tensor>,
}

/// Which tensors receive gradients when bound to a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BindMode {
    /// Everything is a constant.
    Frozen,
    /// Adapter factors and layer-norm parameters are trainable.
    Adapters,
    /// Every tensor is trainable.
    Full,
}

impl EncoderParams {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden;
        let f = config.ffn();
        let r = config.lora_rank;
        let mut normal = |rows: usize, cols: usize, std: f64| -> Tensor {
            let dist = Normal::new(0.0, std).expect("positive std");
            let data = (0..rows * cols).map(|_| dist.sample(&mut rng)).collect();
            Tensor::new(vec![rows, cols], data).expect("shape matches")
        };
        let mut tensors = vec![normal(VOCAB_SIZE, d, 1.0)];
        let wstd = 1.0 / (d as f64).sqrt();
        for _ in 0..config.layers {
            tensors.push(Tensor::filled(&[d], 1.0));
            tensors.push(Tensor::zeros(&[d]));
            for _ in 0..4 {
                tensors.push(normal(d, d, wstd));
            }
            for _ in 0..4 {
                tensors.push(normal(d, r, wstd));
                tensors.push(Tensor::zeros(&[r, d]));
            }
            tensors.push(Tensor::filled(&[d], 1.0));
            tensors.push(Tensor::zeros(&[d]));
            tensors.push(normal(d, f, wstd));
            tensors.push(Tensor::zeros(&[f]));
            tensors.push(normal(f, d, 1.0 / (f as f64).sqrt()));
            tensors.push(Tensor::zeros(&[d]));
        }
        tensors.push(Tensor::filled(&[d], 1.0));
        tensors.push(Tensor::zeros(&[d]));
        tensors.push(normal(d, VOCAB_SIZE, wstd));
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn layer_index(&self, layer: usize, slot: usize) -> usize {
        1 + layer * SLOTS + slot
    }

    fn lnf_index(&self) -> usize {
        1 + self.config.layers * SLOTS
    }

    fn head_index(&self) -> usize {
        self.lnf_index() + 2
    }

    fn t(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    fn lt(&self, layer: usize, slot: usize) -> &Tensor {
        &self.tensors[self.layer_index(layer, slot)]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Tensor names in storage order.
    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["embed".to_string()];
        for l in 0..self.config.layers {
            names.extend(SLOT_NAMES.iter().map(|s| format!("layer{l}.{s}")));
        }
        names.extend(["final_ln.gain", "final_ln.bias", "head"].map(String::from));
        names
    }

    fn is_trainable(&self, i: usize) -> bool {
        i > 0 && i < self.lnf_index() && slot_trainable((i - 1) % SLOTS)
            || i == self.lnf_index()
            || i == self.lnf_index() + 1
    }

    /// Indices that [`BindMode::Adapters`] trains.
    pub fn adapter_indices(&self) -> Vec<usize> {
        (0..self.tensors.len()).filter(|&i| self.is_trainable(i)).collect()
    }

    pub fn trainable_indices(&self, mode: BindMode) -> Vec<usize> {
        match mode {
            BindMode::Frozen => Vec::new(),
            BindMode::Adapters => self.adapter_indices(),
            BindMode::Full => (0..self.tensors.len()).collect(),
        }
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    /// Mutable access to the tensors trained under `mode`, in index order.
    pub fn trainable_mut(&mut self, mode: BindMode) -> Vec<&mut Tensor> {
        let keep = self.trainable_indices(mode);
        self.tensors
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| keep.binary_search(i).is_ok())
            .map(|(_, t)| t)
            .collect()
    }

    /// Index of the embedding table (for gradient checks that train it).
    pub fn embed_index(&self) -> usize {
        0
    }

    pub fn lora_indices(&self) -> Vec<usize> {
        (0..self.config.layers)
            .flat_map(|l| (LORA_A..LORA_A + 8).map(move |s| 1 + l * SLOTS + s))
            .collect()
    }

    pub fn has_nonzero_adapters(&self) -> bool {
        self.lora_indices()
            .into_iter()
            .filter(|i| (i - 1) % SLOTS % 2 == 1)
            .any(|i| self.tensors[i].data().iter().any(|&v| v != 0.0))
    }

    /// Pushes all tensors onto `tape`. Returns handles in storage order.
    pub fn bind(&self, tape: &mut Tape, mode: BindMode) -> Result<BoundEncoder> {
        let trainable = self.trainable_indices(mode);
        let mut vars = Vec::with_capacity(self.tensors.len());
        for (i, t) in self.tensors.iter().enumerate() {
            let rg = trainable.binary_search(&i).is_ok();
            vars.push(tape.leaf(t.clone(), rg)?);
        }
        let pos = tape.constant(positions(self.config.max_len, self.config.hidden))?;
        Ok(BoundEncoder {
            config: self.config.clone(),
            vars,
            trainable,
            pos,
        })
    }

    /// Folds every adapter product into its base projection and zeroes the
    /// `B` factors. Returns a warning when a cache built from these exact
    /// parameters is registered, since its provenance no longer matches.
    pub fn merge_adapters(&mut self, registered_cache: Option<&str>) -> Option<String> {
        let before = self.checksum();
        let d = self.config.hidden;
        let r = self.config.lora_rank;
        for l in 0..self.config.layers {
            for p in 0..4 {
                let a = self.lt(l, LORA_A + 2 * p).clone();
                let bi = self.layer_index(l, LORA_A + 2 * p + 1);
                let delta = kernels::matmul(a.data(), self.tensors[bi].data(), d, r, d);
                let wi = self.layer_index(l, WQ + p);
                for (w, dv) in self.tensors[wi].data_mut().iter_mut().zip(&delta) {
                    *w += dv;
                }
                self.tensors[bi] = Tensor::zeros(&[r, d]);
            }
        }
        let warning = registered_cache.filter(|c| *c == before).map(|c| {
            format!("adapters merged into parameters {c} while an embedding cache built from them is registered")
        });
        if let Some(w) = &warning {
            log::warn!("{w}");
        }
        warning
    }

    /// SHA-256 over the serialized tensors, as lowercase hex.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.tensors {
            hasher.update(t.to_bytes());
        }
        hex_digest(&hasher.finalize())
    }

    /// Immutable shared copy (the θ0 snapshot the embedding cache is built from).
    pub fn snapshot(&self) -> Arc<EncoderParams> {
        Arc::new(self.clone())
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        let c = &self.config;
        writeln!(w, "format=fraudcot-encoder-v1")?;
        writeln!(w, "layers={}", c.layers)?;
        writeln!(w, "hidden={}", c.hidden)?;
        writeln!(w, "heads={}", c.heads)?;
        writeln!(w, "max_len={}", c.max_len)?;
        writeln!(w, "lora_rank={}", c.lora_rank)?;
        writeln!(w, "lora_dropout={}", c.lora_dropout)?;
        writeln!(w, "tensors={}", self.tensors.len())?;
        writeln!(w, "end")?;
        for t in &self.tensors {
            t.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(r: &mut R) -> Result<Self> {
        let bad = |m: String| EncoderError::Checkpoint(m);
        let mut fields = std::collections::BTreeMap::new();
        loop {
            let mut line = String::new();
            if r.read_line(&mut line)? == 0 {
                return Err(bad("header not terminated".into()));
            }
            let line = line.trim_end();
            if line == "end" {
                break;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad header line `{line}`")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        if fields.get("format").map(String::as_str) != Some("fraudcot-encoder-v1") {
            return Err(bad("unknown format".into()));
        }
        let get = |k: &str| -> Result<usize> {
            fields
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(format!("missing or invalid `{k}`")))
        };
        let config = EncoderConfig {
            layers: get("layers")?,
            hidden: get("hidden")?,
            heads: get("heads")?,
            max_len: get("max_len")?,
            lora_rank: get("lora_rank")?,
            lora_dropout: fields
                .get("lora_dropout")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad("missing or invalid `lora_dropout`".into()))?,
        };
        config.validate()?;
        let template = Self::init(config.clone(), 0)?;
        if get("tensors")? != template.tensors.len() {
            return Err(bad("tensor count does not match config".into()));
        }
        let mut tensors = Vec::with_capacity(template.tensors.len());
        for (expected, name) in template.tensors.iter().zip(template.names()) {
            let t = Tensor::read_from(r)?;
            if t.shape() != expected.shape() {
                return Err(bad(format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), expected.shape())));
            }
            tensors.push(t);
        }
        Ok(Self { config, tensors })
    }

    /// Tape-free pooled encoding of raw text.
    pub fn encode_text(&self, text: &str) -> Tensor {
        self.encode_tokens(&tokenize(text, self.config.max_len))
            .expect("tokenize respects max_len")
    }

    /// Tape-free pooled encoding: mean of final hidden states over non-PAD positions.
    pub fn encode_tokens(&self, tokens: &[usize]) -> Result<Tensor> {
        self.check_len(tokens.len())?;
        let d = self.config.hidden;
        let mut runner = Runner::new(self);
        let mut sum = vec![0.0; d];
        let mut count = 0usize;
        for &tok in tokens {
            let h = runner.push(tok)?;
            if tok != PAD {
                sum.iter_mut().zip(&h).for_each(|(s, v)| *s += v);
                count += 1;
            }
        }
        let count = count.max(1) as f64;
        sum.iter_mut().for_each(|s| *s /= count);
        Ok(Tensor::new(vec![1, d], sum)?)
    }

    /// Per-position next-token log-distributions for a prefix (`n × |V|`).
    pub fn next_token_logprobs(&self, prefix: &[usize]) -> Result<Tensor> {
        if prefix.is_empty() {
            return Err(EncoderError::Config("empty prefix".into()));
        }
        self.check_len(prefix.len())?;
        let mut runner = Runner::new(self);
        let mut out = Vec::with_capacity(prefix.len() * VOCAB_SIZE);
        for &tok in prefix {
            let h = runner.push(tok)?;
            out.extend(kernels::log_softmax(&runner.logits(&h)));
        }
        Ok(Tensor::new(vec![prefix.len(), VOCAB_SIZE], out)?)
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_len {
            return Err(EncoderError::TooLong {
                len,
                max: self.config.max_len,
            });
        }
        Ok(())
    }

    /// Greedy decoding: argmax with ties to the lowest id, stopping at EOS,
    /// after `max_new` tokens, or at the length limit. EOS is not returned.
    pub fn greedy_generate(&self, prompt: &[usize], max_new: usize) -> Result<Vec<usize>> {
        self.generate(prompt, &GenerateOptions { max_new, ..GenerateOptions::default() })
    }

    pub fn generate(&self, prompt: &[usize], opts: &GenerateOptions) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(EncoderError::Config("empty prompt".into()));
        }
        self.check_len(prompt.len())?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut runner = Runner::new(self);
        let mut h = Vec::new();
        for &tok in prompt {
            h = runner.push(tok)?;
        }
        let mut out = Vec::new();
        while out.len() < opts.max_new {
            let logits = runner.logits(&h);
            let next = if opts.temperature > 0.0 {
                sample_token(&logits, opts.temperature, &mut rng)
            } else {
                argmax(&logits)
            };
            if next == EOS {
                break;
            }
            out.push(next);
            if runner.len() >= self.config.max_len {
                break;
            }
            h = runner.push(next)?;
        }
        Ok(out)
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn sample_token<R: Rng>(logits: &[f64], temperature: f64, rng: &mut R) -> usize {
    let mut p: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    kernels::softmax_in_place(&mut p);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateOptions {
    pub max_new: usize,
    /// Zero means greedy decoding.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            max_new: 128,
            temperature: 0.0,
            seed: 0,
        }
    }
}

/// Sinusoidal position table, `max_len × d`.
pub fn positions(max_len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![max_len, d], data).expect("shape matches")
}

/// Encoder parameters bound to a tape.
#[derive(Clone, Debug)]
pub struct BoundEncoder {
    config: EncoderConfig,
    vars: Vec<Var>,
    trainable: Vec<usize>,
    pos: Var,
}

impl BoundEncoder {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn lv(&self, layer: usize, slot: usize) -> Var {
        self.vars[1 + layer * SLOTS + slot]
    }

    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }

    /// Trainable handles, in the order of [`EncoderParams::trainable_mut`].
    pub fn trainable_vars(&self) -> Vec<Var> {
        self.trainable.iter().map(|&i| self.vars[i]).collect()
    }

    fn projection(
        &self,
        tape: &mut Tape,
        h: Var,
        layer: usize,
        p: usize,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let base = tape.matmul(h, self.lv(layer, WQ + p))?;
        let src = match rng {
            Some(r) if self.config.lora_dropout > 0.0 => tape.dropout(h, self.config.lora_dropout, r)?,
            _ => h,
        };
        let low = tape.matmul(src, self.lv(layer, LORA_A + 2 * p))?;
        let delta = tape.matmul(low, self.lv(layer, LORA_A + 2 * p + 1))?;
        Ok(tape.add(base, delta)?)
    }

    /// Final-norm hidden states for every position (`n × D`). Passing an RNG
    /// enables adapter dropout.
    pub fn hidden(&self, tape: &mut Tape, tokens: &[usize], mut rng: Option<&mut dyn RngCore>) -> Result<Var> {
        let n = tokens.len();
        if n == 0 {
            return Err(EncoderError::Config("empty token sequence".into()));
        }
        if n > self.config.max_len {
            return Err(EncoderError::TooLong {
                len: n,
                max: self.config.max_len,
            });
        }
        let emb = tape.gather_rows(self.vars[0], tokens)?;
        let rows: Vec<usize> = (0..n).collect();
        let pos = tape.select_rows(self.pos, &rows)?;
        let mut x = tape.add(emb, pos)?;
        for l in 0..self.config.layers {
            let h = tape.layer_norm(x, self.lv(l, LN1_G), self.lv(l, LN1_B))?;
            let q = self.projection(tape, h, l, 0, &mut rng)?;
            let k = self.projection(tape, h, l, 1, &mut rng)?;
            let v = self.projection(tape, h, l, 2, &mut rng)?;
            let att = tape.causal_attention(q, k, v, self.config.heads)?;
            let o = self.projection(tape, att, l, 3, &mut rng)?;
            x = tape.add(x, o)?;
            let h2 = tape.layer_norm(x, self.lv(l, LN2_G), self.lv(l, LN2_B))?;
            let f = tape.matmul(h2, self.lv(l, W1))?;
            let f = tape.add_row(f, self.lv(l, B1))?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, self.lv(l, W2))?;
            let f = tape.add_row(f, self.lv(l, B2))?;
            x = tape.add(x, f)?;
        }
        let lnf = 1 + self.config.layers * SLOTS;
        Ok(tape.layer_norm(x, self.vars[lnf], self.vars[lnf + 1])?)
    }

    /// Pooled `1 × D` encoding over non-PAD positions.
    pub fn encode(&self, tape: &mut Tape, tokens: &[usize], rng: Option<&mut dyn RngCore>) -> Result<Var> {
        let h = self.hidden(tape, tokens, rng)?;
        let keep: Vec<usize> = (0..tokens.len()).filter(|&i| tokens[i] != PAD).collect();
        let h = if keep.len() == tokens.len() || keep.is_empty() {
            h
        } else {
            tape.select_rows(h, &keep)?
        };
        Ok(tape.mean_rows(h)?)
    }

    /// Log-probabilities of `tokens[from..]` given their prefixes, as a vector
    /// of length `tokens.len() - from`. Requires `from >= 1`.
    pub fn target_log_probs(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        from: usize,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        if from == 0 || from >= tokens.len() {
            return Err(EncoderError::Config(format!(
                "target range {from}.. invalid for {} tokens",
                tokens.len()
            )));
        }
        let inputs = &tokens[..tokens.len() - 1];
        let h = self.hidden(tape, inputs, rng)?;
        let rows: Vec<usize> = (from - 1..inputs.len()).collect();
        let h = tape.select_rows(h, &rows)?;
        let head = self.vars[self.vars.len() - 1];
        let logits = tape.matmul(h, head)?;
        Ok(tape.token_log_probs(logits, &tokens[from..])?)
    }
}

/// Incremental tape-free forward pass with a per-layer key/value cache.
pub struct Runner<'a> {
    params: &'a EncoderParams,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
    pos: Tensor,
}

impl<'a> Runner<'a> {
    pub fn new(params: &'a EncoderParams) -> Self {
        let c = &params.config;
        Self {
            params,
            keys: vec![Vec::new(); c.layers],
            values: vec![Vec::new(); c.layers],
            len: 0,
            pos: positions(c.max_len, c.hidden),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn projection(&self, h: &[f64], layer: usize, p: usize) -> Vec<f64> {
        let c = &self.params.config;
        let (d, r) = (c.hidden, c.lora_rank);
        let base = kernels::matmul(h, self.params.lt(layer, WQ + p).data(), 1, d, d);
        let low = kernels::matmul(h, self.params.lt(layer, LORA_A + 2 * p).data(), 1, d, r);
        let delta = kernels::matmul(&low, self.params.lt(layer, LORA_A + 2 * p + 1).data(), 1, r, d);
        base.iter().zip(&delta).map(|(a, b)| a + b).collect()
    }

    /// Feeds one token and returns its final-norm hidden state.
    pub fn push(&mut self, token: usize) -> Result<Vec<f64>> {
        let p = self.params;
        let c = &p.config;
        if self.len >= c.max_len {
            return Err(EncoderError::TooLong {
                len: self.len + 1,
                max: c.max_len,
            });
        }
        if token >= VOCAB_SIZE {
            return Err(EncoderError::Config(format!("token {token} outside vocabulary")));
        }
        let d = c.hidden;
        let mut x: Vec<f64> = p.t(0).row(token).iter().zip(self.pos.row(self.len)).map(|(e, q)| e + q).collect();
        let mut h = vec![0.0; d];
        let mut scratch = vec![0.0; d];
        let mut probs = vec![0.0; c.heads * (self.len + 1)];
        for l in 0..c.layers {
            kernels::layer_norm_row(&x, p.lt(l, LN1_G).data(), p.lt(l, LN1_B).data(), &mut h, &mut scratch);
            let q = self.projection(&h, l, 0);
            let k = self.projection(&h, l, 1);
            let v = self.projection(&h, l, 2);
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            let mut att = vec![0.0; d];
            kernels::attend_row(&q, &self.keys[l], &self.values[l], self.len + 1, c.heads, &mut att, &mut probs);
            let o = self.projection(&att, l, 3);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
            kernels::layer_norm_row(&x, p.lt(l, LN2_G).data(), p.lt(l, LN2_B).data(), &mut h, &mut scratch);
            let f = c.ffn();
            let mut f1 = kernels::matmul(&h, p.lt(l, W1).data(), 1, d, f);
            f1.iter_mut().zip(p.lt(l, B1).data()).for_each(|(a, b)| *a = kernels::gelu(*a + b));
            let mut f2 = kernels::matmul(&f1, p.lt(l, W2).data(), 1, f, d);
            f2.iter_mut().zip(p.lt(l, B2).data()).for_each(|(a, b)| *a += b);
            x.iter_mut().zip(&f2).for_each(|(a, b)| *a += b);
        }
        let lnf = p.lnf_index();
        kernels::layer_norm_row(&x, p.t(lnf).data(), p.t(lnf + 1).data(), &mut h, &mut scratch);
        self.len += 1;
        Ok(h)
    }

    /// Output-head logits for a hidden state returned by [`Runner::push`].
    pub fn logits(&self, hidden: &[f64]) -> Vec<f64> {
        let d = self.params.config.hidden;
        kernels::matmul(hidden, self.params.t(self.params.head_index()).data(), 1, d, VOCAB_SIZE)
    }
}
