//! Joint training of the text encoder and a relation-typed GraphSAGE model.
//!
//! In the asymmetric paradigm only target nodes are encoded with the live
//! encoder; every sampled neighbor reads a vector cached from the initial
//! parameters. The naive paradigm encodes every node of every sampled
//! computation tree with live parameters, and the frozen paradigm reads all
//! vectors, targets included, from the cache.

use std::io::{BufRead, Read, Write};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::encoder::{tokenize, BindMode, BoundEncoder, EncoderError, EncoderParams};
use crate::graph::{mix_seed, HeteroGraph, LayeredSample, Split};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{CombinePlan, Tape, Tensor, TensorError, UnaryOp, Var};

#[derive(Debug, Error)]
pub enum CotrainError {
    #[error("invalid co-training config: {0}")]
    Config(String),
    #[error("embedding cache provenance {cache} does not match registered encoder snapshot {registered}")]
    Provenance { cache: String, registered: String },
    #[error("missing augmented text for node {0}")]
    MissingText(usize),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NumericalAbort { epoch: usize, batch: usize, loss: f64 },
    #[error("tape memory budget exhausted: need {requested} bytes, limit {limit}")]
    OutOfMemory { requested: usize, limit: usize },
    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },
    #[error(transparent)]
    Encoder(EncoderError),
    #[error(transparent)]
    Tensor(TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<TensorError> for CotrainError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::OutOfMemory { requested, limit } => CotrainError::OutOfMemory { requested, limit },
            other => CotrainError::Tensor(other),
        }
    }
}

impl From<EncoderError> for CotrainError {
    fn from(e: EncoderError) -> Self {
        match e {
            EncoderError::Tensor(t) => t.into(),
            other => CotrainError::Encoder(other),
        }
    }
}

pub type Result<T, E = CotrainError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Paradigm {
    /// Fresh encodes for targets, cached vectors for neighbors.
    Asymmetric,
    /// Fresh encodes for every node of every computation tree.
    Naive,
    /// Cached vectors everywhere; the encoder is not trained.
    Frozen,
}

impl std::str::FromStr for Paradigm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "asymmetric" => Ok(Paradigm::Asymmetric),
            "naive" => Ok(Paradigm::Naive),
            "frozen" => Ok(Paradigm::Frozen),
            other => Err(format!("unknown paradigm `{other}` (expected asymmetric, naive or frozen)")),
        }
    }
}

impl std::fmt::Display for Paradigm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Paradigm::Asymmetric => "asymmetric",
            Paradigm::Naive => "naive",
            Paradigm::Frozen => "frozen",
        })
    }
}

/// How per-relation means are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelationCombine {
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CotrainConfig {
    pub paradigm: Paradigm,
    /// Neighbors sampled per (parent, relation).
    pub k: usize,
    /// Sampling hops; also the number of message-passing layers.
    pub hops: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr_encoder: f64,
    pub lr_gnn: f64,
    pub activation: UnaryOp,
    pub combine: RelationCombine,
    /// Draw a new neighborhood sample every epoch.
    pub resample_each_epoch: bool,
    /// Sampling seed used for validation and prediction.
    pub eval_seed: u64,
    /// Rebuild the cache from live parameters every this many epochs.
    pub refresh_every: Option<usize>,
    /// Tape byte budget per training step.
    pub memory_limit: Option<usize>,
    pub seed: u64,
}

impl Default for CotrainConfig {
    fn default() -> Self {
        Self {
            paradigm: Paradigm::Asymmetric,
            k: 10,
            hops: 2,
            batch_size: 128,
            max_epochs: 300,
            patience: 10,
            lr_encoder: 1e-3,
            lr_gnn: 1e-3,
            activation: UnaryOp::Relu,
            combine: RelationCombine::Mean,
            resample_each_epoch: true,
            eval_seed: 7,
            refresh_every: None,
            memory_limit: None,
            seed: 0,
        }
    }
}

impl CotrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(CotrainError::Config(m.to_string()));
        if self.k == 0 {
            return fail("k must be at least 1");
        }
        if self.hops == 0 {
            return fail("hops must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if !(self.lr_encoder >= 0.0 && self.lr_gnn >= 0.0) {
            return fail("learning rates must be >= 0");
        }
        if self.refresh_every == Some(0) {
            return fail("refresh_every must be at least 1 when set");
        }
        Ok(())
    }
}

/// Fresh-call and cache-read accounting.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CallLedger {
    pub fresh_calls: u64,
    pub cache_reads: u64,
    pub aggregation_ops: u64,
    /// Fresh calls made while scoring (validation, prediction), kept apart
    /// from the training counters.
    pub eval_calls: u64,
    pub peak_batch: usize,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub fresh_encoder_calls: u64,
    pub cache_reads: u64,
    pub aggregation_ops: u64,
    pub wall_time_ms: f64,
    pub peak_batch: usize,
}

impl CallLedger {
    pub fn write_csv<W: Write>(&self, w: &mut W, with_time: bool) -> std::io::Result<()> {
        writeln!(w, "epoch,fresh_encoder_calls,cache_reads,wall_time_ms,peak_batch")?;
        for e in &self.epochs {
            let time = if with_time { format!("{:.3}", e.wall_time_ms) } else { "-".into() };
            writeln!(
                w,
                "{},{},{},{},{}",
                e.epoch, e.fresh_encoder_calls, e.cache_reads, time, e.peak_batch
            )?;
        }
        Ok(())
    }
}

/// Node vectors computed once with the initial encoder parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingCache {
    dim: usize,
    data: Vec<f64>,
    provenance: String,
    built_epoch: usize,
}

impl EmbeddingCache {
    /// Encodes every node text with `snapshot`, one fresh call per node.
    pub fn build(texts: &[String], snapshot: &EncoderParams, ledger: &mut CallLedger) -> Result<Self> {
        let dim = snapshot.config().hidden;
        let max_len = snapshot.config().max_len;
        let mut data = Vec::with_capacity(texts.len() * dim);
        for text in texts {
            let v = snapshot.encode_tokens(&tokenize(text, max_len))?;
            data.extend_from_slice(v.data());
            ledger.fresh_calls += 1;
        }
        Ok(Self {
            dim,
            data,
            provenance: snapshot.checksum(),
            built_epoch: 0,
        })
    }

    /// Like [`EmbeddingCache::build`], but reports which node lacks text.
    pub fn build_checked(
        texts: &[Option<String>],
        snapshot: &EncoderParams,
        ledger: &mut CallLedger,
    ) -> Result<Self> {
        let owned: Vec<String> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| t.clone().ok_or(CotrainError::MissingText(i)))
            .collect::<Result<_>>()?;
        Self::build(&owned, snapshot, ledger)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, node: usize) -> &[f64] {
        &self.data[node * self.dim..(node + 1) * self.dim]
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn built_epoch(&self) -> usize {
        self.built_epoch
    }

    /// SHA-256 over dimensions, vector bytes and provenance.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        h.update(self.provenance.as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `u64` node count, then one `1 × D` tensor per node, then the
    /// provenance checksum as a length-prefixed string.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for i in 0..self.len() {
            Tensor::new(vec![1, self.dim], self.get(i).to_vec())?.write_to(w)?;
        }
        w.write_all(&(self.provenance.len() as u32).to_le_bytes())?;
        w.write_all(self.provenance.as_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let bad = |msg: String| CotrainError::Format { what: "cache", msg };
        let mut n = [0u8; 8];
        r.read_exact(&mut n)?;
        let n = u64::from_le_bytes(n) as usize;
        let mut data = Vec::new();
        let mut dim = 0;
        for i in 0..n {
            let t = Tensor::read_from(r)?;
            if t.rows() != 1 || (i > 0 && t.cols() != dim) {
                return Err(bad(format!("node {i} vector has shape {:?}", t.shape())));
            }
            dim = t.cols();
            data.extend_from_slice(t.data());
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut prov = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut prov)?;
        let provenance = String::from_utf8(prov).map_err(|e| bad(e.to_string()))?;
        if n == 0 {
            return Err(bad("empty cache".into()));
        }
        Ok(Self {
            dim,
            data,
            provenance,
            built_epoch: 0,
        })
    }
}

/// Message-passing weights (`D × D` per layer) and the linear scoring head.
#[derive(Clone, Debug, PartialEq)]
pub struct GnnParams {
    pub layers: Vec<Tensor>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl GnnParams {
    pub fn init(dim: usize, layers: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = (2.0 / dim as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        let layers = (0..layers)
            .map(|_| {
                let data = (0..dim * dim).map(|_| dist.sample(&mut rng)).collect();
                Tensor::new(vec![dim, dim], data).expect("shape matches")
            })
            .collect();
        let hd = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("positive std");
        let head = (0..dim).map(|_| hd.sample(&mut rng)).collect();
        Self {
            layers,
            head_w: Tensor::new(vec![dim, 1], head).expect("shape matches"),
            head_b: Tensor::zeros(&[1]),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.layers.iter_mut().collect();
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.layers.iter().collect();
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundGnn> {
        let layers = self
            .layers
            .iter()
            .map(|w| tape.leaf(w.clone(), trainable))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(BoundGnn {
            head_w: tape.leaf(self.head_w.clone(), trainable)?,
            head_b: tape.leaf(self.head_b.clone(), trainable)?,
            layers,
        })
    }
}

#[derive(Clone, Debug)]
pub struct BoundGnn {
    pub layers: Vec<Var>,
    pub head_w: Var,
    pub head_b: Var,
}

impl BoundGnn {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.layers.clone();
        v.push(self.head_w);
        v.push(self.head_b);
        v
    }
}

/// Row layout of a batch of computation trees, ordered level by level
/// across the batch so each layer's outputs form a prefix of its inputs.
#[derive(Clone, Debug)]
pub struct BatchLayout {
    /// `(node id, level)` per row.
    pub rows: Vec<(usize, usize)>,
    /// Start row of each level.
    pub level_start: Vec<usize>,
    /// For each row, `(relation, child row)` pairs into the next level.
    children: Vec<Vec<(usize, usize)>>,
    pub relations: usize,
}

impl BatchLayout {
    pub fn new(samples: &[LayeredSample], relations: usize) -> Self {
        let hops = samples.first().map_or(0, LayeredSample::hops);
        let mut rows = Vec::new();
        let mut level_start = Vec::with_capacity(hops + 1);
        // sample_start[s] = first row of sample s within the current level.
        let mut prev_start: Vec<usize> = Vec::new();
        let mut children: Vec<Vec<(usize, usize)>> = Vec::new();
        for level in 0..=hops {
            level_start.push(rows.len());
            let mut starts = Vec::with_capacity(samples.len());
            for (s, sample) in samples.iter().enumerate() {
                starts.push(rows.len());
                if level == 0 {
                    rows.push((sample.target, 0));
                    children.push(Vec::new());
                    continue;
                }
                for node in &sample.layers[level - 1] {
                    let row = rows.len();
                    rows.push((node.id, level));
                    children.push(Vec::new());
                    children[prev_start[s] + node.parent].push((node.relation, row));
                }
            }
            prev_start = starts;
        }
        Self {
            rows,
            level_start,
            children,
            relations,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn hops(&self) -> usize {
        self.level_start.len() - 1
    }

    /// Combine plan for message-passing layer `layer` (1-based): one output
    /// row per node at levels `0..=hops - layer`, each the relation-combined
    /// mean over itself and its children.
    pub fn plan(&self, layer: usize, combine: RelationCombine) -> CombinePlan {
        let out_levels = self.hops() + 1 - layer;
        let out_rows = if out_levels > self.hops() {
            self.len()
        } else {
            self.level_start[out_levels]
        };
        let scale = match combine {
            RelationCombine::Mean => 1.0 / self.relations as f64,
            RelationCombine::Sum => 1.0,
        };
        let mut plan = CombinePlan::new();
        let mut counts = vec![0usize; self.relations];
        for row in 0..out_rows {
            counts.iter_mut().for_each(|c| *c = 0);
            for &(r, _) in &self.children[row] {
                counts[r] += 1;
            }
            let self_weight: f64 = counts.iter().map(|&c| scale / (1 + c) as f64).sum();
            let entries = std::iter::once((row, self_weight)).chain(
                self.children[row]
                    .iter()
                    .map(|&(r, child)| (child, scale / (1 + counts[r]) as f64)),
            );
            plan.push_row(entries);
        }
        plan
    }
}

/// Relation-typed message passing over a batch: `x0` holds level-0 vectors
/// for every row of `layout`. Returns the final target representations.
pub fn sage_forward(
    tape: &mut Tape,
    x0: Var,
    layout: &BatchLayout,
    gnn: &BoundGnn,
    activation: UnaryOp,
    combine: RelationCombine,
) -> Result<(Var, u64)> {
    if tape.shape(x0)[0] != layout.len() {
        return Err(CotrainError::Config(format!(
            "input has {} rows, layout has {}",
            tape.shape(x0)[0],
            layout.len()
        )));
    }
    if gnn.layers.len() != layout.hops() {
        return Err(CotrainError::Config(format!(
            "{} message-passing layers for a {}-hop sample",
            gnn.layers.len(),
            layout.hops()
        )));
    }
    let mut h = x0;
    let mut ops = 0u64;
    for (l, &w) in gnn.layers.iter().enumerate() {
        let plan = layout.plan(l + 1, combine);
        ops += plan.terms() as u64;
        let z = tape.combine(h, plan)?;
        let z = tape.matmul(z, w)?;
        h = tape.unary(z, activation)?;
    }
    Ok((h, ops))
}

/// Sigmoid scores (`B × 1`) from target representations.
pub fn head_scores(tape: &mut Tape, h: Var, gnn: &BoundGnn) -> Result<Var> {
    let z = tape.matmul(h, gnn.head_w)?;
    let z = tape.add_row(z, gnn.head_b)?;
    Ok(tape.sigmoid(z)?)
}

/// Mean binary cross-entropy over a batch of scores in (0, 1).
pub fn bce_loss(tape: &mut Tape, scores: Var, labels: &[f64]) -> Result<Var> {
    if labels.is_empty() {
        return Err(CotrainError::Config("empty batch".into()));
    }
    Ok(tape.bce(scores, labels)?)
}

/// Encoder plus graph model, with the checksum of the encoder snapshot whose
/// cache the model is paired with.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: EncoderParams,
    pub gnn: GnnParams,
    pub registered: String,
}

impl Model {
    pub fn new(encoder: EncoderParams, hops: usize, seed: u64) -> Self {
        let dim = encoder.config().hidden;
        let registered = encoder.checksum();
        Self {
            gnn: GnnParams::init(dim, hops, seed),
            encoder,
            registered,
        }
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "format=fraudcot-model-v1")?;
        writeln!(w, "gnn_layers={}", self.gnn.layers.len())?;
        writeln!(w, "registered={}", self.registered)?;
        writeln!(w, "end")?;
        self.encoder.write_checkpoint(w)?;
        for t in self.gnn.tensors() {
            t.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(r: &mut R) -> Result<Self> {
        let bad = |msg: String| CotrainError::Format { what: "model checkpoint", msg };
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
        if fields.get("format").map(String::as_str) != Some("fraudcot-model-v1") {
            return Err(bad("unknown format".into()));
        }
        let layers: usize = fields
            .get("gnn_layers")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing gnn_layers".into()))?;
        let registered = fields.get("registered").cloned().unwrap_or_default();
        let encoder = EncoderParams::read_checkpoint(r)?;
        let d = encoder.config().hidden;
        let mut read = |shape: &[usize]| -> Result<Tensor> {
            let t = Tensor::read_from(r)?;
            if t.shape() != shape {
                return Err(bad(format!("tensor shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t)
        };
        let gnn_layers = (0..layers).map(|_| read(&[d, d])).collect::<Result<Vec<_>>>()?;
        let gnn = GnnParams {
            layers: gnn_layers,
            head_w: read(&[d, 1])?,
            head_b: read(&[1])?,
        };
        Ok(Self {
            encoder,
            gnn,
            registered,
        })
    }
}

/// Everything a training or scoring pass reads.
pub struct Inputs<'a> {
    pub graph: &'a HeteroGraph,
    /// Per-node tokenized text (augmented or raw).
    pub tokens: &'a [Vec<usize>],
    pub cache: Option<&'a EmbeddingCache>,
}

impl<'a> Inputs<'a> {
    pub fn tokenize_all(texts: &[String], max_len: usize) -> Vec<Vec<usize>> {
        texts.iter().map(|t| tokenize(t, max_len)).collect()
    }
}

/// One assembled forward pass.
#[derive(Debug)]
pub struct BatchForward {
    pub scores: Var,
    pub layout: BatchLayout,
    /// The constant block of cached rows, if any.
    pub cached: Option<Var>,
    /// Fresh target encodings on the tape, in batch order.
    pub fresh: Vec<Var>,
    pub fresh_calls: u64,
    pub cache_reads: u64,
    pub aggregation_ops: u64,
}

fn check_provenance(model: &Model, cache: &EmbeddingCache) -> Result<()> {
    if cache.provenance() != model.registered {
        return Err(CotrainError::Provenance {
            cache: cache.provenance().to_string(),
            registered: model.registered.clone(),
        });
    }
    Ok(())
}

/// Assembles and runs the forward pass for a batch of sampled trees.
///
/// With `encoder` bound, fresh rows are encoded on the tape; otherwise they
/// are encoded tape-free (scoring). Rows are fresh or cached by paradigm.
#[allow(clippy::too_many_arguments)]
pub fn forward_batch(
    tape: &mut Tape,
    model: &Model,
    encoder: Option<&BoundEncoder>,
    gnn: &BoundGnn,
    inputs: &Inputs<'_>,
    samples: &[LayeredSample],
    config: &CotrainConfig,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<BatchForward> {
    let layout = BatchLayout::new(samples, inputs.graph.num_relations());
    let fresh_rows = match config.paradigm {
        Paradigm::Asymmetric => samples.len(),
        Paradigm::Naive => layout.len(),
        Paradigm::Frozen => 0,
    };
    let cache = if fresh_rows < layout.len() {
        let c = inputs
            .cache
            .ok_or_else(|| CotrainError::Config(format!("{} paradigm needs an embedding cache", config.paradigm)))?;
        check_provenance(model, c)?;
        Some(c)
    } else {
        None
    };
    let d = model.encoder.config().hidden;
    let mut parts = Vec::new();
    let mut fresh = Vec::new();
    let mut constant_rows: Vec<f64> = Vec::new();
    for &(node, _) in &layout.rows[..fresh_rows] {
        let toks = &inputs.tokens[node];
        match encoder {
            Some(enc) => {
                let v = enc.encode(tape, toks, rng.as_mut().map(|r| &mut **r as &mut dyn RngCore))?;
                fresh.push(v);
                parts.push(v);
            }
            None => constant_rows.extend_from_slice(model.encoder.encode_tokens(toks)?.data()),
        }
    }
    if let Some(c) = cache {
        for &(node, _) in &layout.rows[fresh_rows..] {
            constant_rows.extend_from_slice(c.get(node));
        }
    }
    let mut cached = None;
    if !constant_rows.is_empty() {
        let n = constant_rows.len() / d;
        let block = tape.constant(Tensor::new(vec![n, d], constant_rows)?)?;
        if cache.is_some() {
            cached = Some(block);
        }
        parts.push(block);
    }
    let x0 = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
    let (h, aggregation_ops) = sage_forward(tape, x0, &layout, gnn, config.activation, config.combine)?;
    let scores = head_scores(tape, h, gnn)?;
    Ok(BatchForward {
        scores,
        cached,
        fresh,
        fresh_calls: fresh_rows as u64,
        cache_reads: (layout.len() - fresh_rows) as u64,
        aggregation_ops,
        layout,
    })
}

fn labels_of(graph: &HeteroGraph, nodes: &[usize]) -> Result<Vec<f64>> {
    nodes
        .iter()
        .map(|&v| {
            graph
                .node(v)
                .label
                .map(|l| if l { 1.0 } else { 0.0 })
                .ok_or_else(|| CotrainError::Config(format!("node {v} has no label")))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub fresh_calls: u64,
    pub cache_reads: u64,
    pub aggregation_ops: u64,
    pub wall_time_ms: f64,
    pub peak_batch: usize,
}

/// Optimizer state carried across epochs.
pub struct Trainer {
    pub config: CotrainConfig,
    enc_opt: Adam,
    gnn_opt: Adam,
    pub epoch: usize,
    pub ledger: CallLedger,
}

impl Trainer {
    pub fn new(config: CotrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = |lr| {
            Adam::new(AdamConfig {
                lr,
                ..AdamConfig::default()
            })
        };
        Ok(Self {
            enc_opt: adam(config.lr_encoder),
            gnn_opt: adam(config.lr_gnn),
            config,
            epoch: 0,
            ledger: CallLedger::default(),
        })
    }

    fn sample_seed(&self) -> u64 {
        if self.config.resample_each_epoch {
            mix_seed(self.config.seed, self.epoch as u64 + 1)
        } else {
            self.config.seed
        }
    }

    /// One training step on `targets`. Returns the batch loss and forward stats.
    pub fn step(
        &mut self,
        model: &mut Model,
        inputs: &Inputs<'_>,
        targets: &[usize],
        sample_seed: u64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, BatchForward)> {
        let c = &self.config;
        let samples: Vec<LayeredSample> = targets
            .iter()
            .map(|&v| inputs.graph.sample_neighborhood(v, c.k, c.hops, sample_seed))
            .collect();
        let labels = labels_of(inputs.graph, targets)?;
        let mut tape = match c.memory_limit {
            Some(limit) => Tape::with_memory_limit(limit),
            None => Tape::new(),
        };
        let train_encoder = c.paradigm != Paradigm::Frozen;
        let enc = if train_encoder {
            Some(model.encoder.bind(&mut tape, BindMode::Adapters)?)
        } else {
            None
        };
        let gnn = model.gnn.bind(&mut tape, true)?;
        let fwd = forward_batch(
            &mut tape,
            model,
            enc.as_ref(),
            &gnn,
            inputs,
            &samples,
            c,
            Some(rng as &mut dyn RngCore),
        )?;
        let loss = bce_loss(&mut tape, fwd.scores, &labels)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(CotrainError::NumericalAbort {
                epoch: self.epoch,
                batch: 0,
                loss: value,
            });
        }
        tape.backward(loss)?;
        if let Some(enc) = &enc {
            let grads: Vec<Vec<f64>> = enc
                .trainable_vars()
                .iter()
                .map(|&v| tape.grad_tensor(v).into_data())
                .collect();
            let refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            self.enc_opt.step(&mut model.encoder.trainable_mut(BindMode::Adapters), &refs);
        }
        let grads: Vec<Vec<f64>> = gnn.vars().iter().map(|&v| tape.grad_tensor(v).into_data()).collect();
        let refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        self.gnn_opt.step(&mut model.gnn.tensors_mut(), &refs);
        Ok((value, fwd))
    }

    /// One pass over the train split in shuffled batches.
    pub fn train_epoch(&mut self, model: &mut Model, inputs: &Inputs<'_>) -> Result<EpochStats> {
        let start = Instant::now();
        let mut train = inputs.graph.split_ids(Split::Train);
        if train.is_empty() {
            return Err(CotrainError::Config("empty train split".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.config.seed ^ 0x5eed, self.epoch as u64));
        train.shuffle(&mut rng);
        let sample_seed = self.sample_seed();
        let mut stats = EpochStats {
            epoch: self.epoch,
            train_loss: 0.0,
            fresh_calls: 0,
            cache_reads: 0,
            aggregation_ops: 0,
            wall_time_ms: 0.0,
            peak_batch: 0,
        };
        let mut weighted = 0.0;
        for (b, batch) in train.chunks(self.config.batch_size).enumerate() {
            let (loss, fwd) = self.step(model, inputs, batch, sample_seed, &mut rng).map_err(|e| match e {
                CotrainError::NumericalAbort { epoch, loss, .. } => CotrainError::NumericalAbort { epoch, batch: b, loss },
                other => other,
            })?;
            weighted += loss * batch.len() as f64;
            stats.fresh_calls += fwd.fresh_calls;
            stats.cache_reads += fwd.cache_reads;
            stats.aggregation_ops += fwd.aggregation_ops;
            stats.peak_batch = stats.peak_batch.max(batch.len());
        }
        stats.train_loss = weighted / train.len() as f64;
        stats.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
        self.ledger.fresh_calls += stats.fresh_calls;
        self.ledger.cache_reads += stats.cache_reads;
        self.ledger.aggregation_ops += stats.aggregation_ops;
        self.ledger.peak_batch = self.ledger.peak_batch.max(stats.peak_batch);
        self.ledger.epochs.push(EpochRecord {
            epoch: stats.epoch,
            fresh_encoder_calls: stats.fresh_calls,
            cache_reads: stats.cache_reads,
            aggregation_ops: stats.aggregation_ops,
            wall_time_ms: stats.wall_time_ms,
            peak_batch: stats.peak_batch,
        });
        self.epoch += 1;
        Ok(stats)
    }
}

/// Scores for `nodes` with fixed sampling seed `seed`, in input order.
pub fn predict_scores(
    model: &Model,
    inputs: &Inputs<'_>,
    nodes: &[usize],
    config: &CotrainConfig,
    seed: u64,
    ledger: Option<&mut CallLedger>,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(nodes.len());
    let mut calls = 0;
    for batch in nodes.chunks(config.batch_size) {
        let samples: Vec<LayeredSample> = batch
            .iter()
            .map(|&v| inputs.graph.sample_neighborhood(v, config.k, config.hops, seed))
            .collect();
        let mut tape = Tape::new();
        let gnn = model.gnn.bind(&mut tape, false)?;
        let fwd = forward_batch(&mut tape, model, None, &gnn, inputs, &samples, config, None)?;
        calls += fwd.fresh_calls;
        out.extend_from_slice(tape.value(fwd.scores).data());
    }
    if let Some(l) = ledger {
        l.eval_calls += calls;
    }
    Ok(out)
}

/// Mean BCE of the model on `nodes` (tape-free encoder, fixed sampling seed).
pub fn evaluate_loss(model: &Model, inputs: &Inputs<'_>, nodes: &[usize], config: &CotrainConfig) -> Result<f64> {
    let scores = predict_scores(model, inputs, nodes, config, config.eval_seed, None)?;
    let labels = labels_of(inputs.graph, nodes)?;
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::new(vec![scores.len(), 1], scores)?)?;
    let loss = bce_loss(&mut tape, s, &labels)?;
    Ok(tape.value(loss).item())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub stats: EpochStats,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub history: Vec<EpochSummary>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub ledger: CallLedger,
    /// Cache checksum observed before every epoch.
    pub cache_checksums: Vec<String>,
}

/// Trains up to `max_epochs` with patience-based early stopping on validation
/// loss and leaves `model` at the best epoch's parameters.
pub fn fit(
    model: &mut Model,
    graph: &HeteroGraph,
    tokens: &[Vec<usize>],
    texts: &[String],
    cache: &mut Option<EmbeddingCache>,
    config: &CotrainConfig,
) -> Result<FitResult> {
    let val = graph.split_ids(Split::Val);
    if val.is_empty() || graph.split_ids(Split::Train).is_empty() {
        return Err(CotrainError::Config("train and validation splits must be nonempty".into()));
    }
    let mut trainer = Trainer::new(config.clone())?;
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut stale = 0usize;
    let mut cache_checksums = Vec::new();
    for epoch in 0..config.max_epochs {
        if let (Some(every), Some(c)) = (config.refresh_every, cache.as_mut()) {
            if epoch > 0 && epoch % every == 0 {
                let mut scratch = CallLedger::default();
                let mut fresh = EmbeddingCache::build(texts, &model.encoder, &mut scratch)?;
                fresh.built_epoch = epoch;
                model.registered = fresh.provenance.clone();
                *c = fresh;
            }
        }
        if let Some(c) = cache.as_ref() {
            cache_checksums.push(c.checksum());
        }
        let inputs = Inputs {
            graph,
            tokens,
            cache: cache.as_ref(),
        };
        let stats = trainer.train_epoch(model, &inputs)?;
        let val_loss = evaluate_loss(model, &inputs, &val, config)?;
        if !val_loss.is_finite() {
            return Err(CotrainError::NumericalAbort {
                epoch,
                batch: 0,
                loss: val_loss,
            });
        }
        log::debug!("epoch {epoch}: train {:.5} val {:.5}", stats.train_loss, val_loss);
        history.push(EpochSummary { stats, val_loss });
        let improved = best.as_ref().is_none_or(|(b, _, _)| val_loss < *b);
        if improved {
            best = Some((val_loss, epoch, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale > config.patience {
                break;
            }
        }
    }
    if let Some(c) = cache.as_ref() {
        cache_checksums.push(c.checksum());
    }
    let (best_val_loss, best_epoch, best_model) = best.ok_or_else(|| CotrainError::Config("max_epochs is 0".into()))?;
    *model = best_model;
    Ok(FitResult {
        history,
        best_epoch,
        best_val_loss,
        ledger: trainer.ledger,
        cache_checksums,
    })
}
