//! Selective reasoning distillation: prompts built from ego-graphs, teacher
//! reasoning paths labeled by whether their final prediction is right, a
//! student fine-tuned to imitate correct paths and avoid incorrect ones, and
//! generation of one reasoning text per node for text augmentation.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::seq::{index, SliceRandom};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{byte_tokens, detokenize, BindMode, EncoderError, EncoderParams, BOS, EOS, SEP};
use crate::graph::{mix_seed, HeteroGraph, Split};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("invalid distillation config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DistillError> = std::result::Result<T, E>;

/// Separator placed between a node's raw text and its generated reasoning.
pub const ANALYSIS_SEPARATOR: &str = "\n[ANALYSIS]\n";

/// Class words used in prompts and parsed back out of reasoning.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocab {
    pub positive: String,
    pub negative: String,
}

impl Default for LabelVocab {
    fn default() -> Self {
        Self {
            positive: "Fraud".into(),
            negative: "Benign".into(),
        }
    }
}

impl LabelVocab {
    pub fn word(&self, label: bool) -> &str {
        if label {
            &self.positive
        } else {
            &self.negative
        }
    }
}

/// A rendered prompt. Neighbor lines are kept separately so the prompt can be
/// shortened to a token budget by dropping trailing neighbors.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptRecord {
    pub node: usize,
    pub target_text: String,
    /// `(relation name, neighbor text)` in rendering order.
    pub neighbors: Vec<(String, String)>,
    pub vocab: LabelVocab,
}

const PROMPT_INTRO: &str = "Fraud check.";

impl PromptRecord {
    fn render_with(&self, neighbors: usize, target: &str) -> String {
        let mut s = String::new();
        s.push_str(PROMPT_INTRO);
        s.push_str("\nTarget: ");
        s.push_str(target);
        s.push_str("\nNeighbors:");
        if neighbors == 0 {
            s.push_str(" (none)");
        }
        for (rel, text) in &self.neighbors[..neighbors] {
            s.push_str("\n[");
            s.push_str(rel);
            s.push_str("] ");
            s.push_str(text);
        }
        s.push_str(&format!(
            "\nGive target reasons, link reasons, then Prediction: {} or {}.",
            self.vocab.positive, self.vocab.negative
        ));
        s
    }

    pub fn text(&self) -> String {
        self.render_with(self.neighbors.len(), &self.target_text)
    }

    /// Rendering of at most `max_bytes` bytes: trailing neighbor lines are
    /// dropped first, then the target text is cut.
    pub fn render_within(&self, max_bytes: usize) -> String {
        for n in (0..=self.neighbors.len()).rev() {
            let s = self.render_with(n, &self.target_text);
            if s.len() <= max_bytes {
                return s;
            }
        }
        let fixed = self.render_with(0, "").len();
        let keep = max_bytes.saturating_sub(fixed);
        let mut cut = keep.min(self.target_text.len());
        while !self.target_text.is_char_boundary(cut) {
            cut -= 1;
        }
        self.render_with(0, &self.target_text[..cut])
    }
}

/// Prompt for node `v` with up to `cap` neighbors per relation, ascending by id.
pub fn build_prompt(graph: &HeteroGraph, v: usize, cap: usize, vocab: &LabelVocab) -> PromptRecord {
    let ego = graph.ego_graph(v, 1, cap);
    let neighbors = ego
        .relations
        .into_iter()
        .flat_map(|r| {
            let name = r.name;
            r.neighbors.into_iter().map(move |(_, t)| (name.clone(), t))
        })
        .collect();
    PromptRecord {
        node: v,
        target_text: ego.text,
        neighbors,
        vocab: vocab.clone(),
    }
}

/// Final prediction in a reasoning text: the last line starting with
/// `Prediction:` (any case) whose answer begins with a class word. When both
/// words match as prefixes the longer one wins.
pub fn parse_prediction(text: &str, vocab: &LabelVocab) -> Option<bool> {
    const KEY: &str = "prediction:";
    let line = text.lines().rev().find(|l| {
        let t = l.trim_start();
        t.len() >= KEY.len() && t.is_char_boundary(KEY.len()) && t[..KEY.len()].eq_ignore_ascii_case(KEY)
    })?;
    let answer = line.trim_start()[KEY.len()..].trim_start().to_ascii_lowercase();
    let mut words = [(vocab.positive.to_ascii_lowercase(), true), (vocab.negative.to_ascii_lowercase(), false)];
    words.sort_by_key(|(w, _)| std::cmp::Reverse(w.len()));
    words
        .into_iter()
        .find(|(w, _)| !w.is_empty() && answer.starts_with(w.as_str()))
        .map(|(_, label)| label)
}

#[derive(Debug, Error)]
#[error("teacher failed: {0}")]
pub struct TeacherError(pub String);

/// Source of reasoning paths. Implementations must be deterministic in
/// `(prompt, path, seed)`.
pub trait Teacher {
    fn generate(&self, prompt: &PromptRecord, path: usize, seed: u64) -> Result<String, TeacherError>;
}

/// Replays reasoning recorded elsewhere, keyed by `(node id, path index)`.
#[derive(Clone, Debug, Default)]
pub struct TranscriptTeacher {
    entries: HashMap<(usize, usize), String>,
}

#[derive(Serialize, Deserialize)]
struct TranscriptLine {
    node_id: usize,
    path: usize,
    reasoning: String,
}

impl TranscriptTeacher {
    pub fn from_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut entries = HashMap::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let t: TranscriptLine = serde_json::from_str(&line).map_err(|e| DistillError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            entries.insert((t.node_id, t.path), t.reasoning);
        }
        Ok(Self { entries })
    }

    pub fn insert(&mut self, node: usize, path: usize, reasoning: impl Into<String>) {
        self.entries.insert((node, path), reasoning.into());
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Teacher for TranscriptTeacher {
    fn generate(&self, prompt: &PromptRecord, path: usize, _seed: u64) -> Result<String, TeacherError> {
        self.entries
            .get(&(prompt.node, path))
            .cloned()
            .ok_or_else(|| TeacherError(format!("no transcript entry for node {} path {path}", prompt.node)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReasoningTriple {
    pub prompt: PromptRecord,
    pub path: usize,
    pub reasoning: String,
    pub predicted: Option<bool>,
    pub correct: bool,
}

/// Queries `paths` reasoning paths and labels each by whether its parsed
/// prediction equals `label`. A failed query becomes an empty, incorrect path.
pub fn teacher_generate(
    teacher: &dyn Teacher,
    prompt: &PromptRecord,
    label: bool,
    paths: usize,
    seed: u64,
) -> Vec<ReasoningTriple> {
    (0..paths)
        .map(|path| {
            let reasoning = teacher.generate(prompt, path, seed).unwrap_or_else(|e| {
                log::warn!("node {} path {path}: {e}", prompt.node);
                String::new()
            });
            let predicted = parse_prediction(&reasoning, &prompt.vocab);
            ReasoningTriple {
                prompt: prompt.clone(),
                path,
                correct: predicted == Some(label),
                predicted,
                reasoning,
            }
        })
        .collect()
}

/// Class-stratified sample of `u` train nodes, returned in ascending order.
pub fn sample_distillation_nodes(graph: &HeteroGraph, u: usize, seed: u64) -> Result<Vec<usize>> {
    let train = graph.split_ids(Split::Train);
    if u > train.len() {
        return Err(DistillError::Config(format!(
            "cannot sample {u} distillation nodes from a train split of {}",
            train.len()
        )));
    }
    let (pos, neg): (Vec<usize>, Vec<usize>) = train.iter().partition(|&&v| graph.node(v).label == Some(true));
    let want_pos = (u as f64 * pos.len() as f64 / train.len() as f64).round() as usize;
    let n_pos = want_pos.min(pos.len()).max(u.saturating_sub(neg.len()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<usize> = index::sample(&mut rng, pos.len(), n_pos).into_iter().map(|i| pos[i]).collect();
    out.extend(index::sample(&mut rng, neg.len(), u - n_pos).into_iter().map(|i| neg[i]));
    out.sort_unstable();
    Ok(out)
}

/// Prompts for the sampled nodes and `paths` teacher triples for each.
pub fn collect_triples(
    graph: &HeteroGraph,
    nodes: &[usize],
    teacher: &dyn Teacher,
    paths: usize,
    cap: usize,
    vocab: &LabelVocab,
    seed: u64,
) -> Result<Vec<ReasoningTriple>> {
    let mut out = Vec::with_capacity(nodes.len() * paths);
    for &v in nodes {
        let label = graph
            .node(v)
            .label
            .ok_or_else(|| DistillError::Config(format!("distillation node {v} has no label")))?;
        let prompt = build_prompt(graph, v, cap, vocab);
        out.extend(teacher_generate(teacher, &prompt, label, paths, mix_seed(seed, v as u64)));
    }
    Ok(out)
}

/// Token sequence `[BOS] prompt [SEP] reasoning [EOS]` with the index of the
/// first reasoning position. The prompt is shortened to fit `max_len`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillExample {
    pub tokens: Vec<usize>,
    pub from: usize,
    pub positive: bool,
}

impl DistillExample {
    pub fn new(prompt: &PromptRecord, reasoning: &str, positive: bool, max_len: usize) -> Self {
        // Leave room for at least a short prompt when reasoning is long.
        let min_prompt = (max_len / 4).min(64);
        let mut reason = byte_tokens(reasoning);
        reason.truncate(max_len.saturating_sub(3 + min_prompt));
        let budget = max_len - 3 - reason.len();
        let mut tokens = vec![BOS];
        let mut p = byte_tokens(&prompt.render_within(budget));
        p.truncate(budget);
        tokens.extend(p);
        tokens.push(SEP);
        let from = tokens.len();
        tokens.extend(reason);
        tokens.push(EOS);
        Self { tokens, from, positive }
    }

    pub fn from_triple(t: &ReasoningTriple, max_len: usize) -> Self {
        Self::new(&t.prompt, &t.reasoning, t.correct, max_len)
    }

    /// Reasoning length in tokens, excluding the closing EOS.
    pub fn reasoning_len(&self) -> usize {
        self.tokens.len().saturating_sub(self.from + 1)
    }
}

/// Prompt tokens `[BOS] prompt [SEP]` for generation, leaving `reserve`
/// positions free for the generated reasoning.
pub fn generation_prefix(prompt: &PromptRecord, max_len: usize, reserve: usize) -> Vec<usize> {
    let budget = max_len.saturating_sub(2 + reserve).max(1);
    let mut tokens = vec![BOS];
    let mut p = byte_tokens(&prompt.render_within(budget));
    p.truncate(budget);
    tokens.extend(p);
    tokens.push(SEP);
    tokens
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossStats {
    pub triples: usize,
    pub positives: usize,
    pub negatives: usize,
    pub skipped_empty: usize,
}

/// How unlikelihood is applied to a negative reasoning path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum UnlikelihoodForm {
    /// Token-averaged `-log(1 - p_t)` over reasoning positions.
    #[default]
    Token,
    /// `-log(1 - P(r | prompt))` on the whole-sequence probability.
    Sequence,
}

impl std::str::FromStr for UnlikelihoodForm {
    type Err = DistillError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token" => Ok(Self::Token),
            "sequence" => Ok(Self::Sequence),
            other => Err(DistillError::Config(format!("unknown unlikelihood form {other:?}"))),
        }
    }
}

impl std::fmt::Display for UnlikelihoodForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Token => "token",
            Self::Sequence => "sequence",
        })
    }
}

/// Selective distillation loss over a batch:
/// mean over non-empty examples of `y·CE + λ·(1−y)·UL`, with per-example
/// token-averaged cross-entropy and unlikelihood over reasoning positions
/// (closing EOS included). Negatives are not evaluated when `λ = 0`.
pub fn distill_loss(
    tape: &mut Tape,
    encoder: &crate::encoder::BoundEncoder,
    batch: &[DistillExample],
    lambda: f64,
    form: UnlikelihoodForm,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<(Var, LossStats)> {
    let mut stats = LossStats::default();
    let mut terms = Vec::new();
    for ex in batch {
        if ex.reasoning_len() == 0 {
            stats.skipped_empty += 1;
            continue;
        }
        stats.triples += 1;
        if ex.positive {
            stats.positives += 1;
        } else {
            stats.negatives += 1;
            if lambda == 0.0 {
                continue;
            }
        }
        let lp = encoder.target_log_probs(tape, &ex.tokens, ex.from, rng.as_mut().map(|r| &mut **r as &mut dyn RngCore))?;
        let term = if ex.positive {
            let m = tape.mean(lp)?;
            tape.scale(m, -1.0)?
        } else {
            let ul = match form {
                UnlikelihoodForm::Token => {
                    let ul = tape.unlikelihood(lp)?;
                    tape.mean(ul)?
                }
                UnlikelihoodForm::Sequence => {
                    let total = tape.sum(lp)?;
                    tape.unlikelihood(total)?
                }
            };
            tape.scale(ul, lambda)?
        };
        terms.push(term);
    }
    if stats.skipped_empty > 0 {
        log::warn!("{} distillation examples with empty reasoning skipped", stats.skipped_empty);
    }
    let loss = if terms.is_empty() {
        tape.constant(Tensor::scalar(0.0))?
    } else {
        let stacked = tape.concat_rows(&terms)?;
        let total = tape.sum(stacked)?;
        tape.scale(total, 1.0 / stats.triples as f64)?
    };
    Ok((loss, stats))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    /// Number of distillation nodes (U).
    pub nodes: usize,
    /// Teacher paths per node (S).
    pub paths: usize,
    pub lambda: f64,
    pub unlikelihood: UnlikelihoodForm,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Neighbors per relation shown in prompts.
    pub neighbor_cap: usize,
    /// Generation budget for student reasoning.
    pub max_new: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            nodes: 100,
            paths: 5,
            lambda: 100.0,
            unlikelihood: UnlikelihoodForm::Token,
            epochs: 5,
            lr: 1e-3,
            batch_size: 8,
            neighbor_cap: 2,
            max_new: 96,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.paths == 0 {
            return Err(DistillError::Config("paths (S) must be at least 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(DistillError::Config(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(DistillError::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(DistillError::Config(format!("learning rate {} invalid", self.lr)));
        }
        Ok(())
    }
}

/// Adapter-only fine-tuning on distillation examples. Returns the mean
/// training loss of each epoch.
pub fn finetune_student(
    params: &mut EncoderParams,
    examples: &[DistillExample],
    config: &DistillConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    let mut opt = Adam::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<DistillExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, BindMode::Adapters)?;
            let (loss, _) = distill_loss(&mut tape, &bound, &batch, config.lambda, config.unlikelihood, Some(&mut rng))?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(DistillError::Diverged { epoch, loss: value });
            }
            total += value;
            batches += 1;
            tape.backward(loss)?;
            let vars = bound.trainable_vars();
            let grads: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad_tensor(v).into_data()).collect();
            let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            let mut tensors = params.trainable_mut(BindMode::Adapters);
            opt.step(&mut tensors, &grad_refs);
        }
        let mean = total / batches.max(1) as f64;
        log::debug!("distill epoch {epoch}: loss {mean:.6}");
        curve.push(mean);
    }
    Ok(curve)
}

/// Greedy student reasoning for one prompt.
pub fn student_reasoning(params: &EncoderParams, prompt: &PromptRecord, max_new: usize) -> Result<String> {
    let max_len = params.config().max_len;
    let prefix = generation_prefix(prompt, max_len, max_new.min(max_len / 2));
    Ok(detokenize(&params.greedy_generate(&prefix, max_new)?))
}

/// One greedy reasoning text per node, indexed by node id.
pub fn generate_all_cots(
    graph: &HeteroGraph,
    params: &EncoderParams,
    cap: usize,
    vocab: &LabelVocab,
    max_new: usize,
) -> Result<Vec<String>> {
    (0..graph.len())
        .map(|v| student_reasoning(params, &build_prompt(graph, v, cap, vocab), max_new))
        .collect()
}

/// Raw text, the analysis separator, then the reasoning.
pub fn augment_text(raw: &str, cot: &str) -> String {
    let mut s = String::with_capacity(raw.len() + ANALYSIS_SEPARATOR.len() + cot.len());
    s.push_str(raw);
    s.push_str(ANALYSIS_SEPARATOR);
    s.push_str(cot);
    s
}

/// Fraction of `nodes` whose generated reasoning parses to the true label.
pub fn prediction_match_rate(
    graph: &HeteroGraph,
    params: &EncoderParams,
    nodes: &[usize],
    cap: usize,
    vocab: &LabelVocab,
    max_new: usize,
) -> Result<f64> {
    if nodes.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for &v in nodes {
        let text = student_reasoning(params, &build_prompt(graph, v, cap, vocab), max_new)?;
        if graph.node(v).label.is_some() && parse_prediction(&text, vocab) == graph.node(v).label {
            hits += 1;
        }
    }
    Ok(hits as f64 / nodes.len() as f64)
}

/// Line-delimited record of one reasoning text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CotRecord {
    pub node_id: usize,
    pub reasoning: String,
    pub predicted: Option<bool>,
    pub correct: bool,
}

pub fn write_cot_store<W: Write>(w: &mut W, records: &[CotRecord]) -> Result<()> {
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r).expect("record serializes"))?;
    }
    Ok(())
}

pub fn read_cot_store<R: BufRead>(r: R) -> Result<Vec<CotRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DistillError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}
