//! Synthetic fraud graphs, a synthetic teacher with controllable accuracy,
//! and the timing / call-count harness comparing co-training paradigms.

use std::collections::HashSet;
use std::io::Write;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cotrain::{CotrainConfig, CotrainError, EmbeddingCache, Inputs, Model, Paradigm, Trainer, CallLedger};
use crate::distill::{PromptRecord, Teacher, TeacherError};
use crate::encoder::EncoderParams;
use crate::graph::{mix_seed, GraphError, HeteroGraph, Split};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Cotrain(#[from] CotrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

pub const FRAUD_CUES: [&str; 5] = ["refund now", "gift card", "wire fast", "free bonus", "burner phone"];
pub const BENIGN_CUES: [&str; 5] = ["fair price", "slow ship", "good fit", "repeat buyer", "clear photos"];
const NOISE: [&str; 10] = ["blue", "order", "late", "box", "item", "size", "note", "cart", "shelf", "small"];
const TEMPLATES: [&str; 3] = ["review says {cue}; {noise}", "buyer wrote {cue}, {noise}", "note: {cue} / {noise}"];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub nodes: usize,
    pub fraud_rate: f64,
    pub relations: Vec<String>,
    /// Target mean degree per relation.
    pub mean_degree: Vec<f64>,
    /// Probability that an edge joins two nodes of the same label, per relation.
    pub homophily: Vec<f64>,
    /// Probability that a fraudulent node's text carries a fraud cue.
    pub cue_strength: f64,
    pub fraud_cues: Vec<String>,
    pub benign_cues: Vec<String>,
    pub noise_words: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            nodes: 2000,
            fraud_rate: 0.3,
            relations: ["user", "item", "week"].map(String::from).to_vec(),
            mean_degree: vec![4.0; 3],
            homophily: vec![0.8; 3],
            cue_strength: 0.5,
            fraud_cues: FRAUD_CUES.map(String::from).to_vec(),
            benign_cues: BENIGN_CUES.map(String::from).to_vec(),
            noise_words: 2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(SynthError::Config(m));
        if self.nodes < 20 {
            return fail(format!("nodes {} below 20", self.nodes));
        }
        if !(self.fraud_rate > 0.0 && self.fraud_rate < 1.0) {
            return fail(format!("fraud_rate {} outside (0, 1)", self.fraud_rate));
        }
        if !(0.0..=1.0).contains(&self.cue_strength) {
            return fail(format!("cue_strength {} outside [0, 1]", self.cue_strength));
        }
        let r = self.relations.len();
        if r == 0 || self.mean_degree.len() != r || self.homophily.len() != r {
            return fail("relations, mean_degree and homophily must have equal nonzero length".into());
        }
        if let Some(h) = self.homophily.iter().find(|h| !(0.0..=1.0).contains(*h)) {
            return fail(format!("homophily {h} outside [0, 1]"));
        }
        if let Some(d) = self.mean_degree.iter().find(|&&d| !(d >= 0.0) || d > (self.nodes / 4) as f64) {
            return fail(format!("mean degree {d} infeasible for {} nodes", self.nodes));
        }
        if self.fraud_cues.is_empty() || self.benign_cues.is_empty() {
            return fail("cue vocabularies must be nonempty".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthTruth {
    pub labels: Vec<bool>,
    /// Whether the node's text carries a fraud cue.
    pub fraud_cue: Vec<bool>,
}

/// Builds a labeled graph with cue-bearing texts and homophilous relations.
pub fn generate_graph(config: &SynthConfig) -> Result<(HeteroGraph, SynthTruth)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.nodes;
    let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(config.fraud_rate)).collect();
    let fraud: Vec<usize> = (0..n).filter(|&i| labels[i]).collect();
    let benign: Vec<usize> = (0..n).filter(|&i| !labels[i]).collect();
    if fraud.len() < 2 || benign.len() < 2 {
        return Err(SynthError::Config("each class needs at least two nodes".into()));
    }

    let split = stratified_splits(&labels, &mut rng);
    let mut fraud_cue = Vec::with_capacity(n);
    let mut g = HeteroGraph::new(&config.relations)?;
    for i in 0..n {
        let use_fraud = labels[i] && rng.random_bool(config.cue_strength);
        fraud_cue.push(use_fraud);
        let cue = if use_fraud {
            config.fraud_cues.choose(&mut rng)
        } else {
            config.benign_cues.choose(&mut rng)
        }
        .expect("nonempty vocabulary");
        let noise: Vec<&str> = (0..config.noise_words)
            .map(|_| *NOISE.choose(&mut rng).expect("nonempty"))
            .collect();
        let template = TEMPLATES.choose(&mut rng).expect("nonempty");
        let text = template.replace("{cue}", cue).replace("{noise}", &noise.join(" "));
        g.add_node(text, Some(labels[i]), split[i])?;
    }

    for (r, (&deg, &pi)) in config.mean_degree.iter().zip(&config.homophily).enumerate() {
        let target = (n as f64 * deg / 2.0).round() as usize;
        let mut edges: HashSet<(usize, usize)> = HashSet::with_capacity(target);
        let mut starts: Vec<usize> = Vec::new();
        let mut attempts = 0usize;
        while edges.len() < target {
            attempts += 1;
            if attempts > 50 * target + 1000 {
                return Err(SynthError::Config(format!(
                    "could not place {target} edges for relation {}",
                    config.relations[r]
                )));
            }
            if starts.is_empty() {
                starts = (0..n).collect();
                starts.shuffle(&mut rng);
            }
            let u = starts.pop().expect("refilled above");
            let same = rng.random_bool(pi);
            let pool = if labels[u] == same { &fraud } else { &benign };
            let v = *pool.choose(&mut rng).expect("class nonempty");
            if u == v {
                continue;
            }
            let key = (u.min(v), u.max(v));
            if edges.insert(key) {
                g.add_edge_by_index(key.0, key.1, r)?;
            }
        }
    }
    g.freeze();
    Ok((g, SynthTruth { labels, fraud_cue }))
}

/// 60/20/20 train/val/test assignment, stratified by label.
pub fn stratified_splits<R: Rng>(labels: &[bool], rng: &mut R) -> Vec<Split> {
    let mut split = vec![Split::Train; labels.len()];
    for class in [true, false] {
        let mut ids: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        ids.shuffle(rng);
        let n = ids.len();
        let train = (n as f64 * 0.6).round() as usize;
        let val = (n as f64 * 0.2).round() as usize;
        for (j, &i) in ids.iter().enumerate() {
            split[i] = if j < train {
                Split::Train
            } else if j < train + val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    split
}

/// Circulant graph with one relation where every node has exactly `degree`
/// neighbors (`degree` even). All nodes are in the train split.
pub fn regular_graph(n: usize, degree: usize, seed: u64) -> Result<HeteroGraph> {
    if degree % 2 != 0 || degree == 0 || degree >= n {
        return Err(SynthError::Config(format!("no circulant {degree}-regular graph on {n} nodes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = HeteroGraph::new(&["link"])?;
    for i in 0..n {
        let label = rng.random_bool(0.3);
        let cue = if label { FRAUD_CUES[i % 5] } else { BENIGN_CUES[i % 5] };
        g.add_node(format!("node {i} says {cue}"), Some(label), Split::Train)?;
    }
    for i in 0..n {
        for step in 1..=degree / 2 {
            g.add_edge_by_index(i, (i + step) % n, 0)?;
        }
    }
    g.freeze();
    Ok(g)
}

/// Teacher whose final prediction is right with probability `accuracy`.
///
/// Right answers cite the cue phrase found in the target text and the true
/// count of neighbors carrying fraud cues; wrong answers cite a cue from the
/// other class and the complementary count.
#[derive(Clone, Debug)]
pub struct SyntheticTeacher {
    pub labels: Vec<Option<bool>>,
    pub accuracy: f64,
    pub fraud_cues: Vec<String>,
    pub benign_cues: Vec<String>,
}

impl SyntheticTeacher {
    pub fn new(graph: &HeteroGraph, accuracy: f64) -> Self {
        Self {
            labels: graph.labels(),
            accuracy,
            fraud_cues: FRAUD_CUES.map(String::from).to_vec(),
            benign_cues: BENIGN_CUES.map(String::from).to_vec(),
        }
    }

    fn find_cue<'a>(&'a self, text: &str) -> Option<(&'a str, bool)> {
        self.fraud_cues
            .iter()
            .map(|c| (c.as_str(), true))
            .chain(self.benign_cues.iter().map(|c| (c.as_str(), false)))
            .find(|(c, _)| text.contains(c))
    }

    /// Reasoning text for a node with known label.
    pub fn reason(&self, prompt: &PromptRecord, label: bool, seed: u64) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let correct = rng.random_bool(self.accuracy.clamp(0.0, 1.0));
        let predicted = if correct { label } else { !label };
        let cue = match self.find_cue(&prompt.target_text) {
            Some((c, _)) if correct => c.to_string(),
            _ => {
                let pool = if predicted { &self.fraud_cues } else { &self.benign_cues };
                pool.choose(&mut rng).expect("nonempty vocabulary").clone()
            }
        };
        let n = prompt.neighbors.len();
        let flagged = prompt
            .neighbors
            .iter()
            .filter(|(_, t)| matches!(self.find_cue(t), Some((_, true))))
            .count();
        let shown = if correct { flagged } else { n - flagged };
        let tone = if predicted { "risky" } else { "normal" };
        format!(
            "Cue: {cue}\nTone: {tone}\nLinks: {shown}/{n} flagged\nPrediction: {}",
            prompt.vocab.word(predicted)
        )
    }
}

impl Teacher for SyntheticTeacher {
    fn generate(&self, prompt: &PromptRecord, path: usize, seed: u64) -> Result<String, TeacherError> {
        let label = self
            .labels
            .get(prompt.node)
            .copied()
            .flatten()
            .ok_or_else(|| TeacherError(format!("node {} has no label", prompt.node)))?;
        Ok(self.reason(prompt, label, mix_seed(seed, path as u64)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub cotrain: CotrainConfig,
    pub warmup_epochs: usize,
    pub timed_epochs: usize,
    /// Tape byte budget used by the max-batch search.
    pub memory_limit: usize,
    /// Upper bound for the max-batch search.
    pub max_batch_cap: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            cotrain: CotrainConfig {
                batch_size: 32,
                k: 4,
                hops: 2,
                ..CotrainConfig::default()
            },
            warmup_epochs: 1,
            timed_epochs: 3,
            memory_limit: 64 << 20,
            max_batch_cap: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub paradigm: Paradigm,
    pub n: usize,
    pub k: usize,
    pub h: usize,
    pub batch: usize,
    pub epoch_time_ms: f64,
    pub fresh_calls: u64,
    pub cache_reads: u64,
    /// `None` when even a batch of one exceeds the memory budget.
    pub max_batch: Option<usize>,
}

pub struct BenchSetup<'a> {
    pub graph: &'a HeteroGraph,
    pub tokens: &'a [Vec<usize>],
    pub cache: &'a EmbeddingCache,
    pub encoder: &'a EncoderParams,
}

fn fresh_model(setup: &BenchSetup<'_>, config: &CotrainConfig) -> Model {
    let mut m = Model::new(setup.encoder.clone(), config.hops, config.seed);
    m.registered = setup.cache.provenance().to_string();
    m
}

/// Median wall time over timed epochs (after warm-up), with the per-epoch
/// fresh-call and cache-read counts of the last timed epoch.
pub fn time_epochs(setup: &BenchSetup<'_>, config: &BenchConfig, paradigm: Paradigm) -> Result<(f64, u64, u64)> {
    let cfg = CotrainConfig {
        paradigm,
        memory_limit: None,
        ..config.cotrain.clone()
    };
    let mut model = fresh_model(setup, &cfg);
    let mut trainer = Trainer::new(cfg)?;
    let inputs = Inputs {
        graph: setup.graph,
        tokens: setup.tokens,
        cache: Some(setup.cache),
    };
    let mut times = Vec::new();
    let mut last = (0, 0);
    for e in 0..config.warmup_epochs + config.timed_epochs.max(1) {
        let stats = trainer.train_epoch(&mut model, &inputs)?;
        if e >= config.warmup_epochs {
            times.push(stats.wall_time_ms);
            last = (stats.fresh_calls, stats.cache_reads);
        }
    }
    times.sort_by(f64::total_cmp);
    Ok((times[times.len() / 2], last.0, last.1))
}

/// Largest batch whose training step fits the memory budget, found by
/// doubling and then bisection. `None` if a batch of one does not fit.
pub fn max_batch(setup: &BenchSetup<'_>, config: &BenchConfig, paradigm: Paradigm) -> Result<Option<usize>> {
    let train = setup.graph.split_ids(Split::Train);
    let cap = config.max_batch_cap.min(train.len()).max(1);
    let cfg = CotrainConfig {
        paradigm,
        memory_limit: Some(config.memory_limit),
        ..config.cotrain.clone()
    };
    let inputs = Inputs {
        graph: setup.graph,
        tokens: setup.tokens,
        cache: Some(setup.cache),
    };
    let fits = |b: usize| -> Result<bool> {
        let mut model = fresh_model(setup, &cfg);
        let mut trainer = Trainer::new(cfg.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        match trainer.step(&mut model, &inputs, &train[..b], cfg.seed, &mut rng) {
            Ok(_) => Ok(true),
            Err(CotrainError::OutOfMemory { .. }) => Ok(false),
            Err(e) => Err(e.into()),
        }
    };
    if !fits(1)? {
        return Ok(None);
    }
    let mut lo = 1;
    let mut hi = None;
    while lo < cap {
        let next = (lo * 2).min(cap);
        if fits(next)? {
            lo = next;
        } else {
            hi = Some(next);
            break;
        }
    }
    if let Some(mut hi) = hi {
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if fits(mid)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    Ok(Some(lo))
}

pub fn bench_paradigms(setup: &BenchSetup<'_>, config: &BenchConfig, paradigms: &[Paradigm]) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &p in paradigms {
        let max_batch = max_batch(setup, config, p)?;
        let (time, fresh, reads) = time_epochs(setup, config, p)?;
        rows.push(BenchRow {
            paradigm: p,
            n: setup.graph.len(),
            k: config.cotrain.k,
            h: config.cotrain.hops,
            batch: config.cotrain.batch_size,
            epoch_time_ms: time,
            fresh_calls: fresh,
            cache_reads: reads,
            max_batch,
        });
    }
    Ok(rows)
}

pub fn write_bench_csv<W: Write>(w: &mut W, rows: &[BenchRow], with_time: bool) -> std::io::Result<()> {
    writeln!(w, "paradigm,N,K,H,batch,epoch_time_ms,fresh_calls,cache_reads,max_batch")?;
    for r in rows {
        let time = if with_time { format!("{:.3}", r.epoch_time_ms) } else { "-".into() };
        let mb = r.max_batch.map_or("infeasible".to_string(), |b| b.to_string());
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.paradigm, r.n, r.k, r.h, r.batch, time, r.fresh_calls, r.cache_reads, mb
        )?;
    }
    Ok(())
}

/// Ratio lines comparing the naive paradigm against the asymmetric one.
pub fn bench_summary(rows: &[BenchRow]) -> String {
    let find = |p| rows.iter().find(|r| r.paradigm == p);
    let (Some(a), Some(n)) = (find(Paradigm::Asymmetric), find(Paradigm::Naive)) else {
        return "summary needs both asymmetric and naive rows\n".into();
    };
    let fmt_mb = |b: Option<usize>| b.map_or("infeasible".to_string(), |b| b.to_string());
    let mut s = String::new();
    s.push_str(&format!("N={} K={} H={} batch={}\n", a.n, a.k, a.h, a.batch));
    s.push_str(&format!(
        "time per epoch (ms): naive {:.1}, asymmetric {:.1}, speedup {:.1}x\n",
        n.epoch_time_ms,
        a.epoch_time_ms,
        n.epoch_time_ms / a.epoch_time_ms
    ));
    s.push_str(&format!(
        "fresh encoder calls per epoch: naive {}, asymmetric {}, ratio {:.2}\n",
        n.fresh_calls,
        a.fresh_calls,
        n.fresh_calls as f64 / a.fresh_calls as f64
    ));
    let ratio = match (a.max_batch, n.max_batch) {
        (Some(x), Some(y)) => format!("{:.1}x", x as f64 / y as f64),
        _ => "n/a".into(),
    };
    s.push_str(&format!(
        "maximum batch size: naive {}, asymmetric {}, ratio {ratio}\n",
        fmt_mb(n.max_batch),
        fmt_mb(a.max_batch)
    ));
    s
}

/// Least-squares slope of `ln y` against `ln x`, with per-point residuals.
pub fn log_log_fit(xs: &[f64], ys: &[f64]) -> (f64, Vec<f64>) {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals = lx.iter().zip(&ly).map(|(x, y)| y - (intercept + slope * x)).collect();
    (slope, residuals)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub n: usize,
    /// Train-split size, the number of targets visited per epoch.
    pub targets: usize,
    pub epoch_time_ms: f64,
    pub fresh_calls: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub time_slope: f64,
    pub time_residuals: Vec<f64>,
    /// Slope of fresh calls against the number of targets.
    pub call_slope: f64,
}

/// Asymmetric epoch time and fresh calls over a grid of graph sizes, all other
/// settings fixed. The encoder snapshot and cache are rebuilt per size.
pub fn complexity_sweep(
    sizes: &[usize],
    synth: &SynthConfig,
    encoder: &EncoderParams,
    config: &BenchConfig,
) -> Result<SweepResult> {
    if sizes.len() < 4 {
        return Err(SynthError::Config("complexity sweep needs at least 4 sizes".into()));
    }
    let mut points = Vec::new();
    for &n in sizes {
        let (graph, _) = generate_graph(&SynthConfig {
            nodes: n,
            ..synth.clone()
        })?;
        let texts: Vec<String> = graph.nodes().iter().map(|v| v.text.clone()).collect();
        let tokens = Inputs::tokenize_all(&texts, encoder.config().max_len);
        let cache = EmbeddingCache::build(&texts, encoder, &mut CallLedger::default())?;
        let setup = BenchSetup {
            graph: &graph,
            tokens: &tokens,
            cache: &cache,
            encoder,
        };
        let (time, fresh, _) = time_epochs(&setup, config, Paradigm::Asymmetric)?;
        points.push(SweepPoint {
            n,
            targets: graph.split_ids(Split::Train).len(),
            epoch_time_ms: time,
            fresh_calls: fresh,
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.n as f64).collect();
    let (time_slope, time_residuals) = log_log_fit(&xs, &points.iter().map(|p| p.epoch_time_ms).collect::<Vec<_>>());
    let ts: Vec<f64> = points.iter().map(|p| p.targets as f64).collect();
    let (call_slope, _) = log_log_fit(&ts, &points.iter().map(|p| p.fresh_calls as f64).collect::<Vec<_>>());
    Ok(SweepResult {
        points,
        time_slope,
        time_residuals,
        call_slope,
    })
}
