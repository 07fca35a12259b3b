//! Plain-text run configuration: `[section]` headers followed by `key = value`
//! lines. `#` starts a comment. Unknown sections or keys are errors.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use fraudcot::cotrain::{CotrainConfig, RelationCombine};
use fraudcot::distill::{DistillConfig, LabelVocab};
use fraudcot::encoder::EncoderConfig;
use fraudcot::pipeline::desk;
use fraudcot::synth::{BenchConfig, SynthConfig};
use fraudcot::tensor::UnaryOp;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq)]
pub enum TeacherSpec {
    Synthetic,
    Transcript(PathBuf),
}

impl FromStr for TeacherSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "synthetic" => Ok(TeacherSpec::Synthetic),
            _ => match s.strip_prefix("transcript:") {
                Some(p) if !p.is_empty() => Ok(TeacherSpec::Transcript(p.into())),
                _ => Err(format!("teacher must be `synthetic` or `transcript:PATH`, got `{s}`")),
            },
        }
    }
}

impl Display for TeacherSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TeacherSpec::Synthetic => f.write_str("synthetic"),
            TeacherSpec::Transcript(p) => write!(f, "transcript:{}", p.display()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// Existing graph to ingest instead of generating one.
    pub graph_input: Option<PathBuf>,
    pub synth: SynthConfig,
    pub encoder: EncoderConfig,
    pub encoder_seed: u64,
    pub distill: DistillConfig,
    pub teacher: TeacherSpec,
    pub teacher_accuracy: f64,
    pub vocab: LabelVocab,
    pub cotrain: CotrainConfig,
    pub bench: BenchConfig,
    pub bench_encoder_layers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            out: PathBuf::from("runs/default"),
            graph_input: None,
            synth: SynthConfig::default(),
            encoder: desk::encoder(),
            encoder_seed: 11,
            distill: desk::distill(desk::FULL_LAMBDA, 0),
            teacher: TeacherSpec::Synthetic,
            teacher_accuracy: 0.8,
            vocab: LabelVocab::default(),
            cotrain: desk::cotrain(0),
            bench: desk::bench(),
            bench_encoder_layers: desk::bench_encoder().layers,
        }
    }
}

fn activation_name(a: UnaryOp) -> &'static str {
    match a {
        UnaryOp::Relu => "relu",
        UnaryOp::Gelu => "gelu",
        UnaryOp::Sigmoid => "sigmoid",
        UnaryOp::Tanh => "tanh",
    }
}

fn parse_activation(s: &str) -> Result<UnaryOp, String> {
    match s {
        "relu" => Ok(UnaryOp::Relu),
        "gelu" => Ok(UnaryOp::Gelu),
        "sigmoid" => Ok(UnaryOp::Sigmoid),
        "tanh" => Ok(UnaryOp::Tanh),
        _ => Err(format!("unknown activation `{s}`")),
    }
}

fn parse_combine(s: &str) -> Result<RelationCombine, String> {
    match s {
        "mean" => Ok(RelationCombine::Mean),
        "sum" => Ok(RelationCombine::Sum),
        _ => Err(format!("unknown relation combine `{s}`")),
    }
}

fn parse<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| format!("cannot parse `{v}`: {e}"))
}

fn parse_list<T: FromStr>(v: &str) -> Result<Vec<T>, String>
where
    T::Err: Display,
{
    v.split(',').map(|x| parse(x.trim())).collect()
}

fn parse_opt<T: FromStr>(v: &str) -> Result<Option<T>, String>
where
    T::Err: Display,
{
    if v == "none" {
        Ok(None)
    } else {
        parse(v).map(Some)
    }
}

fn list<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn opt<T: Display>(x: &Option<T>) -> String {
    x.as_ref().map_or("none".into(), |v| v.to_string())
}

pub const SECTIONS: [&str; 7] = ["run", "synth", "encoder", "distill", "teacher", "cotrain", "bench"];

impl RunConfig {
    /// Every setting as `(section, key, value)`, in file order.
    pub fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
        let s = &self.synth;
        let e = &self.encoder;
        let d = &self.distill;
        let c = &self.cotrain;
        let b = &self.bench;
        vec![
            ("run", "seeds", list(&self.seeds)),
            ("run", "out", self.out.display().to_string()),
            ("run", "graph_input", opt(&self.graph_input.as_ref().map(|p| p.display()))),
            ("synth", "nodes", s.nodes.to_string()),
            ("synth", "fraud_rate", s.fraud_rate.to_string()),
            ("synth", "relations", s.relations.join(",")),
            ("synth", "mean_degree", list(&s.mean_degree)),
            ("synth", "homophily", list(&s.homophily)),
            ("synth", "cue_strength", s.cue_strength.to_string()),
            ("synth", "fraud_cues", s.fraud_cues.join(",")),
            ("synth", "benign_cues", s.benign_cues.join(",")),
            ("synth", "noise_words", s.noise_words.to_string()),
            ("synth", "seed", s.seed.to_string()),
            ("encoder", "layers", e.layers.to_string()),
            ("encoder", "hidden", e.hidden.to_string()),
            ("encoder", "heads", e.heads.to_string()),
            ("encoder", "max_len", e.max_len.to_string()),
            ("encoder", "lora_rank", e.lora_rank.to_string()),
            ("encoder", "lora_dropout", e.lora_dropout.to_string()),
            ("encoder", "seed", self.encoder_seed.to_string()),
            ("distill", "nodes", d.nodes.to_string()),
            ("distill", "paths", d.paths.to_string()),
            ("distill", "lambda", d.lambda.to_string()),
            ("distill", "unlikelihood", d.unlikelihood.to_string()),
            ("distill", "epochs", d.epochs.to_string()),
            ("distill", "lr", d.lr.to_string()),
            ("distill", "batch_size", d.batch_size.to_string()),
            ("distill", "neighbor_cap", d.neighbor_cap.to_string()),
            ("distill", "max_new", d.max_new.to_string()),
            ("distill", "seed", d.seed.to_string()),
            ("teacher", "source", self.teacher.to_string()),
            ("teacher", "accuracy", self.teacher_accuracy.to_string()),
            ("teacher", "positive_word", self.vocab.positive.clone()),
            ("teacher", "negative_word", self.vocab.negative.clone()),
            ("cotrain", "paradigm", c.paradigm.to_string()),
            ("cotrain", "k", c.k.to_string()),
            ("cotrain", "hops", c.hops.to_string()),
            ("cotrain", "batch_size", c.batch_size.to_string()),
            ("cotrain", "max_epochs", c.max_epochs.to_string()),
            ("cotrain", "patience", c.patience.to_string()),
            ("cotrain", "lr_encoder", c.lr_encoder.to_string()),
            ("cotrain", "lr_gnn", c.lr_gnn.to_string()),
            ("cotrain", "activation", activation_name(c.activation).into()),
            (
                "cotrain",
                "combine",
                match c.combine {
                    RelationCombine::Mean => "mean",
                    RelationCombine::Sum => "sum",
                }
                .into(),
            ),
            ("cotrain", "resample_each_epoch", c.resample_each_epoch.to_string()),
            ("cotrain", "eval_seed", c.eval_seed.to_string()),
            ("cotrain", "refresh_every", opt(&c.refresh_every)),
            ("cotrain", "memory_limit", opt(&c.memory_limit)),
            ("bench", "encoder_layers", self.bench_encoder_layers.to_string()),
            ("bench", "k", b.cotrain.k.to_string()),
            ("bench", "hops", b.cotrain.hops.to_string()),
            ("bench", "batch_size", b.cotrain.batch_size.to_string()),
            ("bench", "warmup_epochs", b.warmup_epochs.to_string()),
            ("bench", "timed_epochs", b.timed_epochs.to_string()),
            ("bench", "memory_limit", b.memory_limit.to_string()),
            ("bench", "max_batch_cap", b.max_batch_cap.to_string()),
        ]
    }

    pub fn set(&mut self, section: &str, key: &str, v: &str) -> Result<(), String> {
        let s = &mut self.synth;
        let e = &mut self.encoder;
        let d = &mut self.distill;
        let c = &mut self.cotrain;
        let b = &mut self.bench;
        match (section, key) {
            ("run", "seeds") => self.seeds = parse_list(v)?,
            ("run", "out") => self.out = v.into(),
            ("run", "graph_input") => self.graph_input = parse_opt(v)?,
            ("synth", "nodes") => s.nodes = parse(v)?,
            ("synth", "fraud_rate") => s.fraud_rate = parse(v)?,
            ("synth", "relations") => s.relations = parse_list(v)?,
            ("synth", "mean_degree") => s.mean_degree = parse_list(v)?,
            ("synth", "homophily") => s.homophily = parse_list(v)?,
            ("synth", "cue_strength") => s.cue_strength = parse(v)?,
            ("synth", "fraud_cues") => s.fraud_cues = parse_list(v)?,
            ("synth", "benign_cues") => s.benign_cues = parse_list(v)?,
            ("synth", "noise_words") => s.noise_words = parse(v)?,
            ("synth", "seed") => s.seed = parse(v)?,
            ("encoder", "layers") => e.layers = parse(v)?,
            ("encoder", "hidden") => e.hidden = parse(v)?,
            ("encoder", "heads") => e.heads = parse(v)?,
            ("encoder", "max_len") => e.max_len = parse(v)?,
            ("encoder", "lora_rank") => e.lora_rank = parse(v)?,
            ("encoder", "lora_dropout") => e.lora_dropout = parse(v)?,
            ("encoder", "seed") => self.encoder_seed = parse(v)?,
            ("distill", "nodes") => d.nodes = parse(v)?,
            ("distill", "paths") => d.paths = parse(v)?,
            ("distill", "lambda") => d.lambda = parse(v)?,
            ("distill", "unlikelihood") => d.unlikelihood = parse(v)?,
            ("distill", "epochs") => d.epochs = parse(v)?,
            ("distill", "lr") => d.lr = parse(v)?,
            ("distill", "batch_size") => d.batch_size = parse(v)?,
            ("distill", "neighbor_cap") => d.neighbor_cap = parse(v)?,
            ("distill", "max_new") => d.max_new = parse(v)?,
            ("distill", "seed") => d.seed = parse(v)?,
            ("teacher", "source") => self.teacher = parse(v)?,
            ("teacher", "accuracy") => self.teacher_accuracy = parse(v)?,
            ("teacher", "positive_word") => self.vocab.positive = v.to_string(),
            ("teacher", "negative_word") => self.vocab.negative = v.to_string(),
            ("cotrain", "paradigm") => c.paradigm = parse(v)?,
            ("cotrain", "k") => c.k = parse(v)?,
            ("cotrain", "hops") => c.hops = parse(v)?,
            ("cotrain", "batch_size") => c.batch_size = parse(v)?,
            ("cotrain", "max_epochs") => c.max_epochs = parse(v)?,
            ("cotrain", "patience") => c.patience = parse(v)?,
            ("cotrain", "lr_encoder") => c.lr_encoder = parse(v)?,
            ("cotrain", "lr_gnn") => c.lr_gnn = parse(v)?,
            ("cotrain", "activation") => c.activation = parse_activation(v)?,
            ("cotrain", "combine") => c.combine = parse_combine(v)?,
            ("cotrain", "resample_each_epoch") => c.resample_each_epoch = parse(v)?,
            ("cotrain", "eval_seed") => c.eval_seed = parse(v)?,
            ("cotrain", "refresh_every") => c.refresh_every = parse_opt(v)?,
            ("cotrain", "memory_limit") => c.memory_limit = parse_opt(v)?,
            ("bench", "encoder_layers") => self.bench_encoder_layers = parse(v)?,
            ("bench", "k") => b.cotrain.k = parse(v)?,
            ("bench", "hops") => b.cotrain.hops = parse(v)?,
            ("bench", "batch_size") => b.cotrain.batch_size = parse(v)?,
            ("bench", "warmup_epochs") => b.warmup_epochs = parse(v)?,
            ("bench", "timed_epochs") => b.timed_epochs = parse(v)?,
            ("bench", "memory_limit") => b.memory_limit = parse(v)?,
            ("bench", "max_batch_cap") => b.max_batch_cap = parse(v)?,
            _ if !SECTIONS.contains(&section) => return Err(format!("unknown section [{section}]")),
            _ => return Err(format!("unknown key `{key}` in [{section}]")),
        }
        Ok(())
    }

    /// Applies a config file on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |msg: String| CliError::ConfigLine { line: line_no, msg };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| err(format!("malformed header `{line}`")))?;
                if !SECTIONS.contains(&name) {
                    return Err(err(format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let sec = section.as_deref().ok_or_else(|| err("setting before any [section] header".into()))?;
            cfg.set(sec, k.trim(), v.trim()).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if !(0.0..=1.0).contains(&self.teacher_accuracy) {
            return bad(format!("teacher accuracy {} outside [0, 1]", self.teacher_accuracy));
        }
        if self.vocab.positive.is_empty() || self.vocab.negative.is_empty() || self.vocab.positive == self.vocab.negative {
            return bad("class words must be nonempty and distinct".into());
        }
        if self.bench_encoder_layers == 0 {
            return bad("bench encoder_layers must be at least 1".into());
        }
        self.synth.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.encoder.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.distill.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.cotrain.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    /// The full file, every key present.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (sec, key, value) in self.entries() {
            if sec != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{sec}]\n"));
                current = sec;
            }
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    /// Short digest of the named sections. The output location and the seed
    /// list are excluded; per-seed artifacts pass their seed in `extra`.
    pub fn hash(&self, sections: &[&str], extra: &str) -> String {
        let mut h = Sha256::new();
        for (sec, key, value) in self.entries() {
            if sections.contains(&sec) && key != "out" && key != "seeds" {
                h.update(format!("{sec}.{key}={value}\n"));
            }
        }
        h.update(extra);
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn bench_encoder(&self) -> EncoderConfig {
        EncoderConfig {
            layers: self.bench_encoder_layers,
            ..self.encoder.clone()
        }
    }
}
