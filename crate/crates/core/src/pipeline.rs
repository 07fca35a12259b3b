//! End-to-end stages shared by the command-line tool and the test suites:
//! student distillation, text augmentation, and co-training with evaluation.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::cotrain::{
    fit, predict_scores, CallLedger, CotrainConfig, CotrainError, EmbeddingCache, FitResult, Inputs, Model, Paradigm,
};
use crate::distill::{
    augment_text, collect_triples, finetune_student, generate_all_cots, parse_prediction, sample_distillation_nodes,
    CotRecord, DistillConfig, DistillError, DistillExample, LabelVocab, ReasoningTriple, Teacher,
};
use crate::encoder::EncoderParams;
use crate::graph::{HeteroGraph, Split};
use crate::metrics::{MetricError, MetricSet};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Cotrain(#[from] CotrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("unknown variant {0:?}")]
    Variant(String),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Ablation variants of the full method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    /// Raw node text and the untouched base encoder.
    NoDistill,
    /// Augmented text, but every vector (targets included) comes from the cache.
    FrozenEncoder,
    /// Distillation with the unlikelihood weight set to zero.
    NoNegative,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoDistill, Variant::FrozenEncoder, Variant::NoNegative];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoDistill => "no_distill",
            Variant::FrozenEncoder => "frozen_encoder",
            Variant::NoNegative => "lambda0",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| PipelineError::Variant(s.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    /// Student with adapters merged into the base weights.
    pub student: EncoderParams,
    pub triples: Vec<ReasoningTriple>,
    pub curve: Vec<f64>,
}

/// Samples distillation nodes, queries the teacher and fine-tunes a copy of
/// `base` on the resulting triples.
pub fn distill_student(
    graph: &HeteroGraph,
    base: &EncoderParams,
    teacher: &dyn Teacher,
    config: &DistillConfig,
    vocab: &LabelVocab,
) -> Result<DistillOutcome> {
    config.validate()?;
    let nodes = sample_distillation_nodes(graph, config.nodes, config.seed)?;
    let triples = collect_triples(graph, &nodes, teacher, config.paths, config.neighbor_cap, vocab, config.seed)?;
    let max_len = base.config().max_len;
    let examples: Vec<DistillExample> = triples.iter().map(|t| DistillExample::from_triple(t, max_len)).collect();
    let mut student = base.clone();
    let curve = finetune_student(&mut student, &examples, config)?;
    student.merge_adapters(None);
    Ok(DistillOutcome {
        student,
        triples,
        curve,
    })
}

/// Student reasoning for every node, as store records.
pub fn student_cots(
    graph: &HeteroGraph,
    student: &EncoderParams,
    config: &DistillConfig,
    vocab: &LabelVocab,
) -> Result<Vec<CotRecord>> {
    let cots = generate_all_cots(graph, student, config.neighbor_cap, vocab, config.max_new)?;
    Ok(cots
        .into_iter()
        .enumerate()
        .map(|(v, reasoning)| {
            let predicted = parse_prediction(&reasoning, vocab);
            let correct = predicted.is_some() && predicted == graph.node(v).label;
            CotRecord {
                node_id: v,
                reasoning,
                predicted,
                correct,
            }
        })
        .collect())
}

/// Raw text followed by the node's reasoning, indexed by node id.
pub fn augmented_texts(graph: &HeteroGraph, cots: &[CotRecord]) -> Vec<String> {
    graph
        .nodes()
        .iter()
        .zip(cots)
        .map(|(n, c)| augment_text(&n.text, &c.reasoning))
        .collect()
}

pub fn raw_texts(graph: &HeteroGraph) -> Vec<String> {
    graph.nodes().iter().map(|n| n.text.clone()).collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub fit: FitResult,
    pub test_scores: Vec<f64>,
    pub test: MetricSet,
    pub cache: Option<EmbeddingCache>,
}

/// Builds the cache from `encoder`, co-trains from it and scores the test split.
pub fn train_and_evaluate(
    graph: &HeteroGraph,
    texts: &[String],
    encoder: &EncoderParams,
    config: &CotrainConfig,
) -> Result<TrainOutcome> {
    let tokens = Inputs::tokenize_all(texts, encoder.config().max_len);
    let mut model = Model::new(encoder.clone(), config.hops, config.seed);
    let mut cache = if config.paradigm == Paradigm::Naive {
        None
    } else {
        let c = EmbeddingCache::build(texts, encoder, &mut CallLedger::default())?;
        model.registered = c.provenance().to_string();
        Some(c)
    };
    let fit = fit(&mut model, graph, &tokens, texts, &mut cache, config)?;
    let test_ids = graph.split_ids(Split::Test);
    let inputs = Inputs {
        graph,
        tokens: &tokens,
        cache: cache.as_ref(),
    };
    let test_scores = predict_scores(&model, &inputs, &test_ids, config, config.eval_seed, None)?;
    let labels: Vec<bool> = test_ids.iter().map(|&v| graph.node(v).label == Some(true)).collect();
    let test = MetricSet::compute(&test_scores, &labels)?;
    Ok(TrainOutcome {
        model,
        fit,
        test_scores,
        test,
        cache,
    })
}

/// Co-training setup for one ablation variant. `Full` and `NoNegative` expect
/// texts augmented by the corresponding student.
pub fn variant_config(variant: Variant, base: &CotrainConfig) -> CotrainConfig {
    let paradigm = match variant {
        Variant::FrozenEncoder => Paradigm::Frozen,
        _ => base.paradigm,
    };
    CotrainConfig {
        paradigm,
        ..base.clone()
    }
}

/// Settings sized for a single desktop CPU, used by the command-line defaults
/// and the acceptance suite.
pub mod desk {
    use crate::cotrain::CotrainConfig;
    use crate::distill::{DistillConfig, UnlikelihoodForm};
    use crate::encoder::EncoderConfig;
    use crate::synth::BenchConfig;

    /// Unlikelihood weight for the full method. Larger weights with the
    /// token-level form wreck the reasoning format of a model this small.
    pub const FULL_LAMBDA: f64 = 0.1;

    pub fn encoder() -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            hidden: 32,
            heads: 4,
            max_len: 512,
            lora_rank: 8,
            lora_dropout: 0.0,
        }
    }

    /// Single-block encoder for the efficiency benchmarks.
    pub fn bench_encoder() -> EncoderConfig {
        EncoderConfig {
            layers: 1,
            ..encoder()
        }
    }

    pub fn distill(lambda: f64, seed: u64) -> DistillConfig {
        DistillConfig {
            nodes: 100,
            paths: 5,
            lambda,
            unlikelihood: UnlikelihoodForm::Token,
            epochs: 8,
            lr: 1e-2,
            batch_size: 4,
            neighbor_cap: 1,
            max_new: 80,
            seed,
        }
    }

    pub fn cotrain(seed: u64) -> CotrainConfig {
        CotrainConfig {
            k: 10,
            hops: 2,
            batch_size: 32,
            max_epochs: 10,
            patience: 3,
            lr_encoder: 1e-3,
            lr_gnn: 1e-2,
            seed,
            ..CotrainConfig::default()
        }
    }

    pub fn bench() -> BenchConfig {
        BenchConfig::default()
    }
}
