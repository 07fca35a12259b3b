use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;

use fraudcot::cotrain::{
    fit, predict_scores, CallLedger, CotrainConfig, EmbeddingCache, Inputs, Model, Paradigm,
};
use fraudcot::distill::{read_cot_store, write_cot_store, DistillConfig, Teacher, TranscriptTeacher};
use fraudcot::encoder::EncoderParams;
use fraudcot::graph::{HeteroGraph, Split};
use fraudcot::metrics::{mean_std, write_report, MetricRow, MetricSet};
use fraudcot::pipeline::{
    augmented_texts, distill_student, raw_texts, student_cots, train_and_evaluate, variant_config, Variant,
};
use fraudcot::synth::{bench_paradigms, bench_summary, generate_graph, write_bench_csv, SyntheticTeacher};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::artifacts::Artifact;
use crate::config::{RunConfig, TeacherSpec};
use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Generate,
    Distill,
    Augment,
    Cache,
    Train,
    Eval,
    Bench,
    Ablate,
    All,
}

impl Stage {
    pub const NAMES: [&'static str; 9] =
        ["generate", "distill", "augment", "cache", "train", "eval", "bench", "ablate", "all"];

    /// Stages executed, in order.
    pub fn expand(self) -> Vec<Stage> {
        use Stage::*;
        match self {
            All => vec![Generate, Distill, Augment, Cache, Train, Eval],
            s => vec![s],
        }
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        use Stage::*;
        let all = [Generate, Distill, Augment, Cache, Train, Eval, Bench, Ablate, All];
        Stage::NAMES
            .iter()
            .position(|n| *n == s)
            .map(|i| all[i])
            .ok_or_else(|| format!("unknown stage `{s}` (expected one of {})", Stage::NAMES.join(", ")))
    }
}

const UPSTREAM: [&str; 5] = ["run", "synth", "encoder", "distill", "teacher"];
const TRAINING: [&str; 6] = ["run", "synth", "encoder", "distill", "teacher", "cotrain"];

fn jsonl_line(v: serde_json::Value) -> String {
    let mut s = v.to_string();
    s.push('\n');
    s
}

/// Which student a set of distillation artifacts belongs to.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Student {
    Configured,
    /// Unlikelihood weight forced to zero, for the ablation.
    NoNegative,
}

impl Student {
    fn suffix(self) -> &'static str {
        match self {
            Student::Configured => "",
            Student::NoNegative => "_lambda0",
        }
    }
}

pub struct Runner {
    pub cfg: RunConfig,
    pub root: PathBuf,
    teacher_digest: String,
}

impl Runner {
    pub fn new(cfg: RunConfig) -> Result<Self, CliError> {
        let teacher_digest = match &cfg.teacher {
            TeacherSpec::Synthetic => String::new(),
            TeacherSpec::Transcript(p) => {
                let bytes = fs::read(p).map_err(|_| CliError::Missing {
                    path: p.clone(),
                    producer: "distill (transcript supplied by the user)",
                })?;
                Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
            }
        };
        Ok(Self {
            root: cfg.out.clone(),
            cfg,
            teacher_digest,
        })
    }

    fn artifact(&self, rel: &str, kind: &'static str, producer: &'static str, hash: String) -> Artifact {
        Artifact::new(&self.root, rel, kind, producer, hash)
    }

    fn upstream_hash(&self, student: Student) -> String {
        self.cfg.hash(&UPSTREAM, &format!("{}{}", self.teacher_digest, student.suffix()))
    }

    fn graph_artifact(&self) -> Artifact {
        self.artifact("graph/graph.jsonl", "graph", "generate", self.cfg.hash(&["run", "synth"], ""))
    }

    fn student_artifact(&self, s: Student) -> Artifact {
        let producer = if s == Student::Configured { "distill" } else { "ablate" };
        let rel = format!("checkpoints/student{}.ckpt", s.suffix());
        self.artifact(&rel, "student", producer, self.upstream_hash(s))
    }

    fn cots_artifact(&self, s: Student) -> Artifact {
        let producer = if s == Student::Configured { "augment" } else { "ablate" };
        let rel = format!("cots/student{}.jsonl", s.suffix());
        self.artifact(&rel, "student-cots", producer, self.upstream_hash(s))
    }

    fn cache_artifact(&self) -> Artifact {
        self.artifact("cache/cache.bin", "cache", "cache", self.upstream_hash(Student::Configured))
    }

    fn model_artifact(&self, seed: u64) -> Artifact {
        let hash = self.cfg.hash(&TRAINING, &format!("{}seed={seed}", self.teacher_digest));
        self.artifact(&format!("checkpoints/model_seed{seed}.ckpt"), "model", "train", hash)
    }

    fn report(&self, name: &str, kind: &'static str, producer: &'static str, hash: String) -> Artifact {
        self.artifact(&format!("reports/{name}"), kind, producer, hash)
    }

    fn seeds_tag(&self) -> String {
        let s: Vec<String> = self.cfg.seeds.iter().map(u64::to_string).collect();
        format!("{}seeds={}", self.teacher_digest, s.join(","))
    }

    pub fn run(&self, stage: Stage) -> Result<(), CliError> {
        match stage {
            Stage::Generate => self.generate(),
            Stage::Distill => self.distill(Student::Configured).map(|_| ()),
            Stage::Augment => self.augment(Student::Configured).map(|_| ()),
            Stage::Cache => self.cache(),
            Stage::Train => self.train(),
            Stage::Eval => self.eval(),
            Stage::Bench => self.bench(),
            Stage::Ablate => self.ablate(),
            Stage::All => Stage::All.expand().into_iter().try_for_each(|s| self.run(s)),
        }
    }

    fn generate(&self) -> Result<(), CliError> {
        let graph = match &self.cfg.graph_input {
            Some(p) => {
                let f = fs::File::open(p).map_err(|_| CliError::Missing {
                    path: p.clone(),
                    producer: "generate (graph_input supplied by the user)",
                })?;
                let mut g = HeteroGraph::read_jsonl(std::io::BufReader::new(f))
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                g.freeze();
                g
            }
            None => generate_graph(&self.cfg.synth)?.0,
        };
        let mut buf = Vec::new();
        graph.write_jsonl(&mut buf).map_err(|e| CliError::Other(e.to_string()))?;
        self.graph_artifact().write(&buf)?;
        let fraud = graph.nodes().iter().filter(|n| n.label == Some(true)).count();
        println!(
            "generate: {} nodes ({fraud} fraudulent), {} edges over {} relations",
            graph.len(),
            graph.edge_count(),
            graph.num_relations()
        );
        Ok(())
    }

    fn load_graph(&self) -> Result<HeteroGraph, CliError> {
        let a = self.graph_artifact();
        let mut g = HeteroGraph::read_jsonl(a.read()?.as_slice()).map_err(|e| CliError::Other(e.to_string()))?;
        g.freeze();
        Ok(g)
    }

    fn base_encoder(&self) -> Result<EncoderParams, CliError> {
        EncoderParams::init(self.cfg.encoder.clone(), self.cfg.encoder_seed).map_err(|e| CliError::Config(e.to_string()))
    }

    fn distill_config(&self, s: Student) -> DistillConfig {
        match s {
            Student::Configured => self.cfg.distill.clone(),
            Student::NoNegative => DistillConfig {
                lambda: 0.0,
                ..self.cfg.distill.clone()
            },
        }
    }

    fn teacher(&self, graph: &HeteroGraph) -> Result<Box<dyn Teacher>, CliError> {
        Ok(match &self.cfg.teacher {
            TeacherSpec::Synthetic => Box::new(SyntheticTeacher::new(graph, self.cfg.teacher_accuracy)),
            TeacherSpec::Transcript(p) => {
                let f = fs::File::open(p).map_err(CliError::io(format!("opening {}", p.display())))?;
                Box::new(TranscriptTeacher::from_jsonl(std::io::BufReader::new(f))?)
            }
        })
    }

    fn distill(&self, s: Student) -> Result<EncoderParams, CliError> {
        let graph = self.load_graph()?;
        let base = self.base_encoder()?;
        let teacher = self.teacher(&graph)?;
        let dc = self.distill_config(s);
        let out = distill_student(&graph, &base, teacher.as_ref(), &dc, &self.cfg.vocab)?;

        let mut ckpt = Vec::new();
        out.student.write_checkpoint(&mut ckpt).map_err(|e| CliError::Other(e.to_string()))?;
        self.student_artifact(s).write(&ckpt)?;

        let mut lines = String::new();
        for t in &out.triples {
            lines.push_str(&jsonl_line(json!({
                "node_id": t.prompt.node,
                "path": t.path,
                "reasoning": t.reasoning,
                "predicted": t.predicted,
                "correct": t.correct,
            })));
        }
        let hash = self.upstream_hash(s);
        let rel = format!("cots/teacher{}.jsonl", s.suffix());
        self.artifact(&rel, "teacher-cots", "distill", hash.clone()).write(lines.as_bytes())?;

        let mut curve = String::from("epoch,loss\n");
        for (e, l) in out.curve.iter().enumerate() {
            writeln!(curve, "{e},{l:.9}").expect("string write");
        }
        let name = format!("distill_curve{}.csv", s.suffix());
        self.report(&name, "distill-curve", "distill", hash).write(curve.as_bytes())?;

        let positive = out.triples.iter().filter(|t| t.correct).count();
        println!(
            "distill{}: {} triples ({positive} positive), final loss {:.4}",
            s.suffix(),
            out.triples.len(),
            out.curve.last().copied().unwrap_or(f64::NAN)
        );
        Ok(out.student)
    }

    fn load_student(&self, s: Student) -> Result<EncoderParams, CliError> {
        let a = self.student_artifact(s);
        EncoderParams::read_checkpoint(&mut a.read()?.as_slice()).map_err(|e| CliError::Other(e.to_string()))
    }

    fn augment(&self, s: Student) -> Result<Vec<String>, CliError> {
        let graph = self.load_graph()?;
        let student = self.load_student(s)?;
        let cots = student_cots(&graph, &student, &self.distill_config(s), &self.cfg.vocab)?;
        let mut buf = Vec::new();
        write_cot_store(&mut buf, &cots)?;
        self.cots_artifact(s).write(&buf)?;

        let texts = augmented_texts(&graph, &cots);
        let mut lines = String::new();
        for (i, t) in texts.iter().enumerate() {
            lines.push_str(&jsonl_line(json!({ "node_id": i, "text": t })));
        }
        let rel = format!("cots/augmented{}.jsonl", s.suffix());
        self.artifact(&rel, "augmented-text", "augment", self.upstream_hash(s)).write(lines.as_bytes())?;

        let parsed = cots.iter().filter(|c| c.predicted.is_some()).count();
        let correct = cots.iter().filter(|c| c.correct).count();
        println!(
            "augment{}: {} reasoning texts, {parsed} with a parsable prediction, {correct} matching the label",
            s.suffix(),
            cots.len()
        );
        Ok(texts)
    }

    fn load_texts(&self, graph: &HeteroGraph, s: Student) -> Result<Vec<String>, CliError> {
        let a = self.cots_artifact(s);
        let cots = read_cot_store(a.read()?.as_slice())?;
        if cots.len() != graph.len() {
            return Err(CliError::Stale {
                path: a.path,
                producer: a.producer,
            });
        }
        Ok(augmented_texts(graph, &cots))
    }

    fn cache(&self) -> Result<(), CliError> {
        let graph = self.load_graph()?;
        let student = self.load_student(Student::Configured)?;
        let texts = self.load_texts(&graph, Student::Configured)?;
        let mut ledger = CallLedger::default();
        let cache = EmbeddingCache::build(&texts, &student, &mut ledger)?;
        let mut buf = Vec::new();
        cache.write_to(&mut buf)?;
        self.cache_artifact().write(&buf)?;
        println!(
            "cache: {} vectors of dim {}, {} encoder calls, checksum {}",
            cache.len(),
            cache.dim(),
            ledger.fresh_calls,
            cache.checksum()
        );
        Ok(())
    }

    fn load_cache(&self) -> Result<EmbeddingCache, CliError> {
        let a = self.cache_artifact();
        Ok(EmbeddingCache::read_from(&mut a.read()?.as_slice())?)
    }

    fn cotrain_config(&self, seed: u64) -> CotrainConfig {
        CotrainConfig {
            seed,
            ..self.cfg.cotrain.clone()
        }
    }

    fn train(&self) -> Result<(), CliError> {
        let graph = self.load_graph()?;
        let student = self.load_student(Student::Configured)?;
        let texts = self.load_texts(&graph, Student::Configured)?;
        let cache = self.load_cache()?;
        let tokens = Inputs::tokenize_all(&texts, student.config().max_len);
        for &seed in &self.cfg.seeds {
            let cc = self.cotrain_config(seed);
            let mut model = Model::new(student.clone(), cc.hops, seed);
            model.registered = cache.provenance().to_string();
            let mut live = (cc.paradigm != Paradigm::Naive).then(|| cache.clone());
            let res = fit(&mut model, &graph, &tokens, &texts, &mut live, &cc)?;

            let mut buf = Vec::new();
            model.write_checkpoint(&mut buf)?;
            let art = self.model_artifact(seed);
            art.write(&buf)?;

            let mut ledger = Vec::new();
            res.ledger.write_csv(&mut ledger, false).map_err(CliError::io("formatting ledger"))?;
            self.report(&format!("ledger_seed{seed}.csv"), "ledger", "train", art.hash.clone()).write(&ledger)?;

            let mut hist = String::from("epoch,train_loss,val_loss\n");
            for h in &res.history {
                writeln!(hist, "{},{:.9},{:.9}", h.stats.epoch, h.stats.train_loss, h.val_loss).expect("string write");
            }
            self.report(&format!("history_seed{seed}.csv"), "history", "train", art.hash).write(hist.as_bytes())?;
            println!(
                "train seed {seed}: {} epochs, best epoch {} (val loss {:.4}), {} fresh encoder calls",
                res.history.len(),
                res.best_epoch,
                res.best_val_loss,
                res.ledger.fresh_calls
            );
        }
        Ok(())
    }

    fn eval(&self) -> Result<(), CliError> {
        let graph = self.load_graph()?;
        let texts = self.load_texts(&graph, Student::Configured)?;
        let cache = self.load_cache()?;
        let test = graph.split_ids(Split::Test);
        let labels: Vec<bool> = test.iter().map(|&v| graph.node(v).label == Some(true)).collect();
        let mut rows = Vec::new();
        for &seed in &self.cfg.seeds {
            let a = self.model_artifact(seed);
            let model = Model::read_checkpoint(&mut a.read()?.as_slice())?;
            let tokens = Inputs::tokenize_all(&texts, model.encoder.config().max_len);
            let inputs = Inputs {
                graph: &graph,
                tokens: &tokens,
                cache: Some(&cache),
            };
            let cc = self.cotrain_config(seed);
            let scores = predict_scores(&model, &inputs, &test, &cc, cc.eval_seed, None)?;
            let m = MetricSet::compute(&scores, &labels).map_err(|e| CliError::Other(e.to_string()))?;
            for (name, value) in m.named() {
                rows.push(MetricRow {
                    metric: name.into(),
                    value,
                    n: test.len(),
                    seed,
                });
            }
        }
        let hash = self.cfg.hash(&TRAINING, &self.seeds_tag());
        let mut csv = Vec::new();
        write_report(&mut csv, &rows).map_err(CliError::io("formatting report"))?;
        self.report("eval.csv", "eval", "eval", hash.clone()).write(&csv)?;
        let summary = summarize(&rows, &["macro_f1", "auroc", "auprc"]);
        self.report("eval_summary.txt", "eval-summary", "eval", hash).write(summary.as_bytes())?;
        print!("eval over {} seed(s):\n{summary}", self.cfg.seeds.len());
        Ok(())
    }

    fn bench(&self) -> Result<(), CliError> {
        let graph = self.load_graph()?;
        let enc = EncoderParams::init(self.cfg.bench_encoder(), self.cfg.encoder_seed)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let texts = raw_texts(&graph);
        let tokens = Inputs::tokenize_all(&texts, enc.config().max_len);
        let cache = EmbeddingCache::build(&texts, &enc, &mut CallLedger::default())?;
        let setup = fraudcot::synth::BenchSetup {
            graph: &graph,
            tokens: &tokens,
            cache: &cache,
            encoder: &enc,
        };
        let rows = bench_paradigms(&setup, &self.cfg.bench, &[Paradigm::Asymmetric, Paradigm::Naive])?;
        let hash = self.cfg.hash(&["run", "synth", "encoder", "bench"], "");
        let mut csv = Vec::new();
        write_bench_csv(&mut csv, &rows, true).map_err(CliError::io("formatting bench report"))?;
        self.report("bench.csv", "bench", "bench", hash.clone()).write(&csv)?;
        let summary = bench_summary(&rows);
        self.report("bench_summary.txt", "bench-summary", "bench", hash).write(summary.as_bytes())?;
        print!("bench:\n{summary}");
        Ok(())
    }

    /// Student and augmented texts for the ablation's λ=0 variant, reusing
    /// current artifacts when present.
    fn no_negative_student(&self, graph: &HeteroGraph) -> Result<(EncoderParams, Vec<String>), CliError> {
        let s = Student::NoNegative;
        if self.student_artifact(s).is_current() && self.cots_artifact(s).is_current() {
            return Ok((self.load_student(s)?, self.load_texts(graph, s)?));
        }
        let student = self.distill(s)?;
        let texts = self.augment(s)?;
        Ok((student, texts))
    }

    fn ablate(&self) -> Result<(), CliError> {
        let graph = self.load_graph()?;
        let student = self.load_student(Student::Configured)?;
        let aug = self.load_texts(&graph, Student::Configured)?;
        let raw = raw_texts(&graph);
        let base = self.base_encoder()?;
        let (student0, aug0) = self.no_negative_student(&graph)?;

        let mut csv = String::from("variant,seed,metric,value\n");
        let mut per_variant: Vec<(Variant, Vec<MetricRow>)> = Vec::new();
        for variant in Variant::ALL {
            let (texts, enc) = match variant {
                Variant::Full | Variant::FrozenEncoder => (&aug, &student),
                Variant::NoDistill => (&raw, &base),
                Variant::NoNegative => (&aug0, &student0),
            };
            let mut rows = Vec::new();
            for &seed in &self.cfg.seeds {
                let cc = variant_config(variant, &self.cotrain_config(seed));
                let out = train_and_evaluate(&graph, texts, enc, &cc)?;
                for (name, value) in out.test.named() {
                    writeln!(csv, "{variant},{seed},{name},{value:.6}").expect("string write");
                    rows.push(MetricRow {
                        metric: name.into(),
                        value,
                        n: out.test_scores.len(),
                        seed,
                    });
                }
            }
            per_variant.push((variant, rows));
        }
        let hash = self.cfg.hash(&TRAINING, &self.seeds_tag());
        self.report("ablate.csv", "ablate", "ablate", hash.clone()).write(csv.as_bytes())?;

        let metrics = ["macro_f1", "auroc", "auprc"];
        let mut table = format!("{:<16}", "variant");
        for m in metrics {
            write!(table, "{m:>20}").expect("string write");
        }
        table.push('\n');
        for (variant, rows) in &per_variant {
            write!(table, "{:<16}", variant.name()).expect("string write");
            for m in metrics {
                let vals: Vec<f64> = rows.iter().filter(|r| r.metric == m).map(|r| r.value).collect();
                let (mean, std) = mean_std(&vals);
                write!(table, "{:>20}", format!("{mean:.4} ± {std:.4}")).expect("string write");
            }
            table.push('\n');
        }
        self.report("ablate_summary.txt", "ablate-summary", "ablate", hash).write(table.as_bytes())?;
        print!("ablate over {} seed(s):\n{table}", self.cfg.seeds.len());
        Ok(())
    }
}

/// `metric mean ± std` lines over seeds.
fn summarize(rows: &[MetricRow], metrics: &[&str]) -> String {
    let mut out = String::new();
    for m in metrics {
        let vals: Vec<f64> = rows.iter().filter(|r| r.metric == *m).map(|r| r.value).collect();
        let (mean, std) = mean_std(&vals);
        writeln!(out, "{m:<9} {mean:.4} ± {std:.4}").expect("string write");
    }
    out
}
