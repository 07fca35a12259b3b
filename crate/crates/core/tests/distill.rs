use fraudcot::distill::{
    build_prompt, collect_triples, distill_loss, finetune_student, generate_all_cots, parse_prediction, read_cot_store,
    sample_distillation_nodes, write_cot_store, CotRecord, DistillConfig, DistillExample, LabelVocab, PromptRecord,
    Teacher, TranscriptTeacher, UnlikelihoodForm,
};
use fraudcot::encoder::{BindMode, EncoderConfig, EncoderParams, EOS, VOCAB_SIZE};
use fraudcot::graph::{HeteroGraph, Split};
use fraudcot::synth::{generate_graph, SynthConfig, SyntheticTeacher};
use fraudcot::tensor::{central_difference, max_relative_error, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(max_len: usize) -> EncoderConfig {
    EncoderConfig {
        layers: 1,
        hidden: 8,
        heads: 2,
        max_len,
        lora_rank: 2,
        lora_dropout: 0.0,
    }
}

fn perturbed(seed: u64) -> EncoderParams {
    let mut p = EncoderParams::init(tiny(64), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in p.lora_indices() {
        for v in p.tensor_mut(i).data_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
    }
    p
}

fn prompt(node: usize, text: &str) -> PromptRecord {
    PromptRecord {
        node,
        target_text: text.into(),
        neighbors: vec![],
        vocab: LabelVocab::default(),
    }
}

fn batch() -> Vec<DistillExample> {
    [
        ("a", "Cue: x\nPrediction: Fraud", true),
        ("bb", "Prediction: Benign", false),
        ("c", "Tone: ok", true),
        ("dd", "Links: 0/1", false),
        ("e", "Prediction: Fraud", true),
    ]
    .iter()
    .enumerate()
    .map(|(i, (t, r, y))| DistillExample::new(&prompt(i, t), r, *y, 64))
    .collect()
}

/// Token-averaged cross-entropy of one example from tape-free log-probs.
fn ce_oracle(p: &EncoderParams, ex: &DistillExample) -> f64 {
    let lp = p.next_token_logprobs(&ex.tokens[..ex.tokens.len() - 1]).unwrap();
    let targets = &ex.tokens[ex.from..];
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(j, &t)| lp.row(ex.from - 1 + j)[t])
        .sum();
    -total / targets.len() as f64
}

fn loss_value(p: &EncoderParams, batch: &[DistillExample], lambda: f64, form: UnlikelihoodForm) -> f64 {
    let mut tape = Tape::new();
    let b = p.bind(&mut tape, BindMode::Adapters).unwrap();
    let (l, _) = distill_loss(&mut tape, &b, batch, lambda, form, None).unwrap();
    tape.value(l).item()
}

fn adapter_grads(p: &EncoderParams, batch: &[DistillExample], lambda: f64) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let b = p.bind(&mut tape, BindMode::Adapters).unwrap();
    let (l, _) = distill_loss(&mut tape, &b, batch, lambda, UnlikelihoodForm::Token, None).unwrap();
    tape.backward(l).unwrap();
    b.trainable_vars().iter().map(|&v| tape.grad_tensor(v).into_data()).collect()
}

#[test]
fn lambda_zero_equals_positive_cross_entropy() {
    let p = perturbed(1);
    let batch = batch();
    let oracle: f64 = batch.iter().filter(|e| e.positive).map(|e| ce_oracle(&p, e)).sum::<f64>() / batch.len() as f64;
    let got = loss_value(&p, &batch, 0.0, UnlikelihoodForm::Token);
    assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
}

#[test]
fn all_positive_batch_ignores_lambda() {
    let p = perturbed(2);
    let pos: Vec<DistillExample> = batch().into_iter().filter(|e| e.positive).collect();
    let oracle: f64 = pos.iter().map(|e| ce_oracle(&p, e)).sum::<f64>() / pos.len() as f64;
    for lambda in [0.0, 1.0, 100.0] {
        assert!((loss_value(&p, &pos, lambda, UnlikelihoodForm::Token) - oracle).abs() < 1e-12);
    }
}

#[test]
fn lambda_zero_negatives_carry_no_gradient() {
    let p = perturbed(3);
    let all = batch();
    let pos: Vec<DistillExample> = all.iter().filter(|e| e.positive).cloned().collect();
    let g_all = adapter_grads(&p, &all, 0.0);
    let g_pos = adapter_grads(&p, &pos, 0.0);
    // Same numerator, denominators 5 and 3.
    for (a, b) in g_all.iter().flatten().zip(g_pos.iter().flatten()) {
        assert!((a * 5.0 - b * 3.0).abs() < 1e-12);
    }
}

/// Final state is a constant one-hot and the head puts equal, overwhelming
/// logits on `a` and EOS, so both get probability exactly one half.
fn half_half_model() -> EncoderParams {
    let mut p = EncoderParams::init(tiny(64), 0).unwrap();
    let names = p.names();
    let idx = |n: &str| names.iter().position(|x| x == n).unwrap();
    let (gain, bias, head) = (idx("final_ln.gain"), idx("final_ln.bias"), idx("head"));
    p.tensor_mut(gain).data_mut().iter_mut().for_each(|v| *v = 0.0);
    p.tensor_mut(bias).data_mut().iter_mut().for_each(|v| *v = 0.0);
    p.tensor_mut(bias).data_mut()[0] = 1.0;
    let h = p.tensor_mut(head).data_mut();
    h.iter_mut().for_each(|v| *v = 0.0);
    h[b'a' as usize] = 800.0;
    h[EOS] = 800.0;
    p
}

#[test]
fn single_negative_at_one_half_gives_log_two() {
    let p = half_half_model();
    let ex = DistillExample::new(&prompt(0, "t"), "a", false, 64);
    let lp = p.next_token_logprobs(&ex.tokens[..ex.tokens.len() - 1]).unwrap();
    assert!((lp.row(ex.from - 1)[b'a' as usize] + 2f64.ln()).abs() < 1e-12);
    let got = loss_value(&p, std::slice::from_ref(&ex), 1.0, UnlikelihoodForm::Token);
    assert!((got + 0.5f64.ln()).abs() < 1e-12, "{got}");
    // Two tokens at one half: whole-sequence probability is one quarter.
    let seq = loss_value(&p, &[ex], 1.0, UnlikelihoodForm::Sequence);
    assert!((seq + 0.75f64.ln()).abs() < 1e-12, "{seq}");
}

#[test]
fn empty_reasoning_is_skipped() {
    let p = perturbed(4);
    let mut b = batch();
    let empty = DistillExample::new(&prompt(9, "z"), "", true, 64);
    assert_eq!(empty.reasoning_len(), 0);
    b.push(empty);
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, BindMode::Adapters).unwrap();
    let (_, stats) = distill_loss(&mut tape, &bound, &b, 1.0, UnlikelihoodForm::Token, None).unwrap();
    assert_eq!(stats.skipped_empty, 1);
    assert_eq!(stats.triples, 5);
    assert_eq!((stats.positives, stats.negatives), (3, 2));
}

#[test]
fn distillation_loss_gradient_matches_finite_differences() {
    let p = perturbed(5);
    let batch = batch();
    let i = p.lora_indices()[1];
    let grads = {
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, BindMode::Adapters).unwrap();
        let (l, _) = distill_loss(&mut tape, &b, &batch, 2.0, UnlikelihoodForm::Token, None).unwrap();
        tape.backward(l).unwrap();
        tape.grad_tensor(b.var(i)).into_data()
    };
    let numeric = central_difference(
        |t: &Tensor| {
            let mut q = p.clone();
            *q.tensor_mut(i) = t.clone();
            Ok(loss_value(&q, &batch, 2.0, UnlikelihoodForm::Token))
        },
        &p.tensors()[i],
        1e-5,
    )
    .unwrap();
    let err = max_relative_error(&grads, &numeric);
    assert!(err < 1e-4, "relative error {err}");
}

fn positives(n: usize) -> Vec<DistillExample> {
    (0..n)
        .map(|i| {
            let fraud = i % 2 == 0;
            let target = if fraud { "gift card now" } else { "fair price" };
            let word = if fraud { "Fraud" } else { "Benign" };
            DistillExample::new(&prompt(i, target), &format!("Prediction: {word}"), true, 64)
        })
        .collect()
}

#[test]
fn finetune_decreases_loss_and_freezes_base() {
    let base = EncoderParams::init(tiny(64), 7).unwrap();
    let mut p = base.clone();
    let cfg = DistillConfig {
        lambda: 0.0,
        epochs: 5,
        lr: 1e-2,
        batch_size: 4,
        ..DistillConfig::default()
    };
    let curve = finetune_student(&mut p, &positives(20), &cfg).unwrap();
    assert_eq!(curve.len(), 5);
    assert!(curve.windows(2).all(|w| w[1] < w[0]), "{curve:?}");
    let trainable = p.trainable_indices(BindMode::Adapters);
    for (i, (a, b)) in p.tensors().iter().zip(base.tensors()).enumerate() {
        if !trainable.contains(&i) {
            assert!(a.bitwise_eq(b), "base tensor {i} changed");
        }
    }
    let mut again = base.clone();
    finetune_student(&mut again, &positives(20), &cfg).unwrap();
    assert_eq!(again, p);
}

#[test]
fn zero_learning_rate_leaves_student_unchanged() {
    let base = EncoderParams::init(tiny(64), 7).unwrap();
    let mut p = base.clone();
    let cfg = DistillConfig {
        lr: 0.0,
        epochs: 2,
        ..DistillConfig::default()
    };
    finetune_student(&mut p, &positives(6), &cfg).unwrap();
    assert_eq!(p, base);
}

#[test]
fn prompt_has_one_target_and_one_neighbor_block() {
    let (g, _) = generate_graph(&SynthConfig {
        nodes: 50,
        ..SynthConfig::default()
    })
    .unwrap();
    let p = build_prompt(&g, 3, 2, &LabelVocab::default());
    let text = p.text();
    assert_eq!(text.matches("\nTarget: ").count(), 1);
    assert_eq!(text.matches("\nNeighbors:").count(), 1);
    assert!(text.contains(g.text(3)));
    assert!(text.ends_with("Prediction: Fraud or Benign."));
    assert!(p.neighbors.len() <= 2 * g.num_relations());
}

#[test]
fn overlong_prompt_is_shortened_to_fit() {
    let mut p = prompt(0, &"t".repeat(300));
    p.neighbors = vec![("user".into(), "n".repeat(200)); 3];
    let ex = DistillExample::new(&p, "Prediction: Fraud", true, 128);
    assert!(ex.tokens.len() <= 128);
    assert_eq!(ex.reasoning_len(), "Prediction: Fraud".len());
}

#[test]
fn stratified_sample_matches_population_fraction() {
    let (g, _) = generate_graph(&SynthConfig {
        nodes: 400,
        ..SynthConfig::default()
    })
    .unwrap();
    let train = g.split_ids(Split::Train);
    let frac = train.iter().filter(|&&v| g.node(v).label == Some(true)).count() as f64 / train.len() as f64;
    for u in [10, 37, 100] {
        let s = sample_distillation_nodes(&g, u, 5).unwrap();
        assert_eq!(s.len(), u);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        let pos = s.iter().filter(|&&v| g.node(v).label == Some(true)).count() as f64;
        assert!((pos - frac * u as f64).abs() <= 1.0);
    }
    assert!(sample_distillation_nodes(&g, train.len() + 1, 0).is_err());
}

#[test]
fn triples_are_labeled_by_parsed_prediction() {
    let (g, _) = generate_graph(&SynthConfig {
        nodes: 60,
        ..SynthConfig::default()
    })
    .unwrap();
    let teacher = SyntheticTeacher::new(&g, 0.5);
    let vocab = LabelVocab::default();
    let nodes = sample_distillation_nodes(&g, 10, 1).unwrap();
    let triples = collect_triples(&g, &nodes, &teacher, 5, 1, &vocab, 3).unwrap();
    assert_eq!(triples.len(), 50);
    for t in &triples {
        let parsed = parse_prediction(&t.reasoning, &vocab);
        assert_eq!(t.predicted, parsed);
        assert_eq!(t.correct, parsed.is_some() && parsed == g.node(t.prompt.node).label);
    }
    let again = collect_triples(&g, &nodes, &teacher, 5, 1, &vocab, 3).unwrap();
    assert_eq!(again, triples);
}

#[test]
fn transcript_teacher_replays_and_marks_gaps_incorrect() {
    let jsonl = "{\"node_id\":0,\"path\":0,\"reasoning\":\"Prediction: Fraud\"}\n\n\
                 {\"node_id\":0,\"path\":1,\"reasoning\":\"Prediction: Benign\"}\n";
    let t = TranscriptTeacher::from_jsonl(jsonl.as_bytes()).unwrap();
    assert_eq!(t.len(), 2);
    let mut g = HeteroGraph::new(&["r"]).unwrap();
    g.add_node("x", Some(true), Split::Train).unwrap();
    let triples = collect_triples(&g, &[0], &t, 3, 1, &LabelVocab::default(), 0).unwrap();
    assert_eq!(triples.iter().map(|t| t.correct).collect::<Vec<_>>(), vec![true, false, false]);
    assert!(triples[2].reasoning.is_empty());
    assert!(t.generate(&prompt(5, "x"), 0, 0).is_err());
    assert!(TranscriptTeacher::from_jsonl("{not json}".as_bytes()).is_err());
}

#[test]
fn generated_cots_are_total_and_deterministic() {
    let (g, _) = generate_graph(&SynthConfig {
        nodes: 25,
        ..SynthConfig::default()
    })
    .unwrap();
    let p = EncoderParams::init(tiny(128), 1).unwrap();
    let vocab = LabelVocab::default();
    let a = generate_all_cots(&g, &p, 1, &vocab, 8).unwrap();
    assert_eq!(a.len(), 25);
    assert_eq!(a, generate_all_cots(&g, &p, 1, &vocab, 8).unwrap());
    assert!(a.iter().all(|c| c.len() <= 8 * 4));
}

#[test]
fn cot_store_round_trip() {
    let records = vec![
        CotRecord {
            node_id: 0,
            reasoning: "Cue: x\nPrediction: Fraud".into(),
            predicted: Some(true),
            correct: true,
        },
        CotRecord {
            node_id: 1,
            reasoning: String::new(),
            predicted: None,
            correct: false,
        },
    ];
    let mut buf = b"# header line\n".to_vec();
    write_cot_store(&mut buf, &records).unwrap();
    assert_eq!(read_cot_store(buf.as_slice()).unwrap(), records);
}

#[test]
fn vocabulary_size_is_bytes_plus_specials() {
    assert_eq!(VOCAB_SIZE, 260);
}
