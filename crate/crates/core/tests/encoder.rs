use fraudcot::encoder::{
    byte_tokens, detokenize, tokenize, BindMode, EncoderConfig, EncoderParams, GenerateOptions, BOS, EOS, PAD, VOCAB_SIZE,
};
use fraudcot::tensor::{central_difference, max_relative_error, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> EncoderConfig {
    EncoderConfig {
        layers: 1,
        hidden: 8,
        heads: 2,
        max_len: 16,
        lora_rank: 2,
        lora_dropout: 0.0,
    }
}

fn index_of(p: &EncoderParams, name: &str) -> usize {
    p.names().iter().position(|n| n == name).unwrap()
}

fn randomize_adapters(p: &mut EncoderParams, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in p.lora_indices() {
        for v in p.tensor_mut(i).data_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
    }
}

/// Model that ignores context except the current token: all blocks output
/// zero, so the final state is a normalized one-hot of the token embedding.
fn chain_model(chain: &[(usize, usize)]) -> EncoderParams {
    let mut p = EncoderParams::init(tiny(), 0).unwrap();
    let keep = [index_of(&p, "embed"), index_of(&p, "final_ln.gain")];
    for i in 0..p.tensors().len() {
        if !keep.contains(&i) {
            p.tensor_mut(i).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let d = p.config().hidden;
    let embed = index_of(&p, "embed");
    p.tensor_mut(embed).data_mut().iter_mut().for_each(|v| *v = 0.0);
    let head = index_of(&p, "head");
    for (dim, &(from, to)) in chain.iter().enumerate() {
        p.tensor_mut(embed).data_mut()[from * d + dim] = 1000.0;
        p.tensor_mut(head).data_mut()[dim * VOCAB_SIZE + to] = 100.0;
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tokenize_round_trips(s in "[ -~]{0,40}") {
        let t = tokenize(&s, 64);
        prop_assert_eq!(t[0], BOS);
        prop_assert_eq!(*t.last().unwrap(), EOS);
        prop_assert_eq!(detokenize(&t), s);
    }

    #[test]
    fn future_tokens_do_not_change_past_distributions(tail in prop::collection::vec(0usize..256, 1..6)) {
        let p = EncoderParams::init(tiny(), 3).unwrap();
        let mut a = vec![BOS, 104, 105, 33];
        let n = a.len();
        let base = p.next_token_logprobs(&a).unwrap();
        a.extend(&tail);
        let longer = p.next_token_logprobs(&a).unwrap();
        prop_assert_eq!(&longer.data()[..n * VOCAB_SIZE], base.data());
    }
}

#[test]
fn long_text_truncates_to_exact_length() {
    let t = tokenize(&"x".repeat(500), 128);
    assert_eq!(t.len(), 128);
    assert_eq!(tokenize("", 16), vec![BOS, EOS]);
    assert_eq!(tokenize("ab", 16), vec![BOS, 97, 98, EOS]);
}

#[test]
fn logprob_rows_normalize() {
    let p = EncoderParams::init(tiny(), 5).unwrap();
    let lp = p.next_token_logprobs(&[BOS, 1, 2, 3]).unwrap();
    for r in 0..4 {
        let total: f64 = lp.row(r).iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-10);
    }
    assert_eq!(p.next_token_logprobs(&[BOS]).unwrap().shape(), &[1, VOCAB_SIZE]);
    assert!(p.next_token_logprobs(&[BOS; 17]).is_err());
}

#[test]
fn encode_is_deterministic_and_pad_invariant() {
    let p = EncoderParams::init(tiny(), 9).unwrap();
    let a = p.encode_text("same text");
    assert!(a.bitwise_eq(&p.encode_text("same text")));
    let mut padded = tokenize("same text", 16);
    padded.extend([PAD, PAD]);
    let b = p.encode_tokens(&padded).unwrap();
    // Padding only trails real tokens, so causal masking keeps the real rows intact.
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn embedding_gradient_matches_finite_differences() {
    let mut p = EncoderParams::init(tiny(), 4).unwrap();
    randomize_adapters(&mut p, 8);
    let tokens = tokenize("fraud?", 16);
    let embed = p.embed_index();
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, BindMode::Full).unwrap();
    let e = bound.encode(&mut tape, &tokens, None).unwrap();
    let sq = tape.mul(e, e).unwrap();
    let loss = tape.sum(sq).unwrap();
    tape.backward(loss).unwrap();
    let analytic = tape.grad_tensor(bound.var(embed));
    let numeric = central_difference(
        |t: &Tensor| {
            let mut q = p.clone();
            *q.tensor_mut(embed) = t.clone();
            let v = q.encode_tokens(&tokens).unwrap();
            Ok(v.data().iter().map(|x| x * x).sum())
        },
        &p.tensors()[embed],
        1e-5,
    )
    .unwrap();
    let err = max_relative_error(analytic.data(), &numeric);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn zero_adapters_match_base_and_merge_preserves_outputs() {
    let p = EncoderParams::init(tiny(), 2).unwrap();
    assert!(!p.has_nonzero_adapters());
    let mut merged = p.clone();
    merged.merge_adapters(None);
    assert_eq!(merged, p);

    let mut q = p.clone();
    randomize_adapters(&mut q, 1);
    let before = q.next_token_logprobs(&byte_tokens("merge me")).unwrap();
    let enc_before = q.encode_text("merge me");
    q.merge_adapters(None);
    assert!(!q.has_nonzero_adapters());
    let after = q.next_token_logprobs(&byte_tokens("merge me")).unwrap();
    assert!(before.max_abs_diff(&after) < 1e-10);
    assert!(enc_before.max_abs_diff(&q.encode_text("merge me")) < 1e-10);
}

#[test]
fn merge_warns_when_registered_cache_matches() {
    let mut p = EncoderParams::init(tiny(), 2).unwrap();
    let registered = p.checksum();
    assert!(p.merge_adapters(Some(&registered)).is_some());
    assert!(p.merge_adapters(Some("other")).is_none());
}

#[test]
fn snapshot_is_unaffected_by_later_training() {
    let mut p = EncoderParams::init(tiny(), 6).unwrap();
    let snap = p.snapshot();
    let before = snap.encode_text("abc");
    randomize_adapters(&mut p, 3);
    assert!(!p.encode_text("abc").bitwise_eq(&before));
    assert!(snap.encode_text("abc").bitwise_eq(&before));
}

#[test]
fn hand_built_chain_is_emitted() {
    let a = b'a' as usize;
    let b = b'b' as usize;
    let p = chain_model(&[(BOS, a), (a, b), (b, EOS)]);
    assert_eq!(p.greedy_generate(&[BOS], 10).unwrap(), vec![a, b]);
    let twice = p.generate(&[BOS], &GenerateOptions { max_new: 10, ..GenerateOptions::default() }).unwrap();
    assert_eq!(twice, vec![a, b]);
    assert_eq!(p.greedy_generate(&[BOS], 1).unwrap(), vec![a]);
}

#[test]
fn eos_favoring_head_generates_nothing() {
    let p = chain_model(&[(BOS, EOS)]);
    assert!(p.greedy_generate(&[BOS], 5).unwrap().is_empty());
}

#[test]
fn adapter_mode_trains_only_adapters_and_norms() {
    let p = EncoderParams::init(tiny(), 1).unwrap();
    let names = p.names();
    for i in p.trainable_indices(BindMode::Adapters) {
        let n = &names[i];
        assert!(n.contains("lora") || n.contains("ln"), "{n} should be frozen");
    }
    assert!(p.trainable_indices(BindMode::Frozen).is_empty());
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let mut p = EncoderParams::init(tiny(), 12).unwrap();
    randomize_adapters(&mut p, 12);
    let mut buf = Vec::new();
    p.write_checkpoint(&mut buf).unwrap();
    let back = EncoderParams::read_checkpoint(&mut buf.as_slice()).unwrap();
    assert_eq!(back, p);
    assert_eq!(back.checksum(), p.checksum());
}
