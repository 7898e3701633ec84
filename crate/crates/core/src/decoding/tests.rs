use ndarray::Array2;

use super::*;
use crate::backends::{ToyLm, ToyLmConfig};
use crate::rng::SeededRng;

pub(crate) fn tiny_lm(vocab: usize, seed: u64) -> ToyLm {
    ToyLm::new(ToyLmConfig {
        d_model: 40,
        vocab_size: vocab,
        n_layers: 2,
        mlp_hidden: 16,
        max_positions: 32,
        anchor_id: 3.min(vocab as u32 - 1),
        noise_std: 1.0,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn prefix(seed: u64, t: usize) -> Array2<f64> {
    let mut r = SeededRng::new(seed);
    Array2::from_shape_simple_fn((t, 40), || r.normal())
}

/// Every complete sequence: stops at the first EOS or at the horizon.
fn exhaustive_best(
    lm: &dyn LanguageModel,
    prefix: ArrayView2<f64>,
    horizon: usize,
) -> (Vec<TokenId>, f64) {
    fn walk(
        lm: &dyn LanguageModel,
        prefix: ArrayView2<f64>,
        horizon: usize,
        tokens: &mut Vec<TokenId>,
        lp: f64,
        best: &mut (Vec<TokenId>, f64),
    ) {
        let lps = next_logprobs(lm, prefix, tokens);
        for (v, l) in lps.iter().enumerate() {
            tokens.push(v as TokenId);
            let total = lp + l;
            if v as TokenId == lm.eos_id() || tokens.len() == horizon {
                if total > best.1 || (total == best.1 && *tokens < best.0) {
                    *best = (tokens.clone(), total);
                }
            } else {
                walk(lm, prefix, horizon, tokens, total, best);
            }
            tokens.pop();
        }
    }
    let mut best = (vec![], f64::NEG_INFINITY);
    walk(lm, prefix, horizon, &mut vec![], 0.0, &mut best);
    best
}

#[test]
fn wide_beam_matches_exhaustive_search() {
    for case in 0..12u64 {
        let vocab = 4 + (case % 3) as usize;
        let horizon = 2 + (case % 3) as usize;
        let lm = tiny_lm(vocab, case);
        let p = prefix(100 + case, 3);
        let cfg = DecodeConfig {
            beam_size: vocab.pow(horizon as u32),
            max_new_tokens: Some(horizon),
            ..Default::default()
        };
        let hyp = beam_search(&lm, p.view(), &cfg);
        let (tokens, score) = exhaustive_best(&lm, p.view(), horizon);
        assert_eq!(hyp.token_ids, tokens, "case {case}");
        assert!((hyp.logprob - score).abs() < 1e-12);
        assert!(hyp.finished);
    }
}

#[test]
fn beam_one_is_greedy() {
    for case in 0..10u64 {
        let lm = tiny_lm(5, case);
        let p = prefix(7 + case, 4);
        let cfg = DecodeConfig {
            beam_size: 1,
            max_new_tokens: Some(6),
            ..Default::default()
        };
        let g = greedy_decode(&lm, p.view(), 6, lm.eos_id());
        let b = beam_search(&lm, p.view(), &cfg);
        assert_eq!(b.token_ids, g.token_ids);
        assert_eq!(b.logprob, g.logprob);
        assert_eq!(b.finished, g.finished);
    }
}

#[test]
fn short_finished_hypothesis_beats_longer_one() {
    let a = Hypothesis {
        token_ids: vec![1],
        logprob: -0.1,
        score: -0.1,
        finished: true,
    };
    let b = Hypothesis {
        token_ids: vec![4, 5, 1],
        logprob: -0.5,
        score: -0.5,
        finished: true,
    };
    let mut pool = [b, a.clone()];
    pool.sort_by(rank);
    assert_eq!(pool[0], a);
    assert_eq!(score_of(-0.5, 3, 0.0), -0.5);
    assert!((score_of(-0.6, 3, 1.0) + 0.2).abs() < 1e-15);
}

#[test]
fn batching_does_not_change_results() {
    let lm = tiny_lm(6, 3);
    let a = prefix(1, 5);
    let b = prefix(2, 2);
    let cfg = DecodeConfig {
        beam_size: 3,
        max_new_tokens: Some(4),
        ..Default::default()
    };
    let items = [
        AssembleItem {
            speech: a.view(),
            prompt_ids: &[4, 3],
            transcript_ids: None,
        },
        AssembleItem {
            speech: b.view(),
            prompt_ids: &[4, 3],
            transcript_ids: None,
        },
    ];
    let both = decode(
        &assemble(&items, &lm, AssembleMode::Decode).unwrap(),
        &lm,
        &cfg,
    )
    .unwrap();
    for (i, item) in items.iter().enumerate() {
        let one = AssembleItem {
            speech: item.speech,
            prompt_ids: item.prompt_ids,
            transcript_ids: None,
        };
        let alone = decode(
            &assemble(&[one], &lm, AssembleMode::Decode).unwrap(),
            &lm,
            &cfg,
        )
        .unwrap();
        assert_eq!(alone[0], both[i]);
    }
}

#[test]
fn hypothesis_invariants() {
    let lm = tiny_lm(6, 9);
    for beam in 1..5 {
        let cfg = DecodeConfig {
            beam_size: beam,
            max_new_tokens: Some(5),
            ..Default::default()
        };
        let h = beam_search(&lm, prefix(beam as u64, 3).view(), &cfg);
        assert!(h.logprob <= 0.0);
        assert!(h.finished);
        assert!(h.token_ids.last() == Some(&lm.eos_id()) || h.token_ids.len() == 5);
    }
    assert!(DecodeConfig {
        beam_size: 0,
        ..Default::default()
    }
    .validate()
    .is_err());
}
