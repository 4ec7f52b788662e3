use std::collections::{HashMap, HashSet};

use focusft::masking::build_focusft_mask;
use focusft::masking::validate_mask;
use focusft::taskgen::*;
use proptest::prelude::*;

const QUERY: usize = 3;
const SEP: usize = 2;
const ASSIST: usize = 7;

/// Token-level scan written against the layout rules, separate from the
/// library's own resolver.
fn scan(s: &Sample, vocab: &Vocab) -> Option<Vec<usize>> {
    let t = &s.tokens;
    let seg = &s.segmentation;
    // The final assistant turn starts at the last ASSIST marker.
    let final_start = (0..t.len()).rev().find(|&i| t[i] == ASSIST && !seg.is_context(i))?;
    let ctx: Vec<usize> = (0..final_start).filter(|&i| seg.is_context(i)).collect();
    let q = *ctx.iter().rev().find(|&&i| t[i] == QUERY)?;
    let mut facts: HashMap<usize, Vec<usize>> = HashMap::new();
    for &i in &ctx {
        if t[i] == SEP && i + 2 < final_start && seg.is_context(i + 2) {
            facts.entry(t[i + 1]).or_default().push(t[i + 2]);
        }
    }
    match s.kind {
        TaskKind::Aggregation => {
            let mut counts: HashMap<usize, usize> = HashMap::new();
            for &i in &ctx {
                if vocab.is_key(t[i]) {
                    *counts.entry(t[i]).or_default() += 1;
                }
            }
            let best = *counts.values().max()?;
            let top: Vec<usize> = counts.iter().filter(|(_, &c)| c == best).map(|(&k, _)| k).collect();
            (top.len() == 1).then_some(top)
        }
        TaskKind::TwoFact => {
            let k = t[q + 1];
            let mid = facts.get(&k)?;
            let [a] = mid.as_slice() else { return None };
            let end = facts.get(a)?;
            let [v] = end.as_slice() else { return None };
            Some(vec![*v])
        }
        _ => facts.get(&t[q + 1]).cloned(),
    }
}

fn cfg(kind: TaskKind, seq_len: usize) -> TaskConfig {
    TaskConfig { kind, seq_len, n_turns: 4, ..TaskConfig::default() }
}

#[test]
fn oracle_agrees_on_ten_thousand_samples() {
    let vocab = Vocab::new(64).unwrap();
    let kinds = [
        TaskKind::SingleFact,
        TaskKind::TwoFact,
        TaskKind::MultiValue,
        TaskKind::Aggregation,
        TaskKind::Agentic,
    ];
    let mut checked = 0;
    for (n, seed) in (0..10_000u64).enumerate() {
        let kind = kinds[n % kinds.len()];
        let s = generate(&cfg(kind, 96 + 32 * (n % 3)), seed).unwrap();
        s.validate(64).unwrap();
        assert!(validate_mask(&build_focusft_mask(&s.segmentation), &s.segmentation).unwrap().is_empty());
        let mut gold = s.gold();
        let mut want = scan(&s, &vocab).unwrap_or_else(|| panic!("{kind:?} seed {seed}: no answer"));
        if kind == TaskKind::MultiValue {
            gold.sort();
            want.sort();
        }
        assert_eq!(gold, want, "{kind:?} seed {seed}");
        assert_eq!(oracle_answer(&s.tokens, &s.segmentation, &vocab).map(|mut v| {
            if kind == TaskKind::MultiValue {
                v.sort();
            }
            v
        }), Some(want));
        checked += 1;
    }
    assert_eq!(checked, 10_000);
}

#[test]
fn answers_are_short_and_needles_are_context() {
    for seed in 0..200 {
        for kind in [TaskKind::SingleFact, TaskKind::TwoFact, TaskKind::MultiValue, TaskKind::Aggregation] {
            let s = generate(&cfg(kind, 128), seed).unwrap();
            assert!((1..=2).contains(&s.answer_span.len()), "{kind:?}");
            assert!(s.needle_positions.iter().all(|&p| s.segmentation.is_context(p)));
            assert!(s.answer_span.iter().all(|&p| !s.segmentation.is_context(p)));
        }
    }
}

#[test]
fn mid_depth_needle_lands_mid_sequence() {
    let vocab = Vocab::new(64).unwrap();
    for seed in 0..50 {
        let s = gen_single_fact(&vocab, 256, 0.5, seed).unwrap();
        let idx = s.needle_positions[0] as f64;
        assert!((idx / 256.0 - 0.5).abs() < 0.1, "seed {seed}: {idx}");
    }
}

#[test]
fn agentic_facts_precede_the_turn_that_needs_them() {
    let vocab = Vocab::new(64).unwrap();
    let s = gen_multiturn_agentic(&vocab, 4096, 5, 17).unwrap();
    let seg = &s.segmentation;
    let ctx_turns: HashSet<usize> = (0..s.len()).filter(|&i| seg.is_context(i)).map(|i| seg.turn_ids()[i]).collect();
    let resp_turns: HashSet<usize> = (0..s.len()).filter(|&i| !seg.is_context(i)).map(|i| seg.turn_ids()[i]).collect();
    assert_eq!((ctx_turns.len(), resp_turns.len()), (5, 5));
    assert!(s.regions.is_partition(s.len()));
    // Each response value must appear after SEP in an earlier tool turn.
    for (i, &tok) in s.tokens.iter().enumerate() {
        if !seg.is_context(i) && vocab.is_value(tok) {
            let turn = seg.turn_ids()[i];
            let found = (2..i).any(|j| {
                s.tokens[j] == tok && s.tokens[j - 2] == SEP && seg.is_context(j) && seg.turn_ids()[j] < turn
            });
            assert!(found, "value at {i} has no earlier fact");
        }
    }
    for i in 0..s.len() {
        assert_eq!(seg.is_context(i), !resp_turns.contains(&seg.turn_ids()[i]));
    }
}

#[test]
fn splits_have_exact_sizes_and_disjoint_pairs() {
    for kind in [TaskKind::SingleFact, TaskKind::TwoFact, TaskKind::Aggregation] {
        let (train, eval) = make_splits(&cfg(kind, 96), 300, 80, 4).unwrap();
        assert_eq!((train.len(), eval.len()), (300, 80));
        let tp: HashSet<_> = train.iter().map(|s| s.fact_pair).collect();
        let ep: HashSet<_> = eval.iter().map(|s| s.fact_pair).collect();
        assert!(tp.is_disjoint(&ep), "{kind:?}");
    }
}

#[test]
fn constant_predictor_sits_at_chance() {
    let vocab = Vocab::new(64).unwrap();
    let (_, eval) = make_splits(&cfg(TaskKind::SingleFact, 64), 0, 4000, 21).unwrap();
    let n = eval.len() as f64;
    let p = 1.0 / vocab.n_values as f64;
    let sigma = (p * (1.0 - p) / n).sqrt();
    for guess in [vocab.value(0), vocab.value(7)] {
        let hits = eval.iter().filter(|s| s.gold() == vec![guess]).count() as f64;
        assert!((hits / n - p).abs() < 3.0 * sigma, "guess {guess}: {}", hits / n);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generation_is_pure(seed in any::<u64>(), kind_ix in 0usize..5, len_ix in 0usize..3) {
        let kind = [TaskKind::SingleFact, TaskKind::TwoFact, TaskKind::MultiValue, TaskKind::Aggregation, TaskKind::Agentic][kind_ix];
        let c = cfg(kind, [96, 160, 256][len_ix]);
        prop_assert_eq!(generate(&c, seed).unwrap(), generate(&c, seed).unwrap());
    }

    #[test]
    fn jsonl_round_trip(seed in any::<u64>()) {
        let s = generate(&cfg(TaskKind::Agentic, 128), seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write_jsonl(&p, std::slice::from_ref(&s)).unwrap();
        prop_assert_eq!(read_jsonl(&p).unwrap(), vec![s]);
    }
}
