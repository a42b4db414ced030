//! Property suites over lattices, collapse, losses and edit scripts.

use copyctc::emission::log_add_exp;
use copyctc::lattice::{collapse, is_valid, recover, translate};
use copyctc::loss::{adjacent_repeats, feasible, forward_backward_grad, forward_nll, viterbi_align};
use copyctc::metrics::{apply_edits, edit_counts, extract_edits, levenshtein, wer, EditCounts};
use copyctc::{AlignmentLabel, AlignmentPath, EditSample, EmissionLattice, TokenId, Variant};
use proptest::prelude::*;

const CASES: u32 = 10_000;

fn label(v: u32, keep: bool) -> impl Strategy<Value = AlignmentLabel> {
    let n = v + 1 + u32::from(keep);
    (0..n).prop_map(move |x| match x {
        x if x < v => AlignmentLabel::Token(TokenId(x)),
        x if x == v && keep => AlignmentLabel::Keep,
        _ => AlignmentLabel::Blank,
    })
}

/// `(source, path)` with `N ≤ 4`, `T ≤ 3`, `|V| ≤ 4`.
fn source_and_path() -> impl Strategy<Value = (Vec<TokenId>, AlignmentPath)> {
    (1usize..=4, 1usize..=3, 1u32..=4).prop_flat_map(|(n, t, v)| {
        (
            prop::collection::vec((0..v).prop_map(TokenId), n),
            prop::collection::vec(label(v, true), n * t),
        )
            .prop_map(move |(src, labels)| (src, AlignmentPath::new(labels, n, t).unwrap()))
    })
}

fn lattice_for(n: usize, t: usize, v: usize, raw: &[f64], variant: Variant) -> EmissionLattice {
    let cols = variant.columns(v);
    let mut lp = Vec::with_capacity(n * t * cols);
    for row in raw.chunks(cols) {
        let z = row.iter().copied().fold(f64::NEG_INFINITY, log_add_exp);
        lp.extend(row.iter().map(|x| x - z));
    }
    EmissionLattice::new(lp, n, t, v, variant).unwrap()
}

/// Random lattice plus a target recovered from one of its paths.
fn instance() -> impl Strategy<Value = (EditSample, EmissionLattice)> {
    (1usize..=4, 1usize..=3, 1usize..=4)
        .prop_flat_map(|(n, t, v)| {
            let cols = v + 2;
            (
                Just((n, t, v)),
                prop::collection::vec(0..v as u32, n),
                prop::collection::vec(label(v as u32, true), n * t),
                prop::collection::vec(-4.0f64..4.0, n * t * cols),
            )
        })
        .prop_map(|((n, t, v), src, labels, raw)| {
            let source: Vec<TokenId> = src.into_iter().map(TokenId).collect();
            let path = AlignmentPath::new(labels, n, t).unwrap();
            let target = recover(&path, &source).unwrap();
            (EditSample::new(source, target), lattice_for(n, t, v, &raw, Variant::CopyAware))
        })
}

fn tokens(max_len: usize, v: u32) -> impl Strategy<Value = Vec<TokenId>> {
    prop::collection::vec((0..v).prop_map(TokenId), 0..=max_len)
}

fn nonempty(max_len: usize, v: u32) -> impl Strategy<Value = Vec<TokenId>> {
    prop::collection::vec((0..v).prop_map(TokenId), 1..=max_len)
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: CASES,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn recovered_output_is_valid_and_feasible((source, path) in source_and_path()) {
        let out = recover(&path, &source).unwrap();
        prop_assert!(out.len() <= path.len());
        let sample = EditSample::new(source.clone(), out.clone());
        prop_assert!(is_valid(&path, &sample));
        prop_assert!(feasible(&sample, path.upsample()));
        prop_assert!(out.len() + adjacent_repeats(&out) <= path.len());
    }

    #[test]
    fn collapse_never_emits_adjacent_run_from_one_slot_run((source, path) in source_and_path()) {
        let slots = translate(&path, &source).unwrap();
        let out = collapse(&slots);
        // Every output token is the value of a maximal run of equal non-blank slots.
        let mut runs = Vec::new();
        let mut prev = None;
        for s in &slots {
            if *s != prev {
                if let Some(t) = s {
                    runs.push(*t);
                }
                prev = *s;
            }
        }
        prop_assert_eq!(out, runs);
    }

    #[test]
    fn all_keep_reproduces_source(src in nonempty(6, 4), t in 1usize..=3) {
        let path = AlignmentPath::all(AlignmentLabel::Keep, src.len(), t);
        let out = recover(&path, &src).unwrap();
        // Runs of equal source tokens merge.
        let mut dedup = src.clone();
        dedup.dedup();
        prop_assert_eq!(out, dedup);
        prop_assert!(recover(&AlignmentPath::all(AlignmentLabel::Blank, src.len(), t), &src).unwrap().is_empty());
    }

    #[test]
    fn loss_properties((sample, lattice) in instance()) {
        let res = forward_backward_grad(&sample, &lattice).unwrap();
        prop_assert!(res.feasible);
        prop_assert!(res.neg_log_likelihood.is_finite() && res.neg_log_likelihood >= -1e-12);
        for row in res.grad.chunks(lattice.columns()) {
            prop_assert!((row.iter().sum::<f64>() + 1.0).abs() < 1e-9);
        }
        let best = viterbi_align(&sample, &lattice).unwrap();
        prop_assert!(is_valid(&best.path, &sample));
        prop_assert!(best.log_prob <= -res.neg_log_likelihood + 1e-9);
        let fwd = forward_nll(&sample, &lattice).unwrap();
        prop_assert!((fwd.neg_log_likelihood - res.neg_log_likelihood).abs() < 1e-12);
    }

    #[test]
    fn infeasible_targets_have_no_mass(n in 1usize..=3, t in 1usize..=2, extra in 1usize..=3) {
        let target: Vec<TokenId> = (0..n * t + extra).map(|i| TokenId((i % 2) as u32)).collect();
        let sample = EditSample::new(vec![TokenId(0); n], target);
        let lattice = EmissionLattice::uniform(n, t, 2, Variant::CopyAware);
        let res = forward_backward_grad(&sample, &lattice).unwrap();
        prop_assert!(!res.feasible);
        prop_assert_eq!(res.neg_log_likelihood, f64::INFINITY);
    }

    #[test]
    fn edit_script_replays(src in tokens(12, 5), hyp in tokens(12, 5)) {
        let edits = extract_edits(&src, &hyp);
        prop_assert_eq!(apply_edits(&src, &edits).unwrap(), hyp.clone());
        let cost: usize = edits.iter().map(|e| e.len.max(e.replacement.len())).sum();
        prop_assert_eq!(cost, levenshtein(&src, &hyp));
        prop_assert!(edits.windows(2).all(|w| w[0].start + w[0].len < w[1].start));
    }

    #[test]
    fn wer_is_invariant_under_vocab_permutation(src in nonempty(10, 6), tgt in tokens(10, 6), shift in 1u32..6) {
        let perm = |s: &[TokenId]| s.iter().map(|t| TokenId((t.0 + shift) % 6)).collect::<Vec<_>>();
        prop_assert_eq!(wer(&src, &tgt).unwrap(), wer(&perm(&src), &perm(&tgt)).unwrap());
    }

    #[test]
    fn scores_are_bounded_and_self_consistent(src in tokens(8, 4), hyp in tokens(8, 4), gold in tokens(8, 4)) {
        let c = edit_counts(&src, &hyp, &gold);
        for x in [c.precision(), c.recall(), c.f05()] {
            prop_assert!((0.0..=1.0).contains(&x));
        }
        prop_assert_eq!(edit_counts(&src, &gold, &gold).fp, 0);
        prop_assert_eq!(edit_counts(&src, &gold, &gold).fn_, 0);
        prop_assert_eq!(c.tp + c.fp, extract_edits(&src, &hyp).len());
    }

    #[test]
    fn corpus_scores_ignore_order(rows in prop::collection::vec((tokens(6, 3), tokens(6, 3), tokens(6, 3)), 1..8), rot in 0usize..8) {
        let total = |rs: &[(Vec<TokenId>, Vec<TokenId>, Vec<TokenId>)]| {
            let mut c = EditCounts::default();
            for (s, h, g) in rs {
                c.add(edit_counts(s, h, g));
            }
            c
        };
        let mut shuffled = rows.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        prop_assert_eq!(total(&rows), total(&shuffled));
    }
}
