//! Token-level edit scoring: Levenshtein edit extraction, P/R/F0.5, WER and
//! WER-bucketed corpus reports.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::TokenId;

pub const BETA: f64 = 0.5;
pub const DEFAULT_BUCKET_EDGES: [f64; 4] = [0.08, 0.16, 0.24, 0.32];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditKind {
    Insert,
    Delete,
    Substitute,
}

/// Replace `source[start..start + len]` with `replacement`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EditOp {
    pub kind: EditKind,
    pub start: usize,
    pub len: usize,
    pub replacement: Vec<TokenId>,
}

fn distance_table(a: &[TokenId], b: &[TokenId]) -> Vec<usize> {
    let w = b.len() + 1;
    let mut d = vec![0usize; (a.len() + 1) * w];
    for j in 0..w {
        d[j] = j;
    }
    for i in 1..=a.len() {
        d[i * w] = i;
        for j in 1..w {
            let sub = d[(i - 1) * w + j - 1] + usize::from(a[i - 1] != b[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    d
}

/// Unit-cost Levenshtein distance.
pub fn levenshtein(a: &[TokenId], b: &[TokenId]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Clone, Copy, PartialEq)]
enum Step {
    Match,
    Sub,
    Del,
    Ins,
}

/// Minimal edit script from `source` to `hypothesis`, with adjacent
/// non-matching steps merged into maximal spans.
///
/// Backtracking from the end prefers the diagonal (match or substitute),
/// then deletion, then insertion, which places gaps as far left as possible.
pub fn extract_edits(source: &[TokenId], hypothesis: &[TokenId]) -> Vec<EditOp> {
    let d = distance_table(source, hypothesis);
    let w = hypothesis.len() + 1;
    let (mut i, mut j) = (source.len(), hypothesis.len());
    let mut steps = Vec::with_capacity(i.max(j));
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = source[i - 1] == hypothesis[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                steps.push(if same { Step::Match } else { Step::Sub });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            steps.push(Step::Del);
            i -= 1;
        } else {
            steps.push(Step::Ins);
            j -= 1;
        }
    }
    steps.reverse();

    let mut edits = Vec::new();
    let (mut si, mut hi) = (0, 0);
    let mut open: Option<EditOp> = None;
    for step in steps {
        if step == Step::Match {
            if let Some(e) = open.take() {
                edits.push(finish(e));
            }
            si += 1;
            hi += 1;
            continue;
        }
        let e = open.get_or_insert_with(|| EditOp {
            kind: EditKind::Substitute,
            start: si,
            len: 0,
            replacement: Vec::new(),
        });
        match step {
            Step::Sub => {
                e.len += 1;
                e.replacement.push(hypothesis[hi]);
                si += 1;
                hi += 1;
            }
            Step::Del => {
                e.len += 1;
                si += 1;
            }
            Step::Ins => {
                e.replacement.push(hypothesis[hi]);
                hi += 1;
            }
            Step::Match => unreachable!(),
        }
    }
    if let Some(e) = open.take() {
        edits.push(finish(e));
    }
    edits
}

fn finish(mut e: EditOp) -> EditOp {
    e.kind = match (e.len, e.replacement.is_empty()) {
        (0, _) => EditKind::Insert,
        (_, true) => EditKind::Delete,
        _ => EditKind::Substitute,
    };
    e
}

/// Replays an edit script (edits sorted by position, non-overlapping).
pub fn apply_edits(source: &[TokenId], edits: &[EditOp]) -> Result<Vec<TokenId>> {
    let mut out = Vec::with_capacity(source.len());
    let mut pos = 0;
    for e in edits {
        if e.start < pos || e.start + e.len > source.len() {
            return Err(Error::InvalidInput(format!(
                "edit at {} (len {}) is out of order or out of bounds",
                e.start, e.len
            )));
        }
        out.extend_from_slice(&source[pos..e.start]);
        out.extend_from_slice(&e.replacement);
        pos = e.start + e.len;
    }
    out.extend_from_slice(&source[pos..]);
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl EditCounts {
    pub fn add(&mut self, o: EditCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }

    /// Precision; `1` when nothing was predicted.
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    /// Recall; `1` when there is nothing at all to find, `0` when edits were
    /// predicted against no gold edits.
    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            if self.fp == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    pub fn f_beta(&self, beta: f64) -> f64 {
        f_beta(self.precision(), self.recall(), beta)
    }

    pub fn f05(&self) -> f64 {
        self.f_beta(BETA)
    }
}

pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = b2 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / denom
    }
}

/// Edit counts of one hypothesis against one reference; an edit is a true
/// positive when both span and replacement match exactly.
pub fn edit_counts(source: &[TokenId], hypothesis: &[TokenId], reference: &[TokenId]) -> EditCounts {
    let hyp = extract_edits(source, hypothesis);
    let gold = extract_edits(source, reference);
    let tp = hyp.iter().filter(|e| gold.contains(e)).count();
    EditCounts {
        tp,
        fp: hyp.len() - tp,
        fn_: gold.len() - tp,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f05: f64,
    pub counts: EditCounts,
}

pub fn score(source: &[TokenId], hypothesis: &[TokenId], reference: &[TokenId]) -> Prf {
    prf(edit_counts(source, hypothesis, reference))
}

pub fn prf(counts: EditCounts) -> Prf {
    Prf {
        precision: counts.precision(),
        recall: counts.recall(),
        f05: counts.f05(),
        counts,
    }
}

/// Levenshtein operations divided by the source length.
pub fn wer(source: &[TokenId], target: &[TokenId]) -> Result<f64> {
    if source.is_empty() {
        return Err(Error::InvalidInput("word error rate needs a non-empty source".into()));
    }
    Ok(levenshtein(source, target) as f64 / source.len() as f64)
}

/// Percentage of hypotheses identical to their reference.
pub fn exact_match(hypotheses: &[Vec<TokenId>], references: &[Vec<TokenId>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::dims(
            format!("{} hypotheses", references.len()),
            format!("{} hypotheses", hypotheses.len()),
        ));
    }
    if hypotheses.is_empty() {
        return Ok(100.0);
    }
    let hits = hypotheses.iter().zip(references).filter(|(h, r)| h == r).count();
    Ok(100.0 * hits as f64 / hypotheses.len() as f64)
}

/// One scored sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct Triple {
    pub source: Vec<TokenId>,
    pub hypothesis: Vec<TokenId>,
    pub reference: Vec<TokenId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub label: String,
    pub lower: f64,
    /// Exclusive; `None` for the open last bucket.
    pub upper: Option<f64>,
    pub sentences: usize,
    pub gold_edits: usize,
    /// Fraction of all gold edits falling in this bucket.
    pub gold_edit_share: f64,
    pub precision: f64,
    pub recall: f64,
    pub f05: f64,
    pub counts: EditCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sentences: usize,
    /// Fraction in `[0, 1]`.
    pub exact_match: f64,
    pub precision: f64,
    pub recall: f64,
    pub f05: f64,
    pub counts: EditCounts,
    pub buckets: Vec<BucketReport>,
    pub sentences_per_sec: Option<f64>,
}

pub fn bucket_index(value: f64, edges: &[f64]) -> usize {
    edges.iter().take_while(|&&e| value >= e).count()
}

fn bucket_label(lower: f64, upper: Option<f64>) -> String {
    match (lower, upper) {
        (l, Some(u)) if l == 0.0 => format!("<{u:.2}"),
        (l, Some(u)) => format!("{l:.2}-{u:.2}"),
        (l, None) => format!(">={l:.2}"),
    }
}

/// Corpus report with sentences bucketed by the WER of their reference.
pub fn bucketed_report(triples: &[Triple], edges: &[f64]) -> Result<EvalReport> {
    if triples.is_empty() {
        return Err(Error::InvalidInput("cannot report on an empty corpus".into()));
    }
    if edges.windows(2).any(|w| w[0] >= w[1]) || edges.iter().any(|e| *e <= 0.0) {
        return Err(Error::Config("bucket edges must be positive and increasing".into()));
    }
    let nb = edges.len() + 1;
    let mut per_bucket = vec![EditCounts::default(); nb];
    let mut sentences = vec![0usize; nb];
    let mut total = EditCounts::default();
    let mut hits = 0;
    for t in triples {
        let gold_wer = wer(&t.source, &t.reference)?;
        let b = bucket_index(gold_wer, edges);
        let c = edit_counts(&t.source, &t.hypothesis, &t.reference);
        per_bucket[b].add(c);
        sentences[b] += 1;
        total.add(c);
        hits += usize::from(t.hypothesis == t.reference);
    }
    let all_gold = total.tp + total.fn_;
    let buckets = (0..nb)
        .map(|b| {
            let lower = if b == 0 { 0.0 } else { edges[b - 1] };
            let upper = edges.get(b).copied();
            let c = per_bucket[b];
            let gold = c.tp + c.fn_;
            BucketReport {
                label: bucket_label(lower, upper),
                lower,
                upper,
                sentences: sentences[b],
                gold_edits: gold,
                gold_edit_share: if all_gold == 0 { 0.0 } else { gold as f64 / all_gold as f64 },
                precision: c.precision(),
                recall: c.recall(),
                f05: c.f05(),
                counts: c,
            }
        })
        .collect();
    Ok(EvalReport {
        sentences: triples.len(),
        exact_match: hits as f64 / triples.len() as f64,
        precision: total.precision(),
        recall: total.recall(),
        f05: total.f05(),
        counts: total,
        buckets,
        sentences_per_sec: None,
    })
}

impl EvalReport {
    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "sentences {}  exact match {:.2}%  P {:.4}  R {:.4}  F0.5 {:.4}  (tp {} fp {} fn {})\n",
            self.sentences,
            100.0 * self.exact_match,
            self.precision,
            self.recall,
            self.f05,
            self.counts.tp,
            self.counts.fp,
            self.counts.fn_
        ));
        if let Some(r) = self.sentences_per_sec {
            s.push_str(&format!("throughput {r:.1} sentences/s\n"));
        }
        s.push_str(&format!(
            "{:<12} {:>9} {:>10} {:>11} {:>8} {:>8} {:>8}\n",
            "gold WER", "sentences", "gold edits", "edit share", "P", "R", "F0.5"
        ));
        for b in &self.buckets {
            s.push_str(&format!(
                "{:<12} {:>9} {:>10} {:>10.2}% {:>8.4} {:>8.4} {:>8.4}\n",
                b.label,
                b.sentences,
                b.gold_edits,
                100.0 * b.gold_edit_share,
                b.precision,
                b.recall,
                b.f05
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::Vocab;

    fn ids(v: &Vocab, s: &str) -> Vec<TokenId> {
        v.encode(&s.split_whitespace().collect::<Vec<_>>()).unwrap()
    }

    fn vocab() -> Vocab {
        Vocab::new(["Me", "I", "want", "to", "go", "the", "store", "a", "b", "c", "d", "e", "f"]).unwrap()
    }

    #[test]
    fn identical_has_no_edits() {
        let v = vocab();
        assert!(extract_edits(&ids(&v, "a b c"), &ids(&v, "a b c")).is_empty());
    }

    #[test]
    fn gec_example() {
        let v = vocab();
        let src = ids(&v, "Me want to go store");
        let hyp = ids(&v, "I want to go to the store");
        let edits = extract_edits(&src, &hyp);
        assert_eq!(
            edits,
            vec![
                EditOp {
                    kind: EditKind::Substitute,
                    start: 0,
                    len: 1,
                    replacement: ids(&v, "I")
                },
                EditOp {
                    kind: EditKind::Insert,
                    start: 4,
                    len: 0,
                    replacement: ids(&v, "to the")
                },
            ]
        );
        assert_eq!(apply_edits(&src, &edits).unwrap(), hyp);
    }

    #[test]
    fn single_delete() {
        let v = vocab();
        let edits = extract_edits(&ids(&v, "a b c"), &ids(&v, "a c"));
        assert_eq!(
            edits,
            vec![EditOp {
                kind: EditKind::Delete,
                start: 1,
                len: 1,
                replacement: vec![]
            }]
        );
    }

    #[test]
    fn insertions_are_left_aligned() {
        let v = vocab();
        let edits = extract_edits(&ids(&v, "a"), &ids(&v, "a a"));
        assert_eq!(edits[0].start, 0);
    }

    #[test]
    fn score_examples() {
        let v = vocab();
        let src = ids(&v, "a b c d");
        let r = score(&src, &ids(&v, "a e c f"), &ids(&v, "a e c f"));
        assert_eq!((r.precision, r.recall, r.f05), (1.0, 1.0, 1.0));

        let r = score(&src, &src, &ids(&v, "e b c f"));
        assert_eq!(r.counts, EditCounts { tp: 0, fp: 0, fn_: 2 });
        assert_eq!(r.f05, 0.0);

        // predicted b->f (right) and e->b (wrong); gold b->f and d->e
        let src = ids(&v, "a b c d e");
        let r = score(&src, &ids(&v, "a f c d b"), &ids(&v, "a f c e e"));
        assert_eq!(r.counts, EditCounts { tp: 1, fp: 1, fn_: 1 });
        assert!((r.precision - 0.5).abs() < 1e-15);
        assert!((r.recall - 0.5).abs() < 1e-15);
        assert!((r.f05 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_count_conventions() {
        let none = EditCounts::default();
        assert_eq!((none.precision(), none.recall(), none.f05()), (1.0, 1.0, 1.0));
        let missed = EditCounts { tp: 0, fp: 0, fn_: 3 };
        assert_eq!((missed.precision(), missed.recall()), (1.0, 0.0));
        let spurious = EditCounts { tp: 0, fp: 2, fn_: 0 };
        assert_eq!((spurious.precision(), spurious.recall(), spurious.f05()), (0.0, 0.0, 0.0));
    }

    #[test]
    fn f05_favours_precision() {
        let f05 = f_beta(0.8, 0.4, 0.5);
        let f1 = f_beta(0.8, 0.4, 1.0);
        assert!(f05 > f1);
        assert!((f05 - 1.25 * 0.32 / (0.25 * 0.8 + 0.4)).abs() < 1e-15);
    }

    #[test]
    fn wer_examples() {
        let v = vocab();
        assert_eq!(wer(&ids(&v, "a b"), &ids(&v, "a b")).unwrap(), 0.0);
        let src = ids(&v, "a b c d e f a b c d");
        let mut tgt = src.clone();
        tgt[3] = v.id("Me").unwrap();
        assert!((wer(&src, &tgt).unwrap() - 0.1).abs() < 1e-15);
        let src = ids(&v, "a b c d e f");
        let tgt = ids(&v, "a b c Me d e I f to");
        assert!((wer(&src, &tgt).unwrap() - 0.5).abs() < 1e-15);
        assert!(wer(&[], &src).is_err());
    }

    #[test]
    fn exact_match_examples() {
        let a = vec![vec![TokenId(0)], vec![TokenId(1)], vec![TokenId(2)], vec![TokenId(3)]];
        let mut b = a.clone();
        assert_eq!(exact_match(&a, &b).unwrap(), 100.0);
        b[3] = vec![];
        assert_eq!(exact_match(&a, &b).unwrap(), 75.0);
        let c: Vec<Vec<TokenId>> = a.iter().map(|x| vec![TokenId(x[0].0 + 10)]).collect();
        assert_eq!(exact_match(&a, &c).unwrap(), 0.0);
        assert!(exact_match(&a, &c[..2]).is_err());
    }

    #[test]
    fn identical_corpus_single_bucket() {
        let v = vocab();
        let s = ids(&v, "a b c");
        let triples = vec![
            Triple {
                source: s.clone(),
                hypothesis: s.clone(),
                reference: s.clone()
            };
            3
        ];
        let r = bucketed_report(&triples, &DEFAULT_BUCKET_EDGES).unwrap();
        assert_eq!(r.buckets[0].sentences, 3);
        assert_eq!(r.buckets[0].f05, 1.0);
        assert!(r.buckets[1..].iter().all(|b| b.sentences == 0));
        assert_eq!(r.exact_match, 1.0);
    }

    #[test]
    fn controlled_wers_land_in_expected_buckets() {
        let src: Vec<TokenId> = (0..20).map(|i| TokenId(i % 7)).collect();
        let with_subs = |k: usize| {
            let mut t = src.clone();
            for x in t.iter_mut().take(k) {
                *x = TokenId(100);
            }
            t
        };
        // 1/20 = 0.05, 4/20 = 0.2, 10/20 = 0.5
        let triples: Vec<Triple> = [1, 4, 10]
            .iter()
            .map(|&k| Triple {
                source: src.clone(),
                hypothesis: src.clone(),
                reference: with_subs(k),
            })
            .collect();
        let r = bucketed_report(&triples, &DEFAULT_BUCKET_EDGES).unwrap();
        let filled: Vec<usize> = r.buckets.iter().map(|b| b.sentences).collect();
        assert_eq!(filled, vec![1, 0, 1, 0, 1]);
        let share: f64 = r.buckets.iter().map(|b| b.gold_edit_share).sum();
        assert!((share - 1.0).abs() < 1e-12);
        assert!(r.to_table().contains(">=0.32"));
    }
}
