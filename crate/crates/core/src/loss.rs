//! Marginal likelihood of a target over all copy-aware alignments.
//!
//! The recursion is the usual CTC one over the blank-interleaved target
//! `[∅, y1, ∅, y2, …, yM, ∅]`, but with merged emissions: at position `p` the
//! score of target token `y_j` is `P(y_j) + [y_j == source[p / T]] · P(KEEP)`.
//! Since KEEP is translated before collapsing, this covers every valid path
//! exactly once.

use rayon::prelude::*;

use crate::emission::{log_add_exp, EmissionLattice};
use crate::error::{Error, Result};
use crate::lattice::{AlignmentLabel, AlignmentPath, EditSample};

const NEG_INF: f64 = f64::NEG_INFINITY;

#[derive(Clone, Debug, PartialEq)]
pub struct LossResult {
    /// `-log P(y | x)` in nats; `+inf` when infeasible.
    pub neg_log_likelihood: f64,
    /// `∂nll / ∂log_probs`, same layout as the lattice. Empty when only the
    /// forward pass ran.
    pub grad: Vec<f64>,
    pub feasible: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViterbiResult {
    pub path: AlignmentPath,
    pub log_prob: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GradOptions {
    /// Return the gradient with respect to the logits of a log-softmax
    /// producing the lattice instead of the raw log-probabilities.
    pub softmax_tied: bool,
}

/// Number of adjacent equal pairs in a target; each one forces a blank.
pub fn adjacent_repeats(target: &[crate::vocab::TokenId]) -> usize {
    target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Whether `N·T` slots suffice to emit the target.
pub fn feasible(sample: &EditSample, upsample: usize) -> bool {
    sample.source.len() * upsample >= sample.target.len() + adjacent_repeats(&sample.target)
}

/// Merged emission scores for every (position, target index).
struct Emissions<'a> {
    lattice: &'a EmissionLattice,
    target: &'a [crate::vocab::TokenId],
    /// `log P(y_j) ⊕ [copy] log P(KEEP)` per position, row-major `L x M`.
    merged: Vec<f64>,
    /// Whether KEEP at `p` reproduces `y_j`.
    copyable: Vec<bool>,
}

impl<'a> Emissions<'a> {
    fn new(sample: &'a EditSample, lattice: &'a EmissionLattice) -> Self {
        let m = sample.target.len();
        let positions = lattice.positions();
        let keep = lattice.keep_column();
        let mut merged = Vec::with_capacity(positions * m);
        let mut copyable = Vec::with_capacity(positions * m);
        for p in 0..positions {
            let src = sample.source[lattice.source_index(p)];
            for &y in &sample.target {
                let tok = lattice.at(p, y.index());
                match keep {
                    Some(k) if y == src => {
                        merged.push(log_add_exp(tok, lattice.at(p, k)));
                        copyable.push(true);
                    }
                    _ => {
                        merged.push(tok);
                        copyable.push(false);
                    }
                }
            }
        }
        Emissions {
            lattice,
            target: &sample.target,
            merged,
            copyable,
        }
    }

    fn states(&self) -> usize {
        2 * self.target.len() + 1
    }

    #[inline]
    fn emit(&self, p: usize, s: usize) -> f64 {
        if s % 2 == 0 {
            self.lattice.at(p, self.lattice.blank_column())
        } else {
            self.merged[p * self.target.len() + s / 2]
        }
    }

    /// Whether state `s` may be entered directly from `s - 2`.
    #[inline]
    fn can_skip(&self, s: usize) -> bool {
        s % 2 == 1 && s >= 3 && self.target[s / 2] != self.target[s / 2 - 1]
    }
}

fn check_dims(sample: &EditSample, lattice: &EmissionLattice) -> Result<()> {
    if sample.source.len() != lattice.source_len() {
        return Err(Error::dims(
            format!("{} lattice rows (source length {} x T={})",
                sample.source.len() * lattice.upsample(), sample.source.len(), lattice.upsample()),
            format!("{} rows", lattice.positions()),
        ));
    }
    if sample.source.is_empty() {
        return Err(Error::InvalidInput("source must contain at least one token".into()));
    }
    let v = lattice.vocab_size();
    if let Some(bad) = sample.source.iter().chain(&sample.target).find(|t| t.index() >= v) {
        return Err(Error::UnknownTokenId(bad.0));
    }
    Ok(())
}

/// Log-space forward/backward tables, `positions x (2M + 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaBeta {
    pub positions: usize,
    pub states: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub log_likelihood: f64,
}

impl AlphaBeta {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("table\tposition");
        for s in 0..self.states {
            out.push_str(&format!("\ts{s}"));
        }
        out.push('\n');
        for (name, table) in [("alpha", &self.alpha), ("beta", &self.beta)] {
            for p in 0..self.positions {
                out.push_str(&format!("{name}\t{p}"));
                for s in 0..self.states {
                    out.push_str(&format!("\t{}", table[p * self.states + s]));
                }
                out.push('\n');
            }
        }
        out
    }
}

fn forward_table(em: &Emissions) -> (Vec<f64>, f64) {
    let positions = em.lattice.positions();
    let states = em.states();
    let mut alpha = vec![NEG_INF; positions * states];
    alpha[0] = em.emit(0, 0);
    if states > 1 {
        alpha[1] = em.emit(0, 1);
    }
    for p in 1..positions {
        let (prev_rows, cur_rows) = alpha.split_at_mut(p * states);
        let prev = &prev_rows[(p - 1) * states..];
        let cur = &mut cur_rows[..states];
        // Only states reachable within p+1 steps and still able to finish matter;
        // the full sweep is cheap and keeps the recursion obvious.
        for s in 0..states {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add_exp(acc, prev[s - 1]);
            }
            if em.can_skip(s) {
                acc = log_add_exp(acc, prev[s - 2]);
            }
            cur[s] = if acc == NEG_INF { NEG_INF } else { acc + em.emit(p, s) };
        }
    }
    let last = &alpha[(positions - 1) * states..];
    let mut log_z = last[states - 1];
    if states > 1 {
        log_z = log_add_exp(log_z, last[states - 2]);
    }
    (alpha, log_z)
}

fn backward_table(em: &Emissions) -> Vec<f64> {
    let positions = em.lattice.positions();
    let states = em.states();
    let mut beta = vec![NEG_INF; positions * states];
    let base = (positions - 1) * states;
    beta[base + states - 1] = em.emit(positions - 1, states - 1);
    if states > 1 {
        beta[base + states - 2] = em.emit(positions - 1, states - 2);
    }
    for p in (0..positions - 1).rev() {
        let (cur_rows, next_rows) = beta.split_at_mut((p + 1) * states);
        let next = &next_rows[..states];
        let cur = &mut cur_rows[p * states..];
        for s in 0..states {
            let mut acc = next[s];
            if s + 1 < states {
                acc = log_add_exp(acc, next[s + 1]);
            }
            if s + 2 < states && em.can_skip(s + 2) {
                acc = log_add_exp(acc, next[s + 2]);
            }
            cur[s] = if acc == NEG_INF { NEG_INF } else { acc + em.emit(p, s) };
        }
    }
    beta
}

/// `-log P(y | x)` via the forward recursion; `grad` is left empty.
pub fn forward_nll(sample: &EditSample, lattice: &EmissionLattice) -> Result<LossResult> {
    check_dims(sample, lattice)?;
    if !feasible(sample, lattice.upsample()) {
        return Ok(LossResult {
            neg_log_likelihood: f64::INFINITY,
            grad: Vec::new(),
            feasible: false,
        });
    }
    let em = Emissions::new(sample, lattice);
    let (_, log_z) = forward_table(&em);
    Ok(LossResult {
        neg_log_likelihood: -log_z,
        grad: Vec::new(),
        feasible: log_z > NEG_INF,
    })
}

/// Forward and backward tables for inspection.
pub fn alpha_beta(sample: &EditSample, lattice: &EmissionLattice) -> Result<AlphaBeta> {
    check_dims(sample, lattice)?;
    let em = Emissions::new(sample, lattice);
    let (alpha, log_z) = forward_table(&em);
    let beta = backward_table(&em);
    Ok(AlphaBeta {
        positions: lattice.positions(),
        states: em.states(),
        alpha,
        beta,
        log_likelihood: log_z,
    })
}

pub fn forward_backward_grad(sample: &EditSample, lattice: &EmissionLattice) -> Result<LossResult> {
    forward_backward_grad_with(sample, lattice, GradOptions::default())
}

pub fn forward_backward_grad_with(
    sample: &EditSample,
    lattice: &EmissionLattice,
    options: GradOptions,
) -> Result<LossResult> {
    check_dims(sample, lattice)?;
    let cols = lattice.columns();
    let positions = lattice.positions();
    let infeasible = || LossResult {
        neg_log_likelihood: f64::INFINITY,
        grad: vec![0.0; positions * cols],
        feasible: false,
    };
    if !feasible(sample, lattice.upsample()) {
        return Ok(infeasible());
    }
    let em = Emissions::new(sample, lattice);
    let (alpha, log_z) = forward_table(&em);
    if log_z == NEG_INF {
        return Ok(infeasible());
    }
    let beta = backward_table(&em);
    let states = em.states();
    let m = sample.target.len();
    let blank = lattice.blank_column();
    let keep = lattice.keep_column();
    let mut grad = vec![0.0; positions * cols];
    for p in 0..positions {
        let row = &mut grad[p * cols..(p + 1) * cols];
        for s in 0..states {
            let a = alpha[p * states + s];
            let b = beta[p * states + s];
            if a == NEG_INF || b == NEG_INF {
                continue;
            }
            let e = em.emit(p, s);
            // α and β both include the emission at p.
            let gamma = (a + b - e - log_z).exp();
            if s % 2 == 0 {
                row[blank] -= gamma;
            } else {
                let j = s / 2;
                let y = sample.target[j].index();
                let merged = em.merged[p * m + j];
                row[y] -= gamma * (lattice.at(p, y) - merged).exp();
                if em.copyable[p * m + j] {
                    let k = keep.expect("copyable implies a keep column");
                    row[k] -= gamma * (lattice.at(p, k) - merged).exp();
                }
            }
        }
        if options.softmax_tied {
            let total: f64 = row.iter().sum();
            for (c, g) in row.iter_mut().enumerate() {
                *g -= lattice.at(p, c).exp() * total;
            }
        }
    }
    Ok(LossResult {
        neg_log_likelihood: -log_z,
        grad,
        feasible: true,
    })
}

/// Most probable valid path. Ties prefer KEEP over the literal token and,
/// when backtracking, staying in the same state over advancing.
pub fn viterbi_align(sample: &EditSample, lattice: &EmissionLattice) -> Result<ViterbiResult> {
    check_dims(sample, lattice)?;
    let positions = lattice.positions();
    if !feasible(sample, lattice.upsample()) {
        return Err(Error::Infeasible {
            positions,
            required: sample.target.len() + adjacent_repeats(&sample.target),
        });
    }
    let m = sample.target.len();
    let states = 2 * m + 1;
    let blank = lattice.blank_column();
    let keep = lattice.keep_column();

    // Best realization of each target token at each position.
    let mut best = Vec::with_capacity(positions * m);
    let mut use_keep = Vec::with_capacity(positions * m);
    for p in 0..positions {
        let src = sample.source[lattice.source_index(p)];
        for &y in &sample.target {
            let tok = lattice.at(p, y.index());
            match keep {
                Some(k) if y == src && lattice.at(p, k) >= tok => {
                    best.push(lattice.at(p, k));
                    use_keep.push(true);
                }
                _ => {
                    best.push(tok);
                    use_keep.push(false);
                }
            }
        }
    }
    let emit = |p: usize, s: usize| -> f64 {
        if s % 2 == 0 {
            lattice.at(p, blank)
        } else {
            best[p * m + s / 2]
        }
    };
    let can_skip = |s: usize| s % 2 == 1 && s >= 3 && sample.target[s / 2] != sample.target[s / 2 - 1];

    let mut delta = vec![NEG_INF; positions * states];
    let mut back = vec![0u8; positions * states];
    delta[0] = emit(0, 0);
    if states > 1 {
        delta[1] = emit(0, 1);
    }
    for p in 1..positions {
        for s in 0..states {
            let prev = (p - 1) * states;
            let mut val = delta[prev + s];
            let mut step = 0u8;
            if s >= 1 && delta[prev + s - 1] > val {
                val = delta[prev + s - 1];
                step = 1;
            }
            if can_skip(s) && delta[prev + s - 2] > val {
                val = delta[prev + s - 2];
                step = 2;
            }
            delta[p * states + s] = if val == NEG_INF { NEG_INF } else { val + emit(p, s) };
            back[p * states + s] = step;
        }
    }
    let last = (positions - 1) * states;
    let mut s = states - 1;
    if states > 1 && delta[last + states - 2] >= delta[last + states - 1] {
        s = states - 2;
    }
    let log_prob = delta[last + s];
    if log_prob == NEG_INF {
        return Err(Error::Infeasible {
            positions,
            required: m + adjacent_repeats(&sample.target),
        });
    }
    let mut labels = vec![AlignmentLabel::Blank; positions];
    for p in (0..positions).rev() {
        labels[p] = if s % 2 == 0 {
            AlignmentLabel::Blank
        } else if use_keep[p * m + s / 2] {
            AlignmentLabel::Keep
        } else {
            AlignmentLabel::Token(sample.target[s / 2])
        };
        if p > 0 {
            s -= back[p * states + s] as usize;
        }
    }
    Ok(ViterbiResult {
        path: AlignmentPath::new(labels, lattice.source_len(), lattice.upsample())?,
        log_prob,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Mean of per-sample nll over feasible samples.
    #[default]
    MeanPerSample,
    /// Each sample's nll divided by its target length (plus one), then averaged.
    MeanPerToken,
    Sum,
}

impl Aggregation {
    /// Weight applied to one sample's loss (and gradient) in the batch total.
    pub fn weight(self, target_len: usize, feasible_count: usize) -> f64 {
        match self {
            Aggregation::MeanPerSample => 1.0 / feasible_count.max(1) as f64,
            Aggregation::MeanPerToken => 1.0 / ((target_len + 1) as f64 * feasible_count.max(1) as f64),
            Aggregation::Sum => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchLoss {
    pub per_sample: Vec<LossResult>,
    /// Aggregated loss over feasible samples.
    pub loss: f64,
    pub infeasible: usize,
}

/// Element-wise [`forward_backward_grad`]; elements are independent, so the
/// result does not depend on evaluation order.
pub fn batch_nll(
    samples: &[EditSample],
    lattices: &[EmissionLattice],
    aggregation: Aggregation,
) -> Result<BatchLoss> {
    if samples.len() != lattices.len() {
        return Err(Error::dims(
            format!("{} lattices", samples.len()),
            format!("{} lattices", lattices.len()),
        ));
    }
    let per_sample: Vec<LossResult> = samples
        .par_iter()
        .zip(lattices.par_iter())
        .enumerate()
        .map(|(i, (s, l))| {
            forward_backward_grad(s, l)
                .map_err(|e| Error::InvalidInput(format!("batch element {i}: {e}")))
        })
        .collect::<Result<_>>()?;
    let feasible_count = per_sample.iter().filter(|r| r.feasible).count();
    let loss = samples
        .iter()
        .zip(&per_sample)
        .filter(|(_, r)| r.feasible)
        .map(|(s, r)| r.neg_log_likelihood * aggregation.weight(s.target.len(), feasible_count))
        .sum();
    Ok(BatchLoss {
        infeasible: per_sample.len() - feasible_count,
        per_sample,
        loss,
    })
}
