//! Glancing training: compare the greedy alignment against the Viterbi gold
//! alignment, and feed gold label embeddings at a number of decoder positions
//! proportional to their disagreement.

use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::emission::EmissionLattice;
use crate::error::{Error, Result};
use crate::lattice::{AlignmentLabel, AlignmentPath, EditSample};
use crate::loss::viterbi_align;
use crate::model::{ForwardActivations, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlancingConfig {
    pub tau: f64,
    /// Linearly decay tau to `tau_end` over `anneal_steps` updates.
    pub tau_end: Option<f64>,
    pub anneal_steps: usize,
    pub seed: u64,
}

impl Default for GlancingConfig {
    fn default() -> Self {
        GlancingConfig {
            tau: 1.0,
            tau_end: None,
            anneal_steps: 0,
            seed: 0,
        }
    }
}

impl GlancingConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.tau.is_finite() || self.tau < 0.0 {
            return Err(Error::Config(format!("tau must be finite and >= 0, got {}", self.tau)));
        }
        if let Some(end) = self.tau_end {
            if !end.is_finite() || end < 0.0 {
                return Err(Error::Config(format!("tau_end must be finite and >= 0, got {end}")));
            }
        }
        Ok(())
    }

    pub fn tau_at(&self, step: usize) -> f64 {
        match self.tau_end {
            Some(end) if self.anneal_steps > 0 => {
                let frac = (step as f64 / self.anneal_steps as f64).min(1.0);
                self.tau + (end - self.tau) * frac
            }
            _ => self.tau,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlancePlan {
    /// Viterbi alignment; `None` when the target is infeasible.
    pub gold_alignment: Option<AlignmentPath>,
    pub predicted_alignment: AlignmentPath,
    pub hamming: usize,
    pub replace_count: usize,
    /// Sorted, distinct flat positions.
    pub replace_positions: Vec<usize>,
}

impl GlancePlan {
    pub fn feasible(&self) -> bool {
        self.gold_alignment.is_some()
    }

    /// `(position, gold label)` pairs to substitute.
    pub fn replacements(&self) -> Vec<(usize, AlignmentLabel)> {
        match &self.gold_alignment {
            Some(gold) => self
                .replace_positions
                .iter()
                .map(|&p| (p, gold.labels()[p]))
                .collect(),
            None => Vec::new(),
        }
    }
}

/// Per-position argmax; ties go to the lowest column.
pub fn greedy_alignment(lattice: &EmissionLattice) -> AlignmentPath {
    let labels = (0..lattice.positions())
        .map(|p| {
            let row = lattice.row(p);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            lattice.label_of(best)
        })
        .collect();
    AlignmentPath::new(labels, lattice.source_len(), lattice.upsample()).expect("lattice shape")
}

/// `round_half_up(tau * hamming)` clamped to `[0, positions]`.
pub fn replace_count(tau: f64, hamming: usize, positions: usize) -> usize {
    let raw = (tau * hamming as f64 + 0.5).floor();
    if raw <= 0.0 {
        0
    } else {
        (raw as usize).min(positions)
    }
}

pub fn plan_glance(
    sample: &EditSample,
    lattice: &EmissionLattice,
    tau: f64,
    rng: &mut ChaCha8Rng,
) -> GlancePlan {
    let predicted = greedy_alignment(lattice);
    let gold = match viterbi_align(sample, lattice) {
        Ok(v) => v.path,
        Err(_) => {
            return GlancePlan {
                gold_alignment: None,
                predicted_alignment: predicted,
                hamming: 0,
                replace_count: 0,
                replace_positions: Vec::new(),
            }
        }
    };
    let positions = lattice.positions();
    let hamming = gold.hamming(&predicted);
    let count = replace_count(tau, hamming, positions);
    let mut replace_positions = if count == 0 {
        Vec::new()
    } else {
        index::sample(rng, positions, count).into_vec()
    };
    replace_positions.sort_unstable();
    GlancePlan {
        gold_alignment: Some(gold),
        predicted_alignment: predicted,
        hamming,
        replace_count: count,
        replace_positions,
    }
}

/// Decoder inputs with the planned positions replaced by gold embeddings.
pub fn apply_glance(model: &Model, activations: &ForwardActivations, plan: &GlancePlan) -> Result<Vec<f64>> {
    let mut inputs = activations.decoder_inputs.clone();
    model.substitute_inputs(&mut inputs, &plan.replacements())?;
    Ok(inputs)
}
