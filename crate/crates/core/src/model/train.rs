//! One optimization step over a batch of samples.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::Model;
use super::optim::AdamW;
use crate::emission::EmissionLattice;
use crate::error::{Error, Result};
use crate::glancing::{plan_glance, GlancingConfig};
use crate::lattice::{AlignmentLabel, EditSample};
use crate::loss::{forward_backward_grad, Aggregation};
use crate::util::derive_seed;

/// Samples per gradient chunk. Chunks may run concurrently; their sums are
/// added in chunk order, so results do not depend on the thread count.
const GRAD_CHUNK: usize = 4;

const STREAM_DROPOUT: u64 = 1;
const STREAM_GLANCE: u64 = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// Aggregated loss over feasible samples.
    pub loss: f64,
    /// Summed nll divided by summed target length (+1 per sample).
    pub nll_per_token: f64,
    pub samples: usize,
    pub infeasible: usize,
    pub replaced: usize,
    pub hamming: usize,
    pub grad_norm: f64,
    pub tau: f64,
}

#[derive(Clone, Copy, Debug, Default)]
struct Tally {
    nll: f64,
    weighted_nll: f64,
    target_tokens: usize,
    feasible: usize,
    infeasible: usize,
    replaced: usize,
    hamming: usize,
}

impl Tally {
    fn add(&mut self, o: &Tally) {
        self.nll += o.nll;
        self.weighted_nll += o.weighted_nll;
        self.target_tokens += o.target_tokens;
        self.feasible += o.feasible;
        self.infeasible += o.infeasible;
        self.replaced += o.replaced;
        self.hamming += o.hamming;
    }
}

/// Per-step randomness: `(root seed, step, sample index)` keyed streams.
#[derive(Clone, Copy, Debug)]
pub struct StepSeeds {
    pub model_seed: u64,
    pub glance_seed: u64,
    pub step: u64,
}

fn sample_gradient(
    model: &Model,
    sample: &EditSample,
    index: usize,
    seeds: StepSeeds,
    glancing: Option<(&GlancingConfig, f64)>,
    aggregation: Aggregation,
    grads: &mut [f64],
    tally: &mut Tally,
) -> Result<()> {
    let mut dropout_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(seeds.model_seed, &[STREAM_DROPOUT, seeds.step, index as u64]));
    let dropout = (model.config().dropout > 0.0).then_some(&mut dropout_rng);

    let trace = match glancing {
        Some((_, tau)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                seeds.glance_seed,
                &[STREAM_GLANCE, seeds.step, index as u64],
            ));
            let mut hamming = 0;
            let mut plan_fn = |lattice: &EmissionLattice| -> Vec<(usize, AlignmentLabel)> {
                let plan = plan_glance(sample, lattice, tau, &mut rng);
                hamming = plan.hamming;
                plan.replacements()
            };
            let trace = model.trace(&sample.source, dropout, Some(&mut plan_fn))?;
            tally.hamming += hamming;
            tally.replaced += trace.replaced_positions().len();
            trace
        }
        None => model.trace(&sample.source, dropout, None)?,
    };

    let loss = forward_backward_grad(sample, &trace.activations.lattice)?;
    if !loss.feasible {
        tally.infeasible += 1;
        return Ok(());
    }
    if !loss.neg_log_likelihood.is_finite() {
        return Err(Error::NonFinite(format!("loss of batch element {index}")));
    }
    let mut lattice_grad = loss.grad;
    let scale = match aggregation {
        Aggregation::MeanPerToken => 1.0 / (sample.target.len() + 1) as f64,
        _ => 1.0,
    };
    if scale != 1.0 {
        lattice_grad.iter_mut().for_each(|g| *g *= scale);
    }
    model.backward(&trace, &lattice_grad, grads)?;
    tally.nll += loss.neg_log_likelihood;
    tally.weighted_nll += loss.neg_log_likelihood * scale;
    tally.target_tokens += sample.target.len() + 1;
    tally.feasible += 1;
    Ok(())
}

/// Summed (then aggregated) parameter gradients of the batch loss.
pub fn batch_gradients(
    model: &Model,
    batch: &[EditSample],
    seeds: StepSeeds,
    glancing: Option<(&GlancingConfig, f64)>,
    aggregation: Aggregation,
) -> Result<(Vec<f64>, StepMetrics)> {
    let chunks: Vec<(Vec<f64>, Tally)> = batch
        .par_chunks(GRAD_CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut grads = model.zero_grads();
            let mut tally = Tally::default();
            for (j, sample) in chunk.iter().enumerate() {
                sample_gradient(
                    model,
                    sample,
                    ci * GRAD_CHUNK + j,
                    seeds,
                    glancing,
                    aggregation,
                    &mut grads,
                    &mut tally,
                )?;
            }
            Ok((grads, tally))
        })
        .collect::<Result<_>>()?;

    let mut grads = model.zero_grads();
    let mut tally = Tally::default();
    for (g, t) in &chunks {
        grads.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        tally.add(t);
    }
    let norm = match aggregation {
        Aggregation::Sum => 1.0,
        _ => 1.0 / tally.feasible.max(1) as f64,
    };
    if norm != 1.0 {
        grads.iter_mut().for_each(|g| *g *= norm);
    }
    let metrics = StepMetrics {
        loss: tally.weighted_nll * norm,
        nll_per_token: tally.nll / tally.target_tokens.max(1) as f64,
        samples: batch.len(),
        infeasible: tally.infeasible,
        replaced: tally.replaced,
        hamming: tally.hamming,
        grad_norm: 0.0,
        tau: glancing.map(|(_, t)| t).unwrap_or(0.0),
    };
    Ok((grads, metrics))
}

/// One AdamW update on `batch`. Infeasible samples are skipped and counted.
pub fn train_step(
    model: &mut Model,
    optimizer: &mut AdamW,
    batch: &[EditSample],
    glancing: Option<&GlancingConfig>,
    aggregation: Aggregation,
) -> Result<StepMetrics> {
    let step = optimizer.steps_taken();
    let seeds = StepSeeds {
        model_seed: model.config().seed,
        glance_seed: glancing.map(|g| g.seed).unwrap_or(0),
        step: step as u64,
    };
    let glance = glancing.map(|g| (g, g.tau_at(step)));
    let (mut grads, mut metrics) = batch_gradients(model, batch, seeds, glance, aggregation)?;
    if !metrics.loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("step {step} produced a non-finite loss or gradient")));
    }
    if metrics.samples == metrics.infeasible {
        return Ok(metrics);
    }
    metrics.grad_norm = optimizer.step(model.params_mut(), &mut grads);
    Ok(metrics)
}
