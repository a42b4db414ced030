//! Epoch loop with dev evaluation, best-dev selection and early stopping.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, STREAM_SHUFFLE};
use super::decode::decode_corpus;
use crate::error::{Error, Result};
use crate::lattice::EditSample;
use crate::loss::feasible;
use crate::metrics::{edit_counts, EditCounts};
use crate::model::{save_checkpoint, train_step, AdamW, Model};
use crate::util::derive_seed;
use crate::vocab::Vocab;

pub const LOG_HEADER: &str = "epoch,nll,dev_em,dev_f05,mean_replace,mean_hamming,tau,infeasible";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training nll per feasible sample.
    pub nll: f64,
    /// Dev exact match, percent.
    pub dev_em: f64,
    pub dev_f05: f64,
    /// Replaced decoder positions per sentence.
    pub mean_replace: f64,
    /// Greedy-vs-gold alignment disagreement per sentence.
    pub mean_hamming: f64,
    pub tau: f64,
    pub infeasible: usize,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.4},{:.6},{:.4},{:.4},{:.4},{}",
            self.epoch,
            self.nll,
            self.dev_em,
            self.dev_f05,
            self.mean_replace,
            self.mean_hamming,
            self.tau,
            self.infeasible
        )
    }
}

pub fn log_csv(records: &[EpochRecord]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    /// 1-based epoch of the kept model.
    pub best_epoch: usize,
    pub best_model: Model,
    pub final_model: Model,
    /// The resolved config that ran.
    pub config: RunConfig,
    pub config_hash: String,
}

impl TrainOutcome {
    pub fn best(&self) -> &EpochRecord {
        &self.records[self.best_epoch - 1]
    }

    pub fn last(&self) -> &EpochRecord {
        self.records.last().expect("at least one epoch")
    }
}

/// Errors on the first sample whose target cannot be aligned under `upsample`.
pub fn feasibility_scan(samples: &[EditSample], upsample: usize, what: &str) -> Result<()> {
    match samples.iter().position(|s| !feasible(s, upsample)) {
        None => Ok(()),
        Some(i) => {
            let s = &samples[i];
            Err(Error::InvalidInput(format!(
                "{what} sample {} is infeasible at upsample {upsample}: {} positions for a target needing {}",
                i + 1,
                s.source.len() * upsample,
                s.target.len() + crate::loss::adjacent_repeats(&s.target)
            )))
        }
    }
}

/// Dev exact match (percent) and F0.5 of `model`.
pub fn dev_scores(model: &Model, dev: &[EditSample], iterations: usize) -> Result<(f64, f64)> {
    let sources: Vec<_> = dev.iter().map(|s| s.source.clone()).collect();
    let decoded = decode_corpus(model, &sources, iterations)?;
    let mut counts = EditCounts::default();
    let mut hits = 0;
    for (s, d) in dev.iter().zip(&decoded) {
        counts.add(edit_counts(&s.source, &d.hypothesis, &s.target));
        hits += usize::from(d.hypothesis == s.target);
    }
    Ok((100.0 * hits as f64 / dev.len().max(1) as f64, counts.f05()))
}

/// Trains from scratch. `on_epoch` sees every record as it is produced.
pub fn train(
    config: &RunConfig,
    vocab: &Vocab,
    train_set: &[EditSample],
    dev: &[EditSample],
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let mut config = config.resolved();
    if config.model.vocab_size == 0 {
        config.model.vocab_size = vocab.len();
    }
    if config.model.vocab_size != vocab.len() {
        return Err(Error::ConfigMismatch(format!(
            "model expects {} tokens but the vocabulary has {}",
            config.model.vocab_size,
            vocab.len()
        )));
    }
    config.validate()?;
    if train_set.is_empty() || dev.is_empty() {
        return Err(Error::InvalidInput("training and dev sets must be non-empty".into()));
    }
    for s in train_set.iter().chain(dev) {
        s.validate(vocab.len())?;
    }
    let t = config.model.upsample;
    feasibility_scan(train_set, t, "training")?;
    feasibility_scan(dev, t, "dev")?;

    let mut model = Model::new(config.model.clone())?;
    let mut optimizer = AdamW::new(config.optimizer.clone(), model.layout());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut records: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(usize, f64, f64, Model)> = None;
    let mut batch = Vec::with_capacity(config.batch_size);

    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[STREAM_SHUFFLE, epoch as u64]));
        order.shuffle(&mut rng);
        let (mut nll, mut feasible_n, mut replaced, mut hamming, mut infeasible) = (0.0, 0, 0, 0, 0);
        let mut tau = 0.0;
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train_set[i].clone()));
            let m = train_step(&mut model, &mut optimizer, &batch, config.glancing.as_ref(), config.aggregation)
                .map_err(|e| match e {
                    Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch}: {msg}")),
                    other => other,
                })?;
            let ok = m.samples - m.infeasible;
            nll += m.loss * ok as f64;
            feasible_n += ok;
            replaced += m.replaced;
            hamming += m.hamming;
            infeasible += m.infeasible;
            tau = m.tau;
        }
        let (dev_em, dev_f05) = dev_scores(&model, dev, config.decode_iterations)?;
        let n = train_set.len() as f64;
        let record = EpochRecord {
            epoch,
            nll: nll / feasible_n.max(1) as f64,
            dev_em,
            dev_f05,
            mean_replace: replaced as f64 / n,
            mean_hamming: hamming as f64 / n,
            tau,
            infeasible,
        };
        on_epoch(&record);
        records.push(record);

        let improved = match &best {
            None => true,
            Some((_, em, f, _)) => dev_em > *em || (dev_em == *em && dev_f05 > *f),
        };
        if improved {
            best = Some((epoch, dev_em, dev_f05, model.clone()));
        }
        if let (Some(p), Some((be, ..))) = (config.patience, &best) {
            if epoch - be >= p {
                break;
            }
        }
    }
    let (best_epoch, _, _, best_model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        records,
        best_epoch,
        best_model,
        final_model: model,
        config_hash: config.hash(),
        config,
    })
}

/// Files written by [`train_to_dir`].
#[derive(Clone, Debug)]
pub struct RunFiles {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub summary: PathBuf,
}

#[derive(Serialize)]
struct Summary<'a> {
    config_hash: &'a str,
    config: &'a RunConfig,
    best_epoch: usize,
    best: &'a EpochRecord,
    epochs_run: usize,
}

/// [`train`] that writes `best.ckpt`, `train_log.csv` and `run.json` into
/// `dir`. A diverged run leaves `divergence.json` describing the failure.
pub fn train_to_dir(
    config: &RunConfig,
    vocab: &Vocab,
    train_set: &[EditSample],
    dev: &[EditSample],
    dir: impl AsRef<Path>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(TrainOutcome, RunFiles)> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::path(dir, e))?;
    let files = RunFiles {
        checkpoint: dir.join("best.ckpt"),
        log: dir.join("train_log.csv"),
        summary: dir.join("run.json"),
    };
    let mut seen = Vec::new();
    let outcome = train(config, vocab, train_set, dev, &mut |r| {
        seen.push(r.clone());
        on_epoch(r);
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            if matches!(e, Error::NonFinite(_)) {
                let dump = serde_json::json!({
                    "error": e.to_string(),
                    "config_hash": config.resolved().hash(),
                    "completed_epochs": seen,
                });
                let path = dir.join("divergence.json");
                fs::write(&path, serde_json::to_string_pretty(&dump)?).map_err(|e| Error::path(&path, e))?;
            }
            return Err(e);
        }
    };
    save_checkpoint(&outcome.best_model, vocab, &files.checkpoint)?;
    fs::write(&files.log, log_csv(&outcome.records)).map_err(|e| Error::path(&files.log, e))?;
    let summary = Summary {
        config_hash: &outcome.config_hash,
        config: &outcome.config,
        best_epoch: outcome.best_epoch,
        best: outcome.best(),
        epochs_run: outcome.records.len(),
    };
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    fs::write(&files.summary, text).map_err(|e| Error::path(&files.summary, e))?;
    Ok((outcome, files))
}
