use std::time::Instant;

use super::decode::decode_corpus;
use crate::error::{Error, Result};
use crate::lattice::EditSample;
use crate::metrics::{bucketed_report, EvalReport, Triple};
use crate::model::Model;
use crate::vocab::TokenId;

/// Scores given hypotheses against the references of `samples`.
pub fn evaluate_hypotheses(samples: &[EditSample], hypotheses: &[Vec<TokenId>], edges: &[f64]) -> Result<EvalReport> {
    if samples.len() != hypotheses.len() {
        return Err(Error::dims(
            format!("{} hypotheses (one per sample)", samples.len()),
            format!("{} hypotheses", hypotheses.len()),
        ));
    }
    let triples: Vec<Triple> = samples
        .iter()
        .zip(hypotheses)
        .map(|(s, h)| Triple {
            source: s.source.clone(),
            hypothesis: h.clone(),
            reference: s.target.clone(),
        })
        .collect();
    bucketed_report(&triples, edges)
}

/// Decodes `samples` and scores the output; throughput is recorded.
pub fn evaluate_model(model: &Model, samples: &[EditSample], iterations: usize, edges: &[f64]) -> Result<EvalReport> {
    let sources: Vec<Vec<TokenId>> = samples.iter().map(|s| s.source.clone()).collect();
    let start = Instant::now();
    let decoded = decode_corpus(model, &sources, iterations)?;
    let secs = start.elapsed().as_secs_f64();
    let hyps: Vec<Vec<TokenId>> = decoded.into_iter().map(|d| d.hypothesis).collect();
    let mut report = evaluate_hypotheses(samples, &hyps, edges)?;
    report.sentences_per_sec = (secs > 0.0).then(|| samples.len() as f64 / secs);
    Ok(report)
}
