//! Iterative greedy decoding: each pass predicts the 1-best label at every
//! position, recovers the output, and feeds it back as the next source.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::glancing::greedy_alignment;
use crate::lattice::recover;
use crate::model::Model;
use crate::vocab::{TokenId, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceDecode {
    pub hypothesis: Vec<TokenId>,
    /// Output of every pass that ran; the last entry is the hypothesis.
    pub intermediates: Vec<Vec<TokenId>>,
    pub latency_secs: f64,
}

/// One eval-mode pass: greedy alignment, then recovery.
pub fn decode_once(model: &Model, source: &[TokenId]) -> Result<Vec<TokenId>> {
    let lattice = model.emissions(source)?;
    recover(&greedy_alignment(&lattice), source)
}

/// Up to `iterations` passes. A sentence stops early once a pass returns its
/// own input, or when the output is empty or too long to feed back.
pub fn decode_sentence(model: &Model, source: &[TokenId], iterations: usize) -> Result<SentenceDecode> {
    let start = Instant::now();
    let mut intermediates: Vec<Vec<TokenId>> = Vec::with_capacity(iterations);
    let mut current = source.to_vec();
    for _ in 0..iterations {
        if current.is_empty() || current.len() > model.config().max_source_len {
            break;
        }
        let next = decode_once(model, &current)?;
        let fixed = next == current;
        intermediates.push(next.clone());
        current = next;
        if fixed {
            break;
        }
    }
    Ok(SentenceDecode {
        hypothesis: current,
        intermediates,
        latency_secs: start.elapsed().as_secs_f64(),
    })
}

/// Decodes sentences in parallel; output order follows input order.
pub fn decode_corpus(model: &Model, sources: &[Vec<TokenId>], iterations: usize) -> Result<Vec<SentenceDecode>> {
    sources
        .par_iter()
        .map(|s| decode_sentence(model, s, iterations))
        .collect()
}

/// Splits `sources` into consecutive batches of at most `budget` tokens
/// (a single longer sentence forms its own batch).
pub fn token_batches(sources: &[Vec<TokenId>], budget: usize) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut tokens = 0;
    for (i, s) in sources.iter().enumerate() {
        if i > start && tokens + s.len() > budget {
            out.push(start..i);
            start = i;
            tokens = 0;
        }
        tokens += s.len();
    }
    if start < sources.len() {
        out.push(start..sources.len());
    }
    out
}

#[derive(Serialize, Deserialize)]
pub struct DecodeRecord {
    pub source: Vec<String>,
    pub hypothesis: Vec<String>,
    pub intermediates: Vec<Vec<String>>,
    pub latency_ms: f64,
}

/// JSONL decode results, one line per sentence.
pub fn decode_jsonl(sources: &[Vec<TokenId>], results: &[SentenceDecode], vocab: &Vocab) -> Result<String> {
    let mut out = String::new();
    for (src, r) in sources.iter().zip(results) {
        let rec = DecodeRecord {
            source: vocab.decode(src)?,
            hypothesis: vocab.decode(&r.hypothesis)?,
            intermediates: r.intermediates.iter().map(|x| vocab.decode(x)).collect::<Result<_>>()?,
            latency_ms: 1000.0 * r.latency_secs,
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_respect_budget() {
        let s: Vec<Vec<TokenId>> = [3, 4, 2, 9, 1].iter().map(|&n| vec![TokenId(0); n]).collect();
        let b = token_batches(&s, 7);
        assert_eq!(b, vec![0..2, 2..3, 3..4, 4..5]);
        assert_eq!(token_batches(&s, 100), vec![0..5]);
    }
}
