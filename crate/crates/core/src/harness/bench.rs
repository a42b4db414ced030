use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::decode::{decode_sentence, token_batches};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::util::config_hash;
use crate::vocab::TokenId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub iterations: Vec<usize>,
    pub batch_tokens: usize,
    /// Untimed batches decoded before measuring.
    pub warmup_batches: usize,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            iterations: vec![1, 2],
            batch_tokens: 10_000,
            warmup_batches: 1,
            repeats: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HostInfo {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
    pub threads: usize,
    pub crate_version: String,
}

impl HostInfo {
    pub fn current() -> Self {
        HostInfo {
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            cpus: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            threads: rayon::current_num_threads(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub iterations: usize,
    pub sentences: usize,
    pub tokens: usize,
    pub seconds: f64,
    pub sentences_per_sec: f64,
    pub tokens_per_sec: f64,
    pub mean_latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub host: HostInfo,
    pub config_hash: String,
    pub model_hash: String,
    pub entries: Vec<BenchEntry>,
}

fn decode_batches(model: &Model, sources: &[Vec<TokenId>], batches: &[std::ops::Range<usize>], iterations: usize) -> Result<f64> {
    let mut latency = 0.0;
    for b in batches {
        let part: Vec<f64> = sources[b.clone()]
            .par_iter()
            .map(|s| decode_sentence(model, s, iterations).map(|d| d.latency_secs))
            .collect::<Result<_>>()?;
        latency += part.iter().sum::<f64>();
    }
    Ok(latency)
}

/// Decoding throughput for each iteration count.
pub fn bench(model: &Model, sources: &[Vec<TokenId>], config: &BenchConfig) -> Result<BenchReport> {
    if sources.is_empty() || config.repeats == 0 {
        return Err(Error::InvalidInput("benchmark needs sentences and at least one repeat".into()));
    }
    let batches = token_batches(sources, config.batch_tokens);
    let tokens: usize = sources.iter().map(Vec::len).sum();
    let mut entries = Vec::new();
    for &iterations in &config.iterations {
        let warm = batches.len().min(config.warmup_batches);
        decode_batches(model, sources, &batches[..warm], iterations)?;
        let start = Instant::now();
        let mut latency = 0.0;
        for _ in 0..config.repeats {
            latency += decode_batches(model, sources, &batches, iterations)?;
        }
        let seconds = start.elapsed().as_secs_f64() / config.repeats as f64;
        let n = sources.len();
        entries.push(BenchEntry {
            iterations,
            sentences: n,
            tokens,
            seconds,
            sentences_per_sec: n as f64 / seconds,
            tokens_per_sec: tokens as f64 / seconds,
            mean_latency_ms: 1000.0 * latency / (n * config.repeats) as f64,
        });
    }
    Ok(BenchReport {
        host: HostInfo::current(),
        config_hash: config_hash(config),
        model_hash: config_hash(model.config()),
        entries,
    })
}

impl BenchReport {
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "host {} {} cpus {} threads {}  config {}  model {}\n",
            self.host.os, self.host.arch, self.host.cpus, self.host.threads, self.config_hash, self.model_hash
        );
        s.push_str(&format!(
            "{:>10} {:>9} {:>8} {:>10} {:>12} {:>12} {:>11}\n",
            "iterations", "sentences", "tokens", "seconds", "sent/s", "tok/s", "latency ms"
        ));
        for e in &self.entries {
            s.push_str(&format!(
                "{:>10} {:>9} {:>8} {:>10.4} {:>12.1} {:>12.1} {:>11.3}\n",
                e.iterations, e.sentences, e.tokens, e.seconds, e.sentences_per_sec, e.tokens_per_sec, e.mean_latency_ms
            ));
        }
        s
    }
}
