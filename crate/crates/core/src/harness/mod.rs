//! Experiment harness: training runs, iterative decoding, evaluation,
//! ablation grids and throughput benchmarks.

mod ablate;
mod bench;
mod config;
mod decode;
mod eval;
mod train;

pub use ablate::{run_ablation, AblationGrid, AblationReport, AblationRow, GridPoint};
pub use bench::{bench, BenchConfig, BenchEntry, BenchReport, HostInfo};
pub use config::RunConfig;
pub use decode::{decode_corpus, decode_jsonl, decode_once, decode_sentence, token_batches, DecodeRecord, SentenceDecode};
pub use eval::{evaluate_hypotheses, evaluate_model};
pub use train::{dev_scores, feasibility_scan, log_csv, train, train_to_dir, EpochRecord, RunFiles, TrainOutcome, LOG_HEADER};
