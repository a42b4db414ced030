use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use copyctc::harness::{
    bench, decode_corpus, decode_jsonl, evaluate_hypotheses, evaluate_model, run_ablation, train_to_dir, AblationGrid,
    BenchConfig, RunConfig,
};
use copyctc::loss::alpha_beta;
use copyctc::metrics::DEFAULT_BUCKET_EDGES;
use copyctc::model::{load_checkpoint, save_checkpoint, Model};
use copyctc::synth::{corpus_stats, generate, read_jsonl, synth_vocab, write_jsonl, write_sidecar, CorruptionConfig, Grammar};
use copyctc::util::config_hash;
use copyctc::{EditSample, Error, TokenId, Variant, Vocab};

/// Copy-aware CTC text editing: data synthesis, training, decoding,
/// evaluation, ablations and benchmarks.
#[derive(Parser)]
#[command(name = "copyctc", version)]
struct Cli {
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true, env = "COPYCTC_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic editing corpus.
    Synth(SynthArgs),
    /// Train a model and keep the best dev checkpoint.
    Train(TrainArgs),
    /// Decode sources with iterative refinement.
    Decode(DecodeArgs),
    /// Score hypotheses (or a checkpoint) against references.
    Eval(EvalArgs),
    /// Run a grid of training runs and compare them.
    Ablate(AblateArgs),
    /// Measure decoding throughput.
    Bench(BenchArgs),
    /// Print the forward and backward tables of one sample as TSV.
    Lattice(LatticeArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Corruption config (JSON); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for vocab.txt and the split files.
    #[arg(long)]
    out_dir: PathBuf,
    /// Fail instead of creating a missing output directory.
    #[arg(long)]
    no_create: bool,
    /// Training samples; 0 skips the split.
    #[arg(long, default_value_t = 20_000)]
    train: usize,
    /// Dev samples; 0 skips the split.
    #[arg(long, default_value_t = 1_000)]
    dev: usize,
    /// Test samples; 0 skips the split.
    #[arg(long, default_value_t = 1_000)]
    test: usize,
    /// Root seed of the generator.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of synthetic words.
    #[arg(long)]
    vocab_size: Option<usize>,
    /// Probability of deleting an eligible word (markers under the agreement grammar).
    #[arg(long)]
    drop_rate: Option<f64>,
    /// Per-token probability of inserting a stray word after it.
    #[arg(long)]
    insert_rate: Option<f64>,
    /// Probability of replacing an eligible word.
    #[arg(long)]
    substitute_rate: Option<f64>,
    /// Probability of swapping an eligible word with its successor.
    #[arg(long)]
    swap_rate: Option<f64>,
    /// Cap on corruptions per sentence.
    #[arg(long)]
    max_edits: Option<usize>,
    /// Shortest clean sentence.
    #[arg(long)]
    min_len: Option<usize>,
    /// Longest clean sentence.
    #[arg(long)]
    max_len: Option<usize>,
    /// uniform or agreement
    #[arg(long)]
    grammar: Option<String>,
    /// Zipf exponent of word frequencies; 0 is uniform.
    #[arg(long)]
    word_skew: Option<f64>,
    /// Samples must be alignable at this upsampling ratio.
    #[arg(long)]
    upsample: Option<usize>,
}

#[derive(Args, Clone)]
struct RunOverrides {
    /// Run config (JSON); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed of the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Sentences per optimizer step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// copy-aware or vanilla
    #[arg(long)]
    variant: Option<Variant>,
    /// Upsampling ratio T.
    #[arg(long)]
    upsample: Option<usize>,
    /// Glancing ratio; 0 keeps glancing on but replaces nothing.
    #[arg(long)]
    tau: Option<f64>,
    /// Train without glancing.
    #[arg(long)]
    no_glat: bool,
    /// Peak learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Model width.
    #[arg(long)]
    hidden: Option<usize>,
    /// Encoder and decoder layers each.
    #[arg(long)]
    layers: Option<usize>,
    /// Attention heads.
    #[arg(long)]
    heads: Option<usize>,
    /// Feed-forward width.
    #[arg(long)]
    ffn_hidden: Option<usize>,
    /// Dropout rate during training.
    #[arg(long)]
    dropout: Option<f64>,
    /// Stop after this many epochs without a better dev score.
    #[arg(long)]
    patience: Option<usize>,
    /// Decoding passes used for dev scoring.
    #[arg(long)]
    iterations: Option<usize>,
}

impl RunOverrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value {
                    $field = v;
                }
            };
        }
        set!(c.seed, self.seed);
        set!(c.epochs, self.epochs);
        set!(c.batch_size, self.batch_size);
        set!(c.model.variant, self.variant);
        set!(c.model.upsample, self.upsample);
        set!(c.optimizer.lr, self.lr);
        set!(c.model.hidden, self.hidden);
        set!(c.model.heads, self.heads);
        set!(c.model.ffn_hidden, self.ffn_hidden);
        set!(c.model.dropout, self.dropout);
        set!(c.decode_iterations, self.iterations);
        if let Some(l) = self.layers {
            c.model.encoder_layers = l;
            c.model.decoder_layers = l;
        }
        if self.patience.is_some() {
            c.patience = self.patience;
        }
        if let Some(t) = self.tau {
            c.glancing.get_or_insert_with(Default::default).tau = t;
        }
        if self.no_glat {
            c.glancing = None;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunOverrides,
    /// Directory holding vocab.txt, train.jsonl and dev.jsonl.
    #[arg(long)]
    data_dir: PathBuf,
    /// Directory for best.ckpt, train_log.csv and run.json.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    /// Model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSONL with a "source" token list per line.
    #[arg(long)]
    input: PathBuf,
    /// Decoded JSONL; a .meta.json file is written next to it.
    #[arg(long)]
    output: PathBuf,
    /// Decoding passes per sentence.
    #[arg(long, default_value_t = 2)]
    iterations: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// JSONL with "source" and "target" per line.
    #[arg(long)]
    data: PathBuf,
    /// Decode output to score, line-aligned with --data.
    #[arg(long, conflicts_with = "checkpoint")]
    hyp: Option<PathBuf>,
    /// Decode --data with this checkpoint and score the result.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Vocabulary; taken from the checkpoint when one is given.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Decoding passes when --checkpoint is given.
    #[arg(long, default_value_t = 2)]
    iterations: usize,
    /// Gold-WER bucket edges.
    #[arg(long, value_delimiter = ',')]
    edges: Option<Vec<f64>>,
    /// Write the JSON report here.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunOverrides,
    /// Directory holding vocab.txt, train.jsonl and dev.jsonl.
    #[arg(long)]
    data_dir: PathBuf,
    /// Directory for the table, curves, report and per-run checkpoints.
    #[arg(long)]
    out_dir: PathBuf,
    /// Variants to try.
    #[arg(long, value_delimiter = ',', default_value = "copy-aware,vanilla")]
    variants: Vec<Variant>,
    /// Upsampling ratios to try.
    #[arg(long = "ratios", value_delimiter = ',', default_value = "2,4,6,8")]
    ratios: Vec<usize>,
    /// Glancing settings to try: on, off.
    #[arg(long, value_delimiter = ',', default_value = "on,off")]
    glat: Vec<String>,
}

#[derive(Args)]
struct BenchArgs {
    /// Model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSONL with a "source" token list per line.
    #[arg(long)]
    input: PathBuf,
    /// Decoding pass counts to measure.
    #[arg(long, value_delimiter = ',', default_value = "1,2")]
    iterations: Vec<usize>,
    /// Source tokens per batch.
    #[arg(long, default_value_t = 10_000)]
    batch_tokens: usize,
    /// Timed passes over the corpus.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Untimed warmup batches.
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    /// Write the JSON report here.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct LatticeArgs {
    /// Model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Space-separated source tokens.
    #[arg(long)]
    source: String,
    /// Space-separated target tokens.
    #[arg(long)]
    target: String,
}

/// A problem with how the tool was invoked rather than with the data.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => 1,
                Error::NonFinite(_) => 3,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Lattice(a) => cmd_lattice(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn ensure_dir(dir: &Path, create: bool) -> Result<()> {
    if dir.is_dir() {
        return Ok(());
    }
    if !create {
        return Err(Usage(format!("output directory {} does not exist", dir.display())).into());
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut c = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<CorruptionConfig>(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => CorruptionConfig::default(),
    };
    macro_rules! set {
        ($field:ident) => {
            if let Some(v) = a.$field {
                c.$field = v;
            }
        };
    }
    set!(seed);
    set!(vocab_size);
    set!(drop_rate);
    set!(insert_rate);
    set!(substitute_rate);
    set!(swap_rate);
    set!(min_len);
    set!(max_len);
    set!(word_skew);
    set!(upsample);
    if a.max_edits.is_some() {
        c.max_edits = a.max_edits;
    }
    if let Some(g) = &a.grammar {
        c.grammar = match g.as_str() {
            "uniform" => Grammar::Uniform,
            "agreement" => Grammar::Agreement,
            other => return Err(Usage(format!("unknown grammar {other:?}; use uniform or agreement")).into()),
        };
    }
    c.validate()?;
    ensure_dir(&a.out_dir, !a.no_create)?;
    let vocab = synth_vocab(c.vocab_size)?;
    vocab.save(a.out_dir.join("vocab.txt"))?;
    println!("config {}", c.hash());
    for (name, n) in [("train", a.train), ("dev", a.dev), ("test", a.test)] {
        if n == 0 {
            continue;
        }
        let split = generate(&c, n, name)?;
        let path = a.out_dir.join(format!("{name}.jsonl"));
        write_jsonl(&split, &vocab, &path)?;
        write_sidecar(&c, &split, &path)?;
        let s = corpus_stats(&split.samples);
        println!(
            "{name}: {} sentences, {:.1}% erroneous, mean WER {:.4}, {} resampled -> {}",
            s.sentences,
            s.erroneous_pct,
            s.mean_wer,
            split.resamples,
            path.display()
        );
    }
    Ok(())
}

struct Data {
    vocab: Vocab,
    train: Vec<EditSample>,
    dev: Vec<EditSample>,
}

fn load_data(dir: &Path) -> Result<Data> {
    let vocab = Vocab::load(dir.join("vocab.txt"))?;
    let train = read_jsonl(dir.join("train.jsonl"), &vocab)?.samples;
    let dev = read_jsonl(dir.join("dev.jsonl"), &vocab)?.samples;
    Ok(Data { vocab, train, dev })
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let config = a.run.resolve()?;
    let data = load_data(&a.data_dir)?;
    let (outcome, files) = train_to_dir(&config, &data.vocab, &data.train, &data.dev, &a.out_dir, &mut |r| {
        println!(
            "epoch {:>3}  nll {:.4}  dev EM {:.2}%  dev F0.5 {:.4}  replaced {:.2}",
            r.epoch, r.nll, r.dev_em, r.dev_f05, r.mean_replace
        )
    })?;
    println!(
        "config {}  best epoch {} (dev EM {:.2}%)  -> {}",
        outcome.config_hash,
        outcome.best_epoch,
        outcome.best().dev_em,
        files.checkpoint.display()
    );
    Ok(())
}

/// Source lists from a JSONL file; other fields are ignored.
fn read_sources(path: &Path, vocab: &Vocab) -> Result<Vec<Vec<TokenId>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(token_list(&v, "source", i + 1, vocab)?);
    }
    Ok(out)
}

fn token_list(v: &serde_json::Value, field: &str, line: usize, vocab: &Vocab) -> Result<Vec<TokenId>> {
    let malformed = |m: String| Error::Malformed { line, message: m };
    let arr = v
        .get(field)
        .and_then(|x| x.as_array())
        .ok_or_else(|| malformed(format!("missing {field:?} token list")))?;
    arr.iter()
        .map(|t| {
            let s = t.as_str().ok_or_else(|| malformed(format!("{field:?} holds a non-string")))?;
            vocab.id(s).ok_or_else(|| {
                Error::UnknownToken {
                    token: s.to_string(),
                    line: Some(line),
                }
                .into()
            })
        })
        .collect()
}

#[derive(Serialize)]
struct DecodeMeta<'a> {
    model_hash: String,
    iterations: usize,
    sentences: usize,
    input: &'a Path,
}

fn cmd_decode(a: DecodeArgs) -> Result<()> {
    if a.iterations == 0 {
        return Err(Usage("--iterations must be at least 1".into()).into());
    }
    let (model, vocab) = load_checkpoint(&a.checkpoint)?;
    let sources = read_sources(&a.input, &vocab)?;
    let results = decode_corpus(&model, &sources, a.iterations)?;
    fs::write(&a.output, decode_jsonl(&sources, &results, &vocab)?)
        .with_context(|| format!("writing {}", a.output.display()))?;
    let mut meta_path = a.output.clone().into_os_string();
    meta_path.push(".meta.json");
    write_json(
        Path::new(&meta_path),
        &DecodeMeta {
            model_hash: config_hash(model.config()),
            iterations: a.iterations,
            sentences: sources.len(),
            input: &a.input,
        },
    )?;
    let changed = sources.iter().zip(&results).filter(|(s, r)| **s != r.hypothesis).count();
    println!("decoded {} sentences ({changed} changed) -> {}", sources.len(), a.output.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    config_hash: String,
    report: &'a copyctc::metrics::EvalReport,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let edges = a.edges.clone().unwrap_or_else(|| DEFAULT_BUCKET_EDGES.to_vec());
    let (report, hash) = match (&a.hyp, &a.checkpoint) {
        (_, Some(ckpt)) => {
            let (model, vocab) = load_checkpoint(ckpt)?;
            let samples = read_jsonl(&a.data, &vocab)?.samples;
            let report = evaluate_model(&model, &samples, a.iterations, &edges)?;
            (report, config_hash(&(model.config(), a.iterations, &edges)))
        }
        (Some(hyp), None) => {
            let vocab_path = a
                .vocab
                .clone()
                .or_else(|| a.data.parent().map(|d| d.join("vocab.txt")))
                .ok_or_else(|| Usage("--vocab is required with --hyp".into()))?;
            let vocab = Vocab::load(&vocab_path)?;
            let samples = read_jsonl(&a.data, &vocab)?.samples;
            let hyps = read_hypotheses(hyp, &samples, &vocab)?;
            (evaluate_hypotheses(&samples, &hyps, &edges)?, config_hash(&edges))
        }
        (None, None) => return Err(Usage("give --hyp or --checkpoint".into()).into()),
    };
    print!("{}", report.to_table());
    if let Some(out) = &a.output {
        write_json(
            out,
            &EvalOutput {
                config_hash: hash,
                report: &report,
            },
        )?;
    }
    Ok(())
}

fn read_hypotheses(path: &Path, samples: &[EditSample], vocab: &Vocab) -> Result<Vec<Vec<TokenId>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() != samples.len() {
        return Err(Error::InvalidInput(format!(
            "misaligned files: {} hypotheses for {} samples",
            lines.len(),
            samples.len()
        ))
        .into());
    }
    lines
        .iter()
        .zip(samples)
        .enumerate()
        .map(|(i, (line, s))| {
            let v: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Malformed {
                line: i + 1,
                message: e.to_string(),
            })?;
            if v.get("source").is_some() && token_list(&v, "source", i + 1, vocab)? != s.source {
                return Err(Error::InvalidInput(format!("misaligned files: sources differ on line {}", i + 1)).into());
            }
            token_list(&v, "hypothesis", i + 1, vocab)
        })
        .collect()
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let base = a.run.resolve()?;
    let data = load_data(&a.data_dir)?;
    let glancing = a
        .glat
        .iter()
        .map(|g| match g.as_str() {
            "on" => Ok(true),
            "off" => Ok(false),
            other => Err(Usage(format!("--glat takes on/off, got {other:?}"))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let grid = AblationGrid {
        variants: a.variants.clone(),
        upsample: a.ratios.clone(),
        glancing,
    };
    ensure_dir(&a.out_dir, true)?;
    let out_dir = a.out_dir.clone();
    let mut save_err = None;
    let report = run_ablation(&base, &grid, &data.vocab, &data.train, &data.dev, &mut |row, model: Option<&Model>| {
        match (&row.error, model) {
            (None, Some(m)) => {
                println!("{}: dev EM {:.2}%  F0.5 {:.4}", row.point.label(), row.dev_em, row.dev_f05);
                let dir = out_dir.join(row.point.label());
                let saved = fs::create_dir_all(&dir)
                    .map_err(anyhow::Error::from)
                    .and_then(|_| save_checkpoint(m, &data.vocab, dir.join("best.ckpt")).map_err(Into::into));
                if let Err(e) = saved {
                    save_err.get_or_insert(e);
                }
            }
            (Some(e), _) => println!("{}: failed: {e}", row.point.label()),
            _ => {}
        }
    });
    if let Some(e) = save_err {
        return Err(e);
    }
    let table = report.to_table();
    print!("{table}");
    fs::write(a.out_dir.join("ablation.txt"), &table)?;
    fs::write(a.out_dir.join("curves.csv"), report.curves_csv())?;
    write_json(&a.out_dir.join("ablation.json"), &report)?;
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let (model, vocab) = load_checkpoint(&a.checkpoint)?;
    let sources = read_sources(&a.input, &vocab)?;
    let config = BenchConfig {
        iterations: a.iterations.clone(),
        batch_tokens: a.batch_tokens,
        warmup_batches: a.warmup,
        repeats: a.repeats,
    };
    let report = bench(&model, &sources, &config)?;
    print!("{}", report.to_table());
    if let Some(out) = &a.output {
        write_json(out, &report)?;
    }
    Ok(())
}

fn cmd_lattice(a: LatticeArgs) -> Result<()> {
    let (model, vocab) = load_checkpoint(&a.checkpoint)?;
    let encode = |s: &str| -> Result<Vec<TokenId>> {
        s.split_whitespace()
            .map(|t| {
                vocab.id(t).ok_or_else(|| {
                    anyhow!(Error::UnknownToken {
                        token: t.to_string(),
                        line: None
                    })
                })
            })
            .collect()
    };
    let sample = EditSample::new(encode(&a.source)?, encode(&a.target)?);
    let lattice = model.emissions(&sample.source)?;
    print!("{}", alpha_beta(&sample, &lattice)?.to_tsv());
    Ok(())
}
