//! Seeded synthetic editing corpora: sample a clean target sentence, corrupt
//! it into the source.
//!
//! Two generators are available. `Uniform` draws every token independently
//! and lets every position be corrupted, which is useful for testing rate
//! fidelity but is not learnable. `Agreement` builds sentences in which each
//! "marked" content word must be preceded by one specific marker word, and
//! only markers are corrupted. The clean sentence is then a deterministic
//! function of the corrupted one, so a model can in principle reach 100%
//! exact match.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lattice::EditSample;
use crate::loss::feasible;
use crate::metrics::levenshtein;
use crate::util::{config_hash, derive_seed};
use crate::vocab::{TokenId, Vocab};

const CONSONANTS: [char; 10] = ['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 't'];
const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];
const MAX_RETRIES: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grammar {
    Uniform,
    Agreement,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionConfig {
    pub drop_rate: f64,
    pub insert_rate: f64,
    pub substitute_rate: f64,
    pub swap_rate: f64,
    /// At most this many corruptions per sentence.
    pub max_edits: Option<usize>,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    pub grammar: Grammar,
    /// Zipf exponent over word ranks within each word class; `0` is uniform.
    pub word_skew: f64,
    /// Every emitted sample must be feasible at this upsampling ratio.
    pub upsample: usize,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            drop_rate: 0.15,
            insert_rate: 0.05,
            substitute_rate: 0.15,
            swap_rate: 0.05,
            max_edits: None,
            vocab_size: 50,
            min_len: 5,
            max_len: 12,
            seed: 42,
            grammar: Grammar::Agreement,
            word_skew: 1.5,
            upsample: 2,
        }
    }
}

impl CorruptionConfig {
    pub fn identity(vocab_size: usize, seed: u64) -> Self {
        CorruptionConfig {
            drop_rate: 0.0,
            insert_rate: 0.0,
            substitute_rate: 0.0,
            swap_rate: 0.0,
            vocab_size,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [self.drop_rate, self.insert_rate, self.substitute_rate, self.swap_rate];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config("corruption rates must lie in [0, 1]".into()));
        }
        if rates.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(Error::Config("corruption rates must sum to at most 1".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "length range {}..={} is empty or starts at 0",
                self.min_len, self.max_len
            )));
        }
        if !self.word_skew.is_finite() || self.word_skew < 0.0 {
            return Err(Error::Config("word_skew must be finite and >= 0".into()));
        }
        if self.upsample == 0 {
            return Err(Error::Config("upsample must be at least 1".into()));
        }
        let min_vocab = match self.grammar {
            Grammar::Uniform => 2,
            Grammar::Agreement => 6,
        };
        if self.vocab_size < min_vocab {
            return Err(Error::Config(format!(
                "{:?} grammar needs at least {min_vocab} tokens",
                self.grammar
            )));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Pronounceable two-syllable token names, distinct for up to 2500 tokens.
pub fn token_name(i: usize) -> String {
    let syl = |k: usize| format!("{}{}", CONSONANTS[k % 10], VOWELS[(k / 10) % 5]);
    format!("{}{}", syl(i % 50), syl(i / 50))
}

pub fn synth_vocab(size: usize) -> Result<Vocab> {
    if size > 2500 {
        return Err(Error::Vocab(format!("synthetic vocabularies hold at most 2500 tokens, asked for {size}")));
    }
    Vocab::new((0..size).map(token_name))
}

/// Word classes of the agreement grammar.
#[derive(Clone, Debug)]
struct Classes {
    markers: usize,
    bare: usize,
    vocab: usize,
}

impl Classes {
    fn new(vocab: usize) -> Self {
        let markers = (vocab / 5).max(1);
        let bare = (vocab / 5).max(1);
        Classes { markers, bare, vocab }
    }

    fn is_marker(&self, t: u32) -> bool {
        (t as usize) < self.markers
    }

    fn marked_start(&self) -> usize {
        self.markers + self.bare
    }

    fn marker_for(&self, content: u32) -> u32 {
        ((content as usize - self.marked_start()) % self.markers) as u32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub name: String,
    pub samples: Vec<EditSample>,
    pub config_hash: String,
    /// Samples discarded because the source was empty or infeasible.
    pub resamples: usize,
    pub events: CorruptionCounts,
}

fn split_key(name: &str) -> u64 {
    let d = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn below(rng: &mut ChaCha8Rng, n: usize) -> u32 {
    rng.random_range(0..n as u32)
}

fn zipf(n: usize, exponent: f64) -> WeightedIndex<f64> {
    WeightedIndex::new((1..=n).map(|r| (r as f64).powf(-exponent))).expect("positive weights")
}

struct Generator<'a> {
    config: &'a CorruptionConfig,
    classes: Classes,
    /// Word choice for uniform sentences, bare words and marked words.
    any: WeightedIndex<f64>,
    bare: WeightedIndex<f64>,
    marked: WeightedIndex<f64>,
}

impl<'a> Generator<'a> {
    fn new(config: &'a CorruptionConfig) -> Self {
        let classes = Classes::new(config.vocab_size);
        let skew = config.word_skew;
        Generator {
            config,
            any: zipf(config.vocab_size, skew),
            bare: zipf(classes.bare, skew),
            marked: zipf(classes.vocab - classes.marked_start(), skew),
            classes,
        }
    }

    fn target(&self, rng: &mut ChaCha8Rng) -> Vec<u32> {
        let c = self.config;
        let len = c.min_len + below(rng, c.max_len - c.min_len + 1) as usize;
        match c.grammar {
            Grammar::Uniform => (0..len).map(|_| self.any.sample(rng) as u32).collect(),
            Grammar::Agreement => {
                let k = &self.classes;
                let mut out = Vec::with_capacity(len);
                while out.len() < len {
                    if len - out.len() >= 2 && rng.random::<f64>() < 0.5 {
                        let content = (k.marked_start() + self.marked.sample(rng)) as u32;
                        out.push(k.marker_for(content));
                        out.push(content);
                    } else {
                        out.push((k.markers + self.bare.sample(rng)) as u32);
                    }
                }
                out
            }
        }
    }

    fn eligible(&self, t: u32) -> bool {
        match self.config.grammar {
            Grammar::Uniform => true,
            Grammar::Agreement => self.classes.is_marker(t),
        }
    }

    fn random_token(&self, rng: &mut ChaCha8Rng, other_than: Option<u32>) -> u32 {
        let pool = match self.config.grammar {
            Grammar::Uniform => self.config.vocab_size,
            Grammar::Agreement => self.classes.markers,
        };
        match other_than {
            Some(t) if pool > 1 => {
                let r = below(rng, pool - 1);
                if r >= t {
                    r + 1
                } else {
                    r
                }
            }
            _ => below(rng, pool),
        }
    }

    /// One uniform draw per target position selects at most one corruption.
    fn corrupt(&self, target: &[u32], rng: &mut ChaCha8Rng, counts: &mut CorruptionCounts) -> Vec<u32> {
        let c = self.config;
        let budget = c.max_edits.unwrap_or(usize::MAX);
        let b1 = c.drop_rate;
        let b2 = b1 + c.insert_rate;
        let b3 = b2 + c.substitute_rate;
        let b4 = b3 + c.swap_rate;
        let mut edits = 0;
        let mut out = Vec::with_capacity(target.len() + 4);
        let mut i = 0;
        while i < target.len() {
            let t = target[i];
            if edits >= budget {
                out.push(t);
                i += 1;
                continue;
            }
            let u: f64 = rng.random();
            let eligible = self.eligible(t);
            let has_next = i + 1 < target.len();
            counts.draws += 1;
            counts.eligible_draws += usize::from(eligible);
            counts.swap_draws += usize::from(eligible && has_next);
            if u < b1 && eligible {
                counts.drop += 1;
                edits += 1;
                i += 1;
            } else if (b1..b2).contains(&u) {
                counts.insert += 1;
                out.push(t);
                out.push(self.random_token(rng, None));
                edits += 1;
                i += 1;
            } else if (b2..b3).contains(&u) && eligible {
                counts.substitute += 1;
                out.push(self.random_token(rng, Some(t)));
                edits += 1;
                i += 1;
            } else if (b3..b4).contains(&u) && eligible && has_next {
                counts.swap += 1;
                out.push(target[i + 1]);
                out.push(t);
                edits += 1;
                i += 2;
            } else {
                out.push(t);
                i += 1;
            }
        }
        out
    }
}

/// Corruption draws and events over the accepted samples of a split.
/// Drops, substitutions and swaps are only drawn at eligible positions, and
/// swaps additionally need a following token.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionCounts {
    pub draws: usize,
    pub eligible_draws: usize,
    pub swap_draws: usize,
    pub drop: usize,
    pub insert: usize,
    pub substitute: usize,
    pub swap: usize,
}

impl CorruptionCounts {
    fn add(&mut self, o: &CorruptionCounts) {
        self.draws += o.draws;
        self.eligible_draws += o.eligible_draws;
        self.swap_draws += o.swap_draws;
        self.drop += o.drop;
        self.insert += o.insert;
        self.substitute += o.substitute;
        self.swap += o.swap;
    }

    /// Empirical `(drop, insert, substitute, swap)` rates.
    pub fn rates(&self) -> [f64; 4] {
        let r = |k: usize, n: usize| k as f64 / n.max(1) as f64;
        [
            r(self.drop, self.eligible_draws),
            r(self.insert, self.draws),
            r(self.substitute, self.eligible_draws),
            r(self.swap, self.swap_draws),
        ]
    }
}

/// `n` samples for the named split. Each split name seeds its own stream.
pub fn generate(config: &CorruptionConfig, n: usize, split: &str) -> Result<DatasetSplit> {
    config.validate()?;
    if n == 0 {
        return Err(Error::InvalidInput("cannot generate an empty split".into()));
    }
    let gen = Generator::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[split_key(split)]));
    let mut samples = Vec::with_capacity(n);
    let mut resamples = 0;
    let mut events = CorruptionCounts::default();
    for _ in 0..n {
        let mut tries = 0;
        loop {
            let target = gen.target(&mut rng);
            let mut c = CorruptionCounts::default();
            let source = gen.corrupt(&target, &mut rng, &mut c);
            let sample = EditSample::new(
                source.into_iter().map(TokenId).collect(),
                target.into_iter().map(TokenId).collect(),
            );
            if !sample.source.is_empty() && feasible(&sample, config.upsample) {
                samples.push(sample);
                events.add(&c);
                break;
            }
            resamples += 1;
            tries += 1;
            if tries >= MAX_RETRIES {
                return Err(Error::Generation(format!(
                    "no usable sample after {MAX_RETRIES} attempts; the corruption settings leave \
                     sources empty or too short for upsample {}",
                    config.upsample
                )));
            }
        }
    }
    Ok(DatasetSplit {
        name: split.to_string(),
        samples,
        config_hash: config.hash(),
        resamples,
        events,
    })
}

#[derive(Serialize, Deserialize)]
struct Record {
    source: Vec<String>,
    target: Vec<String>,
}

pub fn to_jsonl(samples: &[EditSample], vocab: &Vocab) -> Result<String> {
    let mut out = String::new();
    for s in samples {
        let rec = Record {
            source: vocab.decode(&s.source)?,
            target: vocab.decode(&s.target)?,
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl(split: &DatasetSplit, vocab: &Vocab, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::path(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(to_jsonl(&split.samples, vocab)?.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::path(path, e))
}

fn encode_line(vocab: &Vocab, tokens: &[String], line: usize) -> Result<Vec<TokenId>> {
    tokens
        .iter()
        .map(|t| {
            vocab.id(t).ok_or_else(|| Error::UnknownToken {
                token: t.clone(),
                line: Some(line),
            })
        })
        .collect()
}

pub fn parse_jsonl(text: impl BufRead, vocab: &Vocab) -> Result<Vec<EditSample>> {
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        samples.push(EditSample::new(
            encode_line(vocab, &rec.source, line_no)?,
            encode_line(vocab, &rec.target, line_no)?,
        ));
    }
    Ok(samples)
}

/// Reads a split; the config hash is taken from the sidecar when present.
pub fn read_jsonl(path: impl AsRef<Path>, vocab: &Vocab) -> Result<DatasetSplit> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::path(path, e))?;
    let samples = parse_jsonl(BufReader::new(file), vocab)?;
    let config_hash = read_sidecar(path).map(|s| s.hash).unwrap_or_default();
    Ok(DatasetSplit {
        name: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        samples,
        config_hash,
        resamples: 0,
        events: CorruptionCounts::default(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub config: CorruptionConfig,
    pub hash: String,
    pub split: String,
    pub samples: usize,
    pub resamples: usize,
}

pub fn sidecar_path(data: &Path) -> PathBuf {
    let mut name = data.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".config.json");
    data.with_file_name(name)
}

pub fn write_sidecar(config: &CorruptionConfig, split: &DatasetSplit, data: impl AsRef<Path>) -> Result<PathBuf> {
    let path = sidecar_path(data.as_ref());
    let side = Sidecar {
        config: config.clone(),
        hash: config.hash(),
        split: split.name.clone(),
        samples: split.samples.len(),
        resamples: split.resamples,
    };
    let mut text = serde_json::to_string_pretty(&side)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::path(&path, e))?;
    Ok(path)
}

pub fn read_sidecar(data: impl AsRef<Path>) -> Option<Sidecar> {
    let text = fs::read_to_string(sidecar_path(data.as_ref())).ok()?;
    serde_json::from_str(&text).ok()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub sentences: usize,
    /// Percentage of samples whose source differs from the target.
    pub erroneous_pct: f64,
    /// Levenshtein distance over source length, averaged over samples.
    pub mean_wer: f64,
    /// Target length to count.
    pub length_histogram: BTreeMap<usize, usize>,
}

pub fn corpus_stats(samples: &[EditSample]) -> CorpusStats {
    let mut hist = BTreeMap::new();
    let mut wrong = 0;
    let mut wer_sum = 0.0;
    for s in samples {
        *hist.entry(s.target.len()).or_insert(0) += 1;
        wrong += usize::from(s.source != s.target);
        wer_sum += levenshtein(&s.source, &s.target) as f64 / s.source.len().max(1) as f64;
    }
    let n = samples.len().max(1) as f64;
    CorpusStats {
        sentences: samples.len(),
        erroneous_pct: 100.0 * wrong as f64 / n,
        mean_wer: wer_sum / n,
        length_histogram: hist,
    }
}

/// Restores an agreement-grammar sentence: strip markers and put the
/// required marker before every marked word.
pub fn agreement_reference(source: &[TokenId], vocab_size: usize) -> Vec<TokenId> {
    let k = Classes::new(vocab_size);
    let mut out = Vec::with_capacity(source.len() + 2);
    for &t in source {
        if k.is_marker(t.0) {
            continue;
        }
        if t.index() >= k.marked_start() {
            out.push(TokenId(k.marker_for(t.0)));
        }
        out.push(t);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_names_are_distinct() {
        let v = synth_vocab(200).unwrap();
        assert_eq!(v.len(), 200);
        assert_eq!(token_name(0), "baba");
    }

    #[test]
    fn identity_corpus() {
        let cfg = CorruptionConfig::identity(50, 3);
        let split = generate(&cfg, 200, "train").unwrap();
        assert!(split.samples.iter().all(|s| s.source == s.target));
        let stats = corpus_stats(&split.samples);
        assert_eq!(stats.erroneous_pct, 0.0);
        assert_eq!(stats.mean_wer, 0.0);
    }

    #[test]
    fn drop_everything_in_agreement_grammar() {
        let cfg = CorruptionConfig {
            drop_rate: 1.0,
            insert_rate: 0.0,
            substitute_rate: 0.0,
            swap_rate: 0.0,
            ..Default::default()
        };
        let split = generate(&cfg, 100, "train").unwrap();
        let k = Classes::new(50);
        for s in &split.samples {
            assert!(!s.target.is_empty());
            let stripped: Vec<TokenId> = s.target.iter().copied().filter(|t| !k.is_marker(t.0)).collect();
            assert_eq!(s.source, stripped);
        }
    }

    #[test]
    fn drop_everything_uniform_fails() {
        let cfg = CorruptionConfig {
            drop_rate: 1.0,
            insert_rate: 0.0,
            substitute_rate: 0.0,
            swap_rate: 0.0,
            grammar: Grammar::Uniform,
            ..Default::default()
        };
        assert!(matches!(generate(&cfg, 1, "train"), Err(Error::Generation(_))));
    }

    #[test]
    fn deterministic_and_split_disjoint() {
        let cfg = CorruptionConfig::default();
        let a = generate(&cfg, 50, "train").unwrap();
        let b = generate(&cfg, 50, "train").unwrap();
        let c = generate(&cfg, 50, "dev").unwrap();
        assert_eq!(a, b);
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn agreement_reference_recovers_target() {
        let cfg = CorruptionConfig::default();
        let split = generate(&cfg, 500, "train").unwrap();
        for s in &split.samples {
            assert_eq!(agreement_reference(&s.source, 50), s.target);
            assert!(feasible(s, cfg.upsample));
        }
        assert!(corpus_stats(&split.samples).erroneous_pct > 20.0);
    }

    #[test]
    fn jsonl_round_trip_with_empty_target() {
        let v = synth_vocab(10).unwrap();
        let samples = vec![
            EditSample::new(vec![TokenId(1), TokenId(2)], vec![]),
            EditSample::new(vec![TokenId(3)], vec![TokenId(3), TokenId(4)]),
        ];
        let text = to_jsonl(&samples, &v).unwrap();
        assert!(text.lines().next().unwrap().ends_with("\"target\":[]}"));
        assert_eq!(parse_jsonl(text.as_bytes(), &v).unwrap(), samples);
    }

    #[test]
    fn unknown_token_names_line() {
        let v = synth_vocab(10).unwrap();
        let text = "{\"source\":[\"baba\"],\"target\":[]}\n{\"source\":[\"zzz\"],\"target\":[]}\n";
        match parse_jsonl(text.as_bytes(), &v) {
            Err(Error::UnknownToken { token, line }) => {
                assert_eq!(token, "zzz");
                assert_eq!(line, Some(2));
            }
            other => panic!("expected unknown token, got {other:?}"),
        }
        assert!(matches!(
            parse_jsonl("{\"source\":3}\n".as_bytes(), &v),
            Err(Error::Malformed { line: 1, .. })
        ));
    }

    #[test]
    fn one_substitution_in_ten() {
        let src: Vec<TokenId> = (0..10).map(TokenId).collect();
        let mut tgt = src.clone();
        tgt[4] = TokenId(20);
        let stats = corpus_stats(&[EditSample::new(src, tgt)]);
        assert!((stats.mean_wer - 0.1).abs() < 1e-15);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = CorruptionConfig::default();
        cfg.drop_rate = 0.8;
        cfg.insert_rate = 0.5;
        assert!(cfg.validate().is_err());
        let mut cfg = CorruptionConfig::default();
        cfg.min_len = 9;
        cfg.max_len = 3;
        assert!(cfg.validate().is_err());
    }
}
