//! The alignment label space and the path → output mapping.
//!
//! A path has one label per upsampled position (`source_len * upsample` of
//! them). Recovering the output is `collapse(translate(path))`: KEEP labels
//! are first replaced by the source token they sit under, then runs of equal
//! tokens are merged and blanks removed. Because translation happens before
//! collapsing, a KEEP next to a literal copy of the same token merges with it.

use serde::{Deserialize, Serialize};

use crate::emission::EmissionLattice;
use crate::error::{Error, Result};
use crate::vocab::TokenId;

/// One element of the edit space: DELETE (blank), KEEP (copy source), ADD_t.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AlignmentLabel {
    Blank,
    Keep,
    Token(TokenId),
}

impl AlignmentLabel {
    /// Compact textual form used in logs and test vectors: `_` blank, `K` keep,
    /// otherwise the token string.
    pub fn display(self, vocab: &crate::vocab::Vocab) -> String {
        match self {
            AlignmentLabel::Blank => "∅".to_string(),
            AlignmentLabel::Keep => "K".to_string(),
            AlignmentLabel::Token(id) => vocab.token(id).unwrap_or("<?>").to_string(),
        }
    }
}

/// A translated slot: `None` is blank, `Some(t)` an emitted token.
pub type Slot = Option<TokenId>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentPath {
    labels: Vec<AlignmentLabel>,
    source_len: usize,
    upsample: usize,
}

impl AlignmentPath {
    pub fn new(labels: Vec<AlignmentLabel>, source_len: usize, upsample: usize) -> Result<Self> {
        if upsample == 0 {
            return Err(Error::InvalidInput("upsample ratio must be positive".into()));
        }
        if labels.len() != source_len * upsample {
            return Err(Error::dims(
                format!("{} labels (N={source_len}, T={upsample})", source_len * upsample),
                format!("{} labels", labels.len()),
            ));
        }
        Ok(AlignmentPath {
            labels,
            source_len,
            upsample,
        })
    }

    pub fn all(label: AlignmentLabel, source_len: usize, upsample: usize) -> Self {
        AlignmentPath {
            labels: vec![label; source_len * upsample],
            source_len,
            upsample,
        }
    }

    pub fn labels(&self) -> &[AlignmentLabel] {
        &self.labels
    }

    pub fn source_len(&self) -> usize {
        self.source_len
    }

    pub fn upsample(&self) -> usize {
        self.upsample
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Source index a KEEP at flat position `p` copies.
    #[inline]
    pub fn source_index(&self, p: usize) -> usize {
        p / self.upsample
    }

    /// Number of positions where two paths disagree.
    pub fn hamming(&self, other: &AlignmentPath) -> usize {
        self.labels
            .iter()
            .zip(&other.labels)
            .filter(|(a, b)| a != b)
            .count()
            + self.labels.len().abs_diff(other.labels.len())
    }
}

/// A (source, target) editing pair.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EditSample {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl EditSample {
    pub fn new(source: Vec<TokenId>, target: Vec<TokenId>) -> Self {
        EditSample { source, target }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.source.is_empty() {
            return Err(Error::InvalidInput("source must contain at least one token".into()));
        }
        if let Some(bad) = self
            .source
            .iter()
            .chain(&self.target)
            .find(|t| t.index() >= vocab_size)
        {
            return Err(Error::UnknownTokenId(bad.0));
        }
        Ok(())
    }
}

/// Replaces each KEEP with the source token it copies.
pub fn translate(path: &AlignmentPath, source: &[TokenId]) -> Result<Vec<Slot>> {
    if path.source_len() != source.len() {
        return Err(Error::dims(
            format!("source of length {}", path.source_len()),
            format!("source of length {}", source.len()),
        ));
    }
    Ok(path
        .labels()
        .iter()
        .enumerate()
        .map(|(p, label)| match *label {
            AlignmentLabel::Blank => None,
            AlignmentLabel::Keep => Some(source[path.source_index(p)]),
            AlignmentLabel::Token(t) => Some(t),
        })
        .collect())
}

/// Merges runs of identical tokens, then drops blanks. A blank between two
/// equal tokens keeps them apart.
pub fn collapse(seq: &[Slot]) -> Vec<TokenId> {
    let mut out = Vec::new();
    let mut prev: Slot = None;
    for &slot in seq {
        if let Some(t) = slot {
            if prev != Some(t) {
                out.push(t);
            }
        }
        prev = slot;
    }
    out
}

pub fn recover(path: &AlignmentPath, source: &[TokenId]) -> Result<Vec<TokenId>> {
    Ok(collapse(&translate(path, source)?))
}

/// Whether `path` maps to the sample's target.
pub fn is_valid(path: &AlignmentPath, sample: &EditSample) -> bool {
    match recover(path, &sample.source) {
        Ok(out) => out == sample.target,
        Err(_) => false,
    }
}

/// Size bounds for exhaustive path enumeration.
#[derive(Clone, Copy, Debug)]
pub struct EnumerationGuard {
    pub max_positions: usize,
    pub max_columns: usize,
}

impl Default for EnumerationGuard {
    fn default() -> Self {
        EnumerationGuard {
            max_positions: 8,
            max_columns: 5,
        }
    }
}

impl EnumerationGuard {
    fn check(&self, lattice: &EmissionLattice) -> Result<()> {
        if lattice.positions() > self.max_positions {
            return Err(Error::GuardExceeded {
                what: "alignment positions",
                value: lattice.positions(),
                bound: self.max_positions,
            });
        }
        if lattice.columns() > self.max_columns {
            return Err(Error::GuardExceeded {
                what: "label columns",
                value: lattice.columns(),
                bound: self.max_columns,
            });
        }
        Ok(())
    }
}

/// Visits every path of the lattice together with its probability
/// (product of per-position probabilities).
pub fn enumerate_paths<F>(lattice: &EmissionLattice, guard: EnumerationGuard, mut visit: F) -> Result<()>
where
    F: FnMut(&AlignmentPath, f64),
{
    guard.check(lattice)?;
    let positions = lattice.positions();
    let cols = lattice.columns();
    let probs: Vec<f64> = lattice.log_probs().iter().map(|x| x.exp()).collect();
    let mut digits = vec![0usize; positions];
    let mut path = AlignmentPath::all(AlignmentLabel::Blank, lattice.source_len(), lattice.upsample());
    loop {
        let mut prob = 1.0;
        for (p, &d) in digits.iter().enumerate() {
            path.labels[p] = lattice.label_of(d);
            prob *= probs[p * cols + d];
        }
        visit(&path, prob);

        let mut i = 0;
        loop {
            if i == positions {
                return Ok(());
            }
            digits[i] += 1;
            if digits[i] < cols {
                break;
            }
            digits[i] = 0;
            i += 1;
        }
    }
}

/// Brute-force marginal `Σ_{a valid} Π P(a_p)`; the reference the forward
/// algorithm is checked against.
pub fn enumerate_marginal_oracle(
    sample: &EditSample,
    lattice: &EmissionLattice,
    guard: EnumerationGuard,
) -> Result<f64> {
    check_source(sample, lattice)?;
    let mut total = 0.0;
    enumerate_paths(lattice, guard, |path, prob| {
        if is_valid(path, sample) {
            total += prob;
        }
    })?;
    Ok(total)
}

/// Brute-force distribution over every recoverable output for a source.
pub fn enumerate_output_distribution(
    source: &[TokenId],
    lattice: &EmissionLattice,
    guard: EnumerationGuard,
) -> Result<std::collections::BTreeMap<Vec<TokenId>, f64>> {
    if source.len() != lattice.source_len() {
        return Err(Error::dims(lattice.source_len(), source.len()));
    }
    let mut dist = std::collections::BTreeMap::new();
    enumerate_paths(lattice, guard, |path, prob| {
        let out = recover(path, source).expect("length checked");
        *dist.entry(out).or_insert(0.0) += prob;
    })?;
    Ok(dist)
}

fn check_source(sample: &EditSample, lattice: &EmissionLattice) -> Result<()> {
    if sample.source.len() != lattice.source_len() {
        return Err(Error::dims(
            format!("lattice for source length {}", sample.source.len()),
            format!("lattice for source length {}", lattice.source_len()),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emission::Variant;
    use AlignmentLabel::{Blank as B, Keep as K};

    fn t(i: u32) -> TokenId {
        TokenId(i)
    }

    fn tok(i: u32) -> AlignmentLabel {
        AlignmentLabel::Token(t(i))
    }

    // I=0 like=1 an=2 dog=3 dogs=4
    #[test]
    fn table_two_walkthrough() {
        let source = vec![t(0), t(1), t(2), t(3)];
        let path = AlignmentPath::new(vec![K, K, K, K, B, B, B, tok(4)], 4, 2).unwrap();
        let translated = translate(&path, &source).unwrap();
        assert_eq!(
            translated,
            vec![Some(t(0)), Some(t(0)), Some(t(1)), Some(t(1)), None, None, None, Some(t(4))]
        );
        assert_eq!(collapse(&translated), vec![t(0), t(1), t(4)]);
        assert_eq!(recover(&path, &source).unwrap(), vec![t(0), t(1), t(4)]);
    }

    #[test]
    fn translate_all_blank() {
        let path = AlignmentPath::all(B, 3, 2);
        assert_eq!(translate(&path, &[t(0), t(1), t(2)]).unwrap(), vec![None; 6]);
    }

    #[test]
    fn translate_repeated_source() {
        // a=0 b=1
        let source = vec![t(0), t(0), t(1)];
        let path = AlignmentPath::new(vec![K, K, B, K, K, K], 3, 2).unwrap();
        assert_eq!(
            translate(&path, &source).unwrap(),
            vec![Some(t(0)), Some(t(0)), None, Some(t(0)), Some(t(1)), Some(t(1))]
        );
    }

    #[test]
    fn translate_length_mismatch() {
        let path = AlignmentPath::all(K, 2, 2);
        assert!(matches!(
            translate(&path, &[t(0)]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn collapse_examples() {
        let a = Some(t(0));
        let b = Some(t(1));
        assert_eq!(collapse(&[a, a, None, a, b, b]), vec![t(0), t(0), t(1)]);
        assert_eq!(collapse(&[None, None, None]), Vec::<TokenId>::new());
    }

    #[test]
    fn recover_keep_then_literal() {
        let path = AlignmentPath::new(vec![K, tok(1)], 1, 2).unwrap();
        assert_eq!(recover(&path, &[t(0)]).unwrap(), vec![t(0), t(1)]);
    }

    #[test]
    fn keep_merges_with_equal_literal() {
        let path = AlignmentPath::new(vec![K, tok(0)], 1, 2).unwrap();
        assert_eq!(recover(&path, &[t(0)]).unwrap(), vec![t(0)]);
    }

    #[test]
    fn all_keep_merges_duplicate_runs() {
        let source = vec![t(0), t(0), t(1), t(2), t(2)];
        let path = AlignmentPath::all(K, source.len(), 3);
        assert_eq!(recover(&path, &source).unwrap(), vec![t(0), t(1), t(2)]);
    }

    #[test]
    fn validity_examples() {
        let sample = EditSample::new(vec![t(0), t(0), t(1)], vec![t(0), t(0), t(1)]);
        let literal = AlignmentPath::new(vec![tok(0), tok(0), B, tok(0), tok(1), tok(1)], 3, 2).unwrap();
        let copies = AlignmentPath::new(vec![K, K, B, K, K, K], 3, 2).unwrap();
        assert!(is_valid(&literal, &sample));
        assert!(is_valid(&copies, &sample));
        assert!(!is_valid(&AlignmentPath::all(B, 3, 2), &sample));
    }

    #[test]
    fn path_length_checked() {
        assert!(AlignmentPath::new(vec![K; 5], 3, 2).is_err());
    }

    fn uniform_a() -> EmissionLattice {
        // V = {a, b}; columns a, b, K, ∅ at 0.25 each, N=1, T=2.
        EmissionLattice::uniform(1, 2, 2, Variant::CopyAware)
    }

    #[test]
    fn oracle_uniform_examples() {
        let lattice = uniform_a();
        let guard = EnumerationGuard::default();
        let m = |target: Vec<TokenId>| {
            enumerate_marginal_oracle(&EditSample::new(vec![t(0)], target), &lattice, guard).unwrap()
        };
        assert!((m(vec![t(0)]) - 0.5).abs() < 1e-15);
        assert!((m(vec![t(1)]) - 0.1875).abs() < 1e-15);
        assert!((m(vec![]) - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn oracle_guard_refuses_large_instances() {
        let lattice = EmissionLattice::uniform(3, 3, 2, Variant::CopyAware);
        let sample = EditSample::new(vec![t(0); 3], vec![t(0)]);
        let err = enumerate_marginal_oracle(&sample, &lattice, EnumerationGuard::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("9") && msg.contains("8"), "{msg}");
    }

    #[test]
    fn output_distribution_sums_to_one() {
        let lattice = uniform_a();
        let dist = enumerate_output_distribution(&[t(0)], &lattice, EnumerationGuard::default()).unwrap();
        let total: f64 = dist.values().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(dist.len(), 5);
        assert!((dist[&vec![t(0), t(1)]] - 0.125).abs() < 1e-15);
        assert!((dist[&vec![t(1), t(0)]] - 0.125).abs() < 1e-15);
    }
}
