//! Per-position log-probability tables over the alignment label space.

use crate::error::{Error, Result};
use crate::lattice::AlignmentLabel;
use crate::vocab::TokenId;

/// Tolerance used when checking that rows are normalized log-distributions.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

/// Which label space a lattice (and the model producing it) uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Columns `[tokens.., KEEP, BLANK]`.
    CopyAware,
    /// Columns `[tokens.., BLANK]`; no copy label.
    Vanilla,
}

impl Variant {
    pub fn columns(self, vocab_size: usize) -> usize {
        match self {
            Variant::CopyAware => vocab_size + 2,
            Variant::Vanilla => vocab_size + 1,
        }
    }

    pub fn has_keep(self) -> bool {
        matches!(self, Variant::CopyAware)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::CopyAware => "copy-aware",
            Variant::Vanilla => "vanilla",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy-aware" | "copy" => Ok(Variant::CopyAware),
            "vanilla" => Ok(Variant::Vanilla),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

/// Emission log-probabilities of shape `(source_len * upsample) x columns`,
/// stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EmissionLattice {
    log_probs: Vec<f64>,
    source_len: usize,
    upsample: usize,
    vocab_size: usize,
    variant: Variant,
}

impl EmissionLattice {
    /// Builds a lattice and checks that every row is a normalized log-distribution.
    pub fn new(
        log_probs: Vec<f64>,
        source_len: usize,
        upsample: usize,
        vocab_size: usize,
        variant: Variant,
    ) -> Result<Self> {
        let lattice = Self::from_raw(log_probs, source_len, upsample, vocab_size, variant)?;
        for p in 0..lattice.positions() {
            let row = lattice.row(p);
            let lse = logsumexp(row);
            if (lse).abs() > NORMALIZATION_TOLERANCE {
                return Err(Error::InvalidInput(format!(
                    "lattice row {p} is not normalized (logsumexp = {lse})"
                )));
            }
            if row.iter().any(|&x| x > NORMALIZATION_TOLERANCE) {
                return Err(Error::InvalidInput(format!(
                    "lattice row {p} has a positive log-probability"
                )));
            }
        }
        Ok(lattice)
    }

    /// Builds a lattice without the normalization check (shape and NaN checks only).
    /// Used for derivative checks that perturb single entries.
    pub fn from_raw(
        log_probs: Vec<f64>,
        source_len: usize,
        upsample: usize,
        vocab_size: usize,
        variant: Variant,
    ) -> Result<Self> {
        if upsample == 0 {
            return Err(Error::InvalidInput("upsample ratio must be positive".into()));
        }
        let rows = source_len * upsample;
        let cols = variant.columns(vocab_size);
        if log_probs.len() != rows * cols {
            return Err(Error::dims(
                format!("{rows}x{cols} = {} entries", rows * cols),
                format!("{} entries", log_probs.len()),
            ));
        }
        if log_probs.iter().any(|x| x.is_nan()) {
            return Err(Error::InvalidInput("lattice contains NaN".into()));
        }
        Ok(EmissionLattice {
            log_probs,
            source_len,
            upsample,
            vocab_size,
            variant,
        })
    }

    /// Builds a lattice from a probability table (each row must sum to one).
    pub fn from_probs(
        probs: &[f64],
        source_len: usize,
        upsample: usize,
        vocab_size: usize,
        variant: Variant,
    ) -> Result<Self> {
        let log_probs = probs.iter().map(|p| p.ln()).collect();
        Self::new(log_probs, source_len, upsample, vocab_size, variant)
    }

    pub fn uniform(source_len: usize, upsample: usize, vocab_size: usize, variant: Variant) -> Self {
        let cols = variant.columns(vocab_size);
        let v = -(cols as f64).ln();
        EmissionLattice {
            log_probs: vec![v; source_len * upsample * cols],
            source_len,
            upsample,
            vocab_size,
            variant,
        }
    }

    pub fn source_len(&self) -> usize {
        self.source_len
    }

    pub fn upsample(&self) -> usize {
        self.upsample
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn positions(&self) -> usize {
        self.source_len * self.upsample
    }

    pub fn columns(&self) -> usize {
        self.variant.columns(self.vocab_size)
    }

    pub fn keep_column(&self) -> Option<usize> {
        self.variant.has_keep().then_some(self.vocab_size)
    }

    pub fn blank_column(&self) -> usize {
        self.columns() - 1
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn log_probs_mut(&mut self) -> &mut [f64] {
        &mut self.log_probs
    }

    pub fn into_log_probs(self) -> Vec<f64> {
        self.log_probs
    }

    pub fn row(&self, p: usize) -> &[f64] {
        let c = self.columns();
        &self.log_probs[p * c..(p + 1) * c]
    }

    pub fn at(&self, p: usize, col: usize) -> f64 {
        self.log_probs[p * self.columns() + col]
    }

    /// Source token index that a KEEP at flat position `p` copies.
    #[inline]
    pub fn source_index(&self, p: usize) -> usize {
        p / self.upsample
    }

    pub fn column_of(&self, label: AlignmentLabel) -> Option<usize> {
        match label {
            AlignmentLabel::Blank => Some(self.blank_column()),
            AlignmentLabel::Keep => self.keep_column(),
            AlignmentLabel::Token(id) => (id.index() < self.vocab_size).then_some(id.index()),
        }
    }

    pub fn label_of(&self, col: usize) -> AlignmentLabel {
        if col == self.blank_column() {
            AlignmentLabel::Blank
        } else if Some(col) == self.keep_column() {
            AlignmentLabel::Keep
        } else {
            AlignmentLabel::Token(TokenId(col as u32))
        }
    }

    pub fn label_log_prob(&self, p: usize, label: AlignmentLabel) -> f64 {
        match self.column_of(label) {
            Some(c) => self.at(p, c),
            None => f64::NEG_INFINITY,
        }
    }
}

#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}
