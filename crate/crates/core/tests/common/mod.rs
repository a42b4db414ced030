#![allow(dead_code)]

use copyctc::emission::log_add_exp;
use copyctc::model::{Model, ModelConfig};
use std::collections::BTreeMap;

use copyctc::{EmissionLattice, TokenId, Variant, Vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random normalized lattice with entries spread over a few nats.
pub fn random_lattice(rng: &mut ChaCha8Rng, n: usize, t: usize, v: usize, variant: Variant) -> EmissionLattice {
    let cols = variant.columns(v);
    let mut lp = Vec::with_capacity(n * t * cols);
    for _ in 0..n * t {
        let row: Vec<f64> = (0..cols).map(|_| rng.random_range(-3.0..3.0)).collect();
        let z = row.iter().copied().fold(f64::NEG_INFINITY, log_add_exp);
        lp.extend(row.iter().map(|x| x - z));
    }
    EmissionLattice::new(lp, n, t, v, variant).unwrap()
}

/// Walks every label path depth first, decoding as it goes. With a target,
/// branches whose output stops being a prefix of it are cut.
fn walk(
    source: &[TokenId],
    lattice: &EmissionLattice,
    target: Option<&[TokenId]>,
    p: usize,
    prob: f64,
    out: &mut Vec<TokenId>,
    last: Option<TokenId>,
    visit: &mut dyn FnMut(&[TokenId], f64),
) {
    if p == lattice.positions() {
        visit(out, prob);
        return;
    }
    let v = lattice.vocab_size();
    let keep = if lattice.variant() == Variant::CopyAware { Some(v) } else { None };
    for (col, lp) in lattice.row(p).iter().enumerate() {
        let slot = if col < v {
            Some(TokenId(col as u32))
        } else if Some(col) == keep {
            Some(source[p / lattice.upsample()])
        } else {
            None
        };
        let grew = match slot {
            Some(t) if slot != last => {
                out.push(t);
                true
            }
            _ => false,
        };
        let ok = target.is_none_or(|t| out.len() <= t.len() && out[..] == t[..out.len()]);
        if ok {
            walk(source, lattice, target, p + 1, prob * lp.exp(), out, slot, visit);
        }
        if grew {
            out.pop();
        }
    }
}

/// Total probability of the label paths that decode to `target`.
pub fn path_sum(source: &[TokenId], target: &[TokenId], lattice: &EmissionLattice) -> f64 {
    let mut total = 0.0;
    walk(source, lattice, Some(target), 0, 1.0, &mut Vec::new(), None, &mut |out, p| {
        if out == target {
            total += p;
        }
    });
    total
}

/// Probability of every output reachable from `source`.
pub fn output_distribution(source: &[TokenId], lattice: &EmissionLattice) -> BTreeMap<Vec<TokenId>, f64> {
    let mut dist = BTreeMap::new();
    walk(source, lattice, None, 0, 1.0, &mut Vec::new(), None, &mut |out, p| {
        *dist.entry(out.to_vec()).or_insert(0.0) += p;
    });
    dist
}

pub const TABLE2_TOKENS: [&str; 5] = ["I", "like", "an", "dog", "dogs"];

/// A model with no transformer layers whose weights are set by hand so that
/// "I like an dog" emits K K K K blank blank blank dogs at T = 2. Every other
/// known word maps to K K, so "I like dogs" is a fixed point.
pub fn table2_model() -> (Model, Vocab) {
    let vocab = Vocab::new(TABLE2_TOKENS).unwrap();
    let config = ModelConfig {
        vocab_size: 5,
        hidden: 16,
        encoder_layers: 0,
        decoder_layers: 0,
        heads: 1,
        ffn_hidden: 4,
        upsample: 2,
        max_source_len: 16,
        dropout: 0.0,
        seed: 0,
        variant: Variant::CopyAware,
    };
    let h = config.hidden;
    let mut model = Model::new(config).unwrap();
    let layout = model.layout().clone();
    let p = model.params_mut();
    p.iter_mut().for_each(|x| *x = 0.0);
    for r in [&layout.encoder_ln_gain, &layout.decoder_ln_gain] {
        p[r.clone()].iter_mut().for_each(|x| *x = 1.0);
    }
    let emb = layout.embedding.start;
    for k in 0..5 {
        p[emb + k * h + k] = 100.0;
    }
    // Classes in each upsampled slot: 0 keep, 1 blank, 2 "dogs".
    let class = |k: usize, j: usize| match (k, j) {
        (2, _) | (3, 0) => 1,
        (3, 1) => 2,
        _ => 0,
    };
    let scale = 10.0;
    // A layer-normed one-hot row is alpha * e_k + beta; the bias cancels beta.
    let beta = -1.0 / (h as f64 - 1.0).sqrt();
    let w = layout.upsample_w.start;
    let b = layout.upsample_b.start;
    for k in 0..h {
        for j in 0..2 {
            let d = if k < 5 { class(k, j) } else { 0 };
            p[w + k * 2 * h + j * h + d] = scale;
            p[b + j * h + d] -= beta * scale;
        }
    }
    let head = layout.head_w.start;
    let cols = 7;
    for (d, col) in [(0, 5), (1, 6), (2, 4)] {
        p[head + d * cols + col] = scale;
    }
    (model, vocab)
}
