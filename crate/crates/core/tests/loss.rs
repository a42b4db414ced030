mod common;

use std::time::Instant;

use common::{output_distribution, path_sum, random_lattice, rng};
use copyctc::lattice::{enumerate_marginal_oracle, enumerate_output_distribution, EnumerationGuard};
use copyctc::loss::{forward_backward_grad, forward_backward_grad_with, forward_nll, viterbi_align, GradOptions};
use copyctc::{EditSample, EmissionLattice, TokenId, Variant};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn random_sample(rng: &mut ChaCha8Rng, n: usize, v: usize, max_target: usize) -> EditSample {
    let source = (0..n).map(|_| TokenId(rng.random_range(0..v as u32))).collect();
    let m = rng.random_range(0..=max_target);
    let target = (0..m).map(|_| TokenId(rng.random_range(0..v as u32))).collect();
    EditSample::new(source, target)
}

#[test]
fn forward_matches_enumeration() {
    let mut r = rng(11);
    for _ in 0..150 {
        let n = r.random_range(1..=3);
        let t = r.random_range(1..=2);
        let v = r.random_range(1..=3);
        let variant = if r.random_bool(0.8) { Variant::CopyAware } else { Variant::Vanilla };
        let lattice = random_lattice(&mut r, n, t, v, variant);
        let sample = random_sample(&mut r, n, v, n * t);
        let oracle = enumerate_marginal_oracle(&sample, &lattice, EnumerationGuard::default()).unwrap();
        let nll = forward_nll(&sample, &lattice).unwrap();
        let p = (-nll.neg_log_likelihood).exp();
        assert!((p - oracle).abs() <= 1e-9, "{p} vs {oracle} for {sample:?}");
        if !nll.feasible {
            assert_eq!(oracle, 0.0);
        }
    }
}

#[test]
fn forward_matches_independent_path_walk() {
    let mut r = rng(12);
    for _ in 0..150 {
        let n = r.random_range(1..=3);
        let t = r.random_range(1..=3);
        let v = r.random_range(1..=3);
        let variant = if r.random_bool(0.8) { Variant::CopyAware } else { Variant::Vanilla };
        let lattice = random_lattice(&mut r, n, t, v, variant);
        let sample = random_sample(&mut r, n, v, n * t);
        let p = (-forward_nll(&sample, &lattice).unwrap().neg_log_likelihood).exp();
        assert!((p - path_sum(&sample.source, &sample.target, &lattice)).abs() <= 1e-9);
    }
    let lattice = random_lattice(&mut r, 2, 2, 3, Variant::CopyAware);
    let total: f64 = output_distribution(&[TokenId(0), TokenId(2)], &lattice).values().sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn completeness_on_uniform_instance() {
    let lattice = EmissionLattice::uniform(1, 2, 2, Variant::CopyAware);
    let source = [TokenId(0)];
    let dist = enumerate_output_distribution(&source, &lattice, EnumerationGuard::default()).unwrap();
    let total: f64 = dist.values().sum();
    assert!((total - 1.0).abs() < 1e-12);
    let (a, b) = (TokenId(0), TokenId(1));
    for (target, want) in [
        (vec![a], 0.5),
        (vec![b], 0.1875),
        (vec![a, b], 0.125),
        (vec![b, a], 0.125),
        (vec![], 0.0625),
    ] {
        let nll = forward_nll(&EditSample::new(source.to_vec(), target.clone()), &lattice).unwrap();
        assert!(((-nll.neg_log_likelihood).exp() - want).abs() < 1e-12, "{target:?}");
        assert!((dist[&target] - want).abs() < 1e-12);
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    diff / scale.max(1e-12)
}

/// Central differences of the nll with respect to raw lattice entries.
fn fd_raw(sample: &EditSample, lattice: &EmissionLattice) -> Vec<f64> {
    let h = 1e-6;
    let base = lattice.log_probs().to_vec();
    let mut out = vec![0.0; base.len()];
    let make = |lp: Vec<f64>| {
        EmissionLattice::from_raw(lp, lattice.source_len(), lattice.upsample(), lattice.vocab_size(), lattice.variant())
            .unwrap()
    };
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fp = forward_nll(sample, &make(plus)).unwrap().neg_log_likelihood;
        let fm = forward_nll(sample, &make(minus)).unwrap().neg_log_likelihood;
        out[i] = (fp - fm) / (2.0 * h);
    }
    out
}

fn log_softmax(logits: &[f64], cols: usize) -> Vec<f64> {
    logits
        .chunks(cols)
        .flat_map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter().map(move |x| x - z)
        })
        .collect()
}

#[test]
fn gradients_match_finite_differences() {
    let mut r = rng(5);
    let mut checked = 0;
    while checked < 50 {
        let n = r.random_range(1..=4);
        let t = r.random_range(1..=3);
        let v = r.random_range(2..=4);
        let variant = if checked % 5 == 4 { Variant::Vanilla } else { Variant::CopyAware };
        let lattice = random_lattice(&mut r, n, t, v, variant);
        let sample = random_sample(&mut r, n, v, n * t);
        let res = forward_backward_grad(&sample, &lattice).unwrap();
        if !res.feasible {
            assert!(res.grad.iter().all(|g| *g == 0.0));
            continue;
        }
        let fd = fd_raw(&sample, &lattice);
        assert!(rel_err(&res.grad, &fd) <= 1e-4, "raw gradient mismatch for {sample:?}");

        // Through a log-softmax: perturb logits, renormalize.
        let cols = lattice.columns();
        let logits = lattice.log_probs().to_vec();
        let tied = forward_backward_grad_with(&sample, &lattice, GradOptions { softmax_tied: true }).unwrap();
        let h = 1e-6;
        let f = |lg: &[f64]| {
            let l = EmissionLattice::new(log_softmax(lg, cols), n, t, v, variant).unwrap();
            forward_nll(&sample, &l).unwrap().neg_log_likelihood
        };
        let fd_tied: Vec<f64> = (0..logits.len())
            .map(|i| {
                let mut p = logits.clone();
                p[i] += h;
                let mut m = logits.clone();
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect();
        assert!(rel_err(&tied.grad, &fd_tied) <= 1e-4, "tied gradient mismatch for {sample:?}");
        checked += 1;
    }
}

#[test]
fn gradient_rows_sum_to_minus_one() {
    let mut r = rng(8);
    for _ in 0..100 {
        let lattice = random_lattice(&mut r, 3, 2, 3, Variant::CopyAware);
        let sample = random_sample(&mut r, 3, 3, 4);
        let res = forward_backward_grad(&sample, &lattice).unwrap();
        if !res.feasible {
            continue;
        }
        for row in res.grad.chunks(lattice.columns()) {
            assert!((row.iter().sum::<f64>() + 1.0).abs() < 1e-9);
            assert!(row.iter().all(|g| *g <= 0.0));
        }
    }
}

#[test]
fn infeasible_target_has_infinite_loss() {
    let lattice = EmissionLattice::uniform(1, 2, 3, Variant::CopyAware);
    let sample = EditSample::new(vec![TokenId(0)], vec![TokenId(1), TokenId(1)]);
    let res = forward_backward_grad(&sample, &lattice).unwrap();
    assert!(!res.feasible);
    assert_eq!(res.neg_log_likelihood, f64::INFINITY);
    assert!(res.grad.iter().all(|g| *g == 0.0));
    assert!(viterbi_align(&sample, &lattice).is_err());
}

#[test]
fn shape_mismatch_is_rejected() {
    let lattice = EmissionLattice::uniform(2, 2, 3, Variant::CopyAware);
    let sample = EditSample::new(vec![TokenId(0)], vec![TokenId(0)]);
    assert!(forward_nll(&sample, &lattice).is_err());
}

fn time_grad(positions_per_source: usize, n: usize, m: usize) -> f64 {
    let mut r = rng(2);
    let v = 20;
    let lattice = random_lattice(&mut r, n, positions_per_source, v, Variant::CopyAware);
    let sample = random_sample(&mut r, n, v, 0);
    let target: Vec<TokenId> = (0..m).map(|i| TokenId((i % v) as u32)).collect();
    let sample = EditSample::new(sample.source, target);
    let mut best = f64::INFINITY;
    for _ in 0..7 {
        let start = Instant::now();
        for _ in 0..5 {
            std::hint::black_box(forward_backward_grad(&sample, &lattice).unwrap());
        }
        best = best.min(start.elapsed().as_secs_f64());
    }
    best
}

#[test]
fn runtime_scales_with_positions_times_target() {
    let base = time_grad(4, 40, 60);
    let more_positions = time_grad(4, 80, 60);
    let longer_target = time_grad(4, 40, 120);
    for ratio in [more_positions / base, longer_target / base] {
        assert!((1.3..3.2).contains(&ratio), "doubling one factor changed time by {ratio:.2}x");
    }
}
