//! Exhaustive assignment oracle and the random-matrix comparison built on it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shipseg_core::matching::{assignment_cost, hungarian_match};

/// Minimum cost over every injective map from the smaller side to the larger.
pub fn brute_force(costs: &[f64], n: usize, m: usize) -> f64 {
    fn rec(
        costs: &[f64],
        n: usize,
        m: usize,
        row: usize,
        used: &mut Vec<bool>,
        acc: f64,
        best: &mut f64,
        transpose: bool,
    ) {
        let (rows, cols) = if transpose { (m, n) } else { (n, m) };
        if row == rows {
            *best = best.min(acc);
            return;
        }
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                let v = if transpose {
                    costs[c * m + row]
                } else {
                    costs[row * m + c]
                };
                rec(costs, n, m, row + 1, used, acc + v, best, transpose);
                used[c] = false;
            }
        }
    }
    let transpose = n > m;
    let mut best = f64::INFINITY;
    let cols = if transpose { n } else { m };
    rec(
        costs,
        n,
        m,
        0,
        &mut vec![false; cols],
        0.0,
        &mut best,
        transpose,
    );
    best
}

pub fn check_valid(pairs: &[(usize, usize)], n: usize, m: usize) {
    assert_eq!(pairs.len(), n.min(m));
    let mut rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let mut cols: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    rows.dedup();
    cols.sort();
    cols.dedup();
    assert_eq!(
        rows.len(),
        pairs.len(),
        "rows repeat or unsorted: {pairs:?}"
    );
    assert_eq!(cols.len(), pairs.len(), "cols repeat: {pairs:?}");
    assert!(pairs.iter().all(|&(r, c)| r < n && c < m));
    assert!(pairs.windows(2).all(|w| w[0].0 < w[1].0));
}

/// Solves `trials` random matrices with sides up to 6 and returns the
/// largest cost gap to exhaustive search. Every third matrix has small
/// integer costs so ties are common.
pub fn random_matrix_gap(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let n = rng.random_range(1..=6);
        let m = rng.random_range(1..=6);
        let costs: Vec<f64> = (0..n * m)
            .map(|_| {
                if trial % 3 == 0 {
                    rng.random_range(0..4) as f64
                } else {
                    rng.random_range(-5.0..5.0)
                }
            })
            .collect();
        let pairs = hungarian_match(&costs, n, m);
        check_valid(&pairs, n, m);
        let gap = (assignment_cost(&costs, m, &pairs) - brute_force(&costs, n, m)).abs();
        worst = worst.max(gap);
    }
    worst
}
