//! Minimum-cost bipartite assignment.

use crate::tensor::Tensor;

/// Optimal assignment for an `n x m` cost matrix (row-major).
///
/// Returns `min(n, m)` `(row, col)` pairs sorted by row. Shortest augmenting
/// paths with row/column potentials, `O(min(n,m)^2 max(n,m))`.
pub fn hungarian_match(costs: &[f64], n: usize, m: usize) -> Vec<(usize, usize)> {
    assert_eq!(costs.len(), n * m, "cost matrix size");
    assert!(costs.iter().all(|c| c.is_finite()), "costs must be finite");
    if n == 0 || m == 0 {
        return Vec::new();
    }
    if n > m {
        let transposed: Vec<f64> = (0..m * n).map(|i| costs[(i % n) * m + i / n]).collect();
        let mut pairs: Vec<(usize, usize)> = hungarian_match(&transposed, m, n)
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect();
        pairs.sort_unstable();
        return pairs;
    }
    // rows 1..=n, columns 1..=m, index 0 is the virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = costs[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    pairs
}

/// [`hungarian_match`] on a `[n, m]` tensor.
pub fn hungarian_match_tensor(costs: &Tensor) -> Vec<(usize, usize)> {
    hungarian_match(costs.data(), costs.dim(0), costs.dim(1))
}

/// Sum of the assigned costs.
pub fn assignment_cost(costs: &[f64], m: usize, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, c)| costs[r * m + c]).sum()
}
