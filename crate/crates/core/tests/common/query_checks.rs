//! Algebraic properties of the query generator, as reusable checks.

use std::f64::consts::LN_2;

use shipseg_core::query_gen::{
    fuse_scales_values, generate_queries_values, prototype_similarity_values,
    scale_attention_values, softmax_weights_values,
};
use shipseg_core::Tensor;

use super::rand_tensor;

/// Logit spread below which every softmax weight is representable strictly
/// inside `(0, 1)`: `e^-30` is well above the f64 resolution near one.
pub const STRICT_SPREAD: f64 = 30.0;

/// Largest violation of `Σw = 1` and `w_i ∈ [0, 1]` for scale attention,
/// and of `w_i ∈ (0, 1)` when the score spread is below [`STRICT_SPREAD`].
pub fn simplex_violation(stacked: &Tensor, score_weight: &Tensor, bias: f64) -> f64 {
    let w = scale_attention_values(stacked, score_weight, bias);
    let d = stacked.dim(1);
    let logits: Vec<f64> = (0..stacked.dim(0))
        .map(|i| {
            (0..d)
                .map(|j| stacked.at(&[i, j]) * score_weight.at(&[0, j]))
                .sum()
        })
        .collect();
    let spread = logits.iter().cloned().fold(f64::MIN, f64::max)
        - logits.iter().cloned().fold(f64::MAX, f64::min);
    let mut err = (w.iter().sum::<f64>() - 1.0).abs();
    for &v in &w {
        let inside = if spread < STRICT_SPREAD {
            v > 0.0 && v < 1.0
        } else {
            (0.0..=1.0).contains(&v)
        };
        if !inside {
            err = err.max(1.0);
        }
    }
    err
}

/// Amount by which any cosine similarity leaves `[-1, 1]`.
pub fn cosine_range_violation(fused: &[f64], prototypes: &Tensor) -> f64 {
    prototype_similarity_values(fused, prototypes)
        .iter()
        .map(|s| (s.abs() - 1.0).max(0.0))
        .fold(0.0, f64::max)
}

/// `|S(αx, P) - S(x, P)|` for `α > 0`.
pub fn scale_invariance_error(fused: &[f64], prototypes: &Tensor, alpha: f64) -> f64 {
    let a = prototype_similarity_values(fused, prototypes);
    let scaled: Vec<f64> = fused.iter().map(|v| v * alpha).collect();
    let b = prototype_similarity_values(&scaled, prototypes);
    a.iter()
        .zip(&b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn plain_linear(p: &Tensor, weight: &Tensor, bias: &[f64]) -> Tensor {
    let (n, d) = (p.dim(0), p.dim(1));
    Tensor::from_fn(&[n, d], |i| {
        let (k, o) = (i / d, i % d);
        bias[o]
            + (0..d)
                .map(|j| weight.at(&[o, j]) * p.at(&[k, j]))
                .sum::<f64>()
    })
}

/// The closed-form examples of every stage plus randomized simplex, cosine
/// range, scale invariance and no-op identities. Returns the largest error.
pub fn query_algebra_error() -> f64 {
    let d = 16;
    let nq = 5;
    let mut err: f64 = 0.0;

    // identical rows give uniform weights; logits (ln 2, 0, 0, 0) give 2/5
    let row = rand_tensor(&[d], 1, 1.0);
    let rows: Vec<&Tensor> = vec![&row; 4];
    let stacked = Tensor::concat0(&rows).reshape(&[4, d]);
    let w = scale_attention_values(&stacked, &rand_tensor(&[1, d], 2, 1.0), 0.3);
    err = err.max(w.iter().map(|v| (v - 0.25).abs()).fold(0.0, f64::max));
    let w = softmax_weights_values(&[LN_2, 0.0, 0.0, 0.0]);
    for (v, e) in w.iter().zip([0.4, 0.2, 0.2, 0.2]) {
        err = err.max((v - e).abs());
    }

    for seed in 0..50u64 {
        let scale = [1e-3, 1.0, 30.0][seed as usize % 3];
        let stacked = rand_tensor(&[4, d], 100 + seed, scale);
        let score = rand_tensor(&[1, d], 200 + seed, 1.0);
        err = err.max(simplex_violation(&stacked, &score, 0.1));

        // fusion against an accumulation loop
        let w = scale_attention_values(&stacked, &score, 0.0);
        let fused = fuse_scales_values(&w, &stacked);
        for c in 0..d {
            let expected: f64 = (0..4).map(|i| w[i] * stacked.at(&[i, c])).sum();
            err = err.max((fused[c] - expected).abs());
        }

        let prototypes = rand_tensor(&[nq, d], 300 + seed, 1.0);
        err = err.max(cosine_range_violation(&fused, &prototypes));
        err = err.max(scale_invariance_error(
            &fused,
            &prototypes,
            0.5 + seed as f64,
        ));

        // eta = 0 with an identity linear returns the prototypes
        let eye = Tensor::eye(d);
        let zero_bias = vec![0.0; d];
        let sim = prototype_similarity_values(&fused, &prototypes);
        let q = generate_queries_values(&prototypes, &sim, 0.0, &eye, &zero_bias);
        err = err.max(q.queries.max_abs_diff(&prototypes));

        // S = 0 reduces to the plain linear layer
        let weight = rand_tensor(&[d, d], 400 + seed, 0.5);
        let bias = rand_tensor(&[d], 500 + seed, 0.5).into_data();
        let q = generate_queries_values(&prototypes, &vec![0.0; nq], 0.1, &weight, &bias);
        err = err.max(
            q.queries
                .max_abs_diff(&plain_linear(&prototypes, &weight, &bias)),
        );

        // identity linear with S_k = 1 adds eta to every coordinate of row k
        let q = generate_queries_values(&prototypes, &vec![1.0; nq], 0.1, &eye, &zero_bias);
        err = err.max(q.queries.max_abs_diff(&prototypes.map(|v| v + 0.1)));
    }
    err
}
