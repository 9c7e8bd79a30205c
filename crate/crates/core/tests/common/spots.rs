//! Closed-form spot checks of the orientation embedding, shared by the
//! focused test target and the acceptance run. Each returns the largest
//! deviation from the expected values.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shipseg_core::orientation::{
    build_rotation_grid, fuse_with_logits, grid_sample, polar_embedding, OrientationModule,
};
use shipseg_core::{FeatureMap, ParamStore};

use super::orientation_oracle::rotate_by_index;
use super::rand_tensor;

/// Corner radius 1, `θ_norm(1, 1) = 0.625`, center `(0, 0.5)` and the
/// negative x axis at `θ_norm = 1`, on a 5x5 field.
pub fn polar_field_error() -> f64 {
    let f = polar_embedding(5, 5);
    let mut err: f64 = 0.0;
    for (r, c) in [(0, 0), (0, 4), (4, 0), (4, 4)] {
        err = err.max((f.at(&[0, r, c]) - 1.0).abs());
    }
    // lattice (1, 1) is the bottom-right corner
    err = err.max((f.at(&[1, 4, 4]) - 0.625).abs());
    err = err.max(f.at(&[0, 2, 2]).abs());
    err = err.max((f.at(&[1, 2, 2]) - 0.5).abs());
    err = err.max((f.at(&[1, 2, 0]) - 1.0).abs());
    err
}

/// Rotations by multiples of π/2 against index arithmetic on odd squares.
pub fn axis_rotation_error() -> f64 {
    let mut err: f64 = 0.0;
    for (k, n) in [3usize, 5, 7, 9].into_iter().enumerate() {
        let x = rand_tensor(&[2, n, n], 40 + k as u64, 1.0);
        let map = FeatureMap::new(x.clone(), 1).unwrap();
        for turns in 0..4 {
            let theta = turns as f64 * PI / 2.0;
            let got = grid_sample(&map, &build_rotation_grid(theta, n, n), n, n).data;
            err = err.max(got.max_abs_diff(&rotate_by_index(&x, turns)));
        }
    }
    err
}

/// Orientation block with four angles and randomized biases.
pub fn random_module(channels: usize, seed: u64) -> (OrientationModule, ParamStore) {
    let m = OrientationModule::new("o", channels, 4, true).unwrap();
    let mut store = ParamStore::new();
    m.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
    for name in [m.polar.bias_name(), m.gate.bias_name()] {
        let n = store.get(&name).unwrap().numel();
        store.insert(name, rand_tensor(&[n], seed + 1, 0.5));
    }
    (m, store)
}

/// `|W + (1 - W) - 1|` over the gate of a random module.
pub fn gate_complement_error() -> f64 {
    let (m, store) = random_module(8, 3);
    let gate = m.run(&store, &rand_tensor(&[8, 6, 6], 4, 2.0)).gate;
    let plane = gate.dim(1) * gate.dim(2);
    (0..plane)
        .map(|i| (gate.data()[i] + gate.data()[plane + i] - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Logit gaps of ±100 against the unblended inputs.
pub fn saturation_error() -> f64 {
    let orient = rand_tensor(&[8, 5, 5], 7, 3.0);
    let polar = rand_tensor(&[8, 5, 5], 8, 3.0);
    let mut err: f64 = 0.0;
    for (gap, expected) in [(100.0, &orient), (-100.0, &polar)] {
        let mut logits = rand_tensor(&[2, 5, 5], 9, 1.0);
        for i in 0..25 {
            logits.data_mut()[i] = logits.data()[25 + i] + gap;
        }
        let (fused, _) = fuse_with_logits(&orient, &polar, &logits);
        err = err.max(fused.max_abs_diff(expected));
    }
    err
}
