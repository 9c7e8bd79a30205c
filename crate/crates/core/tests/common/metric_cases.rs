//! Hand-computed AP fixtures, a noisy synthetic evaluation set and the
//! comparison against the brute-force evaluator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shipseg_core::metrics::{coco_summary, AreaBuckets, EvalReport};
use shipseg_core::synth::{generate_scene, SceneSpec};
use shipseg_core::{InstanceSet, Mask};

use super::eval_oracle::{oracle_summary, OracleImage};

pub fn block(h: usize, w: usize, y0: usize, x0: usize, bh: usize, bw: usize) -> Mask {
    Mask::from_fn(h, w, |y, x| {
        (y0..y0 + bh).contains(&y) && (x0..x0 + bw).contains(&x)
    })
}

pub fn as_array(r: &EvalReport) -> [Option<f64>; 6] {
    [r.ap, r.ap50, r.ap75, r.ap_small, r.ap_medium, r.ap_large]
}

pub fn to_oracle(images: &[(InstanceSet, InstanceSet)]) -> Vec<OracleImage> {
    images
        .iter()
        .map(|(p, g)| OracleImage {
            gts: g.masks.clone(),
            dts: p
                .masks
                .iter()
                .cloned()
                .zip(p.scores.clone().unwrap())
                .collect(),
        })
        .collect()
}

/// Largest distance between two metric rows, or `None` when a field is
/// defined in one and not the other.
pub fn max_gap(a: [Option<f64>; 6], b: [Option<f64>; 6]) -> Option<f64> {
    a.iter()
        .zip(&b)
        .try_fold(0.0f64, |acc, (x, y)| match (x, y) {
            (Some(x), Some(y)) => Some(acc.max((x - y).abs())),
            (None, None) => Some(acc),
            _ => None,
        })
}

/// Mask AP of the three hand-computed cases: one exact detection, only
/// false positives, and a single detection at IoU 3/5.
pub fn hand_fixtures() -> [(f64, f64); 3] {
    let ap = |p: InstanceSet, g: InstanceSet| {
        coco_summary(&[(p, g)], AreaBuckets::NARROW)
            .unwrap()
            .ap
            .unwrap()
    };
    let exact = InstanceSet::ground_truth(vec![block(16, 16, 2, 2, 4, 5)]);
    let perfect = ap(
        InstanceSet::predictions(exact.masks.clone(), vec![0.7]),
        exact,
    );
    let missed = ap(
        InstanceSet::predictions(
            vec![block(16, 16, 8, 8, 3, 3), block(16, 16, 12, 0, 2, 2)],
            vec![0.9, 0.5],
        ),
        InstanceSet::ground_truth(vec![block(16, 16, 0, 0, 3, 3)]),
    );
    // gt 5 px, prediction covers 3 of them and nothing else
    let partial = ap(
        InstanceSet::predictions(vec![block(8, 8, 1, 1, 1, 3)], vec![0.9]),
        InstanceSet::ground_truth(vec![block(8, 8, 1, 1, 1, 5)]),
    );
    [(perfect, 1.0), (missed, 0.0), (partial, 0.3)]
}

pub fn jitter(m: &Mask, rng: &mut ChaCha8Rng) -> Mask {
    let (dy, dx) = (rng.random_range(-1i64..=1), rng.random_range(-1i64..=1));
    Mask::from_fn(m.height, m.width, |y, x| {
        let (sy, sx) = (y as i64 - dy, x as i64 - dx);
        sy >= 0
            && sx >= 0
            && (sy as usize) < m.height
            && (sx as usize) < m.width
            && m.get(sy as usize, sx as usize)
    })
}

/// Synthetic ground truth with noisy detections: shifted copies, misses,
/// duplicates and spurious blobs.
pub fn synthetic_eval_set(n: usize, seed: u64) -> Vec<(InstanceSet, InstanceSet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let spec = SceneSpec {
                seed: seed + i as u64,
                image_size: 256,
                length: [8.0, 220.0],
                ship_count: [0, 6],
                shoreline: i % 3 == 0,
                ..SceneSpec::default()
            };
            let scene = generate_scene(&spec).unwrap();
            let gt = scene.ground_truth();
            let mut masks = Vec::new();
            let mut scores = Vec::new();
            for m in &gt.masks {
                if rng.random::<f64>() < 0.15 {
                    continue;
                }
                masks.push(jitter(m, &mut rng));
                scores.push((rng.random_range(0..20) as f64) / 20.0);
                if rng.random::<f64>() < 0.2 {
                    masks.push(jitter(m, &mut rng));
                    scores.push(rng.random::<f64>());
                }
            }
            for _ in 0..rng.random_range(0..3) {
                let (y, x) = (rng.random_range(0..220), rng.random_range(0..220));
                let (h, w) = (rng.random_range(2..28), rng.random_range(2..28));
                masks.push(block(256, 256, y, x, h, w));
                scores.push(rng.random::<f64>());
            }
            (InstanceSet::predictions(masks, scores), gt)
        })
        .collect()
}

/// Largest field gap between the evaluator and the oracle on `images`.
pub fn oracle_gap(images: &[(InstanceSet, InstanceSet)], buckets: AreaBuckets) -> Option<f64> {
    let r = coco_summary(images, buckets).unwrap();
    max_gap(
        as_array(&r),
        oracle_summary(&to_oracle(images), buckets.small, buckets.large),
    )
}
