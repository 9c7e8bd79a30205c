//! Throughput of matching, matching costs, inference and one training step
//! at the desk configuration.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shipseg_core::harness::{AugmentConfig, Sample, TrainConfig, Trainer};
use shipseg_core::loss::{cost_matrix, LossWeights};
use shipseg_core::matching::hungarian_match;
use shipseg_core::pipeline::Model;
use shipseg_core::synth::{generate_scene, SceneSpec};
use shipseg_core::{ModelConfig, Tensor};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-3.0..3.0))
}

fn matching(c: &mut Criterion) {
    let mut group = c.benchmark_group("hungarian");
    for (n, m) in [(20, 5), (100, 20), (100, 100)] {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let costs: Vec<f64> = (0..n * m).map(|_| rng.random()).collect();
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{n}x{m}")),
            &costs,
            |b, costs| b.iter(|| hungarian_match(black_box(costs), n, m)),
        );
    }
    group.finish();
}

fn costs(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (nq, p) = (20, 128 * 128);
    let class_logits = random(&[nq, 2], &mut rng);
    let mask_logits = random(&[nq, p], &mut rng);
    let targets: Vec<Tensor> = (0..6)
        .map(|k| {
            Tensor::from_fn(&[1, p], |i| {
                if (i / 128 + k * 13) % 40 < 6 {
                    1.0
                } else {
                    0.0
                }
            })
        })
        .collect();
    let w = LossWeights::default();
    c.bench_function("cost_matrix_20x6_128px", |b| {
        b.iter(|| {
            cost_matrix(
                black_box(&class_logits),
                black_box(&mask_logits),
                &targets,
                &w,
            )
        })
    });
}

fn scene() -> Sample {
    let scene = generate_scene(&SceneSpec {
        seed: 3,
        ..SceneSpec::default()
    })
    .unwrap();
    Sample {
        id: 1,
        image: scene.image.clone(),
        masks: scene.ground_truth().masks,
    }
}

fn inference(c: &mut Criterion) {
    let model = Model::new(&ModelConfig::desk()).unwrap();
    let store = model.init_params();
    let sample = scene();
    let mut group = c.benchmark_group("desk_model");
    group.sample_size(10);
    group.bench_function("predict_128px", |b| {
        b.iter(|| model.predict(&store, black_box(&sample.image)).unwrap())
    });
    let train = TrainConfig {
        batch_size: 1,
        augment: AugmentConfig::NONE,
        ..TrainConfig::paper()
    };
    let mut trainer = Trainer::new(Model::new(&ModelConfig::desk()).unwrap(), train, 0);
    group.bench_function("train_step_128px", |b| {
        b.iter(|| trainer.train_step(&[&sample]).unwrap())
    });
    group.finish();
}

criterion_group!(benches, matching, costs, inference);
criterion_main!(benches);
