//! Behaviour of the deep-supervised set loss: sign, saturation and descent.

mod common;

use common::rand_tensor;
use proptest::prelude::*;
use shipseg_core::harness::{AugmentConfig, Sample, TrainConfig, Trainer};
use shipseg_core::loss::{layer_loss, total_loss, LossWeights};
use shipseg_core::pipeline::{LayerPrediction, Model};
use shipseg_core::synth::{generate_scene, SceneSpec};
use shipseg_core::{Graph, ModelConfig, Tensor};

proptest! {
    #[test]
    fn loss_is_non_negative(
        seed in 0u64..10_000,
        nq in 1usize..6,
        ngt in 0usize..4,
        magnitude in 0.1..30.0f64,
    ) {
        let p = 12;
        let g = Graph::new();
        let preds: Vec<LayerPrediction<'_>> = (0..3)
            .map(|l| LayerPrediction {
                class_logits: g.constant(rand_tensor(&[nq, 2], seed * 7 + l, magnitude)),
                mask_logits: g.constant(rand_tensor(&[nq, p], seed * 11 + l, magnitude)),
            })
            .collect();
        let targets: Vec<Tensor> = (0..ngt)
            .map(|k| rand_tensor(&[1, p], seed * 13 + k as u64, 1.0).map(|v| if v > 0.0 { 1.0 } else { 0.0 }))
            .collect();
        let (loss, report) = total_loss(&preds, &targets, &LossWeights::default());
        prop_assert!(loss.item() >= 0.0);
        prop_assert!(report.cls >= 0.0 && report.bce >= 0.0 && report.dice >= 0.0);
        prop_assert!((report.total - loss.item()).abs() < 1e-9);
    }
}

#[test]
fn saturated_correct_predictions_cost_almost_nothing() {
    // the dice smoothing term leaves 1 / (2|g| + 1), so ships need a few
    // hundred pixels for the residual to drop under 0.01
    let p = 1600;
    let targets: Vec<Tensor> = (0..2)
        .map(|k| Tensor::from_fn(&[1, p], |i| if i % 4 == k { 1.0 } else { 0.0 }))
        .collect();
    // queries 1 and 3 carry the two ships, the rest are confident background
    let mut cls = Tensor::zeros(&[5, 2]);
    let mut masks = Tensor::full(&[5, p], -20.0);
    for q in 0..5 {
        let ship = q == 1 || q == 3;
        cls.set(&[q, 0], if ship { 20.0 } else { -20.0 });
        cls.set(&[q, 1], if ship { -20.0 } else { 20.0 });
    }
    for (q, t) in [(1, &targets[0]), (3, &targets[1])] {
        for i in 0..p {
            masks.set(&[q, i], if t.data()[i] > 0.5 { 20.0 } else { -20.0 });
        }
    }
    let g = Graph::new();
    let (loss, _) = layer_loss(
        g.constant(cls),
        g.constant(masks),
        &targets,
        &LossWeights::default(),
    );
    assert!(loss.item() < 0.01, "{}", loss.item());
}

#[test]
fn no_ground_truth_leaves_only_classification() {
    let g = Graph::new();
    let cls = rand_tensor(&[4, 2], 3, 2.0);
    let (loss, report) = layer_loss(
        g.constant(cls),
        g.constant(rand_tensor(&[4, 9], 4, 2.0)),
        &[],
        &LossWeights::default(),
    );
    assert_eq!(report.bce, 0.0);
    assert_eq!(report.dice, 0.0);
    assert!((loss.item() - report.cls).abs() < 1e-12);
}

#[test]
fn loss_halves_within_fifty_steps_on_one_image() {
    let scene = generate_scene(&SceneSpec {
        image_size: 64,
        seed: 5,
        ..SceneSpec::default()
    })
    .unwrap();
    let sample = Sample {
        id: 1,
        image: scene.image.clone(),
        masks: scene.ground_truth().masks,
    };
    assert!(!sample.masks.is_empty());
    let cfg = ModelConfig {
        num_queries: 8,
        embed_dim: 32,
        backbone_width: 4,
        ffn_dim: 64,
        ..ModelConfig::desk()
    };
    let train = TrainConfig {
        batch_size: 1,
        initial_lr: 1e-3,
        lr_milestones: vec![],
        augment: AugmentConfig::NONE,
        ..TrainConfig::paper()
    };
    let mut trainer = Trainer::new(Model::new(&cfg).unwrap(), train, 0);
    let losses: Vec<f64> = (0..50)
        .map(|_| trainer.train_step(&[&sample]).unwrap().loss.total)
        .collect();
    assert!(losses.iter().all(|l| l.is_finite()));
    assert!(
        losses[49] < 0.5 * losses[0],
        "initial {} final {}",
        losses[0],
        losses[49]
    );
}
