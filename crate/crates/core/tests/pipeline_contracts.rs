//! Shape, determinism and loop-oracle checks of the segmentation pipeline.

mod common;

use std::collections::BTreeMap;
use std::rc::Rc;

use common::rand_tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shipseg_core::harness::{TrainConfig, Trainer};
use shipseg_core::nn::identity_kernel;
use shipseg_core::pipeline::{attention_mask, AttentionBlock, Heads, Model, PixelDecoder};
use shipseg_core::synth::{generate_scene, SceneSpec};
use shipseg_core::{Graph, ModelConfig, ParamStore, Session, Tensor};

fn small_config() -> ModelConfig {
    ModelConfig {
        num_queries: 6,
        embed_dim: 16,
        decoder_layers: 3,
        backbone_width: 4,
        heads: 2,
        ffn_dim: 32,
        ..ModelConfig::desk()
    }
}

#[test]
fn output_arity_and_shapes() {
    let cfg = ModelConfig::desk();
    let model = Model::new(&cfg).unwrap();
    let store = model.init_params();
    let image = rand_tensor(&[3, 256, 256], 1, 1.0).map(f64::abs);
    let g = Graph::new();
    let s = Session::new(&g, &store);
    let out = model.forward(&s, g.constant(image.clone())).unwrap();
    assert_eq!(out.predictions.len(), cfg.decoder_layers + 1);
    assert_eq!((out.mask_height, out.mask_width), (64, 64));
    for p in &out.predictions {
        assert_eq!(p.class_logits.shape(), vec![20, 2]);
        assert_eq!(p.mask_logits.shape(), vec![20, 64 * 64]);
    }
    let pred = model.predict(&store, &image).unwrap();
    assert_eq!(pred.candidates.len(), 20);
    for m in &pred.candidates.masks {
        assert_eq!((m.height, m.width), (256, 256));
    }
}

#[test]
fn forward_is_deterministic() {
    let model = Model::new(&small_config()).unwrap();
    let store = model.init_params();
    assert_eq!(store, model.init_params());
    let image = rand_tensor(&[3, 64, 64], 2, 1.0);
    let run = || {
        let g = Graph::new();
        let s = Session::new(&g, &store);
        let out = model.forward(&s, g.constant(image.clone())).unwrap();
        let v = out.last().mask_logits.value();
        (*v).clone()
    };
    assert_eq!(run().data(), run().data());
}

/// Nearest 2x upsample by index halving.
fn nearest_up(x: &Tensor, h: usize, w: usize) -> Tensor {
    let (c, ih, iw) = (x.dim(0), x.dim(1), x.dim(2));
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, r, col) = (i / (h * w), (i / w) % h, i % w);
        x.at(&[ch, r * ih / h, col * iw / w])
    })
}

#[test]
fn pixel_decoder_with_identity_convs_adds_nearest_upsampled_levels() {
    let d = 3;
    let pd = PixelDecoder::new("pd", d);
    let mut store = ParamStore::new();
    for c in pd.refine.iter().chain([&pd.a2, &pd.out]) {
        store.insert(c.weight_name(), identity_kernel(d, d, c.kernel));
        store.insert(c.bias_name(), Tensor::zeros(&[d]));
    }
    // non-negative inputs keep the ReLUs transparent
    let levels: Vec<Tensor> = [16, 8, 4, 2]
        .iter()
        .enumerate()
        .map(|(i, &n)| rand_tensor(&[d, n, n], 10 + i as u64, 1.0).map(f64::abs))
        .collect();
    let g = Graph::new();
    let s = Session::new(&g, &store);
    let vars: Vec<_> = levels.iter().map(|t| g.constant(t.clone())).collect();
    let out = pd.forward(&s, &vars);

    let e32 = levels[3].clone();
    let e16 = levels[2].zip_map(&nearest_up(&e32, 4, 4), |a, b| a + b);
    let e8 = levels[1].zip_map(&nearest_up(&e16, 8, 8), |a, b| a + b);
    let per_pixel = levels[0].zip_map(&nearest_up(&e8, 16, 16), |a, b| a + b);
    assert!(out.enhanced[2].value().max_abs_diff(&e32) < 1e-12);
    assert!(out.enhanced[1].value().max_abs_diff(&e16) < 1e-12);
    assert!(out.enhanced[0].value().max_abs_diff(&e8) < 1e-12);
    assert!(out.a2.value().max_abs_diff(&levels[0]) < 1e-12);
    assert!(out.per_pixel.value().max_abs_diff(&per_pixel) < 1e-12);
}

#[test]
fn zero_inputs_and_zero_convs_give_zero_outputs() {
    let pd = PixelDecoder::new("pd", 4);
    let mut store = ParamStore::new();
    for c in pd.refine.iter().chain([&pd.a2, &pd.out]) {
        store.insert(c.weight_name(), Tensor::zeros(&[4, 4, c.kernel, c.kernel]));
        store.insert(c.bias_name(), Tensor::zeros(&[4]));
    }
    let g = Graph::new();
    let s = Session::new(&g, &store);
    let vars: Vec<_> = [8, 4, 2, 1]
        .iter()
        .map(|&n| g.constant(Tensor::zeros(&[4, n, n])))
        .collect();
    let out = pd.forward(&s, &vars);
    assert_eq!(out.per_pixel.shape(), vec![4, 8, 8]);
    assert!(out.per_pixel.value().data().iter().all(|&v| v == 0.0));
}

fn linear_rows(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, i_dim, o_dim) = (x.dim(0), x.dim(1), w.dim(0));
    Tensor::from_fn(&[n, o_dim], |idx| {
        let (r, o) = (idx / o_dim, idx % o_dim);
        b.data()[o]
            + (0..i_dim)
                .map(|j| w.at(&[o, j]) * x.at(&[r, j]))
                .sum::<f64>()
    })
}

/// Straight-line masked multi-head attention through the block's projections.
fn attention_oracle(
    block: &AttentionBlock,
    store: &ParamStore,
    q: &Tensor,
    kv: &Tensor,
    allowed: &[bool],
) -> Tensor {
    let p = |l: &shipseg_core::nn::Linear| {
        (
            store.get(&l.weight_name()).unwrap().clone(),
            store.get(&l.bias_name()).unwrap().clone(),
        )
    };
    let (wq, bq) = p(&block.q);
    let (wk, bk) = p(&block.k);
    let (wv, bv) = p(&block.v);
    let (wo, bo) = p(&block.o);
    let (qq, kk, vv) = (
        linear_rows(q, &wq, &bq),
        linear_rows(kv, &wk, &bk),
        linear_rows(kv, &wv, &bv),
    );
    let (nq, d, l) = (q.dim(0), q.dim(1), kv.dim(0));
    let dh = d / block.heads;
    let mut mixed = Tensor::zeros(&[nq, d]);
    for h in 0..block.heads {
        for i in 0..nq {
            let row = &allowed[i * l..(i + 1) * l];
            let any = row.iter().any(|&a| a);
            let scores: Vec<f64> = (0..l)
                .map(|j| {
                    (0..dh)
                        .map(|c| qq.at(&[i, h * dh + c]) * kk.at(&[j, h * dh + c]))
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let m = (0..l)
                .filter(|&j| !any || row[j])
                .map(|j| scores[j])
                .fold(f64::MIN, f64::max);
            let e: Vec<f64> = (0..l)
                .map(|j| {
                    if !any || row[j] {
                        (scores[j] - m).exp()
                    } else {
                        0.0
                    }
                })
                .collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                let v: f64 = (0..l).map(|j| e[j] / z * vv.at(&[j, h * dh + c])).sum();
                mixed.set(&[i, h * dh + c], v);
            }
        }
    }
    linear_rows(&mixed, &wo, &bo)
}

fn attention_fixture() -> (AttentionBlock, ParamStore, Tensor, Tensor) {
    let block = AttentionBlock::new("attn", 8, 2);
    let mut store = ParamStore::new();
    block.init(&mut store, &mut ChaCha8Rng::seed_from_u64(5));
    for (i, l) in [&block.q, &block.k, &block.v, &block.o]
        .into_iter()
        .enumerate()
    {
        store.insert(l.bias_name(), rand_tensor(&[8], 60 + i as u64, 0.2));
    }
    (
        block,
        store,
        rand_tensor(&[4, 8], 61, 1.0),
        rand_tensor(&[9, 8], 62, 1.0),
    )
}

fn run_attention(
    block: &AttentionBlock,
    store: &ParamStore,
    q: &Tensor,
    kv: &Tensor,
    allowed: Option<Vec<bool>>,
) -> Tensor {
    let g = Graph::new();
    let s = Session::new(&g, store);
    let kv = g.constant(kv.clone());
    let out = block.forward(&s, g.constant(q.clone()), kv, kv, allowed.map(Rc::new));
    (*out.value()).clone()
}

#[test]
fn masked_attention_matches_loop_oracle() {
    let (block, store, q, kv) = attention_fixture();
    let mut allowed: Vec<bool> = (0..36).map(|i| (i * 7) % 3 != 0).collect();
    // query 2 sees nothing and must fall back to every pixel
    for a in &mut allowed[18..27] {
        *a = false;
    }
    let got = run_attention(&block, &store, &q, &kv, Some(allowed.clone()));
    assert!(got.all_finite());
    assert!(got.max_abs_diff(&attention_oracle(&block, &store, &q, &kv, &allowed)) < 1e-10);
}

#[test]
fn all_foreground_mask_equals_unmasked_attention() {
    let (block, store, q, kv) = attention_fixture();
    let full = run_attention(&block, &store, &q, &kv, Some(vec![true; 36]));
    let plain = run_attention(&block, &store, &q, &kv, None);
    let empty = run_attention(&block, &store, &q, &kv, Some(vec![false; 36]));
    assert!(full.max_abs_diff(&plain) < 1e-12);
    assert!(empty.max_abs_diff(&plain) < 1e-12);
    assert!(plain.max_abs_diff(&attention_oracle(&block, &store, &q, &kv, &[true; 36])) < 1e-10);
}

#[test]
fn zero_mask_logits_threshold_to_empty_attention_masks() {
    let allowed = attention_mask(&Tensor::zeros(&[3, 16]), 4, 4, 2, 2);
    assert_eq!(allowed.len(), 12);
    assert!(allowed.iter().all(|&a| !a));
}

#[test]
fn heads_match_dot_product_loop_oracle() {
    let d = 6;
    let heads = Heads::new("heads", d);
    let mut store = ParamStore::new();
    heads.init(&mut store, &mut ChaCha8Rng::seed_from_u64(8));
    let q = rand_tensor(&[3, d], 70, 1.0);
    let per_pixel = rand_tensor(&[d, 16], 71, 1.0);
    let g = Graph::new();
    let s = Session::new(&g, &store);
    let qv = g.constant(q.clone());
    let out = heads.forward(&s, qv, g.constant(per_pixel.clone()));
    let embed = heads
        .mask_embed
        .forward(&s, heads.norm.forward(&s, qv))
        .value();
    let logits = out.mask_logits.value();
    for k in 0..3 {
        for p in 0..16 {
            let expected: f64 = (0..d)
                .map(|c| embed.at(&[k, c]) * per_pixel.at(&[c, p]))
                .sum();
            assert!((logits.at(&[k, p]) - expected).abs() < 1e-10);
        }
    }
}

#[test]
fn one_hot_pixel_embedding_selects_query_coordinate() {
    let d = 4;
    let heads = Heads::new("heads", d);
    let mut store = ParamStore::new();
    heads.init(&mut store, &mut ChaCha8Rng::seed_from_u64(9));
    let g = Graph::new();
    let s = Session::new(&g, &store);
    let qv = g.constant(rand_tensor(&[2, d], 80, 1.0));
    let mut per_pixel = Tensor::zeros(&[d, 5]);
    for p in 0..5 {
        per_pixel.set(&[2, p], 1.0);
    }
    let out = heads.forward(&s, qv, g.constant(per_pixel));
    let embed = heads
        .mask_embed
        .forward(&s, heads.norm.forward(&s, qv))
        .value();
    for k in 0..2 {
        for p in 0..5 {
            assert!((out.mask_logits.value().at(&[k, p]) - embed.at(&[k, 2])).abs() < 1e-12);
        }
    }
}

#[test]
fn every_parameter_group_receives_gradient() {
    let cfg = ModelConfig {
        use_query_generator: true,
        use_orientation: true,
        ..small_config()
    };
    let scene = generate_scene(&SceneSpec {
        image_size: 64,
        seed: 3,
        ..SceneSpec::default()
    })
    .unwrap();
    let trainer = Trainer::new(Model::new(&cfg).unwrap(), TrainConfig::paper(), 0);
    let batch = vec![(scene.image.clone(), scene.ground_truth().masks)];
    assert!(!batch[0].1.is_empty());
    let (_, grads) = trainer.batch_gradients(&batch).unwrap();
    let mut groups: BTreeMap<String, f64> = BTreeMap::new();
    for (name, g) in &grads {
        let group = name.split('.').next().unwrap().to_string();
        *groups.entry(group).or_default() += g.sq_norm();
    }
    for group in [
        "backbone",
        "input_proj",
        "query_gen",
        "orientation",
        "pixel_decoder",
        "decoder",
        "heads",
        "query",
    ] {
        let norm = groups.get(group).copied().unwrap_or(0.0);
        assert!(norm > 0.0, "{group} has zero gradient");
    }
}
