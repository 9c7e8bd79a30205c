//! Finite-difference cases for whole modules: query generation with its
//! input projection, the orientation embedding, one decoder layer, the
//! prediction heads and the deep-supervised loss.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shipseg_core::loss::{total_loss, LossWeights};
use shipseg_core::orientation::OrientationModule;
use shipseg_core::pipeline::{upsample_mask_logits, DecoderLayer, Heads, LayerPrediction};
use shipseg_core::query_gen::{ChannelProjection, QueryGenerator};
use shipseg_core::{ParamStore, Session, Tensor, Var};

use super::{check_gradients, rand_tensor, GradReport};

pub const TOL: f64 = 1e-4;
pub const MAX_PARAMS: usize = 10_000;

fn probe<'g>(s: &Session<'g>, y: Var<'g>) -> Var<'g> {
    let w = s.constant(rand_tensor(&y.shape(), 77, 1.0));
    y.mul(w).sum()
}

/// Every case with its label.
pub fn all() -> Vec<(&'static str, GradReport)> {
    vec![
        ("query generator", query_generator_with_projection()),
        (
            "orientation embedding",
            orientation_embedding_full_chain(true),
        ),
        (
            "orientation embedding, no activation",
            orientation_embedding_full_chain(false),
        ),
        ("decoder layer", decoder_layer_with_fixed_attention_mask()),
        ("prediction heads", prediction_heads()),
        ("deep-supervised loss", deep_supervised_loss()),
        (
            "loss through mask upsampling",
            loss_through_mask_upsampling(),
        ),
    ]
}

/// Within tolerance and on an instance small enough to check exhaustively.
pub fn passes(r: &GradReport) -> bool {
    r.checked > 0 && r.checked <= MAX_PARAMS && r.max_rel <= TOL
}

pub fn query_generator_with_projection() -> GradReport {
    let channels = [3, 4, 5, 6];
    let sizes = [6, 4, 3, 2];
    let (d, nq) = (8, 5);
    let proj = ChannelProjection::new("proj", channels, d);
    let qg = QueryGenerator::with_dims("qg", d, nq, 0.7);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut st = ParamStore::new();
    proj.init(&mut st, &mut rng);
    qg.init(&mut st, &mut rng);
    // larger prototypes and scale embeddings than the init so the cosine
    // and softmax terms are far from degenerate
    st.insert(qg.prototypes_name(), rand_tensor(&[nq, d], 5, 1.0));
    st.insert(qg.scale_embed_name(), rand_tensor(&[4, d], 6, 0.5));
    for i in 0..4 {
        st.insert(
            format!("x.{i}"),
            rand_tensor(&[channels[i], sizes[i], sizes[i]], 10 + i as u64, 1.0),
        );
    }
    check_gradients(
        &st,
        |_| true,
        |s| {
            let xs: Vec<Var> = (0..4).map(|i| s.param(&format!("x.{i}"))).collect();
            let levels = proj.forward(s, &xs);
            probe(s, qg.forward(s, &levels).queries)
        },
    )
}

pub fn orientation_embedding_full_chain(activation: bool) -> GradReport {
    let m = OrientationModule::new("oa", 4, 4, activation).unwrap();
    let mut st = ParamStore::new();
    m.init(&mut st, &mut ChaCha8Rng::seed_from_u64(2));
    st.insert("x", rand_tensor(&[4, 6, 6], 3, 1.0));
    check_gradients(
        &st,
        |_| true,
        |s| {
            let out = m.forward(s, s.param("x"));
            probe(s, out.fused)
        },
    )
}

pub fn decoder_layer_with_fixed_attention_mask() -> GradReport {
    let (d, nq, l) = (8, 4, 10);
    let layer = DecoderLayer::new("dec", d, 2, 16);
    let mut st = ParamStore::new();
    layer.init(&mut st, &mut ChaCha8Rng::seed_from_u64(4));
    st.insert("q", rand_tensor(&[nq, d], 1, 1.0));
    st.insert("qpos", rand_tensor(&[nq, d], 2, 0.5));
    st.insert("pix", rand_tensor(&[l, d], 3, 1.0));
    st.insert("ppos", rand_tensor(&[l, d], 4, 0.5));
    // one fully masked row exercises the fallback to unmasked attention
    let allowed: Vec<bool> = (0..nq * l)
        .map(|i| i / l != 2 && (i * 7) % 3 != 0)
        .collect();
    let allowed = Rc::new(allowed);
    check_gradients(
        &st,
        |_| true,
        |s| {
            let out = layer.forward(
                s,
                s.param("q"),
                s.param("qpos"),
                s.param("pix"),
                s.param("ppos"),
                Some(allowed.clone()),
            );
            probe(s, out)
        },
    )
}

pub fn prediction_heads() -> GradReport {
    let (d, nq, p) = (8, 4, 12);
    let heads = Heads::new("heads", d);
    let mut st = ParamStore::new();
    heads.init(&mut st, &mut ChaCha8Rng::seed_from_u64(5));
    st.insert("q", rand_tensor(&[nq, d], 1, 1.0));
    st.insert("pp", rand_tensor(&[d, p], 2, 1.0));
    check_gradients(
        &st,
        |_| true,
        |s| {
            let h = heads.forward(s, s.param("q"), s.param("pp"));
            probe(s, h.class_logits).add(probe(s, h.mask_logits))
        },
    )
}

fn loss_targets(h: usize, w: usize) -> Vec<Tensor> {
    let a = Tensor::from_fn(&[1, h * w], |i| {
        if (i / w) < 2 && (i % w) < 3 {
            1.0
        } else {
            0.0
        }
    });
    let b = Tensor::from_fn(&[1, h * w], |i| {
        if (i / w) >= 3 && (i % w) >= 2 {
            1.0
        } else {
            0.0
        }
    });
    vec![a, b]
}

pub fn deep_supervised_loss() -> GradReport {
    let (nq, h, w) = (4, 5, 5);
    let mut st = ParamStore::new();
    for l in 0..3 {
        st.insert(format!("cls.{l}"), rand_tensor(&[nq, 2], 20 + l, 2.0));
        st.insert(format!("mask.{l}"), rand_tensor(&[nq, h * w], 30 + l, 3.0));
    }
    let targets = loss_targets(h, w);
    check_gradients(
        &st,
        |_| true,
        |s| {
            let preds: Vec<LayerPrediction> = (0..3)
                .map(|l| LayerPrediction {
                    class_logits: s.param(&format!("cls.{l}")),
                    mask_logits: s.param(&format!("mask.{l}")),
                })
                .collect();
            total_loss(&preds, &targets, &LossWeights::default()).0
        },
    )
}

pub fn loss_through_mask_upsampling() -> GradReport {
    let (nq, mh, mw, h, w) = (3, 3, 3, 6, 6);
    let mut st = ParamStore::new();
    st.insert("cls", rand_tensor(&[nq, 2], 40, 2.0));
    st.insert("mask", rand_tensor(&[nq, mh * mw], 41, 3.0));
    let targets = loss_targets(h, w);
    check_gradients(
        &st,
        |_| true,
        |s| {
            let preds = [LayerPrediction {
                class_logits: s.param("cls"),
                mask_logits: upsample_mask_logits(s.param("mask"), (mh, mw), (h, w)),
            }];
            total_loss(&preds, &targets, &LossWeights::default()).0
        },
    )
}
