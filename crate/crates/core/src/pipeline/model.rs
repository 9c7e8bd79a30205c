//! End-to-end model: backbone, projection, query generation, orientation
//! embedding, pixel decoder, transformer decoder and heads.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::backbone::Backbone;
use super::decoder::{attention_mask, sine_position_encoding, DecoderLayer, Heads};
use super::pixel_decoder::PixelDecoder;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::ops::logistic;
use crate::orientation::OrientationModule;
use crate::params::{init, ParamStore, Session};
use crate::query_gen::{ChannelProjection, QueryGenerator, PROTOTYPE_STD};
use crate::resample::bilinear_plan;
use crate::tensor::Tensor;
use crate::types::{InstanceSet, Mask, ModelConfig};

/// Pixel-decoder level visited by decoder layer `l`: strides 32, 16, 8, 32, ...
/// as indices into `[stride 8, stride 16, stride 32]`.
pub fn level_for_layer(l: usize) -> usize {
    2 - l % 3
}

/// Predictions emitted before the first decoder layer and after each one.
pub struct LayerPrediction<'g> {
    pub class_logits: Var<'g>,
    pub mask_logits: Var<'g>,
}

pub struct ModelOutput<'g> {
    pub predictions: Vec<LayerPrediction<'g>>,
    /// Mask resolution (stride 4).
    pub mask_height: usize,
    pub mask_width: usize,
    /// Projected C2 before and after the orientation embedding.
    pub c2_projected: Var<'g>,
    pub c2_enhanced: Var<'g>,
    pub initial_queries: Var<'g>,
}

impl<'g> ModelOutput<'g> {
    pub fn last(&self) -> &LayerPrediction<'g> {
        self.predictions.last().expect("at least one prediction")
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub projection: ChannelProjection,
    pub query_gen: Option<QueryGenerator>,
    pub orientation: Vec<OrientationModule>,
    pub pixel_decoder: PixelDecoder,
    pub layers: Vec<DecoderLayer>,
    pub heads: Heads,
}

pub const QUERY_FEAT: &str = "query.feat";
pub const QUERY_POS: &str = "query.pos";
pub const LEVEL_EMBED: &str = "decoder.level_embed";

impl Model {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let orientation = if config.use_orientation {
            (0..3)
                .map(|i| {
                    OrientationModule::new(
                        &format!("orientation.{i}"),
                        d,
                        config.num_angles,
                        config.orientation_activation,
                    )
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            config: config.clone(),
            backbone: Backbone::new("backbone", config.backbone_width),
            projection: ChannelProjection::new("input_proj", config.pyramid_channels(), d),
            query_gen: config
                .use_query_generator
                .then(|| QueryGenerator::new("query_gen", config)),
            orientation,
            pixel_decoder: PixelDecoder::new("pixel_decoder", d),
            layers: (0..config.decoder_layers)
                .map(|i| {
                    DecoderLayer::new(
                        &format!("decoder.layers.{i}"),
                        d,
                        config.heads,
                        config.ffn_dim,
                    )
                })
                .collect(),
            heads: Heads::new("heads", d),
        })
    }

    /// Fresh parameters drawn from `ChaCha8Rng::seed_from_u64(config.seed)`.
    pub fn init_params(&self) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut store = ParamStore::new();
        let d = self.config.embed_dim;
        let nq = self.config.num_queries;
        self.backbone.init(&mut store, &mut rng);
        self.projection.init(&mut store, &mut rng);
        match &self.query_gen {
            Some(qg) => qg.init(&mut store, &mut rng),
            None => store.insert(QUERY_FEAT, init::normal(&[nq, d], PROTOTYPE_STD, &mut rng)),
        }
        store.insert(QUERY_POS, Tensor::zeros(&[nq, d]));
        for o in &self.orientation {
            o.init(&mut store, &mut rng);
        }
        self.pixel_decoder.init(&mut store, &mut rng);
        store.insert(LEVEL_EMBED, init::normal(&[3, d], PROTOTYPE_STD, &mut rng));
        for l in &self.layers {
            l.init(&mut store, &mut rng);
        }
        self.heads.init(&mut store, &mut rng);
        store
    }

    pub fn forward<'g>(&self, s: &Session<'g>, image: Var<'g>) -> Result<ModelOutput<'g>> {
        let d = self.config.embed_dim;
        let levels = self.backbone.forward(s, image)?;
        let projected = self.projection.forward(s, &levels);
        let queries = match &self.query_gen {
            Some(qg) => qg.forward(s, &projected).queries,
            None => s.param(QUERY_FEAT),
        };
        let mut enhanced = projected.clone();
        for (i, o) in self.orientation.iter().enumerate() {
            enhanced[i] = o.forward(s, projected[i]).fused;
        }
        let pd = self.pixel_decoder.forward(s, &enhanced);
        let pp = pd.per_pixel.shape();
        let (mh, mw) = (pp[1], pp[2]);
        let per_pixel = pd.per_pixel.reshape(&[d, mh * mw]);

        let query_pos = s.param(QUERY_POS);
        let level_embed = s.param(LEVEL_EMBED);
        let mut q = queries;
        let head = self.heads.forward(s, q, per_pixel);
        let mut predictions = vec![LayerPrediction {
            class_logits: head.class_logits,
            mask_logits: head.mask_logits,
        }];
        for (l, layer) in self.layers.iter().enumerate() {
            let lvl = level_for_layer(l);
            let feat = pd.enhanced[lvl];
            let fs = feat.shape();
            let (lh, lw) = (fs[1], fs[2]);
            let embed = level_embed.slice0(lvl, lvl + 1).reshape(&[d]);
            let pixels = feat.flatten_pixels().add_row_bias(embed);
            let pos = s.constant(sine_position_encoding(lh, lw, d));
            let prev = predictions
                .last()
                .expect("initial prediction")
                .mask_logits
                .value();
            let allowed = Rc::new(attention_mask(&prev, mh, mw, lh, lw));
            q = layer.forward(s, q, query_pos, pixels, pos, Some(allowed));
            let head = self.heads.forward(s, q, per_pixel);
            predictions.push(LayerPrediction {
                class_logits: head.class_logits,
                mask_logits: head.mask_logits,
            });
        }
        Ok(ModelOutput {
            predictions,
            mask_height: mh,
            mask_width: mw,
            c2_projected: projected[0],
            c2_enhanced: enhanced[0],
            initial_queries: queries,
        })
    }

    /// Inference on one `[3, H, W]` image.
    pub fn predict(&self, store: &ParamStore, image: &Tensor) -> Result<Prediction> {
        let g = Graph::new();
        let s = Session::new(&g, store);
        let out = self.forward(&s, g.constant(image.clone()))?;
        let last = out.last();
        Ok(postprocess(
            &last.class_logits.value(),
            &last.mask_logits.value(),
            (out.mask_height, out.mask_width),
            (image.dim(1), image.dim(2)),
            self.config.score_threshold,
            self.config.mask_threshold,
        ))
    }
}

/// Bilinear upsampling of `[N, mh * mw]` mask logits to `[N, h * w]`.
pub fn upsample_mask_logits<'g>(
    mask_logits: Var<'g>,
    (mh, mw): (usize, usize),
    (h, w): (usize, usize),
) -> Var<'g> {
    let n = mask_logits.shape()[0];
    mask_logits
        .reshape(&[n, mh, mw])
        .resample(bilinear_plan(mh, mw, h, w))
        .reshape(&[n, h * w])
}

/// Inference result for one image.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// One entry per query, masks at input resolution.
    pub candidates: InstanceSet,
    pub ship_prob: Vec<f64>,
    /// Candidates whose ship probability exceeds the score threshold and
    /// whose mask is nonempty.
    pub instances: InstanceSet,
}

/// Turns final-layer logits into scored binary masks.
///
/// A query's score is its ship probability times the mean mask probability
/// over its own foreground pixels (zero for an empty mask).
pub fn postprocess(
    class_logits: &Tensor,
    mask_logits: &Tensor,
    (mh, mw): (usize, usize),
    (h, w): (usize, usize),
    score_threshold: f64,
    mask_threshold: f64,
) -> Prediction {
    let n = class_logits.dim(0);
    let up = bilinear_plan(mh, mw, h, w).apply(mask_logits.data(), n);
    let mut masks = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    let mut ship_prob = Vec::with_capacity(n);
    for k in 0..n {
        let p_ship = logistic(class_logits.at(&[k, 0]) - class_logits.at(&[k, 1]));
        let row = &mask_logits.data()[k * mh * mw..(k + 1) * mh * mw];
        let (mut sum, mut count) = (0.0, 0usize);
        for &v in row {
            let p = logistic(v);
            if p > mask_threshold {
                sum += p;
                count += 1;
            }
        }
        let quality = if count > 0 { sum / count as f64 } else { 0.0 };
        let plane = &up[k * h * w..(k + 1) * h * w];
        masks.push(Mask {
            height: h,
            width: w,
            data: plane
                .iter()
                .map(|&v| logistic(v) > mask_threshold)
                .collect(),
        });
        scores.push((p_ship * quality).clamp(0.0, 1.0));
        ship_prob.push(p_ship);
    }
    let keep: Vec<usize> = (0..n)
        .filter(|&k| ship_prob[k] > score_threshold && masks[k].area() > 0)
        .collect();
    let instances = InstanceSet::predictions(
        keep.iter().map(|&k| masks[k].clone()).collect(),
        keep.iter().map(|&k| scores[k]).collect(),
    );
    Prediction {
        candidates: InstanceSet::predictions(masks, scores),
        ship_prob,
        instances,
    }
}
