//! Content-conditioned query initialization.
//!
//! The four projected pyramid levels are average-pooled into one vector
//! each, tagged with a learned per-scale embedding, and weighted by a
//! softmax over scales. The fused vector is compared against a bank of
//! learned ship prototypes by cosine similarity; each prototype is shifted by
//! `eta` times its similarity and passed through a final linear layer.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, Init, Linear};
use crate::params::{init, ParamStore, Session};
use crate::tensor::Tensor;
use crate::types::{FeatureMap, ModelConfig, QuerySet};

/// Guard on the cosine denominator.
pub const COSINE_EPS: f64 = 1e-8;
/// Standard deviation of the prototype initialization.
pub const PROTOTYPE_STD: f64 = 0.02;

/// Per-level 1x1 convolutions mapping C2..C5 to the embedding width.
#[derive(Clone, Debug)]
pub struct ChannelProjection {
    pub convs: Vec<Conv2d>,
}

impl ChannelProjection {
    pub fn new(name: &str, in_channels: [usize; 4], dim: usize) -> Self {
        let convs = in_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::same(format!("{name}.{i}"), c, dim, 1))
            .collect();
        Self { convs }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for c in &self.convs {
            c.init(store, Init::Xavier, rng);
        }
    }

    pub fn forward<'g>(&self, s: &Session<'g>, levels: &[Var<'g>]) -> Vec<Var<'g>> {
        assert_eq!(levels.len(), self.convs.len(), "one projection per level");
        self.convs
            .iter()
            .zip(levels)
            .map(|(c, &x)| c.forward(s, x))
            .collect()
    }
}

/// Global average pool of a `[D, H, W]` map plus the scale embedding `[D]`.
pub fn pool_and_embed<'g>(feature: Var<'g>, scale_embedding: Var<'g>) -> Var<'g> {
    feature.mean_spatial().add(scale_embedding)
}

/// Stacks the pooled vectors into a `[4, D]` matrix, C2 first.
pub fn stack_scales<'g>(pooled: &[Var<'g>]) -> Var<'g> {
    let rows: Vec<Var<'g>> = pooled
        .iter()
        .map(|v| {
            let d = v.shape()[0];
            v.reshape(&[1, d])
        })
        .collect();
    Var::concat0(&rows)
}

/// Softmax over per-scale scores: `[S]` logits to `[S]` weights.
pub fn softmax_weights(logits: Var<'_>) -> Var<'_> {
    let n = logits.shape()[0];
    logits.reshape(&[1, n]).softmax_rows(None).reshape(&[n])
}

/// Scores each stacked row with a `D -> 1` linear map and normalizes the
/// scores across scales.
pub fn scale_attention<'g>(
    stacked: Var<'g>,
    score_weight: Var<'g>,
    score_bias: Var<'g>,
) -> Var<'g> {
    let n = stacked.shape()[0];
    let logits = stacked
        .matmul_nt(score_weight)
        .add_row_bias(score_bias)
        .reshape(&[n]);
    softmax_weights(logits)
}

/// Weighted sum of the stacked scale vectors: `[S]` and `[S, D]` to `[D]`.
pub fn fuse_scales<'g>(weights: Var<'g>, stacked: Var<'g>) -> Var<'g> {
    let s = stacked.shape();
    weights.reshape(&[1, s[0]]).matmul(stacked).reshape(&[s[1]])
}

/// Cosine similarity of the fused vector with each prototype row.
pub fn prototype_similarity<'g>(fused: Var<'g>, prototypes: Var<'g>) -> Var<'g> {
    fused.cosine_rows(prototypes, COSINE_EPS)
}

/// `P + eta * S` broadcast over the feature axis (before the output layer).
pub fn shift_prototypes<'g>(prototypes: Var<'g>, similarity: Var<'g>, eta: f64) -> Var<'g> {
    let s = prototypes.shape();
    let ones = prototypes.graph().constant(Tensor::ones(&[1, s[1]]));
    let shift = similarity.reshape(&[s[0], 1]).matmul(ones).scale(eta);
    prototypes.add(shift)
}

/// Every intermediate of one query-generator pass.
pub struct QueryGenState<'g> {
    pub pooled: Vec<Var<'g>>,
    pub stacked: Var<'g>,
    pub weights: Var<'g>,
    pub fused: Var<'g>,
    pub similarity: Var<'g>,
    pub queries: Var<'g>,
}

/// Learned parameters and hyperparameters of the query generator.
#[derive(Clone, Debug)]
pub struct QueryGenerator {
    pub name: String,
    pub dim: usize,
    pub num_queries: usize,
    pub num_scales: usize,
    pub eta: f64,
    pub score: Linear,
    pub out: Linear,
}

impl QueryGenerator {
    pub fn new(name: &str, cfg: &ModelConfig) -> Self {
        Self::with_dims(name, cfg.embed_dim, cfg.num_queries, cfg.eta)
    }

    pub fn with_dims(name: &str, dim: usize, num_queries: usize, eta: f64) -> Self {
        Self {
            name: name.to_string(),
            dim,
            num_queries,
            num_scales: 4,
            eta,
            score: Linear::new(format!("{name}.scale_score"), dim, 1),
            out: Linear::new(format!("{name}.out"), dim, dim),
        }
    }

    pub fn prototypes_name(&self) -> String {
        format!("{}.prototypes", self.name)
    }

    pub fn scale_embed_name(&self) -> String {
        format!("{}.scale_embed", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        store.insert(
            self.prototypes_name(),
            init::normal(&[self.num_queries, self.dim], PROTOTYPE_STD, rng),
        );
        store.insert(
            self.scale_embed_name(),
            init::normal(&[self.num_scales, self.dim], PROTOTYPE_STD, rng),
        );
        self.score.init(store, Init::Xavier, rng);
        self.out.init(store, Init::Xavier, rng);
    }

    /// Runs on already projected `[D, H, W]` levels.
    pub fn forward<'g>(&self, s: &Session<'g>, levels: &[Var<'g>]) -> QueryGenState<'g> {
        assert_eq!(
            levels.len(),
            self.num_scales,
            "query generator takes C2..C5"
        );
        let embed = s.param(&self.scale_embed_name());
        let pooled: Vec<Var<'g>> = levels
            .iter()
            .enumerate()
            .map(|(i, &f)| {
                let e = embed.slice0(i, i + 1).reshape(&[self.dim]);
                pool_and_embed(f, e)
            })
            .collect();
        let stacked = stack_scales(&pooled);
        let weights = scale_attention(
            stacked,
            s.param(&self.score.weight_name()),
            s.param(&self.score.bias_name()),
        );
        let fused = fuse_scales(weights, stacked);
        let prototypes = s.param(&self.prototypes_name());
        let similarity = prototype_similarity(fused, prototypes);
        let shifted = shift_prototypes(prototypes, similarity, self.eta);
        let queries = self.out.forward(s, shifted);
        QueryGenState {
            pooled,
            stacked,
            weights,
            fused,
            similarity,
            queries,
        }
    }
}

// ---- value-level API -----------------------------------------------------

/// Plain-value snapshot of the query generator's intermediates.
#[derive(Clone, Debug)]
pub struct QueryGenValues {
    pub pooled: Vec<Tensor>,
    pub stacked: Tensor,
    pub weights: Tensor,
    pub fused: Tensor,
    pub similarity: Tensor,
    pub queries: QuerySet,
}

impl QueryGenState<'_> {
    pub fn values(&self) -> QueryGenValues {
        let dim = self.queries.shape()[1];
        QueryGenValues {
            pooled: self.pooled.iter().map(|v| (*v.value()).clone()).collect(),
            stacked: (*self.stacked.value()).clone(),
            weights: (*self.weights.value()).clone(),
            fused: (*self.fused.value()).clone(),
            similarity: (*self.similarity.value()).clone(),
            queries: QuerySet::new((*self.queries.value()).clone(), dim)
                .expect("query generator output is finite"),
        }
    }
}

/// Runs the projection and the whole generator on plain values.
pub fn run_query_generator(
    store: &ParamStore,
    projection: &ChannelProjection,
    generator: &QueryGenerator,
    pyramid: &[FeatureMap],
) -> QueryGenValues {
    let g = Graph::new();
    let s = Session::new(&g, store);
    let levels: Vec<Var<'_>> = pyramid.iter().map(|f| g.constant(f.data.clone())).collect();
    let projected = projection.forward(&s, &levels);
    generator.forward(&s, &projected).values()
}

/// Value-level [`pool_and_embed`].
pub fn pool_and_embed_values(feature: &FeatureMap, scale_embedding: &[f64]) -> Vec<f64> {
    let g = Graph::new();
    let e = g.constant(Tensor::new(
        &[scale_embedding.len()],
        scale_embedding.to_vec(),
    ));
    pool_and_embed(g.constant(feature.data.clone()), e)
        .value()
        .data()
        .to_vec()
}

/// Value-level [`stack_scales`].
pub fn stack_scales_values(vectors: &[Vec<f64>]) -> Tensor {
    let g = Graph::new();
    let vars: Vec<Var<'_>> = vectors
        .iter()
        .map(|v| g.constant(Tensor::new(&[v.len()], v.clone())))
        .collect();
    (*stack_scales(&vars).value()).clone()
}

/// Value-level [`softmax_weights`].
pub fn softmax_weights_values(logits: &[f64]) -> Vec<f64> {
    let g = Graph::new();
    softmax_weights(g.constant(Tensor::new(&[logits.len()], logits.to_vec())))
        .value()
        .data()
        .to_vec()
}

/// Value-level [`scale_attention`]; `score_weight` is `[1, D]`.
pub fn scale_attention_values(
    stacked: &Tensor,
    score_weight: &Tensor,
    score_bias: f64,
) -> Vec<f64> {
    let g = Graph::new();
    scale_attention(
        g.constant(stacked.clone()),
        g.constant(score_weight.clone()),
        g.constant(Tensor::scalar(score_bias)),
    )
    .value()
    .data()
    .to_vec()
}

/// Value-level [`fuse_scales`].
pub fn fuse_scales_values(weights: &[f64], stacked: &Tensor) -> Vec<f64> {
    let g = Graph::new();
    fuse_scales(
        g.constant(Tensor::new(&[weights.len()], weights.to_vec())),
        g.constant(stacked.clone()),
    )
    .value()
    .data()
    .to_vec()
}

/// Value-level [`prototype_similarity`].
pub fn prototype_similarity_values(fused: &[f64], prototypes: &Tensor) -> Vec<f64> {
    let g = Graph::new();
    prototype_similarity(
        g.constant(Tensor::new(&[fused.len()], fused.to_vec())),
        g.constant(prototypes.clone()),
    )
    .value()
    .data()
    .to_vec()
}

/// `Linear(P + eta * S)` on plain values; `weight` is `[D, D]`, `bias` `[D]`.
pub fn generate_queries_values(
    prototypes: &Tensor,
    similarity: &[f64],
    eta: f64,
    weight: &Tensor,
    bias: &[f64],
) -> QuerySet {
    let g = Graph::new();
    let p = g.constant(prototypes.clone());
    let sim = g.constant(Tensor::new(&[similarity.len()], similarity.to_vec()));
    let shifted = shift_prototypes(p, sim, eta);
    let q = shifted
        .matmul_nt(g.constant(weight.clone()))
        .add_row_bias(g.constant(Tensor::new(&[bias.len()], bias.to_vec())));
    let d = prototypes.dim(1);
    QuerySet::new((*q.value()).clone(), d).expect("finite queries")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
        init::uniform(shape, 1.0, r)
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let f = FeatureMap::new(Tensor::full(&[256, 3, 5], 0.75), 4).unwrap();
        let v = pool_and_embed_values(&f, &[0.0; 256]);
        assert!(v.iter().all(|&x| (x - 0.75).abs() < 1e-15));
    }

    #[test]
    fn zero_map_pools_to_embedding() {
        let mut r = rng();
        let e = random(&[256], &mut r).into_data();
        let f = FeatureMap::new(Tensor::zeros(&[256, 4, 4]), 4).unwrap();
        assert_eq!(pool_and_embed_values(&f, &e), e);
    }

    #[test]
    fn pooling_matches_double_loop() {
        let mut r = rng();
        let f = FeatureMap::new(random(&[256, 4, 4], &mut r), 4).unwrap();
        let e = random(&[256], &mut r).into_data();
        let got = pool_and_embed_values(&f, &e);
        for c in 0..256 {
            let mut acc = 0.0;
            for y in 0..4 {
                for x in 0..4 {
                    acc += f.data.at(&[c, y, x]);
                }
            }
            assert!((got[c] - (acc / 16.0 + e[c])).abs() < 1e-12);
        }
    }

    #[test]
    fn stacking_keeps_row_order() {
        let basis: Vec<Vec<f64>> = (0..4)
            .map(|i| {
                let mut v = vec![0.0; 256];
                v[i * 7] = 1.0;
                v
            })
            .collect();
        let s = stack_scales_values(&basis);
        assert_eq!(s.shape(), [4, 256]);
        for (i, b) in basis.iter().enumerate() {
            assert_eq!(s.slice0(i, i + 1).data(), &b[..]);
            assert_eq!(s.at(&[i, i * 7]), 1.0);
        }
    }

    #[test]
    fn identical_rows_get_uniform_weights() {
        let mut r = rng();
        let row = random(&[1, 256], &mut r);
        let stacked = Tensor::concat0(&[&row, &row, &row, &row]);
        let w = scale_attention_values(&stacked, &random(&[1, 256], &mut r), 0.3);
        for v in w {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn ln2_logit_gets_two_fifths() {
        let w = softmax_weights_values(&[2f64.ln(), 0.0, 0.0, 0.0]);
        let expect = [0.4, 0.2, 0.2, 0.2];
        for (a, b) in w.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn one_hot_fusion_selects_scale() {
        let mut r = rng();
        let stacked = random(&[4, 256], &mut r);
        let f = fuse_scales_values(&[0.0, 0.0, 1.0, 0.0], &stacked);
        assert_eq!(f, stacked.slice0(2, 3).into_data());
    }

    #[test]
    fn uniform_fusion_is_mean() {
        let mut r = rng();
        let stacked = random(&[4, 256], &mut r);
        let f = fuse_scales_values(&[0.25; 4], &stacked);
        for j in 0..256 {
            let mean = (0..4).map(|i| stacked.at(&[i, j])).sum::<f64>() / 4.0;
            assert!((f[j] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn similarity_special_cases() {
        let x: Vec<f64> = (0..256).map(|i| ((i as f64) * 0.1).sin() + 0.2).collect();
        let mut orth = vec![0.0; 256];
        // rotate the first two coordinates' contribution into an orthogonal vector
        orth[0] = x[1];
        orth[1] = -x[0];
        let anti: Vec<f64> = x.iter().map(|v| -2.0 * v).collect();
        let mut rows = x.clone();
        rows.extend(&orth);
        rows.extend(&anti);
        let p = Tensor::new(&[3, 256], rows);
        let s = prototype_similarity_values(&x, &p);
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert!(s[1].abs() < 1e-12);
        assert!((s[2] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_vector_similarity_is_zero() {
        let p = Tensor::ones(&[2, 8]);
        let s = prototype_similarity_values(&[0.0; 8], &p);
        assert_eq!(s, vec![0.0, 0.0]);
    }

    #[test]
    fn eta_zero_identity_linear_returns_prototypes() {
        let mut r = rng();
        let p = random(&[5, 256], &mut r);
        let q = generate_queries_values(
            &p,
            &[0.9, -0.2, 0.1, 0.0, 1.0],
            0.0,
            &Tensor::eye(256),
            &[0.0; 256],
        );
        assert_eq!(q.queries, p);
    }

    #[test]
    fn unit_similarity_adds_eta_everywhere() {
        let mut r = rng();
        let p = random(&[3, 256], &mut r);
        let q = generate_queries_values(&p, &[1.0, 0.0, 0.0], 0.1, &Tensor::eye(256), &[0.0; 256]);
        for j in 0..256 {
            assert!((q.queries.at(&[0, j]) - (p.at(&[0, j]) + 0.1)).abs() < 1e-15);
            assert_eq!(q.queries.at(&[1, j]), p.at(&[1, j]));
        }
    }

    #[test]
    fn zero_similarity_is_plain_linear() {
        let mut r = rng();
        let p = random(&[4, 16], &mut r);
        let w = random(&[16, 16], &mut r);
        let b = random(&[16], &mut r).into_data();
        let q = generate_queries_values(&p, &[0.0; 4], 0.1, &w, &b);
        let mut expect = p.matmul(&w.transpose2());
        for row in expect.data_mut().chunks_mut(16) {
            for (v, bb) in row.iter_mut().zip(&b) {
                *v += bb;
            }
        }
        assert!(q.queries.max_abs_diff(&expect) < 1e-13);
    }

    #[test]
    fn full_generator_produces_finite_queries_of_configured_width() {
        let cfg = ModelConfig {
            num_queries: 5,
            embed_dim: 16,
            backbone_width: 1,
            ..ModelConfig::desk()
        };
        let mut r = rng();
        let proj = ChannelProjection::new("proj", cfg.pyramid_channels(), cfg.embed_dim);
        let gen = QueryGenerator::new("qg", &cfg);
        let mut store = ParamStore::new();
        proj.init(&mut store, &mut r);
        gen.init(&mut store, &mut r);
        let pyramid: Vec<FeatureMap> = cfg
            .pyramid_channels()
            .iter()
            .zip([4usize, 8, 16, 32])
            .map(|(&c, s)| FeatureMap::new(random(&[c, 64 / s, 64 / s], &mut r), s).unwrap())
            .collect();
        let out = run_query_generator(&store, &proj, &gen, &pyramid);
        assert_eq!(out.queries.queries.shape(), [5, 16]);
        assert!((out.weights.sum() - 1.0).abs() < 1e-12);
        assert!(out
            .similarity
            .data()
            .iter()
            .all(|s| (-1.0..=1.0).contains(s)));
    }
}
