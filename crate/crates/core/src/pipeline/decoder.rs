//! Masked-attention transformer decoder and prediction heads.

use std::f64::consts::PI;
use std::rc::Rc;

use rand::Rng;

use crate::graph::Var;
use crate::nn::{Init, LayerNorm, Linear, Mlp};
use crate::params::{ParamStore, Session};
use crate::resample::bilinear_plan;
use crate::tensor::Tensor;

/// Fixed sine/cosine position code for an `h x w` grid, `[h*w, dim]` with
/// the y half first. Coordinates are normalized to `(0, 2π]`.
pub fn sine_position_encoding(h: usize, w: usize, dim: usize) -> Tensor {
    assert!(dim.is_multiple_of(2), "position code needs an even width");
    let half = dim / 2;
    let freq: Vec<f64> = (0..half)
        .map(|i| 10000f64.powf((2 * (i / 2)) as f64 / half as f64))
        .collect();
    let mut out = Tensor::zeros(&[h * w, dim]);
    let data = out.data_mut();
    for y in 0..h {
        let ye = (y + 1) as f64 / (h as f64 + 1e-6) * 2.0 * PI;
        for x in 0..w {
            let xe = (x + 1) as f64 / (w as f64 + 1e-6) * 2.0 * PI;
            let row = &mut data[(y * w + x) * dim..(y * w + x + 1) * dim];
            for i in 0..half {
                let (a, b) = (ye / freq[i], xe / freq[i]);
                row[i] = if i % 2 == 0 { a.sin() } else { a.cos() };
                row[half + i] = if i % 2 == 0 { b.sin() } else { b.cos() };
            }
        }
    }
    out
}

/// Multi-head attention with learned input and output projections.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl AttentionBlock {
    pub fn new(name: &str, dim: usize, heads: usize) -> Self {
        let lin = |p: &str| Linear::new(format!("{name}.{p}"), dim, dim);
        Self {
            heads,
            q: lin("q"),
            k: lin("k"),
            v: lin("v"),
            o: lin("o"),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for l in [&self.q, &self.k, &self.v, &self.o] {
            l.init(store, Init::Xavier, rng);
        }
    }

    pub fn forward<'g>(
        &self,
        s: &Session<'g>,
        query: Var<'g>,
        key: Var<'g>,
        value: Var<'g>,
        allowed: Option<Rc<Vec<bool>>>,
    ) -> Var<'g> {
        let q = self.q.forward(s, query);
        let k = self.k.forward(s, key);
        let v = self.v.forward(s, value);
        self.o.forward(s, q.attention(k, v, self.heads, allowed))
    }
}

/// Cross-attention to pixels, self-attention among queries, feed-forward;
/// each followed by a residual connection and layer normalization.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub cross: AttentionBlock,
    pub cross_norm: LayerNorm,
    pub self_attn: AttentionBlock,
    pub self_norm: LayerNorm,
    pub ffn: Mlp,
    pub ffn_norm: LayerNorm,
}

impl DecoderLayer {
    pub fn new(name: &str, dim: usize, heads: usize, ffn_dim: usize) -> Self {
        Self {
            cross: AttentionBlock::new(&format!("{name}.cross_attn"), dim, heads),
            cross_norm: LayerNorm::new(format!("{name}.cross_norm"), dim),
            self_attn: AttentionBlock::new(&format!("{name}.self_attn"), dim, heads),
            self_norm: LayerNorm::new(format!("{name}.self_norm"), dim),
            ffn: Mlp::new(&format!("{name}.ffn"), &[dim, ffn_dim, dim]),
            ffn_norm: LayerNorm::new(format!("{name}.ffn_norm"), dim),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.cross.init(store, rng);
        self.cross_norm.init(store);
        self.self_attn.init(store, rng);
        self.self_norm.init(store);
        self.ffn.init(store, rng);
        self.ffn_norm.init(store);
    }

    /// `queries`/`query_pos` are `[N_q, D]`, `pixels`/`pixel_pos` `[L, D]`,
    /// `allowed` is `[N_q, L]` row-major (rows without any `true` attend to
    /// every pixel).
    pub fn forward<'g>(
        &self,
        s: &Session<'g>,
        queries: Var<'g>,
        query_pos: Var<'g>,
        pixels: Var<'g>,
        pixel_pos: Var<'g>,
        allowed: Option<Rc<Vec<bool>>>,
    ) -> Var<'g> {
        let attended = self.cross.forward(
            s,
            queries.add(query_pos),
            pixels.add(pixel_pos),
            pixels,
            allowed,
        );
        let q = self.cross_norm.forward(s, queries.add(attended));
        let qp = q.add(query_pos);
        let mixed = self.self_attn.forward(s, qp, qp, q, None);
        let q = self.self_norm.forward(s, q.add(mixed));
        let f = self.ffn.forward(s, q);
        self.ffn_norm.forward(s, q.add(f))
    }
}

/// Class and mask prediction from a query set.
#[derive(Clone, Debug)]
pub struct Heads {
    pub norm: LayerNorm,
    pub class: Linear,
    pub mask_embed: Mlp,
}

pub struct HeadOutput<'g> {
    /// `[N_q, 2]`: ship, no-object.
    pub class_logits: Var<'g>,
    /// `[N_q, H/4 * W/4]`.
    pub mask_logits: Var<'g>,
}

impl Heads {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            norm: LayerNorm::new(format!("{name}.norm"), dim),
            class: Linear::new(format!("{name}.class"), dim, 2),
            mask_embed: Mlp::new(&format!("{name}.mask_embed"), &[dim, dim, dim, dim]),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.norm.init(store);
        self.class.init(store, Init::Xavier, rng);
        self.mask_embed.init(store, rng);
    }

    /// `per_pixel` is `[D, P]`.
    pub fn forward<'g>(
        &self,
        s: &Session<'g>,
        queries: Var<'g>,
        per_pixel: Var<'g>,
    ) -> HeadOutput<'g> {
        let q = self.norm.forward(s, queries);
        HeadOutput {
            class_logits: self.class.forward(s, q),
            mask_logits: self.mask_embed.forward(s, q).matmul(per_pixel),
        }
    }
}

/// Foreground indicator of each query's mask at another resolution:
/// logits `[N_q, h*w]` are resized bilinearly to `th x tw` and thresholded at
/// zero (probability one half).
pub fn attention_mask(mask_logits: &Tensor, h: usize, w: usize, th: usize, tw: usize) -> Vec<bool> {
    let n = mask_logits.dim(0);
    let resized = if (h, w) == (th, tw) {
        mask_logits.data().to_vec()
    } else {
        bilinear_plan(h, w, th, tw).apply(mask_logits.data(), n)
    };
    resized.iter().map(|&v| v > 0.0).collect()
}
