//! Shared domain types: feature maps, the backbone pyramid, query sets,
//! instance sets and the model configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Strides of C2..C5 relative to the input image.
pub const PYRAMID_STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Channel widths of C2..C5 for a backbone of the given base width.
/// The reference base width 64 gives `(256, 512, 1024, 2048)`.
pub fn pyramid_channels(backbone_width: usize) -> [usize; 4] {
    [4, 8, 16, 32].map(|m| m * backbone_width)
}

pub const REFERENCE_BACKBONE_WIDTH: usize = 64;

/// Label of the single foreground class. Class index 1 is "no object".
pub const SHIP: usize = 0;
pub const NO_OBJECT: usize = 1;

/// A `[channels, height, width]` array with its stride w.r.t. the input.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Tensor,
    pub stride: usize,
}

impl FeatureMap {
    pub fn new(data: Tensor, stride: usize) -> Result<Self> {
        if data.ndim() != 3 || data.shape().contains(&0) {
            return Err(Error::Shape(format!(
                "feature map must be [C, H, W] with every extent >= 1, got {:?}",
                data.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("stride must be positive".into()));
        }
        Ok(Self { data, stride })
    }

    pub fn channels(&self) -> usize {
        self.data.dim(0)
    }

    pub fn height(&self) -> usize {
        self.data.dim(1)
    }

    pub fn width(&self) -> usize {
        self.data.dim(2)
    }
}

/// Row-major pixel flattening: `[C, H, W]` to `[H * W, C]`.
pub fn flatten_pixels(f: &FeatureMap) -> Tensor {
    let (c, hw) = (f.channels(), f.height() * f.width());
    f.data.clone().reshape(&[c, hw]).transpose2()
}

/// Inverse of [`flatten_pixels`].
pub fn unflatten_pixels(
    rows: &Tensor,
    height: usize,
    width: usize,
    stride: usize,
) -> Result<FeatureMap> {
    if rows.ndim() != 2 || rows.dim(0) != height * width {
        return Err(Error::Shape(format!(
            "cannot unflatten {:?} into {height}x{width}",
            rows.shape()
        )));
    }
    let c = rows.dim(1);
    FeatureMap::new(rows.transpose2().reshape(&[c, height, width]), stride)
}

/// Backbone output C2..C5.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureMap>,
    pub input_height: usize,
    pub input_width: usize,
}

impl FeaturePyramid {
    /// Checks level count, strides, channel widths and spatial extents.
    pub fn validate(self, expected_channels: [usize; 4]) -> Result<Self> {
        if self.levels.len() != 4 {
            return Err(Error::Shape(format!(
                "expected 4 levels, got {}",
                self.levels.len()
            )));
        }
        for (i, level) in self.levels.iter().enumerate() {
            let name = format!("C{}", i + 2);
            if level.stride != PYRAMID_STRIDES[i] {
                return Err(Error::Shape(format!(
                    "{name}: stride {} (expected {})",
                    level.stride, PYRAMID_STRIDES[i]
                )));
            }
            if level.channels() != expected_channels[i] {
                return Err(Error::Shape(format!(
                    "{name}: {} channels (expected {})",
                    level.channels(),
                    expected_channels[i]
                )));
            }
            let (eh, ew) = (
                self.input_height / level.stride,
                self.input_width / level.stride,
            );
            if (level.height(), level.width()) != (eh, ew) {
                return Err(Error::Shape(format!(
                    "{name}: spatial {}x{} (expected {eh}x{ew})",
                    level.height(),
                    level.width()
                )));
            }
        }
        Ok(self)
    }
}

/// Validates a pyramid against the reference widths `(256, 512, 1024, 2048)`.
pub fn validate_pyramid(p: FeaturePyramid) -> Result<FeaturePyramid> {
    p.validate(pyramid_channels(REFERENCE_BACKBONE_WIDTH))
}

/// `[num_queries, width]` query matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    pub queries: Tensor,
}

impl QuerySet {
    pub fn new(queries: Tensor, width: usize) -> Result<Self> {
        if queries.ndim() != 2 || queries.dim(1) != width {
            return Err(Error::Shape(format!(
                "query set must be [N, {width}], got {:?}",
                queries.shape()
            )));
        }
        if !queries.all_finite() {
            return Err(Error::Input("query set has non-finite values".into()));
        }
        Ok(Self { queries })
    }

    pub fn len(&self) -> usize {
        self.queries.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Binary mask, row-major.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Mask({}x{}, area {})",
            self.height,
            self.width,
            self.area()
        )
    }
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn intersection(&self, other: &Mask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| **a && **b)
            .count()
    }

    /// `[x, y, w, h]` of the tight pixel box, or zeros for an empty mask.
    pub fn bbox(&self) -> [f64; 4] {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        if x0 == usize::MAX {
            return [0.0; 4];
        }
        [
            x0 as f64,
            y0 as f64,
            (x1 - x0 + 1) as f64,
            (y1 - y0 + 1) as f64,
        ]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.height, self.width],
            self.data
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
        )
    }
}

/// Ground-truth or predicted instances.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InstanceSet {
    pub masks: Vec<Mask>,
    pub labels: Vec<usize>,
    /// Confidence per mask; `None` for ground truth.
    pub scores: Option<Vec<f64>>,
}

impl InstanceSet {
    pub fn ground_truth(masks: Vec<Mask>) -> Self {
        let labels = vec![SHIP; masks.len()];
        Self {
            masks,
            labels,
            scores: None,
        }
    }

    pub fn predictions(masks: Vec<Mask>, scores: Vec<f64>) -> Self {
        let labels = vec![SHIP; masks.len()];
        Self {
            masks,
            labels,
            scores: Some(scores),
        }
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(first) = self.masks.first() {
            if self
                .masks
                .iter()
                .any(|m| (m.height, m.width) != (first.height, first.width))
            {
                return Err(Error::Shape("instance masks differ in size".into()));
            }
        }
        if self.labels.len() != self.masks.len() {
            return Err(Error::Shape("one label per mask required".into()));
        }
        if let Some(s) = &self.scores {
            if s.len() != self.masks.len() {
                return Err(Error::Shape("one score per mask required".into()));
            }
            if s.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Input("scores must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

fn default_true() -> bool {
    true
}

/// Architecture hyperparameters. Serialized into every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_queries: usize,
    pub num_angles: usize,
    pub embed_dim: usize,
    pub decoder_layers: usize,
    pub backbone_width: usize,
    /// Similarity scaling factor of the query generator.
    pub eta: f64,
    pub seed: u64,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Content-conditioned query generation; off means plain learned queries.
    #[serde(default = "default_true")]
    pub use_query_generator: bool,
    /// Orientation-aware embedding on C2..C4.
    #[serde(default = "default_true")]
    pub use_orientation: bool,
    /// ReLU after concatenating the angle branches.
    #[serde(default = "default_true")]
    pub orientation_activation: bool,
    pub score_threshold: f64,
    pub mask_threshold: f64,
}

impl ModelConfig {
    /// Full-size settings: 256-wide embeddings, 100 queries, 9 decoder layers.
    pub fn paper() -> Self {
        Self {
            num_queries: 100,
            num_angles: 4,
            embed_dim: 256,
            decoder_layers: 9,
            backbone_width: REFERENCE_BACKBONE_WIDTH,
            eta: 0.1,
            seed: 0,
            heads: 8,
            ffn_dim: 2048,
            use_query_generator: true,
            use_orientation: true,
            orientation_activation: true,
            score_threshold: 0.5,
            mask_threshold: 0.5,
        }
    }

    /// CPU-sized settings for small synthetic images.
    pub fn desk() -> Self {
        Self {
            num_queries: 20,
            embed_dim: 64,
            decoder_layers: 3,
            backbone_width: 8,
            heads: 4,
            ffn_dim: 256,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_queries", self.num_queries),
            ("num_angles", self.num_angles),
            ("embed_dim", self.embed_dim),
            ("backbone_width", self.backbone_width),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if !self.embed_dim.is_multiple_of(self.num_angles) {
            return Err(Error::config(
                "num_angles",
                format!(
                    "embed_dim {} is not divisible by {}",
                    self.embed_dim, self.num_angles
                ),
            ));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config(
                "heads",
                format!(
                    "embed_dim {} is not divisible by {}",
                    self.embed_dim, self.heads
                ),
            ));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::config("eta", "must be finite and >= 0"));
        }
        for (key, v) in [
            ("score_threshold", self.score_threshold),
            ("mask_threshold", self.mask_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(key, "must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn pyramid_channels(&self) -> [usize; 4] {
        pyramid_channels(self.backbone_width)
    }
}
