//! Orientation-aware feature embedding.
//!
//! The input channels are split into `N_a` groups. Group `i` is resampled on
//! a lattice rotated by `θ_i = iπ/N_a` and refined by its own 3x3
//! convolution; the groups are concatenated in angle order. In parallel, a
//! fixed polar-coordinate field `(r_norm, θ_norm)` is lifted to `C` channels
//! by a 1x1 convolution. A per-pixel two-way softmax gate blends the two:
//!
//! ```text
//! F_fusion = F_orient * W + F_polar_proj * (1 - W)
//! ```
//!
//! All grids use the align-corners lattice, whose corner pixel centers sit
//! exactly at ±1. Grid sampling reads input position `R(θ) p` for output
//! position `p`. No inverse rotation is applied after the branch
//! convolutions.

use std::collections::HashMap;
use std::f64::consts::{PI, SQRT_2};
use std::sync::{Arc, Mutex, OnceLock};

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, Init};
use crate::params::{ParamStore, Session};
use crate::resample::{cached_plan, PlanKey, ResamplePlan};
use crate::tensor::Tensor;
use crate::types::FeatureMap;

/// `θ_i = iπ/n` for `i = 0..n`.
pub fn rotation_angles(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 * PI / n as f64).collect()
}

/// Align-corners lattice along one axis: `n` points from -1 to 1.
pub fn lattice(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n)
        .map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64)
        .collect()
}

/// Lattice coordinates rotated by `theta`, one `(x, y)` pair per pixel in
/// row-major order.
pub fn build_rotation_grid(theta: f64, h: usize, w: usize) -> Vec<[f64; 2]> {
    let (sin, cos) = theta.sin_cos();
    let xs = lattice(w);
    let ys = lattice(h);
    let mut grid = Vec::with_capacity(h * w);
    for &y in &ys {
        for &x in &xs {
            if theta == 0.0 {
                grid.push([x, y]);
            } else {
                grid.push([cos * x - sin * y, sin * x + cos * y]);
            }
        }
    }
    grid
}

/// Cached sampling plan for a rotation by `theta` on an `h x w` map.
pub fn rotation_plan(theta: f64, h: usize, w: usize) -> Arc<ResamplePlan> {
    let key = PlanKey::Rotation {
        theta_bits: theta.to_bits(),
        h,
        w,
    };
    cached_plan(key, || {
        ResamplePlan::from_grid(h, w, h, w, &build_rotation_grid(theta, h, w))
    })
}

/// Bilinear grid sampling with zero padding; the output has the grid's
/// spatial size `h x w`.
pub fn grid_sample(f: &FeatureMap, grid: &[[f64; 2]], h: usize, w: usize) -> FeatureMap {
    let plan = ResamplePlan::from_grid(f.height(), f.width(), h, w, grid);
    let c = f.channels();
    let data = Tensor::new(&[c, h, w], plan.apply(f.data.data(), c));
    FeatureMap::new(data, f.stride).expect("sampling keeps values finite")
}

/// The `[2, H, W]` polar field `(r/√2, (atan2(y, x) + π) / 2π)` on the
/// align-corners lattice, with `atan2(0, 0)` taken as 0.
pub fn polar_embedding(h: usize, w: usize) -> Tensor {
    let xs = lattice(w);
    let ys = lattice(h);
    let mut out = Tensor::zeros(&[2, h, w]);
    let data = out.data_mut();
    for (yi, &y) in ys.iter().enumerate() {
        for (xi, &x) in xs.iter().enumerate() {
            let r = x.hypot(y);
            let theta = if x == 0.0 && y == 0.0 {
                0.0
            } else {
                y.atan2(x)
            };
            data[yi * w + xi] = r / SQRT_2;
            data[h * w + yi * w + xi] = (theta + PI) / (2.0 * PI);
        }
    }
    out
}

/// Shared, lazily built polar field for one shape.
pub fn cached_polar_field(h: usize, w: usize) -> Arc<Tensor> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<Tensor>>>> = OnceLock::new();
    let mut map = CACHE
        .get_or_init(Default::default)
        .lock()
        .unwrap_or_else(|e| e.into_inner());
    map.entry((h, w))
        .or_insert_with(|| Arc::new(polar_embedding(h, w)))
        .clone()
}

/// Convex per-pixel blend of two `[C, H, W]` maps by a `[2, H, W]` gate.
pub fn blend<'g>(orient: Var<'g>, polar: Var<'g>, gate: Var<'g>) -> Var<'g> {
    let w0 = gate.slice0(0, 1);
    let w1 = gate.slice0(1, 2);
    orient.mul_plane(w0).add(polar.mul_plane(w1))
}

/// Intermediates of one pass.
pub struct OrientationState<'g> {
    pub orient: Var<'g>,
    pub polar_proj: Var<'g>,
    /// Softmax planes `(W, 1 - W)`, shape `[2, H, W]`.
    pub gate: Var<'g>,
    pub fused: Var<'g>,
}

/// Plain-value snapshot of [`OrientationState`].
#[derive(Clone, Debug)]
pub struct OrientationValues {
    pub orient: Tensor,
    pub polar_proj: Tensor,
    pub gate: Tensor,
    pub fused: Tensor,
}

impl OrientationState<'_> {
    pub fn values(&self) -> OrientationValues {
        OrientationValues {
            orient: (*self.orient.value()).clone(),
            polar_proj: (*self.polar_proj.value()).clone(),
            gate: (*self.gate.value()).clone(),
            fused: (*self.fused.value()).clone(),
        }
    }
}

/// One orientation-aware embedding block for a `C`-channel map.
#[derive(Clone, Debug)]
pub struct OrientationModule {
    pub name: String,
    pub channels: usize,
    pub angles: Vec<f64>,
    /// ReLU after concatenating the branches.
    pub activation: bool,
    pub branches: Vec<Conv2d>,
    pub polar: Conv2d,
    pub gate: Conv2d,
}

impl OrientationModule {
    pub fn new(name: &str, channels: usize, num_angles: usize, activation: bool) -> Result<Self> {
        if num_angles == 0 || !channels.is_multiple_of(num_angles) {
            return Err(Error::config(
                "num_angles",
                format!("{channels} channels cannot be split into {num_angles} angle groups"),
            ));
        }
        let group = channels / num_angles;
        Ok(Self {
            name: name.to_string(),
            channels,
            angles: rotation_angles(num_angles),
            activation,
            branches: (0..num_angles)
                .map(|i| Conv2d::same(format!("{name}.branch.{i}"), group, group, 3))
                .collect(),
            polar: Conv2d::same(format!("{name}.polar"), 2, channels, 1),
            gate: Conv2d::same(format!("{name}.gate"), 2 * channels, 2, 1),
        })
    }

    pub fn num_angles(&self) -> usize {
        self.angles.len()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for b in &self.branches {
            b.init(store, Init::Kaiming, rng);
        }
        self.polar.init(store, Init::Xavier, rng);
        self.gate.init(store, Init::Xavier, rng);
    }

    /// Rotated sampling and per-angle convolution, concatenated.
    pub fn orientation_branches<'g>(&self, s: &Session<'g>, x: Var<'g>) -> Var<'g> {
        let shape = x.shape();
        assert_eq!(shape[0], self.channels, "{}: channel count", self.name);
        let (h, w) = (shape[1], shape[2]);
        let group = self.channels / self.num_angles();
        let parts: Vec<Var<'g>> = self
            .angles
            .iter()
            .zip(&self.branches)
            .enumerate()
            .map(|(i, (&theta, conv))| {
                let xi = x.slice0(i * group, (i + 1) * group);
                let rotated = if theta == 0.0 {
                    xi
                } else {
                    xi.resample(rotation_plan(theta, h, w))
                };
                conv.forward(s, rotated)
            })
            .collect();
        let cat = Var::concat0(&parts);
        if self.activation {
            cat.relu()
        } else {
            cat
        }
    }

    /// 1x1 lift of the polar field to `C` channels.
    pub fn project_polar<'g>(&self, s: &Session<'g>, h: usize, w: usize) -> Var<'g> {
        let field = s.constant((*cached_polar_field(h, w)).clone());
        self.polar.forward(s, field)
    }

    /// Gate logits from the concatenated maps, softmax across the two planes.
    pub fn fusion_gate<'g>(&self, s: &Session<'g>, orient: Var<'g>, polar: Var<'g>) -> Var<'g> {
        let cat = Var::concat0(&[orient, polar]);
        self.gate.forward(s, cat).softmax_pair()
    }

    pub fn forward<'g>(&self, s: &Session<'g>, x: Var<'g>) -> OrientationState<'g> {
        let shape = x.shape();
        let orient = self.orientation_branches(s, x);
        let polar_proj = self.project_polar(s, shape[1], shape[2]);
        let gate = self.fusion_gate(s, orient, polar_proj);
        let fused = blend(orient, polar_proj, gate);
        OrientationState {
            orient,
            polar_proj,
            gate,
            fused,
        }
    }

    /// Runs the block on a plain array.
    pub fn run(&self, store: &ParamStore, x: &Tensor) -> OrientationValues {
        let g = Graph::new();
        let s = Session::new(&g, store);
        self.forward(&s, g.constant(x.clone())).values()
    }
}

/// Value-level projection: `weight` is `[C, 2, 1, 1]`, `bias` `[C]`.
pub fn project_polar_values(field: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let g = Graph::new();
    let y = g.constant(field.clone()).conv2d(
        g.constant(weight.clone()),
        Some(g.constant(bias.clone())),
        1,
        0,
    );
    (*y.value()).clone()
}

/// Value-level fusion from explicit gate logits `[2, H, W]`.
pub fn fuse_with_logits(orient: &Tensor, polar: &Tensor, logits: &Tensor) -> (Tensor, Tensor) {
    let g = Graph::new();
    let gate = g.constant(logits.clone()).softmax_pair();
    let fused = blend(g.constant(orient.clone()), g.constant(polar.clone()), gate);
    ((*fused.value()).clone(), (*gate.value()).clone())
}
