//! Convolutional pixel decoder.
//!
//! Strides 32, 16 and 8 are refined by a 3x3 convolution after adding the
//! upsampled coarser result (top-down). The stride-4 level is refined on its
//! own and joins only in the final per-pixel embedding.

use rand::Rng;

use crate::graph::Var;
use crate::nn::{Conv2d, Init};
use crate::params::{ParamStore, Session};
use crate::resample::{bilinear_plan, nearest_plan};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Upsample {
    Nearest,
    Bilinear,
}

/// Resizes a `[C, H, W]` map to `h x w`.
pub fn upsample_to<'g>(x: Var<'g>, h: usize, w: usize, mode: Upsample) -> Var<'g> {
    let s = x.shape();
    if (s[1], s[2]) == (h, w) {
        return x;
    }
    let plan = match mode {
        Upsample::Nearest => nearest_plan(s[1], s[2], h, w),
        Upsample::Bilinear => bilinear_plan(s[1], s[2], h, w),
    };
    x.resample(plan)
}

pub struct PixelDecoderOutput<'g> {
    /// Strides 8, 16, 32.
    pub enhanced: [Var<'g>; 3],
    pub a2: Var<'g>,
    pub per_pixel: Var<'g>,
}

#[derive(Clone, Debug)]
pub struct PixelDecoder {
    pub dim: usize,
    pub upsample: Upsample,
    /// Refinement convolutions for strides 8, 16, 32.
    pub refine: [Conv2d; 3],
    pub a2: Conv2d,
    pub out: Conv2d,
}

impl PixelDecoder {
    pub fn new(name: &str, dim: usize) -> Self {
        let conv = |suffix: &str, k| Conv2d::same(format!("{name}.{suffix}"), dim, dim, k);
        Self {
            dim,
            upsample: Upsample::Nearest,
            refine: [conv("refine8", 3), conv("refine16", 3), conv("refine32", 3)],
            a2: conv("a2", 3),
            out: conv("out", 1),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for c in &self.refine {
            c.init(store, Init::Kaiming, rng);
        }
        self.a2.init(store, Init::Kaiming, rng);
        self.out.init(store, Init::Xavier, rng);
    }

    /// `levels` are the projected (and possibly enhanced) C2..C5.
    pub fn forward<'g>(&self, s: &Session<'g>, levels: &[Var<'g>]) -> PixelDecoderOutput<'g> {
        assert_eq!(levels.len(), 4, "pixel decoder takes four levels");
        let size = |v: Var<'g>| {
            let sh = v.shape();
            (sh[1], sh[2])
        };
        let e32 = self.refine[2].forward(s, levels[3]).relu();
        let (h, w) = size(levels[2]);
        let e16 = self.refine[1]
            .forward(s, levels[2].add(upsample_to(e32, h, w, self.upsample)))
            .relu();
        let (h, w) = size(levels[1]);
        let e8 = self.refine[0]
            .forward(s, levels[1].add(upsample_to(e16, h, w, self.upsample)))
            .relu();
        let a2 = self.a2.forward(s, levels[0]).relu();
        let (h, w) = size(levels[0]);
        let per_pixel = self
            .out
            .forward(s, a2.add(upsample_to(e8, h, w, self.upsample)));
        PixelDecoderOutput {
            enhanced: [e8, e16, e32],
            a2,
            per_pixel,
        }
    }
}
