//! Fixed linear resampling operators.
//!
//! Grid sampling with a parameter-free grid, bilinear resizing and nearest
//! upsampling are all linear maps from input pixels to output pixels that do
//! not depend on the data. They are stored once as a sparse row table and
//! applied per channel.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

/// Sparse `out_pixels x in_pixels` matrix in CSR form.
#[derive(Clone, Debug, PartialEq)]
pub struct ResamplePlan {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    weights: Vec<f64>,
}

/// Sample offsets closer than this to a lattice point are snapped onto it, so
/// axis-aligned rotations act as exact permutations.
const SNAP: f64 = 1e-9;

impl ResamplePlan {
    fn from_rows(
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
        rows: impl Iterator<Item = Vec<(usize, f64)>>,
    ) -> Self {
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        for row in rows {
            for (c, w) in row {
                if w != 0.0 {
                    cols.push(c as u32);
                    weights.push(w);
                }
            }
            row_ptr.push(cols.len());
        }
        assert_eq!(row_ptr.len(), out_h * out_w + 1);
        Self {
            in_h,
            in_w,
            out_h,
            out_w,
            row_ptr,
            cols,
            weights,
        }
    }

    /// Bilinear sampling at normalized coordinates with zero padding.
    ///
    /// `grid` holds one `(x, y)` pair per output pixel (row-major). The
    /// coordinates use the align-corners convention: `-1` and `+1` are the
    /// centers of the first and last input pixels along each axis.
    pub fn from_grid(
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
        grid: &[[f64; 2]],
    ) -> Self {
        assert_eq!(grid.len(), out_h * out_w, "grid size");
        let rows = grid.iter().map(|&[x, y]| {
            let ix = unnormalize(x, in_w);
            let iy = unnormalize(y, in_h);
            bilinear_taps(ix, iy, in_h, in_w)
        });
        Self::from_rows(in_h, in_w, out_h, out_w, rows)
    }

    /// Bilinear resize with half-pixel centers (`align_corners = false`),
    /// source coordinates clamped to the image.
    pub fn resize_bilinear(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        let src = |dst: usize, n_in: usize, n_out: usize| -> f64 {
            let s = (dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
            s.clamp(0.0, (n_in - 1) as f64)
        };
        let rows = (0..out_h).flat_map(|oy| {
            (0..out_w).map(move |ox| {
                bilinear_taps(src(ox, in_w, out_w), src(oy, in_h, out_h), in_h, in_w)
            })
        });
        Self::from_rows(in_h, in_w, out_h, out_w, rows)
    }

    /// Nearest-neighbour resize: output pixel `o` reads input `floor(o * in / out)`.
    pub fn resize_nearest(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        let rows = (0..out_h).flat_map(|oy| {
            (0..out_w).map(move |ox| {
                let iy = oy * in_h / out_h;
                let ix = ox * in_w / out_w;
                vec![(iy * in_w + ix, 1.0)]
            })
        });
        Self::from_rows(in_h, in_w, out_h, out_w, rows)
    }

    pub fn in_pixels(&self) -> usize {
        self.in_h * self.in_w
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Taps of output pixel `p` as `(input index, weight)`.
    pub fn row(&self, p: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[p]..self.row_ptr[p + 1];
        self.cols[span.clone()]
            .iter()
            .zip(&self.weights[span])
            .map(|(&c, &w)| (c as usize, w))
    }

    /// Applies the plan to each of `channels` contiguous planes.
    pub fn apply(&self, input: &[f64], channels: usize) -> Vec<f64> {
        let (ni, no) = (self.in_pixels(), self.out_pixels());
        assert_eq!(input.len(), channels * ni, "resample input size");
        let mut out = vec![0.0; channels * no];
        for c in 0..channels {
            let src = &input[c * ni..(c + 1) * ni];
            let dst = &mut out[c * no..(c + 1) * no];
            for (p, d) in dst.iter_mut().enumerate() {
                *d = self.row(p).map(|(i, w)| w * src[i]).sum();
            }
        }
        out
    }

    /// Adjoint of [`apply`](Self::apply): scatters output gradients back.
    pub fn apply_transpose(&self, grad: &[f64], channels: usize) -> Vec<f64> {
        let (ni, no) = (self.in_pixels(), self.out_pixels());
        assert_eq!(grad.len(), channels * no, "resample grad size");
        let mut out = vec![0.0; channels * ni];
        for c in 0..channels {
            let g = &grad[c * no..(c + 1) * no];
            let dst = &mut out[c * ni..(c + 1) * ni];
            for (p, &gp) in g.iter().enumerate() {
                if gp == 0.0 {
                    continue;
                }
                for (i, w) in self.row(p) {
                    dst[i] += w * gp;
                }
            }
        }
        out
    }
}

/// Identifies a cached plan. Angles are keyed by their bit pattern.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PlanKey {
    Rotation {
        theta_bits: u64,
        h: usize,
        w: usize,
    },
    Bilinear {
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
    },
    Nearest {
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
    },
}

/// Process-wide plan cache. The lock is held while a missing plan is built,
/// so each key is constructed exactly once.
pub fn cached_plan(key: PlanKey, build: impl FnOnce() -> ResamplePlan) -> Arc<ResamplePlan> {
    static CACHE: OnceLock<Mutex<HashMap<PlanKey, Arc<ResamplePlan>>>> = OnceLock::new();
    let mut map = CACHE
        .get_or_init(Default::default)
        .lock()
        .unwrap_or_else(|e| e.into_inner());
    map.entry(key).or_insert_with(|| Arc::new(build())).clone()
}

/// Cached [`ResamplePlan::resize_bilinear`].
pub fn bilinear_plan(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Arc<ResamplePlan> {
    cached_plan(
        PlanKey::Bilinear {
            in_h,
            in_w,
            out_h,
            out_w,
        },
        || ResamplePlan::resize_bilinear(in_h, in_w, out_h, out_w),
    )
}

/// Cached [`ResamplePlan::resize_nearest`].
pub fn nearest_plan(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Arc<ResamplePlan> {
    cached_plan(
        PlanKey::Nearest {
            in_h,
            in_w,
            out_h,
            out_w,
        },
        || ResamplePlan::resize_nearest(in_h, in_w, out_h, out_w),
    )
}

/// Normalized coordinate to pixel index under align-corners.
fn unnormalize(v: f64, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        (v + 1.0) * 0.5 * (n - 1) as f64
    }
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

fn bilinear_taps(ix: f64, iy: f64, h: usize, w: usize) -> Vec<(usize, f64)> {
    let (ix, iy) = (snap(ix), snap(iy));
    let x0 = ix.floor();
    let y0 = iy.floor();
    let fx = ix - x0;
    let fy = iy - y0;
    let mut taps = Vec::with_capacity(4);
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let (xx, yy) = (x0 + dx, y0 + dy);
            let weight = wx * wy;
            if weight == 0.0 || xx < 0.0 || yy < 0.0 || xx >= w as f64 || yy >= h as f64 {
                continue;
            }
            taps.push((yy as usize * w + xx as usize, weight));
        }
    }
    taps
}
