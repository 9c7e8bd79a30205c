//! Channel-averaged heatmaps of the stride-4 features around the
//! orientation embedding.
//!
//! Each map is the per-pixel mean over channels, min-max normalized on its
//! own and colored on a fixed black-red-yellow-white ramp: black is the
//! map's minimum, white its maximum. A constant map renders entirely black.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{ParamStore, Session};
use crate::pipeline::Model;
use crate::tensor::Tensor;

pub const BEFORE_FILE: &str = "c2_before_orientation.png";
pub const AFTER_FILE: &str = "c2_after_orientation.png";
pub const WITHOUT_FILE: &str = "c2_without_orientation.png";

/// Per-pixel mean over the channels of a `[C, H, W]` tensor.
pub fn channel_mean(t: &Tensor) -> Vec<f64> {
    let (c, hw) = (t.dim(0), t.dim(1) * t.dim(2));
    let mut out = vec![0.0; hw];
    for plane in t.data().chunks(hw) {
        for (o, v) in out.iter_mut().zip(plane) {
            *o += v;
        }
    }
    out.iter().map(|v| v / c as f64).collect()
}

/// Min-max scaling to `[0, 1]`; a constant input maps to all zeros.
pub fn normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / span).collect()
}

/// Fixed color ramp: 0 black, 1/3 red, 2/3 yellow, 1 white.
pub fn heat_color(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * 3.0;
    let q = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    [q(t), q(t - 1.0), q(t - 2.0)]
}

/// Writes a heatmap PNG of an `h x w` map.
pub fn write_heatmap(values: &[f64], h: usize, w: usize, path: &Path) -> Result<()> {
    if values.len() != h * w {
        return Err(Error::Shape(format!(
            "heatmap of {} values for {h}x{w}",
            values.len()
        )));
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (i, t) in normalize(values).into_iter().enumerate() {
        img.put_pixel((i % w) as u32, (i / w) as u32, image::Rgb(heat_color(t)));
    }
    img.save(path)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Projected C2 before and after the orientation embedding (identical when
/// the model has none).
pub fn c2_features(model: &Model, store: &ParamStore, image: &Tensor) -> Result<(Tensor, Tensor)> {
    let g = Graph::new();
    let s = Session::new(&g, store);
    let out = model.forward(&s, g.constant(image.clone()))?;
    Ok((
        (*out.c2_projected.value()).clone(),
        (*out.c2_enhanced.value()).clone(),
    ))
}

/// Writes the before/after heatmaps for `image` under `out_dir`, plus the
/// C2 of `without` (a model trained without the orientation embedding) when
/// given. Returns the written paths.
pub fn visualize(
    model: &Model,
    store: &ParamStore,
    image: &Tensor,
    without: Option<(&Model, &ParamStore)>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (before, after) = c2_features(model, store, image)?;
    let mut maps = vec![(BEFORE_FILE, before), (AFTER_FILE, after)];
    if let Some((m, p)) = without {
        maps.push((WITHOUT_FILE, c2_features(m, p, image)?.1));
    }
    maps.into_iter()
        .map(|(name, t)| {
            let path = out_dir.join(name);
            write_heatmap(&channel_mean(&t), t.dim(1), t.dim(2), &path)?;
            Ok(path)
        })
        .collect()
}
