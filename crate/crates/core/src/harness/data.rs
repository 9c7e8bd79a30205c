//! Loading a generated dataset into memory and training-time augmentation.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coco::{CocoDataset, SHIP_CATEGORY_ID};
use crate::error::{Error, Result};
use crate::resample::ResamplePlan;
use crate::synth::{load_png, Manifest, ANNOTATIONS_FILE, MANIFEST_FILE};
use crate::tensor::Tensor;
use crate::types::Mask;

/// One image with its ground-truth ship masks.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: u64,
    pub image: Tensor,
    pub masks: Vec<Mask>,
}

/// A dataset directory held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub coco: CocoDataset,
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let ann = dir.join(ANNOTATIONS_FILE);
        if !ann.exists() {
            return Err(Error::Input(format!(
                "no dataset at {} (missing {ANNOTATIONS_FILE})",
                dir.display()
            )));
        }
        let coco = CocoDataset::load(&ann)?;
        let manifest = Manifest::load(&dir.join(MANIFEST_FILE))?;
        let mut samples = Vec::with_capacity(coco.images.len());
        for img in &coco.images {
            let image = load_png(&dir.join(&img.file_name))?;
            let masks = coco
                .annotations
                .iter()
                .filter(|a| a.image_id == img.id && a.category_id == SHIP_CATEGORY_ID)
                .map(|a| a.segmentation.to_mask(img.height, img.width))
                .collect::<Result<Vec<_>>>()?;
            samples.push(Sample {
                id: img.id,
                image,
                masks,
            });
        }
        Ok(Self {
            coco,
            manifest,
            samples,
        })
    }

    /// Samples of a named split (`train`, `test`, `inshore`, `offshore`, `all`).
    pub fn split(&self, name: &str) -> Result<Vec<&Sample>> {
        let ids = self
            .manifest
            .split(name)
            .ok_or_else(|| Error::config("split", format!("unknown split `{name}`")))?;
        ids.iter()
            .map(|id| {
                self.samples
                    .iter()
                    .find(|s| s.id == *id)
                    .ok_or_else(|| Error::Input(format!("manifest lists missing image {id}")))
            })
            .collect()
    }
}

/// Training-time augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Probability of a horizontal flip.
    pub flip: f64,
    /// Uniform range of the isotropic rescale factor; `[1, 1]` disables it.
    pub scale: [f64; 2],
    /// Crop or zero-pad the rescaled image back to its original size at a
    /// random offset. When off, the rescaled image is resized back instead,
    /// which makes scaling a no-op.
    pub crop: bool,
}

impl AugmentConfig {
    pub const NONE: Self = Self {
        flip: 0.0,
        scale: [1.0, 1.0],
        crop: false,
    };

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip) {
            return Err(Error::config("flip", "must lie in [0, 1]"));
        }
        let [lo, hi] = self.scale;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config("scale", "need 0 < min <= max"));
        }
        Ok(())
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: 0.5,
            scale: [0.8, 1.2],
            crop: true,
        }
    }
}

fn flip_plane(data: &mut [f64], h: usize, w: usize) {
    for row in data.chunks_mut(w).take(h) {
        row.reverse();
    }
}

/// Applies flip and rescale-then-crop to an image and its masks. Masks that
/// leave the frame entirely are dropped.
pub fn augment(
    image: &Tensor,
    masks: &[Mask],
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> (Tensor, Vec<Mask>) {
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    let mut img = image.data().to_vec();
    let mut planes: Vec<Vec<f64>> = masks.iter().map(|m| m.to_tensor().into_data()).collect();
    // draw every random number up front so the stream does not depend on
    // which branches run
    let flip = rng.random::<f64>() < cfg.flip;
    let s = if cfg.scale[0] < cfg.scale[1] {
        rng.random_range(cfg.scale[0]..=cfg.scale[1])
    } else {
        cfg.scale[0]
    };
    let (oy, ox) = (rng.random::<f64>(), rng.random::<f64>());

    if flip {
        for p in img.chunks_mut(h * w) {
            flip_plane(p, h, w);
        }
        for p in &mut planes {
            flip_plane(p, h, w);
        }
    }
    if cfg.crop && s != 1.0 {
        let (sh, sw) = (
            ((h as f64 * s).round() as usize).max(1),
            ((w as f64 * s).round() as usize).max(1),
        );
        let scaled = ResamplePlan::resize_bilinear(h, w, sh, sw).apply(&img, c);
        let near = ResamplePlan::resize_nearest(h, w, sh, sw);
        let scaled_masks: Vec<Vec<f64>> = planes.iter().map(|p| near.apply(p, 1)).collect();
        // offset of the output window inside the scaled image; negative
        // values pad
        let dy = ((sh as f64 - h as f64) * oy).floor() as i64;
        let dx = ((sw as f64 - w as f64) * ox).floor() as i64;
        let window = |src: &[f64], channels: usize| -> Vec<f64> {
            let mut out = vec![0.0; channels * h * w];
            for ch in 0..channels {
                for y in 0..h {
                    let sy = y as i64 + dy;
                    if sy < 0 || sy >= sh as i64 {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as i64 + dx;
                        if sx >= 0 && sx < sw as i64 {
                            out[(ch * h + y) * w + x] =
                                src[(ch * sh + sy as usize) * sw + sx as usize];
                        }
                    }
                }
            }
            out
        };
        img = window(&scaled, c);
        planes = scaled_masks.iter().map(|p| window(p, 1)).collect();
    }
    let out_masks = planes
        .iter()
        .map(|p| Mask {
            height: h,
            width: w,
            data: p.iter().map(|&v| v > 0.5).collect(),
        })
        .filter(|m| m.area() > 0)
        .collect();
    (Tensor::new(&[c, h, w], img), out_masks)
}
