//! COCO-format annotation files: images, instance annotations with polygon
//! or run-length encoded masks, and detection results.
//!
//! RLE counts run over the mask in column-major order, starting with a
//! background run. Polygons are rasterized by testing pixel centers
//! `(x + 0.5, y + 0.5)` against the even-odd rule; several polygons in one
//! annotation are united.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Mask;

pub const SHIP_CATEGORY_ID: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub segmentation: Segmentation,
    pub area: f64,
    pub bbox: [f64; 4],
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Segmentation {
    /// Flat `[x0, y0, x1, y1, ...]` outlines in pixel-edge coordinates.
    Polygons(Vec<Vec<f64>>),
    Rle(Rle),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`.
    pub size: [usize; 2],
    pub counts: RleCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RleCounts {
    Compressed(String),
    Uncompressed(Vec<u64>),
}

/// One entry of a results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoResult {
    pub image_id: u64,
    pub category_id: u64,
    pub segmentation: Rle,
    pub score: f64,
}

impl CocoDataset {
    pub fn new(images: Vec<CocoImage>, annotations: Vec<CocoAnnotation>) -> Self {
        Self {
            images,
            annotations,
            categories: vec![CocoCategory {
                id: SHIP_CATEGORY_ID,
                name: "ship".into(),
            }],
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn image(&self, id: u64) -> Option<&CocoImage> {
        self.images.iter().find(|i| i.id == id)
    }

    /// Masks of image `id` in annotation order, rasterized at the image size.
    pub fn masks_for(&self, id: u64) -> Result<Vec<Mask>> {
        let img = self
            .image(id)
            .ok_or_else(|| Error::Input(format!("unknown image id {id}")))?;
        self.annotations
            .iter()
            .filter(|a| a.image_id == id)
            .map(|a| a.segmentation.to_mask(img.height, img.width))
            .collect()
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_results(path: &Path) -> Result<Vec<CocoResult>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

impl Segmentation {
    pub fn to_mask(&self, height: usize, width: usize) -> Result<Mask> {
        match self {
            Segmentation::Polygons(polys) => Ok(rasterize_polygons(polys, height, width)),
            Segmentation::Rle(r) => {
                if r.size != [height, width] {
                    return Err(Error::Shape(format!(
                        "RLE size {:?} does not match image {height}x{width}",
                        r.size
                    )));
                }
                r.to_mask()
            }
        }
    }
}

impl Rle {
    pub fn from_mask(mask: &Mask) -> Self {
        Self {
            size: [mask.height, mask.width],
            counts: RleCounts::Compressed(counts_to_string(&encode_counts(mask))),
        }
    }

    pub fn to_mask(&self) -> Result<Mask> {
        let counts = match &self.counts {
            RleCounts::Compressed(s) => string_to_counts(s)?,
            RleCounts::Uncompressed(c) => c.clone(),
        };
        decode_counts(&counts, self.size[0], self.size[1])
    }
}

/// Column-major run lengths, beginning with a (possibly empty) background run.
pub fn encode_counts(mask: &Mask) -> Vec<u64> {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for x in 0..mask.width {
        for y in 0..mask.height {
            let v = mask.get(y, x);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    counts
}

pub fn decode_counts(counts: &[u64], height: usize, width: usize) -> Result<Mask> {
    let total: u64 = counts.iter().sum();
    if total != (height * width) as u64 {
        return Err(Error::Input(format!(
            "RLE covers {total} pixels, expected {}",
            height * width
        )));
    }
    let mut mask = Mask::empty(height, width);
    let mut idx = 0usize;
    for (i, &c) in counts.iter().enumerate() {
        let fg = i % 2 == 1;
        for _ in 0..c {
            if fg {
                mask.set(idx % height, idx / height, true);
            }
            idx += 1;
        }
    }
    Ok(mask)
}

/// Compact ASCII form of run lengths: each run (after the second, as a
/// difference to the run two back) in 5-bit little-endian groups with a
/// continuation bit, offset by 48.
pub fn counts_to_string(counts: &[u64]) -> String {
    let mut out = String::new();
    for i in 0..counts.len() {
        let mut x = counts[i] as i64;
        if i > 2 {
            x -= counts[i - 2] as i64;
        }
        loop {
            let mut c = x & 0x1f;
            x >>= 5;
            let more = if c & 0x10 != 0 { x != -1 } else { x != 0 };
            if more {
                c |= 0x20;
            }
            out.push((c as u8 + 48) as char);
            if !more {
                break;
            }
        }
    }
    out
}

pub fn string_to_counts(s: &str) -> Result<Vec<u64>> {
    let bytes = s.as_bytes();
    let mut counts: Vec<i64> = Vec::new();
    let mut p = 0;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0;
        loop {
            let Some(&b) = bytes.get(p) else {
                return Err(Error::Input("truncated RLE string".into()));
            };
            if !(48..48 + 64).contains(&b) {
                return Err(Error::Input(format!(
                    "invalid RLE character {:?}",
                    b as char
                )));
            }
            let c = (b - 48) as i64;
            x |= (c & 0x1f) << (5 * k);
            p += 1;
            k += 1;
            if c & 0x20 == 0 {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
        }
        if counts.len() > 2 {
            x += counts[counts.len() - 2];
        }
        if x < 0 {
            return Err(Error::Input("negative run in RLE string".into()));
        }
        counts.push(x);
    }
    Ok(counts.into_iter().map(|c| c as u64).collect())
}

/// Pixel-center even-odd rasterization of one or more flat polygons.
pub fn rasterize_polygons(polys: &[Vec<f64>], height: usize, width: usize) -> Mask {
    let mut mask = Mask::empty(height, width);
    let mut xs = Vec::new();
    for poly in polys {
        let pts: Vec<(f64, f64)> = poly.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        if pts.len() < 3 {
            continue;
        }
        for y in 0..height {
            let yc = y as f64 + 0.5;
            xs.clear();
            for i in 0..pts.len() {
                let (x1, y1) = pts[i];
                let (x2, y2) = pts[(i + 1) % pts.len()];
                if (y1 <= yc) != (y2 <= yc) {
                    xs.push(x1 + (yc - y1) * (x2 - x1) / (y2 - y1));
                }
            }
            xs.sort_by(f64::total_cmp);
            for pair in xs.chunks_exact(2) {
                // centers x + 0.5 in [a, b)
                let start = (pair[0] - 0.5).ceil().max(0.0) as usize;
                let end = ((pair[1] - 0.5).ceil().max(0.0) as usize).min(width);
                for x in start..end {
                    mask.set(y, x, true);
                }
            }
        }
    }
    mask
}
