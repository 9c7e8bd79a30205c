//! Synthetic SAR-like ship scenes with instance annotations.
//!
//! Ships are oriented hulls (a rectangle ending in an elliptical bow) drawn
//! brighter than the sea. Inshore scenes add a wavy land region with bright
//! clutter; ships touching land are occluded by it. The whole intensity map
//! is multiplied by L-look gamma speckle (shape `L`, mean 1), quantized to
//! `k/255` and replicated to three channels.
//!
//! Randomness comes from `ChaCha8Rng::seed_from_u64(seed)`; dataset image
//! `i` uses seed `seed + i`.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::coco::{
    rasterize_polygons, write_json, CocoAnnotation, CocoDataset, CocoImage, Rle, Segmentation,
    SHIP_CATEGORY_ID,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::{InstanceSet, Mask};

/// Minimum annotated mask area in pixels.
pub const MIN_AREA: usize = 4;

fn default_attempts() -> usize {
    200
}

/// Parameters of one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub image_size: usize,
    /// Inclusive range of requested ships.
    pub ship_count: [usize; 2],
    /// Hull length range in pixels.
    pub length: [f64; 2],
    /// Hull beam as a fraction of its length.
    pub beam_ratio: [f64; 2],
    /// Fixed heading in radians; uniform on `[0, π)` when absent.
    #[serde(default)]
    pub orientation: Option<f64>,
    /// Minimum gap between ships in pixels (ignored in dense mode).
    pub min_separation: f64,
    /// Pack ships side by side in parallel rows with sub-2-pixel gaps.
    #[serde(default)]
    pub dense: bool,
    /// Speckle looks `L`.
    pub looks: u32,
    #[serde(default)]
    pub shoreline: bool,
    pub seed: u64,
    pub sea_level: f64,
    pub ship_level: [f64; 2],
    #[serde(default = "default_attempts")]
    pub max_attempts: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 128,
            ship_count: [1, 4],
            length: [12.0, 48.0],
            beam_ratio: [0.18, 0.3],
            orientation: None,
            min_separation: 2.0,
            dense: false,
            looks: 4,
            shoreline: false,
            seed: 0,
            sea_level: 0.12,
            ship_level: [0.6, 0.9],
            max_attempts: default_attempts(),
        }
    }
}

impl SceneSpec {
    /// 256-pixel scenes whose hull lengths cover all three size buckets.
    pub fn benchmark() -> Self {
        Self {
            image_size: 256,
            ship_count: [2, 6],
            length: [10.0, 150.0],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::config("image_size", "must be positive"));
        }
        if self.ship_count[0] > self.ship_count[1] {
            return Err(Error::config("ship_count", "min exceeds max"));
        }
        for (key, r) in [
            ("length", self.length),
            ("beam_ratio", self.beam_ratio),
            ("ship_level", self.ship_level),
        ] {
            if !(r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite()) {
                return Err(Error::config(key, "expected 0 < min <= max"));
            }
        }
        if self.looks == 0 {
            return Err(Error::config("looks", "must be at least 1"));
        }
        if !(self.min_separation >= 0.0) {
            return Err(Error::config("min_separation", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.sea_level) {
            return Err(Error::config("sea_level", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// One annotated ship. `polygon` is kept when the mask is exactly the
/// rasterized hull (no land occlusion).
#[derive(Clone, Debug, PartialEq)]
pub struct Ship {
    pub mask: Mask,
    pub polygon: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[3, H, W]`, values `k/255`.
    pub image: Tensor,
    pub ships: Vec<Ship>,
    pub shoreline: bool,
}

impl Scene {
    pub fn ground_truth(&self) -> InstanceSet {
        InstanceSet::ground_truth(self.ships.iter().map(|s| s.mask.clone()).collect())
    }
}

/// Hull outline as a flat polygon in pixel-edge coordinates.
pub fn hull_polygon(cx: f64, cy: f64, length: f64, beam: f64, heading: f64) -> Vec<f64> {
    let half_l = length / 2.0;
    let half_b = beam / 2.0;
    let bow = beam.min(length / 3.0);
    let u0 = half_l - bow;
    let mut local = vec![(-half_l, -half_b)];
    const STEPS: usize = 8;
    for i in 0..=STEPS {
        let t = -PI / 2.0 + PI * i as f64 / STEPS as f64;
        local.push((u0 + bow * t.cos(), half_b * t.sin()));
    }
    local.push((-half_l, half_b));
    let (sin, cos) = heading.sin_cos();
    local
        .into_iter()
        .flat_map(|(u, v)| [cx + u * cos - v * sin, cy + u * sin + v * cos])
        .collect()
}

fn inside_image(poly: &[f64], size: usize) -> bool {
    poly.iter().all(|&c| (0.0..=size as f64).contains(&c))
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Marks every pixel within `radius` (Euclidean, pixel centers) of `mask`.
fn dilate_into(blocked: &mut [bool], mask: &Mask, radius: f64) {
    let (h, w) = (mask.height, mask.width);
    let r = radius.ceil() as isize;
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    if ((dx * dx + dy * dy) as f64) > radius * radius {
                        continue;
                    }
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        blocked[yy as usize * w + xx as usize] = true;
                    }
                }
            }
        }
    }
}

struct Land {
    mask: Mask,
    clutter: Vec<(f64, f64, f64, f64, f64)>,
    level: f64,
}

fn make_land(rng: &mut ChaCha8Rng, size: usize) -> Land {
    let n = size as f64;
    let side = rng.random_range(0..4u8);
    let depth = rng.random_range(0.15..0.3) * n;
    let (a1, f1, p1) = (
        rng.random_range(0.02..0.06) * n,
        rng.random_range(1.0..3.0),
        rng.random_range(0.0..2.0 * PI),
    );
    let (a2, f2, p2) = (
        rng.random_range(0.0..0.02) * n,
        rng.random_range(4.0..8.0),
        rng.random_range(0.0..2.0 * PI),
    );
    let mask = Mask::from_fn(size, size, |y, x| {
        let (along, across) = match side {
            0 => (x as f64 + 0.5, y as f64 + 0.5),
            1 => (x as f64 + 0.5, n - y as f64 - 0.5),
            2 => (y as f64 + 0.5, x as f64 + 0.5),
            _ => (y as f64 + 0.5, n - x as f64 - 0.5),
        };
        let t = along / n * 2.0 * PI;
        across < depth + a1 * (f1 * t + p1).sin() + a2 * (f2 * t + p2).sin()
    });
    let land_pixels: Vec<(usize, usize)> = (0..size)
        .flat_map(|y| (0..size).map(move |x| (y, x)))
        .filter(|&(y, x)| mask.get(y, x))
        .collect();
    let mut clutter = Vec::new();
    if !land_pixels.is_empty() {
        for _ in 0..rng.random_range(3..8) {
            let (y, x) = land_pixels[rng.random_range(0..land_pixels.len())];
            clutter.push((
                x as f64 + 0.5,
                y as f64 + 0.5,
                rng.random_range(1.0..0.04 * n + 2.0),
                rng.random_range(1.0..0.03 * n + 2.0),
                rng.random_range(0.5..0.95),
            ));
        }
    }
    Land {
        mask,
        clutter,
        level: rng.random_range(0.3..0.45),
    }
}

struct Placed {
    ship: Ship,
    level: f64,
}

fn try_add(
    placed: &mut Vec<Placed>,
    blocked: &mut [bool],
    land: Option<&Land>,
    poly: Vec<f64>,
    level: f64,
    size: usize,
    separation: f64,
) -> bool {
    if !inside_image(&poly, size) {
        return false;
    }
    let hull = rasterize_polygons(std::slice::from_ref(&poly), size, size);
    if hull.area() < MIN_AREA || hull.data.iter().zip(blocked.iter()).any(|(&m, &b)| m && b) {
        return false;
    }
    let (mask, polygon) = match land {
        Some(l) if hull.intersection(&l.mask) > 0 => {
            let visible = Mask {
                height: size,
                width: size,
                data: hull
                    .data
                    .iter()
                    .zip(&l.mask.data)
                    .map(|(&h, &g)| h && !g)
                    .collect(),
            };
            // mostly afloat, and large enough to annotate
            if 2 * visible.area() < hull.area() || visible.area() < MIN_AREA {
                return false;
            }
            (visible, None)
        }
        _ => (hull.clone(), Some(poly)),
    };
    dilate_into(blocked, &hull, separation);
    placed.push(Placed {
        ship: Ship { mask, polygon },
        level,
    });
    true
}

fn place_scattered(
    rng: &mut ChaCha8Rng,
    spec: &SceneSpec,
    count: usize,
    land: Option<&Land>,
) -> Vec<Placed> {
    let n = spec.image_size as f64;
    let mut blocked = vec![false; spec.image_size * spec.image_size];
    let mut placed = Vec::new();
    let mut attempts = 0;
    while placed.len() < count && attempts < spec.max_attempts {
        attempts += 1;
        let length = uniform(rng, spec.length);
        let beam = (length * uniform(rng, spec.beam_ratio)).max(1.5);
        let heading = spec
            .orientation
            .unwrap_or_else(|| rng.random_range(0.0..PI));
        let (cx, cy) = (rng.random_range(0.0..n), rng.random_range(0.0..n));
        let level = uniform(rng, spec.ship_level);
        let poly = hull_polygon(cx, cy, length, beam, heading);
        try_add(
            &mut placed,
            &mut blocked,
            land,
            poly,
            level,
            spec.image_size,
            spec.min_separation,
        );
    }
    placed
}

/// Parallel berths: ships of one size and heading, side by side with gaps
/// of 0.5 to 1 pixel, in rows along the heading. Every block holds at least
/// two ships unless only one was requested.
fn place_dense(
    rng: &mut ChaCha8Rng,
    spec: &SceneSpec,
    count: usize,
    land: Option<&Land>,
) -> Vec<Placed> {
    let n = spec.image_size as f64;
    let mut blocked = vec![false; spec.image_size * spec.image_size];
    let mut placed = Vec::new();
    let mut attempts = 0;
    while placed.len() < count && attempts < spec.max_attempts {
        attempts += 1;
        let length = uniform(rng, spec.length);
        let beam = (length * uniform(rng, spec.beam_ratio)).max(2.0);
        let heading = spec
            .orientation
            .unwrap_or_else(|| rng.random_range(0.0..PI));
        let (sin, cos) = heading.sin_cos();
        let (ox, oy) = (rng.random_range(0.0..n), rng.random_range(0.0..n));
        let remaining = count - placed.len();
        if remaining == 1 && count > 1 {
            // a lone berth would not be packed against anything
            break;
        }
        let per_row = rng.random_range(1..=remaining.min(6));
        let rows = remaining.div_ceil(per_row).min(2);
        let (start, snapshot) = (placed.len(), blocked.clone());
        // centre the block of berths on the sampled origin
        let mut along = -((rows - 1) as f64) * (length + 0.75) / 2.0;
        for _ in 0..rows {
            let mut across = -((per_row - 1) as f64) * (beam + 0.75) / 2.0;
            for _ in 0..per_row {
                if placed.len() >= count {
                    break;
                }
                let cx = ox + along * cos - across * sin;
                let cy = oy + along * sin + across * cos;
                let level = uniform(rng, spec.ship_level);
                let poly = hull_polygon(cx, cy, length, beam, heading);
                try_add(
                    &mut placed,
                    &mut blocked,
                    land,
                    poly,
                    level,
                    spec.image_size,
                    0.0,
                );
                across += beam + rng.random_range(0.5..1.0);
            }
            along += length + rng.random_range(0.5..1.0);
        }
        if placed.len() == start + 1 && count > 1 {
            placed.pop();
            blocked = snapshot;
        }
    }
    placed
}

fn render(
    rng: &mut ChaCha8Rng,
    spec: &SceneSpec,
    placed: &[Placed],
    land: Option<&Land>,
) -> Tensor {
    let size = spec.image_size;
    let mut level = vec![spec.sea_level; size * size];
    if let Some(l) = land {
        for (i, v) in level.iter_mut().enumerate() {
            if l.mask.data[i] {
                *v = l.level;
            }
        }
        for &(cx, cy, rx, ry, b) in &l.clutter {
            for y in 0..size {
                for x in 0..size {
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    if dx * dx + dy * dy <= 1.0 && l.mask.get(y, x) {
                        level[y * size + x] = b;
                    }
                }
            }
        }
    }
    for p in placed {
        for (i, &m) in p.ship.mask.data.iter().enumerate() {
            if m {
                level[i] = p.level;
            }
        }
    }
    let looks = spec.looks as f64;
    let gamma = Gamma::new(looks, 1.0 / looks).expect("positive looks");
    let plane: Vec<f64> = level
        .iter()
        .map(|&v| ((v * gamma.sample(rng)).clamp(0.0, 1.0) * 255.0).round() / 255.0)
        .collect();
    let mut data = Vec::with_capacity(3 * size * size);
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    Tensor::new(&[3, size, size], data)
}

/// Draws one scene. Fewer ships than requested are returned when placement
/// runs out of attempts.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let count = rng.random_range(spec.ship_count[0]..=spec.ship_count[1]);
    let land = spec.shoreline.then(|| make_land(&mut rng, spec.image_size));
    let placed = if spec.dense {
        place_dense(&mut rng, spec, count, land.as_ref())
    } else {
        place_scattered(&mut rng, spec, count, land.as_ref())
    };
    let image = render(&mut rng, spec, &placed, land.as_ref());
    Ok(Scene {
        image,
        ships: placed.into_iter().map(|p| p.ship).collect(),
        shoreline: spec.shoreline,
    })
}

/// Dataset-level settings on top of a scene template.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub scene: SceneSpec,
    pub num_images: usize,
    /// Fraction of images with a shoreline.
    pub inshore_fraction: f64,
    /// Fraction of images (taken from the end) in the test split.
    pub test_fraction: f64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        for (key, v) in [
            ("inshore_fraction", self.inshore_fraction),
            ("test_fraction", self.test_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(key, "must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Scene spec of image `index`.
    pub fn scene_for(&self, index: usize) -> SceneSpec {
        let seed = self.scene.seed.wrapping_add(index as u64);
        let inshore = if self.inshore_fraction >= 1.0 {
            true
        } else if self.inshore_fraction <= 0.0 {
            false
        } else {
            // separate stream so the choice does not perturb the scene itself
            let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5107_e11e_u64);
            r.random::<f64>() < self.inshore_fraction
        };
        SceneSpec {
            seed,
            shoreline: inshore,
            ..self.scene.clone()
        }
    }
}

/// Split membership by image id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub train: Vec<u64>,
    pub test: Vec<u64>,
    pub inshore: Vec<u64>,
    pub offshore: Vec<u64>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Ids of a named split: `train`, `test`, `inshore`, `offshore` or `all`.
    pub fn split(&self, name: &str) -> Option<Vec<u64>> {
        let mut ids = match name {
            "train" => self.train.clone(),
            "test" => self.test.clone(),
            "inshore" => self.inshore.clone(),
            "offshore" => self.offshore.clone(),
            "all" => self.train.iter().chain(&self.test).copied().collect(),
            _ => return None,
        };
        ids.sort_unstable();
        Some(ids)
    }
}

pub const IMAGES_DIR: &str = "images";
pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Image ids start at 1; image `i` (0-based) gets id `i + 1`.
pub fn image_file_name(id: u64) -> String {
    format!("{IMAGES_DIR}/{id:06}.png")
}

/// Writes `images/*.png`, `annotations.json` and `manifest.json`.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<CocoDataset> {
    spec.validate()?;
    let img_dir = out_dir.join(IMAGES_DIR);
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let n_test = (spec.num_images as f64 * spec.test_fraction).round() as usize;
    let n_train = spec.num_images - n_test;
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut manifest = Manifest::default();
    for i in 0..spec.num_images {
        let id = i as u64 + 1;
        let scene = generate_scene(&spec.scene_for(i))?;
        let file_name = image_file_name(id);
        save_png(&scene.image, &out_dir.join(&file_name))?;
        let size = spec.scene.image_size;
        images.push(CocoImage {
            id,
            file_name,
            height: size,
            width: size,
        });
        for ship in &scene.ships {
            let segmentation = match &ship.polygon {
                Some(p) => Segmentation::Polygons(vec![p.clone()]),
                None => Segmentation::Rle(Rle::from_mask(&ship.mask)),
            };
            annotations.push(CocoAnnotation {
                id: annotations.len() as u64 + 1,
                image_id: id,
                category_id: SHIP_CATEGORY_ID,
                segmentation,
                area: ship.mask.area() as f64,
                bbox: ship.mask.bbox(),
                iscrowd: 0,
            });
        }
        if i < n_train {
            manifest.train.push(id);
        } else {
            manifest.test.push(id);
        }
        if scene.shoreline {
            manifest.inshore.push(id);
        } else {
            manifest.offshore.push(id);
        }
    }
    let dataset = CocoDataset::new(images, annotations);
    dataset.save(&out_dir.join(ANNOTATIONS_FILE))?;
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(dataset)
}

/// Writes a `[3, H, W]` image in `[0, 1]` as an 8-bit RGB PNG.
pub fn save_png(image: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = (image.dim(1), image.dim(2));
    let d = image.data();
    let mut buf = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            buf.push((d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    image::save_buffer(
        path,
        &buf,
        w as u32,
        h as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| Error::format(path, e.to_string()))
}

/// Reads a PNG as a `[3, H, W]` tensor with values `k/255`.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, h, w], data))
}
