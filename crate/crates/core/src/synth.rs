//! Seeded synthetic corpus: textured products with shape anomalies,
//! ground-truth masks, and noisy anomaly maps that mimic an upstream
//! detector (blurred responses, missed regions, low-score false blobs).

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{
    connected_components, load_anomaly_map, load_gray_image, load_mask, save_anomaly_map_png16, save_gray_image,
    save_mask, AnomalyMap, BinaryMask, BoundingBox, Connectivity, GrayImage, RasterError,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    ConfigInvalid(String),
    #[error("manifest line {line}: {source}")]
    Manifest { line: usize, source: serde_json::Error },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeClass {
    Normal,
    LineScratch,
    Blob,
    RingHole,
    SpeckleCluster,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 5] =
        [ShapeClass::Normal, ShapeClass::LineScratch, ShapeClass::Blob, ShapeClass::RingHole, ShapeClass::SpeckleCluster];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Normal => "normal",
            ShapeClass::LineScratch => "line-scratch",
            ShapeClass::Blob => "blob",
            ShapeClass::RingHole => "ring-hole",
            ShapeClass::SpeckleCluster => "speckle-cluster",
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeClass {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ShapeClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| SynthError::ConfigInvalid(format!("unknown class {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Expected false-positive blobs per image (Poisson mean).
    pub fp_blob_rate: f64,
    /// Probability that a GT region leaves no trace in the map.
    pub miss_rate: f64,
    /// Box-blur radius applied to each GT region's response.
    pub blur_radius: usize,
    /// Stddev of per-region score around the image's base score.
    pub score_jitter: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { fp_blob_rate: 0.5, miss_rate: 0.05, blur_radius: 2, score_jitter: 0.05 }
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self { fp_blob_rate: 0.0, miss_rate: 0.0, blur_radius: 0, score_jitter: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub image_side: usize,
    pub num_unlabeled: usize,
    pub num_labeled: usize,
    /// Classes of the unlabeled split; `normal`, if present, must come first.
    pub novel_classes: Vec<ShapeClass>,
    /// Classes of the labeled split.
    pub known_classes: Vec<ShapeClass>,
    pub noise: NoiseConfig,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_side: 64,
            num_unlabeled: 60,
            num_labeled: 40,
            novel_classes: vec![ShapeClass::Normal, ShapeClass::LineScratch, ShapeClass::RingHole],
            known_classes: vec![ShapeClass::Blob, ShapeClass::SpeckleCluster],
            noise: NoiseConfig::default(),
            seed: 0,
        }
    }
}

/// Largest shape extent in pixels; the image must be at least twice this.
const MAX_SHAPE_EXTENT: usize = 28;

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::ConfigInvalid(m));
        if self.image_side < 2 * MAX_SHAPE_EXTENT {
            return bad(format!("image_side must be >= {}", 2 * MAX_SHAPE_EXTENT));
        }
        if self.novel_classes.is_empty() && self.num_unlabeled > 0 {
            return bad("unlabeled images requested without novel classes".into());
        }
        if self.known_classes.is_empty() && self.num_labeled > 0 {
            return bad("labeled images requested without known classes".into());
        }
        let mut all: Vec<ShapeClass> = self.novel_classes.iter().chain(&self.known_classes).copied().collect();
        all.sort();
        let n = all.len();
        all.dedup();
        if all.len() != n {
            return bad("novel and known classes must be distinct and disjoint".into());
        }
        if self.known_classes.contains(&ShapeClass::Normal) {
            return bad("normal cannot be a known class".into());
        }
        if self.novel_classes.iter().skip(1).any(|&c| c == ShapeClass::Normal) {
            return bad("normal must be the first novel class".into());
        }
        let n = &self.noise;
        if !(0.0..=1.0).contains(&n.miss_rate) || !(n.fp_blob_rate >= 0.0) || !(n.score_jitter >= 0.0) {
            return bad("noise rates must be in range".into());
        }
        Ok(())
    }

    /// Class index used by evaluation: known classes first, then novel.
    pub fn class_index(&self, class: ShapeClass) -> Option<usize> {
        self.known_classes
            .iter()
            .chain(&self.novel_classes)
            .position(|&c| c == class)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Labeled,
    Unlabeled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ShapeParams {
    LineScratch { cx: f64, cy: f64, angle: f64, length: f64, width: f64 },
    Blob { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    RingHole { cx: f64, cy: f64, outer: f64, thickness: f64 },
    SpeckleCluster { dots: Vec<(f64, f64)>, radius: f64 },
}

impl ShapeParams {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            ShapeParams::LineScratch { cx, cy, angle, length, width } => {
                let (dx, dy) = (x - cx, y - cy);
                let (c, s) = (angle.cos(), angle.sin());
                let along = (dx * c + dy * s).clamp(-length / 2.0, length / 2.0);
                let (px, py) = (cx + along * c, cy + along * s);
                ((x - px).powi(2) + (y - py).powi(2)).sqrt() <= width / 2.0
            }
            ShapeParams::Blob { cx, cy, rx, ry, angle } => {
                let (dx, dy) = (x - cx, y - cy);
                let (c, s) = (angle.cos(), angle.sin());
                let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            ShapeParams::RingHole { cx, cy, outer, thickness } => {
                let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                d <= *outer && d > outer - thickness
            }
            ShapeParams::SpeckleCluster { dots, radius } => {
                dots.iter().any(|(dx, dy)| ((x - dx).powi(2) + (y - dy).powi(2)).sqrt() <= *radius)
            }
        }
    }

    fn rasterize(&self, side: usize) -> BinaryMask {
        BinaryMask::from_fn(side, side, |x, y| self.contains(x as f64 + 0.5, y as f64 + 0.5))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionInfo {
    /// 1-based index in raster-scan order of the GT mask's components.
    pub index: usize,
    pub bbox: BoundingBox,
    pub area: usize,
    pub score: f64,
    /// True when the region was dropped from the anomaly map.
    pub missed: bool,
    pub shape: ShapeParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub class: ShapeClass,
    pub split: Split,
    /// Index into known classes for labeled images.
    pub label: Option<usize>,
    /// Evaluation index over known then novel classes.
    pub class_index: usize,
    pub regions: Vec<RegionInfo>,
    pub fp_blobs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    pub entry: ManifestEntry,
    pub image: GrayImage,
    pub gt_mask: BinaryMask,
    pub map: AnomalyMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: SynthConfig,
    pub images: Vec<SynthImage>,
}

impl Corpus {
    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.images.iter().map(|i| i.entry.clone()).collect()
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn sample_shape<R: Rng>(rng: &mut R, class: ShapeClass, side: f64) -> ShapeParams {
    let margin = MAX_SHAPE_EXTENT as f64 / 2.0 + 2.0;
    let cx = rng.random_range(margin..side - margin);
    let cy = rng.random_range(margin..side - margin);
    match class {
        ShapeClass::LineScratch => ShapeParams::LineScratch {
            cx,
            cy,
            angle: rng.random_range(0.0..std::f64::consts::PI),
            length: rng.random_range(16.0..26.0),
            width: rng.random_range(3.0..4.0),
        },
        ShapeClass::Blob => {
            let rx = rng.random_range(4.5..8.0);
            ShapeParams::Blob { cx, cy, rx, ry: rx * rng.random_range(0.7..1.0), angle: rng.random_range(0.0..3.2) }
        }
        ShapeClass::RingHole => {
            ShapeParams::RingHole { cx, cy, outer: rng.random_range(7.0..10.0), thickness: rng.random_range(3.0..4.0) }
        }
        ShapeClass::SpeckleCluster => {
            let n = rng.random_range(6..10);
            let mut dots = vec![(cx, cy)];
            while dots.len() < n {
                let (bx, by) = dots[rng.random_range(0..dots.len())];
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                let d = rng.random_range(3.0..4.0);
                let (x, y) = (bx + d * a.cos(), by + d * a.sin());
                if ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() < 9.0 {
                    dots.push((x, y));
                }
            }
            ShapeParams::SpeckleCluster { dots, radius: 2.2 }
        }
        ShapeClass::Normal => unreachable!("normal images carry no shapes"),
    }
}

fn dilate_box(b: &BoundingBox, by: usize, side: usize) -> BoundingBox {
    BoundingBox {
        min_x: b.min_x.saturating_sub(by),
        min_y: b.min_y.saturating_sub(by),
        max_x: (b.max_x + by).min(side - 1),
        max_y: (b.max_y + by).min(side - 1),
    }
}

fn boxes_overlap(a: &BoundingBox, b: &BoundingBox) -> bool {
    a.min_x <= b.max_x && b.min_x <= a.max_x && a.min_y <= b.max_y && b.min_y <= a.max_y
}

// coarse value noise, bilinear between random lattice values
fn texture<R: Rng>(rng: &mut R, side: usize) -> Vec<f64> {
    let cell = 8usize;
    let n = side / cell + 2;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let base = rng.random_range(105.0..150.0);
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let (fx, fy) = (x as f64 / cell as f64, y as f64 / cell as f64);
            let (ix, iy) = (fx as usize, fy as usize);
            let (tx, ty) = (fx - ix as f64, fy - iy as f64);
            let at = |i: usize, j: usize| lattice[j * n + i];
            let v = at(ix, iy) * (1.0 - tx) * (1.0 - ty)
                + at(ix + 1, iy) * tx * (1.0 - ty)
                + at(ix, iy + 1) * (1.0 - tx) * ty
                + at(ix + 1, iy + 1) * tx * ty;
            out.push(base + 12.0 * v + rng.random_range(-4.0..4.0));
        }
    }
    out
}

fn paint(pixels: &mut [f64], side: usize, shape: &ShapeParams, mask: &BinaryMask, rng: &mut impl Rng) {
    let delta = rng.random_range(50.0..70.0);
    for y in 0..side {
        for x in 0..side {
            if !mask.get(x, y) {
                continue;
            }
            let p = &mut pixels[y * side + x];
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            *p += match shape {
                ShapeParams::LineScratch { .. } => -delta,
                ShapeParams::Blob { cx, cy, rx, .. } => {
                    let d = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt() / rx;
                    -0.8 * delta * (1.0 - 0.5 * d.min(1.0))
                }
                ShapeParams::RingHole { .. } => delta,
                ShapeParams::SpeckleCluster { dots, .. } => {
                    let d = dots.iter().map(|(dx, dy)| ((fx - dx).powi(2) + (fy - dy).powi(2)).sqrt()).fold(f64::MAX, f64::min);
                    if d < 1.2 { delta } else { -0.6 * delta }
                }
            };
        }
    }
}

/// Separable box blur of a 0/1 mask, zero outside the image.
fn box_blur_mask(mask: &BinaryMask, r: usize) -> Vec<f64> {
    let (w, h) = (mask.width(), mask.height());
    let src: Vec<f64> = mask.data().iter().map(|&v| v as f64).collect();
    if r == 0 {
        return src;
    }
    let k = (2 * r + 1) as f64;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            tmp[y * w + x] = (lo..=hi).map(|i| src[y * w + i]).sum::<f64>() / k;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let lo = y.saturating_sub(r);
            let hi = (y + r).min(h - 1);
            out[y * w + x] = (lo..=hi).map(|j| tmp[j * w + x]).sum::<f64>() / k;
        }
    }
    out
}

fn render(cfg: &SynthConfig, index: usize, class: ShapeClass, split: Split) -> Result<SynthImage, SynthError> {
    let side = cfg.image_side;
    let mut rng = rng_for(cfg.seed, index as u64);
    let mut pixels = texture(&mut rng, side);

    let mut shapes: Vec<(ShapeParams, BinaryMask, BoundingBox)> = Vec::new();
    if class != ShapeClass::Normal {
        let wanted = rng.random_range(1..=2usize);
        let mut attempts = 0;
        while shapes.len() < wanted && attempts < 50 {
            attempts += 1;
            let shape = sample_shape(&mut rng, class, side as f64);
            let mask = shape.rasterize(side);
            let comps = connected_components(&mask, Connectivity::Eight);
            if comps.count != 1 {
                continue;
            }
            let bbox = comps.boxes[0];
            let clear = shapes.iter().all(|(_, _, b)| !boxes_overlap(&dilate_box(b, 6, side), &bbox));
            if clear {
                shapes.push((shape, mask, bbox));
            }
        }
    }
    for (shape, mask, _) in &shapes {
        paint(&mut pixels, side, shape, mask, &mut rng);
    }
    let image = GrayImage::new(side, side, pixels.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect())?;

    let gt_mask = BinaryMask::from_fn(side, side, |x, y| shapes.iter().any(|(_, m, _)| m.get(x, y)));
    let gt_regions = connected_components(&gt_mask, Connectivity::Eight);

    let base = rng.random_range(0.6..=1.0);
    let jitter = Normal::new(0.0, cfg.noise.score_jitter.max(1e-12)).expect("finite stddev");
    let mut map = vec![0.0f64; side * side];
    let mut regions = Vec::with_capacity(shapes.len());
    for (shape, mask, bbox) in &shapes {
        let score = if cfg.noise.score_jitter > 0.0 { (base + jitter.sample(&mut rng)).clamp(0.0, 1.0) } else { base };
        let missed = rng.random_bool(cfg.noise.miss_rate);
        if !missed {
            // blur spreads the region, then its peak is restored to the score
            let blurred = box_blur_mask(mask, cfg.noise.blur_radius);
            let peak = blurred.iter().cloned().fold(0.0, f64::max);
            for (m, b) in map.iter_mut().zip(blurred) {
                *m = m.max(score * b / peak);
            }
        }
        let first = mask.data().iter().position(|&v| v != 0).expect("shapes are non-empty");
        let index = gt_regions.labels[first] as usize;
        regions.push(RegionInfo { index, bbox: *bbox, area: mask.count_ones(), score, missed, shape: shape.clone() });
    }
    regions.sort_by_key(|r| r.index);

    // normal images are over-detections only, so they always carry at least one
    let fp_count = if cfg.noise.fp_blob_rate > 0.0 {
        let n = Poisson::new(cfg.noise.fp_blob_rate).expect("positive rate").sample(&mut rng) as usize;
        if class == ShapeClass::Normal { n.max(1) } else { n }
    } else {
        0
    };
    let mut fp_blobs = 0;
    for _ in 0..fp_count {
        for _attempt in 0..20 {
            let sigma: f64 = rng.random_range(1.5..3.0);
            let peak: f64 = rng.random_range(0.2..0.5);
            let cx = rng.random_range(4.0..side as f64 - 4.0);
            let cy = rng.random_range(4.0..side as f64 - 4.0);
            let reach = (3.0 * sigma).ceil() as usize;
            let fp_box = BoundingBox {
                min_x: (cx as usize).saturating_sub(reach),
                min_y: (cy as usize).saturating_sub(reach),
                max_x: (cx as usize + reach).min(side - 1),
                max_y: (cy as usize + reach).min(side - 1),
            };
            if shapes.iter().any(|(_, _, b)| boxes_overlap(&dilate_box(b, 4, side), &fp_box)) {
                continue;
            }
            for y in fp_box.min_y..=fp_box.max_y {
                for x in fp_box.min_x..=fp_box.max_x {
                    let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                    let v = peak * (-d2 / (2.0 * sigma * sigma)).exp();
                    let m = &mut map[y * side + x];
                    *m = m.max(v);
                }
            }
            fp_blobs += 1;
            break;
        }
    }
    let map = AnomalyMap::new(side, side, map.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect())?;

    let (prefix, ordinal) = match split {
        Split::Unlabeled => ("u", index),
        Split::Labeled => ("l", index - cfg.num_unlabeled),
    };
    let label = match split {
        Split::Labeled => cfg.known_classes.iter().position(|&c| c == class),
        Split::Unlabeled => None,
    };
    let entry = ManifestEntry {
        image_id: format!("{prefix}{ordinal:04}"),
        class,
        split,
        label,
        class_index: cfg.class_index(class).expect("class from config"),
        regions,
        fp_blobs,
    };
    Ok(SynthImage { entry, image, gt_mask, map })
}

/// Balanced class assignment: round-robin over each split's class list.
fn assignments(cfg: &SynthConfig) -> Vec<(ShapeClass, Split)> {
    let unl = (0..cfg.num_unlabeled).map(|i| (cfg.novel_classes[i % cfg.novel_classes.len()], Split::Unlabeled));
    let lab = (0..cfg.num_labeled).map(|i| (cfg.known_classes[i % cfg.known_classes.len()], Split::Labeled));
    unl.chain(lab).collect()
}

/// Renders the corpus; each image uses its own seeded stream, so the
/// result does not depend on thread scheduling.
pub fn generate(cfg: &SynthConfig) -> Result<Corpus, SynthError> {
    cfg.validate()?;
    let images = assignments(cfg)
        .into_par_iter()
        .enumerate()
        .map(|(i, (class, split))| render(cfg, i, class, split))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Corpus { config: cfg.clone(), images })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io { path: path.display().to_string(), source }
}

/// Writes `images/`, `masks/`, `maps/` (16-bit PNG), `manifest.jsonl` and
/// `synth_config.json`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<(), SynthError> {
    for sub in ["images", "masks", "maps"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    corpus.images.par_iter().try_for_each(|img| -> Result<(), SynthError> {
        let id = &img.entry.image_id;
        save_gray_image(&img.image, dir.join("images").join(format!("{id}.png")))?;
        save_mask(&img.gt_mask, dir.join("masks").join(format!("{id}.png")))?;
        save_anomaly_map_png16(&img.map, dir.join("maps").join(format!("{id}.png")))?;
        Ok(())
    })?;
    let path = dir.join("manifest.jsonl");
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    let mut w = BufWriter::new(file);
    for e in corpus.manifest() {
        let line = serde_json::to_string(&e).map_err(|source| SynthError::Manifest { line: 0, source })?;
        writeln!(w, "{line}").map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;
    let cfg_path = dir.join("synth_config.json");
    let json = serde_json::to_string_pretty(&corpus.config).map_err(|source| SynthError::Manifest { line: 0, source })?;
    fs::write(&cfg_path, json).map_err(io_err(&cfg_path))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, SynthError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| SynthError::Manifest { line: i + 1, source })?);
    }
    Ok(out)
}

/// Loads a corpus written by [`write_corpus`].
pub fn read_corpus(dir: &Path) -> Result<Corpus, SynthError> {
    let cfg_path = dir.join("synth_config.json");
    let text = fs::read_to_string(&cfg_path).map_err(io_err(&cfg_path))?;
    let config: SynthConfig = serde_json::from_str(&text).map_err(|source| SynthError::Manifest { line: 0, source })?;
    let images = read_manifest(&dir.join("manifest.jsonl"))?
        .into_par_iter()
        .map(|entry| -> Result<SynthImage, SynthError> {
            let id = &entry.image_id;
            Ok(SynthImage {
                image: load_gray_image(dir.join("images").join(format!("{id}.png")))?,
                gt_mask: load_mask(dir.join("masks").join(format!("{id}.png")))?,
                map: load_anomaly_map(dir.join("maps").join(format!("{id}.png")))?,
                entry,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Corpus { config, images })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig { num_unlabeled: 9, num_labeled: 4, ..SynthConfig::default() }
    }

    #[test]
    fn validation() {
        small().validate().unwrap();
        let dup = SynthConfig { known_classes: vec![ShapeClass::LineScratch], ..small() };
        assert!(dup.validate().is_err());
        let late_normal = SynthConfig {
            novel_classes: vec![ShapeClass::LineScratch, ShapeClass::Normal],
            ..small()
        };
        assert!(late_normal.validate().is_err());
        assert!(SynthConfig { image_side: 32, ..small() }.validate().is_err());
        assert_eq!("ring-hole".parse::<ShapeClass>().unwrap(), ShapeClass::RingHole);
    }

    #[test]
    fn class_balance_and_indices() {
        let c = generate(&small()).unwrap();
        let count = |cls| c.images.iter().filter(|i| i.entry.class == cls).count();
        assert_eq!((count(ShapeClass::Normal), count(ShapeClass::LineScratch), count(ShapeClass::RingHole)), (3, 3, 3));
        assert_eq!((count(ShapeClass::Blob), count(ShapeClass::SpeckleCluster)), (2, 2));
        let blob = c.images.iter().find(|i| i.entry.class == ShapeClass::Blob).unwrap();
        assert_eq!((blob.entry.label, blob.entry.class_index), (Some(0), 0));
        let normal = c.images.iter().find(|i| i.entry.class == ShapeClass::Normal).unwrap();
        assert_eq!((normal.entry.label, normal.entry.class_index), (None, 2));
        assert!(normal.entry.regions.is_empty() && normal.gt_mask.is_empty());
    }

    #[test]
    fn regions_match_components() {
        let c = generate(&SynthConfig { num_unlabeled: 30, num_labeled: 20, ..small() }).unwrap();
        for img in &c.images {
            let comps = connected_components(&img.gt_mask, Connectivity::Eight);
            assert_eq!(comps.count, img.entry.regions.len(), "{}", img.entry.image_id);
            for r in &img.entry.regions {
                assert_eq!(comps.boxes[r.index - 1], r.bbox);
                assert_eq!(comps.areas[r.index - 1], r.area);
            }
            assert!(img.map.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn miss_rate_one_leaves_only_false_positives() {
        let cfg = SynthConfig { noise: NoiseConfig { miss_rate: 1.0, fp_blob_rate: 0.0, ..NoiseConfig::default() }, ..small() };
        let c = generate(&cfg).unwrap();
        assert!(c.images.iter().all(|i| i.map.max_value() == 0.0));
    }

    #[test]
    fn noise_free_maps_are_scaled_masks() {
        let c = generate(&SynthConfig { noise: NoiseConfig::none(), ..small() }).unwrap();
        for img in &c.images {
            for (m, g) in img.map.data().iter().zip(img.gt_mask.data()) {
                assert_eq!(*m > 0.0, *g != 0);
            }
        }
    }
}
