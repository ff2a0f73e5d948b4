use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crop::SubImageRecord;
use crate::raster::{resize_bilinear, resize_nearest, BinaryMask, BoundingBox, GrayImage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flips: bool,
    pub rotations: bool,
    pub brightness_range: (f64, f64),
    pub max_blur_radius: usize,
    /// Smallest retained area fraction for crop-and-resize; 1 disables it.
    pub min_crop_area: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { flips: true, rotations: true, brightness_range: (0.8, 1.2), max_blur_radius: 1, min_crop_area: 0.8 }
    }
}

/// One concrete draw of every transform.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    pub crop: Option<BoundingBox>,
    pub flip_h: bool,
    pub flip_v: bool,
    /// Quarter turns, counter-clockwise.
    pub rot90: u8,
    pub brightness: f64,
    pub blur_radius: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub image: GrayImage,
    pub mask: BinaryMask,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self { crop: None, flip_h: false, flip_v: false, rot90: 0, brightness: 1.0, blur_radius: 0 }
    }

    pub fn sample<R: Rng>(rng: &mut R, width: usize, height: usize, cfg: &AugmentConfig) -> Self {
        let crop = if cfg.min_crop_area < 1.0 {
            let f = rng.random_range(cfg.min_crop_area.max(0.0).sqrt()..=1.0);
            let w = ((width as f64 * f).ceil() as usize).clamp(1, width);
            let h = ((height as f64 * f).ceil() as usize).clamp(1, height);
            let x0 = rng.random_range(0..=width - w);
            let y0 = rng.random_range(0..=height - h);
            Some(BoundingBox { min_x: x0, min_y: y0, max_x: x0 + w - 1, max_y: y0 + h - 1 })
        } else {
            None
        };
        let flip_h = cfg.flips && rng.random_bool(0.5);
        let flip_v = cfg.flips && rng.random_bool(0.5);
        let rot90 = if cfg.rotations { rng.random_range(0..4u8) } else { 0 };
        let (lo, hi) = cfg.brightness_range;
        let brightness = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let blur_radius = rng.random_range(0..=cfg.max_blur_radius);
        Self { crop, flip_h, flip_v, rot90, brightness, blur_radius }
    }

    /// Geometry hits image and mask alike; brightness and blur only the image.
    pub fn apply(&self, image: &GrayImage, mask: &BinaryMask) -> View {
        let (w, h) = (image.width(), image.height());
        let (mut img, mut m) = match &self.crop {
            Some(b) => (resize_bilinear(&image.crop(b), w, h), resize_nearest(&mask.crop(b), w, h)),
            None => (image.clone(), mask.clone()),
        };
        if self.flip_h {
            img = remap_gray(&img, img.width(), img.height(), |x, y, w, _| (w - 1 - x, y));
            m = remap_mask(&m, m.width(), m.height(), |x, y, w, _| (w - 1 - x, y));
        }
        if self.flip_v {
            img = remap_gray(&img, img.width(), img.height(), |x, y, _, h| (x, h - 1 - y));
            m = remap_mask(&m, m.width(), m.height(), |x, y, _, h| (x, h - 1 - y));
        }
        for _ in 0..self.rot90 % 4 {
            // output (x, y) of a counter-clockwise turn reads source (w_src - 1 - y, x)
            img = remap_gray(&img, img.height(), img.width(), |x, y, _, _| (img.width() - 1 - y, x));
            m = remap_mask(&m, m.height(), m.width(), |x, y, _, _| (m.width() - 1 - y, x));
        }
        if self.brightness != 1.0 {
            let b = self.brightness;
            img = GrayImage::from_fn(img.width(), img.height(), |x, y| {
                (img.get(x, y) as f64 * b).round().clamp(0.0, 255.0) as u8
            });
        }
        if self.blur_radius > 0 {
            img = box_blur(&img, self.blur_radius);
        }
        View { image: img, mask: m }
    }
}

fn remap_gray(
    src: &GrayImage,
    w: usize,
    h: usize,
    f: impl Fn(usize, usize, usize, usize) -> (usize, usize),
) -> GrayImage {
    GrayImage::from_fn(w, h, |x, y| {
        let (sx, sy) = f(x, y, w, h);
        src.get(sx, sy)
    })
}

fn remap_mask(
    src: &BinaryMask,
    w: usize,
    h: usize,
    f: impl Fn(usize, usize, usize, usize) -> (usize, usize),
) -> BinaryMask {
    BinaryMask::from_fn(w, h, |x, y| {
        let (sx, sy) = f(x, y, w, h);
        src.get(sx, sy)
    })
}

/// Square box mean with replicated borders.
fn box_blur(img: &GrayImage, r: usize) -> GrayImage {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let r = r as i64;
    GrayImage::from_fn(img.width(), img.height(), |x, y| {
        let mut sum = 0u32;
        for dy in -r..=r {
            for dx in -r..=r {
                let sx = (x as i64 + dx).clamp(0, w - 1) as usize;
                let sy = (y as i64 + dy).clamp(0, h - 1) as usize;
                sum += img.get(sx, sy) as u32;
            }
        }
        let n = ((2 * r + 1) * (2 * r + 1)) as u32;
        ((sum + n / 2) / n) as u8
    })
}

/// Two independent augmented views of a record, reproducible from `seed`.
pub fn augment(record: &SubImageRecord, seed: u64, cfg: &AugmentConfig) -> (View, View) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (record.sub_image.width(), record.sub_image.height());
    let a = AugmentParams::sample(&mut rng, w, h, cfg);
    let b = AugmentParams::sample(&mut rng, w, h, cfg);
    (a.apply(&record.sub_image, &record.sub_mask), b.apply(&record.sub_image, &record.sub_mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record() -> SubImageRecord {
        SubImageRecord {
            image_id: "r".into(),
            region_index: 1,
            sub_image: GrayImage::from_fn(8, 8, |x, y| (x * 30 + y) as u8),
            sub_mask: BinaryMask::from_fn(8, 8, |x, y| x < 3 && y < 5),
            anomaly_score: 0.9,
            area: 15,
            crop_box: BoundingBox { min_x: 0, min_y: 0, max_x: 7, max_y: 7 },
            label: None,
        }
    }

    #[test]
    fn identity_draw_is_noop() {
        let r = record();
        let v = AugmentParams::identity().apply(&r.sub_image, &r.sub_mask);
        assert_eq!((v.image, v.mask), (r.sub_image, r.sub_mask));
    }

    #[test]
    fn four_quarter_turns_and_double_flips_cancel() {
        let r = record();
        let p = AugmentParams { rot90: 1, ..AugmentParams::identity() };
        let mut v = View { image: r.sub_image.clone(), mask: r.sub_mask.clone() };
        for _ in 0..4 {
            v = p.apply(&v.image, &v.mask);
        }
        assert_eq!(v.image, r.sub_image);
        let one = p.apply(&r.sub_image, &r.sub_mask);
        // top-right source pixel lands top-left after a counter-clockwise turn
        assert_eq!(one.image.get(0, 0), r.sub_image.get(7, 0));
        let f = AugmentParams { flip_h: true, flip_v: true, ..AugmentParams::identity() };
        let twice = f.apply(&f.apply(&r.sub_image, &r.sub_mask).image, &r.sub_mask);
        assert_eq!(twice.image, r.sub_image);
    }

    #[test]
    fn geometry_is_shared_and_photometry_is_not() {
        let r = record();
        let p = AugmentParams { flip_h: true, brightness: 1.2, blur_radius: 1, ..AugmentParams::identity() };
        let v = p.apply(&r.sub_image, &r.sub_mask);
        let g = AugmentParams { flip_h: true, ..AugmentParams::identity() }.apply(&r.sub_image, &r.sub_mask);
        assert_eq!(v.mask, g.mask);
        assert_ne!(v.image, g.image);
        assert_eq!(v.mask.count_ones(), r.sub_mask.count_ones());
    }

    #[test]
    fn seeded_views_replay() {
        let cfg = AugmentConfig::default();
        assert_eq!(augment(&record(), 7, &cfg), augment(&record(), 7, &cfg));
        assert_ne!(augment(&record(), 7, &cfg), augment(&record(), 8, &cfg));
    }

    proptest! {
        #[test]
        fn masks_stay_binary_and_crops_keep_area(seed in any::<u64>()) {
            let cfg = AugmentConfig::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = AugmentParams::sample(&mut rng, 8, 8, &cfg);
            if let Some(b) = p.crop {
                prop_assert!(b.area() as f64 >= 0.8 * 64.0 - 1e-9);
            }
            prop_assert!((0.8..=1.2).contains(&p.brightness));
            let (a, b) = augment(&record(), seed, &cfg);
            for v in [a, b] {
                prop_assert!(v.mask.data().iter().all(|&m| m <= 1));
                prop_assert_eq!((v.image.width(), v.image.height()), (8, 8));
            }
        }
    }
}
