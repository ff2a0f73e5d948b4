//! Anomaly-centered square crops around each connected region.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{
    connected_components, resize_bilinear, resize_nearest, AnomalyMap, BinaryMask, BoundingBox, Connectivity,
    GrayImage,
};

#[derive(Debug, Error, PartialEq)]
pub enum CropError {
    #[error("image {image:?}, mask {mask:?} and map {map:?} dimensions differ")]
    DimensionMismatch { image: (usize, usize), mask: (usize, usize), map: (usize, usize) },
    #[error("invalid crop parameters: {0}")]
    InvalidParams(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CropConfig {
    /// Fraction of the square side added on each side.
    pub padding_frac: f64,
    /// Minimum crop side as a fraction of `min(width, height)`.
    pub min_size_frac: f64,
    pub connectivity: Connectivity,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self { padding_frac: 0.10, min_size_frac: 0.01, connectivity: Connectivity::Eight }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<(), CropError> {
        if !(self.padding_frac >= 0.0) {
            return Err(CropError::InvalidParams("padding_frac must be >= 0".into()));
        }
        if !(self.min_size_frac > 0.0 && self.min_size_frac <= 1.0) {
            return Err(CropError::InvalidParams("min_size_frac must be in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubImageRecord {
    pub image_id: String,
    /// Component ID in the source mask, 1-based.
    pub region_index: usize,
    pub sub_image: GrayImage,
    pub sub_mask: BinaryMask,
    /// Max of the anomaly map over the region's own pixels.
    pub anomaly_score: f64,
    /// Region pixel count at source resolution.
    pub area: usize,
    pub crop_box: BoundingBox,
    pub label: Option<usize>,
}

// guards ceil() against 10 * 1.2 = 12.000000000000002
fn ceil_tol(v: f64) -> usize {
    (v - 1e-9).ceil().max(0.0) as usize
}

/// Square box around `region`: padded, floored at the minimum size,
/// centered, then shifted inside the image.
pub fn square_crop_box(region: &BoundingBox, width: usize, height: usize, cfg: &CropConfig) -> BoundingBox {
    let side0 = region.width().max(region.height());
    let padded = ceil_tol(side0 as f64 * (1.0 + 2.0 * cfg.padding_frac));
    let floor = ceil_tol(cfg.min_size_frac * width.min(height) as f64);
    let side = padded.max(floor).max(1).min(width.min(height));

    let place = |lo: usize, hi: usize, extent: usize| -> usize {
        let twice_center = (lo + hi + 1) as i64;
        let start = (twice_center - side as i64).div_euclid(2);
        start.clamp(0, (extent - side) as i64) as usize
    };
    let min_x = place(region.min_x, region.max_x, width);
    let min_y = place(region.min_y, region.max_y, height);
    BoundingBox { min_x, min_y, max_x: min_x + side - 1, max_y: min_y + side - 1 }
}

pub fn crop_regions(
    image_id: &str,
    image: &GrayImage,
    mask: &BinaryMask,
    map: &AnomalyMap,
    cfg: &CropConfig,
) -> Result<Vec<SubImageRecord>, CropError> {
    cfg.validate()?;
    let dims = (image.width(), image.height());
    if dims != (mask.width(), mask.height()) || dims != (map.width(), map.height()) {
        return Err(CropError::DimensionMismatch {
            image: dims,
            mask: (mask.width(), mask.height()),
            map: (map.width(), map.height()),
        });
    }
    let regions = connected_components(mask, cfg.connectivity);
    let mut scores = vec![0.0f64; regions.count];
    for (i, &l) in regions.labels.iter().enumerate() {
        if l != 0 {
            let s = &mut scores[l as usize - 1];
            *s = s.max(map.data()[i] as f64);
        }
    }
    Ok((0..regions.count)
        .map(|k| {
            let crop_box = square_crop_box(&regions.boxes[k], dims.0, dims.1, cfg);
            SubImageRecord {
                image_id: image_id.to_string(),
                region_index: k + 1,
                sub_image: image.crop(&crop_box),
                sub_mask: mask.crop(&crop_box),
                anomaly_score: scores[k],
                area: regions.areas[k],
                crop_box,
                label: None,
            }
        })
        .collect())
}

/// Bilinear for the image, nearest for the mask. Score and area keep
/// their source-resolution values.
pub fn resize_to_model(record: &SubImageRecord, side: usize) -> SubImageRecord {
    SubImageRecord {
        sub_image: resize_bilinear(&record.sub_image, side, side),
        sub_mask: resize_nearest(&record.sub_mask, side, side),
        ..record.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> CropConfig {
        CropConfig::default()
    }

    #[test]
    fn defaults_follow_cropping_recipe() {
        assert_eq!((cfg().padding_frac, cfg().min_size_frac), (0.10, 0.01));
    }

    #[test]
    fn ten_pixel_component_gets_twelve_pixel_box() {
        let region = BoundingBox { min_x: 45, min_y: 45, max_x: 54, max_y: 54 };
        let b = square_crop_box(&region, 100, 100, &cfg());
        assert_eq!(b, BoundingBox { min_x: 44, min_y: 44, max_x: 55, max_y: 55 });
    }

    #[test]
    fn single_pixel_hits_minimum_size() {
        let b = square_crop_box(&BoundingBox::point(100, 100), 200, 200, &cfg());
        assert_eq!(b.width(), 2);
        assert!(b.contains(100, 100));
    }

    #[test]
    fn boxes_shift_inward_at_borders() {
        let region = BoundingBox { min_x: 0, min_y: 0, max_x: 9, max_y: 3 };
        let b = square_crop_box(&region, 40, 30, &cfg());
        assert_eq!(b, BoundingBox { min_x: 0, min_y: 0, max_x: 11, max_y: 11 });
        let region = BoundingBox { min_x: 35, min_y: 20, max_x: 39, max_y: 29 };
        let b = square_crop_box(&region, 40, 30, &cfg());
        assert_eq!((b.max_x, b.max_y, b.width()), (39, 29, 12));
    }

    #[test]
    fn records_carry_region_score_and_area() {
        let mut mask = BinaryMask::zeros(20, 20);
        let mut data = vec![0.0f32; 400];
        for y in 2..5 {
            for x in 2..5 {
                mask.set(x, y, true);
                data[y * 20 + x] = 0.5;
            }
        }
        data[3 * 20 + 3] = 0.75;
        data[0] = 0.99; // outside the region, inside its crop
        mask.set(15, 15, true);
        data[15 * 20 + 15] = 0.3;
        let map = AnomalyMap::new(20, 20, data).unwrap();
        let image = GrayImage::from_fn(20, 20, |x, y| (x + y) as u8);
        let recs = crop_regions("img", &image, &mask, &map, &cfg()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].region_index, 1);
        assert_eq!(recs[0].area, 9);
        assert_eq!(recs[0].anomaly_score, 0.75f32 as f64);
        assert_eq!(recs[1].area, 1);
        assert_eq!(recs[1].anomaly_score, 0.3f32 as f64);
        assert_eq!(recs[0].sub_image.width(), recs[0].sub_mask.width());
        assert!(crop_regions("x", &image, &BinaryMask::zeros(20, 20), &map, &cfg()).unwrap().is_empty());
        assert!(matches!(
            crop_regions("x", &image, &BinaryMask::zeros(10, 20), &map, &cfg()),
            Err(CropError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn resize_behaviour() {
        let rec = SubImageRecord {
            image_id: "a".into(),
            region_index: 1,
            sub_image: GrayImage::filled(2, 2, 77),
            sub_mask: BinaryMask::new(2, 2, vec![1, 0, 0, 0]).unwrap(),
            anomaly_score: 0.8,
            area: 1,
            crop_box: BoundingBox { min_x: 0, min_y: 0, max_x: 1, max_y: 1 },
            label: None,
        };
        assert_eq!(resize_to_model(&rec, 2), rec);
        let up = resize_to_model(&rec, 4);
        assert_eq!(up.sub_mask.count_ones(), 4);
        assert!((0..2).all(|y| (0..2).all(|x| up.sub_mask.get(x, y))));
        assert!(up.sub_image.data().iter().all(|&v| v == 77));
        let down = resize_to_model(&SubImageRecord { sub_image: GrayImage::filled(9, 9, 31), sub_mask: BinaryMask::ones(9, 9), ..rec.clone() }, 4);
        assert!(down.sub_image.data().iter().all(|&v| v == 31));
        assert_eq!((down.area, down.anomaly_score), (1, 0.8));
    }

    proptest! {
        #[test]
        fn crop_invariants(bits in proptest::collection::vec(prop_oneof![4 => Just(0u8), 1 => Just(1u8)], 24 * 18)) {
            let mask = BinaryMask::new(24, 18, bits).unwrap();
            let map = AnomalyMap::new(24, 18, mask.data().iter().map(|&b| b as f32 * 0.7).collect()).unwrap();
            let image = GrayImage::filled(24, 18, 9);
            let recs = crop_regions("p", &image, &mask, &map, &cfg()).unwrap();
            let regions = connected_components(&mask, Connectivity::Eight);
            prop_assert_eq!(recs.len(), regions.count);
            for r in &recs {
                let b = r.crop_box;
                prop_assert_eq!(b.width(), b.height());
                prop_assert!(b.max_x < 24 && b.max_y < 18);
                prop_assert_eq!(r.sub_mask.width(), b.width());
                for y in 0..18 {
                    for x in 0..24 {
                        if regions.label(x, y) as usize == r.region_index {
                            prop_assert!(b.contains(x, y));
                        }
                    }
                }
                prop_assert_eq!(resize_to_model(r, 16).area, r.area);
            }
        }
    }
}
