use super::{BinaryMask, GrayImage};

/// Bilinear resampling with pixel-center alignment.
pub fn resize_bilinear(img: &GrayImage, width: usize, height: usize) -> GrayImage {
    if (img.width(), img.height()) == (width, height) {
        return img.clone();
    }
    let sx = img.width() as f64 / width as f64;
    let sy = img.height() as f64 / height as f64;
    let max_x = (img.width() - 1) as f64;
    let max_y = (img.height() - 1) as f64;
    GrayImage::from_fn(width, height, |x, y| {
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(img.width() - 1), (y0 + 1).min(img.height() - 1));
        let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
        let p = |x, y| img.get(x, y) as f64;
        let top = p(x0, y0) * (1.0 - tx) + p(x1, y0) * tx;
        let bottom = p(x0, y1) * (1.0 - tx) + p(x1, y1) * tx;
        (top * (1.0 - ty) + bottom * ty).round().clamp(0.0, 255.0) as u8
    })
}

/// Nearest-neighbour resampling; output stays binary.
pub fn resize_nearest(mask: &BinaryMask, width: usize, height: usize) -> BinaryMask {
    if (mask.width(), mask.height()) == (width, height) {
        return mask.clone();
    }
    let sx = mask.width() as f64 / width as f64;
    let sy = mask.height() as f64 / height as f64;
    BinaryMask::from_fn(width, height, |x, y| {
        let src_x = (((x as f64 + 0.5) * sx) as usize).min(mask.width() - 1);
        let src_y = (((y as f64 + 0.5) * sy) as usize).min(mask.height() - 1);
        mask.get(src_x, src_y)
    })
}
