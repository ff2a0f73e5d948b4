use super::{connected_components, BinaryMask, Connectivity};

/// Erosion with a `(2r+1)×(2r+1)` square structuring element. Pixels
/// outside the raster count as background. Radius 0 is the identity.
pub fn erode(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    // separable: horizontal then vertical run-length minimum
    let (w, h) = (mask.width(), mask.height());
    let horizontal = window_min(w, h, radius, |x, y| mask.get(x, y), true);
    let both = window_min(w, h, radius, |x, y| horizontal[y * w + x], false);
    BinaryMask::from_fn(w, h, |x, y| both[y * w + x])
}

fn window_min(
    w: usize,
    h: usize,
    radius: usize,
    get: impl Fn(usize, usize) -> bool,
    along_x: bool,
) -> Vec<bool> {
    let mut out = vec![false; w * h];
    let (outer, inner) = if along_x { (h, w) } else { (w, h) };
    for o in 0..outer {
        // run[i] = number of consecutive set pixels ending at i
        let mut run = vec![0usize; inner];
        let mut count = 0;
        for (i, r) in run.iter_mut().enumerate() {
            let on = if along_x { get(i, o) } else { get(o, i) };
            count = if on { count + 1 } else { 0 };
            *r = count;
        }
        for i in 0..inner {
            let hi = i + radius;
            let ok = i >= radius && hi < inner && run[hi] > 2 * radius;
            let idx = if along_x { o * w + i } else { i * w + o };
            out[idx] = ok;
        }
    }
    out
}

/// Components of `mask` that contain at least one pixel of `seed`.
pub fn reconstruct(seed: &BinaryMask, mask: &BinaryMask, connectivity: Connectivity) -> BinaryMask {
    let regions = connected_components(mask, connectivity);
    let mut keep = vec![false; regions.count + 1];
    for (i, &l) in regions.labels.iter().enumerate() {
        if l != 0 && seed.data()[i] != 0 {
            keep[l as usize] = true;
        }
    }
    BinaryMask::from_fn(mask.width(), mask.height(), |x, y| keep[regions.label(x, y) as usize] && regions.label(x, y) != 0)
}
