//! File formats: 16-bit PNG and raw `F32 w h` anomaly maps, 8-bit PNG
//! masks and images.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};

use super::{AnomalyMap, BinaryMask, GrayImage, RasterError};

const RAW_MAGIC: &[u8] = b"F32 ";

fn io_err(path: &Path, source: std::io::Error) -> RasterError {
    if source.kind() == std::io::ErrorKind::NotFound {
        RasterError::MissingFile(path.display().to_string())
    } else {
        RasterError::IoFailure { path: path.display().to_string(), source }
    }
}

fn codec_err(path: &Path, source: image::ImageError) -> RasterError {
    match source {
        image::ImageError::IoError(e) => io_err(path, e),
        other => RasterError::Codec { path: path.display().to_string(), source: other },
    }
}

fn open_image(path: &Path) -> Result<DynamicImage, RasterError> {
    if !path.exists() {
        return Err(RasterError::MissingFile(path.display().to_string()));
    }
    image::open(path).map_err(|e| codec_err(path, e))
}

/// Loads an anomaly map; see [`load_anomaly_map_counted`].
pub fn load_anomaly_map(path: impl AsRef<Path>) -> Result<AnomalyMap, RasterError> {
    load_anomaly_map_counted(path).map(|(m, _)| m)
}

/// Loads a 16-bit grayscale PNG (scaled by 1/65535) or a raw `F32 w h`
/// raster. Raw values outside `[0, 1]` are clamped; the second element is
/// the number of clamped values.
pub fn load_anomaly_map_counted(path: impl AsRef<Path>) -> Result<(AnomalyMap, usize), RasterError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.starts_with(RAW_MAGIC) {
        return parse_raw(path, &bytes);
    }
    let img = image::load_from_memory(&bytes).map_err(|e| codec_err(path, e))?;
    match img {
        DynamicImage::ImageLuma16(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            let data = buf.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect();
            Ok((AnomalyMap::new(w, h, data)?, 0))
        }
        _ => Err(RasterError::UnsupportedFormat(path.display().to_string())),
    }
}

fn parse_raw(path: &Path, bytes: &[u8]) -> Result<(AnomalyMap, usize), RasterError> {
    let malformed = |reason: &str| RasterError::MalformedHeader {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| malformed("missing newline"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| malformed("header is not ASCII"))?;
    let mut fields = header.split(' ');
    if fields.next() != Some("F32") {
        return Err(malformed("expected `F32` tag"));
    }
    let mut dim = |name: &str| -> Result<usize, RasterError> {
        fields
            .next()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| malformed(&format!("bad {name}")))
    };
    let width = dim("width")?;
    let height = dim("height")?;
    if fields.next().is_some() {
        return Err(malformed("trailing header fields"));
    }
    if width == 0 || height == 0 {
        return Err(RasterError::InvalidDimensions { width, height });
    }
    let payload = &bytes[nl + 1..];
    let expected = width * height;
    if payload.len() != expected * 4 {
        return Err(RasterError::SizeMismatch { expected, actual: payload.len() / 4 });
    }
    let mut clamped = 0usize;
    let mut data = Vec::with_capacity(expected);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(RasterError::NonFinite(i));
        }
        let c = v.clamp(0.0, 1.0);
        if c != v {
            clamped += 1;
        }
        data.push(c);
    }
    if clamped > 0 {
        log::warn!("{}: clamped {clamped} values into [0, 1]", path.display());
    }
    Ok((AnomalyMap::new(width, height, data)?, clamped))
}

pub fn save_anomaly_map_raw(map: &AnomalyMap, path: impl AsRef<Path>) -> Result<(), RasterError> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(16 + map.data().len() * 4);
    writeln!(out, "F32 {} {}", map.width(), map.height()).expect("write to Vec");
    for v in map.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn save_anomaly_map_png16(map: &AnomalyMap, path: impl AsRef<Path>) -> Result<(), RasterError> {
    let path = path.as_ref();
    let raw: Vec<u16> = map.data().iter().map(|&v| (v as f64 * 65535.0).round() as u16).collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(map.width() as u32, map.height() as u32, raw).expect("dims match");
    buf.save(path).map_err(|e| codec_err(path, e))
}

/// Nonzero pixels become 1.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask, RasterError> {
    let path = path.as_ref();
    let img = open_image(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    BinaryMask::new(w, h, img.into_raw().into_iter().map(|v| u8::from(v != 0)).collect())
}

/// Writes `{0, 255}` 8-bit grayscale.
pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<(), RasterError> {
    let path = path.as_ref();
    let raw: Vec<u8> = mask.data().iter().map(|&v| v * 255).collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(mask.width() as u32, mask.height() as u32, raw).expect("dims match");
    buf.save(path).map_err(|e| codec_err(path, e))
}

/// Color inputs are reduced with 0.299/0.587/0.114 luminance weights.
pub fn load_gray_image(path: impl AsRef<Path>) -> Result<GrayImage, RasterError> {
    let path = path.as_ref();
    let img = open_image(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw(),
        other => other
            .to_rgb8()
            .pixels()
            .map(|p| {
                let [r, g, b] = p.0;
                (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64).round().min(255.0) as u8
            })
            .collect(),
    };
    GrayImage::new(w, h, data)
}

pub fn save_gray_image(img: &GrayImage, path: impl AsRef<Path>) -> Result<(), RasterError> {
    let path = path.as_ref();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, img.data().to_vec())
            .expect("dims match");
    buf.save(path).map_err(|e| codec_err(path, e))
}
