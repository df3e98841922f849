//! Activation-map files: an 8-bit PGM preview plus the raw values.

use std::path::Path;

use anyhow::Context;
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use roi_saliency::data::Tensor;
use roi_saliency::io::{atomic_write, f64s_to_le_bytes};

/// Lays a 2D or 3D map out as one grayscale plane; depth slices of a 3D map
/// are tiled left to right. Returns `(width, height, pixels)` scaled so the
/// map's minimum is 0 and its maximum 255 (all 0 for a constant map).
pub fn to_gray(map: &Tensor) -> (u32, u32, Vec<u8>) {
    let shape = map.shape();
    let (d, h, w) = match *shape {
        [h, w] => (1, h, w),
        [d, h, w] => (d, h, w),
        _ => (1, 1, map.len()),
    };
    let v = map.values();
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let width = d * w;
    let mut px = vec![0u8; width * h];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let value = v[(z * h + y) * w + x];
                px[y * width + z * w + x] = ((value - lo) * scale).round() as u8;
            }
        }
    }
    (width as u32, h as u32, px)
}

pub fn encode_pgm(map: &Tensor) -> anyhow::Result<Vec<u8>> {
    let (w, h, px) = to_gray(map);
    let mut buf = Vec::new();
    PnmEncoder::new(&mut buf)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&px, w, h, ExtendedColorType::L8)
        .context("encoding PGM")?;
    Ok(buf)
}

/// Writes `<stem>.pgm` and `<stem>.f64` (little-endian, row-major).
pub fn write_map(dir: &Path, stem: &str, map: &Tensor) -> anyhow::Result<()> {
    atomic_write(&dir.join(format!("{stem}.pgm")), &encode_pgm(map)?)?;
    atomic_write(&dir.join(format!("{stem}.f64")), &f64s_to_le_bytes(map.values()))?;
    Ok(())
}
