//! Sliding-window mean/std channels and spatial downsampling.
//!
//! A 4D series `I(x, y, z, t)` becomes one 2-channel image per window: the
//! voxelwise mean over the window and the voxelwise sample standard
//! deviation (divisor `w − 1`). With `T` frames, window length `w` and step
//! `stride` there are `⌊(T − w) / stride⌋ + 1` windows; the window ending at
//! frame `t` covers frames `t + 1 − w ..= t`.

use serde::{Deserialize, Serialize};

use crate::data::{ChannelImage, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    /// Window length in frames.
    pub w: usize,
    pub stride: usize,
}

impl WindowConfig {
    pub fn new(w: usize, stride: usize) -> Result<Self> {
        let cfg = WindowConfig { w, stride };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.w < 2 {
            return Err(Error::InvalidArgument(format!(
                "window length must be at least 2 (sample std divides by w - 1), got {}",
                self.w
            )));
        }
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        Ok(())
    }
}

/// `⌊(T − w) / stride⌋ + 1`.
pub fn window_count(frames: usize, cfg: WindowConfig) -> Result<usize> {
    if cfg.stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    if cfg.w > frames {
        return Err(Error::InvalidArgument(format!(
            "window length {} exceeds frame count {frames}",
            cfg.w
        )));
    }
    Ok((frames - cfg.w) / cfg.stride + 1)
}

/// Builds the (mean, std) channel image for every window of a 4D series.
pub fn sliding_window_channels(series: &Tensor, cfg: WindowConfig) -> Result<Vec<ChannelImage>> {
    cfg.validate()?;
    let shape = series.shape();
    if shape.len() != 4 {
        return Err(Error::Shape(format!(
            "expected a 4D (x, y, z, t) series, got shape {shape:?}"
        )));
    }
    let frames = shape[3];
    let count = window_count(frames, cfg)?;
    let spatial = &shape[..3];
    let voxels: usize = spatial.iter().product();
    let values = series.values();
    let w = cfg.w as f64;

    (0..count)
        .map(|k| {
            let first = k * cfg.stride;
            let mut data = vec![0.0; 2 * voxels];
            let (means, stds) = data.split_at_mut(voxels);
            for v in 0..voxels {
                let ts = &values[v * frames + first..v * frames + first + cfg.w];
                let mean = ts.iter().sum::<f64>() / w;
                let ss: f64 = ts.iter().map(|x| (x - mean) * (x - mean)).sum();
                means[v] = mean;
                stds[v] = (ss / (w - 1.0)).sqrt();
            }
            ChannelImage::new(2, spatial, data)
        })
        .collect()
}

/// Downsamples a 3D volume to `target` extents.
///
/// Uses exact block averaging when every source extent is a multiple of the
/// target extent, and trilinear interpolation at target cell centres
/// otherwise. Upsampling is rejected.
pub fn downsample(volume: &Tensor, target: [usize; 3]) -> Result<Tensor> {
    let src: [usize; 3] = volume
        .shape()
        .try_into()
        .map_err(|_| Error::Shape(format!("expected a 3D volume, got {:?}", volume.shape())))?;
    if target.contains(&0) {
        return Err(Error::InvalidArgument("target extents must be positive".into()));
    }
    if src.iter().zip(&target).any(|(s, t)| s < t) {
        return Err(Error::InvalidArgument(format!(
            "cannot upsample {src:?} to {target:?}"
        )));
    }
    if src == target {
        return Ok(volume.clone());
    }
    let values = if src.iter().zip(&target).all(|(s, t)| s % t == 0) {
        block_average(volume.values(), src, target)
    } else {
        trilinear(volume.values(), src, target)
    };
    Tensor::new(target.to_vec(), values)
}

fn block_average(v: &[f64], src: [usize; 3], target: [usize; 3]) -> Vec<f64> {
    let f = [src[0] / target[0], src[1] / target[1], src[2] / target[2]];
    let norm = (f[0] * f[1] * f[2]) as f64;
    let mut out = vec![0.0; target.iter().product()];
    for (x, y, z) in grid(src) {
        let o = ((x / f[0]) * target[1] + y / f[1]) * target[2] + z / f[2];
        out[o] += v[(x * src[1] + y) * src[2] + z];
    }
    out.iter_mut().for_each(|o| *o /= norm);
    out
}

fn trilinear(v: &[f64], src: [usize; 3], target: [usize; 3]) -> Vec<f64> {
    // source coordinate of a target cell centre, clamped to the grid, split
    // into a lower index and an interpolation weight
    let axis = |k: usize, o: usize| -> (usize, usize, f64) {
        let scale = src[k] as f64 / target[k] as f64;
        let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src[k] - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(src[k] - 1);
        (lo, hi, s - lo as f64)
    };
    let at = |x: usize, y: usize, z: usize| v[(x * src[1] + y) * src[2] + z];
    grid(target)
        .map(|(x, y, z)| {
            let (x0, x1, fx) = axis(0, x);
            let (y0, y1, fy) = axis(1, y);
            let (z0, z1, fz) = axis(2, z);
            let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
            let c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), fx);
            let c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), fx);
            let c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), fx);
            let c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), fx);
            lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz)
        })
        .collect()
}

fn grid(ext: [usize; 3]) -> impl Iterator<Item = (usize, usize, usize)> {
    (0..ext[0]).flat_map(move |x| (0..ext[1]).flat_map(move |y| (0..ext[2]).map(move |z| (x, y, z))))
}

/// Downsamples every frame of a 4D `(x, y, z, t)` series.
pub fn downsample_series(series: &Tensor, target: [usize; 3]) -> Result<Tensor> {
    let shape = series.shape();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("expected a 4D series, got {shape:?}")));
    }
    let (voxels, frames) = (shape[..3].iter().product::<usize>(), shape[3]);
    let out_voxels: usize = target.iter().product();
    let mut out = vec![0.0; out_voxels * frames];
    for t in 0..frames {
        let frame: Vec<f64> = (0..voxels).map(|v| series.values()[v * frames + t]).collect();
        let small = downsample(&Tensor::new(shape[..3].to_vec(), frame)?, target)?;
        for (v, &x) in small.values().iter().enumerate() {
            out[v * frames + t] = x;
        }
    }
    let mut out_shape = target.to_vec();
    out_shape.push(frames);
    Tensor::new(out_shape, out)
}
