#![allow(dead_code)]

use rand::Rng as _;
use roi_saliency::data::{ChannelImage, Dataset, Sample};
use roi_saliency::nn::{loss_and_gradients, Classifier, LayerSpec, Network, Padding, TrainConfig};
use roi_saliency::seed::{rng_for, Rng};

/// Average ranks of |d| computed by counting, independent of any sort.
pub fn naive_abs_ranks(d: &[f64]) -> Vec<f64> {
    d.iter()
        .map(|x| {
            let less = d.iter().filter(|y| y.abs() < x.abs()).count() as f64;
            let equal = d.iter().filter(|y| y.abs() == x.abs()).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

/// One-tailed signed-rank p-values by enumerating all 2ⁿ sign patterns.
/// Returns `(p_greater, p_less)`.
pub fn wilcoxon_enumerated(shifts: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = shifts.iter().copied().filter(|&x| x != 0.0).collect();
    let ranks = naive_abs_ranks(&d);
    let observed: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let n = d.len();
    let (mut ge, mut le) = (0u64, 0u64);
    for mask in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if w >= observed - 1e-9 {
            ge += 1;
        }
        if w <= observed + 1e-9 {
            le += 1;
        }
    }
    let total = (1u64 << n) as f64;
    (ge as f64 / total, le as f64 / total)
}

/// Classic step-up: reject every p ≤ p_(k*) with k* the largest k such that
/// p_(k) ≤ k·α/m.
pub fn bh_step_up(ps: &[f64], alpha: f64) -> Vec<bool> {
    let m = ps.len();
    let mut sorted = ps.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cut = (1..=m).rev().find(|&k| sorted[k - 1] <= k as f64 * alpha / m as f64);
    match cut {
        Some(k) => ps.iter().map(|&p| p <= sorted[k - 1]).collect(),
        None => vec![false; m],
    }
}

pub fn random_image(rng: &mut Rng, shape: &[usize]) -> ChannelImage {
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    ChannelImage::new(shape[0], &shape[1..], values).unwrap()
}

/// Small networks that together exercise every layer kind.
pub fn micro_networks() -> Vec<(&'static str, Vec<usize>, Vec<LayerSpec>)> {
    use LayerSpec::*;
    vec![
        (
            "conv2d valid, relu, maxpool, dense",
            vec![1, 6, 6],
            vec![
                Conv2d { filters: 2, kernel: [3, 3], padding: Padding::Valid },
                Relu,
                Maxpool { size: 2 },
                Flatten,
                Dense { units: 1 },
                Sigmoid,
            ],
        ),
        (
            "conv2d same, maxpool, dropout, hidden dense",
            vec![2, 6, 6],
            vec![
                Conv2d { filters: 3, kernel: [3, 3], padding: Padding::Same },
                Maxpool { size: 2 },
                Flatten,
                Dropout { p: 0.5 },
                Dense { units: 4 },
                Relu,
                Dense { units: 1 },
                Sigmoid,
            ],
        ),
        (
            "conv3d valid, relu, maxpool",
            vec![1, 5, 6, 6],
            vec![
                Conv3d { filters: 2, kernel: [2, 3, 3], padding: Padding::Valid },
                Relu,
                Maxpool { size: 2 },
                Flatten,
                Dense { units: 1 },
                Sigmoid,
            ],
        ),
        (
            "conv3d same, two channels, dropout",
            vec![2, 4, 4, 4],
            vec![
                Conv3d { filters: 2, kernel: [3, 3, 3], padding: Padding::Same },
                Relu,
                Maxpool { size: 2 },
                Flatten,
                Dropout { p: 0.5 },
                Dense { units: 1 },
                Sigmoid,
            ],
        ),
    ]
}

/// Max relative error between analytic and central-difference gradients of
/// the regularized batch loss (dropout masks held fixed).
pub fn gradient_check(net: &Network, batch: &[(&ChannelImage, u8)], cfg: &TrainConfig, eps: f64) -> f64 {
    let rng = rng_for(&[99]);
    let (_, analytic) = loss_and_gradients(net, batch, cfg, &mut rng.clone()).unwrap();
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for i in 0..net.param_count() {
        let p = net.params()[i];
        probe.params_mut()[i] = p + eps;
        let (up, _) = loss_and_gradients(&probe, batch, cfg, &mut rng.clone()).unwrap();
        probe.params_mut()[i] = p - eps;
        let (down, _) = loss_and_gradients(&probe, batch, cfg, &mut rng.clone()).unwrap();
        probe.params_mut()[i] = p;
        let numeric = (up - down) / (2.0 * eps);
        let scale = analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    worst
}

/// Worst gradient-check error over all micro networks.
pub fn gradient_check_all() -> Vec<(&'static str, f64)> {
    let cfg = TrainConfig { l2_coefficient: 1e-3, dropout: true, ..TrainConfig::default() };
    micro_networks()
        .into_iter()
        .enumerate()
        .map(|(k, (name, shape, layers))| {
            let net = Network::new(&shape, layers, 7 + k as u64).unwrap();
            let mut rng = rng_for(&[k as u64, 5]);
            let imgs: Vec<ChannelImage> = (0..3).map(|_| random_image(&mut rng, &shape)).collect();
            let batch: Vec<(&ChannelImage, u8)> = imgs.iter().zip([0u8, 1, 1]).collect();
            (name, gradient_check(&net, &batch, &cfg, 1e-5))
        })
        .collect()
}

/// Returns 0.2 when the first pixel is below 0.5, else 0.8.
pub struct PixelStub;

impl Classifier for PixelStub {
    fn predict(&self, img: &ChannelImage) -> roi_saliency::Result<f64> {
        Ok(if img.values()[0] < 0.5 { 0.2 } else { 0.8 })
    }
}

/// Reads only patch B (row 0, column 1 of the 3×3 grid) of a square
/// single-channel image: horizontal stripes give 0.1, vertical 0.9.
pub struct OrientationStub;

impl Classifier for OrientationStub {
    fn predict(&self, img: &ChannelImage) -> roi_saliency::Result<f64> {
        let n = img.spatial_shape()[1];
        let s = n / 3;
        let v = img.values();
        let px = |y: usize, x: usize| v[y * n + x];
        let (mut across_rows, mut across_cols) = (0.0, 0.0);
        for y in 0..s - 1 {
            for x in s..2 * s - 1 {
                across_rows += (px(y + 1, x) - px(y, x)).powi(2);
                across_cols += (px(y, x + 1) - px(y, x)).powi(2);
            }
        }
        Ok(if across_rows > across_cols { 0.1 } else { 0.9 })
    }
}

pub fn tiny_dataset(rng: &mut Rng, n: usize, shape: &[usize]) -> Dataset {
    let samples = (0..n)
        .map(|i| Sample {
            subject_id: format!("s{}", i / 2),
            label: (i % 2) as u8,
            image: random_image(rng, shape),
        })
        .collect();
    Dataset::new(shape[0], &shape[1..], samples).unwrap()
}

/// Minimal NIfTI-1 float32 writer; `data` is in file order (x fastest).
pub fn nifti_f32(dims: &[usize], data: &[f32]) -> Vec<u8> {
    let mut h = vec![0u8; 352];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    h[40..42].copy_from_slice(&(dims.len() as i16).to_le_bytes());
    for (i, d) in dims.iter().enumerate() {
        h[42 + 2 * i..44 + 2 * i].copy_from_slice(&(*d as i16).to_le_bytes());
    }
    h[70..72].copy_from_slice(&16i16.to_le_bytes());
    h[72..74].copy_from_slice(&32i16.to_le_bytes());
    h[108..112].copy_from_slice(&352f32.to_le_bytes());
    h[344..348].copy_from_slice(b"n+1\0");
    for v in data {
        h.extend_from_slice(&v.to_le_bytes());
    }
    h
}
