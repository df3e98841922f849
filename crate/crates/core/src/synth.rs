//! Striped-image benchmark with a biased class balance.
//!
//! Images are `image_side²` single-channel grids cut into a 3×3 patch grid
//! labelled A..I row-major (ROI ids 1..9). Striped patches carry 1-valued
//! stripes on a 0 background inside a one-pixel frame:
//!
//! ```text
//!   A  B  C        A, C, E, G, I: horizontal stripes in both classes
//!   D  E  F        B: horizontal stripes (class 0) / vertical stripes (class 1)
//!   G  H  I        D, F, H: background only
//! ```
//!
//! Patch B is the only discriminative region. Gaussian noise is added to
//! every pixel. The default training set holds 900 class-0 and 100 class-1
//! images, so equally weighted corruption of B mostly substitutes class-0
//! content, while frequency-normalized weights balance the two stripe
//! orientations.

use rayon::prelude::*;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corruption::{draw_weighted_samples, replaced_predictions, SamplingConfig, WeightMode};
use crate::data::{extract_roi, Atlas, ChannelImage, Dataset, RoiMask, Sample};
use crate::nn::{build_synth_cnn, evaluate, train, Classifier, Network, TrainConfig};
use crate::seed::{derive_seed, rng_for};
use crate::{Error, Result};

/// ROI id of the discriminative patch.
pub const PATCH_B: u32 = 2;
const GRID: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub n_class0: usize,
    pub n_class1: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub test_per_class: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_side: 24,
            patch_side: 8,
            n_class0: 900,
            n_class1: 100,
            noise_sigma: 0.01,
            seed: 0,
            test_per_class: 100,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_side < 4 || self.patch_side * GRID != self.image_side {
            return Err(Error::InvalidArgument(format!(
                "image side {} must be 3 × patch side {} (patch side ≥ 4)",
                self.image_side, self.patch_side
            )));
        }
        if self.n_class0 == 0 || self.n_class1 == 0 || self.test_per_class == 0 {
            return Err(Error::InvalidArgument("class counts must be at least 1".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidArgument("noise sigma must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Stripes {
    Blank,
    Horizontal,
    Vertical,
}

fn patch_pattern(patch: usize, label: u8) -> Stripes {
    match patch {
        1 if label == 0 => Stripes::Horizontal,
        1 => Stripes::Vertical,
        0 | 2 | 4 | 6 | 8 => Stripes::Horizontal,
        _ => Stripes::Blank,
    }
}

/// Noise-free image for a class.
pub fn clean_image(cfg: &SynthConfig, label: u8) -> Vec<f64> {
    let (n, s) = (cfg.image_side, cfg.patch_side);
    let mut img = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let (i, j) = (y % s, x % s);
            if i == 0 || j == 0 || i == s - 1 || j == s - 1 {
                continue;
            }
            let on = match patch_pattern((y / s) * GRID + x / s, label) {
                Stripes::Blank => false,
                Stripes::Horizontal => (i - 1) % 2 == 0,
                Stripes::Vertical => (j - 1) % 2 == 0,
            };
            if on {
                img[y * n + x] = 1.0;
            }
        }
    }
    img
}

/// The 9-patch label grid.
pub fn synth_atlas(cfg: &SynthConfig) -> Result<Atlas> {
    let (n, s) = (cfg.image_side, cfg.patch_side);
    let labels = (0..n * n)
        .map(|k| ((k / n / s) * GRID + (k % n) / s + 1) as u32)
        .collect();
    Atlas::new(&[n, n], labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub train: Dataset,
    pub test: Dataset,
    pub atlas: Atlas,
}

fn make_split(cfg: &SynthConfig, split: &str, tag: u64, counts: [usize; 2]) -> Result<Dataset> {
    let n = cfg.image_side;
    let clean = [clean_image(cfg, 0), clean_image(cfg, 1)];
    let labels: Vec<u8> = std::iter::repeat_n(0u8, counts[0])
        .chain(std::iter::repeat_n(1u8, counts[1]))
        .collect();
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let samples = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let mut rng = rng_for(&[cfg.seed, tag, i as u64]);
            let mut v = clean[label as usize].clone();
            if cfg.noise_sigma > 0.0 {
                v.iter_mut().for_each(|x| *x += noise.sample(&mut rng));
            }
            Ok(Sample {
                subject_id: format!("{split}-{i:05}"),
                label,
                image: ChannelImage::new(1, &[n, n], v)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(1, &[n, n], samples)
}

/// Train and test sets plus the patch atlas. Class-0 images precede class-1
/// images within each split.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    Ok(SynthData {
        train: make_split(cfg, "train", 1, [cfg.n_class0, cfg.n_class1])?,
        test: make_split(cfg, "test", 2, [cfg.test_per_class, cfg.test_per_class])?,
        atlas: synth_atlas(cfg)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MisclassRates {
    pub class0: f64,
    pub class1: f64,
}

/// Weight-averaged misclassification under ROI corruption.
///
/// Per image, `K` weighted replacements are drawn exactly as in
/// [`corrupted_prediction`](crate::corruption::corrupted_prediction); the
/// image's rate is `Σ_k w_k · 1[label(f(X'_k)) ≠ true label]` with predicted
/// label 1 when `f ≥ 0.5`. Rates are averaged per class. Image `i` uses the
/// stream `(cfg.seed, roi id, stream, i)`.
pub fn weighted_misclassification(
    f: &impl Classifier,
    samples: &[Sample],
    roi: &RoiMask,
    pool: &[Vec<f64>],
    cfg: &SamplingConfig,
    stream: u64,
) -> Result<MisclassRates> {
    let per: Vec<(u8, f64)> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = rng_for(&[cfg.seed, u64::from(roi.roi_id), stream, i as u64]);
            let own = extract_roi(&s.image, roi)?;
            let ws = draw_weighted_samples(&own, pool, None, cfg, &mut rng)?;
            let preds = replaced_predictions(f, &s.image, roi, pool, &ws.draws)?;
            let rate = ws
                .weights
                .iter()
                .zip(&preds)
                .filter(|(_, &p)| u8::from(p >= 0.5) != s.label)
                .fold(0.0, |acc, (w, _)| acc + w);
            Ok((s.label, rate.min(1.0)))
        })
        .collect::<Result<_>>()?;
    let mean = |label: u8| -> Result<f64> {
        let v: Vec<f64> = per.iter().filter(|(l, _)| *l == label).map(|(_, r)| *r).collect();
        if v.is_empty() {
            return Err(Error::Empty(format!("no class-{label} images to score")));
        }
        Ok(v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok(MisclassRates {
        class0: mean(0)?,
        class1: mean(1)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(MeanStd { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub repeat: usize,
    pub seed: u64,
    pub epochs: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub equal: Option<MisclassRates>,
    pub normalized: Option<MisclassRates>,
    /// Why this seed was left out of the summary.
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1 {
    pub seeds: Vec<SeedOutcome>,
    pub equal: Option<[MeanStd; 2]>,
    pub normalized: Option<[MeanStd; 2]>,
}

/// Data, trained network and training outcome for one benchmark repeat.
pub struct TrainedRepeat {
    pub data: SynthData,
    pub network: Network,
    pub epochs: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Generates one repeat's data (seed derived from `cfg.seed` and `repeat`)
/// and trains the synthetic CNN on it without a validation set.
pub fn train_repeat(cfg: &SynthConfig, train_cfg: &TrainConfig, repeat: usize) -> Result<TrainedRepeat> {
    let seed = derive_seed(&[cfg.seed, repeat as u64]);
    let data = generate_synthetic(&SynthConfig { seed, ..cfg.clone() })?;
    let net = build_synth_cnn(&[1, cfg.image_side, cfg.image_side], derive_seed(&[seed, 1]))?;
    let tc = TrainConfig {
        seed: derive_seed(&[seed, 2, train_cfg.seed]),
        ..train_cfg.clone()
    };
    let (network, history) = train(&net, &data.train, None, &tc)?;
    let (_, train_accuracy) = evaluate(&network, &data.train)?;
    let (_, test_accuracy) = evaluate(&network, &data.test)?;
    Ok(TrainedRepeat {
        data,
        network,
        epochs: history.epochs.len(),
        train_accuracy,
        test_accuracy,
    })
}

/// Misclassification rates when corrupting patch B, over `repeats` seeds.
///
/// Each repeat trains the CNN from scratch; repeats that do not reach 100%
/// train and test accuracy are recorded with a diagnostic and excluded from
/// the summary. Test images are corrupted with replacements drawn from the
/// whole training set (no subject exclusion), under both weight modes with
/// the same draws.
pub fn run_table1(
    cfg: &SynthConfig,
    sampling: &SamplingConfig,
    train_cfg: &TrainConfig,
    repeats: usize,
) -> Result<Table1> {
    cfg.validate()?;
    sampling.validate()?;
    if repeats == 0 {
        return Err(Error::InvalidArgument("need at least one repeat".into()));
    }
    let seeds = (0..repeats)
        .into_par_iter()
        .map(|r| {
            let t = train_repeat(cfg, train_cfg, r)?;
            let mut out = SeedOutcome {
                repeat: r,
                seed: derive_seed(&[cfg.seed, r as u64]),
                epochs: t.epochs,
                train_accuracy: t.train_accuracy,
                test_accuracy: t.test_accuracy,
                equal: None,
                normalized: None,
                diagnostic: None,
            };
            if t.train_accuracy < 1.0 || t.test_accuracy < 1.0 {
                out.diagnostic = Some(format!(
                    "classifier reached {:.1}% train / {:.1}% test accuracy, below 100%",
                    100.0 * t.train_accuracy,
                    100.0 * t.test_accuracy
                ));
                return Ok(out);
            }
            let roi = t
                .data
                .atlas
                .rois()
                .into_iter()
                .find(|r| r.roi_id == PATCH_B)
                .expect("patch B exists");
            let pool = t
                .data
                .train
                .samples()
                .iter()
                .map(|s| extract_roi(&s.image, &roi))
                .collect::<Result<Vec<_>>>()?;
            let base = SamplingConfig {
                seed: derive_seed(&[sampling.seed, r as u64]),
                exclude_own_subject: false,
                ..sampling.clone()
            };
            let rates = |mode| {
                let c = SamplingConfig { weight_mode: mode, ..base.clone() };
                weighted_misclassification(&t.network, t.data.test.samples(), &roi, &pool, &c, 0)
            };
            out.equal = Some(rates(WeightMode::Equal)?);
            out.normalized = Some(rates(WeightMode::FrequencyNormalized)?);
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    let summary = |pick: fn(&SeedOutcome) -> Option<MisclassRates>| {
        let rates: Vec<MisclassRates> = seeds.iter().filter_map(pick).collect();
        let c0: Vec<f64> = rates.iter().map(|r| r.class0).collect();
        let c1: Vec<f64> = rates.iter().map(|r| r.class1).collect();
        Some([MeanStd::of(&c0)?, MeanStd::of(&c1)?])
    };
    Ok(Table1 {
        equal: summary(|s| s.equal),
        normalized: summary(|s| s.normalized),
        seeds,
    })
}

impl Table1 {
    /// `mode,class0_mean,class0_std,class1_mean,class1_std`.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["mode", "class0_mean", "class0_std", "class1_mean", "class1_std"])?;
        for (mode, cells) in [("equal", self.equal), ("normalize", self.normalized)] {
            match cells {
                Some([a, b]) => w.write_record([
                    mode.to_string(),
                    a.mean.to_string(),
                    a.std.to_string(),
                    b.mean.to_string(),
                    b.std.to_string(),
                ])?,
                None => w.write_record([mode, "", "", "", ""])?,
            }
        }
        w.into_inner()
            .map_err(|e| Error::InvalidArgument(format!("csv buffer: {e}")))
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let cell = |m: Option<[MeanStd; 2]>, k: usize| match m {
            Some(v) => format!("{:.2} ± {:.2}", v[k].mean, v[k].std),
            None => "n/a".to_string(),
        };
        let used = self.seeds.iter().filter(|s| s.diagnostic.is_none()).count();
        let mut s = format!("{:<10} {:>14} {:>14}\n", "", "Class 0", "Class 1");
        s += &format!("{:<10} {:>14} {:>14}\n", "Equal", cell(self.equal, 0), cell(self.equal, 1));
        s += &format!("{:<10} {:>14} {:>14}\n", "Normalize", cell(self.normalized, 0), cell(self.normalized, 1));
        s += &format!("({used} of {} repeats reached 100% accuracy)\n", self.seeds.len());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corruption::pearson;

    #[test]
    fn noiseless_patch_b_is_binary() {
        let cfg = SynthConfig { noise_sigma: 0.0, n_class0: 3, n_class1: 2, test_per_class: 1, ..Default::default() };
        let d = generate_synthetic(&cfg).unwrap();
        let b = d.atlas.rois().into_iter().find(|r| r.roi_id == PATCH_B).unwrap();
        for s in d.train.samples() {
            let v = extract_roi(&s.image, &b).unwrap();
            assert!(v.iter().all(|&x| x == 0.0 || x == 1.0));
        }
        assert_eq!(d.train.class_counts(), [3, 2]);
        assert_eq!(d.test.class_counts(), [1, 1]);
    }

    #[test]
    fn atlas_is_nine_equal_patches() {
        let a = synth_atlas(&SynthConfig::default()).unwrap();
        let rois = a.rois();
        assert_eq!(rois.len(), 9);
        assert!(rois.iter().all(|r| r.len() == 64));
        // patch B is row 0, column 1
        assert_eq!(rois[1].voxels()[0], vec![0, 8]);
    }

    #[test]
    fn only_patch_b_differs_between_classes() {
        let cfg = SynthConfig::default();
        let (c0, c1) = (clean_image(&cfg, 0), clean_image(&cfg, 1));
        let a = synth_atlas(&cfg).unwrap();
        for (k, l) in a.labels().iter().enumerate() {
            if *l != PATCH_B {
                assert_eq!(c0[k], c1[k]);
            }
        }
        assert_ne!(c0, c1);
    }

    #[test]
    fn clean_cross_class_correlation() {
        // stripes fill the s × s interior (s = 6 of 64 pixels → frac 36/64);
        // horizontal vs vertical: ρ = (1 − f) / (2 − f)
        let cfg = SynthConfig::default();
        let b = synth_atlas(&cfg).unwrap().rois().into_iter().find(|r| r.roi_id == PATCH_B).unwrap();
        let img = |l| ChannelImage::new(1, &[24, 24], clean_image(&cfg, l)).unwrap();
        let v0 = extract_roi(&img(0), &b).unwrap();
        let v1 = extract_roi(&img(1), &b).unwrap();
        let f = 36.0 / 64.0;
        assert!((pearson(&v0, &v1).unwrap() - (1.0 - f) / (2.0 - f)).abs() < 1e-12);
        assert!((pearson(&v0, &v0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_std() {
        assert_eq!(MeanStd::of(&[0.3]), Some(MeanStd { mean: 0.3, std: 0.0 }));
        let m = MeanStd::of(&[1.0, 3.0]).unwrap();
        assert_eq!(m.mean, 2.0);
        assert!((m.std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[]), None);
    }

    #[test]
    fn invalid_configs() {
        assert!(SynthConfig { image_side: 25, ..Default::default() }.validate().is_err());
        assert!(SynthConfig { n_class1: 0, ..Default::default() }.validate().is_err());
        assert!(SynthConfig { noise_sigma: -1.0, ..Default::default() }.validate().is_err());
    }
}
