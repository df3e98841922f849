//! ROI corruption by cross-sample substitution.
//!
//! The prediction for an image with ROI `r` marginalized out is estimated
//! as `Σ_k w_k f(X'_k)`, where each `X'_k` is the image with its ROI replaced
//! by the same ROI drawn from another image of the dataset.
//!
//! With equal weights (`w_k = 1/K`) the estimate inherits the class balance
//! of the pool: a minority-class image is mostly filled with majority-class
//! content. Frequency-normalized weights correct for this. Each draw's
//! Pearson correlation `ρ_k` with the image's own ROI is binned into `N`
//! equal intervals of `[−1, 1]`; a draw landing in a bin holding `N_i`
//! draws gets raw weight `1 / (N · N_i)`, so every occupied bin carries the
//! same total mass however common its content is in the pool. The raw
//! weights sum to (occupied bins) / N and are rescaled to sum to 1.

use std::collections::HashMap;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{extract_roi, ChannelImage, Dataset, RoiMask, Sample};
use crate::interpret::PredictionDistribution;
use crate::nn::Classifier;
use crate::seed::{rng_for, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `w_k = 1 / K`.
    Equal,
    /// `w_k ∝ 1 / (N · N_i)`, renormalized.
    FrequencyNormalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    /// Draws per image and ROI (`K`).
    pub samples: usize,
    /// Correlation bins over `[−1, 1]` (`N`).
    pub bins: usize,
    pub seed: u64,
    pub weight_mode: WeightMode,
    /// Skip pool entries that share the corrupted image's subject id.
    pub exclude_own_subject: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            samples: 100,
            bins: 10,
            seed: 0,
            weight_mode: WeightMode::FrequencyNormalized,
            exclude_own_subject: true,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.bins == 0 {
            return Err(Error::InvalidArgument(
                "sample count and bin count must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Pearson correlation; 0 when either vector is constant.
pub fn pearson(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "vectors have lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    if u.len() < 2 {
        return Err(Error::InvalidArgument("correlation needs at least 2 values".into()));
    }
    let constant = |x: &[f64]| x.iter().all(|&a| a == x[0]);
    if constant(u) || constant(v) {
        return Ok(0.0);
    }
    let n = u.len() as f64;
    let mu = u.iter().sum::<f64>() / n;
    let mv = v.iter().sum::<f64>() / n;
    let (mut suv, mut suu, mut svv) = (0.0, 0.0, 0.0);
    for (&a, &b) in u.iter().zip(v) {
        let (da, db) = (a - mu, b - mv);
        suv += da * db;
        suu += da * da;
        svv += db * db;
    }
    Ok((suv / (suu * svv).sqrt()).clamp(-1.0, 1.0))
}

/// Bin `i` covers `[−1 + 2i/N, −1 + 2(i+1)/N)`; `ρ = 1` goes to the last bin.
pub fn bin_index(rho: f64, bins: usize) -> Result<usize> {
    if !(-1.0..=1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!("correlation {rho} outside [-1, 1]")));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    Ok((((rho + 1.0) * bins as f64 / 2.0).floor() as usize).min(bins - 1))
}

/// Frequency-normalized weights `1 / (N · N_i)`, rescaled to sum to 1.
pub fn frequency_weights(rhos: &[f64], bins: usize) -> Result<Vec<f64>> {
    if rhos.is_empty() {
        return Err(Error::Empty("no correlations to weight".into()));
    }
    let idx = rhos
        .iter()
        .map(|&r| bin_index(r, bins))
        .collect::<Result<Vec<_>>>()?;
    let mut counts = vec![0usize; bins];
    idx.iter().for_each(|&i| counts[i] += 1);
    let raw: Vec<f64> = idx
        .iter()
        .map(|&i| 1.0 / (bins as f64 * counts[i] as f64))
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// `K` pool draws for one image with their correlations and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSamples {
    /// Indices into the pool.
    pub draws: Vec<usize>,
    pub rhos: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Draws `K` pool entries uniformly with replacement (restricted to
/// `candidates` when given) and weights them against `own`.
pub fn draw_weighted_samples(
    own: &[f64],
    pool: &[Vec<f64>],
    candidates: Option<&[usize]>,
    cfg: &SamplingConfig,
    rng: &mut Rng,
) -> Result<WeightedSamples> {
    cfg.validate()?;
    let available = candidates.map_or(pool.len(), <[usize]>::len);
    if available == 0 {
        return Err(Error::Empty("replacement pool is empty".into()));
    }
    let draws: Vec<usize> = (0..cfg.samples)
        .map(|_| {
            let j = rng.random_range(0..available);
            candidates.map_or(j, |c| c[j])
        })
        .collect();
    let rhos = draws
        .iter()
        .map(|&i| pearson(&pool[i], own))
        .collect::<Result<Vec<_>>>()?;
    let weights = match cfg.weight_mode {
        WeightMode::Equal => vec![1.0 / cfg.samples as f64; cfg.samples],
        WeightMode::FrequencyNormalized => frequency_weights(&rhos, cfg.bins)?,
    };
    Ok(WeightedSamples {
        draws,
        rhos,
        weights,
    })
}

/// ROI vectors of every sample whose subject differs from `exclude_subject`.
pub fn draw_sample_pool(
    data: &Dataset,
    roi: &RoiMask,
    exclude_subject: Option<&str>,
) -> Result<Vec<Vec<f64>>> {
    let pool = data
        .samples()
        .iter()
        .filter(|s| Some(s.subject_id.as_str()) != exclude_subject)
        .map(|s| extract_roi(&s.image, roi))
        .collect::<Result<Vec<_>>>()?;
    if pool.is_empty() {
        return Err(Error::Empty(format!(
            "no pool images left for ROI {} after exclusion",
            roi.roi_id
        )));
    }
    Ok(pool)
}

/// Evaluates `f` on the image with its ROI replaced by each drawn pool
/// vector, calling `f` once per distinct draw. Returns one value per draw.
pub(crate) fn replaced_predictions(
    f: &impl Classifier,
    img: &ChannelImage,
    roi: &RoiMask,
    pool: &[Vec<f64>],
    draws: &[usize],
) -> Result<Vec<f64>> {
    let mut work = img.clone();
    let mut seen: HashMap<usize, f64> = HashMap::new();
    draws
        .iter()
        .map(|&i| {
            if let Some(&p) = seen.get(&i) {
                return Ok(p);
            }
            work.replace_roi_in_place(roi, &pool[i])?;
            let p = f.predict(&work)?;
            seen.insert(i, p);
            Ok(p)
        })
        .collect()
}

fn corrupt(
    f: &impl Classifier,
    img: &ChannelImage,
    roi: &RoiMask,
    pool: &[Vec<f64>],
    candidates: Option<&[usize]>,
    cfg: &SamplingConfig,
    rng: &mut Rng,
) -> Result<f64> {
    let own = extract_roi(img, roi)?;
    let ws = draw_weighted_samples(&own, pool, candidates, cfg, rng)?;
    let preds = replaced_predictions(f, img, roi, pool, &ws.draws)?;
    let p: f64 = ws.weights.iter().zip(&preds).map(|(w, p)| w * p).sum();
    Ok(p.clamp(0.0, 1.0))
}

/// `p(c | X without r) ≈ Σ_k w_k f(X'_k)` with `K` draws from `pool`.
pub fn corrupted_prediction(
    f: &impl Classifier,
    img: &ChannelImage,
    roi: &RoiMask,
    pool: &[Vec<f64>],
    cfg: &SamplingConfig,
    rng: &mut Rng,
) -> Result<f64> {
    corrupt(f, img, roi, pool, None, cfg, rng)
}

/// ROI vectors of a pool source, with per-subject candidate lists.
pub(crate) struct RoiPool {
    pub vectors: Vec<Vec<f64>>,
    subjects: Vec<String>,
}

impl RoiPool {
    pub fn build(source: &[Sample], roi: &RoiMask) -> Result<Self> {
        let vectors = source
            .iter()
            .map(|s| extract_roi(&s.image, roi))
            .collect::<Result<Vec<_>>>()?;
        Ok(RoiPool {
            vectors,
            subjects: source.iter().map(|s| s.subject_id.clone()).collect(),
        })
    }

    pub fn candidates_excluding(&self, subject: &str) -> Vec<usize> {
        (0..self.vectors.len())
            .filter(|&i| self.subjects[i] != subject)
            .collect()
    }
}

/// Corrupted predictions for every image in `imgs`, drawing replacements
/// from `pool_source`.
///
/// Image `i` uses a generator seeded from `(cfg.seed, roi id, stream, i)`,
/// so the output does not depend on how work is scheduled across threads.
/// `stream` separates callers that corrupt different image lists with the
/// same ROI (e.g. the two classes).
pub fn corrupted_distribution(
    f: &impl Classifier,
    imgs: &[Sample],
    roi: &RoiMask,
    pool_source: &[Sample],
    cfg: &SamplingConfig,
    stream: u64,
) -> Result<PredictionDistribution> {
    cfg.validate()?;
    let pool = RoiPool::build(pool_source, roi)?;
    corrupted_distribution_with_pool(f, imgs, roi, &pool, cfg, stream)
}

pub(crate) fn corrupted_distribution_with_pool(
    f: &impl Classifier,
    imgs: &[Sample],
    roi: &RoiMask,
    pool: &RoiPool,
    cfg: &SamplingConfig,
    stream: u64,
) -> Result<PredictionDistribution> {
    let values = imgs
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = rng_for(&[cfg.seed, u64::from(roi.roi_id), stream, i as u64]);
            let cands = cfg
                .exclude_own_subject
                .then(|| pool.candidates_excluding(&s.subject_id));
            corrupt(f, &s.image, roi, &pool.vectors, cands.as_deref(), cfg, &mut rng).map_err(|e| match e {
                Error::Empty(_) => Error::Empty(format!(
                    "ROI {}: no replacement candidates for subject {}",
                    roi.roi_id, s.subject_id
                )),
                e => e,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    PredictionDistribution::new(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_basics() {
        let u = [1.0, 2.0, 4.0, 8.0];
        assert!((pearson(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        assert!((pearson(&u, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&u, &[3.0; 4]).unwrap(), 0.0);
        assert!(pearson(&u, &[1.0]).is_err());
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn stripes_are_uncorrelated() {
        // 8×8 horizontal vs vertical stripes: both means 0.5, E[uv] = 0.25
        let h: Vec<f64> = (0..64).map(|k| ((k / 8) % 2 == 0) as u8 as f64).collect();
        let v: Vec<f64> = (0..64).map(|k| ((k % 8) % 2 == 0) as u8 as f64).collect();
        assert!(pearson(&h, &v).unwrap().abs() < 1e-15);
    }

    #[test]
    fn bin_edges() {
        assert_eq!(bin_index(-1.0, 10).unwrap(), 0);
        assert_eq!(bin_index(1.0, 10).unwrap(), 9);
        assert_eq!(bin_index(0.05, 10).unwrap(), 5);
        assert_eq!(bin_index(0.0, 10).unwrap(), 5);
        assert_eq!(bin_index(-0.0001, 10).unwrap(), 4);
        assert!(bin_index(1.0001, 10).is_err());
    }

    #[test]
    fn weight_examples() {
        let w = frequency_weights(&[0.95, 0.95, 0.05], 10).unwrap();
        assert_eq!(w, vec![0.25, 0.25, 0.5]);
        let w = frequency_weights(&[0.31, 0.32, 0.33, 0.34], 10).unwrap();
        assert_eq!(w, vec![0.25; 4]);
        let w = frequency_weights(&[-0.9, -0.5, 0.1, 0.5, 0.9], 10).unwrap();
        assert_eq!(w, vec![0.2; 5]);
    }

    struct ByMean;
    impl Classifier for ByMean {
        fn predict(&self, img: &ChannelImage) -> Result<f64> {
            Ok(img.values().iter().sum::<f64>() / img.values().len() as f64)
        }
    }

    #[test]
    fn pool_exclusion() {
        let mk = |s: &str, v: f64| Sample {
            subject_id: s.into(),
            label: 0,
            image: ChannelImage::new(1, &[2, 2], vec![v; 4]).unwrap(),
        };
        let d = Dataset::new(1, &[2, 2], vec![mk("a", 0.1), mk("b", 0.2), mk("c", 0.3)]).unwrap();
        let r = RoiMask::new(1, &[2, 2], &[vec![0, 0], vec![1, 1]]).unwrap();
        let pool = draw_sample_pool(&d, &r, Some("b")).unwrap();
        assert_eq!(pool, vec![vec![0.1, 0.1], vec![0.3, 0.3]]);
        assert_eq!(draw_sample_pool(&d, &r, None).unwrap().len(), 3);
        let solo = Dataset::new(1, &[2, 2], vec![mk("a", 0.1)]).unwrap();
        assert!(draw_sample_pool(&solo, &r, Some("a")).is_err());

        // with exclusion on, an image never receives its own subject's ROI
        let cfg = SamplingConfig { samples: 50, ..Default::default() };
        let out = corrupted_distribution(&ByMean, &d.samples()[..1], &r, d.samples(), &cfg, 0).unwrap();
        let p = out.values()[0];
        assert!((0.15 - 1e-12..=0.2 + 1e-12).contains(&p), "{p}");
    }
}
