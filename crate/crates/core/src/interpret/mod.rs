//! ROI importance categorization.
//!
//! For each ROI the classifier's predictions on the two classes are
//! compared before and after corruption:
//!
//! 1. original predictions `P_o⁰`, `P_o¹` and a bootstrap interval for their
//!    histogram JSD;
//! 2. corrupted predictions `P_c⁰`, `P_c¹` per ROI and their JSD interval;
//! 3. the ROI *fools* the classifier when the corrupted upper bound falls
//!    below the original lower bound, or when the class medians swap
//!    (`median(P_c⁰) > median(P_c¹)`);
//! 4. for fooled ROIs, `P_c⁰ − P_o⁰` is tested for an upward shift and
//!    `P_c¹ − P_o¹` for a downward shift (one-tailed Wilcoxon);
//! 5. p-values are FDR-adjusted across the fooled ROIs, one family per
//!    shift direction, and the q-values decide the category.

pub mod stats;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corruption::{corrupted_distribution_with_pool, RoiPool, SamplingConfig};
use crate::data::{Atlas, ChannelImage, Sample};
use crate::io::{atomic_write, write_json};
use crate::nn::Classifier;
use crate::seed::rng_for;
use crate::{Error, Result};

pub use stats::{
    bh_fdr, bootstrap_jsd, histogram, jsd, quantile_sorted, wilcoxon_one_tailed, BootstrapJsd, FdrResult,
    JsdInterval, Tail, WilcoxonResult, WILCOXON_EXACT_MAX_N,
};

/// Classifier outputs for a group of images; all values lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PredictionDistribution(Vec<f64>);

impl PredictionDistribution {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("prediction distribution is empty".into()));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("prediction {v} outside [0, 1]")));
        }
        Ok(PredictionDistribution(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Midpoint median for even lengths.
    pub fn median(&self) -> f64 {
        let mut s = self.0.clone();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        if n % 2 == 1 {
            s[n / 2]
        } else {
            0.5 * (s[n / 2 - 1] + s[n / 2])
        }
    }

    /// Elementwise `self − before`.
    pub fn shift_from(&self, before: &PredictionDistribution) -> Result<Vec<f64>> {
        if self.len() != before.len() {
            return Err(Error::Shape(format!(
                "paired distributions have lengths {} and {}",
                self.len(),
                before.len()
            )));
        }
        Ok(self.0.iter().zip(&before.0).map(|(a, b)| a - b).collect())
    }
}

impl TryFrom<Vec<f64>> for PredictionDistribution {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        PredictionDistribution::new(v)
    }
}

impl From<PredictionDistribution> for Vec<f64> {
    fn from(p: PredictionDistribution) -> Self {
        p.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterpretConfig {
    /// Bootstrap intervals have confidence `1 − alpha_jsd`.
    pub alpha_jsd: f64,
    /// Significance level for the FDR-adjusted Wilcoxon q-values.
    pub alpha_w: f64,
    pub bootstrap_replicates: usize,
    pub histogram_bins: usize,
    pub sampling: SamplingConfig,
}

impl Default for InterpretConfig {
    fn default() -> Self {
        InterpretConfig {
            alpha_jsd: 0.05,
            alpha_w: 0.05,
            bootstrap_replicates: 1000,
            histogram_bins: 20,
            sampling: SamplingConfig::default(),
        }
    }
}

impl InterpretConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, a) in [("alpha_jsd", self.alpha_jsd), ("alpha_w", self.alpha_w)] {
            if !(0.0..1.0).contains(&a) {
                return Err(Error::InvalidArgument(format!("{name} = {a} outside [0, 1)")));
            }
        }
        if self.bootstrap_replicates < 100 {
            return Err(Error::InvalidArgument(format!(
                "bootstrap_replicates = {} (need at least 100)",
                self.bootstrap_replicates
            )));
        }
        if self.histogram_bins < 2 {
            return Err(Error::InvalidArgument("histogram_bins must be at least 2".into()));
        }
        self.sampling.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Both,
    Class0,
    Class1,
    None,
}

impl Category {
    pub fn as_str(&self) -> &'static str {
        match self {
            Category::Both => "both",
            Category::Class0 => "class0",
            Category::Class1 => "class1",
            Category::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiReport {
    pub roi_id: u32,
    pub jsd_original: JsdInterval,
    pub jsd_corrupted: JsdInterval,
    pub median_c0: f64,
    pub median_c1: f64,
    pub fooled: bool,
    pub p0: Option<f64>,
    pub p1: Option<f64>,
    pub q0: Option<f64>,
    pub q1: Option<f64>,
    /// A shift vector was all zeros, so its Wilcoxon test is uninformative.
    pub degenerate: bool,
    pub category: Category,
}

/// Corrupted predictions and JSD replicates for one ROI.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiEvidence {
    pub roi_id: u32,
    pub corrupted0: PredictionDistribution,
    pub corrupted1: PredictionDistribution,
    pub jsd: BootstrapJsd,
}

/// Everything the categorization needs; independent of the two alphas, so
/// one evidence set can be assessed at many confidence levels.
#[derive(Debug, Clone, PartialEq)]
pub struct Evidence {
    pub original0: PredictionDistribution,
    pub original1: PredictionDistribution,
    pub jsd_original: BootstrapJsd,
    pub rois: Vec<RoiEvidence>,
}

const ORIGINAL_STREAM: u64 = 0x6f72_6967;
const BOOTSTRAP_STREAM: u64 = 0x626f_6f74;

/// Runs the classifier and the corruption sampler for every ROI.
///
/// Replacement content is drawn from the union of both classes. Random
/// streams are keyed by `(seed, roi id, ...)`, so the result is identical
/// for any thread count and ROI order.
pub fn gather_evidence(
    f: &impl Classifier,
    class0: &[Sample],
    class1: &[Sample],
    atlas: &Atlas,
    cfg: &InterpretConfig,
) -> Result<Evidence> {
    cfg.validate()?;
    if class0.is_empty() || class1.is_empty() {
        return Err(Error::Empty(format!(
            "both classes need images (class 0: {}, class 1: {})",
            class0.len(),
            class1.len()
        )));
    }
    let images = |s: &[Sample]| s.iter().map(|x| x.image.clone()).collect::<Vec<ChannelImage>>();
    let original0 = f.predict_batch(&images(class0))?;
    let original1 = f.predict_batch(&images(class1))?;
    let seed = cfg.sampling.seed;
    let jsd_original = BootstrapJsd::compute(
        &original0,
        &original1,
        cfg.bootstrap_replicates,
        cfg.histogram_bins,
        &mut rng_for(&[seed, ORIGINAL_STREAM]),
    )?;

    let pool_source: Vec<Sample> = class0.iter().chain(class1).cloned().collect();
    let rois = atlas
        .rois()
        .par_iter()
        .map(|roi| {
            let pool = RoiPool::build(&pool_source, roi)?;
            let corrupted0 = corrupted_distribution_with_pool(f, class0, roi, &pool, &cfg.sampling, 0)?;
            let corrupted1 = corrupted_distribution_with_pool(f, class1, roi, &pool, &cfg.sampling, 1)?;
            let jsd = BootstrapJsd::compute(
                &corrupted0,
                &corrupted1,
                cfg.bootstrap_replicates,
                cfg.histogram_bins,
                &mut rng_for(&[seed, u64::from(roi.roi_id), BOOTSTRAP_STREAM]),
            )?;
            Ok(RoiEvidence {
                roi_id: roi.roi_id,
                corrupted0,
                corrupted1,
                jsd,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Evidence {
        original0,
        original1,
        jsd_original,
        rois,
    })
}

/// Applies the fooling gate, Wilcoxon tests, FDR and categorization.
pub fn assess(evidence: &Evidence, alpha_jsd: f64, alpha_w: f64) -> Result<Vec<RoiReport>> {
    let jsd_o = evidence.jsd_original.interval(alpha_jsd);
    let mut reports = Vec::with_capacity(evidence.rois.len());
    let mut fooled_idx = Vec::new();
    let (mut ps0, mut ps1) = (Vec::new(), Vec::new());

    for (k, r) in evidence.rois.iter().enumerate() {
        let jsd_c = r.jsd.interval(alpha_jsd);
        let (m0, m1) = (r.corrupted0.median(), r.corrupted1.median());
        let fooled = jsd_c.upper < jsd_o.lower || m0 > m1;
        let mut report = RoiReport {
            roi_id: r.roi_id,
            jsd_original: jsd_o,
            jsd_corrupted: jsd_c,
            median_c0: m0,
            median_c1: m1,
            fooled,
            p0: None,
            p1: None,
            q0: None,
            q1: None,
            degenerate: false,
            category: Category::None,
        };
        if fooled {
            let w0 = wilcoxon_one_tailed(&r.corrupted0.shift_from(&evidence.original0)?, Tail::Greater)?;
            let w1 = wilcoxon_one_tailed(&r.corrupted1.shift_from(&evidence.original1)?, Tail::Less)?;
            report.p0 = Some(w0.p_value);
            report.p1 = Some(w1.p_value);
            report.degenerate = w0.degenerate || w1.degenerate;
            ps0.push(w0.p_value);
            ps1.push(w1.p_value);
            fooled_idx.push(k);
        }
        reports.push(report);
    }

    let fdr0 = bh_fdr(&ps0, alpha_w)?;
    let fdr1 = bh_fdr(&ps1, alpha_w)?;
    for (j, &k) in fooled_idx.iter().enumerate() {
        let r = &mut reports[k];
        r.q0 = Some(fdr0.q_values[j]);
        r.q1 = Some(fdr1.q_values[j]);
        r.category = match (fdr0.rejected[j], fdr1.rejected[j]) {
            (true, true) => Category::Both,
            (true, false) => Category::Class0,
            (false, true) => Category::Class1,
            (false, false) => Category::None,
        };
    }
    Ok(reports)
}

/// Categorizes every atlas ROI by its effect on the classifier.
pub fn interpret_rois(
    f: &impl Classifier,
    class0: &[Sample],
    class1: &[Sample],
    atlas: &Atlas,
    cfg: &InterpretConfig,
) -> Result<Vec<RoiReport>> {
    let evidence = gather_evidence(f, class0, class1, atlas, cfg)?;
    assess(&evidence, cfg.alpha_jsd, cfg.alpha_w)
}

/// One cell of an `(alpha_jsd, alpha_w)` stability grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub alpha_jsd: f64,
    pub alpha_w: f64,
    pub categories: Vec<(u32, Category)>,
}

pub fn sweep(evidence: &Evidence, alphas_jsd: &[f64], alphas_w: &[f64]) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::with_capacity(alphas_jsd.len() * alphas_w.len());
    for &aj in alphas_jsd {
        for &aw in alphas_w {
            let reports = assess(evidence, aj, aw)?;
            out.push(SweepPoint {
                alpha_jsd: aj,
                alpha_w: aw,
                categories: reports.iter().map(|r| (r.roi_id, r.category)).collect(),
            });
        }
    }
    Ok(out)
}

/// Writes a stability grid as CSV: one row per grid cell, one column per ROI.
pub fn write_sweep_csv(path: &Path, points: &[SweepPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["alpha_jsd".to_string(), "alpha_w".to_string()];
    if let Some(p) = points.first() {
        header.extend(p.categories.iter().map(|(id, _)| format!("roi_{id}")));
    }
    w.write_record(&header)?;
    for p in points {
        let mut row = vec![p.alpha_jsd.to_string(), p.alpha_w.to_string()];
        row.extend(p.categories.iter().map(|(_, c)| c.as_str().to_string()));
        w.write_record(&row)?;
    }
    finish_csv(path, w)
}

#[derive(Serialize)]
struct CsvRow {
    roi_id: u32,
    jsd_o_lo: f64,
    jsd_o_hi: f64,
    jsd_c_lo: f64,
    jsd_c_hi: f64,
    median_c0: f64,
    median_c1: f64,
    fooled: bool,
    p0: Option<f64>,
    p1: Option<f64>,
    q0: Option<f64>,
    q1: Option<f64>,
    category: &'static str,
}

/// One row per ROI; absent p/q values are empty fields.
pub fn write_reports_csv(path: &Path, reports: &[RoiReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        w.serialize(CsvRow {
            roi_id: r.roi_id,
            jsd_o_lo: r.jsd_original.lower,
            jsd_o_hi: r.jsd_original.upper,
            jsd_c_lo: r.jsd_corrupted.lower,
            jsd_c_hi: r.jsd_corrupted.upper,
            median_c0: r.median_c0,
            median_c1: r.median_c1,
            fooled: r.fooled,
            p0: r.p0,
            p1: r.p1,
            q0: r.q0,
            q1: r.q1,
            category: r.category.as_str(),
        })?;
    }
    finish_csv(path, w)
}

pub fn write_reports_json(path: &Path, reports: &[RoiReport]) -> Result<()> {
    write_json(path, &reports)
}

fn finish_csv(path: &Path, w: csv::Writer<Vec<u8>>) -> Result<()> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    atomic_write(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_even_and_odd() {
        let p = PredictionDistribution::new(vec![0.9, 0.1, 0.5]).unwrap();
        assert_eq!(p.median(), 0.5);
        let p = PredictionDistribution::new(vec![0.4, 0.1, 0.2, 0.9]).unwrap();
        assert!((p.median() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn distribution_validation() {
        assert!(PredictionDistribution::new(vec![]).is_err());
        assert!(PredictionDistribution::new(vec![1.1]).is_err());
        let a = PredictionDistribution::new(vec![0.5, 0.5]).unwrap();
        let b = PredictionDistribution::new(vec![0.5]).unwrap();
        assert!(a.shift_from(&b).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(InterpretConfig::default().validate().is_ok());
        let bad = InterpretConfig { bootstrap_replicates: 50, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = InterpretConfig { alpha_w: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
