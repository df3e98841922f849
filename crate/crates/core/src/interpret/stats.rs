//! Distribution-shift statistics: histogram JSD with percentile bootstrap
//! bounds, the one-tailed Wilcoxon signed-rank test, and Benjamini–Hochberg
//! q-values.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use super::PredictionDistribution;
use crate::seed::Rng;
use crate::{Error, Result};

/// Equal-width histogram of probabilities over `[0, 1]`, normalized to sum
/// to 1. The value 1 falls in the last cell.
pub fn histogram(p: &[f64], bins: usize) -> Result<Vec<f64>> {
    if p.is_empty() {
        return Err(Error::Empty("cannot histogram an empty vector".into()));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
    }
    let mut h = vec![0.0; bins];
    for &v in p {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!("probability {v} outside [0, 1]")));
        }
        h[cell(v, bins)] += 1.0;
    }
    let n = p.len() as f64;
    h.iter_mut().for_each(|c| *c /= n);
    Ok(h)
}

fn cell(v: f64, bins: usize) -> usize {
    ((v * bins as f64) as usize).min(bins - 1)
}

/// Jensen–Shannon divergence in bits; `0 ≤ jsd ≤ 1`.
pub fn jsd(p0: &[f64], p1: &[f64]) -> Result<f64> {
    if p0.len() != p1.len() {
        return Err(Error::Shape(format!(
            "distributions have {} and {} cells",
            p0.len(),
            p1.len()
        )));
    }
    for p in [p0, p1] {
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-9 || p.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "not a probability distribution (sum {s})"
            )));
        }
    }
    let mut d = 0.0;
    for (&a, &b) in p0.iter().zip(p1) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            d += 0.5 * a * (a / m).log2();
        }
        if b > 0.0 {
            d += 0.5 * b * (b / m).log2();
        }
    }
    Ok(d.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JsdInterval {
    pub lower: f64,
    pub upper: f64,
    /// JSD of the un-resampled histograms.
    pub point: f64,
}

/// Sorted bootstrap replicates of the histogram JSD between two prediction
/// vectors. Intervals at any confidence level can be read off afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapJsd {
    pub point: f64,
    replicates: Vec<f64>,
}

impl BootstrapJsd {
    /// Resamples both vectors with replacement (original sizes) `replicates`
    /// times and records each replicate's histogram JSD.
    pub fn compute(
        p0: &PredictionDistribution,
        p1: &PredictionDistribution,
        replicates: usize,
        bins: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if replicates == 0 {
            return Err(Error::InvalidArgument("bootstrap needs at least one replicate".into()));
        }
        let (a, b) = (p0.values(), p1.values());
        let point = jsd(&histogram(a, bins)?, &histogram(b, bins)?)?;
        let mut reps = Vec::with_capacity(replicates);
        let mut h0 = vec![0.0; bins];
        let mut h1 = vec![0.0; bins];
        for _ in 0..replicates {
            resample_histogram(a, bins, &mut h0, rng);
            resample_histogram(b, bins, &mut h1, rng);
            reps.push(jsd(&h0, &h1)?);
        }
        reps.sort_by(f64::total_cmp);
        Ok(BootstrapJsd {
            point,
            replicates: reps,
        })
    }

    pub fn replicates(&self) -> &[f64] {
        &self.replicates
    }

    /// Percentile interval at confidence `1 − alpha`.
    pub fn interval(&self, alpha: f64) -> JsdInterval {
        JsdInterval {
            lower: quantile_sorted(&self.replicates, alpha / 2.0),
            upper: quantile_sorted(&self.replicates, 1.0 - alpha / 2.0),
            point: self.point,
        }
    }
}

fn resample_histogram(v: &[f64], bins: usize, h: &mut [f64], rng: &mut Rng) {
    h.iter_mut().for_each(|c| *c = 0.0);
    for _ in 0..v.len() {
        h[cell(v[rng.random_range(0..v.len())], bins)] += 1.0;
    }
    let n = v.len() as f64;
    h.iter_mut().for_each(|c| *c /= n);
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap interval for the histogram JSD at confidence `1 − alpha`.
pub fn bootstrap_jsd(
    p0: &PredictionDistribution,
    p1: &PredictionDistribution,
    replicates: usize,
    bins: usize,
    alpha: f64,
    rng: &mut Rng,
) -> Result<JsdInterval> {
    Ok(BootstrapJsd::compute(p0, p1, replicates, bins, rng)?.interval(alpha))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tail {
    /// Alternative: differences tend to be positive.
    Greater,
    /// Alternative: differences tend to be negative.
    Less,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub p_value: f64,
    /// Sum of ranks of the positive differences.
    pub w_plus: f64,
    /// Differences left after dropping zeros.
    pub n: usize,
    pub exact: bool,
    /// Every difference was zero; `p_value` is 1.
    pub degenerate: bool,
}

/// Largest sample size evaluated with the exact null distribution.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

/// Average ranks (1-based) of `|d|`, ties sharing the mean rank.
fn abs_ranks(d: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.sort_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()));
    let mut ranks = vec![0.0; d.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && d[idx[j + 1]].abs() == d[idx[i]].abs() {
            j += 1;
        }
        let r = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

/// One-tailed Wilcoxon signed-rank test of paired differences.
///
/// Zero differences are dropped. Up to [`WILCOXON_EXACT_MAX_N`] remaining
/// differences the p-value is the exact tail of the signed-rank null
/// distribution (ties handled by counting over doubled mid-ranks); beyond
/// that a normal approximation with tie-corrected variance and continuity
/// correction is used.
pub fn wilcoxon_one_tailed(shifts: &[f64], tail: Tail) -> Result<WilcoxonResult> {
    if shifts.is_empty() {
        return Err(Error::Empty("Wilcoxon test needs at least one difference".into()));
    }
    if shifts.iter().any(|d| !d.is_finite()) {
        return Err(Error::InvalidArgument("non-finite difference".into()));
    }
    let d: Vec<f64> = shifts.iter().copied().filter(|&x| x != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            p_value: 1.0,
            w_plus: 0.0,
            n: 0,
            exact: true,
            degenerate: true,
        });
    }
    let (ranks, ties) = abs_ranks(&d);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();

    let (p, exact) = if n <= WILCOXON_EXACT_MAX_N {
        // doubled ranks are integers, so the null distribution of 2·W+ is a
        // subset-sum count
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let total: usize = doubled.iter().sum();
        let mut counts = vec![0.0f64; total + 1];
        counts[0] = 1.0;
        for &r in &doubled {
            for s in (r..=total).rev() {
                counts[s] += counts[s - r];
            }
        }
        let obs = (2.0 * w_plus).round() as usize;
        let tail_count: f64 = match tail {
            Tail::Greater => counts[obs..].iter().sum(),
            Tail::Less => counts[..=obs].iter().sum(),
        };
        (tail_count / 2f64.powi(n as i32), true)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
        let sd = (nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term).sqrt();
        let upper_tail = |z: f64| 0.5 * erfc(z / std::f64::consts::SQRT_2);
        let p = match tail {
            Tail::Greater => upper_tail((w_plus - mean - 0.5) / sd),
            Tail::Less => upper_tail(-(w_plus - mean + 0.5) / sd),
        };
        (p, false)
    };
    Ok(WilcoxonResult {
        p_value: p.clamp(f64::MIN_POSITIVE, 1.0),
        w_plus,
        n,
        exact,
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdrResult {
    pub q_values: Vec<f64>,
    pub rejected: Vec<bool>,
}

/// Benjamini–Hochberg adjusted q-values, `q_(i) = min_{j ≥ i} p_(j) · m / j`
/// clamped to 1; a hypothesis is rejected when `q ≤ alpha`.
pub fn bh_fdr(ps: &[f64], alpha: f64) -> Result<FdrResult> {
    if let Some(p) = ps.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidArgument(format!("p-value {p} outside [0, 1]")));
    }
    let m = ps.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| ps[a].total_cmp(&ps[b]));
    let mut q = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        running = running.min(ps[i] * m as f64 / (rank + 1) as f64);
        q[i] = running;
    }
    let rejected = q.iter().map(|&x| x <= alpha).collect();
    Ok(FdrResult {
        q_values: q,
        rejected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn pd(v: &[f64]) -> PredictionDistribution {
        PredictionDistribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn histogram_cells() {
        assert_eq!(histogram(&[0.0, 1.0], 2).unwrap(), vec![0.5, 0.5]);
        assert_eq!(histogram(&[0.3; 5], 4).unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
        assert!(histogram(&[], 4).is_err());
        assert!(histogram(&[1.5], 4).is_err());
    }

    #[test]
    fn jsd_known_values() {
        assert_eq!(jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(jsd(&[0.25, 0.75], &[0.25, 0.75]).unwrap(), 0.0);
        assert!(jsd(&[1.0], &[0.5, 0.5]).is_err());
        assert!(jsd(&[0.6, 0.6], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn bootstrap_degenerate_cases() {
        let mut rng = Rng::seed_from_u64(3);
        let c = pd(&[0.4; 10]);
        let i = bootstrap_jsd(&c, &c, 200, 20, 0.05, &mut rng).unwrap();
        assert_eq!((i.lower, i.upper, i.point), (0.0, 0.0, 0.0));
        let i = bootstrap_jsd(&pd(&[0.0; 8]), &pd(&[1.0; 5]), 200, 20, 0.05, &mut rng).unwrap();
        assert_eq!((i.lower, i.upper, i.point), (1.0, 1.0, 1.0));
    }

    #[test]
    fn quantile_interpolates() {
        let s = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&s, 0.5), 2.0);
        assert_eq!(quantile_sorted(&s, 0.125), 0.5);
        assert_eq!(quantile_sorted(&s, 1.0), 4.0);
    }

    #[test]
    fn wilcoxon_small_exact_cases() {
        let r = wilcoxon_one_tailed(&[0.1, 0.2, 0.3, 0.4, 0.5], Tail::Greater).unwrap();
        assert_eq!(r.p_value, 0.03125);
        assert!(r.exact);
        let r = wilcoxon_one_tailed(&[0.7], Tail::Greater).unwrap();
        assert_eq!(r.p_value, 0.5);
        let r = wilcoxon_one_tailed(&[0.0, 0.0], Tail::Less).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p_value, 1.0);
        assert!(wilcoxon_one_tailed(&[], Tail::Less).is_err());
    }

    #[test]
    fn wilcoxon_mirror_symmetry() {
        let d = [0.3, -0.1, 0.25, 0.05, -0.4, 0.2, 0.2, 0.15];
        let neg: Vec<f64> = d.iter().map(|x| -x).collect();
        let a = wilcoxon_one_tailed(&d, Tail::Greater).unwrap().p_value;
        let b = wilcoxon_one_tailed(&neg, Tail::Less).unwrap().p_value;
        assert_eq!(a, b);
    }

    #[test]
    fn wilcoxon_normal_branch() {
        let d: Vec<f64> = (1..=40).map(|i| i as f64).collect();
        let r = wilcoxon_one_tailed(&d, Tail::Greater).unwrap();
        assert!(!r.exact);
        assert!(r.p_value > 0.0 && r.p_value < 1e-6);
        let r = wilcoxon_one_tailed(&d, Tail::Less).unwrap();
        assert!(r.p_value > 0.999);
    }

    #[test]
    fn bh_examples() {
        let r = bh_fdr(&[0.01, 0.02, 0.03, 0.04, 0.05], 0.05).unwrap();
        assert!(r.rejected.iter().all(|&x| x));
        let r = bh_fdr(&[0.03, 0.5], 0.05).unwrap();
        assert!((r.q_values[0] - 0.06).abs() < 1e-15);
        assert_eq!(r.q_values[1], 0.5);
        assert_eq!(r.rejected, vec![false, false]);
        let r = bh_fdr(&[0.04], 0.05).unwrap();
        assert_eq!(r.q_values, vec![0.04]);
        assert_eq!(r.rejected, vec![true]);
        assert!(bh_fdr(&[1.2], 0.05).is_err());
    }
}
