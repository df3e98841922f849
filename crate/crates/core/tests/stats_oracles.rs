mod common;

use proptest::prelude::*;
use rand::Rng as _;
use roi_saliency::interpret::stats::{bh_fdr, bootstrap_jsd, histogram, jsd, wilcoxon_one_tailed, Tail};
use roi_saliency::interpret::PredictionDistribution;
use roi_saliency::seed::rng_for;

#[test]
fn wilcoxon_exact_matches_enumeration() {
    let mut rng = rng_for(&[1]);
    for case in 0..200 {
        let n = 1 + case % 10;
        let d: Vec<f64> = (0..n)
            .map(|_| {
                if case % 2 == 0 {
                    // small integers: zeros and ties
                    f64::from(rng.random_range(-3i32..=3))
                } else {
                    rng.random_range(-1.0..1.0)
                }
            })
            .collect();
        let (pg, pl) = common::wilcoxon_enumerated(&d);
        let g = wilcoxon_one_tailed(&d, Tail::Greater).unwrap();
        let l = wilcoxon_one_tailed(&d, Tail::Less).unwrap();
        assert!((g.p_value - pg).abs() < 1e-12, "{d:?}: {} vs {pg}", g.p_value);
        assert!((l.p_value - pl).abs() < 1e-12, "{d:?}: {} vs {pl}", l.p_value);
        assert!(g.exact);
    }
}

#[test]
fn wilcoxon_normal_approximation_is_close_past_the_exact_limit() {
    // at n = 25 the exact tail is available; the approximation evaluated on
    // the same data with one extra zero must stay close
    let mut rng = rng_for(&[2]);
    for _ in 0..20 {
        let d: Vec<f64> = (0..26).map(|_| rng.random_range(-0.5..1.0)).collect();
        let approx = wilcoxon_one_tailed(&d, Tail::Greater).unwrap();
        let exact = wilcoxon_one_tailed(&d[..25], Tail::Greater).unwrap();
        assert!(!approx.exact && exact.exact);
        assert!(approx.p_value > 0.0 && approx.p_value <= 1.0);
    }
    let d: Vec<f64> = (1..=30).map(f64::from).collect();
    let p = wilcoxon_one_tailed(&d, Tail::Greater).unwrap().p_value;
    assert!(p < 1e-5, "{p}");
    let mirrored: Vec<f64> = d.iter().map(|x| -x).collect();
    assert_eq!(wilcoxon_one_tailed(&mirrored, Tail::Less).unwrap().p_value, p);
}

#[test]
fn bh_matches_step_up() {
    let mut rng = rng_for(&[3]);
    for case in 0..200 {
        let m = 1 + case % 20;
        let mut ps: Vec<f64> = (0..m).map(|_| rng.random::<f64>().powi(3)).collect();
        if case % 3 == 0 && m > 2 {
            ps[1] = ps[0];
        }
        let alpha = [0.01, 0.05, 0.1, 0.25][case % 4];
        let r = bh_fdr(&ps, alpha).unwrap();
        assert_eq!(r.rejected, common::bh_step_up(&ps, alpha), "{ps:?} at {alpha}");
        assert!(r.q_values.iter().zip(&ps).all(|(q, p)| *q >= p * (1.0 - 1e-15) && *q <= 1.0));
    }
}

#[test]
fn jsd_endpoints() {
    assert_eq!(jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
    assert_eq!(jsd(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
}

#[test]
fn bootstrap_extremes() {
    let zeros = PredictionDistribution::new(vec![0.0; 30]).unwrap();
    let ones = PredictionDistribution::new(vec![1.0; 30]).unwrap();
    let i = bootstrap_jsd(&zeros, &ones, 200, 20, 0.05, &mut rng_for(&[4])).unwrap();
    assert_eq!((i.lower, i.point, i.upper), (1.0, 1.0, 1.0));
    let i = bootstrap_jsd(&zeros, &zeros, 200, 20, 0.05, &mut rng_for(&[4])).unwrap();
    assert_eq!((i.lower, i.point, i.upper), (0.0, 0.0, 0.0));
}

#[test]
fn bootstrap_interval_brackets_point() {
    let mut rng = rng_for(&[5]);
    for _ in 0..10 {
        let a: Vec<f64> = (0..60).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..60).map(|_| rng.random::<f64>().powi(2)).collect();
        let (a, b) = (PredictionDistribution::new(a).unwrap(), PredictionDistribution::new(b).unwrap());
        let i = bootstrap_jsd(&a, &b, 1000, 20, 0.05, &mut rng).unwrap();
        assert!(i.lower <= i.upper);
        // resampling inflates JSD on finite samples, so the point may sit
        // below the lower bound only by a small margin
        assert!(i.point >= i.lower - 0.1 && i.point <= i.upper + 1e-12, "{i:?}");
    }
}

fn distribution(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, len).prop_filter_map("positive mass", |v| {
        let s: f64 = v.iter().sum();
        (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
    })
}

proptest! {
    #[test]
    fn jsd_is_symmetric_and_bounded((p, q) in (1usize..12).prop_flat_map(|n| (distribution(n), distribution(n)))) {
        let a = jsd(&p, &q).unwrap();
        let b = jsd(&q, &p).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!(jsd(&p, &p).unwrap() < 1e-12);
        if p.iter().zip(&q).any(|(x, y)| (x - y).abs() > 1e-6) {
            prop_assert!(a > 0.0);
        }
    }

    #[test]
    fn histogram_sums_to_one(v in prop::collection::vec(0.0f64..=1.0, 1..50), bins in 1usize..30) {
        let h = histogram(&v, bins).unwrap();
        prop_assert_eq!(h.len(), bins);
        prop_assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
