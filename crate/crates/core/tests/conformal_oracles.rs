//! Split-conformal machinery against brute force and simulation.

use evisurro_core::conformal::{
    calibrate, finite_sample_quantile, nonconformity_scores, quantile_rank, CalibrationOptions, CalibrationTable,
    MiscoverageLevel, Quantile, TailAllocation,
};
use evisurro_core::evidential::RawInterval;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StudentT};

fn level(a: f64) -> MiscoverageLevel {
    MiscoverageLevel::new(a).unwrap()
}

/// Smallest score `s` with `#{scores <= s} >= (n + 1)(1 - p/q)`, in exact
/// integer arithmetic; `None` when no score qualifies.
fn brute_force_quantile(scores: &[f64], p: u64, q: u64) -> Option<f64> {
    let n = scores.len() as u64;
    let need = (n + 1) * (q - p); // compare count * q >= need
    let mut candidates: Vec<f64> = scores.to_vec();
    candidates.sort_by(f64::total_cmp);
    candidates
        .iter()
        .copied()
        .find(|&s| scores.iter().filter(|&&v| v <= s).count() as u64 * q >= need)
}

#[test]
fn rank_matches_brute_force_on_random_score_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    for _ in 0..1000 {
        let n = rng.random_range(1..300usize);
        let q = rng.random_range(2..=200u64);
        let p = rng.random_range(1..q);
        // Coarse values force ties.
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(-50..50) as f64) / 10.0).collect();
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        let got = finite_sample_quantile(&sorted, level(p as f64 / q as f64)).unwrap();
        match brute_force_quantile(&scores, p, q) {
            Some(v) => assert_eq!(got, Quantile::Finite(v), "n={n} level={p}/{q}"),
            None => assert_eq!(got, Quantile::Unattainable, "n={n} level={p}/{q}"),
        }
    }
}

#[test]
fn rank_examples() {
    let scores: Vec<f64> = (1..=19).map(f64::from).collect();
    assert_eq!(
        finite_sample_quantile(&scores, level(0.1)).unwrap(),
        Quantile::Finite(18.0)
    );
    assert_eq!(quantile_rank(19, 0.1), 18);
    assert_eq!(quantile_rank(99, 0.05), 95);
    assert_eq!(quantile_rank(9, 0.05), 10);
    assert_eq!(
        finite_sample_quantile(&scores[..9], level(0.05)).unwrap(),
        Quantile::Unattainable
    );
    assert!(finite_sample_quantile(&[], level(0.1)).is_err());
}

/// With exchangeable calibration and test scores, the calibrated interval
/// covers with probability in `[1 - a, 1 - a + 2/(n+1))`.
#[test]
fn calibrated_coverage_is_within_the_exchangeability_band() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let noise = StudentT::new(3.0).unwrap();
    // A deliberately miscalibrated raw interval: too narrow and off-centre.
    let raw = RawInterval {
        lo: -0.4,
        hi: 0.2,
        confidence: 0.9,
    };
    for &(n, a) in &[(19usize, 0.1), (39, 0.1), (99, 0.05), (200, 0.2)] {
        let trials = 20_000;
        let mut hits = 0usize;
        for _ in 0..trials {
            let (lo_rows, hi_rows): (Vec<Vec<f64>>, Vec<Vec<f64>>) = (0..n)
                .map(|_| {
                    let (l, h) = nonconformity_scores(&raw, noise.sample(&mut rng));
                    (vec![l], vec![h])
                })
                .unzip();
            let table = CalibrationTable::from_member_scores(
                vec![1],
                0.1,
                CalibrationOptions::default(),
                (0..n as u64).collect(),
                &lo_rows,
                &hi_rows,
            )
            .unwrap();
            let qs = table.quantiles(level(a));
            let (q_lo, q_hi) = qs.at(0);
            let y = noise.sample(&mut rng);
            hits += calibrate(&raw, q_lo, q_hi, level(a)).contains(y) as usize;
        }
        let cov = hits as f64 / trials as f64;
        let se = (cov * (1.0 - cov) / trials as f64).sqrt();
        let (lower, upper) = (1.0 - a, 1.0 - a + 2.0 / (n as f64 + 1.0));
        assert!(
            cov > lower - 4.0 * se && cov < upper + 4.0 * se,
            "n={n} a={a}: coverage {cov} outside [{lower}, {upper})"
        );
    }
}

#[test]
fn per_side_allocation_halves_the_attainable_miscoverage() {
    let rows: Vec<Vec<f64>> = (0..19).map(|i| vec![i as f64]).collect();
    let ids: Vec<u64> = (0..19).collect();
    let split =
        CalibrationTable::from_member_scores(vec![1], 0.1, CalibrationOptions::default(), ids.clone(), &rows, &rows)
            .unwrap();
    let per_side = CalibrationTable::from_member_scores(
        vec![1],
        0.1,
        CalibrationOptions {
            pooled: false,
            tails: TailAllocation::PerSide,
        },
        ids,
        &rows,
        &rows,
    )
    .unwrap();
    assert!((split.max_attainable_confidence() - 0.9).abs() < 1e-12);
    assert!((per_side.max_attainable_confidence() - 0.95).abs() < 1e-12);
    assert!(split.is_attainable(level(0.1)) && !split.is_attainable(level(0.09)));
    assert!(per_side.is_attainable(level(0.05)) && !per_side.is_attainable(level(0.04)));
    assert_eq!(split.quantiles(level(0.09)).at(0), (f64::INFINITY, f64::INFINITY));
}

#[test]
fn table_persistence_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n_elem = 12;
    let lo: Vec<Vec<f64>> = (0..25)
        .map(|_| (0..n_elem).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let hi: Vec<Vec<f64>> = (0..25)
        .map(|_| (0..n_elem).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    for pooled in [false, true] {
        let opts = CalibrationOptions {
            pooled,
            tails: TailAllocation::Split,
        };
        let t = CalibrationTable::from_member_scores(vec![3, 4], 0.1, opts, (100..125).collect(), &lo, &hi).unwrap();
        let a = dir.path().join("a.bin");
        let b = dir.path().join("b.bin");
        t.save(&a).unwrap();
        let back = CalibrationTable::load(&a).unwrap();
        assert_eq!(back, t);
        back.save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}

#[test]
fn corrupted_table_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64; 4]).collect();
    let t = CalibrationTable::from_member_scores(
        vec![2, 2],
        0.1,
        CalibrationOptions::default(),
        (0..5).collect(),
        &rows,
        &rows,
    )
    .unwrap();
    let path = dir.path().join("t.bin");
    t.save(&path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xFF;
    std::fs::write(&path, &bytes).unwrap();
    assert!(CalibrationTable::load(&path).is_err());
    std::fs::write(&path, &bytes[..mid]).unwrap();
    assert!(CalibrationTable::load(&path).is_err());
}

proptest! {
    #[test]
    fn calibrated_bounds_are_ordered(
        lo in -5.0f64..5.0,
        w in 0.0f64..5.0,
        q_lo in -10.0f64..10.0,
        q_hi in -10.0f64..10.0,
    ) {
        let raw = RawInterval { lo, hi: lo + w, confidence: 0.9 };
        let c = calibrate(&raw, q_lo, q_hi, level(0.1));
        prop_assert!(c.lo <= c.hi);
        prop_assert_eq!(c.clamped, lo - q_lo > lo + w + q_hi);
        if !c.clamped {
            prop_assert!((c.width() - (w + q_lo + q_hi)).abs() < 1e-12);
        }
        if q_lo >= 0.0 && q_hi >= 0.0 {
            prop_assert!(c.lo <= raw.lo && raw.hi <= c.hi);
        }
    }

    #[test]
    fn scores_are_negative_exactly_inside(lo in -5.0f64..5.0, w in 0.0f64..5.0, y in -10.0f64..10.0) {
        let raw = RawInterval { lo, hi: lo + w, confidence: 0.9 };
        let (a, b) = nonconformity_scores(&raw, y);
        prop_assert_eq!(a.max(b) <= 0.0, raw.contains(y));
    }

    #[test]
    fn lower_miscoverage_gives_nested_intervals(
        scores in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 5..120),
        a1 in 0.02f64..0.6,
        a2 in 0.02f64..0.6,
    ) {
        let (lo_rows, hi_rows): (Vec<Vec<f64>>, Vec<Vec<f64>>) = scores.iter().map(|&(l, h)| (vec![l], vec![h])).unzip();
        let n = lo_rows.len();
        let t = CalibrationTable::from_member_scores(vec![1], 0.1, CalibrationOptions::default(), (0..n as u64).collect(), &lo_rows, &hi_rows).unwrap();
        let (strict, loose) = if a1 < a2 { (a1, a2) } else { (a2, a1) };
        let raw = RawInterval { lo: -1.0, hi: 1.0, confidence: 0.9 };
        let (sl, sh) = t.quantiles(level(strict)).at(0);
        let (ll, lh) = t.quantiles(level(loose)).at(0);
        let wide = calibrate(&raw, sl, sh, level(strict));
        let narrow = calibrate(&raw, ll, lh, level(loose));
        prop_assert!(wide.lo <= narrow.lo && narrow.hi <= wide.hi);
    }

    #[test]
    fn rank_never_exceeds_n_plus_one(n in 1usize..10_000, a in 0.0001f64..0.9999) {
        let k = quantile_rank(n, a);
        prop_assert!(k >= 1 && k <= n + 1);
        prop_assert!(k as f64 >= (n as f64 + 1.0) * (1.0 - a) - 1e-6);
    }
}
