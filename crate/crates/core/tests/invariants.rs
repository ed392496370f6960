mod common;

use proptest::prelude::*;
use value_flows::baselines::{atom_support, c51_project};
use value_flows::critic::{confidence_weight, variance_estimate, ReturnField};
use value_flows::diffcore::DenseArray;
use value_flows::metrics::{wasserstein1_atoms, wasserstein1_samples};
use value_flows::policies::{argmax_first, rejection_sample_with, sample_bc_action, BcFlowPolicy};

use common::{jitter, rng, uniform};

fn samples(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0..50.0f64, n)
}

fn atoms() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-20.0..20.0f64, 0.01..1.0f64), 1..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn w1_is_a_metric(x in samples(16), y in samples(16), z in samples(16)) {
        let xy = wasserstein1_samples(&x, &y).unwrap();
        prop_assert_eq!(xy, wasserstein1_samples(&y, &x).unwrap());
        prop_assert_eq!(wasserstein1_samples(&x, &x).unwrap(), 0.0);
        prop_assert!(xy >= 0.0);
        let bound = wasserstein1_samples(&x, &z).unwrap() + wasserstein1_samples(&z, &y).unwrap();
        prop_assert!(xy <= bound + 1e-9);
    }

    #[test]
    fn w1_scales_and_ignores_shifts(x in samples(10), y in samples(10), c in -3.0..3.0f64, b in -10.0..10.0f64) {
        let base = wasserstein1_samples(&x, &y).unwrap();
        let map = |v: &[f64]| v.iter().map(|e| c * e + b).collect::<Vec<_>>();
        let mapped = wasserstein1_samples(&map(&x), &map(&y)).unwrap();
        prop_assert!((mapped - c.abs() * base).abs() <= 1e-9 * (1.0 + base));
    }

    #[test]
    fn atom_w1_is_symmetric_and_separates(p in atoms(), q in atoms()) {
        let pq = wasserstein1_atoms(&p, &q);
        prop_assert!((pq - wasserstein1_atoms(&q, &p)).abs() <= 1e-9);
        prop_assert!(wasserstein1_atoms(&p, &p).abs() <= 1e-12);
        // a pure shift moves W1 by exactly the shift
        let shifted: Vec<(f64, f64)> = p.iter().map(|&(z, m)| (z + 1.5, m)).collect();
        prop_assert!((wasserstein1_atoms(&p, &shifted) - 1.5).abs() <= 1e-9);
    }

    #[test]
    fn confidence_weight_bounds_and_order(d1 in -1e6..1e6f64, d2 in -1e6..1e6f64, tau in 1e-3..1e3f64, tau2 in 1e-3..1e3f64) {
        let w = confidence_weight(d1, tau);
        prop_assert!((0.5..=1.0).contains(&w));
        let (lo, hi) = if d1.abs() <= d2.abs() { (d1, d2) } else { (d2, d1) };
        prop_assert!(confidence_weight(lo, tau) <= confidence_weight(hi, tau));
        let (t_lo, t_hi) = if tau <= tau2 { (tau, tau2) } else { (tau2, tau) };
        prop_assert!(confidence_weight(d1, t_hi) <= confidence_weight(d1, t_lo));
    }

    #[test]
    fn argmax_is_shift_invariant(v in prop::collection::vec(-1e3..1e3f64, 1..20), c in -1e3..1e3f64) {
        let k = argmax_first(&v);
        prop_assert!(v.iter().all(|x| *x <= v[k]));
        prop_assert!(v[..k].iter().all(|x| *x < v[k]));
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        // exact shifts can only merge values by rounding, never reorder them
        let ks = argmax_first(&shifted);
        prop_assert!(v[ks] == v[k] || shifted[ks] == shifted[k]);
    }

    #[test]
    fn c51_projection_conserves_mass_and_mean(
        raw in prop::collection::vec(0.0..1.0f64, 11),
        r in -0.5..0.5f64,
        gamma in 0.0..0.9f64,
    ) {
        let support = atom_support(-5.0, 5.0, 11).unwrap();
        let total: f64 = raw.iter().sum::<f64>() + 1e-9;
        let probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
        let out = c51_project(r, gamma, &probs, &support);
        prop_assert!(out.iter().all(|p| *p >= 0.0));
        prop_assert!((out.iter().sum::<f64>() - probs.iter().sum::<f64>()).abs() <= 1e-12);
        // shifted atoms stay inside the support here, so the linear split
        // keeps the mean exactly
        let mean_in: f64 = support.iter().zip(&probs).map(|(z, p)| (r + gamma * z) * p).sum();
        let mean_out: f64 = support.iter().zip(&out).map(|(z, p)| z * p).sum();
        prop_assert!((mean_in - mean_out).abs() <= 1e-9);
    }

    #[test]
    fn c51_projection_keeps_grid_atoms(k in 0usize..11, shift in -5i32..5) {
        // r on the grid with gamma = 1 moves whole atoms
        let support = atom_support(-5.0, 5.0, 11).unwrap();
        let mut probs = vec![0.0; 11];
        probs[k] = 1.0;
        let out = c51_project(f64::from(shift), 1.0, &probs, &support);
        let dest = (k as i32 + shift).clamp(0, 10) as usize;
        prop_assert_eq!(out[dest], 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn variance_is_non_negative(seed in 0u64..1000) {
        let mut r = rng(seed);
        let mut field = ReturnField::new(2, 1, &[8], &mut r);
        jitter(&mut field.params, 0.5, &mut r);
        let sa = uniform(4, 3, &mut r);
        let noise: Vec<f64> = (0..16).map(|i| -2.0 + 0.25 * i as f64).collect();
        let var = variance_estimate(&field, &sa, &noise, 5).unwrap();
        prop_assert!(var.iter().all(|v| *v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn rejection_picks_a_candidate(seed in 0u64..1000, n_cand in 1usize..6) {
        let mut r = rng(seed);
        let mut bc = BcFlowPolicy::new(2, 1, &[8], &mut r);
        jitter(&mut bc.params, 0.5, &mut r);
        let s = uniform(3, 2, &mut r);
        let q = |sa: &DenseArray| Ok((0..sa.rows()).map(|i| sa.get(i, 2).sin()).collect());
        let out = rejection_sample_with(&q, &bc, &s, n_cand, 4, None, &mut rng(seed + 1)).unwrap();
        // replay the candidate draw with the same stream
        let states = value_flows::critic::repeat_rows(&s, n_cand);
        let eps = value_flows::flowkit::sample_noise(&mut rng(seed + 1), 3 * n_cand, 1);
        let cands = sample_bc_action(&bc, &states, &eps, 4).unwrap();
        for i in 0..3 {
            let a = out.get(i, 0);
            prop_assert!((-1.0..=1.0).contains(&a));
            prop_assert!((0..n_cand).any(|k| cands.get(i * n_cand + k, 0) == a));
        }
    }
}
