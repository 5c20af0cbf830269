mod common;

use common::*;
use gatematch::nuisance::{
    assign_folds, clip_propensities, cross_fit_outcome_models, estimate_propensity, fit_logistic, fit_ols,
    fit_outcome_models, predict_logistic, DesignSpec,
};
use gatematch::simulation::{generate_case, CaseSpec};
use gatematch::{Dataset, ZKind};
use nalgebra::DMatrix;
use rand::Rng;

fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), rows[0].len(), |r, c| rows[r][c])
}

#[test]
fn logistic_matches_newton_oracle() {
    let mut r = rng(20);
    let xs: Vec<f64> = (0..20).map(|_| normal(&mut r)).collect();
    let a: Vec<u8> = xs
        .iter()
        .map(|&x| u8::from(r.random_bool(1.0 / (1.0 + (-(0.3 + 0.8 * x)).exp()))))
        .collect();
    let rows: Vec<Vec<f64>> = xs.iter().map(|&x| vec![1.0, x]).collect();
    let fit = fit_logistic(&to_matrix(&rows), &a, 1e-10, 100).unwrap();
    assert!(fit.converged);
    let oracle = logistic_oracle(&rows, &a);
    for (b, o) in fit.coefficients.iter().zip(&oracle) {
        assert!((b - o).abs() < 1e-8, "{b} vs {o}");
    }
}

#[test]
fn ols_matches_normal_equations() {
    let mut r = rng(21);
    let rows: Vec<Vec<f64>> = (0..15)
        .map(|_| vec![1.0, normal(&mut r), normal(&mut r), normal(&mut r)])
        .collect();
    let y: Vec<f64> = rows
        .iter()
        .map(|x| 0.5 - x[1] + 2.0 * x[2] + 0.1 * x[3] + normal(&mut r))
        .collect();
    let beta = fit_ols(&to_matrix(&rows), &y).unwrap();
    for (b, o) in beta.iter().zip(ols_oracle(&rows, &y)) {
        assert!((b - o).abs() < 1e-10);
    }
}

#[test]
fn ols_exact_line() {
    let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![1.0, i as f64]).collect();
    let y: Vec<f64> = (0..6).map(|i| 2.0 * i as f64).collect();
    let beta = fit_ols(&to_matrix(&rows), &y).unwrap();
    assert!(beta[0].abs() < 1e-12 && (beta[1] - 2.0).abs() < 1e-12);
}

fn twelve_units() -> Dataset {
    let mut r = rng(22);
    let x: Vec<f64> = (0..12).map(|_| normal(&mut r)).collect();
    let a: Vec<u8> = (0..12).map(|i| u8::from(i % 2 == 0)).collect();
    let y: Vec<f64> = (0..12).map(|i| 1.0 + x[i] + a[i] as f64 + normal(&mut r)).collect();
    Dataset::new(y, a, x.clone(), 1, x, ZKind::Continuous).unwrap()
}

#[test]
fn two_fold_cross_fit_equals_per_fold_oracle() {
    // seeds whose partition puts both arms in each fold
    let d = twelve_units();
    let seed = (0..100u64)
        .find(|&s| {
            let f = assign_folds(12, 2, s);
            (0..2).all(|k| (0..2u8).all(|arm| (0..12).any(|i| f[i] == k && d.a()[i] == arm)))
        })
        .unwrap();
    let pred = cross_fit_outcome_models(&d, &DesignSpec::main_effects(), 2, seed).unwrap();
    let folds = pred.folds.clone().unwrap();
    assert_eq!(folds, assign_folds(12, 2, seed));
    for i in 0..12 {
        for (arm, got) in [(0u8, pred.mu0[i]), (1u8, pred.mu1[i])] {
            let train: Vec<usize> = (0..12).filter(|&j| folds[j] != folds[i] && d.a()[j] == arm).collect();
            let rows = design_with_intercept(&d, &train);
            let y: Vec<f64> = train.iter().map(|&j| d.y()[j]).collect();
            let beta = ols_oracle(&rows, &y);
            let want = dot(&design_with_intercept(&d, &[i])[0], &beta);
            assert!((got - want).abs() < 1e-10, "unit {i} arm {arm}");
        }
    }
}

#[test]
fn folds_are_balanced_and_seeded() {
    let f = assign_folds(23, 5, 9);
    assert_eq!(f, assign_folds(23, 5, 9));
    let mut counts = [0usize; 5];
    for &k in &f {
        counts[k] += 1;
    }
    assert!(counts.iter().all(|&c| c == 4 || c == 5));
}

#[test]
fn constant_outcomes_predict_constant() {
    let d = twelve_units().with_outcomes(vec![3.5; 12]).unwrap();
    let full = fit_outcome_models(&d, &DesignSpec::main_effects()).unwrap();
    let cross = cross_fit_outcome_models(&d, &DesignSpec::main_effects(), 3, 1);
    for v in full.mu0.iter().chain(&full.mu1) {
        assert!((v - 3.5).abs() < 1e-12);
    }
    if let Ok(c) = cross {
        for v in c.mu0.iter().chain(&c.mu1) {
            assert!((v - 3.5).abs() < 1e-12);
        }
    }
}

#[test]
fn intercept_only_propensity_is_treated_share() {
    let d = twelve_units();
    let fit = estimate_propensity(&d, &DesignSpec::intercept_only(), 1e-12).unwrap();
    for p in fit.pi_hat {
        assert!((p - 0.5).abs() < 1e-10);
    }
    let x = DMatrix::from_element(10, 1, 1.0);
    let a = [1u8, 1, 1, 0, 0, 0, 0, 0, 0, 0];
    let fit = fit_logistic(&x, &a, 1e-8, 100).unwrap();
    for p in predict_logistic(&x, &fit.coefficients) {
        assert!((p - 0.3).abs() < 1e-10);
    }
}

#[test]
fn clipping_bounds_and_count() {
    let mut v = vec![0.1, 0.5, 0.9];
    assert_eq!(clip_propensities(&mut v, 0.4), 2);
    assert_eq!(v, vec![0.4, 0.5, 0.6]);
}

#[test]
fn squared_spec_on_extreme_case_produces_tiny_scores() {
    let spec = CaseSpec::case(10).unwrap();
    let sim = generate_case(&spec, 2000, 5).unwrap();
    let fit = estimate_propensity(&sim.dataset, &spec.propensity_design(), 1e-12).unwrap();
    let min = fit.pi_hat.iter().cloned().fold(f64::INFINITY, f64::min);
    let true_min = sim.true_propensity.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(true_min < 1e-4, "true min {true_min}");
    assert!(min < 1e-4, "fitted min {min}");
    assert!(fit.pi_hat.iter().all(|&p| (1e-12..=1.0 - 1e-12).contains(&p)));
    let coarse = estimate_propensity(&sim.dataset, &spec.propensity_design(), 1e-4).unwrap();
    assert!(coarse.clip_count > 0);
    assert!(coarse.pi_hat.iter().all(|&p| (1e-4..=1.0 - 1e-4).contains(&p)));
}
