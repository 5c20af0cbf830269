//! Subsampling confidence intervals.
//!
//! Each replicate draws `⌊N₀^r⌋` controls and `⌊N₁^r⌋` treated units without
//! replacement, reruns the whole estimation pipeline (bandwidth choice and
//! nuisance fits included) and records the curve. Interval bounds are
//! type-7 empirical quantiles of the replicate estimates at each grid point.

use rand::seq::index;
use rayon::prelude::*;

use crate::data::{CurveInterval, Dataset, EvaluationGrid, GateCurve};
use crate::error::{GateError, Result};
use crate::estimators::{estimate, EstimatorConfig};
use crate::kernel::quantile_sorted;
use crate::seed::{derive_seed, stream_rng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubsampleConfig {
    /// Subsample size exponent.
    pub r: f64,
    pub b_reps: usize,
    pub level: f64,
    pub seed: u64,
    /// Shrink replicate deviations from the full-sample estimate by `√(n_b/n)`.
    pub rescale: bool,
}

impl Default for SubsampleConfig {
    fn default() -> Self {
        SubsampleConfig {
            r: 2.0 / 3.0,
            b_reps: 200,
            level: 0.95,
            seed: 0,
            rescale: false,
        }
    }
}

impl SubsampleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0 && self.r < 1.0) {
            return Err(GateError::Config(format!("r must lie in (0, 1), got {}", self.r)));
        }
        if self.b_reps < 2 {
            return Err(GateError::Config(format!("need at least 2 subsamples, got {}", self.b_reps)));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(GateError::Config(format!("level must lie in (0, 1), got {}", self.level)));
        }
        Ok(())
    }
}

/// `⌊n^r⌋`, robust to `n^r` landing a hair below an integer.
pub fn subsample_size(n: usize, r: f64) -> usize {
    ((n as f64).powf(r) + 1e-9).floor() as usize
}

/// Stratified subsample sizes `(controls, treated)`.
pub fn stratified_sizes(d: &Dataset, r: f64) -> (usize, usize) {
    (subsample_size(d.arm_size(0), r), subsample_size(d.arm_size(1), r))
}

/// Row indices (ascending) of replicate `b`.
pub fn draw_subsample(d: &Dataset, sizes: (usize, usize), seed: u64, b: usize) -> Vec<usize> {
    let mut rng = stream_rng(seed, b as u64);
    let mut rows = Vec::with_capacity(sizes.0 + sizes.1);
    for (arm, take) in [(0u8, sizes.0), (1u8, sizes.1)] {
        let members = d.arm_indices(arm);
        rows.extend(index::sample(&mut rng, members.len(), take).into_iter().map(|k| members[k]));
    }
    rows.sort_unstable();
    rows
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsampleResult {
    pub interval: CurveInterval,
    /// `b_reps × grid` replicate estimates.
    pub replicates: Vec<Vec<Option<f64>>>,
    /// Missing replicate values per grid point.
    pub missing: Vec<usize>,
    /// Replicates whose estimator returned an error.
    pub failed_replicates: usize,
    pub sizes: (usize, usize),
}

/// Runs `f` on every subsample; `f` receives the subsample and a replicate seed.
///
/// Results come back in replicate order whatever the thread count.
pub fn run_subsamples<T, F>(d: &Dataset, sub: &SubsampleConfig, min_arm: usize, f: F) -> Result<(Vec<Result<T>>, (usize, usize))>
where
    T: Send,
    F: Fn(&Dataset, u64) -> Result<T> + Sync,
{
    sub.validate()?;
    let sizes = stratified_sizes(d, sub.r);
    if sizes.0 < min_arm || sizes.1 < min_arm {
        return Err(GateError::Subsample(format!(
            "subsample sizes ({}, {}) are below the required {min_arm} per arm",
            sizes.0, sizes.1
        )));
    }
    let out = (0..sub.b_reps)
        .into_par_iter()
        .map(|b| {
            let rows = draw_subsample(d, sizes, sub.seed, b);
            let sd = d.subset(&rows)?;
            f(&sd, derive_seed(sub.seed, &[b as u64]))
        })
        .collect();
    Ok((out, sizes))
}

/// Quantile bounds from replicate curves.
///
/// `center` is the full-sample estimate, needed only when `scale` is not 1.
pub fn intervals_from_replicates(
    replicates: &[Vec<Option<f64>>],
    n_points: usize,
    level: f64,
    center: Option<&[Option<f64>]>,
    scale: f64,
) -> (CurveInterval, Vec<usize>) {
    let alpha = 1.0 - level;
    let b = replicates.len();
    let mut lower = Vec::with_capacity(n_points);
    let mut upper = Vec::with_capacity(n_points);
    let mut unreliable = Vec::with_capacity(n_points);
    let mut missing = Vec::with_capacity(n_points);
    for k in 0..n_points {
        let mut vals: Vec<f64> = replicates.iter().filter_map(|r| r[k]).collect();
        vals.sort_by(f64::total_cmp);
        let miss = b - vals.len();
        missing.push(miss);
        unreliable.push(2 * miss > b);
        if vals.is_empty() {
            lower.push(None);
            upper.push(None);
            continue;
        }
        let lo = quantile_sorted(&vals, alpha / 2.0);
        let hi = quantile_sorted(&vals, 1.0 - alpha / 2.0);
        match center.and_then(|c| c[k]) {
            Some(c) if scale != 1.0 => {
                lower.push(Some(c + scale * (lo - c)));
                upper.push(Some(c + scale * (hi - c)));
            }
            _ => {
                lower.push(Some(lo));
                upper.push(Some(hi));
            }
        }
    }
    (
        CurveInterval {
            lower,
            upper,
            unreliable,
        },
        missing,
    )
}

/// Subsampling interval for one estimator.
pub fn subsample_ci(
    d: &Dataset,
    estimator: &EstimatorConfig,
    grid: &EvaluationGrid,
    sub: &SubsampleConfig,
) -> Result<SubsampleResult> {
    estimator.validate()?;
    let full = if sub.rescale {
        Some(estimate(d, grid, estimator)?)
    } else {
        None
    };
    subsample_ci_with(d, grid, sub, estimator.matching.m + 1, full.as_ref(), |sd, seed| {
        let cfg = EstimatorConfig {
            seed,
            ..estimator.clone()
        };
        Ok(estimate(sd, grid, &cfg)?.estimates)
    })
}

/// Subsampling interval around an arbitrary curve-valued procedure.
pub fn subsample_ci_with<F>(
    d: &Dataset,
    grid: &EvaluationGrid,
    sub: &SubsampleConfig,
    min_arm: usize,
    full: Option<&GateCurve>,
    f: F,
) -> Result<SubsampleResult>
where
    F: Fn(&Dataset, u64) -> Result<Vec<Option<f64>>> + Sync,
{
    let (results, sizes) = run_subsamples(d, sub, min_arm, f)?;
    let mut failed = 0;
    let replicates: Vec<Vec<Option<f64>>> = results
        .into_iter()
        .map(|r| match r {
            Ok(v) if v.len() == grid.len() => v,
            _ => {
                failed += 1;
                vec![None; grid.len()]
            }
        })
        .collect();
    let scale = if sub.rescale {
        (((sizes.0 + sizes.1) as f64) / d.n() as f64).sqrt()
    } else {
        1.0
    };
    let (interval, missing) = intervals_from_replicates(
        &replicates,
        grid.len(),
        sub.level,
        full.map(|c| c.estimates.as_slice()),
        scale,
    );
    Ok(SubsampleResult {
        interval,
        replicates,
        missing,
        failed_replicates: failed,
        sizes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ZKind;

    fn toy(n: usize) -> Dataset {
        let y = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = (0..n).map(|i| u8::from(i % 3 != 0)).collect();
        let x = (0..n).map(|i| (i as f64 * 0.11).cos()).collect();
        let z = (0..n).map(|i| i as f64 / n as f64).collect();
        Dataset::new(y, a, x, 1, z, ZKind::Continuous).unwrap()
    }

    #[test]
    fn sizes_use_floor() {
        assert_eq!(subsample_size(1000, 2.0 / 3.0), 100);
        assert_eq!(subsample_size(27, 2.0 / 3.0), 9);
        assert_eq!(subsample_size(30, 2.0 / 3.0), 9);
    }

    #[test]
    fn constant_procedure_gives_degenerate_interval() {
        let d = toy(120);
        let grid = EvaluationGrid::standard();
        let sub = SubsampleConfig {
            b_reps: 20,
            seed: 4,
            ..Default::default()
        };
        let res = subsample_ci_with(&d, &grid, &sub, 2, None, |_, _| Ok(vec![Some(3.0); 5])).unwrap();
        assert_eq!(res.interval.lower, vec![Some(3.0); 5]);
        assert_eq!(res.interval.upper, vec![Some(3.0); 5]);
        assert_eq!(res.missing, vec![0; 5]);
    }

    #[test]
    fn subsamples_are_stratified_and_reproducible() {
        let d = toy(300);
        let sizes = stratified_sizes(&d, 2.0 / 3.0);
        for b in 0..10 {
            let rows = draw_subsample(&d, sizes, 11, b);
            assert_eq!(rows, draw_subsample(&d, sizes, 11, b));
            let treated = rows.iter().filter(|&&i| d.a()[i] == 1).count();
            assert_eq!((rows.len() - treated, treated), sizes);
            assert!(rows.windows(2).all(|w| w[0] < w[1]));
        }
        assert_ne!(draw_subsample(&d, sizes, 11, 0), draw_subsample(&d, sizes, 11, 1));
    }

    #[test]
    fn too_small_for_matching() {
        let d = toy(12);
        let cfg = EstimatorConfig::default();
        let sub = SubsampleConfig::default();
        assert!(matches!(
            subsample_ci(&d, &cfg, &EvaluationGrid::standard(), &sub),
            Err(GateError::Subsample(_))
        ));
    }

    #[test]
    fn mostly_missing_points_are_flagged() {
        let reps: Vec<Vec<Option<f64>>> = (0..10)
            .map(|b| vec![Some(b as f64), if b < 4 { Some(1.0) } else { None }])
            .collect();
        let (iv, missing) = intervals_from_replicates(&reps, 2, 0.9, None, 1.0);
        assert_eq!(missing, vec![0, 6]);
        assert_eq!(iv.unreliable, vec![false, true]);
        assert!(iv.lower[0].unwrap() <= iv.upper[0].unwrap());
    }

    #[test]
    fn rescaling_shrinks_toward_center() {
        let reps: Vec<Vec<Option<f64>>> = (0..11).map(|b| vec![Some(b as f64)]).collect();
        let (iv, _) = intervals_from_replicates(&reps, 1, 0.8, Some(&[Some(5.0)]), 0.5);
        // quantiles 1 and 9 pulled halfway toward 5
        assert!((iv.lower[0].unwrap() - 3.0).abs() < 1e-12);
        assert!((iv.upper[0].unwrap() - 7.0).abs() < 1e-12);
    }
}
