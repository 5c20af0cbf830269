//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use gatematch::{Dataset, KernelKind, Metric, ZKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

/// Continuous covariates, balanced-ish arms with at least `min_arm` units each,
/// `z` equal to the first covariate.
pub fn random_dataset(r: &mut ChaCha8Rng, n: usize, p: usize, min_arm: usize) -> Dataset {
    loop {
        let x: Vec<f64> = (0..n * p).map(|_| normal(r)).collect();
        let a: Vec<u8> = (0..n).map(|_| u8::from(r.random_bool(0.5))).collect();
        let treated = a.iter().filter(|&&v| v == 1).count();
        if treated < min_arm || n - treated < min_arm {
            continue;
        }
        let y: Vec<f64> = (0..n).map(|i| x[i * p] + 0.5 * a[i] as f64 + normal(r)).collect();
        let z: Vec<f64> = (0..n).map(|i| x[i * p]).collect();
        return Dataset::new(y, a, x, p, z, ZKind::Continuous).unwrap();
    }
}

pub fn distance(u: &[f64], v: &[f64], metric: Metric) -> f64 {
    match metric {
        Metric::Euclidean => u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
        Metric::Manhattan => u.iter().zip(v).map(|(a, b)| (a - b).abs()).sum(),
        Metric::Canberra => u
            .iter()
            .zip(v)
            .map(|(a, b)| {
                let den = a.abs() + b.abs();
                if den == 0.0 {
                    0.0
                } else {
                    (a - b).abs() / den
                }
            })
            .sum(),
    }
}

/// Sorts every opposite-arm unit by (distance, index) and keeps the first `m`.
pub fn brute_force_matches(d: &Dataset, i: usize, m: usize, metric: Metric) -> Vec<usize> {
    let mut cands: Vec<(f64, usize)> = (0..d.n())
        .filter(|&j| d.a()[j] != d.a()[i])
        .map(|j| (distance(d.row(i), d.row(j), metric), j))
        .collect();
    cands.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));
    cands.into_iter().take(m).map(|c| c.1).collect()
}

/// (ŷ⁰, ŷ¹) straight from the definition.
pub fn imputation_oracle(d: &Dataset, m: usize, metric: Metric) -> (Vec<f64>, Vec<f64>) {
    let mut y0 = vec![0.0; d.n()];
    let mut y1 = vec![0.0; d.n()];
    for i in 0..d.n() {
        let set = brute_force_matches(d, i, m, metric);
        let avg = set.iter().map(|&j| d.y()[j]).sum::<f64>() / m as f64;
        if d.a()[i] == 1 {
            y1[i] = d.y()[i];
            y0[i] = avg;
        } else {
            y0[i] = d.y()[i];
            y1[i] = avg;
        }
    }
    (y0, y1)
}

pub fn kernel(kind: KernelKind, t: f64) -> f64 {
    match kind {
        KernelKind::Epanechnikov => {
            if t.abs() <= 1.0 {
                0.75 * (1.0 - t * t)
            } else {
                0.0
            }
        }
        KernelKind::Gaussian => (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt(),
    }
}

pub fn nw(zs: &[f64], vs: &[f64], z0: f64, h: f64, kind: KernelKind) -> Option<f64> {
    let w: Vec<f64> = zs.iter().map(|z| kernel(kind, (z - z0) / h)).collect();
    let s: f64 = w.iter().sum();
    (s > 0.0).then(|| w.iter().zip(vs).map(|(w, v)| w * v).sum::<f64>() / s)
}

pub fn nw2(r1: &[f64], r2: &[f64], vs: &[f64], at: (f64, f64), h: (f64, f64), kind: KernelKind) -> Option<f64> {
    let w: Vec<f64> = r1
        .iter()
        .zip(r2)
        .map(|(a, b)| kernel(kind, (a - at.0) / h.0) * kernel(kind, (b - at.1) / h.1))
        .collect();
    let s: f64 = w.iter().sum();
    (s > 0.0).then(|| w.iter().zip(vs).map(|(w, v)| w * v).sum::<f64>() / s)
}

/// Gaussian elimination with partial pivoting.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| a[i][c].abs().partial_cmp(&a[j][c].abs()).unwrap()).unwrap();
        a.swap(c, piv);
        b.swap(c, piv);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Row-major design with a leading column of ones.
pub fn design_with_intercept(d: &Dataset, rows: &[usize]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|&i| std::iter::once(1.0).chain(d.row(i).iter().copied()).collect())
        .collect()
}

/// (XᵀX)⁻¹Xᵀy.
pub fn ols_oracle(x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let k = x[0].len();
    let mut xtx = vec![vec![0.0; k]; k];
    let mut xty = vec![0.0; k];
    for (row, &yi) in x.iter().zip(y) {
        for a in 0..k {
            xty[a] += row[a] * yi;
            for b in 0..k {
                xtx[a][b] += row[a] * row[b];
            }
        }
    }
    solve(xtx, xty)
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Plain Newton iterations for the logistic likelihood, run to stationarity.
pub fn logistic_oracle(x: &[Vec<f64>], a: &[u8]) -> Vec<f64> {
    let k = x[0].len();
    let mut beta = vec![0.0; k];
    for _ in 0..200 {
        let mut grad = vec![0.0; k];
        let mut hess = vec![vec![0.0; k]; k];
        for (row, &ai) in x.iter().zip(a) {
            let p = 1.0 / (1.0 + (-dot(row, &beta)).exp());
            for r in 0..k {
                grad[r] += (ai as f64 - p) * row[r];
                for c in 0..k {
                    hess[r][c] += p * (1.0 - p) * row[r] * row[c];
                }
            }
        }
        if grad.iter().map(|g| g * g).sum::<f64>().sqrt() < 1e-13 {
            break;
        }
        let step = solve(hess, grad);
        for r in 0..k {
            beta[r] += step[r];
        }
    }
    beta
}
