//! Acceptance suite: one pass/fail line per criterion, non-zero exit on any failure.

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use gatematch::kernel::{kernel_eval, local_constant_1d, local_constant_2d, Bandwidth};
use gatematch::matching::{impute_potential_outcomes, weight_form_total, MatchConfig, Metric};
use gatematch::nuisance::{cross_fit_outcome_models, fit_logistic, fit_ols, DesignSpec};
use gatematch::simulation::{run_monte_carlo, write_tidy, CaseSpec, MonteCarloConfig, SimulationReport};
use gatematch::{estimate, estimate_with, EstimatorConfig, EstimatorTag, KernelKind, NuisanceOverride, SubsampleConfig};
use nalgebra::DMatrix;
use rand::Rng;

const SEED: u64 = 20240601;

/// Reference MATCH bias and SD for case C1, z = -0.4, -0.2, 0, 0.2, 0.4.
const C1_MATCH_BIAS: [f64; 5] = [-0.009, 0.007, 0.017, 0.020, -0.005];
const C1_MATCH_SD: [f64; 5] = [0.119, 0.114, 0.111, 0.112, 0.123];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn criterion_1() -> Verdict {
    let mut r = rng(SEED);
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let p = 1 + k % 3;
        let m = [1, 3, 5][(k / 3) % 3];
        let d = random_dataset(&mut r, 50, p, m + 1);
        let io = impute_potential_outcomes(&d, &MatchConfig { m, ..Default::default() }).unwrap();
        let direct: f64 = io.effects().iter().sum();
        let weighted = weight_form_total(&io, &d).unwrap();
        worst = worst.max((direct - weighted).abs() / direct.abs().max(1.0));
    }
    verdict(worst <= 1e-10, format!("max relative error {worst:.2e} over 100 datasets"))
}

fn criterion_2() -> Verdict {
    let mut r = rng(SEED + 1);
    let mut mismatches = 0;
    for _ in 0..20 {
        let d = random_dataset(&mut r, 200, 3, 10);
        for metric in [Metric::Euclidean, Metric::Manhattan, Metric::Canberra] {
            let io = impute_potential_outcomes(&d, &MatchConfig { m: 5, metric, standardize: false }).unwrap();
            mismatches += (0..d.n())
                .filter(|&i| io.match_sets[i] != brute_force_matches(&d, i, 5, metric))
                .count();
        }
    }
    verdict(mismatches == 0, format!("{mismatches} differing match sets over 20 datasets x 3 metrics"))
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let inner: f64 = (1..n).map(|i| f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 }).sum();
    (f(a) + f(b) + inner) * h / 3.0
}

fn criterion_3() -> Verdict {
    let epa = simpson(|t| kernel_eval(KernelKind::Epanechnikov, t), -1.0, 1.0, 2000);
    let gau = simpson(|t| kernel_eval(KernelKind::Gaussian, t), -12.0, 12.0, 20000);
    let mass_err = (epa - 1.0).abs().max((gau - 1.0).abs());

    let mut r = rng(SEED + 3);
    let mut worst: f64 = 0.0;
    for k in 0..1000 {
        let kind = if k % 2 == 0 { KernelKind::Epanechnikov } else { KernelKind::Gaussian };
        let n = r.random_range(5..60);
        let zs: Vec<f64> = (0..n).map(|_| normal(&mut r)).collect();
        let vs: Vec<f64> = (0..n).map(|_| 5.0 * normal(&mut r)).collect();
        let z0 = normal(&mut r);
        let h = Bandwidth::new(r.random_range(0.3..2.0)).unwrap();
        let Some(base) = local_constant_1d(&zs, &vs, z0, h, kind).unwrap() else {
            continue;
        };
        let lo = vs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        worst = worst.max(lo - base).max(base - hi);

        let (s, c) = (r.random_range(-4.0..4.0), r.random_range(-3.0..3.0));
        let mapped: Vec<f64> = vs.iter().map(|v| s + c * v).collect();
        let moved = local_constant_1d(&zs, &mapped, z0, h, kind).unwrap().unwrap();
        worst = worst.max((moved - (s + c * base)).abs());

        let flat = vec![0.3; n];
        let two = local_constant_2d(&zs, &flat, &vs, (z0, 0.3), h, Bandwidth::new(0.7).unwrap(), kind)
            .unwrap()
            .unwrap();
        worst = worst.max((two - base).abs());
    }
    verdict(
        mass_err <= 1e-6 && worst <= 1e-10,
        format!("kernel mass error {mass_err:.2e}; smoother property error {worst:.2e} over 1000 fixtures"),
    )
}

fn criterion_4() -> Verdict {
    let mut r = rng(SEED + 4);
    let mut grad: f64 = 0.0;
    let mut all_converged = true;
    let mut ols_err: f64 = 0.0;
    for _ in 0..50 {
        let n = 200;
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![1.0, normal(&mut r), normal(&mut r), normal(&mut r)]).collect();
        let beta = [0.2, 0.8, -0.5, 0.3];
        let a: Vec<u8> = rows
            .iter()
            .map(|x| u8::from(r.random_bool(1.0 / (1.0 + (-dot(x, &beta)).exp()))))
            .collect();
        let x = DMatrix::from_fn(n, 4, |i, j| rows[i][j]);
        let fit = fit_logistic(&x, &a, 1e-8, 100).unwrap();
        all_converged &= fit.converged;
        grad = grad.max(fit.gradient_norm);

        let y: Vec<f64> = rows.iter().map(|x| dot(x, &[1.0, 2.0, -1.0, 0.5]) + normal(&mut r)).collect();
        let got = fit_ols(&x, &y).unwrap();
        for (g, o) in got.iter().zip(ols_oracle(&rows, &y)) {
            ols_err = ols_err.max((g - o).abs());
        }
    }

    let mut changed = 0;
    for f in 0..20 {
        let d = random_dataset(&mut r, 100, 2, 20);
        let base = cross_fit_outcome_models(&d, &DesignSpec::main_effects(), 5, SEED + f).unwrap();
        let i = r.random_range(0..100);
        let mut y = d.y().to_vec();
        y[i] += 1e3;
        let bumped = cross_fit_outcome_models(&d.with_outcomes(y).unwrap(), &DesignSpec::main_effects(), 5, SEED + f).unwrap();
        if base.mu0[i].to_bits() != bumped.mu0[i].to_bits() || base.mu1[i].to_bits() != bumped.mu1[i].to_bits() {
            changed += 1;
        }
    }
    verdict(
        all_converged && grad <= 1e-8 && ols_err <= 1e-10 && changed == 0,
        format!(
            "logistic max gradient norm {grad:.2e} (all converged: {all_converged}); \
             OLS max error {ols_err:.2e}; own-outcome perturbation changed {changed}/20 cross-fit predictions"
        ),
    )
}

fn bitwise_equal(a: &[Option<f64>], b: &[Option<f64>]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.map(f64::to_bits) == y.map(f64::to_bits))
}

fn criterion_5() -> Verdict {
    let mut r = rng(SEED + 5);
    let grid = gatematch::EvaluationGrid::standard();
    let (mut bc_ok, mut aipw_ok) = (0, 0);
    for f in 0..20 {
        let d = random_dataset(&mut r, 150, 2, 15);
        let zero = NuisanceOverride::zero_outcomes(d.n());
        let cfg = |tag| EstimatorConfig {
            seed: SEED + f,
            ..EstimatorConfig::for_estimator(tag)
        };
        let m = estimate(&d, &grid, &cfg(EstimatorTag::Match)).unwrap();
        let bc = estimate_with(&d, &grid, &cfg(EstimatorTag::MatchBc), &zero).unwrap();
        bc_ok += usize::from(bitwise_equal(&m.estimates, &bc.estimates));
        let ipw = estimate(&d, &grid, &cfg(EstimatorTag::Ipw)).unwrap();
        let aipw = estimate_with(&d, &grid, &cfg(EstimatorTag::Aipw), &zero).unwrap();
        aipw_ok += usize::from(bitwise_equal(&ipw.estimates, &aipw.estimates));
    }
    verdict(
        bc_ok == 20 && aipw_ok == 20,
        format!("MATCH.bc = MATCH on {bc_ok}/20, AIPW = IPW on {aipw_ok}/20 (bitwise)"),
    )
}

fn report_bytes(reports: &[&SimulationReport]) -> Vec<u8> {
    let rows: Vec<_> = reports.iter().flat_map(|r| r.tidy_rows()).collect();
    let mut buf = Vec::new();
    write_tidy(&rows, &mut buf).unwrap();
    buf
}

fn monte_carlo(n: usize, reps: usize, estimators: &[EstimatorTag]) -> MonteCarloConfig {
    MonteCarloConfig {
        estimators: estimators.to_vec(),
        ..MonteCarloConfig::new(n, reps, SEED)
    }
}

fn fmt3(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", ")
}

fn criterion_6(out: &mut Vec<u8>) -> Verdict {
    let mc = monte_carlo(2000, 300, &EstimatorTag::ALL);
    let report = run_monte_carlo(&CaseSpec::case(1).unwrap(), &mc).unwrap();
    out.extend(report_bytes(&[&report]));
    let bias: Vec<f64> = (0..5).map(|k| report.row(EstimatorTag::Match, k).unwrap().bias.unwrap()).collect();
    let sd: Vec<f64> = (0..5).map(|k| report.row(EstimatorTag::Match, k).unwrap().sd.unwrap()).collect();
    let sd_bc: Vec<f64> = (0..5).map(|k| report.row(EstimatorTag::MatchBc, k).unwrap().sd.unwrap()).collect();
    let bias_gap = bias.iter().zip(C1_MATCH_BIAS).map(|(b, r)| (b - r).abs()).fold(0.0, f64::max);
    let sd_gap = sd.iter().zip(C1_MATCH_SD).map(|(s, r)| (s - r).abs()).fold(0.0, f64::max);
    let ordered = sd_bc.iter().zip(&sd).filter(|(b, m)| b <= m).count();
    verdict(
        bias_gap <= 0.02 && ordered >= 4,
        format!(
            "MATCH bias [{}] vs reference [{}], max gap {bias_gap:.3} (tol 0.02); \
             MATCH sd [{}], max gap to reference {sd_gap:.3}; MATCH.bc sd <= MATCH sd at {ordered}/5",
            fmt3(&bias),
            fmt3(&C1_MATCH_BIAS),
            fmt3(&sd)
        ),
    )
}

fn criterion_7(out: &mut Vec<u8>) -> Verdict {
    let mc = monte_carlo(2000, 300, &[EstimatorTag::Match, EstimatorTag::MatchBc, EstimatorTag::Ipw]);
    let report = run_monte_carlo(&CaseSpec::case(4).unwrap(), &mc).unwrap();
    out.extend(report_bytes(&[&report]));
    let sd_at_zero = |tag| report.row(tag, 2).unwrap().sd.unwrap();
    let (ipw, mat) = (sd_at_zero(EstimatorTag::Ipw), sd_at_zero(EstimatorTag::Match));
    let mse = |tag| report.mse_avg(tag).unwrap();
    let (m_bc, m, m_ipw) = (mse(EstimatorTag::MatchBc), mse(EstimatorTag::Match), mse(EstimatorTag::Ipw));
    verdict(
        ipw >= 2.0 * mat && m_bc < m && m < m_ipw,
        format!("sd(0): IPW {ipw:.3} vs MATCH {mat:.3}; mse_avg MATCH.bc {m_bc:.4}, MATCH {m:.4}, IPW {m_ipw:.4}"),
    )
}

fn criterion_8(out: &mut Vec<u8>) -> Verdict {
    let mc = monte_carlo(2000, 100, &[EstimatorTag::Match, EstimatorTag::Ipw]);
    let report = run_monte_carlo(&CaseSpec::case(10).unwrap(), &mc).unwrap();
    out.extend(report_bytes(&[&report]));
    let sd = |tag| report.row(tag, 1).unwrap().sd.unwrap();
    let (ipw, mat) = (sd(EstimatorTag::Ipw), sd(EstimatorTag::Match));
    verdict(
        ipw > 1.0 && mat <= 0.2,
        format!("sd(-0.2): IPW {ipw:.3} (needs > 1.0), MATCH {mat:.3} (needs <= 0.2)"),
    )
}

fn criterion_9(out: &mut Vec<u8>) -> Verdict {
    let mut mc = monte_carlo(1000, 100, &[EstimatorTag::Match, EstimatorTag::MatchBc]);
    mc.ci = Some(SubsampleConfig {
        b_reps: 200,
        ..Default::default()
    });
    let report = run_monte_carlo(&CaseSpec::case(1).unwrap(), &mc).unwrap();
    out.extend(report_bytes(&[&report]));
    let m = report.cp95_avg(EstimatorTag::Match).unwrap();
    let bc = report.cp95_avg(EstimatorTag::MatchBc).unwrap();
    let inside = |v: f64| (0.88..=0.99).contains(&v);
    verdict(
        inside(m) && inside(bc),
        format!("average CP95: MATCH {m:.3}, MATCH.bc {bc:.3} (band [0.88, 0.99])"),
    )
}

fn criterion_10(out: &mut Vec<u8>) -> Verdict {
    let spec = CaseSpec::case(1).unwrap();
    let reports: Vec<SimulationReport> = [Metric::Euclidean, Metric::Manhattan, Metric::Canberra]
        .into_iter()
        .map(|metric| {
            let mut mc = monte_carlo(2000, 200, &[EstimatorTag::Match]);
            mc.base.matching.metric = metric;
            run_monte_carlo(&spec, &mc).unwrap()
        })
        .collect();
    out.extend(report_bytes(&reports.iter().collect::<Vec<_>>()));
    let mut gap: f64 = 0.0;
    for k in 0..5 {
        let b: Vec<f64> = reports.iter().map(|r| r.row(EstimatorTag::Match, k).unwrap().bias.unwrap()).collect();
        let hi = b.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = b.iter().cloned().fold(f64::INFINITY, f64::min);
        gap = gap.max(hi - lo);
    }
    verdict(gap <= 0.02, format!("max bias spread across metrics {gap:.4} (tol 0.02)"))
}

type Slow = fn(&mut Vec<u8>) -> Verdict;

const SLOW: [(usize, Slow, u64); 5] = [
    (6, criterion_6, 15 * 60),
    (7, criterion_7, 20 * 60),
    (8, criterion_8, 10 * 60),
    (9, criterion_9, 45 * 60),
    (10, criterion_10, 15 * 60),
];

fn print(id: usize, v: &Verdict, took: Duration, limit: u64) -> bool {
    let in_time = took.as_secs() < limit;
    let pass = v.pass && in_time;
    println!(
        "criterion {id}: {} ({:.1}s, limit {limit}s) {}",
        if pass { "PASS" } else { "FAIL" },
        took.as_secs_f64(),
        v.detail
    );
    pass
}

fn write_reports(dir: &Path, files: &[Vec<u8>]) {
    for (k, bytes) in files.iter().enumerate() {
        std::fs::write(dir.join(format!("criterion_{}.csv", k + 6)), bytes).unwrap();
    }
}

fn main() -> ExitCode {
    // `cargo test -- --list` style probes pass harness flags; only a full run evaluates.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut failed = Vec::new();
    let fast: [(usize, fn() -> Verdict, u64); 5] = [
        (1, criterion_1, 10),
        (2, criterion_2, 30),
        (3, criterion_3, 10),
        (4, criterion_4, 30),
        (5, criterion_5, 20),
    ];
    for (id, f, limit) in fast {
        let t = Instant::now();
        let v = f();
        if !print(id, &v, t.elapsed(), limit) {
            failed.push(id);
        }
    }

    let first: Vec<Vec<u8>> = SLOW
        .iter()
        .map(|&(id, f, limit)| {
            let mut bytes = Vec::new();
            let t = Instant::now();
            let v = f(&mut bytes);
            if !print(id, &v, t.elapsed(), limit) {
                failed.push(id);
            }
            bytes
        })
        .collect();

    let t = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let second: Vec<Vec<u8>> = pool.install(|| {
        SLOW.iter()
            .map(|&(_, f, _)| {
                let mut bytes = Vec::new();
                f(&mut bytes);
                bytes
            })
            .collect()
    });
    let dirs = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_reports(dirs.0.path(), &first);
    write_reports(dirs.1.path(), &second);
    let differing: Vec<usize> = (6..=10)
        .filter(|k| {
            let name = format!("criterion_{k}.csv");
            std::fs::read(dirs.0.path().join(&name)).unwrap() != std::fs::read(dirs.1.path().join(&name)).unwrap()
        })
        .collect();
    let v = verdict(
        differing.is_empty(),
        format!("rerun on a 3-thread pool; report files differing: {differing:?}"),
    );
    if !print(11, &v, t.elapsed(), 3 * 60 * 60) {
        failed.push(11);
    }

    if failed.is_empty() {
        println!("acceptance: all 11 criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failing criteria {failed:?}");
        ExitCode::FAILURE
    }
}
