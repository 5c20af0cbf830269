//! Simulation designs C1–C12 and the Monte Carlo harness.
//!
//! Covariates: `X₁ ~ U(−½, ½)`, `X₂` uniform on {0, 1, 2}, `X₃ ~ N(0, 1)`.
//! Treatment follows one of three logistic mechanisms; outcomes are
//! `Y⁰ = g(X) + ε₀` and `Y¹ = g(X) + τ(X₁) + ε₁` with standard normal noise
//! and `g(X) = X₂ + X₁X₂ + (X₃³ + X₃)/2`. The subgroup variable is `Z = X₁`.
//!
//! Replicate `r` draws its data from ChaCha stream `r` of a key derived from
//! the master seed, so reports do not depend on the number of worker threads.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::data::{fmt_opt, Dataset, EstimatorTag, EvaluationGrid, ZKind};
use crate::error::{GateError, Result};
use crate::estimators::{EstimatorConfig, Session};
use crate::inference::{intervals_from_replicates, run_subsamples, SubsampleConfig};
use crate::kernel::sample_sd;
use crate::nuisance::{sigmoid, DesignSpec, Term};
use crate::seed::{derive_seed, stream_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mechanism {
    A,
    B,
    C,
}

impl Mechanism {
    /// True propensity score at `x = (x1, x2, x3)`.
    pub fn propensity(self, x: [f64; 3]) -> f64 {
        let [x1, x2, x3] = x;
        let index = match self {
            Mechanism::A => 0.5 * x1 * x1 + 0.25 * x2 * x2 - 0.125 * x3 * x3,
            Mechanism::B => 8.0 * x1 * x1 + 0.5 * x2 * x2 - 1.25 * x3 * x3,
            Mechanism::C => 5.0 * x1 + 0.25 * x2 - 0.125 * x3,
        };
        sigmoid(index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Study {
    I,
    II,
    III,
}

impl Study {
    /// Treatment effect as a function of `x1`; also the true group effect at `z = x1`.
    pub fn effect(self, x1: f64) -> f64 {
        match self {
            Study::I => 2.0 * x1 * x1,
            Study::II => x1 * (1.0 + 2.0 * x1).powi(2) * (x1 - 1.0).powi(2),
            Study::III => (3.0 * x1).cos() * (x1 + 2.0).ln() * x1.exp(),
        }
    }
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Study::I => "I",
            Study::II => "II",
            Study::III => "III",
        })
    }
}

/// τ(z) for a study.
pub fn true_gate(study: Study, z: f64) -> f64 {
    study.effect(z)
}

/// Baseline outcome surface shared by all studies.
pub fn baseline(x: [f64; 3]) -> f64 {
    let [x1, x2, x3] = x;
    x2 + x1 * x2 + 0.5 * (x3 * x3 * x3 + x3)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseSpec {
    /// 1..=12
    pub case_id: u8,
    pub mechanism: Mechanism,
    pub study: Study,
    pub fit_propensity_spec: DesignSpec,
    pub fit_outcome_spec: DesignSpec,
    /// Hide X₂ from every estimator.
    pub drop_x2: bool,
}

fn squared_terms() -> DesignSpec {
    DesignSpec::with_terms(vec![
        Term::Square("x1".into()),
        Term::Square("x2".into()),
        Term::Square("x3".into()),
    ])
}

impl CaseSpec {
    pub fn case(id: u8) -> Result<Self> {
        let (mechanism, propensity) = match id {
            1..=3 => (Mechanism::A, DesignSpec::main_effects()),
            4..=6 => (Mechanism::B, DesignSpec::main_effects()),
            7..=9 => (Mechanism::C, DesignSpec::main_effects()),
            10..=12 => (Mechanism::B, squared_terms()),
            _ => return Err(GateError::Config(format!("unknown case C{id}"))),
        };
        let study = match (id - 1) % 3 {
            0 => Study::I,
            1 => Study::II,
            _ => Study::III,
        };
        Ok(CaseSpec {
            case_id: id,
            mechanism,
            study,
            fit_propensity_spec: propensity,
            fit_outcome_spec: DesignSpec::main_effects(),
            drop_x2: false,
        })
    }

    pub fn all() -> Vec<CaseSpec> {
        (1..=12).map(|id| CaseSpec::case(id).unwrap()).collect()
    }

    pub fn without_x2(mut self) -> Self {
        self.drop_x2 = true;
        self
    }

    pub fn label(&self) -> String {
        if self.drop_x2 {
            format!("C{}-noX2", self.case_id)
        } else {
            format!("C{}", self.case_id)
        }
    }

    /// Propensity design used for estimation, after any covariate drop.
    pub fn propensity_design(&self) -> DesignSpec {
        if self.drop_x2 {
            self.fit_propensity_spec.without("x2")
        } else {
            self.fit_propensity_spec.clone()
        }
    }

    pub fn outcome_design(&self) -> DesignSpec {
        if self.drop_x2 {
            self.fit_outcome_spec.without("x2")
        } else {
            self.fit_outcome_spec.clone()
        }
    }
}

impl FromStr for CaseSpec {
    type Err = GateError;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let (body, drop) = match t.strip_suffix("-noX2") {
            Some(b) => (b, true),
            None => (t, false),
        };
        let id: u8 = body
            .trim_start_matches(['C', 'c'])
            .parse()
            .map_err(|_| GateError::Config(format!("unknown case {s:?}")))?;
        let spec = CaseSpec::case(id)?;
        Ok(if drop { spec.without_x2() } else { spec })
    }
}

/// One simulated sample.
#[derive(Debug, Clone)]
pub struct SimulatedCase {
    /// What the estimators see (X₂ removed for the missing-confounder variants).
    pub dataset: Dataset,
    pub true_propensity: Vec<f64>,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    pub study: Study,
}

impl SimulatedCase {
    pub fn true_gate(&self, z: f64) -> f64 {
        true_gate(self.study, z)
    }
}

/// Draws `n` units for `spec` from the generator keyed by `seed`.
pub fn generate_case(spec: &CaseSpec, n: usize, seed: u64) -> Result<SimulatedCase> {
    generate_with_rng(spec, n, &mut stream_rng(seed, 0))
}

fn generate_with_rng<R: Rng>(spec: &CaseSpec, n: usize, rng: &mut R) -> Result<SimulatedCase> {
    if n < 2 {
        return Err(GateError::TooSmall(format!("n = {n}, need at least 2")));
    }
    let mut x = Vec::with_capacity(3 * n);
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    let mut pi = Vec::with_capacity(n);
    let mut y0s = Vec::with_capacity(n);
    let mut y1s = Vec::with_capacity(n);
    for _ in 0..n {
        // fixed draw order per unit keeps studies comparable under one seed
        let x1: f64 = rng.random::<f64>() - 0.5;
        let x2 = rng.random_range(0..3u8) as f64;
        let x3: f64 = rng.sample(StandardNormal);
        let u: f64 = rng.random();
        let e0: f64 = rng.sample(StandardNormal);
        let e1: f64 = rng.sample(StandardNormal);

        let xs = [x1, x2, x3];
        let p = spec.mechanism.propensity(xs);
        let treated = u < p;
        let g = baseline(xs);
        let y0 = g + e0;
        let y1 = g + spec.study.effect(x1) + e1;
        x.extend_from_slice(&xs);
        a.push(u8::from(treated));
        y.push(if treated { y1 } else { y0 });
        z.push(x1);
        pi.push(p);
        y0s.push(y0);
        y1s.push(y1);
    }
    let names = vec!["x1".to_string(), "x2".to_string(), "x3".to_string()];
    let mut dataset = Dataset::with_names(y, a, x, 3, z, ZKind::Continuous, names)?;
    if spec.drop_x2 {
        dataset = dataset.without_covariate(1)?;
    }
    Ok(SimulatedCase {
        dataset,
        true_propensity: pi,
        y0: y0s,
        y1: y1s,
        study: spec.study,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloConfig {
    pub n: usize,
    pub reps: usize,
    pub estimators: Vec<EstimatorTag>,
    pub grid: EvaluationGrid,
    pub master_seed: u64,
    /// Matching, kernel and bandwidth settings; the design specs are replaced
    /// by the case's own.
    pub base: EstimatorConfig,
    /// Subsampling intervals (and coverage) for every estimator when set.
    pub ci: Option<SubsampleConfig>,
}

impl MonteCarloConfig {
    pub fn new(n: usize, reps: usize, master_seed: u64) -> Self {
        MonteCarloConfig {
            n,
            reps,
            estimators: EstimatorTag::ALL.to_vec(),
            grid: EvaluationGrid::standard(),
            master_seed,
            base: EstimatorConfig::default(),
            ci: None,
        }
    }
}

/// Metrics for one (estimator, z) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub estimator: EstimatorTag,
    pub z: f64,
    pub truth: f64,
    pub bias: Option<f64>,
    pub sd: Option<f64>,
    pub mse: Option<f64>,
    pub cp95: Option<f64>,
    /// Replicates with an estimate at this point.
    pub valid: usize,
    pub missing: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationReport {
    pub case: String,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub estimators: Vec<EstimatorTag>,
    pub grid: Vec<f64>,
    pub rows: Vec<MetricRow>,
    /// Replicates in which each estimator returned an error.
    pub failures: Vec<usize>,
}

impl SimulationReport {
    pub fn row(&self, tag: EstimatorTag, z_index: usize) -> Option<&MetricRow> {
        let e = self.estimators.iter().position(|&t| t == tag)?;
        self.rows.get(e * self.grid.len() + z_index)
    }

    pub fn rows_for(&self, tag: EstimatorTag) -> Vec<&MetricRow> {
        self.rows.iter().filter(|r| r.estimator == tag).collect()
    }

    /// Mean of the per-point MSEs.
    pub fn mse_avg(&self, tag: EstimatorTag) -> Option<f64> {
        mean_of(self.rows_for(tag).iter().map(|r| r.mse))
    }

    /// Coverage averaged over grid points.
    pub fn cp95_avg(&self, tag: EstimatorTag) -> Option<f64> {
        mean_of(self.rows_for(tag).iter().map(|r| r.cp95))
    }

    pub fn tidy_rows(&self) -> Vec<TidyRow> {
        self.rows
            .iter()
            .map(|r| TidyRow {
                case: self.case.clone(),
                estimator: r.estimator,
                z: r.z,
                bias: r.bias,
                sd: r.sd,
                mse: r.mse,
                cp95: r.cp95,
                n: self.n,
                reps: self.reps,
                seed: self.seed,
            })
            .collect()
    }
}

fn mean_of(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = vals.collect();
    let v = v?;
    if v.is_empty() {
        return None;
    }
    Some(v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-replicate output: one curve (or failure) per estimator, plus coverage flags.
#[derive(Debug, Clone)]
pub struct ReplicateResult {
    pub curves: Vec<Option<Vec<Option<f64>>>>,
    pub covered: Option<Vec<Vec<Option<bool>>>>,
}

/// Runs the Monte Carlo study for one case with the real estimators.
pub fn run_monte_carlo(spec: &CaseSpec, mc: &MonteCarloConfig) -> Result<SimulationReport> {
    mc.base.validate()?;
    if let Some(ci) = &mc.ci {
        ci.validate()?;
    }
    let base = EstimatorConfig {
        propensity_spec: spec.propensity_design(),
        outcome_spec: spec.outcome_design(),
        ..mc.base.clone()
    };
    run_monte_carlo_with(spec, mc, |sim, r| replicate(sim, r, mc, &base))
}

fn replicate(sim: &SimulatedCase, r: usize, mc: &MonteCarloConfig, base: &EstimatorConfig) -> ReplicateResult {
    let d = &sim.dataset;
    let cfg = EstimatorConfig {
        seed: derive_seed(mc.master_seed, &[r as u64, 1]),
        ..base.clone()
    };
    let curves = match Session::new(d, &mc.grid, cfg.clone()) {
        Ok(session) => mc
            .estimators
            .iter()
            .map(|&t| session.estimate(t).ok().map(|c| c.estimates))
            .collect(),
        Err(_) => vec![None; mc.estimators.len()],
    };
    let covered = mc.ci.map(|sub| {
        let sub = SubsampleConfig {
            seed: derive_seed(mc.master_seed, &[r as u64, 2]),
            ..sub
        };
        coverage(sim, &cfg, &mc.grid, &mc.estimators, &sub, &curves)
    });
    ReplicateResult { curves, covered }
}

/// Interval coverage of τ(z) for each estimator at each grid point.
fn coverage(
    sim: &SimulatedCase,
    cfg: &EstimatorConfig,
    grid: &EvaluationGrid,
    tags: &[EstimatorTag],
    sub: &SubsampleConfig,
    full: &[Option<Vec<Option<f64>>>],
) -> Vec<Vec<Option<bool>>> {
    let none = || vec![vec![None; grid.len()]; tags.len()];
    let runs = run_subsamples(&sim.dataset, sub, cfg.matching.m + 1, |sd, seed| {
        let c = EstimatorConfig {
            seed,
            ..cfg.clone()
        };
        let session = Session::new(sd, grid, c)?;
        Ok(tags
            .iter()
            .map(|&t| session.estimate(t).map(|c| c.estimates).unwrap_or_else(|_| vec![None; grid.len()]))
            .collect::<Vec<_>>())
    });
    let Ok((runs, sizes)) = runs else {
        return none();
    };
    let scale = if sub.rescale {
        (((sizes.0 + sizes.1) as f64) / sim.dataset.n() as f64).sqrt()
    } else {
        1.0
    };
    let per_rep: Vec<Vec<Vec<Option<f64>>>> = runs
        .into_iter()
        .map(|r| r.unwrap_or_else(|_| vec![vec![None; grid.len()]; tags.len()]))
        .collect();
    (0..tags.len())
        .map(|e| {
            let reps: Vec<Vec<Option<f64>>> = per_rep.iter().map(|r| r[e].clone()).collect();
            let (iv, _) = intervals_from_replicates(&reps, grid.len(), sub.level, full[e].as_deref(), scale);
            grid.points()
                .iter()
                .enumerate()
                .map(|(k, &z)| {
                    let truth = sim.true_gate(z);
                    match (iv.lower[k], iv.upper[k]) {
                        (Some(lo), Some(hi)) => Some(lo <= truth && truth <= hi),
                        _ => None,
                    }
                })
                .collect()
        })
        .collect()
}

/// Monte Carlo loop with a caller-supplied per-replicate procedure.
///
/// `f` gets the simulated sample and the replicate index and must return one
/// entry per configured estimator.
pub fn run_monte_carlo_with<F>(spec: &CaseSpec, mc: &MonteCarloConfig, f: F) -> Result<SimulationReport>
where
    F: Fn(&SimulatedCase, usize) -> ReplicateResult + Sync,
{
    if mc.reps < 2 {
        return Err(GateError::Config(format!("need at least 2 replicates, got {}", mc.reps)));
    }
    if mc.estimators.is_empty() {
        return Err(GateError::Config("no estimators selected".into()));
    }
    let results: Vec<Result<ReplicateResult>> = (0..mc.reps)
        .into_par_iter()
        .map(|r| {
            let sim = generate_case(spec, mc.n, derive_seed(mc.master_seed, &[r as u64, 0]))?;
            let out = f(&sim, r);
            if out.curves.len() != mc.estimators.len() {
                return Err(GateError::Dimension {
                    expected: mc.estimators.len(),
                    got: out.curves.len(),
                });
            }
            Ok(out)
        })
        .collect();
    let results: Vec<ReplicateResult> = results.into_iter().collect::<Result<_>>()?;
    Ok(aggregate(spec, mc, &results))
}

fn aggregate(spec: &CaseSpec, mc: &MonteCarloConfig, results: &[ReplicateResult]) -> SimulationReport {
    let grid = mc.grid.points();
    let mut rows = Vec::with_capacity(mc.estimators.len() * grid.len());
    let mut failures = vec![0; mc.estimators.len()];
    for (e, &tag) in mc.estimators.iter().enumerate() {
        failures[e] = results.iter().filter(|r| r.curves[e].is_none()).count();
        for (k, &z) in grid.iter().enumerate() {
            let truth = true_gate(spec.study, z);
            let vals: Vec<f64> = results
                .iter()
                .filter_map(|r| r.curves[e].as_ref().and_then(|c| c[k]))
                .collect();
            let valid = vals.len();
            let (bias, sd, mse) = if valid == 0 {
                (None, None, None)
            } else {
                let mean = vals.iter().sum::<f64>() / valid as f64;
                let mse = vals.iter().map(|v| (v - truth).powi(2)).sum::<f64>() / valid as f64;
                let sd = (valid >= 2).then(|| sample_sd(&vals));
                (Some(mean - truth), sd, Some(mse))
            };
            let flags: Vec<bool> = results
                .iter()
                .filter_map(|r| r.covered.as_ref().and_then(|c| c[e][k]))
                .collect();
            let cp95 = (!flags.is_empty())
                .then(|| flags.iter().filter(|&&c| c).count() as f64 / flags.len() as f64);
            rows.push(MetricRow {
                estimator: tag,
                z,
                truth,
                bias,
                sd,
                mse,
                cp95,
                valid,
                missing: results.len() - valid,
            });
        }
    }
    SimulationReport {
        case: spec.label(),
        n: mc.n,
        reps: mc.reps,
        seed: mc.master_seed,
        estimators: mc.estimators.clone(),
        grid: grid.to_vec(),
        rows,
        failures,
    }
}

/// One line of the tidy report.
#[derive(Debug, Clone, PartialEq)]
pub struct TidyRow {
    pub case: String,
    pub estimator: EstimatorTag,
    pub z: f64,
    pub bias: Option<f64>,
    pub sd: Option<f64>,
    pub mse: Option<f64>,
    pub cp95: Option<f64>,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
}

pub const TIDY_HEADER: [&str; 10] = ["case", "estimator", "z", "bias", "sd", "mse", "cp95", "n", "reps", "seed"];

pub fn write_tidy<W: Write>(rows: &[TidyRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(TIDY_HEADER)?;
    for r in rows {
        wtr.write_record([
            r.case.clone(),
            r.estimator.to_string(),
            r.z.to_string(),
            fmt_opt(r.bias),
            fmt_opt(r.sd),
            fmt_opt(r.mse),
            fmt_opt(r.cp95),
            r.n.to_string(),
            r.reps.to_string(),
            r.seed.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Parses a tidy report (lines starting with `#` are skipped).
pub fn read_tidy<R: BufRead>(r: R) -> Result<Vec<TidyRow>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != TIDY_HEADER {
        return Err(GateError::Schema(format!("unexpected report header {headers:?}")));
    }
    let opt = |s: &str, row: usize, col: &str| -> Result<Option<f64>> {
        if s == "NA" {
            return Ok(None);
        }
        s.parse().map(Some).map_err(|_| GateError::Data {
            row,
            column: col.into(),
            reason: format!("cannot parse {s:?}"),
        })
    };
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let int = |k: usize| -> Result<u64> {
            rec[k].parse().map_err(|_| GateError::Data {
                row,
                column: TIDY_HEADER[k].into(),
                reason: format!("cannot parse {:?}", &rec[k]),
            })
        };
        out.push(TidyRow {
            case: rec[0].to_string(),
            estimator: rec[1].parse()?,
            z: opt(&rec[2], row, "z")?.ok_or_else(|| GateError::Data {
                row,
                column: "z".into(),
                reason: "missing z".into(),
            })?,
            bias: opt(&rec[3], row, "bias")?,
            sd: opt(&rec[4], row, "sd")?,
            mse: opt(&rec[5], row, "mse")?,
            cp95: opt(&rec[6], row, "cp95")?,
            n: int(7)? as usize,
            reps: int(8)? as usize,
            seed: int(9)?,
        });
    }
    Ok(out)
}

/// Cases and estimators in first-appearance order, and z values in sorted order.
fn layout(rows: &[TidyRow]) -> (Vec<String>, Vec<EstimatorTag>) {
    let mut cases: Vec<String> = Vec::new();
    let mut tags: Vec<EstimatorTag> = Vec::new();
    for r in rows {
        if !cases.contains(&r.case) {
            cases.push(r.case.clone());
        }
        if !tags.contains(&r.estimator) {
            tags.push(r.estimator);
        }
    }
    tags.sort();
    (cases, tags)
}

fn z_values(rows: &[TidyRow], case: &str) -> Vec<f64> {
    let mut zs: Vec<f64> = rows.iter().filter(|r| r.case == case).map(|r| r.z).collect();
    zs.sort_by(f64::total_cmp);
    zs.dedup();
    zs
}

fn cell<'a>(rows: &'a [TidyRow], case: &str, tag: EstimatorTag, z: f64) -> Option<&'a TidyRow> {
    rows.iter().find(|r| r.case == case && r.estimator == tag && r.z == z)
}

fn fmt3(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.3}"))
}

/// Bias/SD table with one row per (case, z) and two columns per estimator.
pub fn write_wide<W: Write>(rows: &[TidyRow], w: W) -> Result<()> {
    let (cases, tags) = layout(rows);
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["case".to_string(), "z".to_string()];
    for t in &tags {
        header.push(format!("{}_bias", t.table_label()));
        header.push(format!("{}_sd", t.table_label()));
    }
    wtr.write_record(&header)?;
    for case in &cases {
        for z in z_values(rows, case) {
            let mut rec = vec![case.clone(), z.to_string()];
            for &t in &tags {
                let c = cell(rows, case, t, z);
                rec.push(fmt3(c.and_then(|c| c.bias)));
                rec.push(fmt3(c.and_then(|c| c.sd)));
            }
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// MSE table with one row per (case, z) and one column per estimator.
pub fn write_mse_table<W: Write>(rows: &[TidyRow], w: W) -> Result<()> {
    let (cases, tags) = layout(rows);
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["case".to_string(), "z".to_string()];
    header.extend(tags.iter().map(|t| t.table_label().to_string()));
    wtr.write_record(&header)?;
    for case in &cases {
        for z in z_values(rows, case) {
            let mut rec = vec![case.clone(), z.to_string()];
            rec.extend(tags.iter().map(|&t| fmt3(cell(rows, case, t, z).and_then(|c| c.mse))));
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingRow {
    pub case: String,
    pub rank: usize,
    pub estimator: EstimatorTag,
    pub mse_avg: Option<f64>,
    pub cp95: Option<f64>,
}

/// Estimators ranked by average MSE within each case (missing MSE last).
pub fn compare_metrics(rows: &[TidyRow]) -> Vec<RankingRow> {
    let (cases, tags) = layout(rows);
    let mut out = Vec::new();
    for case in &cases {
        let mut entries: Vec<(EstimatorTag, Option<f64>, Option<f64>)> = tags
            .iter()
            .filter(|&&t| rows.iter().any(|r| r.case == *case && r.estimator == t))
            .map(|&t| {
                let mine: Vec<&TidyRow> = rows.iter().filter(|r| r.case == *case && r.estimator == t).collect();
                (
                    t,
                    mean_of(mine.iter().map(|r| r.mse)),
                    mean_of(mine.iter().map(|r| r.cp95)),
                )
            })
            .collect();
        entries.sort_by(|a, b| match (a.1, b.1) {
            (Some(x), Some(y)) => x.total_cmp(&y).then(a.0.cmp(&b.0)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => a.0.cmp(&b.0),
        });
        out.extend(entries.into_iter().enumerate().map(|(k, (t, mse, cp))| RankingRow {
            case: case.clone(),
            rank: k + 1,
            estimator: t,
            mse_avg: mse,
            cp95: cp,
        }));
    }
    out
}

pub fn write_ranking<W: Write>(ranking: &[RankingRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["case", "rank", "estimator", "mse_avg", "cp95"])?;
    for r in ranking {
        wtr.write_record([
            r.case.clone(),
            r.rank.to_string(),
            r.estimator.to_string(),
            fmt_opt(r.mse_avg),
            fmt_opt(r.cp95),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
