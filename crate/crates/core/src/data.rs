//! Observational datasets, evaluation grids and estimated effect curves.
//!
//! A [`Dataset`] holds the outcome `y`, binary treatment `a`, covariate
//! matrix `x` (row-major, `n × p`) and the subgroup variable `z`. It is
//! validated on construction and immutable afterwards, so it can be shared
//! read-only between worker threads.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::error::{GateError, Result};

/// Whether the subgroup variable is smoothed with a kernel or stratified exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZKind {
    #[default]
    Continuous,
    Discrete,
}

impl FromStr for ZKind {
    type Err = GateError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "continuous" => Ok(ZKind::Continuous),
            "discrete" => Ok(ZKind::Discrete),
            other => Err(GateError::Config(format!("unknown z kind {other:?}"))),
        }
    }
}

impl fmt::Display for ZKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ZKind::Continuous => "continuous",
            ZKind::Discrete => "discrete",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<f64>,
    a: Vec<u8>,
    x: Vec<f64>,
    p: usize,
    z: Vec<f64>,
    z_kind: ZKind,
    covariate_names: Vec<String>,
}

impl Dataset {
    /// Builds and validates a dataset. `x` is row-major with `p` columns.
    pub fn new(
        y: Vec<f64>,
        a: Vec<u8>,
        x: Vec<f64>,
        p: usize,
        z: Vec<f64>,
        z_kind: ZKind,
    ) -> Result<Self> {
        let names = (1..=p).map(|j| format!("x{j}")).collect();
        Self::with_names(y, a, x, p, z, z_kind, names)
    }

    pub fn with_names(
        y: Vec<f64>,
        a: Vec<u8>,
        x: Vec<f64>,
        p: usize,
        z: Vec<f64>,
        z_kind: ZKind,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        for (len, _) in [(a.len(), "a"), (z.len(), "z")] {
            if len != n {
                return Err(GateError::Dimension {
                    expected: n,
                    got: len,
                });
            }
        }
        if x.len() != n * p {
            return Err(GateError::Dimension {
                expected: n * p,
                got: x.len(),
            });
        }
        if covariate_names.len() != p {
            return Err(GateError::Dimension {
                expected: p,
                got: covariate_names.len(),
            });
        }
        let d = Dataset {
            y,
            a,
            x,
            p,
            z,
            z_kind,
            covariate_names,
        };
        d.validate()?;
        Ok(d)
    }

    /// Returns the first violated invariant, if any.
    pub fn validate(&self) -> Result<()> {
        match self.validation_errors().into_iter().next() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Every violated invariant, one error each.
    pub fn validation_errors(&self) -> Vec<GateError> {
        let mut errs = Vec::new();
        let n = self.n();
        if n < 2 {
            errs.push(GateError::TooSmall(format!("n = {n}, need at least 2")));
        }
        if self.p < 1 {
            errs.push(GateError::TooSmall("no covariates".into()));
        }
        if let Some((row, v)) = self.a.iter().enumerate().find(|(_, &v)| v > 1) {
            errs.push(GateError::Treatment {
                row,
                value: v.to_string(),
            });
        }
        if let Some(row) = self.y.iter().position(|v| !v.is_finite()) {
            errs.push(non_finite(row, "y", self.y[row]));
        }
        if let Some(k) = self.x.iter().position(|v| !v.is_finite()) {
            let col = self.covariate_names[k % self.p.max(1)].clone();
            errs.push(non_finite(k / self.p.max(1), &col, self.x[k]));
        }
        if let Some(row) = self.z.iter().position(|v| !v.is_finite()) {
            errs.push(non_finite(row, "z", self.z[row]));
        }
        for arm in [0u8, 1] {
            if n >= 1 && !self.a.contains(&arm) {
                errs.push(GateError::EmptyArm { arm });
            }
        }
        errs
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn a(&self) -> &[u8] {
        &self.a
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn z_kind(&self) -> ZKind {
        self.z_kind
    }

    /// Row-major covariate matrix.
    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn arm_indices(&self, arm: u8) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.a[i] == arm).collect()
    }

    pub fn arm_size(&self, arm: u8) -> usize {
        self.a.iter().filter(|&&v| v == arm).count()
    }

    /// Sub-dataset made of the given rows, in the order given.
    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        let mut x = Vec::with_capacity(rows.len() * self.p);
        for &i in rows {
            x.extend_from_slice(self.row(i));
        }
        Dataset::with_names(
            rows.iter().map(|&i| self.y[i]).collect(),
            rows.iter().map(|&i| self.a[i]).collect(),
            x,
            self.p,
            rows.iter().map(|&i| self.z[i]).collect(),
            self.z_kind,
            self.covariate_names.clone(),
        )
    }

    /// Same units with covariate column `col` removed.
    pub fn without_covariate(&self, col: usize) -> Result<Dataset> {
        if col >= self.p {
            return Err(GateError::Dimension {
                expected: self.p,
                got: col,
            });
        }
        let p = self.p - 1;
        let x = self
            .x
            .chunks(self.p)
            .flat_map(|r| r.iter().enumerate().filter(|(j, _)| *j != col).map(|(_, v)| *v))
            .collect();
        let mut names = self.covariate_names.clone();
        names.remove(col);
        Dataset::with_names(
            self.y.clone(),
            self.a.clone(),
            x,
            p,
            self.z.clone(),
            self.z_kind,
            names,
        )
    }

    /// Same covariates and z with treatment labels swapped.
    pub fn with_flipped_treatment(&self) -> Dataset {
        Dataset {
            a: self.a.iter().map(|&v| 1 - v).collect(),
            ..self.clone()
        }
    }

    /// Same data with replaced outcomes.
    pub fn with_outcomes(&self, y: Vec<f64>) -> Result<Dataset> {
        if y.len() != self.n() {
            return Err(GateError::Dimension {
                expected: self.n(),
                got: y.len(),
            });
        }
        let d = Dataset { y, ..self.clone() };
        d.validate()?;
        Ok(d)
    }
}

fn non_finite(row: usize, column: &str, v: f64) -> GateError {
    GateError::Data {
        row,
        column: column.to_string(),
        reason: format!("non-finite value {v}"),
    }
}

/// Which CSV columns play which role.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnRoles {
    pub outcome: String,
    pub treatment: String,
    pub covariates: Vec<String>,
    /// May name one of the covariate columns.
    pub z: String,
    pub z_kind: ZKind,
}

/// Reads a headed, comma-separated file. Lines starting with `#` are skipped.
pub fn load_dataset(path: impl AsRef<Path>, roles: &ColumnRoles) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())
        .map_err(|e| GateError::Io(format!("{}: {e}", path.as_ref().display())))?;
    read_dataset(file, roles)
}

pub fn read_dataset<R: std::io::Read>(reader: R, roles: &ColumnRoles) -> Result<Dataset> {
    if roles.covariates.is_empty() {
        return Err(GateError::Schema("at least one covariate column is required".into()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| GateError::Schema(format!("missing column {name:?}")))
    };
    let y_col = find(&roles.outcome)?;
    let a_col = find(&roles.treatment)?;
    let x_cols = roles
        .covariates
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;
    let z_col = find(&roles.z)?;

    let p = x_cols.len();
    let (mut y, mut a, mut x, mut z) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let cell = |col: usize| -> Result<f64> { parse_real(&rec, col, row, &headers[col]) };
        y.push(cell(y_col)?);
        let raw = rec.get(a_col).unwrap_or("");
        a.push(match raw.parse::<f64>() {
            Ok(0.0) => 0,
            Ok(1.0) => 1,
            _ if raw.is_empty() => {
                return Err(GateError::Data {
                    row,
                    column: roles.treatment.clone(),
                    reason: "missing value".into(),
                })
            }
            _ => {
                return Err(GateError::Treatment {
                    row,
                    value: raw.to_string(),
                })
            }
        });
        for &c in &x_cols {
            x.push(cell(c)?);
        }
        z.push(cell(z_col)?);
    }
    Dataset::with_names(y, a, x, p, z, roles.z_kind, roles.covariates.clone())
}

fn parse_real(rec: &csv::StringRecord, col: usize, row: usize, name: &str) -> Result<f64> {
    let raw = rec.get(col).unwrap_or("");
    let err = |reason: String| GateError::Data {
        row,
        column: name.to_string(),
        reason,
    };
    if raw.is_empty() {
        return Err(err("missing value".into()));
    }
    let v: f64 = raw
        .parse()
        .map_err(|_| err(format!("cannot parse {raw:?} as a real number")))?;
    if !v.is_finite() {
        return Err(err(format!("non-finite value {raw:?}")));
    }
    Ok(v)
}

/// Column name used for z on export; `z` unless a covariate already uses it.
pub fn export_z_name(d: &Dataset) -> String {
    let mut name = "z".to_string();
    while d.covariate_names.contains(&name) || name == "y" || name == "a" {
        name.push('_');
    }
    name
}

/// Writes `y, a, <covariates>, z` with 17 significant digits.
pub fn write_dataset<W: Write>(d: &Dataset, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["y".to_string(), "a".to_string()];
    header.extend(d.covariate_names.iter().cloned());
    header.push(export_z_name(d));
    wtr.write_record(&header)?;
    for i in 0..d.n() {
        let mut rec = vec![fmt17(d.y[i]), d.a[i].to_string()];
        rec.extend(d.row(i).iter().map(|&v| fmt17(v)));
        rec.push(fmt17(d.z[i]));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn export_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_dataset(d, std::io::BufWriter::new(f))
}

/// Roles matching the layout produced by [`write_dataset`].
pub fn export_roles(d: &Dataset) -> ColumnRoles {
    ColumnRoles {
        outcome: "y".into(),
        treatment: "a".into(),
        covariates: d.covariate_names.clone(),
        z: export_z_name(d),
        z_kind: d.z_kind,
    }
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Points at which a group effect curve is evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationGrid {
    points: Vec<f64>,
}

impl EvaluationGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(GateError::Config("evaluation grid is empty".into()));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(GateError::Config("evaluation grid has non-finite points".into()));
        }
        if points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(GateError::Config(
                "evaluation grid must be strictly increasing".into(),
            ));
        }
        Ok(EvaluationGrid { points })
    }

    /// `start:end:step`, inclusive of `end` within half a step.
    pub fn from_range(start: f64, end: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || !start.is_finite() || !end.is_finite() || end < start {
            return Err(GateError::Config(format!(
                "invalid grid range {start}:{end}:{step}"
            )));
        }
        let count = ((end - start) / step + 0.5).floor() as usize + 1;
        let points = (0..count)
            .map(|k| {
                let v = start + k as f64 * step;
                // snap values like 5.55e-17 to exact zero
                if v.abs() < step * 1e-9 {
                    0.0
                } else {
                    v
                }
            })
            .collect();
        Self::new(points)
    }

    /// -0.4, -0.2, 0, 0.2, 0.4.
    pub fn standard() -> Self {
        EvaluationGrid {
            points: vec![-0.4, -0.2, 0.0, 0.2, 0.4],
        }
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

impl fmt::Display for EvaluationGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.points.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for EvaluationGrid {
    type Err = GateError;

    /// Accepts `start:end:step` or a comma-separated list.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || GateError::Config(format!("cannot parse grid {s:?}"));
        if s.contains(':') {
            let parts: Vec<f64> = s
                .split(':')
                .map(|t| t.trim().parse::<f64>().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            if parts.len() != 3 {
                return Err(bad());
            }
            Self::from_range(parts[0], parts[1], parts[2])
        } else {
            let pts = s
                .split(',')
                .map(|t| t.trim().parse::<f64>().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            Self::new(pts)
        }
    }
}

/// The six estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EstimatorTag {
    Match,
    MatchBc,
    Ipw,
    Or,
    Aipw,
    Psr,
}

impl EstimatorTag {
    pub const ALL: [EstimatorTag; 6] = [
        EstimatorTag::Match,
        EstimatorTag::MatchBc,
        EstimatorTag::Ipw,
        EstimatorTag::Or,
        EstimatorTag::Aipw,
        EstimatorTag::Psr,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorTag::Match => "MATCH",
            EstimatorTag::MatchBc => "MATCH_BC",
            EstimatorTag::Ipw => "IPW",
            EstimatorTag::Or => "OR",
            EstimatorTag::Aipw => "AIPW",
            EstimatorTag::Psr => "PSR",
        }
    }

    /// Column label used in the wide tables (`MATCH.bc`).
    pub fn table_label(&self) -> &'static str {
        match self {
            EstimatorTag::MatchBc => "MATCH.bc",
            other => other.as_str(),
        }
    }

    /// Whether the estimator consumes randomness (cross-fitting).
    pub fn is_randomized(&self) -> bool {
        matches!(self, EstimatorTag::MatchBc)
    }
}

impl fmt::Display for EstimatorTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorTag {
    type Err = GateError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['.', '-'], "_").as_str() {
            "match" => Ok(EstimatorTag::Match),
            "match_bc" | "matchbc" => Ok(EstimatorTag::MatchBc),
            "ipw" => Ok(EstimatorTag::Ipw),
            "or" => Ok(EstimatorTag::Or),
            "aipw" => Ok(EstimatorTag::Aipw),
            "psr" => Ok(EstimatorTag::Psr),
            _ => Err(GateError::Config(format!("unknown estimator {s:?}"))),
        }
    }
}

/// Counters collected while estimating a curve.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Diagnostics {
    /// Propensities moved onto the clipping bounds.
    pub clipped_propensities: usize,
    /// Grid points with zero kernel weight (or no unit in a discrete cell).
    pub empty_windows: usize,
    /// Observations dropped from a two-stage smoother because their first stage was empty.
    pub excluded_observations: usize,
    /// Logistic fits that hit the iteration cap.
    pub non_converged_fits: usize,
}

impl Diagnostics {
    pub fn merge(&mut self, other: &Diagnostics) {
        self.clipped_propensities += other.clipped_propensities;
        self.empty_windows += other.empty_windows;
        self.excluded_observations += other.excluded_observations;
        self.non_converged_fits += other.non_converged_fits;
    }
}

impl fmt::Display for Diagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "clipped_propensities={} empty_windows={} excluded_observations={} non_converged_fits={}",
            self.clipped_propensities,
            self.empty_windows,
            self.excluded_observations,
            self.non_converged_fits
        )
    }
}

/// Confidence bounds attached to a curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveInterval {
    pub lower: Vec<Option<f64>>,
    pub upper: Vec<Option<f64>>,
    /// Points where more than half of the replicates were missing.
    pub unreliable: Vec<bool>,
}

/// Estimated τ(z) over a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GateCurve {
    pub grid: EvaluationGrid,
    pub estimates: Vec<Option<f64>>,
    pub interval: Option<CurveInterval>,
    pub estimator: EstimatorTag,
    /// Final-stage bandwidth; `None` for discrete z.
    pub bandwidth: Option<f64>,
    pub diagnostics: Diagnostics,
}

impl GateCurve {
    pub fn estimate_at(&self, k: usize) -> Option<f64> {
        self.estimates[k]
    }

    /// Writes `z,estimate,ci_lower,ci_upper,estimator,bandwidth`; missing cells are `NA`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["z", "estimate", "ci_lower", "ci_upper", "estimator", "bandwidth"])?;
        for (k, &z) in self.grid.points().iter().enumerate() {
            let (lo, hi) = match &self.interval {
                Some(iv) => (iv.lower[k], iv.upper[k]),
                None => (None, None),
            };
            wtr.write_record([
                z.to_string(),
                fmt_opt(self.estimates[k]),
                fmt_opt(lo),
                fmt_opt(hi),
                self.estimator.to_string(),
                fmt_opt(self.bandwidth),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => v.to_string(),
        None => "NA".to_string(),
    }
}
