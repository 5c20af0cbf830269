mod settings;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gatematch::data::write_dataset;
use gatematch::inference::subsample_ci;
use gatematch::kernel::BandwidthMethod;
use gatematch::simulation::{compare_metrics, write_mse_table, write_ranking, write_tidy, write_wide, read_tidy, TidyRow};
use gatematch::{
    estimate, generate_case, load_dataset, run_monte_carlo, CaseSpec, ColumnRoles, DesignSpec, EstimatorConfig,
    EstimatorTag, EvaluationGrid, GateError, KernelKind, MatchConfig, Metric, MonteCarloConfig, SubsampleConfig, ZKind,
};

use settings::Settings;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(GateError),
}

impl From<GateError> for CliError {
    fn from(e: GateError) -> Self {
        if e.is_usage_error() {
            CliError::Usage(e.to_string())
        } else {
            CliError::Lib(e)
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Lib(e) if e.is_data_error() => 1,
            CliError::Lib(_) => 3,
        }
    }

    fn category(&self) -> &'static str {
        match self.exit_code() {
            1 => "data",
            2 => "usage",
            _ => "numeric",
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::Lib(e) => e.to_string(),
        }
    }
}

#[derive(Parser)]
#[command(name = "gatematch", version, about = "Group average treatment effects by matching and competing estimators")]
struct Cli {
    /// Worker threads (output does not depend on it).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate a GATE curve on a dataset.
    Estimate(EstimateArgs),
    /// Estimate a curve with a subsampling confidence band.
    Ci(CiArgs),
    /// Run the Monte Carlo study for one or all cases.
    Simulate(SimulateArgs),
    /// Rebuild the wide, MSE and ranking tables from a tidy report.
    Report(ReportArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Input CSV.
    #[arg(long, value_name = "PATH")]
    data: Option<String>,
    /// Outcome column [default: y].
    #[arg(long, value_name = "NAME")]
    y_col: Option<String>,
    /// Treatment column, coded 0/1 [default: a].
    #[arg(long, value_name = "NAME")]
    a_col: Option<String>,
    /// Comma-separated covariate columns [default: every column whose name starts with x].
    #[arg(long, value_name = "LIST")]
    x_cols: Option<String>,
    /// Subgroup column [default: z].
    #[arg(long, value_name = "NAME")]
    z_col: Option<String>,
    /// continuous or discrete [default: continuous].
    #[arg(long, value_name = "KIND")]
    z_kind: Option<String>,
}

impl DataArgs {
    fn pairs(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("data", self.data.clone()),
            ("y-col", self.y_col.clone()),
            ("a-col", self.a_col.clone()),
            ("x-cols", self.x_cols.clone()),
            ("z-col", self.z_col.clone()),
            ("z-kind", self.z_kind.clone()),
        ]
    }
}

#[derive(Args)]
struct ModelArgs {
    /// Evaluation grid, start:end:step or a comma list [default: -0.4:0.4:0.2].
    #[arg(long, value_name = "GRID", allow_hyphen_values = true)]
    grid: Option<String>,
    /// Matches per unit [default: 5].
    #[arg(long, value_name = "M")]
    m: Option<String>,
    /// euclidean, manhattan or canberra [default: euclidean].
    #[arg(long, value_name = "METRIC")]
    metric: Option<String>,
    /// Scale covariates to unit standard deviation before matching.
    #[arg(long)]
    standardize: bool,
    /// epanechnikov or gaussian [default: epanechnikov].
    #[arg(long, value_name = "KERNEL")]
    kernel: Option<String>,
    /// rot (rule of thumb) or a fixed positive bandwidth [default: rot].
    #[arg(long, value_name = "H")]
    bandwidth: Option<String>,
    /// Fixed bandwidth on the propensity axis for PSR [default: rule of thumb].
    #[arg(long, value_name = "H")]
    propensity_bandwidth: Option<String>,
    /// Cross-fitting folds for MATCH.bc [default: 5].
    #[arg(long, value_name = "K")]
    k_folds: Option<String>,
    /// Propensity clipping level [default: 1e-12].
    #[arg(long, value_name = "EPS")]
    clip_eps: Option<String>,
    /// Master seed.
    #[arg(long, value_name = "SEED")]
    seed: Option<String>,
    /// Options file (key=value lines, or an earlier output file).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
}

impl ModelArgs {
    fn pairs(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("grid", self.grid.clone()),
            ("m", self.m.clone()),
            ("metric", self.metric.clone()),
            ("standardize", self.standardize.then(|| "true".into())),
            ("kernel", self.kernel.clone()),
            ("bandwidth", self.bandwidth.clone()),
            ("propensity-bandwidth", self.propensity_bandwidth.clone()),
            ("k-folds", self.k_folds.clone()),
            ("clip-eps", self.clip_eps.clone()),
            ("seed", self.seed.clone()),
        ]
    }
}

#[derive(Args)]
struct FitArgs {
    /// Estimator: match, match_bc, ipw, or, aipw, psr [default: match].
    #[arg(long, value_name = "NAME")]
    estimator: Option<String>,
    /// Propensity model terms, e.g. "x1, x2^2, x1*x3" [default: main].
    #[arg(long, value_name = "TERMS", allow_hyphen_values = true)]
    propensity_terms: Option<String>,
    /// Outcome model terms [default: main].
    #[arg(long, value_name = "TERMS", allow_hyphen_values = true)]
    outcome_terms: Option<String>,
}

impl FitArgs {
    fn pairs(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("estimator", self.estimator.clone()),
            ("propensity-terms", self.propensity_terms.clone()),
            ("outcome-terms", self.outcome_terms.clone()),
        ]
    }
}

#[derive(Args)]
struct SubsampleArgs {
    /// Subsample size exponent [default: 2/3].
    #[arg(long, value_name = "R")]
    r: Option<String>,
    /// Confidence level [default: 0.95].
    #[arg(long, value_name = "LEVEL")]
    level: Option<String>,
    /// Shrink subsample deviations by sqrt(n_b/n) around the full-sample estimate.
    #[arg(long)]
    rescale: bool,
}

impl SubsampleArgs {
    fn pairs(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("r", self.r.clone()),
            ("level", self.level.clone()),
            ("rescale", self.rescale.then(|| "true".into())),
        ]
    }
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    fit: FitArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Output CSV [default: stdout].
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CiArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    fit: FitArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    sub: SubsampleArgs,
    /// Number of subsamples [default: 200].
    #[arg(long, value_name = "B")]
    reps: Option<String>,
    /// Output CSV [default: stdout].
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Case id C1..C12 (optionally with -noX2), a comma list, or all.
    #[arg(long, value_name = "CASE")]
    case: Option<String>,
    /// Sample size [default: 2000].
    #[arg(long, value_name = "N")]
    n: Option<String>,
    /// Monte Carlo replicates [default: 300].
    #[arg(long, value_name = "R")]
    reps: Option<String>,
    /// Comma-separated estimators [default: all six].
    #[arg(long, value_name = "LIST")]
    estimators: Option<String>,
    /// Hide covariate x2 from every estimator.
    #[arg(long)]
    drop_x2: bool,
    /// Also compute subsampling intervals and coverage.
    #[arg(long)]
    with_ci: bool,
    /// Subsamples per replicate when --with-ci is set [default: 200].
    #[arg(long, value_name = "B")]
    sub_reps: Option<String>,
    #[command(flatten)]
    sub: SubsampleArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Also write the first replicate's dataset of each case.
    #[arg(long)]
    export_data: bool,
    /// Output directory [default: current directory].
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Tidy report written by simulate.
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
    /// Output directory [default: current directory].
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

const ESTIMATE_KEYS: &[&str] = &[
    "data", "y-col", "a-col", "x-cols", "z-col", "z-kind", "estimator", "propensity-terms", "outcome-terms", "grid",
    "m", "metric", "standardize", "kernel", "bandwidth", "propensity-bandwidth", "k-folds", "clip-eps", "seed",
];
const CI_KEYS: &[&str] = &[
    "data", "y-col", "a-col", "x-cols", "z-col", "z-kind", "estimator", "propensity-terms", "outcome-terms", "grid",
    "m", "metric", "standardize", "kernel", "bandwidth", "propensity-bandwidth", "k-folds", "clip-eps", "seed", "r",
    "level", "rescale", "reps",
];
const SIMULATE_KEYS: &[&str] = &[
    "case", "n", "reps", "estimators", "drop-x2", "with-ci", "sub-reps", "r", "level", "rescale", "grid", "m",
    "metric", "standardize", "kernel", "bandwidth", "propensity-bandwidth", "k-folds", "clip-eps", "seed",
];

/// First header row of a CSV file, skipping `#` lines.
fn csv_columns(path: &Path) -> Result<Vec<String>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Lib(GateError::Io(format!("{}: {e}", path.display()))))?;
    let line = text
        .lines()
        .find(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .ok_or_else(|| CliError::Lib(GateError::Schema("empty input file".into())))?;
    Ok(line.split(',').map(|c| c.trim().trim_matches('"').to_string()).collect())
}

fn resolve_data(s: &mut Settings) -> Result<gatematch::Dataset, CliError> {
    let path: String = s.required("data")?;
    let outcome: String = s.get("y-col", "y".to_string())?;
    let treatment: String = s.get("a-col", "a".to_string())?;
    let covariates: Vec<String> = match s.raw("x-cols").map(str::to_string) {
        Some(list) => list.split(',').map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect(),
        None => csv_columns(Path::new(&path))?
            .into_iter()
            .filter(|c| c.starts_with('x'))
            .collect(),
    };
    s.get("x-cols", covariates.join(","))?;
    let z: String = s.get("z-col", "z".to_string())?;
    let z_kind: ZKind = s.get("z-kind", ZKind::Continuous)?;
    let roles = ColumnRoles {
        outcome,
        treatment,
        covariates,
        z,
        z_kind,
    };
    Ok(load_dataset(&path, &roles)?)
}

fn resolve_model(s: &mut Settings, estimator: EstimatorTag, with_fits: bool) -> Result<(EstimatorConfig, EvaluationGrid), CliError> {
    let grid: EvaluationGrid = s.get("grid", EvaluationGrid::standard())?;
    let defaults = EstimatorConfig::default();
    let (propensity_spec, outcome_spec) = if with_fits {
        (
            s.get::<DesignSpec>("propensity-terms", DesignSpec::main_effects())?,
            s.get::<DesignSpec>("outcome-terms", DesignSpec::main_effects())?,
        )
    } else {
        (DesignSpec::main_effects(), DesignSpec::main_effects())
    };
    let matching = MatchConfig {
        m: s.get("m", defaults.matching.m)?,
        metric: s.get::<Metric>("metric", defaults.matching.metric)?,
        standardize: s.flag("standardize")?,
    };
    let cfg = EstimatorConfig {
        estimator,
        matching,
        propensity_spec,
        outcome_spec,
        kernel: s.get::<KernelKind>("kernel", defaults.kernel)?,
        bandwidth: s.get::<BandwidthMethod>("bandwidth", defaults.bandwidth)?,
        propensity_bandwidth: s.optional("propensity-bandwidth")?,
        k_folds: s.get("k-folds", defaults.k_folds)?,
        clip_eps: s.get("clip-eps", defaults.clip_eps)?,
        seed: 0,
    };
    Ok((cfg, grid))
}

fn resolve_subsample(s: &mut Settings, reps_key: &str) -> Result<SubsampleConfig, CliError> {
    let d = SubsampleConfig::default();
    let sub = SubsampleConfig {
        r: s.get("r", d.r)?,
        level: s.get("level", d.level)?,
        rescale: s.flag("rescale")?,
        b_reps: s.get(reps_key, d.b_reps)?,
        seed: 0,
    };
    sub.validate()?;
    Ok(sub)
}

fn write_output(out: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match out {
        Some(p) => std::fs::write(p, bytes)?,
        None => {
            use std::io::Write;
            std::io::stdout().write_all(bytes)?;
        }
    }
    Ok(())
}

fn run_curve(
    command: &'static str,
    keys: &'static [&'static str],
    data: &DataArgs,
    fit: &FitArgs,
    model: &ModelArgs,
    sub: Option<(&SubsampleArgs, Option<String>)>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let mut flags = data.pairs();
    flags.extend(fit.pairs());
    flags.extend(model.pairs());
    if let Some((sa, reps)) = &sub {
        flags.extend(sa.pairs());
        flags.push(("reps", reps.clone()));
    }
    let mut s = Settings::new(command, keys, model.config.as_deref(), flags)?;
    let d = resolve_data(&mut s)?;
    let tag: EstimatorTag = s.get("estimator", EstimatorTag::Match)?;
    let (mut cfg, grid) = resolve_model(&mut s, tag, true)?;
    let needs_seed = sub.is_some() || tag.is_randomized();
    let seed: Option<u64> = s.optional("seed")?;
    cfg.seed = match (seed, needs_seed) {
        (Some(v), _) => v,
        (None, false) => 0,
        (None, true) => return Err(CliError::Usage(format!("--seed is required for {command} with {tag}"))),
    };
    cfg.validate()?;

    let mut curve = estimate(&d, &grid, &cfg)?;
    let mut notes = String::new();
    if sub.is_some() {
        let mut sc = resolve_subsample(&mut s, "reps")?;
        sc.seed = cfg.seed;
        let res = subsample_ci(&d, &cfg, &grid, &sc)?;
        let _ = writeln!(
            notes,
            "## subsample sizes: controls={} treated={} failed_replicates={}",
            res.sizes.0, res.sizes.1, res.failed_replicates
        );
        let flagged: Vec<String> = grid
            .points()
            .iter()
            .zip(&res.interval.unreliable)
            .filter(|(_, &u)| u)
            .map(|(z, _)| z.to_string())
            .collect();
        if !flagged.is_empty() {
            let _ = writeln!(notes, "## unreliable interval at z={}", flagged.join(","));
        }
        curve.interval = Some(res.interval);
    }

    let mut buf = s.header().into_bytes();
    let _ = writeln!(notes, "## diagnostics: {}", curve.diagnostics);
    if curve.diagnostics.empty_windows > 0 {
        let _ = writeln!(notes, "## warning: EmptyWindow at {} grid point(s)", curve.diagnostics.empty_windows);
    }
    buf.extend_from_slice(notes.as_bytes());
    curve.write_csv(&mut buf)?;
    write_output(out, &buf)
}

fn parse_cases(spec: &str, drop_x2: bool) -> Result<Vec<CaseSpec>, CliError> {
    let cases = if spec.trim().eq_ignore_ascii_case("all") {
        CaseSpec::all()
    } else {
        spec.split(',').map(|c| c.parse::<CaseSpec>()).collect::<Result<Vec<_>, _>>()?
    };
    Ok(cases
        .into_iter()
        .map(|c| if drop_x2 { c.without_x2() } else { c })
        .collect())
}

fn parse_estimators(list: &str) -> Result<Vec<EstimatorTag>, CliError> {
    let mut tags = Vec::new();
    for t in list.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let tag: EstimatorTag = t.parse()?;
        if !tags.contains(&tag) {
            tags.push(tag);
        }
    }
    if tags.is_empty() {
        return Err(CliError::Usage("no estimators selected".into()));
    }
    Ok(tags)
}

fn write_table(dir: &Path, name: &str, header: &str, body: Vec<u8>) -> Result<(), CliError> {
    let mut buf = header.as_bytes().to_vec();
    buf.extend(body);
    std::fs::write(dir.join(name), buf)?;
    Ok(())
}

fn write_tables(dir: &Path, header: &str, rows: &[TidyRow]) -> Result<(), CliError> {
    let mut wide = Vec::new();
    write_wide(rows, &mut wide)?;
    write_table(dir, "wide.csv", header, wide)?;
    let mut mse = Vec::new();
    write_mse_table(rows, &mut mse)?;
    write_table(dir, "mse.csv", header, mse)?;
    let mut ranking = Vec::new();
    write_ranking(&compare_metrics(rows), &mut ranking)?;
    write_table(dir, "ranking.csv", header, ranking)
}

fn run_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let mut flags = vec![
        ("case", args.case.clone()),
        ("n", args.n.clone()),
        ("reps", args.reps.clone()),
        ("estimators", args.estimators.clone()),
        ("drop-x2", args.drop_x2.then(|| "true".into())),
        ("with-ci", args.with_ci.then(|| "true".into())),
        ("sub-reps", args.sub_reps.clone()),
    ];
    flags.extend(args.sub.pairs());
    flags.extend(args.model.pairs());
    let mut s = Settings::new("simulate", SIMULATE_KEYS, args.model.config.as_deref(), flags)?;
    let case_spec: String = s.required("case")?;
    let drop_x2 = s.flag("drop-x2")?;
    let cases = parse_cases(&case_spec, drop_x2)?;
    let n: usize = s.get("n", 2000)?;
    let reps: usize = s.get("reps", 300)?;
    let default_list: Vec<&str> = EstimatorTag::ALL.iter().map(|t| t.as_str()).collect();
    let list: String = s.get("estimators", default_list.join(","))?;
    let estimators = parse_estimators(&list)?;
    let (base, grid) = resolve_model(&mut s, EstimatorTag::Match, false)?;
    let seed: u64 = s.required("seed")?;
    let with_ci = s.flag("with-ci")?;
    let ci = if with_ci {
        Some(resolve_subsample(&mut s, "sub-reps")?)
    } else {
        None
    };
    base.validate()?;

    let dir = args.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    let header = s.header();
    let mut rows = Vec::new();
    let mut notes = String::new();
    for case in &cases {
        let mc = MonteCarloConfig {
            n,
            reps,
            estimators: estimators.clone(),
            grid: grid.clone(),
            master_seed: seed,
            base: base.clone(),
            ci,
        };
        let report = run_monte_carlo(case, &mc)?;
        let failures: Vec<String> = report
            .estimators
            .iter()
            .zip(&report.failures)
            .map(|(t, f)| format!("{t}={f}"))
            .collect();
        let _ = writeln!(notes, "## {} failed replicates: {}", report.case, failures.join(" "));
        rows.extend(report.tidy_rows());
        if args.export_data {
            let sim = generate_case(case, n, gatematch::seed::derive_seed(seed, &[0, 0]))?;
            let mut buf = Vec::new();
            write_dataset(&sim.dataset, &mut buf)?;
            std::fs::write(dir.join(format!("data_{}.csv", case.label())), buf)?;
        }
    }
    let mut tidy = Vec::new();
    write_tidy(&rows, &mut tidy)?;
    write_table(&dir, "tidy.csv", &format!("{header}{notes}"), tidy)?;
    write_tables(&dir, &header, &rows)
}

fn run_report(args: &ReportArgs) -> Result<(), CliError> {
    let f = std::fs::File::open(&args.input)
        .map_err(|e| CliError::Lib(GateError::Io(format!("{}: {e}", args.input.display()))))?;
    let rows = read_tidy(std::io::BufReader::new(f))?;
    let dir = args.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    let header = format!("# gatematch report\n# input={}\n", args.input.display());
    write_tables(&dir, &header, &rows)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure threads: {e}")))?;
    }
    match &cli.command {
        Command::Estimate(a) => run_curve("estimate", ESTIMATE_KEYS, &a.data, &a.fit, &a.model, None, a.out.as_deref()),
        Command::Ci(a) => run_curve(
            "ci",
            CI_KEYS,
            &a.data,
            &a.fit,
            &a.model,
            Some((&a.sub, a.reps.clone())),
            a.out.as_deref(),
        ),
        Command::Simulate(a) => run_simulate(a),
        Command::Report(a) => run_report(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error\t{}\t{}", e.category(), e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
