//! The six group-effect estimators.
//!
//! Every estimator builds a per-unit pseudo-response and smooths it on `z`:
//!
//! | tag      | pseudo-response                                                      |
//! |----------|----------------------------------------------------------------------|
//! | MATCH    | `ŷ¹ − ŷ⁰` from nearest-neighbour imputation                          |
//! | MATCH_BC | matched imputation plus cross-fitted regression corrections          |
//! | IPW      | `aY/π̂ − (1−a)Y/(1−π̂)`                                                |
//! | OR       | `μ̂₁(X) − μ̂₀(X)`                                                      |
//! | AIPW     | `a(Y−μ̂₁)/π̂ − (1−a)(Y−μ̂₀)/(1−π̂) + μ̂₁ − μ̂₀`                           |
//! | PSR      | arm difference of a 2-D smoother on `(z, π̂)`, evaluated per unit     |
//!
//! Nuisance quantities can be injected through [`NuisanceOverride`]; injected
//! values replace the fitted ones verbatim.

use std::cell::OnceCell;

use crate::data::{Dataset, Diagnostics, EstimatorTag, EvaluationGrid, GateCurve, ZKind};
use crate::error::{GateError, Result};
use crate::kernel::{
    discrete_conditional_mean, local_constant_1d, local_constant_2d, rule_of_thumb,
    select_bandwidth, Bandwidth, BandwidthMethod, KernelKind,
};
use crate::matching::{impute_potential_outcomes, ImputedOutcomes, MatchConfig};
use crate::nuisance::{
    cross_fit_with_fallback, estimate_propensity, fit_outcome_models, DesignSpec,
    OutcomePredictions, PropensityFit, DEFAULT_CLIP_EPS, DEFAULT_K_FOLDS,
};

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    pub estimator: EstimatorTag,
    pub matching: MatchConfig,
    pub propensity_spec: DesignSpec,
    pub outcome_spec: DesignSpec,
    /// Bandwidth for every z dimension.
    pub bandwidth: BandwidthMethod,
    /// Fixed bandwidth for the propensity dimension of PSR; otherwise the
    /// rule of thumb (or the fixed `bandwidth`) is used.
    pub propensity_bandwidth: Option<f64>,
    pub kernel: KernelKind,
    pub k_folds: usize,
    pub clip_eps: f64,
    /// Seeds the cross-fitting partition.
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            estimator: EstimatorTag::Match,
            matching: MatchConfig::default(),
            propensity_spec: DesignSpec::main_effects(),
            outcome_spec: DesignSpec::main_effects(),
            bandwidth: BandwidthMethod::RuleOfThumb,
            propensity_bandwidth: None,
            kernel: KernelKind::Epanechnikov,
            k_folds: DEFAULT_K_FOLDS,
            clip_eps: DEFAULT_CLIP_EPS,
            seed: 0,
        }
    }
}

impl EstimatorConfig {
    pub fn for_estimator(estimator: EstimatorTag) -> Self {
        EstimatorConfig {
            estimator,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.matching.m == 0 {
            return Err(GateError::Config("number of matches must be at least 1".into()));
        }
        if self.k_folds < 2 {
            return Err(GateError::Config(format!("k_folds must be at least 2, got {}", self.k_folds)));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 0.5) {
            return Err(GateError::Config(format!("clip_eps must lie in (0, 0.5), got {}", self.clip_eps)));
        }
        if let BandwidthMethod::Fixed(h) = self.bandwidth {
            Bandwidth::new(h)?;
        }
        if let Some(h) = self.propensity_bandwidth {
            Bandwidth::new(h)?;
        }
        Ok(())
    }
}

/// Caller-supplied nuisance values, one per unit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NuisanceOverride {
    pub propensity: Option<Vec<f64>>,
    pub mu0: Option<Vec<f64>>,
    pub mu1: Option<Vec<f64>>,
}

impl NuisanceOverride {
    /// `μ̂₀ = μ̂₁ ≡ 0`.
    pub fn zero_outcomes(n: usize) -> Self {
        NuisanceOverride {
            propensity: None,
            mu0: Some(vec![0.0; n]),
            mu1: Some(vec![0.0; n]),
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        for v in [&self.propensity, &self.mu0, &self.mu1].into_iter().flatten() {
            if v.len() != n {
                return Err(GateError::Dimension {
                    expected: n,
                    got: v.len(),
                });
            }
        }
        if let Some(p) = &self.propensity {
            if p.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
                return Err(GateError::Config("injected propensities must lie in (0, 1)".into()));
            }
        }
        Ok(())
    }
}

/// Shared stages for estimating several curves on one dataset.
///
/// Matching, the propensity fit and the outcome fits are computed on first
/// use and reused by every estimator evaluated through the same session.
pub struct Session<'a> {
    d: &'a Dataset,
    grid: &'a EvaluationGrid,
    cfg: EstimatorConfig,
    overrides: NuisanceOverride,
    matched: OnceCell<Result<ImputedOutcomes>>,
    propensity: OnceCell<Result<PropensityFit>>,
    outcomes_full: OnceCell<Result<OutcomePredictions>>,
    outcomes_cross: OnceCell<Result<OutcomePredictions>>,
}

impl<'a> Session<'a> {
    pub fn new(d: &'a Dataset, grid: &'a EvaluationGrid, cfg: EstimatorConfig) -> Result<Self> {
        Self::with_overrides(d, grid, cfg, NuisanceOverride::default())
    }

    pub fn with_overrides(
        d: &'a Dataset,
        grid: &'a EvaluationGrid,
        cfg: EstimatorConfig,
        overrides: NuisanceOverride,
    ) -> Result<Self> {
        cfg.validate()?;
        overrides.check(d.n())?;
        Ok(Session {
            d,
            grid,
            cfg,
            overrides,
            matched: OnceCell::new(),
            propensity: OnceCell::new(),
            outcomes_full: OnceCell::new(),
            outcomes_cross: OnceCell::new(),
        })
    }

    pub fn estimate(&self, tag: EstimatorTag) -> Result<GateCurve> {
        match tag {
            EstimatorTag::Match => self.run_match(),
            EstimatorTag::MatchBc => self.run_match_bc(),
            EstimatorTag::Ipw => self.run_ipw(),
            EstimatorTag::Or => self.run_or(),
            EstimatorTag::Aipw => self.run_aipw(),
            EstimatorTag::Psr => self.run_psr(),
        }
    }

    pub fn matched(&self) -> Result<&ImputedOutcomes> {
        self.matched
            .get_or_init(|| impute_potential_outcomes(self.d, &self.cfg.matching))
            .as_ref()
            .map_err(Clone::clone)
    }

    fn propensity(&self) -> Result<(&[f64], Diagnostics)> {
        if let Some(p) = &self.overrides.propensity {
            return Ok((p, Diagnostics::default()));
        }
        let fit = self
            .propensity
            .get_or_init(|| estimate_propensity(self.d, &self.cfg.propensity_spec, self.cfg.clip_eps))
            .as_ref()
            .map_err(Clone::clone)?;
        let diag = Diagnostics {
            clipped_propensities: fit.clip_count,
            non_converged_fits: usize::from(!fit.converged),
            ..Default::default()
        };
        Ok((&fit.pi_hat, diag))
    }

    fn outcomes(&self, cross_fitted: bool) -> Result<(&[f64], &[f64])> {
        let injected = (&self.overrides.mu0, &self.overrides.mu1);
        let fitted = if injected.0.is_some() && injected.1.is_some() {
            None
        } else if cross_fitted {
            Some(
                self.outcomes_cross
                    .get_or_init(|| {
                        cross_fit_with_fallback(self.d, &self.cfg.outcome_spec, self.cfg.k_folds, self.cfg.seed)
                    })
                    .as_ref()
                    .map_err(Clone::clone)?,
            )
        } else {
            Some(
                self.outcomes_full
                    .get_or_init(|| fit_outcome_models(self.d, &self.cfg.outcome_spec))
                    .as_ref()
                    .map_err(Clone::clone)?,
            )
        };
        let mu0 = match (injected.0, fitted) {
            (Some(v), _) => v.as_slice(),
            (None, Some(f)) => f.mu0.as_slice(),
            (None, None) => unreachable!(),
        };
        let mu1 = match (injected.1, fitted) {
            (Some(v), _) => v.as_slice(),
            (None, Some(f)) => f.mu1.as_slice(),
            (None, None) => unreachable!(),
        };
        Ok((mu0, mu1))
    }

    fn final_bandwidth(&self, vs: &[f64]) -> Result<Option<Bandwidth>> {
        match self.d.z_kind() {
            ZKind::Discrete => Ok(None),
            ZKind::Continuous => Ok(Some(select_bandwidth(self.d.z(), vs, self.cfg.bandwidth)?)),
        }
    }

    fn curve(
        &self,
        tag: EstimatorTag,
        zs: &[f64],
        vs: &[f64],
        h: Option<Bandwidth>,
        mut diagnostics: Diagnostics,
    ) -> Result<GateCurve> {
        let estimates = smooth_on_grid(zs, vs, self.grid, h, self.cfg.kernel, &mut diagnostics)?;
        Ok(GateCurve {
            grid: self.grid.clone(),
            estimates,
            interval: None,
            estimator: tag,
            bandwidth: h.map(Bandwidth::get),
            diagnostics,
        })
    }

    fn run_match(&self) -> Result<GateCurve> {
        let effects = self.matched()?.effects();
        let h = self.final_bandwidth(&effects)?;
        self.curve(EstimatorTag::Match, self.d.z(), &effects, h, Diagnostics::default())
    }

    fn run_match_bc(&self) -> Result<GateCurve> {
        let io = self.matched()?;
        let (mu0, mu1) = self.outcomes(true)?;
        let m = io.m as f64;
        let effects: Vec<f64> = (0..self.d.n())
            .map(|i| {
                let set = &io.match_sets[i];
                if self.d.a()[i] == 1 {
                    let corr = mu0[i] - set.iter().map(|&j| mu0[j]).sum::<f64>() / m;
                    io.y1_hat[i] - (io.y0_hat[i] + corr)
                } else {
                    let corr = mu1[i] - set.iter().map(|&j| mu1[j]).sum::<f64>() / m;
                    (io.y1_hat[i] + corr) - io.y0_hat[i]
                }
            })
            .collect();
        // bandwidth is the one MATCH would use on the same matches
        let h = self.final_bandwidth(&io.effects())?;
        self.curve(EstimatorTag::MatchBc, self.d.z(), &effects, h, Diagnostics::default())
    }

    fn run_ipw(&self) -> Result<GateCurve> {
        let (pi, diag) = self.propensity()?;
        let vs: Vec<f64> = (0..self.d.n())
            .map(|i| {
                let y = self.d.y()[i];
                if self.d.a()[i] == 1 {
                    y / pi[i]
                } else {
                    -y / (1.0 - pi[i])
                }
            })
            .collect();
        let h = self.final_bandwidth(&vs)?;
        self.curve(EstimatorTag::Ipw, self.d.z(), &vs, h, diag)
    }

    fn run_or(&self) -> Result<GateCurve> {
        let (mu0, mu1) = self.outcomes(false)?;
        let vs: Vec<f64> = mu1.iter().zip(mu0).map(|(a, b)| a - b).collect();
        let h = self.final_bandwidth(&vs)?;
        self.curve(EstimatorTag::Or, self.d.z(), &vs, h, Diagnostics::default())
    }

    fn run_aipw(&self) -> Result<GateCurve> {
        let (pi, diag) = self.propensity()?;
        let (mu0, mu1) = self.outcomes(false)?;
        let vs: Vec<f64> = (0..self.d.n())
            .map(|i| {
                let y = self.d.y()[i];
                let weighted = if self.d.a()[i] == 1 {
                    (y - mu1[i]) / pi[i]
                } else {
                    -(y - mu0[i]) / (1.0 - pi[i])
                };
                weighted + (mu1[i] - mu0[i])
            })
            .collect();
        let h = self.final_bandwidth(&vs)?;
        self.curve(EstimatorTag::Aipw, self.d.z(), &vs, h, diag)
    }

    fn run_psr(&self) -> Result<GateCurve> {
        let (pi, mut diag) = self.propensity()?;
        let d = self.d;
        let arm = |a: u8| -> ArmData {
            let idx = d.arm_indices(a);
            ArmData {
                z: idx.iter().map(|&i| d.z()[i]).collect(),
                p: idx.iter().map(|&i| pi[i]).collect(),
                y: idx.iter().map(|&i| d.y()[i]).collect(),
            }
        };
        let arms = [arm(0), arm(1)];
        for (a, data) in arms.iter().enumerate() {
            if data.y.len() < 2 {
                return Err(GateError::TooSmall(format!("PSR needs at least 2 units in arm {a}")));
            }
        }
        let bw = [self.psr_bandwidths(&arms[0])?, self.psr_bandwidths(&arms[1])?];

        let mut zs = Vec::with_capacity(d.n());
        let mut vs = Vec::with_capacity(d.n());
        for i in 0..d.n() {
            let at = (d.z()[i], pi[i]);
            let fitted = [
                self.psr_arm_mean(&arms[0], at, bw[0])?,
                self.psr_arm_mean(&arms[1], at, bw[1])?,
            ];
            match fitted {
                [Some(m0), Some(m1)] => {
                    zs.push(at.0);
                    vs.push(m1 - m0);
                }
                _ => diag.excluded_observations += 1,
            }
        }
        if zs.is_empty() {
            return Err(GateError::TooSmall("PSR first stage was empty at every observation".into()));
        }
        let h = match d.z_kind() {
            ZKind::Discrete => None,
            ZKind::Continuous => Some(select_bandwidth(&zs, &vs, self.cfg.bandwidth)?),
        };
        self.curve(EstimatorTag::Psr, &zs, &vs, h, diag)
    }

    /// (z bandwidth, propensity bandwidth) for one arm.
    fn psr_bandwidths(&self, arm: &ArmData) -> Result<(Bandwidth, Bandwidth)> {
        let hz = match (self.d.z_kind(), self.cfg.bandwidth) {
            (ZKind::Discrete, _) => Bandwidth::new(1.0)?,
            (_, BandwidthMethod::Fixed(h)) => Bandwidth::new(h)?,
            (_, BandwidthMethod::RuleOfThumb) => rule_of_thumb(&arm.z)?,
        };
        let hp = match (self.cfg.propensity_bandwidth, self.cfg.bandwidth) {
            (Some(h), _) => Bandwidth::new(h)?,
            (None, BandwidthMethod::Fixed(h)) => Bandwidth::new(h)?,
            (None, BandwidthMethod::RuleOfThumb) => match rule_of_thumb(&arm.p) {
                Ok(h) => h,
                // constant propensity: its kernel factor is the same for every
                // unit of the arm and cancels, so any width will do
                Err(GateError::Bandwidth(_)) => Bandwidth::new(1.0)?,
                Err(e) => return Err(e),
            },
        };
        Ok((hz, hp))
    }

    fn psr_arm_mean(&self, arm: &ArmData, at: (f64, f64), bw: (Bandwidth, Bandwidth)) -> Result<Option<f64>> {
        match self.d.z_kind() {
            ZKind::Continuous => local_constant_2d(&arm.z, &arm.p, &arm.y, at, bw.0, bw.1, self.cfg.kernel),
            ZKind::Discrete => {
                let (ps, ys): (Vec<f64>, Vec<f64>) = arm
                    .z
                    .iter()
                    .zip(arm.p.iter().zip(&arm.y))
                    .filter(|(&z, _)| z == at.0)
                    .map(|(_, (&p, &y))| (p, y))
                    .unzip();
                if ps.is_empty() {
                    return Ok(None);
                }
                local_constant_1d(&ps, &ys, at.1, bw.1, self.cfg.kernel)
            }
        }
    }
}

struct ArmData {
    z: Vec<f64>,
    p: Vec<f64>,
    y: Vec<f64>,
}

/// Kernel (or exact-cell) means of `vs` at each grid point.
fn smooth_on_grid(
    zs: &[f64],
    vs: &[f64],
    grid: &EvaluationGrid,
    h: Option<Bandwidth>,
    kernel: KernelKind,
    diag: &mut Diagnostics,
) -> Result<Vec<Option<f64>>> {
    grid.points()
        .iter()
        .map(|&z0| {
            let v = match h {
                Some(h) => local_constant_1d(zs, vs, z0, h, kernel)?,
                None => match discrete_conditional_mean(zs, vs, z0) {
                    Ok(v) => Some(v),
                    Err(GateError::EmptyCell { .. }) => None,
                    Err(e) => return Err(e),
                },
            };
            if v.is_none() {
                diag.empty_windows += 1;
            }
            Ok(v)
        })
        .collect()
}

/// Runs `cfg.estimator` on `d`.
pub fn estimate(d: &Dataset, grid: &EvaluationGrid, cfg: &EstimatorConfig) -> Result<GateCurve> {
    estimate_with(d, grid, cfg, &NuisanceOverride::default())
}

pub fn estimate_with(
    d: &Dataset,
    grid: &EvaluationGrid,
    cfg: &EstimatorConfig,
    overrides: &NuisanceOverride,
) -> Result<GateCurve> {
    Session::with_overrides(d, grid, cfg.clone(), overrides.clone())?.estimate(cfg.estimator)
}

fn tagged(cfg: &EstimatorConfig, tag: EstimatorTag) -> EstimatorConfig {
    EstimatorConfig {
        estimator: tag,
        ..cfg.clone()
    }
}

pub fn estimate_match(d: &Dataset, grid: &EvaluationGrid, cfg: &EstimatorConfig) -> Result<GateCurve> {
    estimate(d, grid, &tagged(cfg, EstimatorTag::Match))
}

pub fn estimate_match_bc(d: &Dataset, grid: &EvaluationGrid, cfg: &EstimatorConfig) -> Result<GateCurve> {
    estimate(d, grid, &tagged(cfg, EstimatorTag::MatchBc))
}

pub fn estimate_ipw(d: &Dataset, grid: &EvaluationGrid, cfg: &EstimatorConfig) -> Result<GateCurve> {
    estimate(d, grid, &tagged(cfg, EstimatorTag::Ipw))
}

pub fn estimate_or(d: &Dataset, grid: &EvaluationGrid, cfg: &EstimatorConfig) -> Result<GateCurve> {
    estimate(d, grid, &tagged(cfg, EstimatorTag::Or))
}

pub fn estimate_aipw(d: &Dataset, grid: &EvaluationGrid, cfg: &EstimatorConfig) -> Result<GateCurve> {
    estimate(d, grid, &tagged(cfg, EstimatorTag::Aipw))
}

pub fn estimate_psr(d: &Dataset, grid: &EvaluationGrid, cfg: &EstimatorConfig) -> Result<GateCurve> {
    estimate(d, grid, &tagged(cfg, EstimatorTag::Psr))
}
