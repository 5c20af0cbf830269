//! Kernels, local-constant (Nadaraya–Watson) regression and bandwidth rules.

use std::fmt;
use std::str::FromStr;

use crate::error::{GateError, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelKind {
    #[default]
    Epanechnikov,
    Gaussian,
}

impl KernelKind {
    #[inline]
    pub fn eval(self, t: f64) -> f64 {
        match self {
            KernelKind::Epanechnikov => {
                if t.abs() <= 1.0 {
                    0.75 * (1.0 - t * t)
                } else {
                    0.0
                }
            }
            KernelKind::Gaussian => (-0.5 * t * t).exp() * INV_SQRT_2PI,
        }
    }
}

/// K(t) for the given kernel.
pub fn kernel_eval(kind: KernelKind, t: f64) -> f64 {
    kind.eval(t)
}

impl FromStr for KernelKind {
    type Err = GateError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "epanechnikov" | "epa" => Ok(KernelKind::Epanechnikov),
            "gaussian" | "normal" => Ok(KernelKind::Gaussian),
            _ => Err(GateError::Config(format!("unknown kernel {s:?}"))),
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelKind::Epanechnikov => "epanechnikov",
            KernelKind::Gaussian => "gaussian",
        })
    }
}

/// A positive, finite smoothing bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Bandwidth(f64);

impl Bandwidth {
    pub fn new(h: f64) -> Result<Self> {
        if h > 0.0 && h.is_finite() {
            Ok(Bandwidth(h))
        } else {
            Err(GateError::Bandwidth(format!("bandwidth must be positive and finite, got {h}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum BandwidthMethod {
    #[default]
    RuleOfThumb,
    Fixed(f64),
}

impl FromStr for BandwidthMethod {
    type Err = GateError;

    /// `rot`/`rule-of-thumb`, or a positive number for a fixed bandwidth.
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rot" | "rule-of-thumb" | "rule_of_thumb" => Ok(BandwidthMethod::RuleOfThumb),
            other => {
                let h: f64 = other
                    .parse()
                    .map_err(|_| GateError::Config(format!("unknown bandwidth method {s:?}")))?;
                Bandwidth::new(h)?;
                Ok(BandwidthMethod::Fixed(h))
            }
        }
    }
}

impl fmt::Display for BandwidthMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BandwidthMethod::RuleOfThumb => f.write_str("rot"),
            BandwidthMethod::Fixed(h) => write!(f, "{h}"),
        }
    }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(GateError::Dimension {
            expected: a,
            got: b,
        });
    }
    Ok(())
}

/// Kernel-weighted mean of `vs` at `z0`; `None` when every weight is zero.
pub fn local_constant_1d(
    zs: &[f64],
    vs: &[f64],
    z0: f64,
    h: Bandwidth,
    kind: KernelKind,
) -> Result<Option<f64>> {
    check_len(zs.len(), vs.len())?;
    if zs.is_empty() {
        return Err(GateError::TooSmall("no observations to smooth".into()));
    }
    let inv_h = 1.0 / h.get();
    let (mut num, mut den) = (0.0, 0.0);
    for (&z, &v) in zs.iter().zip(vs) {
        let w = kind.eval((z - z0) * inv_h);
        if w != 0.0 {
            num += w * v;
            den += w;
        }
    }
    Ok(if den > 0.0 { Some(num / den) } else { None })
}

/// Product-kernel weighted mean of `vs` at `at = (e1, e2)`.
pub fn local_constant_2d(
    r1: &[f64],
    r2: &[f64],
    vs: &[f64],
    at: (f64, f64),
    h1: Bandwidth,
    h2: Bandwidth,
    kind: KernelKind,
) -> Result<Option<f64>> {
    check_len(r1.len(), r2.len())?;
    check_len(r1.len(), vs.len())?;
    if r1.is_empty() {
        return Err(GateError::TooSmall("no observations to smooth".into()));
    }
    let (inv1, inv2) = (1.0 / h1.get(), 1.0 / h2.get());
    let (mut num, mut den) = (0.0, 0.0);
    for ((&a, &b), &v) in r1.iter().zip(r2).zip(vs) {
        let w1 = kind.eval((a - at.0) * inv1);
        if w1 == 0.0 {
            continue;
        }
        let w = w1 * kind.eval((b - at.1) * inv2);
        if w != 0.0 {
            num += w * v;
            den += w;
        }
    }
    Ok(if den > 0.0 { Some(num / den) } else { None })
}

/// Mean of `vs` over units with `zs[i] == z0` exactly.
pub fn discrete_conditional_mean(zs: &[f64], vs: &[f64], z0: f64) -> Result<f64> {
    check_len(zs.len(), vs.len())?;
    let (sum, count) = zs
        .iter()
        .zip(vs)
        .filter(|(&z, _)| z == z0)
        .fold((0.0, 0usize), |(s, c), (_, &v)| (s + v, c + 1));
    if count == 0 {
        return Err(GateError::EmptyCell { z: z0 });
    }
    Ok(sum / count as f64)
}

/// Type-7 (linear interpolation) sample quantile of already sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub(crate) fn sample_sd(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Picks a bandwidth for smoothing `vs` on `zs`.
///
/// The rule of thumb is `1.06 · min(sd, IQR/1.349) · n^(-1/5)` and only looks
/// at `zs`. When the IQR is zero but the spread is not, the sd alone is used.
pub fn select_bandwidth(zs: &[f64], vs: &[f64], method: BandwidthMethod) -> Result<Bandwidth> {
    check_len(zs.len(), vs.len())?;
    match method {
        BandwidthMethod::Fixed(h) => Bandwidth::new(h),
        BandwidthMethod::RuleOfThumb => rule_of_thumb(zs),
    }
}

pub fn rule_of_thumb(zs: &[f64]) -> Result<Bandwidth> {
    let n = zs.len();
    if n < 2 {
        return Err(GateError::Bandwidth(format!("need at least 2 points, got {n}")));
    }
    let sd = sample_sd(zs);
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(GateError::Bandwidth("regressor has zero spread".into()));
    }
    let mut sorted = zs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let scale = if iqr > 0.0 { sd.min(iqr / 1.349) } else { sd };
    Bandwidth::new(1.06 * scale * (n as f64).powf(-0.2))
}
