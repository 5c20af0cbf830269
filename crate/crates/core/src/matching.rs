//! Nearest-neighbour matching with replacement across treatment arms.
//!
//! Each unit is matched to the `m` closest units of the opposite arm. Ties in
//! distance go to the lower unit index, so match sets are fully determined by
//! the data. The search is an exact linear scan per unit.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{GateError, Result};
use crate::kernel::sample_sd;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    #[default]
    Euclidean,
    Manhattan,
    Canberra,
}

impl FromStr for Metric {
    type Err = GateError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euclidean" | "l2" => Ok(Metric::Euclidean),
            "manhattan" | "l1" => Ok(Metric::Manhattan),
            "canberra" => Ok(Metric::Canberra),
            _ => Err(GateError::Config(format!("unknown metric {s:?}"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Euclidean => "euclidean",
            Metric::Manhattan => "manhattan",
            Metric::Canberra => "canberra",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig {
    /// Matches per unit.
    pub m: usize,
    pub metric: Metric,
    /// Scale covariates to unit sample standard deviation before matching.
    pub standardize: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            m: 5,
            metric: Metric::Euclidean,
            standardize: false,
        }
    }
}

impl MatchConfig {
    pub fn validate_for(&self, d: &Dataset) -> Result<()> {
        if self.m == 0 {
            return Err(GateError::Config("number of matches must be at least 1".into()));
        }
        for arm in [0u8, 1] {
            let available = d.arm_size(arm);
            if available < self.m {
                let unit = d.a().iter().position(|&v| v != arm).unwrap_or(0);
                return Err(GateError::InsufficientMatches {
                    unit,
                    needed: self.m,
                    available,
                });
            }
        }
        Ok(())
    }
}

#[inline]
fn distance(u: &[f64], v: &[f64], metric: Metric) -> f64 {
    match metric {
        Metric::Euclidean => u
            .iter()
            .zip(v)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt(),
        Metric::Manhattan => u.iter().zip(v).map(|(a, b)| (a - b).abs()).sum(),
        Metric::Canberra => u
            .iter()
            .zip(v)
            .map(|(a, b)| {
                let den = a.abs() + b.abs();
                // 0/0 when both coordinates are zero
                if den == 0.0 {
                    0.0
                } else {
                    (a - b).abs() / den
                }
            })
            .sum(),
    }
}

pub fn compute_distance(u: &[f64], v: &[f64], metric: Metric) -> Result<f64> {
    if u.len() != v.len() {
        return Err(GateError::Dimension {
            expected: u.len(),
            got: v.len(),
        });
    }
    if u.is_empty() {
        return Err(GateError::Dimension {
            expected: 1,
            got: 0,
        });
    }
    Ok(distance(u, v, metric))
}

/// Covariates prepared for matching plus the arm membership lists.
struct Matcher<'a> {
    d: &'a Dataset,
    x: std::borrow::Cow<'a, [f64]>,
    arms: [Vec<usize>; 2],
    cfg: MatchConfig,
}

impl<'a> Matcher<'a> {
    fn new(d: &'a Dataset, cfg: MatchConfig) -> Result<Self> {
        let x = if cfg.standardize {
            std::borrow::Cow::Owned(standardized(d))
        } else {
            std::borrow::Cow::Borrowed(d.x())
        };
        Ok(Matcher {
            d,
            x,
            arms: [d.arm_indices(0), d.arm_indices(1)],
            cfg,
        })
    }

    fn row(&self, i: usize) -> &[f64] {
        let p = self.d.p();
        &self.x[i * p..(i + 1) * p]
    }

    fn matches_for(&self, i: usize) -> Vec<usize> {
        let m = self.cfg.m;
        let opposite = &self.arms[(1 - self.d.a()[i]) as usize];
        let xi = self.row(i);
        // sorted by (distance, index); candidates arrive in ascending index order
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(m + 1);
        for &j in opposite {
            let dist = distance(xi, self.row(j), self.cfg.metric);
            if best.len() == m && dist >= best[m - 1].0 {
                continue;
            }
            let pos = best.partition_point(|e| e.0 <= dist);
            best.insert(pos, (dist, j));
            if best.len() > m {
                best.pop();
            }
        }
        best.into_iter().map(|(_, j)| j).collect()
    }
}

/// Column-wise scaling by the sample standard deviation (zero-spread columns left as is).
fn standardized(d: &Dataset) -> Vec<f64> {
    let p = d.p();
    let scales: Vec<f64> = (0..p)
        .map(|j| {
            let col: Vec<f64> = (0..d.n()).map(|i| d.row(i)[j]).collect();
            let sd = sample_sd(&col);
            if sd > 0.0 && sd.is_finite() {
                sd
            } else {
                1.0
            }
        })
        .collect();
    d.x()
        .chunks(p)
        .flat_map(|r| r.iter().zip(&scales).map(|(v, s)| v / s))
        .collect()
}

/// Indices of the `m` nearest opposite-arm units to unit `i`, nearest first.
pub fn find_matches(d: &Dataset, i: usize, cfg: &MatchConfig) -> Result<Vec<usize>> {
    if i >= d.n() {
        return Err(GateError::Dimension {
            expected: d.n(),
            got: i,
        });
    }
    let available = d.arm_size(1 - d.a()[i]);
    if cfg.m > available {
        return Err(GateError::InsufficientMatches {
            unit: i,
            needed: cfg.m,
            available,
        });
    }
    if cfg.m == 0 {
        return Err(GateError::Config("number of matches must be at least 1".into()));
    }
    Ok(Matcher::new(d, *cfg)?.matches_for(i))
}

/// Potential outcomes imputed by matching.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputedOutcomes {
    pub y0_hat: Vec<f64>,
    pub y1_hat: Vec<f64>,
    /// Match set of each unit, nearest first.
    pub match_sets: Vec<Vec<usize>>,
    /// How often each unit serves as somebody's match.
    pub usage_counts: Vec<usize>,
    pub m: usize,
}

impl ImputedOutcomes {
    /// Per-unit `ŷ¹ − ŷ⁰`.
    pub fn effects(&self) -> Vec<f64> {
        self.y1_hat
            .iter()
            .zip(&self.y0_hat)
            .map(|(a, b)| a - b)
            .collect()
    }
}

pub fn impute_potential_outcomes(d: &Dataset, cfg: &MatchConfig) -> Result<ImputedOutcomes> {
    cfg.validate_for(d)?;
    let matcher = Matcher::new(d, *cfg)?;
    let match_sets: Vec<Vec<usize>> = (0..d.n())
        .into_par_iter()
        .map(|i| matcher.matches_for(i))
        .collect();

    let m = cfg.m;
    let y = d.y();
    let mut y0_hat = Vec::with_capacity(d.n());
    let mut y1_hat = Vec::with_capacity(d.n());
    let mut usage_counts = vec![0usize; d.n()];
    for (i, set) in match_sets.iter().enumerate() {
        let matched = set.iter().map(|&j| y[j]).sum::<f64>() / m as f64;
        for &j in set {
            usage_counts[j] += 1;
        }
        if d.a()[i] == 1 {
            y1_hat.push(y[i]);
            y0_hat.push(matched);
        } else {
            y0_hat.push(y[i]);
            y1_hat.push(matched);
        }
    }
    Ok(ImputedOutcomes {
        y0_hat,
        y1_hat,
        match_sets,
        usage_counts,
        m,
    })
}

/// `Σ (2aᵢ − 1)(1 + Kᵢ/m) yᵢ`, which equals `Σ (ŷ¹ᵢ − ŷ⁰ᵢ)`.
pub fn weight_form_total(io: &ImputedOutcomes, d: &Dataset) -> Result<f64> {
    if io.usage_counts.len() != d.n() {
        return Err(GateError::Dimension {
            expected: d.n(),
            got: io.usage_counts.len(),
        });
    }
    let m = io.m as f64;
    Ok(d
        .y()
        .iter()
        .zip(d.a())
        .zip(&io.usage_counts)
        .map(|((&y, &a), &k)| {
            let sign = if a == 1 { 1.0 } else { -1.0 };
            sign * (1.0 + k as f64 / m) * y
        })
        .sum())
}
