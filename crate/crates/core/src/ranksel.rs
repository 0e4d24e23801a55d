//! Likelihood-ratio tests for residual dependence within a mode and the
//! iterative search over the rank vector.

use std::io::Write;

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_lr;

use crate::covariance::standardize_except;
use crate::error::{Result, SfaError};
use crate::meanmodel::Design;
use crate::mle::{fit_mle, MleConfig};
use crate::scalar::Scalar;
use crate::tensor::DenseTensor;

/// Value of the test statistic for one mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrtStatistic {
    /// `+∞` when `V̂` is singular.
    pub value: f64,
    pub singular: bool,
}

/// `t = (m/m_i)[tr V̂ − log|V̂| − m_i]` with `V̂ = (m_i/m) Ỹ_(i) Ỹ_(i)ᵀ` for an array
/// standardized in every mode.
pub fn lrt_statistic<T: Scalar>(ytil: &DenseTensor<T>, mode: usize) -> Result<LrtStatistic> {
    let y = ytil.matricize(mode)?;
    let n = y.ncols();
    if n == 0 {
        return Err(SfaError::Shape("empty array".into()));
    }
    let v = (&y * y.transpose()).map(|x| x.f64()) / n as f64;
    let eig = SymmetricEigen::new(v).eigenvalues;
    let max = eig.iter().cloned().fold(0.0, f64::max);
    if eig.iter().any(|&l| !(l > 1e-12 * max.max(f64::MIN_POSITIVE))) {
        return Ok(LrtStatistic {
            value: f64::INFINITY,
            singular: true,
        });
    }
    // Each eigenvalue contributes λ − ln λ − 1 ≥ 0.
    let s: f64 = eig.iter().map(|&l| (l - 1.0) - l.ln()).sum();
    Ok(LrtStatistic {
        value: (n as f64 * s).max(0.0),
        singular: false,
    })
}

/// Degrees of freedom of the test for a mode of dimension `m`.
pub fn lrt_df(m: usize) -> usize {
    m * (m + 1) / 2
}

/// Inverse chi-square CDF by bisection on the regularized incomplete gamma function.
pub fn chi2_quantile(p: f64, df: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(SfaError::InvalidArgument(format!("probability {} outside (0, 1)", p)));
    }
    if !(df > 0.0) || !df.is_finite() {
        return Err(SfaError::InvalidArgument(format!("degrees of freedom {} must be positive", df)));
    }
    let cdf = |x: f64| gamma_lr(0.5 * df, 0.5 * x);
    let mut lo = 0.0;
    let mut hi = df.max(1.0);
    while cdf(hi) < p {
        lo = hi;
        hi *= 2.0;
    }
    while hi - lo > 1e-9 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Parameters saved by a rank-`k` factor model over an unstructured `m × m` covariance.
pub fn param_reduction(m: usize, k: usize) -> i64 {
    assert!(k <= m, "rank {} exceeds dimension {}", k, m);
    let (m, k) = (m as i64, k as i64);
    let twice = (m - k) * (m - k) - (m + k);
    debug_assert!(twice % 2 == 0);
    twice / 2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adjustment {
    /// Each of the `r` active tests at level `α^r`.
    #[default]
    AlphaPower,
    /// Each test at `α / r`.
    Bonferroni,
    None,
}

impl Adjustment {
    pub fn level(self, alpha: f64, active: usize) -> f64 {
        let r = active.max(1) as f64;
        match self {
            Adjustment::AlphaPower => alpha.powf(r),
            Adjustment::Bonferroni => alpha / r,
            Adjustment::None => alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RankSelectionConfig {
    pub adjustment: Adjustment,
    pub mle: MleConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Reject,
    Retain,
    /// Not tested: the mode's rank was already fixed.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSelectionRow {
    pub ranks: Vec<usize>,
    /// Per-test level after the multiplicity adjustment.
    pub level: f64,
    pub statistics: Vec<Option<LrtStatistic>>,
    pub critical_values: Vec<Option<f64>>,
    pub decisions: Vec<Decision>,
    pub log_lik: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSelectionReport {
    pub dims: Vec<usize>,
    pub alpha: f64,
    pub adjustment: Adjustment,
    pub rows: Vec<RankSelectionRow>,
    pub final_ranks: Vec<usize>,
}

impl RankSelectionReport {
    /// Unadjusted `χ²_{1−α}` critical value per mode.
    pub fn nominal_critical_values(&self) -> Result<Vec<f64>> {
        self.dims.iter().map(|&m| chi2_quantile(1.0 - self.alpha, lrt_df(m) as f64)).collect()
    }

    /// One row per fitted model with the per-mode statistics, then a row of
    /// unadjusted critical values.
    pub fn write_csv<W: Write>(&self, w: W, mode_names: Option<&[String]>) -> Result<()> {
        let names: Vec<String> = match mode_names {
            Some(n) => n.to_vec(),
            None => (1..=self.dims.len()).map(|i| format!("mode{}", i)).collect(),
        };
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["model".to_string(), "level".to_string()];
        header.extend(names.iter().map(|n| format!("t_{}", n)));
        header.extend(names.iter().map(|n| format!("critical_{}", n)));
        header.extend(names.iter().map(|n| format!("decision_{}", n)));
        header.push("log_lik".into());
        wtr.write_record(&header)?;
        let fmt_ranks =
            |r: &[usize]| format!("({})", r.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","));
        for row in &self.rows {
            let mut rec = vec![fmt_ranks(&row.ranks), row.level.to_string()];
            rec.extend(row.statistics.iter().map(|s| s.map_or(String::new(), |s| s.value.to_string())));
            rec.extend(row.critical_values.iter().map(|c| c.map_or(String::new(), |c| c.to_string())));
            rec.extend(row.decisions.iter().map(|d| {
                match d {
                    Decision::Reject => "reject",
                    Decision::Retain => "retain",
                    Decision::Fixed => "",
                }
                .to_string()
            }));
            rec.push(row.log_lik.to_string());
            wtr.write_record(&rec)?;
        }
        let mut last = vec![format!("critical_value_{}", 1.0 - self.alpha), String::new()];
        last.extend(self.nominal_critical_values()?.iter().map(|c| c.to_string()));
        last.resize(header.len(), String::new());
        wtr.write_record(&last)?;
        let mut fin = vec!["selected".to_string(), fmt_ranks(&self.final_ranks)];
        fin.resize(header.len(), String::new());
        wtr.write_record(&fin)?;
        wtr.flush()?;
        Ok(())
    }
}

/// Starts from all-zero ranks and repeatedly fits, tests the active modes and
/// raises the ranks of rejecting modes until every mode is fixed.
pub fn select_ranks<T: Scalar>(
    y: &DenseTensor<T>,
    alpha: f64,
    design: Option<&Design<T>>,
    config: &RankSelectionConfig,
) -> Result<RankSelectionReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(SfaError::InvalidArgument(format!("alpha {} outside (0, 1)", alpha)));
    }
    let dims = y.dims().to_vec();
    let k = dims.len();
    let mut ranks = vec![0usize; k];
    // A one-dimensional mode has nothing to test.
    let mut active: Vec<bool> = dims.iter().map(|&m| m > 1).collect();
    let mut rows = Vec::new();
    while active.iter().any(|&a| a) {
        let fit = fit_mle(y, &ranks, design, &config.mle)?;
        if fit.diverged {
            return Err(SfaError::Diverged { sweeps: fit.sweeps });
        }
        let resid = match (design, &fit.model.mean_beta) {
            (Some(d), Some(b)) => y.sub(&d.mean(b)?)?,
            _ => y.clone(),
        };
        let mut ytil = standardize_except(&resid, &fit.model.covs, None)?;
        let scale = fit.model.covs.scale_or_one();
        if scale != T::one() {
            ytil = ytil.scale(T::one() / scale.sqrt());
        }
        let r = active.iter().filter(|&&a| a).count();
        let level = config.adjustment.level(alpha, r);
        let mut row = RankSelectionRow {
            ranks: ranks.clone(),
            level,
            statistics: vec![None; k],
            critical_values: vec![None; k],
            decisions: vec![Decision::Fixed; k],
            log_lik: fit.log_lik().f64(),
        };
        let mut next = ranks.clone();
        let tested: Vec<usize> = (0..k).filter(|&i| active[i]).collect();
        for i in tested {
            let stat = lrt_statistic(&ytil, i)?;
            let crit = chi2_quantile(1.0 - level, lrt_df(dims[i]) as f64)?;
            let reject = stat.singular || stat.value > crit;
            row.statistics[i] = Some(stat);
            row.critical_values[i] = Some(crit);
            if reject {
                row.decisions[i] = Decision::Reject;
                if param_reduction(dims[i], ranks[i] + 1) > 0 {
                    next[i] = ranks[i] + 1;
                } else {
                    next[i] = dims[i];
                    active[i] = false;
                }
            } else {
                row.decisions[i] = Decision::Retain;
                active[i] = false;
            }
        }
        log::info!("ranks {:?}: decisions {:?}", ranks, row.decisions);
        rows.push(row);
        ranks = next;
    }
    Ok(RankSelectionReport {
        dims,
        alpha,
        adjustment: config.adjustment,
        rows,
        final_ranks: ranks,
    })
}
