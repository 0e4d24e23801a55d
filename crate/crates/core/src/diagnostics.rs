//! Residual correlation summaries per mode.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::covariance::standardize_except;
use crate::error::{Result, SfaError};
use crate::famodel::SfaModel;
use crate::meanmodel::{ols_fit_observed, Design};
use crate::scalar::Scalar;
use crate::tensor::{split_sizes, DenseTensor, MaskedTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagSummary {
    pub lag: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeDiagnostics {
    pub mode: usize,
    /// Pearson correlations between the rows of the mode matricization, over
    /// the columns where both rows are observed.
    pub correlation: Vec<Vec<f64>>,
    /// Loadings of each level on the first two principal components.
    pub pc_scores: Vec<[f64; 2]>,
    pub pc_eigenvalues: [f64; 2],
    /// Correlations between levels `lag` apart, for modes with a natural order.
    pub lags: Vec<LagSummary>,
    /// Share of off-diagonal correlations beyond the two-sided 95% null threshold.
    pub fraction_significant: f64,
    /// Levels whose residuals have no variation.
    pub degenerate_rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub modes: Vec<ModeDiagnostics>,
}

/// Residuals are `Y − M̂` with `M̂` the OLS fit (or the fit's coefficients when
/// given); with a fit they are further whitened by its mode covariances so the
/// summaries show dependence the model leaves unexplained.
pub fn residual_diagnostics<T: Scalar>(
    y: &MaskedTensor<T>,
    design: Option<&Design<T>>,
    fit: Option<&SfaModel<T>>,
) -> Result<Diagnostics> {
    let beta = match (design, fit.and_then(|f| f.mean_beta.clone())) {
        (Some(_), Some(b)) => Some(b),
        (Some(d), None) => Some(ols_fit_observed(y, d)?),
        (None, _) => None,
    };
    let mut resid = match (design, &beta) {
        (Some(d), Some(b)) => y.tensor().sub(&d.mean(b)?)?,
        _ => y.tensor().clone(),
    };
    if let Some(f) = fit {
        if !y.is_complete() {
            return Err(SfaError::InvalidArgument(
                "whitened diagnostics need a complete array".into(),
            ));
        }
        resid = standardize_except(&resid, &f.covs, None)?;
    }
    let modes = (0..resid.order())
        .map(|i| mode_diagnostics(&resid, y.mask(), i))
        .collect::<Result<_>>()?;
    Ok(Diagnostics { modes })
}

fn null_threshold(n: usize) -> f64 {
    if n < 3 {
        return 1.0;
    }
    let df = (n - 2) as f64;
    let t = StudentsT::new(0.0, 1.0, df).map(|d| d.inverse_cdf(0.975)).unwrap_or(f64::INFINITY);
    t / (df + t * t).sqrt()
}

/// Correlation summaries for one mode.
pub fn mode_diagnostics<T: Scalar>(resid: &DenseTensor<T>, mask: &[bool], mode: usize) -> Result<ModeDiagnostics> {
    resid.check_mode(mode)?;
    let dims = resid.dims();
    let (left, m, right) = split_sizes(dims, mode);
    let cols = left * right;
    let val = |row: usize, u: usize| {
        let c = u % left + left * (row + m * (u / left));
        if mask[c] {
            Some(resid.data()[c].f64())
        } else {
            None
        }
    };
    let mut corr = vec![vec![0.0; m]; m];
    let mut degenerate = Vec::new();
    let mut above = 0usize;
    let mut pairs = 0usize;
    let mut row_var = vec![0.0; m];
    for a in 0..m {
        let xs: Vec<f64> = (0..cols).filter_map(|u| val(a, u)).collect();
        if xs.len() > 1 {
            let mu = xs.iter().sum::<f64>() / xs.len() as f64;
            row_var[a] = xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>();
        }
        if !(row_var[a] > 0.0) {
            degenerate.push(a);
        }
    }
    for a in 0..m {
        corr[a][a] = 1.0;
        for b in a + 1..m {
            let (xa, xb): (Vec<f64>, Vec<f64>) =
                (0..cols).filter_map(|u| Some((val(a, u)?, val(b, u)?))).unzip();
            let n = xa.len();
            let r = if n > 1 && row_var[a] > 0.0 && row_var[b] > 0.0 {
                let ma = xa.iter().sum::<f64>() / n as f64;
                let mb = xb.iter().sum::<f64>() / n as f64;
                let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
                for (x, y) in xa.iter().zip(&xb) {
                    sab += (x - ma) * (y - mb);
                    saa += (x - ma).powi(2);
                    sbb += (y - mb).powi(2);
                }
                if saa > 0.0 && sbb > 0.0 {
                    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
                } else {
                    0.0
                }
            } else {
                0.0
            };
            corr[a][b] = r;
            corr[b][a] = r;
            pairs += 1;
            if r.abs() > null_threshold(n) {
                above += 1;
            }
        }
    }

    let cm = DMatrix::from_fn(m, m, |a, b| corr[a][b]);
    let eig = SymmetricEigen::new(cm);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut pc_eigenvalues = [0.0; 2];
    let mut pc_scores = vec![[0.0; 2]; m];
    for (slot, &j) in order.iter().take(2).enumerate() {
        let lam = eig.eigenvalues[j].max(0.0);
        pc_eigenvalues[slot] = lam;
        let v = eig.eigenvectors.column(j);
        // Fix the sign so the largest entry is positive.
        let sign = if v.iter().fold(0.0f64, |acc, &x| if x.abs() > acc.abs() { x } else { acc }) < 0.0 { -1.0 } else { 1.0 };
        for a in 0..m {
            pc_scores[a][slot] = sign * v[a] * lam.sqrt();
        }
    }

    let lags = (1..m)
        .map(|h| {
            let vals: Vec<f64> = (0..m - h).map(|a| corr[a][a + h]).collect();
            LagSummary {
                lag: h,
                mean: vals.iter().sum::<f64>() / vals.len() as f64,
                min: vals.iter().cloned().fold(f64::INFINITY, f64::min),
                max: vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();

    Ok(ModeDiagnostics {
        mode,
        correlation: corr,
        pc_scores,
        pc_eigenvalues,
        lags,
        fraction_significant: if pairs > 0 { above as f64 / pairs as f64 } else { 0.0 },
        degenerate_rows: degenerate,
    })
}

impl Diagnostics {
    /// Writes `summary.csv` and per-mode `*_correlation.csv`, `*_pcs.csv` and `*_lags.csv`.
    pub fn write_dir(&self, dir: impl AsRef<Path>, mode_names: &[String], levels: &[Vec<String>]) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut summary = csv::Writer::from_path(dir.join("summary.csv"))?;
        summary.write_record(["mode", "levels", "fraction_significant", "pc1_eigenvalue", "pc2_eigenvalue", "degenerate_rows"])?;
        for md in &self.modes {
            let name = &mode_names[md.mode];
            let lv = &levels[md.mode];
            summary.write_record(&[
                name.clone(),
                lv.len().to_string(),
                md.fraction_significant.to_string(),
                md.pc_eigenvalues[0].to_string(),
                md.pc_eigenvalues[1].to_string(),
                md.degenerate_rows.iter().map(|&r| lv[r].clone()).collect::<Vec<_>>().join(";"),
            ])?;

            let mut w = csv::Writer::from_path(dir.join(format!("{}_correlation.csv", name)))?;
            let mut header = vec![String::from("level")];
            header.extend(lv.iter().cloned());
            w.write_record(&header)?;
            for (a, row) in md.correlation.iter().enumerate() {
                let mut rec = vec![lv[a].clone()];
                rec.extend(row.iter().map(|x| x.to_string()));
                w.write_record(&rec)?;
            }
            w.flush()?;

            let mut w = csv::Writer::from_path(dir.join(format!("{}_pcs.csv", name)))?;
            w.write_record(["level", "pc1", "pc2"])?;
            for (a, s) in md.pc_scores.iter().enumerate() {
                w.write_record(&[lv[a].clone(), s[0].to_string(), s[1].to_string()])?;
            }
            w.flush()?;

            let mut w = csv::Writer::from_path(dir.join(format!("{}_lags.csv", name)))?;
            w.write_record(["lag", "mean", "min", "max"])?;
            for l in &md.lags {
                w.write_record(&[l.lag.to_string(), l.mean.to_string(), l.min.to_string(), l.max.to_string()])?;
            }
            w.flush()?;
        }
        summary.flush()?;
        Ok(())
    }
}
