//! Hold-out cross-validation of covariance models by imputation error.

use std::fmt;
use std::io::Write;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::{cheapest_group_mode, default_hyperparameters_fixed, psi_hat, run_chain, ChainConfig};
use crate::error::{Result, SfaError};
use crate::meanmodel::{ols_fit_observed, Design};
use crate::scalar::Scalar;
use crate::tensor::{split_sizes, MaskedTensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvModel {
    /// Independent errors; predictions are the least-squares mean.
    Iid,
    /// One unstructured mode, the others held at the identity.
    SingleMode(usize),
    /// Separable model with the given ranks.
    Sfa(Vec<usize>),
}

impl CvModel {
    /// Parses `iid`, `time`, `mode:<i>` (1-based) or `sfa:<k1>,<k2>,...`;
    /// `time` stands for `time_mode` (0-based).
    pub fn parse(s: &str, time_mode: usize) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("iid") {
            return Ok(CvModel::Iid);
        }
        if s.eq_ignore_ascii_case("time") {
            return Ok(CvModel::SingleMode(time_mode));
        }
        if let Some(rest) = s.strip_prefix("mode:") {
            let i: usize = rest
                .parse()
                .map_err(|_| SfaError::InvalidArgument(format!("bad mode in {}", s)))?;
            if i == 0 {
                return Err(SfaError::InvalidArgument("modes are numbered from 1".into()));
            }
            return Ok(CvModel::SingleMode(i - 1));
        }
        if let Some(rest) = s.strip_prefix("sfa:") {
            let ranks = rest
                .split(',')
                .map(|r| r.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| SfaError::InvalidArgument(format!("bad ranks in {}", s)))?;
            return Ok(CvModel::Sfa(ranks));
        }
        Err(SfaError::InvalidArgument(format!("unknown model {}", s)))
    }

    /// Splits a comma list where `sfa:` consumes the remaining comma-separated integers.
    pub fn parse_list(s: &str, time_mode: usize) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        let mut parts = s.split(',').peekable();
        while let Some(p) = parts.next() {
            if p.trim().starts_with("sfa:") {
                let mut spec = p.trim().to_string();
                while let Some(next) = parts.peek() {
                    if next.trim().parse::<usize>().is_ok() {
                        spec.push(',');
                        spec.push_str(next.trim());
                        parts.next();
                    } else {
                        break;
                    }
                }
                out.push(Self::parse(&spec, time_mode)?);
            } else {
                out.push(Self::parse(p, time_mode)?);
            }
        }
        Ok(out)
    }
}

impl fmt::Display for CvModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CvModel::Iid => write!(f, "iid"),
            CvModel::SingleMode(i) => write!(f, "mode:{}", i + 1),
            CvModel::Sfa(r) => write!(
                f,
                "sfa:{}",
                r.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",")
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub replications: usize,
    pub holdout_fraction: f64,
    pub seed: u64,
    pub models: Vec<CvModel>,
    /// Chain settings for the covariance models; seed and group mode are set per fit.
    pub chain: ChainConfig,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            replications: 50,
            holdout_fraction: 0.25,
            seed: 0,
            models: vec![CvModel::Iid],
            chain: ChainConfig {
                iters: 600,
                burnin: 100,
                thin: 1,
                store_covariances: false,
                ..Default::default()
            },
        }
    }
}

impl CvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(SfaError::InvalidArgument(format!(
                "holdout fraction {} outside (0, 1)",
                self.holdout_fraction
            )));
        }
        if self.replications == 0 || self.models.is_empty() {
            return Err(SfaError::InvalidArgument("need at least one replication and one model".into()));
        }
        if self.chain.iters == self.chain.burnin {
            return Err(SfaError::InvalidArgument("chain keeps no draws".into()));
        }
        self.chain.validate(usize::MAX)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub models: Vec<CvModel>,
    /// Mean squared prediction error, indexed `[replication][model]`.
    pub mse: Vec<Vec<f64>>,
    /// Hold-out sets redrawn because they emptied a slice or broke the mean fit.
    pub redraws: usize,
}

impl CvResult {
    pub fn mean(&self) -> Vec<f64> {
        let n = self.mse.len() as f64;
        (0..self.models.len())
            .map(|j| self.mse.iter().map(|r| r[j]).sum::<f64>() / n)
            .collect()
    }

    /// Sample standard deviation across replications.
    pub fn sd(&self) -> Vec<f64> {
        let n = self.mse.len();
        let means = self.mean();
        (0..self.models.len())
            .map(|j| {
                if n < 2 {
                    return 0.0;
                }
                (self.mse.iter().map(|r| (r[j] - means[j]).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            })
            .collect()
    }

    /// Rows `average` and `sd`, then one row per replication.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["statistic".to_string()];
        header.extend(self.models.iter().map(|m| m.to_string()));
        wtr.write_record(&header)?;
        for (name, vals) in [("average", self.mean()), ("sd", self.sd())] {
            let mut rec = vec![name.to_string()];
            rec.extend(vals.iter().map(|v| v.to_string()));
            wtr.write_record(&rec)?;
        }
        for (r, row) in self.mse.iter().enumerate() {
            let mut rec = vec![format!("rep{}", r + 1)];
            rec.extend(row.iter().map(|v| v.to_string()));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn slices_covered(dims: &[usize], mask: &[bool]) -> bool {
    (0..dims.len()).all(|g| {
        let (left, mg, _) = split_sizes(dims, g);
        let mut seen = vec![false; mg];
        for (c, &o) in mask.iter().enumerate() {
            if o {
                seen[(c / left) % mg] = true;
            }
        }
        seen.iter().all(|&s| s)
    })
}

/// Predictions of the hidden cells of `train` (its missing cells, in linear order)
/// under one model. Hidden values never enter the fit.
pub fn fit_predict<T: Scalar>(
    train: &MaskedTensor<T>,
    design: Option<&Design<T>>,
    model: &CvModel,
    chain: &ChainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let hidden = train.missing_indices();
    let dims = train.dims().to_vec();
    let (ranks, fixed) = match model {
        CvModel::Iid => {
            return match design {
                Some(d) => {
                    let mean = d.mean(&ols_fit_observed(train, d)?)?;
                    Ok(hidden.iter().map(|&c| mean.data()[c].f64()).collect())
                }
                None => Ok(vec![0.0; hidden.len()]),
            };
        }
        CvModel::SingleMode(i) => {
            if *i >= dims.len() {
                return Err(SfaError::ModeOutOfRange { mode: *i, order: dims.len() });
            }
            let mut r = vec![0; dims.len()];
            r[*i] = dims[*i];
            (r, (0..dims.len()).filter(|j| j != i).collect::<Vec<_>>())
        }
        CvModel::Sfa(r) => (r.clone(), Vec::new()),
    };
    let prior = default_hyperparameters_fixed(psi_hat(train, design)?, &dims, &ranks, &fixed)?;
    let cfg = ChainConfig {
        seed,
        group_mode: Some(chain.group_mode.unwrap_or_else(|| cheapest_group_mode(&dims, train.mask()))),
        fixed_modes: fixed,
        store_covariances: false,
        ..chain.clone()
    };
    let samples = run_chain(train, &ranks, design, &prior, &cfg)?;
    Ok(samples.posterior_mean_missing())
}

/// Runs every replication (in parallel) and returns the per-model errors.
pub fn cross_validate<T: Scalar>(y: &MaskedTensor<T>, design: Option<&Design<T>>, cfg: &CvConfig) -> Result<CvResult> {
    cfg.validate()?;
    let observed: Vec<usize> = (0..y.mask().len()).filter(|&c| y.mask()[c]).collect();
    let n_hold = ((cfg.holdout_fraction * observed.len() as f64).round() as usize).max(1);
    if n_hold >= observed.len() {
        return Err(SfaError::InvalidArgument("hold-out would remove every observed cell".into()));
    }
    let rows: Vec<(Vec<f64>, usize)> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| -> Result<(Vec<f64>, usize)> {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(rep as u64);
            let mut redraws = 0;
            let (train, held) = loop {
                let held: Vec<usize> = sample(&mut rng, observed.len(), n_hold).into_iter().map(|i| observed[i]).collect();
                let train = y.with_hidden(&held)?;
                let ok = slices_covered(train.dims(), train.mask())
                    && design.is_none_or(|d| ols_fit_observed(&train, d).is_ok());
                if ok {
                    break (train, held);
                }
                redraws += 1;
                log::warn!("replication {}: hold-out set redrawn", rep + 1);
                if redraws > 100 {
                    return Err(SfaError::InvalidArgument(
                        "could not draw a hold-out set that keeps the model identified".into(),
                    ));
                }
            };
            let hidden = train.missing_indices();
            let pos: Vec<usize> = held.iter().map(|c| hidden.binary_search(c).expect("held cell is hidden")).collect();
            let mut errs = Vec::with_capacity(cfg.models.len());
            for model in &cfg.models {
                let chain_seed: u64 = rng.random();
                let pred = fit_predict(&train, design, model, &cfg.chain, chain_seed)?;
                let sse: f64 = held
                    .iter()
                    .zip(&pos)
                    .map(|(&c, &p)| (pred[p] - y.tensor().data()[c].f64()).powi(2))
                    .sum();
                errs.push(sse / held.len() as f64);
            }
            log::info!("replication {}: {:?}", rep + 1, errs);
            Ok((errs, redraws))
        })
        .collect::<Result<_>>()?;
    Ok(CvResult {
        models: cfg.models.clone(),
        redraws: rows.iter().map(|r| r.1).sum(),
        mse: rows.into_iter().map(|r| r.0).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meanmodel::Design;
    use crate::tensor::DenseTensor;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn parse_models() {
        let ms = CvModel::parse_list("iid,time,sfa:9,4,2,10,mode:3", 1).unwrap();
        assert_eq!(
            ms,
            vec![CvModel::Iid, CvModel::SingleMode(1), CvModel::Sfa(vec![9, 4, 2, 10]), CvModel::SingleMode(2)]
        );
        assert_eq!(ms[2].to_string(), "sfa:9,4,2,10");
        assert!(CvModel::parse("bogus", 0).is_err());
        assert!(CvModel::parse("mode:0", 0).is_err());
    }

    fn noiseless() -> (MaskedTensor<f64>, Design<f64>) {
        let dims = vec![4, 3, 5];
        let x = DMatrix::from_fn(60, 3, |r, c| ((r * (c + 2)) % 7) as f64 - 3.0 + if c == 0 { 10.0 } else { 0.0 });
        let design = Design::dense(dims.clone(), x, None).unwrap();
        let y = design.mean(&DVector::from_vec(vec![1.0, -0.5, 0.25])).unwrap();
        (MaskedTensor::fully_observed(y), design)
    }

    #[test]
    fn noiseless_data_gives_zero_iid_error() {
        let (y, design) = noiseless();
        let cfg = CvConfig {
            replications: 4,
            seed: 3,
            ..Default::default()
        };
        let r = cross_validate(&y, Some(&design), &cfg).unwrap();
        assert!(r.mean()[0] < 1e-20);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 2 + 4);
    }

    #[test]
    fn holdout_values_do_not_leak() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = DenseTensor::from_fn(vec![4, 3, 3], |_| rng.random_range(-1.0..1.0)).unwrap();
        let y = MaskedTensor::fully_observed(t.clone());
        let held = vec![2, 7, 20];
        let chain = ChainConfig {
            iters: 40,
            burnin: 10,
            thin: 1,
            ..Default::default()
        };
        let a = fit_predict(&y.with_hidden(&held).unwrap(), None, &CvModel::Sfa(vec![1, 0, 3]), &chain, 5).unwrap();
        let mut t2 = t.clone();
        for &c in &held {
            let idx = crate::tensor::multi_index(t.dims(), c);
            let v = t.get(&idx);
            t2 = DenseTensor::from_fn(t.dims().to_vec(), |i| if i == idx.as_slice() { v + 100.0 } else { t2.get(i) }).unwrap();
        }
        let y2 = MaskedTensor::fully_observed(t2);
        let b = fit_predict(&y2.with_hidden(&held).unwrap(), None, &CvModel::Sfa(vec![1, 0, 3]), &chain, 5).unwrap();
        assert_eq!(a, b);
        let c = fit_predict(&y2.with_hidden(&held).unwrap(), None, &CvModel::SingleMode(1), &chain, 5).unwrap();
        assert_eq!(c.len(), 3);
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = DenseTensor::from_fn(vec![5, 4, 3], |_| rng.random_range(-1.0..1.0)).unwrap();
        let y = MaskedTensor::fully_observed(t);
        let cfg = CvConfig {
            replications: 3,
            seed: 11,
            models: vec![CvModel::Iid, CvModel::SingleMode(0), CvModel::Sfa(vec![1, 0, 0])],
            chain: ChainConfig {
                iters: 30,
                burnin: 5,
                thin: 1,
                ..Default::default()
            },
            ..Default::default()
        };
        let a = cross_validate(&y, None, &cfg).unwrap();
        let b = cross_validate(&y, None, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mse.len(), 3);
        assert!(a.mse.iter().flatten().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn invalid_config() {
        let (y, design) = noiseless();
        let cfg = CvConfig {
            holdout_fraction: 1.0,
            ..Default::default()
        };
        assert!(cross_validate(&y, Some(&design), &cfg).is_err());
    }
}
