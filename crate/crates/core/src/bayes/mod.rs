//! Bayesian estimation: semiconjugate priors, a Metropolis–Hastings sampler whose
//! proposals are all accepted, and imputation of missing cells.

pub mod conditionals;
pub mod ess;
pub mod missing;

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use conditionals::{
    latent_conditional, loadings_conditional, loadings_log_prior, loadings_log_prior_given, precision_conditional,
    sample_diagonal_fc, sample_factor_fc, sample_gamma, sample_unstructured_fc, sample_wishart,
};
pub use ess::{effective_sample_size, Ess};
pub use missing::{cheapest_group_mode, default_group_mode, slice_conditional, SliceConditional};

use crate::covariance::{normalize_scales, standardize_with, sym_factors, CovarianceSet, ModeCovariance, SymFactors};
use crate::error::{Result, SfaError};
use crate::famodel::{check_ranks, log_density_with};
use crate::meanmodel::{ols_fit_observed, Design};
use crate::scalar::Scalar;
use crate::tensor::{DenseTensor, MaskedTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub nu0: f64,
    pub d0sq: f64,
    /// Wishart degrees of freedom for unstructured modes; `m_i + 2` when absent.
    #[serde(default)]
    pub kappa: BTreeMap<usize, f64>,
    /// `c_i` in the prior `Σ_i⁻¹ ~ Wishart(κ_i, I / c_i)`; 1 when absent.
    #[serde(default)]
    pub wishart_inv_scale: BTreeMap<usize, f64>,
    /// Multiplier on `m (XᵀX)⁻¹`, the prior covariance of the mean coefficients.
    pub mean_prior_scale: f64,
}

impl PriorSpec {
    pub fn new(nu0: f64, d0sq: f64) -> Self {
        Self {
            nu0,
            d0sq,
            kappa: BTreeMap::new(),
            wishart_inv_scale: BTreeMap::new(),
            mean_prior_scale: 1.0,
        }
    }

    pub fn kappa_for(&self, mode: usize, dim: usize) -> f64 {
        self.kappa.get(&mode).copied().unwrap_or(dim as f64 + 2.0)
    }

    pub fn inv_scale_for(&self, mode: usize) -> f64 {
        self.wishart_inv_scale.get(&mode).copied().unwrap_or(1.0)
    }

    pub fn validate(&self, dims: &[usize]) -> Result<()> {
        if !(self.nu0 > 0.0) || !(self.d0sq > 0.0) || !(self.mean_prior_scale > 0.0) {
            return Err(SfaError::InvalidArgument(
                "nu0, d0sq and the mean prior scale must be positive".into(),
            ));
        }
        for (&mode, &k) in &self.kappa {
            let dim = *dims
                .get(mode)
                .ok_or(SfaError::ModeOutOfRange { mode, order: dims.len() })?;
            if !(k >= dim as f64) {
                return Err(SfaError::InvalidArgument(format!(
                    "kappa {} for mode {} is below its dimension {}",
                    k,
                    mode + 1,
                    dim
                )));
            }
        }
        if self.wishart_inv_scale.values().any(|&c| !(c > 0.0)) {
            return Err(SfaError::InvalidArgument("Wishart inverse scales must be positive".into()));
        }
        Ok(())
    }
}

/// Default hyperparameters centering the prior total variance at `psi_hat`.
pub fn default_hyperparameters(psi_hat: f64, dims: &[usize], ranks: &[usize]) -> Result<PriorSpec> {
    default_hyperparameters_fixed(psi_hat, dims, ranks, &[])
}

/// As [`default_hyperparameters`] when the modes in `fixed` are held at the identity.
pub fn default_hyperparameters_fixed(psi_hat: f64, dims: &[usize], ranks: &[usize], fixed: &[usize]) -> Result<PriorSpec> {
    if !(psi_hat > 0.0) || !psi_hat.is_finite() {
        return Err(SfaError::InvalidArgument(format!("total variance estimate {} must be positive", psi_hat)));
    }
    check_ranks(ranks, dims)?;
    let sampled = |i: &usize| !fixed.contains(i);
    let mut prior = PriorSpec::new(3.0, 1.0);
    let m_all: f64 = dims.iter().map(|&m| m as f64).product();
    let structured: Vec<usize> = (0..dims.len()).filter(|i| sampled(i) && ranks[*i] < dims[*i]).collect();
    let unstructured: Vec<usize> = (0..dims.len()).filter(|i| sampled(i) && ranks[*i] == dims[*i]).collect();
    for &i in &unstructured {
        prior.kappa.insert(i, dims[i] as f64 + 2.0);
    }
    let r = structured.len();
    if r > 0 {
        let fa: f64 = structured
            .iter()
            .filter(|&&i| ranks[i] > 0)
            .map(|&i| ranks[i] as f64 + 1.0)
            .product();
        let rf = r as f64;
        prior.d0sq = psi_hat.powf(1.0 / rf) * (fa * m_all * 3f64.powi(r as i32)).powf(-1.0 / rf);
    } else if !unstructured.is_empty() {
        // E[Σ_i] = c_i I / (κ_i − m_i − 1) = c_i I.
        let u = unstructured.len() as f64;
        let c = (psi_hat / m_all).powf(1.0 / u);
        for &i in &unstructured {
            prior.wishart_inv_scale.insert(i, c);
        }
    }
    Ok(prior)
}

/// Total variance estimate `‖Y − M̂‖²` with `M̂` the least-squares mean fit, scaled
/// up from the observed cells when some are missing.
pub fn psi_hat<T: Scalar>(y: &MaskedTensor<T>, design: Option<&Design<T>>) -> Result<f64> {
    let fitted = match design {
        Some(d) => Some(d.mean(&ols_fit_observed(y, d)?)?),
        None => None,
    };
    let mut ss = 0.0;
    for (c, &obs) in y.mask().iter().enumerate() {
        if obs {
            let mut r = y.tensor().data()[c].f64();
            if let Some(f) = &fitted {
                r -= f.data()[c].f64();
            }
            ss += r * r;
        }
    }
    Ok(ss * y.mask().len() as f64 / y.n_observed() as f64)
}

/// Draws mode covariances from the prior.
pub fn sample_prior_covariances<T: Scalar, R: rand::Rng + ?Sized>(
    dims: &[usize],
    ranks: &[usize],
    prior: &PriorSpec,
    rng: &mut R,
) -> Result<CovarianceSet<T>> {
    check_ranks(ranks, dims)?;
    let mut modes = Vec::with_capacity(dims.len());
    for (i, (&m, &k)) in dims.iter().zip(ranks).enumerate() {
        let d2 = |rng: &mut R| {
            DVector::from_fn(m, |_, _| {
                T::of(1.0 / sample_gamma(0.5 * prior.nu0, 0.5 * prior.nu0 * prior.d0sq, rng))
            })
        };
        modes.push(if k == m {
            let scale = DMatrix::from_diagonal_element(m, m, T::of(1.0 / prior.inv_scale_for(i)));
            let w = sample_wishart(prior.kappa_for(i, m), &scale, rng)?;
            let sigma = w.cholesky().ok_or(SfaError::Singular { ratio: 0.0 })?.inverse();
            ModeCovariance::Unstructured {
                sigma: crate::covariance::symmetrize(sigma),
            }
        } else if k == 0 {
            ModeCovariance::Diagonal { d2: d2(rng) }
        } else {
            let d2 = d2(rng);
            let loadings = DMatrix::from_fn(m, k, |j, _| conditionals::std_normal::<T, R>(rng) * d2[j].sqrt());
            ModeCovariance::FactorAnalytic { loadings, d2 }
        });
    }
    Ok(CovarianceSet::new(modes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub iters: usize,
    pub burnin: usize,
    pub thin: usize,
    pub seed: u64,
    /// Mode whose slices are conditioned on when imputing; chosen automatically when absent.
    pub group_mode: Option<usize>,
    /// Modes held at the identity instead of being sampled.
    pub fixed_modes: Vec<usize>,
    /// Keep the covariance draws (off saves memory when only imputations are needed).
    pub store_covariances: bool,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            iters: 20_000,
            burnin: 5_000,
            thin: 10,
            seed: 0,
            group_mode: None,
            fixed_modes: Vec::new(),
            store_covariances: true,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self, order: usize) -> Result<()> {
        if self.thin == 0 {
            return Err(SfaError::InvalidArgument("thin must be at least 1".into()));
        }
        if self.burnin > self.iters {
            return Err(SfaError::InvalidArgument(format!(
                "burn-in {} exceeds the {} iterations",
                self.burnin, self.iters
            )));
        }
        if let Some(g) = self.group_mode {
            if g >= order {
                return Err(SfaError::ModeOutOfRange { mode: g, order });
            }
        }
        if let Some(&f) = self.fixed_modes.iter().find(|&&f| f >= order) {
            return Err(SfaError::ModeOutOfRange { mode: f, order });
        }
        Ok(())
    }

    pub fn expected_draws(&self) -> usize {
        (self.iters - self.burnin) / self.thin
    }
}

/// Current values of every sampled quantity.
#[derive(Debug, Clone)]
pub struct ChainState<T: Scalar> {
    pub covs: CovarianceSet<T>,
    pub beta: Option<DVector<T>>,
    /// The array with missing cells at their current imputations.
    pub values: DenseTensor<T>,
    pub rng: ChaCha8Rng,
}

/// Everything a sweep needs besides the state.
pub struct Sampler<'a, T: Scalar> {
    data: &'a MaskedTensor<T>,
    ranks: Vec<usize>,
    design: Option<&'a Design<T>>,
    prior: PriorSpec,
    /// `XᵀX / (scale · m)`.
    beta_prior_precision: Option<DMatrix<T>>,
    fixed: Vec<usize>,
    group_mode: usize,
}

impl<'a, T: Scalar> Sampler<'a, T> {
    pub fn new(
        data: &'a MaskedTensor<T>,
        ranks: &[usize],
        design: Option<&'a Design<T>>,
        prior: &PriorSpec,
        config: &ChainConfig,
    ) -> Result<Self> {
        let dims = data.dims();
        check_ranks(ranks, dims)?;
        prior.validate(dims)?;
        config.validate(dims.len())?;
        let beta_prior_precision = match design {
            Some(d) => {
                if d.dims() != dims {
                    return Err(SfaError::Shape("design dims do not match the array".into()));
                }
                let m = T::of_usize(data.mask().len());
                Some(d.weighted_gram(None)? / (T::of(prior.mean_prior_scale) * m))
            }
            None => None,
        };
        Ok(Self {
            data,
            ranks: ranks.to_vec(),
            design,
            prior: prior.clone(),
            beta_prior_precision,
            fixed: config.fixed_modes.clone(),
            group_mode: config
                .group_mode
                .unwrap_or_else(|| default_group_mode(dims, data.mask())),
        })
    }

    pub fn group_mode(&self) -> usize {
        self.group_mode
    }

    /// Missing cells at the least-squares fit, β at OLS, scale-aware covariances.
    pub fn initial_state(&self, seed: u64) -> Result<ChainState<T>> {
        let dims = self.data.dims().to_vec();
        let mut values = self.data.tensor().clone();
        let beta = match self.design {
            Some(d) => Some(ols_fit_observed(self.data, d)?),
            None => None,
        };
        let mean = self.mean(beta.as_ref())?;
        if !self.data.is_complete() {
            let data = values.data_mut();
            for (c, &obs) in self.data.mask().iter().enumerate() {
                if !obs {
                    data[c] = mean.as_ref().map_or(T::zero(), |m| m.data()[c]);
                }
            }
        }
        let resid = match &mean {
            Some(m) => values.sub(m)?,
            None => values.clone(),
        };
        let mut covs = crate::mle::initial_covariances(&resid, &self.ranks, seed)?;
        if !self.fixed.is_empty() {
            let mut carry = T::one();
            for &f in &self.fixed {
                carry *= covs.modes[f].trace() / T::of_usize(dims[f]);
                covs.modes[f] = ModeCovariance::identity(dims[f]);
            }
            if let Some(first) = (0..dims.len()).find(|i| !self.fixed.contains(i)) {
                covs.modes[first] = covs.modes[first].scaled(carry);
            }
        }
        Ok(ChainState {
            covs,
            beta,
            values,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn mean(&self, beta: Option<&DVector<T>>) -> Result<Option<DenseTensor<T>>> {
        match (self.design, beta) {
            (Some(d), Some(b)) => Ok(Some(d.mean(b)?)),
            _ => Ok(None),
        }
    }

    /// One full scan: mean coefficients, each mode in order, then missing cells.
    pub fn sweep(&self, state: &mut ChainState<T>) -> Result<()> {
        let mut factors: Vec<SymFactors<T>> = state
            .covs
            .modes
            .iter()
            .map(|c| sym_factors(&c.materialize()))
            .collect::<Result<_>>()?;

        if let (Some(design), Some(prior_prec)) = (self.design, &self.beta_prior_precision) {
            state.beta = Some(draw_beta(&state.values, design, &factors, prior_prec, &mut state.rng)?);
        }
        let mean = self.mean(state.beta.as_ref())?;
        let resid = match &mean {
            Some(m) => state.values.sub(m)?,
            None => state.values.clone(),
        };

        for i in 0..state.covs.order() {
            if self.fixed.contains(&i) {
                continue;
            }
            let ytil = standardize_with(&resid, &factors, Some(i))?.matricize(i)?;
            let m = ytil.nrows();
            let k = self.ranks[i];
            let rng = &mut state.rng;
            let updated = if k == m {
                ModeCovariance::Unstructured {
                    sigma: sample_unstructured_fc(&ytil, i, &self.prior, rng)?,
                }
            } else if k == 0 {
                ModeCovariance::Diagonal {
                    d2: sample_diagonal_fc(&ytil, &self.prior, rng),
                }
            } else {
                let (loadings, d2) = match &state.covs.modes[i] {
                    ModeCovariance::FactorAnalytic { loadings, d2 } => (loadings.clone(), d2.clone()),
                    other => (DMatrix::zeros(m, k), other.materialize().diagonal()),
                };
                let (loadings, d2) = sample_factor_fc(&ytil, &loadings, &d2, &self.prior, rng)?;
                ModeCovariance::FactorAnalytic { loadings, d2 }
            };
            factors[i] = sym_factors(&updated.materialize())?;
            state.covs.modes[i] = updated;
        }

        if !self.data.is_complete() {
            let precisions: Vec<DMatrix<T>> = factors.iter().map(|f| &f.inv_sqrt * &f.inv_sqrt).collect();
            missing::sample_missing_cells(
                &mut state.values,
                self.data.mask(),
                mean.as_ref(),
                &precisions,
                self.group_mode,
                &mut state.rng,
            )?;
        }
        Ok(())
    }

    /// Complete-data log-likelihood at the current state.
    pub fn log_lik(&self, state: &ChainState<T>) -> Result<T> {
        let factors = crate::covariance::set_factors(&state.covs)?;
        let resid = match self.mean(state.beta.as_ref())? {
            Some(m) => state.values.sub(&m)?,
            None => state.values.clone(),
        };
        log_density_with(&resid, &factors, T::one())
    }
}

fn draw_beta<T: Scalar>(
    values: &DenseTensor<T>,
    design: &Design<T>,
    factors: &[SymFactors<T>],
    prior_prec: &DMatrix<T>,
    rng: &mut ChaCha8Rng,
) -> Result<DVector<T>> {
    let prec = design.weighted_gram(Some(factors))? + prior_prec;
    let rhs = design.weighted_cross(values, Some(factors))?;
    let chol = prec
        .cholesky()
        .ok_or_else(|| SfaError::RankDeficient("posterior precision of the coefficients".into()))?;
    let mean = chol.solve(&rhs);
    let xi = DVector::from_fn(mean.len(), |_, _| conditionals::std_normal::<T, _>(rng));
    let step = chol
        .l()
        .transpose()
        .solve_upper_triangular(&xi)
        .ok_or(SfaError::Singular { ratio: 0.0 })?;
    Ok(mean + step)
}

/// Stored draws of a chain.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples<T: Scalar> {
    pub dims: Vec<usize>,
    pub ranks: Vec<usize>,
    /// Unit-trace mode covariances per draw (empty when not stored).
    pub covariances: Vec<Vec<DMatrix<T>>>,
    /// Total variance `ψ` per draw.
    pub psi: Vec<T>,
    pub beta: Vec<DVector<T>>,
    /// Linear indices of the imputed cells.
    pub missing_cells: Vec<usize>,
    /// Imputed values per draw, aligned with `missing_cells`.
    pub missing: Vec<Vec<T>>,
    /// Complete-data log-likelihood per draw.
    pub log_lik: Vec<T>,
    /// Acceptance rate of each mode's proposals.
    pub acceptance: Vec<f64>,
    pub coefficient_labels: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationSummary {
    pub cell: usize,
    pub index: Vec<usize>,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    pub ess: f64,
}

/// Linear-interpolation sample quantile of sorted data.
fn quantile_sorted(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let pos = q * (xs.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    xs[lo] + (xs[hi] - xs[lo]) * (pos - lo as f64)
}

impl<T: Scalar> PosteriorSamples<T> {
    pub fn n_draws(&self) -> usize {
        self.psi.len()
    }

    pub fn missing_trace(&self, j: usize) -> Vec<f64> {
        self.missing.iter().map(|d| d[j].f64()).collect()
    }

    pub fn posterior_mean_missing(&self) -> Vec<f64> {
        let n = self.n_draws().max(1) as f64;
        let mut acc = vec![0.0; self.missing_cells.len()];
        for d in &self.missing {
            for (a, v) in acc.iter_mut().zip(d) {
                *a += v.f64();
            }
        }
        acc.iter().map(|a| a / n).collect()
    }

    /// Posterior mean of each unit-trace mode covariance.
    pub fn posterior_mean_covariances(&self) -> Vec<DMatrix<T>> {
        let n = T::of_usize(self.covariances.len().max(1));
        let mut acc: Vec<DMatrix<T>> = self.dims.iter().map(|&m| DMatrix::zeros(m, m)).collect();
        for draw in &self.covariances {
            for (a, s) in acc.iter_mut().zip(draw) {
                *a += s;
            }
        }
        acc.into_iter().map(|a| a / n).collect()
    }

    pub fn imputation_summary(&self) -> Vec<ImputationSummary> {
        let means = self.posterior_mean_missing();
        self.missing_cells
            .iter()
            .enumerate()
            .map(|(j, &cell)| {
                let mut tr = self.missing_trace(j);
                let ess = effective_sample_size(&tr).value;
                tr.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                ImputationSummary {
                    cell,
                    index: crate::tensor::multi_index(&self.dims, cell),
                    mean: means[j],
                    lower: quantile_sorted(&tr, 0.025),
                    upper: quantile_sorted(&tr, 0.975),
                    ess,
                }
            })
            .collect()
    }

    /// One row per stored draw.
    pub fn write_traces_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["draw".to_string(), "psi".to_string(), "log_lik".to_string()];
        let store_covs = !self.covariances.is_empty();
        if store_covs {
            for (i, &m) in self.dims.iter().enumerate() {
                for a in 0..m {
                    for b in a..m {
                        header.push(format!("sigma{}_{}_{}", i + 1, a + 1, b + 1));
                    }
                }
            }
        }
        if let Some(first) = self.beta.first() {
            for c in 0..first.len() {
                header.push(match &self.coefficient_labels {
                    Some(l) => format!("beta[{}]", l[c]),
                    None => format!("beta{}", c + 1),
                });
            }
        }
        for &cell in &self.missing_cells {
            let idx: Vec<String> = crate::tensor::multi_index(&self.dims, cell)
                .iter()
                .map(|i| (i + 1).to_string())
                .collect();
            header.push(format!("y[{}]", idx.join(",")));
        }
        wtr.write_record(&header)?;
        for d in 0..self.n_draws() {
            let mut row = vec![(d + 1).to_string(), self.psi[d].f64().to_string(), self.log_lik[d].f64().to_string()];
            if store_covs {
                for s in &self.covariances[d] {
                    for a in 0..s.nrows() {
                        for b in a..s.ncols() {
                            row.push(s[(a, b)].f64().to_string());
                        }
                    }
                }
            }
            if let Some(b) = self.beta.get(d) {
                row.extend(b.iter().map(|x| x.f64().to_string()));
            }
            if let Some(mv) = self.missing.get(d) {
                row.extend(mv.iter().map(|x| x.f64().to_string()));
            }
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Posterior mean, 95% interval and effective sample size per imputed cell.
    /// Cells are identified by level labels when `levels` is given, else by 1-based indices.
    pub fn write_imputations_csv<W: Write>(
        &self,
        w: W,
        mode_names: Option<&[String]>,
        levels: Option<&[Vec<String>]>,
    ) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = match mode_names {
            Some(n) => n.to_vec(),
            None => (1..=self.dims.len()).map(|i| format!("i{}", i)).collect(),
        };
        header.extend(["mean", "q025", "q975", "ess"].map(String::from));
        wtr.write_record(&header)?;
        for s in self.imputation_summary() {
            let mut row: Vec<String> = s
                .index
                .iter()
                .enumerate()
                .map(|(mode, &i)| match levels {
                    Some(l) => l[mode][i].clone(),
                    None => (i + 1).to_string(),
                })
                .collect();
            row.extend([s.mean, s.lower, s.upper, s.ess].map(|x| x.to_string()));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Runs one chain and keeps every `thin`-th draw after burn-in.
pub fn run_chain<T: Scalar>(
    y: &MaskedTensor<T>,
    ranks: &[usize],
    design: Option<&Design<T>>,
    prior: &PriorSpec,
    config: &ChainConfig,
) -> Result<PosteriorSamples<T>> {
    let sampler = Sampler::new(y, ranks, design, prior, config)?;
    let mut state = sampler.initial_state(config.seed)?;
    let missing_cells = y.missing_indices();
    let n = config.expected_draws();
    let mut out = PosteriorSamples {
        dims: y.dims().to_vec(),
        ranks: ranks.to_vec(),
        covariances: Vec::with_capacity(if config.store_covariances { n } else { 0 }),
        psi: Vec::with_capacity(n),
        beta: Vec::new(),
        missing_cells,
        missing: Vec::new(),
        log_lik: Vec::with_capacity(n),
        acceptance: vec![1.0; ranks.len()],
        coefficient_labels: design.map(|d| d.labels().to_vec()),
    };
    for it in 0..config.iters {
        sampler.sweep(&mut state)?;
        if it >= config.burnin && (it + 1 - config.burnin) % config.thin == 0 {
            let (normalized, psi) = normalize_scales(&state.covs);
            if config.store_covariances {
                out.covariances.push(normalized.materialize_all());
            }
            out.psi.push(psi);
            out.log_lik.push(sampler.log_lik(&state)?);
            if let Some(b) = &state.beta {
                out.beta.push(b.clone());
            }
            if !out.missing_cells.is_empty() {
                out.missing
                    .push(out.missing_cells.iter().map(|&c| state.values.data()[c]).collect());
            }
        }
    }
    Ok(out)
}
