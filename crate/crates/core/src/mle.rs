//! Maximum-likelihood estimation by block coordinate ascent over the mode
//! covariances (and mean coefficients when a design is supplied).

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::covariance::{normalize_scales, sym_factors, CovarianceSet, ModeCovariance, SymFactors};
use crate::error::{Result, SfaError};
use crate::famodel::{check_ranks, d2_floor, fa_ml_single_from, log_density_with, FaFit, FaOptions, SfaModel, SfaModelRecord};
use crate::meanmodel::{gls_fit_with, Design};
use crate::scalar::Scalar;
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleConfig {
    /// Relative log-likelihood change that counts as convergence.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Number of trailing sweeps inspected by the divergence detector.
    pub divergence_window: usize,
    /// Minimum per-sweep increase for a sweep to count towards divergence.
    pub divergence_min_increment: f64,
    /// Seeds the perturbation of the initial loadings.
    pub seed: u64,
    pub fa: FaOptions,
}

impl Default for MleConfig {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_sweeps: 500,
            divergence_window: 10,
            divergence_min_increment: 1e-3,
            seed: 0,
            fa: FaOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MleFitResult<T: Scalar> {
    pub model: SfaModel<T>,
    /// Log-likelihood at the starting values.
    pub initial_log_lik: T,
    /// Log-likelihood after each sweep.
    pub log_lik_trace: Vec<T>,
    pub converged: bool,
    pub diverged: bool,
    pub sweeps: usize,
    /// Number of variance parameters held at their floor, summed over all updates.
    pub clamp_events: usize,
}

impl<T: Scalar> MleFitResult<T> {
    pub fn log_lik(&self) -> T {
        self.log_lik_trace.last().copied().unwrap_or(self.initial_log_lik)
    }

    /// The fitted model with unit-trace mode covariances and the total scale in `ψ`.
    pub fn normalized_model(&self) -> SfaModel<T> {
        let (covs, _) = normalize_scales(&self.model.covs);
        SfaModel {
            covs,
            ..self.model.clone()
        }
    }

    pub fn to_record(&self, coefficient_labels: Option<&[String]>) -> MleFitRecord {
        MleFitRecord {
            model: self.normalized_model().to_record(),
            coefficient_labels: coefficient_labels.map(|l| l.to_vec()),
            log_lik: self.log_lik().f64(),
            log_lik_trace: self.log_lik_trace.iter().map(|x| x.f64()).collect(),
            converged: self.converged,
            diverged: self.diverged,
            sweeps: self.sweeps,
            clamp_events: self.clamp_events,
        }
    }
}

/// JSON form of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleFitRecord {
    pub model: SfaModelRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coefficient_labels: Option<Vec<String>>,
    pub log_lik: f64,
    pub log_lik_trace: Vec<f64>,
    pub converged: bool,
    pub diverged: bool,
    pub sweeps: usize,
    pub clamp_events: usize,
}

/// Diagonal update from the mode matricization of the array standardized in
/// every other mode. Returns the variances and the number clamped at the floor.
pub fn update_diagonal<T: Scalar>(ytil: &DMatrix<T>) -> (DVector<T>, usize) {
    let w = T::one() / T::of_usize(ytil.ncols());
    let raw = DVector::from_iterator(ytil.nrows(), ytil.row_iter().map(|r| r.norm_squared() * w));
    let mean = raw.sum() / T::of_usize(raw.len());
    let floor = d2_floor(&DMatrix::from_diagonal_element(1, 1, mean));
    let mut clamped = 0;
    let d2 = raw.map(|x| {
        if x < floor {
            clamped += 1;
            floor
        } else {
            x
        }
    });
    (d2, clamped)
}

/// Unstructured update `(m_i/m) Ỹ Ỹᵀ`; requires more columns than rows and a
/// full-rank result.
pub fn update_unstructured<T: Scalar>(ytil: &DMatrix<T>, mode: usize) -> Result<DMatrix<T>> {
    let (mi, rest) = ytil.shape();
    if mi >= rest {
        return Err(SfaError::IllDefinedUpdate {
            mode: mode + 1,
            reason: format!("dimension {} is not below the product {} of the other dimensions", mi, rest),
        });
    }
    let sigma = crate::covariance::symmetrize(ytil * ytil.transpose() / T::of_usize(rest));
    sym_factors(&sigma).map_err(|e| SfaError::IllDefinedUpdate {
        mode: mode + 1,
        reason: format!("scatter matrix is rank deficient ({})", e),
    })?;
    Ok(sigma)
}

/// Factor-analytic update: single-mode factor analysis of `Ỹ Ỹᵀ` with effective
/// sample size `m/m_i`, warm-started at `init_d2`.
pub fn update_factor<T: Scalar>(
    ytil: &DMatrix<T>,
    k: usize,
    init_d2: Option<&DVector<T>>,
    opts: &FaOptions,
) -> Result<FaFit<T>> {
    let s = ytil * ytil.transpose();
    fa_ml_single_from(&s, T::of_usize(ytil.ncols()), k, init_d2, opts)
}

/// Optimal covariance for one mode given the others. `resid` is the centered
/// array; `factors` holds the current mode factors.
pub fn mode_update<T: Scalar>(
    resid: &DenseTensor<T>,
    factors: &[SymFactors<T>],
    current: &ModeCovariance<T>,
    mode: usize,
    rank: usize,
    opts: &FaOptions,
) -> Result<(ModeCovariance<T>, usize)> {
    let ytil = crate::covariance::standardize_with(resid, factors, Some(mode))?.matricize(mode)?;
    let mi = ytil.nrows();
    if rank == 0 {
        let (d2, c) = update_diagonal(&ytil);
        Ok((ModeCovariance::Diagonal { d2 }, c))
    } else if rank == mi {
        Ok((ModeCovariance::Unstructured {
            sigma: update_unstructured(&ytil, mode)?,
        }, 0))
    } else {
        let init = match current {
            ModeCovariance::FactorAnalytic { d2, .. } | ModeCovariance::Diagonal { d2 } => Some(d2),
            ModeCovariance::Unstructured { .. } => None,
        };
        let fit = update_factor(&ytil, rank, init, opts)?;
        let clamped = fit.clamped;
        Ok((ModeCovariance::FactorAnalytic {
            loadings: fit.loadings,
            d2: fit.d2,
        }, clamped))
    }
}

fn check_updates_defined(ranks: &[usize], dims: &[usize]) -> Result<()> {
    let m: usize = dims.iter().product();
    for (i, (&k, &mi)) in ranks.iter().zip(dims).enumerate() {
        let rest = m / mi;
        if k == mi && mi > 1 && mi >= rest {
            return Err(SfaError::IllDefinedUpdate {
                mode: i + 1,
                reason: format!("unstructured covariance needs dimension {} below {}", mi, rest),
            });
        }
        if k > 0 && k < mi && k >= rest {
            return Err(SfaError::IllDefinedUpdate {
                mode: i + 1,
                reason: format!("rank {} is not below the {} available columns", k, rest),
            });
        }
    }
    Ok(())
}

/// Scale-aware starting covariances.
pub fn initial_covariances<T: Scalar>(resid: &DenseTensor<T>, ranks: &[usize], seed: u64) -> Result<CovarianceSet<T>> {
    let k = resid.order();
    let overall = resid.norm_squared() / T::of_usize(resid.len());
    if !(overall > T::zero()) {
        return Err(SfaError::InvalidArgument("array is identically zero".into()));
    }
    let per_mode = overall.powf(T::one() / T::of_usize(k));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut modes = Vec::with_capacity(k);
    for (i, &rank) in ranks.iter().enumerate() {
        let mat = resid.matricize(i)?;
        let w = T::one() / T::of_usize(mat.ncols());
        let floor = per_mode * T::of(crate::covariance::D2_FLOOR_FRACTION);
        let d2 = DVector::from_iterator(
            mat.nrows(),
            mat.row_iter().map(|r| (r.norm_squared() * w / overall * per_mode).max(floor)),
        );
        let mi = d2.len();
        let avg = d2.sum() / T::of_usize(mi);
        modes.push(if rank == 0 {
            ModeCovariance::Diagonal { d2 }
        } else if rank == mi {
            ModeCovariance::Unstructured {
                sigma: DMatrix::from_diagonal_element(mi, mi, avg),
            }
        } else {
            let scale = T::of(1e-3) * avg.sqrt();
            let loadings = DMatrix::from_fn(mi, rank, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::of(z) * scale
            });
            ModeCovariance::FactorAnalytic { loadings, d2 }
        });
    }
    Ok(CovarianceSet::new(modes))
}

/// Block coordinate ascent from the default starting values.
pub fn fit_mle<T: Scalar>(
    y: &DenseTensor<T>,
    ranks: &[usize],
    design: Option<&Design<T>>,
    config: &MleConfig,
) -> Result<MleFitResult<T>> {
    check_ranks(ranks, y.dims())?;
    check_updates_defined(ranks, y.dims())?;
    let beta0 = match design {
        Some(d) => Some(gls_fit_with(y, d, None)?),
        None => None,
    };
    let resid = residual(y, design, beta0.as_ref())?;
    let covs = initial_covariances(&resid, ranks, config.seed)?;
    fit_mle_from(y, ranks, design, covs, beta0, config)
}

fn residual<T: Scalar>(y: &DenseTensor<T>, design: Option<&Design<T>>, beta: Option<&DVector<T>>) -> Result<DenseTensor<T>> {
    match (design, beta) {
        (Some(d), Some(b)) => y.sub(&d.mean(b)?),
        _ => Ok(y.clone()),
    }
}

/// Block coordinate ascent from given starting covariances (and coefficients).
pub fn fit_mle_from<T: Scalar>(
    y: &DenseTensor<T>,
    ranks: &[usize],
    design: Option<&Design<T>>,
    start: CovarianceSet<T>,
    beta_start: Option<DVector<T>>,
    config: &MleConfig,
) -> Result<MleFitResult<T>> {
    check_ranks(ranks, y.dims())?;
    check_updates_defined(ranks, y.dims())?;
    start.check_dims(y.dims())?;
    if let Some(d) = design {
        if d.dims() != y.dims() {
            return Err(SfaError::Shape("design dims do not match the array".into()));
        }
    }
    let mut covs = CovarianceSet::new(start.modes);
    let mut beta = match (design, beta_start) {
        (Some(_), Some(b)) => Some(b),
        (Some(d), None) => Some(gls_fit_with(y, d, None)?),
        (None, _) => None,
    };
    let mut factors = covs
        .modes
        .iter()
        .map(|c| sym_factors(&c.materialize()))
        .collect::<Result<Vec<_>>>()?;
    let mut resid = residual(y, design, beta.as_ref())?;
    let initial = log_density_with(&resid, &factors, T::one())?;

    let mut trace: Vec<T> = Vec::new();
    let mut clamp_events = 0;
    let mut converged = false;
    let mut diverged = false;
    let mut prev = initial;
    let mut sweeps = 0;
    'outer: while sweeps < config.max_sweeps {
        sweeps += 1;
        if let Some(d) = design {
            let b = gls_fit_with(y, d, Some(&factors))?;
            resid = y.sub(&d.mean(&b)?)?;
            beta = Some(b);
        }
        for i in 0..covs.order() {
            let updated = mode_update(&resid, &factors, &covs.modes[i], i, ranks[i], &config.fa)
                .and_then(|(c, n)| sym_factors(&c.materialize()).map(|f| (c, n, f)));
            match updated {
                Ok((c, n, f)) => {
                    covs.modes[i] = c;
                    factors[i] = f;
                    clamp_events += n;
                }
                Err(e) if e.is_numerical() => {
                    log::warn!("stopping after sweep {}: {}", sweeps, e);
                    diverged = true;
                    break 'outer;
                }
                Err(e) => return Err(e),
            }
        }
        let ll = log_density_with(&resid, &factors, T::one())?;
        trace.push(ll);
        if (ll - prev).abs() <= T::of(config.tol) * ll.abs().max(T::one()) {
            converged = true;
            break;
        }
        prev = ll;
        if is_diverging(&trace, initial, config) {
            diverged = true;
            break;
        }
    }
    let model = SfaModel::new(ranks.to_vec(), covs, beta)?;
    Ok(MleFitResult {
        model,
        initial_log_lik: initial,
        log_lik_trace: trace,
        converged,
        diverged,
        sweeps,
        clamp_events,
    })
}

/// Sustained, non-shrinking log-likelihood increases over the trailing window.
fn is_diverging<T: Scalar>(trace: &[T], initial: T, config: &MleConfig) -> bool {
    let w = config.divergence_window;
    if w == 0 || trace.len() < w + 1 {
        return false;
    }
    let mut full = Vec::with_capacity(trace.len() + 1);
    full.push(initial);
    full.extend_from_slice(trace);
    let inc: Vec<T> = full.windows(2).map(|p| p[1] - p[0]).collect();
    let tail = &inc[inc.len() - w..];
    tail.iter().all(|&d| d > T::of(config.divergence_min_increment)) && tail.windows(2).all(|p| p[1] >= p[0])
}
