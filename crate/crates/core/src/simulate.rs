//! Synthetic arrays from a known separable model.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::bayes::sample_wishart;
use crate::covariance::{sqrt_spd, symmetrize, CovarianceSet, ModeCovariance};
use crate::error::{Result, SfaError};
use crate::famodel::{check_ranks, SfaModel};
use crate::meanmodel::{build_pp_design, Constraint, Design, PpLevels};
use crate::scalar::Scalar;
use crate::tensor::DenseTensor;

#[derive(Debug, Clone)]
pub struct SimulateOptions<T: Scalar> {
    /// Loadings are `N(0, loading_scale²)`.
    pub loading_scale: f64,
    /// Uniquenesses (and diagonal variances) are drawn uniformly from this range.
    pub d2_range: (f64, f64),
    /// Unstructured modes are `W / df` with `W ~ Wishart(df, I)`, `df = m + extra_df`.
    pub extra_df: usize,
    /// Optional mean `design · beta`.
    pub mean: Option<(Design<T>, DVector<T>)>,
}

impl<T: Scalar> Default for SimulateOptions<T> {
    fn default() -> Self {
        Self {
            loading_scale: 1.0,
            d2_range: (0.5, 1.5),
            extra_df: 5,
            mean: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Simulated<T: Scalar> {
    pub data: DenseTensor<T>,
    pub truth: SfaModel<T>,
}

/// Random mode covariances with the given ranks.
pub fn random_covariances<T: Scalar, R: Rng + ?Sized>(
    dims: &[usize],
    ranks: &[usize],
    opts: &SimulateOptions<T>,
    rng: &mut R,
) -> Result<CovarianceSet<T>> {
    check_ranks(ranks, dims)?;
    let (lo, hi) = opts.d2_range;
    if !(lo > 0.0 && hi >= lo) {
        return Err(SfaError::InvalidArgument("d2 range must be positive and ordered".into()));
    }
    let mut modes = Vec::with_capacity(dims.len());
    for (&m, &k) in dims.iter().zip(ranks) {
        let d2 = |rng: &mut R| {
            DVector::from_fn(m, |_, _| T::of(if hi > lo { rng.sample(Uniform::new(lo, hi).unwrap()) } else { lo }))
        };
        modes.push(if k == m {
            let df = (m + opts.extra_df) as f64;
            let w = sample_wishart(df, &DMatrix::<T>::identity(m, m), rng)?;
            ModeCovariance::Unstructured {
                sigma: symmetrize(w / T::of(df)),
            }
        } else if k == 0 {
            ModeCovariance::Diagonal { d2: d2(rng) }
        } else {
            let loadings = DMatrix::from_fn(m, k, |_, _| {
                T::of(opts.loading_scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            });
            ModeCovariance::FactorAnalytic { loadings, d2: d2(rng) }
        });
    }
    Ok(CovarianceSet::new(modes))
}

/// Draws `mean + Z ×₁ Σ₁^{1/2} ⋯ ×_K Σ_K^{1/2}` with `Z` i.i.d. standard normal.
pub fn sample_array<T: Scalar, R: Rng + ?Sized>(
    covs: &CovarianceSet<T>,
    mean: Option<&DenseTensor<T>>,
    rng: &mut R,
) -> Result<DenseTensor<T>> {
    let dims = covs.dims();
    let z = DenseTensor::from_fn(dims.clone(), |_| {
        T::of(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
    })?;
    let roots = covs
        .modes
        .iter()
        .map(|c| sqrt_spd(&c.materialize()))
        .collect::<Result<Vec<_>>>()?;
    let mut e = z.multilinear(&roots.iter().map(Some).collect::<Vec<_>>())?;
    let s = covs.scale_or_one();
    if s != T::one() {
        e = e.scale(s.sqrt());
    }
    match mean {
        Some(m) => e.add(m),
        None => Ok(e),
    }
}

/// Ground-truth covariances (and mean) plus one array drawn from them.
pub fn simulate_sfa<T: Scalar>(dims: &[usize], ranks: &[usize], seed: u64, opts: &SimulateOptions<T>) -> Result<Simulated<T>> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(SfaError::Shape(format!("invalid dimensions {:?}", dims)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let covs = random_covariances(dims, ranks, opts, &mut rng)?;
    let (mean, beta) = match &opts.mean {
        Some((design, beta)) => {
            if design.dims() != dims {
                return Err(SfaError::Shape("mean design dims do not match".into()));
            }
            (Some(design.mean(beta)?), Some(beta.clone()))
        }
        None => (None, None),
    };
    let data = sample_array(&covs, mean.as_ref(), &mut rng)?;
    Ok(Simulated {
        data,
        truth: SfaModel::new(ranks.to_vec(), covs, beta)?,
    })
}

/// Levels for a mortality-shaped array: `nc` countries, `nt` periods, `ns` sexes
/// and the standard abridged age groups (0, 1, 5, 10, ..., 105 truncated to `na`).
pub fn mortality_levels(nc: usize, nt: usize, ns: usize, na: usize) -> PpLevels {
    let mut ages = vec![0.0, 1.0];
    let mut a = 5.0;
    while ages.len() < na {
        ages.push(a);
        a += 5.0;
    }
    ages.truncate(na);
    PpLevels {
        countries: (1..=nc).map(|i| format!("c{}", i)).collect(),
        periods: (1..=nt).map(|i| format!("t{}", i)).collect(),
        sexes: (1..=ns).map(|i| format!("s{}", i)).collect(),
        ages,
    }
}

/// A log-mortality-like mean: high infant level, a dip through childhood and a
/// roughly linear rise with age, with small country/period/sex shifts.
pub fn mortality_mean<T: Scalar, R: Rng + ?Sized>(levels: &PpLevels, rng: &mut R) -> Result<(Design<T>, DVector<T>)> {
    let pp = build_pp_design::<T>(levels, Constraint::Corner)?;
    let mut beta = DVector::<T>::zeros(pp.design.ncols());
    let normal = |rng: &mut R, sd: f64| sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
    // Base polynomial per segment (age rescaled to [0, 1]).
    let base: [(&str, f64); 8] = [
        ("phi0:", -4.5),
        ("phi1:", -7.0),
        ("phi11:", -20.0),
        ("phi12:", 80.0),
        ("phi2:", -8.5),
        ("phi21:", 9.0),
        ("phi22:", 0.0),
        ("phi23:", 0.0),
    ];
    for (c, label) in pp.design.labels().iter().enumerate() {
        let (piece, value) = base.iter().find(|(p, _)| label.starts_with(p)).copied().unwrap_or(("", 0.0));
        let is_country = label.contains(":country=");
        let b = if is_country {
            value + normal(rng, 0.2 * (1.0 + value.abs() * 0.02))
        } else if piece == "phi0:" || piece == "phi1:" || piece == "phi2:" {
            normal(rng, 0.15)
        } else {
            normal(rng, 0.05)
        };
        beta[c] = T::of(b);
    }
    Ok((pp.design, beta))
}
