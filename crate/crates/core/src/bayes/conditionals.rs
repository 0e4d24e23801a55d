//! Full-conditional samplers for the mode covariance parameters.
//!
//! Every sampler takes the mode matricization `Ỹ` (`m_i × n`, `n = m/m_i`) of the
//! residual array standardized in all other modes.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};

use super::PriorSpec;
use crate::error::{Result, SfaError};
use crate::scalar::Scalar;

pub(crate) fn std_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> T {
    let z: f64 = StandardNormal.sample(rng);
    T::of(z)
}

/// Gamma draw with the shape/rate parameterization.
pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    Gamma::new(shape, 1.0 / rate)
        .expect("gamma parameters are positive")
        .sample(rng)
}

fn cholesky_lower<T: Scalar>(m: &DMatrix<T>) -> Result<DMatrix<T>> {
    Ok(m.clone()
        .cholesky()
        .ok_or(SfaError::Singular { ratio: 0.0 })?
        .unpack())
}

fn spd_inverse<T: Scalar>(m: &DMatrix<T>) -> Result<DMatrix<T>> {
    let inv = m.clone().cholesky().ok_or(SfaError::Singular { ratio: 0.0 })?.inverse();
    Ok(crate::covariance::symmetrize(inv))
}

/// Lower-triangular Bartlett factor `A` with `A Aᵀ ~ Wishart(df, I)`.
fn bartlett<T: Scalar, R: Rng + ?Sized>(p: usize, df: f64, rng: &mut R) -> DMatrix<T> {
    let mut a = DMatrix::zeros(p, p);
    for i in 0..p {
        let chi: f64 = ChiSquared::new(df - i as f64).expect("degrees of freedom exceed dimension").sample(rng);
        a[(i, i)] = T::of(chi.sqrt());
        for j in 0..i {
            a[(i, j)] = std_normal(rng);
        }
    }
    a
}

/// Wishart draw with `E[W] = df · scale` by the Bartlett decomposition.
pub fn sample_wishart<T: Scalar, R: Rng + ?Sized>(df: f64, scale: &DMatrix<T>, rng: &mut R) -> Result<DMatrix<T>> {
    let p = scale.nrows();
    if !(df > p as f64 - 1.0) {
        return Err(SfaError::InvalidArgument(format!(
            "Wishart degrees of freedom {} must exceed {}",
            df,
            p as f64 - 1.0
        )));
    }
    let l = cholesky_lower(scale)?;
    let la = l * bartlett::<T, R>(p, df, rng);
    Ok(crate::covariance::symmetrize(&la * la.transpose()))
}

/// Diagonal mode: independent gamma draws of the precisions, returned as variances.
pub fn sample_diagonal_fc<T: Scalar, R: Rng + ?Sized>(ytil: &DMatrix<T>, prior: &PriorSpec, rng: &mut R) -> DVector<T> {
    let n = ytil.ncols() as f64;
    let shape = 0.5 * (prior.nu0 + n);
    DVector::from_iterator(
        ytil.nrows(),
        ytil.row_iter().map(|r| {
            let rate = 0.5 * (prior.nu0 * prior.d0sq + r.norm_squared().f64());
            T::of(1.0 / sample_gamma(shape, rate, rng))
        }),
    )
}

/// Unstructured mode: precision drawn from `Wishart(κ + n, (c I + Ỹ Ỹᵀ)⁻¹)`, returned inverted.
pub fn sample_unstructured_fc<T: Scalar, R: Rng + ?Sized>(
    ytil: &DMatrix<T>,
    mode: usize,
    prior: &PriorSpec,
    rng: &mut R,
) -> Result<DMatrix<T>> {
    let p = ytil.nrows();
    let df = prior.kappa_for(mode, p) + ytil.ncols() as f64;
    let c = T::of(prior.inv_scale_for(mode));
    let post = DMatrix::from_diagonal_element(p, p, c) + ytil * ytil.transpose();
    // Σ = L A⁻ᵀ A⁻¹ Lᵀ with L Lᵀ = cI + S.
    let l = cholesky_lower(&crate::covariance::symmetrize(post))?;
    let a = bartlett::<T, R>(p, df, rng);
    let a_inv_t = a
        .transpose()
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or(SfaError::Singular { ratio: 0.0 })?;
    let f = l * a_inv_t;
    Ok(crate::covariance::symmetrize(&f * f.transpose()))
}

/// Law of the latent factors given loadings: columns of `Z` are independent
/// `N(φ Λᵀ D⁻² ỹ_b, φ)` with `φ = (Λᵀ D⁻² Λ + I)⁻¹`. Returns `(mean, φ)`.
pub fn latent_conditional<T: Scalar>(
    ytil: &DMatrix<T>,
    loadings: &DMatrix<T>,
    d2: &DVector<T>,
) -> Result<(DMatrix<T>, DMatrix<T>)> {
    let k = loadings.ncols();
    let mut scaled = loadings.clone();
    for (j, mut row) in scaled.row_iter_mut().enumerate() {
        row /= d2[j];
    }
    let prec = loadings.transpose() * &scaled + DMatrix::identity(k, k);
    let phi = spd_inverse(&prec)?;
    let mean = &phi * scaled.transpose() * ytil;
    Ok((mean, phi))
}

/// Law of the loadings given latent factors: rows are independent
/// `N(ỹ_j Zᵀ A⁻¹, d_j² A⁻¹)` with `A = Z Zᵀ + I`. Returns `(mean, A⁻¹)`.
pub fn loadings_conditional<T: Scalar>(ytil: &DMatrix<T>, z: &DMatrix<T>) -> Result<(DMatrix<T>, DMatrix<T>)> {
    let k = z.nrows();
    let a_inv = spd_inverse(&(z * z.transpose() + DMatrix::identity(k, k)))?;
    let mean = ytil * z.transpose() * &a_inv;
    Ok((mean, a_inv))
}

/// Gamma `(shape, rate)` of each uniqueness precision given factors and loadings.
pub fn precision_conditional<T: Scalar>(
    ytil: &DMatrix<T>,
    z: &DMatrix<T>,
    loadings: &DMatrix<T>,
    prior: &PriorSpec,
) -> Vec<(f64, f64)> {
    let n = ytil.ncols() as f64;
    let k = loadings.ncols() as f64;
    let shape = 0.5 * (prior.nu0 + n + k);
    let resid = ytil - loadings * z;
    (0..ytil.nrows())
        .map(|j| {
            let jj = resid.row(j).norm_squared().f64();
            let ll = loadings.row(j).norm_squared().f64();
            (shape, 0.5 * (prior.nu0 * prior.d0sq + jj + ll))
        })
        .collect()
}

pub fn draw_latent<T: Scalar, R: Rng + ?Sized>(
    ytil: &DMatrix<T>,
    loadings: &DMatrix<T>,
    d2: &DVector<T>,
    rng: &mut R,
) -> Result<DMatrix<T>> {
    let (mean, phi) = latent_conditional(ytil, loadings, d2)?;
    let l = cholesky_lower(&phi)?;
    let noise = DMatrix::from_fn(mean.nrows(), mean.ncols(), |_, _| std_normal::<T, R>(rng));
    Ok(mean + l * noise)
}

pub fn draw_loadings<T: Scalar, R: Rng + ?Sized>(
    ytil: &DMatrix<T>,
    z: &DMatrix<T>,
    d2: &DVector<T>,
    rng: &mut R,
) -> Result<DMatrix<T>> {
    let (mean, a_inv) = loadings_conditional(ytil, z)?;
    let l = cholesky_lower(&a_inv)?;
    let k = z.nrows();
    let mut out = mean;
    for j in 0..out.nrows() {
        let xi = DVector::from_fn(k, |_, _| std_normal::<T, R>(rng));
        let step = &l * xi * d2[j].sqrt();
        for c in 0..k {
            out[(j, c)] += step[c];
        }
    }
    Ok(out)
}

/// Factor-analytic mode: latent draw, loadings given latent, latent redraw, then
/// uniquenesses given latent and loadings.
pub fn sample_factor_fc<T: Scalar, R: Rng + ?Sized>(
    ytil: &DMatrix<T>,
    loadings: &DMatrix<T>,
    d2: &DVector<T>,
    prior: &PriorSpec,
    rng: &mut R,
) -> Result<(DMatrix<T>, DVector<T>)> {
    let z = draw_latent(ytil, loadings, d2, rng)?;
    let new_loadings = draw_loadings(ytil, &z, d2, rng)?;
    let z = draw_latent(ytil, &new_loadings, d2, rng)?;
    let params = precision_conditional(ytil, &z, &new_loadings, prior);
    let new_d2 = DVector::from_iterator(
        params.len(),
        params.iter().map(|&(shape, rate)| T::of(1.0 / sample_gamma(shape, rate, rng))),
    );
    Ok((new_loadings, new_d2))
}

/// Log density, up to a constant, of the loadings prior with the uniquenesses
/// integrated out: `Σ_j −((k+ν₀)/2) log(ν₀d₀² + ‖Λ_j‖²)`.
pub fn loadings_log_prior<T: Scalar>(loadings: &DMatrix<T>, prior: &PriorSpec) -> f64 {
    let k = loadings.ncols() as f64;
    loadings
        .row_iter()
        .map(|r| -0.5 * (k + prior.nu0) * (prior.nu0 * prior.d0sq + r.norm_squared().f64()).ln())
        .sum()
}

/// Log density of the loadings prior given the uniquenesses: rows `N(0, d_j² I)`.
pub fn loadings_log_prior_given<T: Scalar>(loadings: &DMatrix<T>, d2: &DVector<T>) -> f64 {
    let k = loadings.ncols() as f64;
    loadings
        .row_iter()
        .zip(d2.iter())
        .map(|(r, &d)| {
            let d = d.f64();
            -0.5 * k * (2.0 * std::f64::consts::PI * d).ln() - 0.5 * r.norm_squared().f64() / d
        })
        .sum()
}
