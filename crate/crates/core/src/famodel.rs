//! The separable factor model: likelihood evaluation, single-mode factor
//! analysis by conditional maximization, and KL-optimal (pseudo-true) parameters.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::covariance::{
    set_factors, standardize_with, CovarianceSet, ModeCovariance, ModeCovarianceRecord, SymFactors,
    D2_FLOOR_FRACTION,
};
use crate::error::{Result, SfaError};
use crate::meanmodel::Design;
use crate::scalar::Scalar;
use crate::tensor::DenseTensor;

/// Eigenvalues of the standardized scatter at or below `1 + HEYWOOD_MARGIN`
/// contribute a zero loading column.
pub const HEYWOOD_MARGIN: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SfaModel<T: Scalar> {
    pub ranks: Vec<usize>,
    pub covs: CovarianceSet<T>,
    pub mean_beta: Option<DVector<T>>,
}

impl<T: Scalar> SfaModel<T> {
    pub fn new(ranks: Vec<usize>, covs: CovarianceSet<T>, mean_beta: Option<DVector<T>>) -> Result<Self> {
        check_ranks(&ranks, &covs.dims())?;
        for (i, (&k, c)) in ranks.iter().zip(&covs.modes).enumerate() {
            let ok = match c {
                ModeCovariance::Diagonal { .. } => k == 0,
                ModeCovariance::FactorAnalytic { loadings, .. } => k == loadings.ncols(),
                ModeCovariance::Unstructured { .. } => k == c.dim(),
            };
            // A 1-dimensional mode is both diagonal and unstructured.
            if !ok && !(c.dim() == 1 && k <= 1) {
                return Err(SfaError::InvalidRanks(format!(
                    "rank {} for mode {} does not match its covariance structure",
                    k,
                    i + 1
                )));
            }
        }
        Ok(Self {
            ranks,
            covs,
            mean_beta,
        })
    }

    pub fn dims(&self) -> Vec<usize> {
        self.covs.dims()
    }

    pub fn to_record(&self) -> SfaModelRecord {
        SfaModelRecord {
            dims: self.dims(),
            ranks: self.ranks.clone(),
            scale: self.covs.scale.map(|s| s.f64()),
            covariances: self.covs.modes.iter().map(|c| c.to_record()).collect(),
            beta: self.mean_beta.as_ref().map(|b| b.iter().map(|x| x.f64()).collect()),
        }
    }

    pub fn from_record(rec: &SfaModelRecord) -> Result<Self> {
        let modes = rec
            .covariances
            .iter()
            .map(ModeCovariance::from_record)
            .collect::<Result<Vec<_>>>()?;
        let covs = CovarianceSet {
            modes,
            scale: rec.scale.map(T::of),
        };
        if covs.dims() != rec.dims {
            return Err(SfaError::Schema("covariance dims disagree with the recorded dims".into()));
        }
        let beta = rec
            .beta
            .as_ref()
            .map(|b| DVector::from_iterator(b.len(), b.iter().map(|&x| T::of(x))));
        Self::new(rec.ranks.clone(), covs, beta)
    }
}

/// JSON form of a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SfaModelRecord {
    pub dims: Vec<usize>,
    pub ranks: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    pub covariances: Vec<ModeCovarianceRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
}

/// Checks `0 ≤ k_i ≤ m_i` for every mode.
pub fn check_ranks(ranks: &[usize], dims: &[usize]) -> Result<()> {
    if ranks.len() != dims.len() {
        return Err(SfaError::InvalidRanks(format!(
            "{} ranks given for a {}-way array",
            ranks.len(),
            dims.len()
        )));
    }
    for (i, (&k, &m)) in ranks.iter().zip(dims).enumerate() {
        if k > m {
            return Err(SfaError::InvalidRanks(format!(
                "rank {} exceeds dimension {} of mode {}",
                k,
                m,
                i + 1
            )));
        }
    }
    Ok(())
}

/// Log density of `vec(y)` under the model, optionally after subtracting the
/// design mean `X β`.
pub fn sfa_log_density<T: Scalar>(y: &DenseTensor<T>, model: &SfaModel<T>, design: Option<&Design<T>>) -> Result<T> {
    model.covs.check_dims(y.dims())?;
    let resid = match (design, &model.mean_beta) {
        (Some(d), Some(beta)) => y.sub(&d.mean(beta)?)?,
        (None, None) => y.clone(),
        (Some(_), None) => return Err(SfaError::InvalidArgument("design given but the model has no coefficients".into())),
        (None, Some(_)) => return Err(SfaError::InvalidArgument("model has coefficients but no design was given".into())),
    };
    let factors = set_factors(&model.covs)?;
    log_density_with(&resid, &factors, model.covs.scale_or_one())
}

/// Zero-mean log density from precomputed mode factors and a total scale.
pub fn log_density_with<T: Scalar>(resid: &DenseTensor<T>, factors: &[SymFactors<T>], scale: T) -> Result<T> {
    let m = T::of_usize(resid.len());
    let mut log_det = m * scale.ln();
    for (f, &mi) in factors.iter().zip(resid.dims()) {
        log_det += m / T::of_usize(mi) * f.log_det;
    }
    let quad = standardize_with(resid, factors, None)?.norm_squared() / scale;
    Ok(-(m * T::two_pi().ln() + log_det + quad) * T::of(0.5))
}

/// Single-mode factor-analysis objective `−(n/2) log|Σ| − ½ tr(Σ⁻¹ S)`.
pub fn fa_objective<T: Scalar>(s: &DMatrix<T>, n_eff: T, sigma: &DMatrix<T>) -> Result<T> {
    let chol = sigma.clone().cholesky().ok_or(SfaError::Singular { ratio: 0.0 })?;
    let log_det = chol.l_dirty().diagonal().iter().fold(T::zero(), |a, &d| a + d.ln()) * T::of(2.0);
    let tr = (chol.inverse() * s).trace();
    Ok(-(n_eff * log_det + tr) * T::of(0.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaOptions {
    /// Relative objective change below which iteration stops.
    pub tol: f64,
    pub max_iter: usize,
    /// Optional additional requirement on the per-observation gradient norm.
    pub grad_tol: Option<f64>,
}

impl Default for FaOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 1000,
            grad_tol: None,
        }
    }
}

impl FaOptions {
    /// Tight settings for computing exact optima.
    pub fn precise() -> Self {
        Self {
            tol: 1e-15,
            max_iter: 200_000,
            grad_tol: Some(1e-11),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaFit<T: Scalar> {
    pub loadings: DMatrix<T>,
    pub d2: DVector<T>,
    pub objective: T,
    pub iterations: usize,
    pub converged: bool,
    /// Norm of the objective gradient divided by `n_eff`.
    pub grad_norm: T,
    /// Loading columns zeroed because their eigenvalue did not exceed one.
    pub zeroed_columns: usize,
    /// Uniquenesses held at the floor.
    pub clamped: usize,
}

impl<T: Scalar> FaFit<T> {
    pub fn materialize(&self) -> DMatrix<T> {
        &self.loadings * self.loadings.transpose() + DMatrix::from_diagonal(&self.d2)
    }

    pub fn into_covariance(self) -> Result<ModeCovariance<T>> {
        if self.loadings.ncols() == 0 {
            ModeCovariance::diagonal(self.d2)
        } else {
            ModeCovariance::factor_analytic(self.loadings, self.d2)
        }
    }
}

/// Floor for uniquenesses relative to the average variance in `c`.
pub(crate) fn d2_floor<T: Scalar>(c: &DMatrix<T>) -> T {
    let avg = c.trace() / T::of_usize(c.nrows().max(1));
    let base = if avg > T::zero() { avg } else { T::one() };
    base * T::of(D2_FLOOR_FRACTION)
}

/// Maximum-likelihood `k`-factor fit to a scatter matrix `S` from `n_eff` observations.
pub fn fa_ml_single<T: Scalar>(s: &DMatrix<T>, n_eff: T, k: usize, opts: &FaOptions) -> Result<FaFit<T>> {
    fa_ml_single_from(s, n_eff, k, None, opts)
}

/// As [`fa_ml_single`], starting the uniquenesses at `init_d2` when given.
pub fn fa_ml_single_from<T: Scalar>(
    s: &DMatrix<T>,
    n_eff: T,
    k: usize,
    init_d2: Option<&DVector<T>>,
    opts: &FaOptions,
) -> Result<FaFit<T>> {
    let p = s.nrows();
    if !s.is_square() || p == 0 {
        return Err(SfaError::Shape("scatter matrix must be square and nonempty".into()));
    }
    if k >= p {
        return Err(SfaError::InvalidRanks(format!("factor rank {} must be below dimension {}", k, p)));
    }
    if !(n_eff > T::zero()) {
        return Err(SfaError::InvalidArgument("effective sample size must be positive".into()));
    }
    let c = crate::covariance::symmetrize(s / n_eff);
    let floor = d2_floor(&c);

    if k == 0 {
        let mut clamped = 0;
        let d2 = c.diagonal().map(|x| {
            if x < floor {
                clamped += 1;
                floor
            } else {
                x
            }
        });
        let sigma = DMatrix::from_diagonal(&d2);
        return Ok(FaFit {
            objective: fa_objective(s, n_eff, &sigma)?,
            loadings: DMatrix::zeros(p, 0),
            grad_norm: T::zero(),
            d2,
            iterations: 0,
            converged: true,
            zeroed_columns: 0,
            clamped,
        });
    }

    let mut psi = match init_d2 {
        Some(d) if d.len() == p => d.map(|x| x.max(floor)),
        Some(_) => return Err(SfaError::Shape("initial uniquenesses have the wrong length".into())),
        None => default_start(&c, k, floor),
    };

    let mut prev: Option<T> = None;
    let mut iterations = 0;
    let mut converged = false;
    let mut loadings = DMatrix::zeros(p, k);
    let mut zeroed = 0;
    let mut p_mat = DMatrix::zeros(p, p);
    let mut objective = T::zero();
    while iterations < opts.max_iter {
        iterations += 1;
        (loadings, zeroed) = lambda_step(&c, &psi, k);

        // Sequential uniqueness updates with rank-one maintenance of Σ⁻¹ and Σ⁻¹CΣ⁻¹.
        let sigma = &loadings * loadings.transpose() + DMatrix::from_diagonal(&psi);
        p_mat = spd_inverse(&sigma)?;
        let mut m_mat = &p_mat * &c * &p_mat;
        for j in 0..p {
            let a = p_mat[(j, j)];
            let b = m_mat[(j, j)];
            let target = (psi[j] + (b - a) / (a * a)).max(floor);
            let omega = target - psi[j];
            if omega == T::zero() {
                continue;
            }
            psi[j] = target;
            let gamma = omega / (T::one() + omega * a);
            let sv = p_mat.column(j).clone_owned();
            let tv = m_mat.column(j).clone_owned();
            p_mat -= &sv * sv.transpose() * gamma;
            m_mat -= (&sv * tv.transpose() + &tv * sv.transpose()) * gamma;
            m_mat += &sv * sv.transpose() * (gamma * gamma * b);
        }

        let sigma = &loadings * loadings.transpose() + DMatrix::from_diagonal(&psi);
        objective = fa_objective(&c, T::one(), &sigma)?;
        let settled = prev.is_some_and(|p| (objective - p).abs() <= T::of(opts.tol) * objective.abs().max(T::one()));
        prev = Some(objective);
        if settled {
            let grad_ok = match opts.grad_tol {
                Some(g) => fa_gradient_norm(&c, &loadings, &psi, floor)? <= T::of(g),
                None => true,
            };
            if grad_ok {
                converged = true;
                break;
            }
        }
    }
    let _ = p_mat;
    let grad_norm = fa_gradient_norm(&c, &loadings, &psi, floor)?;
    let clamped = psi.iter().filter(|&&x| x <= floor).count();
    Ok(FaFit {
        objective: objective * n_eff,
        loadings,
        d2: psi,
        iterations,
        converged,
        grad_norm,
        zeroed_columns: zeroed,
        clamped,
    })
}

fn default_start<T: Scalar>(c: &DMatrix<T>, k: usize, floor: T) -> DVector<T> {
    let p = c.nrows();
    let shrink = T::one() - T::of_usize(k) / T::of_usize(2 * p);
    if let Some(chol) = c.clone().cholesky() {
        let inv = chol.inverse();
        let d = inv.diagonal();
        if d.iter().all(|&x| x > T::zero() && x.is_finite()) {
            return d.map(|x| (shrink / x).max(floor));
        }
    }
    c.diagonal().map(|x| (x * T::of(0.5)).max(floor))
}

/// Optimal loadings for fixed uniquenesses.
fn lambda_step<T: Scalar>(c: &DMatrix<T>, psi: &DVector<T>, k: usize) -> (DMatrix<T>, usize) {
    let p = c.nrows();
    let root = psi.map(|x| x.sqrt());
    let scaled = DMatrix::from_fn(p, p, |a, b| c[(a, b)] / (root[a] * root[b]));
    let eig = SymmetricEigen::new(crate::covariance::symmetrize(scaled));
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut loadings = DMatrix::zeros(p, k);
    let mut zeroed = 0;
    for (col, &e) in order.iter().take(k).enumerate() {
        let theta = eig.eigenvalues[e];
        if theta <= T::one() + T::of(HEYWOOD_MARGIN) {
            zeroed += 1;
            continue;
        }
        let w = (theta - T::one()).sqrt();
        for r in 0..p {
            loadings[(r, col)] = root[r] * eig.eigenvectors[(r, e)] * w;
        }
    }
    (loadings, zeroed)
}

fn spd_inverse<T: Scalar>(m: &DMatrix<T>) -> Result<DMatrix<T>> {
    let chol = m.clone().cholesky().ok_or(SfaError::Singular { ratio: 0.0 })?;
    Ok(crate::covariance::symmetrize(chol.inverse()))
}

/// Gradient norm of `−½ log|Σ| − ½ tr(Σ⁻¹C)` in `(Λ, d²)`, ignoring uniquenesses held at the floor.
fn fa_gradient_norm<T: Scalar>(c: &DMatrix<T>, loadings: &DMatrix<T>, psi: &DVector<T>, floor: T) -> Result<T> {
    let sigma = loadings * loadings.transpose() + DMatrix::from_diagonal(psi);
    let p = spd_inverse(&sigma)?;
    let g = (&p * c * &p - &p) * T::of(0.5);
    let gl = &g * loadings * T::of(2.0);
    let mut sq = gl.norm_squared();
    for j in 0..psi.len() {
        if psi[j] > floor {
            sq += g[(j, j)] * g[(j, j)];
        }
    }
    Ok(sq.sqrt())
}

/// KL-optimal separable parameters for data whose mode covariances are `sigmas`.
pub fn pseudo_true<T: Scalar>(sigmas: &[DMatrix<T>], ranks: &[usize], opts: &FaOptions) -> Result<SfaModel<T>> {
    let dims: Vec<usize> = sigmas.iter().map(|s| s.nrows()).collect();
    check_ranks(ranks, &dims)?;
    let mut modes = Vec::with_capacity(sigmas.len());
    for (s, &k) in sigmas.iter().zip(ranks) {
        let p = s.nrows();
        let cov = if k == p {
            ModeCovariance::unstructured(s.clone())?
        } else if k == 0 {
            ModeCovariance::diagonal(s.diagonal())?
        } else {
            // The m/m_i weights on the scatter and the sample size cancel.
            fa_ml_single(s, T::one(), k, opts)?.into_covariance()?
        };
        modes.push(cov);
    }
    SfaModel::new(ranks.to_vec(), CovarianceSet::new(modes), None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use sfa_oracles as oracle;

    fn rand_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    }

    fn rand_tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> DenseTensor<f64> {
        DenseTensor::from_fn(dims.to_vec(), |_| rng.random_range(-2.0..2.0)).unwrap()
    }

    fn unstructured_set(dims: &[usize], rng: &mut ChaCha8Rng) -> CovarianceSet<f64> {
        CovarianceSet::new(
            dims.iter()
                .map(|&d| ModeCovariance::unstructured(rand_spd(d, rng)).unwrap())
                .collect(),
        )
    }

    #[test]
    fn scalar_density_trivial() {
        let y = DenseTensor::new(vec![1], vec![0.0]).unwrap();
        let model = SfaModel::new(vec![1], CovarianceSet::identity(&[1]), None).unwrap();
        let v = sfa_log_density(&y, &model, None).unwrap();
        assert!((v + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn density_matches_dense_mvn() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = [2, 3, 2];
        let covs = unstructured_set(&dims, &mut rng);
        let y = rand_tensor(&dims, &mut rng);
        let model = SfaModel::new(vec![2, 3, 2], covs.clone(), None).unwrap();
        let v = sfa_log_density(&y, &model, None).unwrap();
        let dense = oracle::kron_chain(&covs.materialize_all());
        let expect = oracle::mvn_logpdf(&y.vec(), &DVector::zeros(12), &dense);
        assert!((v - expect).abs() < 1e-10);
    }

    #[test]
    fn density_scale_indeterminacy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dims = [3, 2, 2];
        let covs = unstructured_set(&dims, &mut rng);
        let y = rand_tensor(&dims, &mut rng);
        let a = SfaModel::new(vec![3, 2, 2], covs.clone(), None).unwrap();
        let mut moved = covs.clone();
        moved.modes[0] = moved.modes[0].scaled(3.0);
        moved.modes[2] = moved.modes[2].scaled(1.0 / 3.0);
        let b = SfaModel::new(vec![3, 2, 2], moved, None).unwrap();
        let va = sfa_log_density(&y, &a, None).unwrap();
        let vb = sfa_log_density(&y, &b, None).unwrap();
        assert!((va - vb).abs() < 1e-10);
    }

    #[test]
    fn density_with_mean_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = vec![2, 3];
        let x = DMatrix::from_fn(6, 2, |_, _| rng.random_range(-1.0..1.0));
        let design = Design::dense(dims.clone(), x.clone(), None).unwrap();
        let beta = DVector::from_vec(vec![0.5, -1.0]);
        let mut covs = unstructured_set(&dims, &mut rng);
        covs.scale = Some(2.5);
        let model = SfaModel::new(vec![2, 3], covs.clone(), Some(beta.clone())).unwrap();
        let y = rand_tensor(&dims, &mut rng);
        let v = sfa_log_density(&y, &model, Some(&design)).unwrap();
        let expect = oracle::mvn_logpdf(&y.vec(), &(x * beta), &covs.assemble());
        assert!((v - expect).abs() < 1e-10);
    }

    #[test]
    fn rank_structure_validated() {
        let covs = CovarianceSet::<f64>::identity(&[3, 2]);
        assert!(SfaModel::new(vec![0, 0], covs.clone(), None).is_ok());
        assert!(SfaModel::new(vec![1, 0], covs.clone(), None).is_err());
        assert!(SfaModel::new(vec![0, 3], covs, None).is_err());
    }

    #[test]
    fn record_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fa = ModeCovariance::factor_analytic(
            DMatrix::from_fn(4, 1, |_, _| rng.random_range(-1.0..1.0)),
            DVector::from_element(4, 0.7),
        )
        .unwrap();
        let covs = CovarianceSet::new(vec![fa, ModeCovariance::identity(2)]);
        let model = SfaModel::new(vec![1, 0], covs, Some(DVector::from_vec(vec![1.5]))).unwrap();
        let json = serde_json::to_string(&model.to_record()).unwrap();
        let back = SfaModel::<f64>::from_record(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn fa_rank_zero_is_diagonal() {
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0f64, 3.0])) * 10.0;
        let fit = fa_ml_single(&s, 10.0, 0, &FaOptions::default()).unwrap();
        assert_eq!(fit.loadings.ncols(), 0);
        assert!((fit.d2[0] - 2.0).abs() < 1e-14 && (fit.d2[1] - 3.0).abs() < 1e-14);
        assert!(fa_ml_single(&s, 10.0, 2, &FaOptions::default()).is_err());
    }

    #[test]
    fn fa_saturated_case_reproduces_covariance() {
        let c = DMatrix::<f64>::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let n = 7.0f64;
        let fit = fa_ml_single(&(&c * n), n, 1, &FaOptions::precise()).unwrap();
        assert!((fit.materialize() - &c).amax() < 1e-8);
        // The unstructured bound −(n/2)(log|C| + p).
        let bound = -0.5 * n * (c.determinant().ln() + 2.0);
        assert!((fit.objective - bound).abs() < 1e-8);
    }

    /// Negative objective and gradient in `(Λ, log d²)` for the BFGS oracle.
    fn neg_objective(c: &DMatrix<f64>, k: usize, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let p = c.nrows();
        let lam = DMatrix::from_fn(p, k, |i, j| x[i + p * j]);
        let d2 = DVector::from_fn(p, |i, _| x[p * k + i].exp());
        let sigma = &lam * lam.transpose() + DMatrix::from_diagonal(&d2);
        let Some(chol) = sigma.clone().cholesky() else {
            return (f64::INFINITY, DVector::zeros(x.len()));
        };
        let inv = chol.inverse();
        let f = 0.5 * (sigma.determinant().ln() + (&inv * c).trace());
        let g = (&inv - &inv * c * &inv) * 0.5;
        let gl = &g * &lam * 2.0;
        let mut grad = DVector::zeros(x.len());
        for i in 0..p {
            for j in 0..k {
                grad[i + p * j] = gl[(i, j)];
            }
            grad[p * k + i] = g[(i, i)] * d2[i];
        }
        (f, grad)
    }

    #[test]
    fn fa_dominates_numerical_optimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (p, k, n) = (5, 2, 40.0);
        let x = DMatrix::from_fn(p, 40, |_, _| rng.random_range(-1.0..1.0));
        let mix = rand_spd(p, &mut rng);
        let xs = &mix * x;
        let s = &xs * xs.transpose();
        let c = &s / n;
        let fit = fa_ml_single(&s, n, k, &FaOptions::default()).unwrap();
        let ours = fit.objective / n;
        for _ in 0..10 {
            let x0 = DVector::from_fn(p * k + p, |_, _| rng.random_range(-1.0..1.0));
            let best = oracle::bfgs_minimize(|x| neg_objective(&c, k, x), x0, 1e-9, 5000);
            assert!(ours >= -best.value - 1e-6, "ours {} oracle {}", ours, -best.value);
        }
    }

    #[test]
    fn fa_warm_start_at_optimum_is_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = rand_spd(6, &mut rng) * 20.0;
        let first = fa_ml_single(&s, 20.0, 2, &FaOptions::precise()).unwrap();
        let again = fa_ml_single_from(&s, 20.0, 2, Some(&first.d2), &FaOptions::default()).unwrap();
        assert!((again.objective - first.objective).abs() < 1e-10 * first.objective.abs().max(1.0));
    }

    #[test]
    fn fa_heywood_columns_recorded() {
        // Identity scatter: no eigenvalue of the standardized scatter exceeds one.
        let s = DMatrix::<f64>::identity(4, 4) * 10.0;
        let start = DVector::from_element(4, 1.0);
        let fit = fa_ml_single_from(&s, 10.0, 1, Some(&start), &FaOptions::default()).unwrap();
        assert_eq!(fit.zeroed_columns, 1);
        assert_eq!(fit.loadings.amax(), 0.0);
        let cold = fa_ml_single(&s, 10.0, 1, &FaOptions::default()).unwrap();
        assert!((cold.materialize() - DMatrix::identity(4, 4)).amax() < 1e-4);
        assert!((fit.materialize() - DMatrix::identity(4, 4)).amax() < 1e-8);
    }

    #[test]
    fn pseudo_true_diagonal_mode() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let m = pseudo_true(&[s], &[0], &FaOptions::precise()).unwrap();
        assert_eq!(m.covs.modes[0].materialize().diagonal(), DVector::from_vec(vec![2.0, 3.0]));
    }

    #[test]
    fn pseudo_true_exact_structure_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let lam = DMatrix::from_fn(6, 2, |_, _| rng.random_range(-1.0..1.0));
        let d2 = DVector::from_fn(6, |_, _| rng.random_range(0.3..1.0));
        let sigma = &lam * lam.transpose() + DMatrix::from_diagonal(&d2);
        let m = pseudo_true(&[sigma.clone(), DMatrix::identity(3, 3)], &[2, 3], &FaOptions::precise()).unwrap();
        assert!((m.covs.modes[0].materialize() - sigma).amax() < 1e-8);
    }

    fn trace_normalized(m: &DMatrix<f64>) -> DMatrix<f64> {
        m / m.trace()
    }

    #[test]
    fn pseudo_true_matches_joint_kl_optimizer() {
        // Joint KL objective: −m/(2m_1) log|Σ_1| − m/(2m_2) log|Σ_2| − ½ tr(Σ_1⁻¹S_1) tr(Σ_2⁻¹S_2).
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (p1, p2, k) = (4usize, 3usize, 1usize);
        let s1 = rand_spd(p1, &mut rng);
        let s2 = rand_spd(p2, &mut rng);
        let m = (p1 * p2) as f64;
        let nfa = p1 * k + p1;
        let ntri = p2 * (p2 + 1) / 2;
        let unpack = |x: &DVector<f64>| {
            let lam = DMatrix::from_fn(p1, k, |i, j| x[i + p1 * j]);
            let d2 = DVector::from_fn(p1, |i, _| x[p1 * k + i].exp());
            let mut l = DMatrix::zeros(p2, p2);
            let mut idx = nfa;
            for j in 0..p2 {
                for i in j..p2 {
                    l[(i, j)] = if i == j { x[idx].exp() } else { x[idx] };
                    idx += 1;
                }
            }
            (lam, d2, l)
        };
        let f = |x: &DVector<f64>| {
            let (lam, d2, l) = unpack(x);
            let a = &lam * lam.transpose() + DMatrix::from_diagonal(&d2);
            let b = &l * l.transpose();
            let (Some(ai), Some(bi)) = (a.clone().try_inverse(), b.clone().try_inverse()) else {
                return f64::INFINITY;
            };
            0.5 * (m / p1 as f64) * a.determinant().ln()
                + 0.5 * (m / p2 as f64) * b.determinant().ln()
                + 0.5 * (&ai * &s1).trace() * (&bi * &s2).trace()
        };
        let fg = |x: &DVector<f64>| (f(x), oracle::numerical_gradient(f, x, 1e-6));
        let mut x0 = DVector::zeros(nfa + ntri);
        for i in 0..p1 {
            x0[i] = 0.3;
        }
        let best = oracle::bfgs_minimize(fg, x0, 1e-7, 20000);
        let (lam, d2, l) = unpack(&best.x);
        let joint_a = &lam * lam.transpose() + DMatrix::from_diagonal(&d2);
        let joint_b = &l * l.transpose();

        let pt = pseudo_true(&[s1.clone(), s2.clone()], &[k, p2], &FaOptions::precise()).unwrap();
        let ours = pt.covs.materialize_all();
        assert!((trace_normalized(&ours[0]) - trace_normalized(&joint_a)).amax() < 1e-6);
        assert!((trace_normalized(&ours[1]) - trace_normalized(&joint_b)).amax() < 1e-6);
    }

    #[test]
    fn pseudo_true_mode_decoupling() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sig = [rand_spd(5, &mut rng), rand_spd(3, &mut rng), rand_spd(2, &mut rng)];
        let a = pseudo_true(&sig, &[2, 0, 2], &FaOptions::precise()).unwrap();
        let b = pseudo_true(&sig, &[2, 3, 1], &FaOptions::precise()).unwrap();
        let fa = |m: &SfaModel<f64>| trace_normalized(&m.covs.modes[0].materialize());
        assert!((fa(&a) - fa(&b)).amax() < 1e-8);
    }

    #[test]
    fn works_in_single_precision() {
        let y = DenseTensor::<f32>::new(vec![2, 2], vec![0.1, -0.3, 0.7, 0.2]).unwrap();
        let model = SfaModel::new(vec![0, 0], CovarianceSet::<f32>::identity(&[2, 2]), None).unwrap();
        let v = sfa_log_density(&y, &model, None).unwrap();
        let expect = -2.0 * (2.0 * std::f64::consts::PI).ln() - 0.5 * (0.01 + 0.09 + 0.49 + 0.04);
        assert!((v as f64 - expect).abs() < 1e-5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn density_equals_dense_oracle(seed in 0u64..10_000, d1 in 1usize..4, d2 in 1usize..4, d3 in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dims = [d1, d2, d3];
            let covs = unstructured_set(&dims, &mut rng);
            let y = rand_tensor(&dims, &mut rng);
            let model = SfaModel::new(dims.to_vec(), covs.clone(), None).unwrap();
            let v = sfa_log_density(&y, &model, None).unwrap();
            let n = y.len();
            let expect = oracle::mvn_logpdf(&y.vec(), &DVector::zeros(n), &oracle::kron_chain(&covs.materialize_all()));
            prop_assert!((v - expect).abs() < 1e-10 * expect.abs().max(1.0));
        }

        #[test]
        fn fa_objective_rotation_invariant(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = rand_spd(5, &mut rng) * 30.0;
            let fit = fa_ml_single(&s, 30.0, 2, &FaOptions::default()).unwrap();
            let th: f64 = rng.random_range(0.0..6.0);
            let rot = DMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]);
            let rl = &fit.loadings * rot;
            let sigma = &rl * rl.transpose() + DMatrix::from_diagonal(&fit.d2);
            let v = fa_objective(&s, 30.0, &sigma).unwrap();
            prop_assert!((v - fit.objective).abs() < 1e-9 * v.abs().max(1.0));
        }

        #[test]
        fn diagonal_fit_dominates_perturbations(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = rand_spd(4, &mut rng) * 12.0;
            let fit = fa_ml_single(&s, 12.0, 0, &FaOptions::default()).unwrap();
            for _ in 0..100 {
                let d = fit.d2.map(|x| x * (1.0 + rng.random_range(-0.3..0.3)));
                let v = fa_objective(&s, 12.0, &DMatrix::from_diagonal(&d)).unwrap();
                prop_assert!(v <= fit.objective + 1e-12);
            }
        }
    }
}
