//! Per-mode covariance structures and the separable transforms built from them.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SfaError};
use crate::scalar::Scalar;
use crate::tensor::DenseTensor;

/// Eigenvalues below this fraction of the largest one count as singular.
pub const PD_RELATIVE_TOL: f64 = 1e-12;

/// Uniquenesses are clamped at this fraction of the mode's average variance.
pub const D2_FLOOR_FRACTION: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub enum ModeCovariance<T: Scalar> {
    Diagonal { d2: DVector<T> },
    FactorAnalytic { loadings: DMatrix<T>, d2: DVector<T> },
    Unstructured { sigma: DMatrix<T> },
}

impl<T: Scalar> ModeCovariance<T> {
    pub fn diagonal(d2: DVector<T>) -> Result<Self> {
        check_positive(&d2)?;
        Ok(Self::Diagonal { d2 })
    }

    pub fn identity(dim: usize) -> Self {
        Self::Diagonal {
            d2: DVector::from_element(dim, T::one()),
        }
    }

    pub fn factor_analytic(loadings: DMatrix<T>, d2: DVector<T>) -> Result<Self> {
        check_positive(&d2)?;
        let (m, k) = loadings.shape();
        if m != d2.len() {
            return Err(SfaError::Shape(format!(
                "loadings have {} rows but d2 has {} entries",
                m,
                d2.len()
            )));
        }
        if k == 0 || k >= m {
            return Err(SfaError::InvalidRanks(format!(
                "factor-analytic rank {} must satisfy 0 < k < {}",
                k, m
            )));
        }
        Ok(Self::FactorAnalytic { loadings, d2 })
    }

    pub fn unstructured(sigma: DMatrix<T>) -> Result<Self> {
        if !sigma.is_square() {
            return Err(SfaError::Shape("unstructured covariance must be square".into()));
        }
        let asym = (&sigma - sigma.transpose()).amax();
        if asym.f64() > 1e-12 * sigma.amax().f64().max(1.0) {
            return Err(SfaError::InvalidArgument(format!(
                "covariance is not symmetric (max asymmetry {:.3e})",
                asym
            )));
        }
        if sigma.clone().cholesky().is_none() {
            return Err(SfaError::Singular { ratio: 0.0 });
        }
        Ok(Self::Unstructured { sigma })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Diagonal { d2 } | Self::FactorAnalytic { d2, .. } => d2.len(),
            Self::Unstructured { sigma } => sigma.nrows(),
        }
    }

    /// Rank code of the structure: 0 diagonal, `k` factor-analytic, `m` unstructured.
    pub fn rank(&self) -> usize {
        match self {
            Self::Diagonal { .. } => 0,
            Self::FactorAnalytic { loadings, .. } => loadings.ncols(),
            Self::Unstructured { sigma } => sigma.nrows(),
        }
    }

    pub fn materialize(&self) -> DMatrix<T> {
        match self {
            Self::Diagonal { d2 } => DMatrix::from_diagonal(d2),
            Self::FactorAnalytic { loadings, d2 } => {
                let mut s = loadings * loadings.transpose();
                for (j, &d) in d2.iter().enumerate() {
                    s[(j, j)] += d;
                }
                s
            }
            Self::Unstructured { sigma } => sigma.clone(),
        }
    }

    pub fn trace(&self) -> T {
        match self {
            Self::Diagonal { d2 } => d2.sum(),
            Self::FactorAnalytic { loadings, d2 } => loadings.norm_squared() + d2.sum(),
            Self::Unstructured { sigma } => sigma.trace(),
        }
    }

    /// The same structure with materialized covariance multiplied by `c > 0`.
    pub fn scaled(&self, c: T) -> Self {
        match self {
            Self::Diagonal { d2 } => Self::Diagonal { d2: d2 * c },
            Self::FactorAnalytic { loadings, d2 } => Self::FactorAnalytic {
                loadings: loadings * c.sqrt(),
                d2: d2 * c,
            },
            Self::Unstructured { sigma } => Self::Unstructured { sigma: sigma * c },
        }
    }

    pub fn to_record(&self) -> ModeCovarianceRecord {
        match self {
            Self::Diagonal { d2 } => ModeCovarianceRecord::Diagonal { d2: vec_f64(d2) },
            Self::FactorAnalytic { loadings, d2 } => ModeCovarianceRecord::FactorAnalytic {
                loadings: rows_f64(loadings),
                d2: vec_f64(d2),
            },
            Self::Unstructured { sigma } => ModeCovarianceRecord::Unstructured {
                sigma: rows_f64(sigma),
            },
        }
    }

    pub fn from_record(rec: &ModeCovarianceRecord) -> Result<Self> {
        match rec {
            ModeCovarianceRecord::Diagonal { d2 } => Self::diagonal(dvec(d2)),
            ModeCovarianceRecord::FactorAnalytic { loadings, d2 } => {
                Self::factor_analytic(dmat(loadings)?, dvec(d2))
            }
            ModeCovarianceRecord::Unstructured { sigma } => Self::unstructured(dmat(sigma)?),
        }
    }
}

/// Serialized form of a [`ModeCovariance`]; matrices are stored as arrays of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModeCovarianceRecord {
    Diagonal { d2: Vec<f64> },
    FactorAnalytic { loadings: Vec<Vec<f64>>, d2: Vec<f64> },
    Unstructured { sigma: Vec<Vec<f64>> },
}

/// One covariance per mode, plus an optional total scale `ψ` multiplying the
/// Kronecker product.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSet<T: Scalar> {
    pub modes: Vec<ModeCovariance<T>>,
    pub scale: Option<T>,
}

impl<T: Scalar> CovarianceSet<T> {
    pub fn new(modes: Vec<ModeCovariance<T>>) -> Self {
        Self { modes, scale: None }
    }

    pub fn identity(dims: &[usize]) -> Self {
        Self::new(dims.iter().map(|&d| ModeCovariance::identity(d)).collect())
    }

    pub fn order(&self) -> usize {
        self.modes.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.modes.iter().map(|c| c.dim()).collect()
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.modes.iter().map(|c| c.rank()).collect()
    }

    pub fn scale_or_one(&self) -> T {
        self.scale.unwrap_or_else(T::one)
    }

    pub fn materialize_all(&self) -> Vec<DMatrix<T>> {
        self.modes.iter().map(|c| c.materialize()).collect()
    }

    /// Dense `ψ · Σ_K ⊗ ... ⊗ Σ_1`; for small verification problems only.
    pub fn assemble(&self) -> DMatrix<T> {
        crate::tensor::kronecker_chain(&self.materialize_all()) * self.scale_or_one()
    }

    pub fn check_dims(&self, dims: &[usize]) -> Result<()> {
        if self.dims() != dims {
            return Err(SfaError::Shape(format!(
                "covariance dims {:?} do not match array dims {:?}",
                self.dims(),
                dims
            )));
        }
        Ok(())
    }
}

/// Symmetric square root, inverse square root and log-determinant of an SPD matrix.
#[derive(Debug, Clone)]
pub struct SymFactors<T: Scalar> {
    pub sqrt: DMatrix<T>,
    pub inv_sqrt: DMatrix<T>,
    pub log_det: T,
}

pub fn sym_factors<T: Scalar>(s: &DMatrix<T>) -> Result<SymFactors<T>> {
    if let Some(d) = diagonal_entries(s) {
        return diag_factors(&d);
    }
    let eig = SymmetricEigen::new(s.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(max > T::zero()) || min <= max * T::of(PD_RELATIVE_TOL) {
        let ratio = if max > T::zero() { (min / max).f64() } else { 0.0 };
        return Err(SfaError::Singular { ratio });
    }
    let v = &eig.eigenvectors;
    let roots = eig.eigenvalues.map(|l| l.sqrt());
    let sqrt = v * DMatrix::from_diagonal(&roots) * v.transpose();
    let inv_sqrt = v * DMatrix::from_diagonal(&roots.map(|r| T::one() / r)) * v.transpose();
    let log_det = eig.eigenvalues.iter().fold(T::zero(), |acc, &l| acc + l.ln());
    Ok(SymFactors {
        sqrt: symmetrize(sqrt),
        inv_sqrt: symmetrize(inv_sqrt),
        log_det,
    })
}

/// Symmetric inverse square root `R` with `R S R = I`.
pub fn inv_sqrt<T: Scalar>(s: &DMatrix<T>) -> Result<DMatrix<T>> {
    Ok(sym_factors(s)?.inv_sqrt)
}

pub fn sqrt_spd<T: Scalar>(s: &DMatrix<T>) -> Result<DMatrix<T>> {
    Ok(sym_factors(s)?.sqrt)
}

fn diagonal_entries<T: Scalar>(s: &DMatrix<T>) -> Option<DVector<T>> {
    let n = s.nrows();
    for j in 0..n {
        for i in 0..n {
            if i != j && s[(i, j)] != T::zero() {
                return None;
            }
        }
    }
    Some(s.diagonal())
}

fn diag_factors<T: Scalar>(d: &DVector<T>) -> Result<SymFactors<T>> {
    let max = d.max();
    let min = d.min();
    if !(max > T::zero()) || min <= max * T::of(PD_RELATIVE_TOL) {
        let ratio = if max > T::zero() { (min / max).f64() } else { 0.0 };
        return Err(SfaError::Singular { ratio });
    }
    let roots = d.map(|x| x.sqrt());
    Ok(SymFactors {
        sqrt: DMatrix::from_diagonal(&roots),
        inv_sqrt: DMatrix::from_diagonal(&roots.map(|r| T::one() / r)),
        log_det: d.iter().fold(T::zero(), |acc, &x| acc + x.ln()),
    })
}

pub(crate) fn symmetrize<T: Scalar>(m: DMatrix<T>) -> DMatrix<T> {
    (&m + m.transpose()) * T::of(0.5)
}

/// Factors for every mode of a covariance set.
pub fn set_factors<T: Scalar>(covs: &CovarianceSet<T>) -> Result<Vec<SymFactors<T>>> {
    covs.modes.iter().map(|c| sym_factors(&c.materialize())).collect()
}

/// Multiplies every mode except `skip` by its inverse square root covariance
/// (all modes when `skip` is `None`). The total scale `ψ` is not applied.
pub fn standardize_except<T: Scalar>(
    t: &DenseTensor<T>,
    covs: &CovarianceSet<T>,
    skip: Option<usize>,
) -> Result<DenseTensor<T>> {
    covs.check_dims(t.dims())?;
    let factors = set_factors(covs)?;
    standardize_with(t, &factors, skip)
}

pub fn standardize_with<T: Scalar>(
    t: &DenseTensor<T>,
    factors: &[SymFactors<T>],
    skip: Option<usize>,
) -> Result<DenseTensor<T>> {
    let mats: Vec<Option<&DMatrix<T>>> = factors
        .iter()
        .enumerate()
        .map(|(j, f)| if Some(j) == skip { None } else { Some(&f.inv_sqrt) })
        .collect();
    t.multilinear(&mats)
}

/// Inverse of full standardization: multiplies every mode by its square root covariance.
pub fn unstandardize<T: Scalar>(t: &DenseTensor<T>, covs: &CovarianceSet<T>) -> Result<DenseTensor<T>> {
    covs.check_dims(t.dims())?;
    let factors = set_factors(covs)?;
    let mats: Vec<Option<&DMatrix<T>>> = factors.iter().map(|f| Some(&f.sqrt)).collect();
    t.multilinear(&mats)
}

/// Rescales every mode covariance to unit trace and returns the product of the
/// original traces (times any existing scale) as `ψ`.
pub fn normalize_scales<T: Scalar>(covs: &CovarianceSet<T>) -> (CovarianceSet<T>, T) {
    let mut psi = covs.scale_or_one();
    let modes = covs
        .modes
        .iter()
        .map(|c| {
            let tr = c.trace();
            psi *= tr;
            c.scaled(T::one() / tr)
        })
        .collect();
    (
        CovarianceSet {
            modes,
            scale: Some(psi),
        },
        psi,
    )
}

/// Rotates loadings to the identified form: lower triangular with a positive diagonal.
/// The materialized covariance is unchanged.
pub fn identifiable_loadings<T: Scalar>(loadings: &DMatrix<T>) -> DMatrix<T> {
    let (m, k) = loadings.shape();
    if k == 0 || m == 0 {
        return loadings.clone();
    }
    // Λᵀ = Q R  =>  Λ Q = Rᵀ, which is lower trapezoidal.
    let qr = loadings.transpose().qr();
    let q = qr.q();
    let mut out = loadings * q;
    for c in 0..k.min(m) {
        if out[(c, c)] < T::zero() {
            out.column_mut(c).neg_mut();
        }
    }
    for r in 0..k.min(m) {
        for c in (r + 1)..k {
            out[(r, c)] = T::zero();
        }
    }
    out
}

pub fn write_matrix_csv<T: Scalar, W: Write>(w: W, m: &DMatrix<T>) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for r in 0..m.nrows() {
        wtr.write_record((0..m.ncols()).map(|c| format!("{}", m[(r, c)].f64())))?;
    }
    wtr.flush()?;
    Ok(())
}

fn check_positive<T: Scalar>(d2: &DVector<T>) -> Result<()> {
    if d2.iter().any(|&x| !(x > T::zero())) {
        return Err(SfaError::InvalidArgument(
            "uniquenesses (d2) must be strictly positive".into(),
        ));
    }
    Ok(())
}

fn vec_f64<T: Scalar>(v: &DVector<T>) -> Vec<f64> {
    v.iter().map(|x| x.f64()).collect()
}

pub(crate) fn rows_f64<T: Scalar>(m: &DMatrix<T>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)].f64()).collect())
        .collect()
}

fn dvec<T: Scalar>(v: &[f64]) -> DVector<T> {
    DVector::from_iterator(v.len(), v.iter().map(|&x| T::of(x)))
}

pub(crate) fn dmat<T: Scalar>(rows: &[Vec<f64>]) -> Result<DMatrix<T>> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != nc) {
        return Err(SfaError::Shape("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nr, nc, |r, c| T::of(rows[r][c])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::kronecker_chain;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use sfa_oracles as oracle;

    fn rmat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn rspd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = rmat(n, n, rng);
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    }

    fn rpos(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.random_range(0.2..2.0))
    }

    fn random_set(dims: &[usize], rng: &mut ChaCha8Rng) -> CovarianceSet<f64> {
        CovarianceSet::new(
            dims.iter()
                .enumerate()
                .map(|(i, &d)| match (i % 3, d) {
                    (_, 1) | (0, _) => ModeCovariance::diagonal(rpos(d, rng)).unwrap(),
                    (1, _) => ModeCovariance::factor_analytic(rmat(d, 1, rng), rpos(d, rng)).unwrap(),
                    _ => ModeCovariance::unstructured(rspd(d, rng)).unwrap(),
                })
                .collect(),
        )
    }

    #[test]
    fn materialize_examples() {
        let zero = ModeCovariance::factor_analytic(DMatrix::zeros(3, 1), DVector::from_vec(vec![1.0, 2.0, 3.0]))
            .unwrap();
        assert_eq!(zero.materialize(), DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0])));
        let fa =
            ModeCovariance::factor_analytic(DMatrix::from_element(2, 1, 1.0), DVector::from_element(2, 1.0)).unwrap();
        assert_eq!(fa.materialize(), DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]));
    }

    #[test]
    fn factor_part_has_rank_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lam = rmat(6, 2, &mut rng);
        let d2 = rpos(6, &mut rng);
        let c = ModeCovariance::factor_analytic(lam, d2.clone()).unwrap();
        let low = c.materialize() - DMatrix::from_diagonal(&d2);
        let sv = low.svd(false, false).singular_values;
        let mut sorted: Vec<f64> = sv.iter().copied().collect();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!(sorted[2..].iter().all(|&s| s < 1e-10));
    }

    #[test]
    fn constructor_validation() {
        assert!(ModeCovariance::diagonal(DVector::from_vec(vec![1.0, 0.0])).is_err());
        assert!(ModeCovariance::factor_analytic(DMatrix::zeros(2, 2), DVector::from_element(2, 1.0)).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(ModeCovariance::unstructured(asym).is_err());
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(ModeCovariance::unstructured(indefinite).is_err());
    }

    #[test]
    fn inv_sqrt_examples() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert!((inv_sqrt(&i).unwrap() - &i).amax() < 1e-15);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let r = inv_sqrt(&d).unwrap();
        assert!((r - DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 1.0 / 3.0]))).amax() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = rspd(5, &mut rng);
        let r = inv_sqrt(&s).unwrap();
        assert!((&r * &s * &r - DMatrix::identity(5, 5)).amax() < 1e-10);
        assert!((&r * &r - s.clone().try_inverse().unwrap()).amax() < 1e-10);
    }

    #[test]
    fn inv_sqrt_rejects_singular() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(inv_sqrt(&s), Err(SfaError::Singular { .. })));
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
        assert!(matches!(inv_sqrt(&d), Err(SfaError::Singular { .. })));
    }

    #[test]
    fn standardize_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let t = DenseTensor::from_fn(vec![2, 3, 2], |_| rng.random_range(-1.0..1.0)).unwrap();
        let ident = CovarianceSet::identity(&[2, 3, 2]);
        assert_eq!(standardize_except(&t, &ident, None).unwrap(), t);

        let t2 = DenseTensor::from_fn(vec![2, 3], |_| rng.random_range(-1.0..1.0)).unwrap();
        let (a, b) = (rpos(2, &mut rng), rpos(3, &mut rng));
        let covs = CovarianceSet::new(vec![
            ModeCovariance::diagonal(a.clone()).unwrap(),
            ModeCovariance::diagonal(b.clone()).unwrap(),
        ]);
        let out = standardize_except(&t2, &covs, None).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let expect = t2.get(&[i, j]) / (a[i] * b[j]).sqrt();
                assert!((out.get(&[i, j]) - expect).abs() < 1e-14);
            }
        }

        let covs = random_set(&[2, 3, 2], &mut rng);
        let out = standardize_except(&t, &covs, None).unwrap();
        let roots: Vec<_> = covs
            .materialize_all()
            .iter()
            .map(|s| inv_sqrt(s).unwrap())
            .collect();
        let dense = oracle::kron_chain(&roots) * t.vec();
        assert!((out.vec() - dense).amax() < 1e-12);

        let keep1 = standardize_except(&t, &covs, Some(1)).unwrap();
        let mut roots_skip = roots.clone();
        roots_skip[1] = DMatrix::identity(3, 3);
        let dense = oracle::kron_chain(&roots_skip) * t.vec();
        assert!((keep1.vec() - dense).amax() < 1e-12);
    }

    #[test]
    fn normalize_examples() {
        let set = CovarianceSet::new(vec![ModeCovariance::unstructured(DMatrix::<f64>::identity(2, 2) * 2.0).unwrap()]);
        let (norm, psi) = normalize_scales(&set);
        assert!((psi - 4.0).abs() < 1e-15);
        assert!((norm.modes[0].materialize() - DMatrix::identity(2, 2) * 0.5).amax() < 1e-15);

        let (again, psi2) = normalize_scales(&CovarianceSet::new(norm.modes.clone()));
        assert!((psi2 - 1.0).abs() < 1e-15);
        assert!((again.modes[0].materialize() - norm.modes[0].materialize()).amax() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let set = random_set(&[3, 2, 4], &mut rng);
        let (norm, psi) = normalize_scales(&set);
        for m in &norm.modes {
            assert!((m.trace() - 1.0).abs() < 1e-12);
        }
        let before = set.assemble();
        let after = kronecker_chain(&norm.materialize_all()) * psi;
        assert!((before - &after).amax() < 1e-12);
        assert!((norm.assemble() - after).amax() < 1e-12);
    }

    #[test]
    fn identifiable_loadings_are_lower_triangular() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let lam = rmat(5, 3, &mut rng);
        let id = identifiable_loadings(&lam);
        for r in 0..3 {
            assert!(id[(r, r)] > 0.0);
            for c in (r + 1)..3 {
                assert_eq!(id[(r, c)], 0.0);
            }
        }
        let a = &lam * lam.transpose();
        let b = &id * id.transpose();
        assert!((a - b).amax() < 1e-12);
    }

    #[test]
    fn record_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let set = random_set(&[3, 4, 2], &mut rng);
        for m in &set.modes {
            let json = serde_json::to_string(&m.to_record()).unwrap();
            let back: ModeCovarianceRecord = serde_json::from_str(&json).unwrap();
            let m2 = ModeCovariance::<f64>::from_record(&back).unwrap();
            assert!((m2.materialize() - m.materialize()).amax() < 1e-15);
        }
        let mut buf = Vec::new();
        write_matrix_csv(&mut buf, &DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "1,2\n3,4\n");
    }

    proptest! {
        #[test]
        fn rotation_and_scale_invariance(seed in any::<u64>(), m in 3usize..6, k in 1usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lam = rmat(m, k, &mut rng);
            let d2 = rpos(m, &mut rng);
            let g = rmat(k, k, &mut rng).qr().q();
            let a = ModeCovariance::factor_analytic(lam.clone(), d2.clone()).unwrap().materialize();
            let b = ModeCovariance::factor_analytic(&lam * g, d2).unwrap().materialize();
            prop_assert!((&a - b).amax() < 1e-12);
            let eig = a.clone().symmetric_eigenvalues();
            prop_assert!(eig.min() > 0.0);

            let other = rspd(2, &mut rng);
            let c = rng.random_range(0.1..5.0);
            let k1 = kronecker_chain(&[a.clone(), other.clone()]);
            let k2 = kronecker_chain(&[a * c, other / c]);
            prop_assert!((k1 - k2).amax() < 1e-12);
        }

        #[test]
        fn standardize_then_unstandardize(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dims = vec![3, 2, 4];
            let covs = random_set(&dims, &mut rng);
            let t = DenseTensor::from_fn(dims.clone(), |_| rng.random_range(-1.0..1.0)).unwrap();
            let back = unstandardize(&standardize_except(&t, &covs, None).unwrap(), &covs).unwrap();
            let err = back.sub(&t).unwrap().data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
            prop_assert!(err < 1e-10);
        }
    }
}
