//! Linear mean models for arrays and the piecewise-polynomial age design.
//!
//! Designs whose columns are outer products of per-mode vectors (every column
//! of the piecewise-polynomial design is) are kept in that factored form, so
//! generalized least squares never touches an `m × m` matrix: with mode
//! precisions `P_l`, the weighted Gram entry of columns `a` and `b` is
//! `∏_l a_lᵀ P_l b_l`.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariance::{set_factors, CovarianceSet, SymFactors};
use crate::error::{Result, SfaError};
use crate::scalar::Scalar;
use crate::tensor::{DenseTensor, MaskedTensor};

#[derive(Debug, Clone, PartialEq)]
enum Columns<T: Scalar> {
    /// Each column is `⊗_l v_l` with one vector per mode.
    Separable(Vec<Vec<DVector<T>>>),
    /// `m × p` matrix whose rows follow the array's storage order.
    Dense(DMatrix<T>),
}

/// Design matrix mapping coefficients to a mean array.
#[derive(Debug, Clone, PartialEq)]
pub struct Design<T: Scalar> {
    dims: Vec<usize>,
    columns: Columns<T>,
    labels: Vec<String>,
}

impl<T: Scalar> Design<T> {
    pub fn separable(dims: Vec<usize>, columns: Vec<Vec<DVector<T>>>, labels: Vec<String>) -> Result<Self> {
        crate::tensor::check_dims(&dims)?;
        for (c, col) in columns.iter().enumerate() {
            if col.len() != dims.len() || col.iter().zip(&dims).any(|(v, &d)| v.len() != d) {
                return Err(SfaError::Shape(format!("design column {} does not match dims {:?}", c, dims)));
            }
        }
        if labels.len() != columns.len() {
            return Err(SfaError::Shape("one label per design column required".into()));
        }
        Ok(Self {
            dims,
            columns: Columns::Separable(columns),
            labels,
        })
    }

    pub fn dense(dims: Vec<usize>, matrix: DMatrix<T>, labels: Option<Vec<String>>) -> Result<Self> {
        crate::tensor::check_dims(&dims)?;
        let m: usize = dims.iter().product();
        if matrix.nrows() != m {
            return Err(SfaError::Shape(format!(
                "design has {} rows but the array has {} cells",
                matrix.nrows(),
                m
            )));
        }
        let labels = labels.unwrap_or_else(|| (0..matrix.ncols()).map(|c| format!("x{}", c)).collect());
        if labels.len() != matrix.ncols() {
            return Err(SfaError::Shape("one label per design column required".into()));
        }
        Ok(Self {
            dims,
            columns: Columns::Dense(matrix),
            labels,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ncols(&self) -> usize {
        self.labels.len()
    }

    pub fn nrows(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn column_tensor(&self, c: usize) -> DenseTensor<T> {
        match &self.columns {
            Columns::Separable(cols) => outer(&self.dims, &cols[c]),
            Columns::Dense(x) => DenseTensor::new(self.dims.clone(), x.column(c).iter().copied().collect())
                .expect("dims checked at construction"),
        }
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        match &self.columns {
            Columns::Dense(x) => x.clone(),
            Columns::Separable(_) => {
                let mut x = DMatrix::zeros(self.nrows(), self.ncols());
                for c in 0..self.ncols() {
                    x.set_column(c, &self.column_tensor(c).vec());
                }
                x
            }
        }
    }

    /// Nonzero entries of the design row for one cell.
    pub fn row(&self, cell: usize) -> Vec<(usize, T)> {
        match &self.columns {
            Columns::Dense(x) => (0..x.ncols())
                .filter_map(|c| {
                    let v = x[(cell, c)];
                    (v != T::zero()).then_some((c, v))
                })
                .collect(),
            Columns::Separable(cols) => {
                let idx = crate::tensor::multi_index(&self.dims, cell);
                cols.iter()
                    .enumerate()
                    .filter_map(|(c, vs)| {
                        let mut p = T::one();
                        for (v, &i) in vs.iter().zip(&idx) {
                            p *= v[i];
                            if p == T::zero() {
                                return None;
                            }
                        }
                        Some((c, p))
                    })
                    .collect()
            }
        }
    }

    /// Mean array `X β`.
    pub fn mean(&self, beta: &DVector<T>) -> Result<DenseTensor<T>> {
        if beta.len() != self.ncols() {
            return Err(SfaError::Shape(format!(
                "{} coefficients for a design with {} columns",
                beta.len(),
                self.ncols()
            )));
        }
        match &self.columns {
            Columns::Dense(x) => DenseTensor::new(self.dims.clone(), (x * beta).iter().copied().collect()),
            Columns::Separable(cols) => {
                let mut acc = DenseTensor::zeros(self.dims.clone())?;
                for (c, vs) in cols.iter().enumerate() {
                    if beta[c] != T::zero() {
                        add_outer(acc.data_mut(), &self.dims, vs, beta[c]);
                    }
                }
                Ok(acc)
            }
        }
    }

    /// `Xᵀ Ω⁻¹ X` for `Ω = Σ_K ⊗ ... ⊗ Σ_1` given by its mode factors (identity when `None`).
    pub fn weighted_gram(&self, factors: Option<&[SymFactors<T>]>) -> Result<DMatrix<T>> {
        let p = self.ncols();
        match &self.columns {
            Columns::Separable(cols) => {
                // Entry (a, b) is ∏_l a_lᵀ P_l b_l: a Hadamard product of per-mode Gram matrices.
                let precisions = factors.map(precisions);
                let mut g = DMatrix::from_element(p, p, T::one());
                for l in 0..self.dims.len() {
                    let v = DMatrix::from_fn(self.dims[l], p, |i, c| cols[c][l][i]);
                    let gl = match &precisions {
                        Some(ps) => v.transpose() * (&ps[l] * &v),
                        None => v.transpose() * &v,
                    };
                    g.component_mul_assign(&gl);
                }
                Ok(g)
            }
            Columns::Dense(x) => {
                let std = match factors {
                    Some(f) => {
                        let mut s = DMatrix::zeros(x.nrows(), p);
                        for c in 0..p {
                            let t = crate::covariance::standardize_with(&self.column_tensor(c), f, None)?;
                            s.set_column(c, &t.vec());
                        }
                        s
                    }
                    None => x.clone(),
                };
                Ok(std.transpose() * &std)
            }
        }
    }

    /// `Xᵀ Ω⁻¹ vec(y)`.
    pub fn weighted_cross(&self, y: &DenseTensor<T>, factors: Option<&[SymFactors<T>]>) -> Result<DVector<T>> {
        if y.dims() != self.dims.as_slice() {
            return Err(SfaError::Shape(format!(
                "array dims {:?} do not match design dims {:?}",
                y.dims(),
                self.dims
            )));
        }
        let z = match factors {
            Some(f) => {
                let ps = precisions(f);
                y.multilinear(&ps.iter().map(Some).collect::<Vec<_>>())?
            }
            None => y.clone(),
        };
        Ok(match &self.columns {
            Columns::Dense(x) => x.transpose() * z.vec(),
            Columns::Separable(cols) => {
                DVector::from_iterator(cols.len(), cols.iter().map(|vs| contract(z.data(), &self.dims, vs)))
            }
        })
    }
}

fn precisions<T: Scalar>(factors: &[SymFactors<T>]) -> Vec<DMatrix<T>> {
    factors.iter().map(|f| &f.inv_sqrt * &f.inv_sqrt).collect()
}

fn outer<T: Scalar>(dims: &[usize], vs: &[DVector<T>]) -> DenseTensor<T> {
    let mut t = DenseTensor::zeros(dims.to_vec()).expect("dims checked");
    add_outer(t.data_mut(), dims, vs, T::one());
    t
}

/// Visits the nonzero cells of `v_K ⊗ ... ⊗ v_1` as `(linear index, value)`.
fn for_each_nonzero<T: Scalar>(dims: &[usize], vs: &[DVector<T>], w: T, mut f: impl FnMut(usize, T)) {
    let mut stride = 1;
    let mut nz: Vec<Vec<(usize, T)>> = Vec::with_capacity(vs.len());
    for (v, &d) in vs.iter().zip(dims) {
        let entries: Vec<(usize, T)> = v.iter().enumerate().filter(|(_, &x)| x != T::zero()).map(|(i, &x)| (i * stride, x)).collect();
        if entries.is_empty() {
            return;
        }
        nz.push(entries);
        stride *= d;
    }
    // Odometer over the nonzero lists, last mode outermost.
    let k = nz.len();
    let mut pos = vec![0usize; k];
    loop {
        let mut off = 0;
        let mut val = w;
        for l in 0..k {
            let (o, x) = nz[l][pos[l]];
            off += o;
            val *= x;
        }
        f(off, val);
        let mut l = 0;
        loop {
            if l == k {
                return;
            }
            pos[l] += 1;
            if pos[l] < nz[l].len() {
                break;
            }
            pos[l] = 0;
            l += 1;
        }
    }
}

/// `data += w · (v_K ⊗ ... ⊗ v_1)`.
fn add_outer<T: Scalar>(data: &mut [T], dims: &[usize], vs: &[DVector<T>], w: T) {
    for_each_nonzero(dims, vs, w, |c, x| data[c] += x);
}

/// `⟨z, v_K ⊗ ... ⊗ v_1⟩`.
fn contract<T: Scalar>(data: &[T], dims: &[usize], vs: &[DVector<T>]) -> T {
    let mut s = T::zero();
    for_each_nonzero(dims, vs, T::one(), |c, x| s += data[c] * x);
    s
}

/// Solves the normal equations `G β = r` after unit-diagonal scaling, reporting
/// numerical rank deficiency instead of returning a meaningless solution.
pub(crate) fn solve_normal<T: Scalar>(g: &DMatrix<T>, r: &DVector<T>) -> Result<DVector<T>> {
    let p = g.nrows();
    let mut s = DVector::zeros(p);
    for j in 0..p {
        let d = g[(j, j)];
        if !(d > T::zero()) {
            return Err(SfaError::RankDeficient(format!("column {} is identically zero", j)));
        }
        s[j] = T::one() / d.sqrt();
    }
    let gs = DMatrix::from_fn(p, p, |a, b| g[(a, b)] * s[a] * s[b]);
    let chol = gs
        .cholesky()
        .ok_or_else(|| SfaError::RankDeficient("Gram matrix is not positive definite".into()))?;
    let min_pivot = chol.l_dirty().diagonal().iter().fold(T::one(), |m, &x| m.min(x * x));
    if min_pivot < T::of(1e-11) {
        return Err(SfaError::RankDeficient(format!("smallest scaled pivot {:.3e}", min_pivot)));
    }
    let rs = r.component_mul(&s);
    Ok(chol.solve(&rs).component_mul(&s))
}

/// Generalized least squares for a complete array. With `covs = None` this is OLS.
pub fn gls_fit<T: Scalar>(
    y: &DenseTensor<T>,
    design: &Design<T>,
    covs: Option<&CovarianceSet<T>>,
) -> Result<DVector<T>> {
    let factors = covs.map(set_factors).transpose()?;
    gls_fit_with(y, design, factors.as_deref())
}

pub fn gls_fit_with<T: Scalar>(
    y: &DenseTensor<T>,
    design: &Design<T>,
    factors: Option<&[SymFactors<T>]>,
) -> Result<DVector<T>> {
    let g = design.weighted_gram(factors)?;
    let r = design.weighted_cross(y, factors)?;
    solve_normal(&g, &r)
}

/// Ordinary least squares using only the observed cells.
pub fn ols_fit_observed<T: Scalar>(y: &MaskedTensor<T>, design: &Design<T>) -> Result<DVector<T>> {
    if y.is_complete() {
        return gls_fit(y.tensor(), design, None);
    }
    let p = design.ncols();
    let mut g = DMatrix::zeros(p, p);
    let mut r = DVector::zeros(p);
    let data = y.tensor().data();
    for (cell, &obs) in y.mask().iter().enumerate() {
        if !obs {
            continue;
        }
        let row = design.row(cell);
        for &(a, xa) in &row {
            r[a] += xa * data[cell];
            for &(b, xb) in &row {
                g[(a, b)] += xa * xb;
            }
        }
    }
    solve_normal(&g, &r)
}

/// `1 − RSS/TSS` on the vectorized scale.
pub fn r_squared<T: Scalar>(y: &DenseTensor<T>, fitted: &DenseTensor<T>) -> T {
    let n = T::of_usize(y.len());
    let mean = y.data().iter().fold(T::zero(), |a, &x| a + x) / n;
    let tss = y.data().iter().fold(T::zero(), |a, &x| a + (x - mean) * (x - mean));
    let rss = y
        .data()
        .iter()
        .zip(fitted.data())
        .fold(T::zero(), |a, (&u, &v)| a + (u - v) * (u - v));
    T::one() - rss / tss
}

/// Levels of the four factors of the piecewise-polynomial design, in the mode
/// order `(country, period, sex, age)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpLevels {
    pub countries: Vec<String>,
    pub periods: Vec<String>,
    pub sexes: Vec<String>,
    /// Starting age of each age group, e.g. `0, 1, 5, 10, ..., 105`.
    pub ages: Vec<f64>,
}

impl PpLevels {
    pub fn dims(&self) -> Vec<usize> {
        vec![
            self.countries.len(),
            self.periods.len(),
            self.sexes.len(),
            self.ages.len(),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    /// First period and first sex effect pinned to zero; country effects absorb the intercept.
    #[default]
    Corner,
    /// Period and sex effects sum to zero.
    SumToZero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpDesign<T: Scalar> {
    pub levels: PpLevels,
    pub constraint: Constraint,
    pub design: Design<T>,
}

/// Coefficient names of the eight polynomial pieces.
const PIECES: [(&str, usize, i32); 8] = [
    ("phi0", 0, 0),
    ("phi1", 1, 0),
    ("phi11", 1, 1),
    ("phi12", 1, 2),
    ("phi2", 2, 0),
    ("phi21", 2, 1),
    ("phi22", 2, 2),
    ("phi23", 2, 3),
];

fn age_segment(a: f64) -> usize {
    if a == 0.0 {
        0
    } else if a < 20.0 {
        1
    } else {
        2
    }
}

/// Piecewise polynomial in age (constant at age 0, quadratic on `[1, 20)`, cubic
/// from 20) whose coefficients are additive country, period and sex effects.
pub fn build_pp_design<T: Scalar>(levels: &PpLevels, constraint: Constraint) -> Result<PpDesign<T>> {
    for (name, labels) in [
        ("country", &levels.countries),
        ("period", &levels.periods),
        ("sex", &levels.sexes),
    ] {
        if labels.is_empty() {
            return Err(SfaError::InvalidArgument(format!("no {} levels", name)));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = labels.iter().find(|l| !seen.insert(l.as_str())) {
            return Err(SfaError::InvalidArgument(format!("duplicate {} level {:?}", name, dup)));
        }
    }
    let mut seen = Vec::new();
    for &a in &levels.ages {
        if !(a >= 0.0) || !a.is_finite() {
            return Err(SfaError::InvalidArgument(format!("invalid age value {}", a)));
        }
        if seen.contains(&a) {
            return Err(SfaError::InvalidArgument(format!("duplicate age level {}", a)));
        }
        seen.push(a);
    }
    for seg in 0..3 {
        if !levels.ages.iter().any(|&a| age_segment(a) == seg) {
            return Err(SfaError::InvalidArgument(format!("age segment {} has no age groups", seg)));
        }
    }
    let max_age = levels.ages.iter().fold(0.0f64, |m, &a| m.max(a));
    let dims = levels.dims();
    let (nc, nt, ns, na) = (dims[0], dims[1], dims[2], dims[3]);

    let ones = |n: usize| DVector::from_element(n, T::one());
    let unit = |n: usize, i: usize| {
        let mut v = DVector::zeros(n);
        v[i] = T::one();
        v
    };
    let contrast = |n: usize, i: usize| match constraint {
        Constraint::Corner => unit(n, i),
        Constraint::SumToZero => {
            let mut v = unit(n, i);
            v[0] = -T::one();
            v
        }
    };

    let mut columns = Vec::new();
    let mut labels = Vec::new();
    for (piece, seg, pow) in PIECES {
        let basis = DVector::from_iterator(
            na,
            levels.ages.iter().map(|&a| {
                if age_segment(a) == seg {
                    T::of((a / max_age).powi(pow))
                } else {
                    T::zero()
                }
            }),
        );
        for c in 0..nc {
            columns.push(vec![unit(nc, c), ones(nt), ones(ns), basis.clone()]);
            labels.push(format!("{}:country={}", piece, levels.countries[c]));
        }
        for t in 1..nt {
            columns.push(vec![ones(nc), contrast(nt, t), ones(ns), basis.clone()]);
            labels.push(format!("{}:period={}", piece, levels.periods[t]));
        }
        for s in 1..ns {
            columns.push(vec![ones(nc), ones(nt), contrast(ns, s), basis.clone()]);
            labels.push(format!("{}:sex={}", piece, levels.sexes[s]));
        }
    }
    Ok(PpDesign {
        levels: levels.clone(),
        constraint,
        design: Design::separable(dims, columns, labels)?,
    })
}

/// Writes coefficients with their labels as `label,value` CSV.
pub fn write_coefficients_csv<T: Scalar, W: std::io::Write>(w: W, design: &Design<T>, beta: &DVector<T>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["coefficient", "value"])?;
    for (label, b) in design.labels().iter().zip(beta.iter()) {
        wtr.write_record([label.clone(), format!("{}", b.f64())])?;
    }
    wtr.flush()?;
    Ok(())
}
