//! Dense K-way arrays with the first index varying fastest.
//!
//! Every other module relies on the linearization fixed here: the entry at
//! multi-index `(i_1, ..., i_K)` lives at `i_1 + m_1 (i_2 + m_2 (i_3 + ...))`.
//! With this order a Kronecker product `A_K ⊗ ... ⊗ A_1` acting on `vec(T)` is
//! the same as multiplying mode `j` by `A_j` for every `j`.

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut, DVector};

use crate::error::{Result, SfaError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor<T: Scalar> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> DenseTensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_dims(&dims)?;
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(SfaError::Shape(format!(
                "data has {} entries but dims {:?} need {}",
                data.len(),
                dims,
                len
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        check_dims(&dims)?;
        let len = dims.iter().product();
        Ok(Self {
            dims,
            data: vec![T::zero(); len],
        })
    }

    /// Builds a tensor by evaluating `f` at every multi-index, in storage order.
    pub fn from_fn(dims: Vec<usize>, mut f: impl FnMut(&[usize]) -> T) -> Result<Self> {
        check_dims(&dims)?;
        let len: usize = dims.iter().product();
        let mut idx = vec![0usize; dims.len()];
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f(&idx));
            increment(&mut idx, &dims);
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Product of all dimensions except `mode` (the number of columns of the mode matricization).
    pub fn other_size(&self, mode: usize) -> usize {
        self.len() / self.dims[mode]
    }

    pub fn check_mode(&self, mode: usize) -> Result<()> {
        if mode >= self.order() {
            Err(SfaError::ModeOutOfRange {
                mode,
                order: self.order(),
            })
        } else {
            Ok(())
        }
    }

    pub fn linear_index(&self, idx: &[usize]) -> usize {
        linear_index(&self.dims, idx)
    }

    pub fn multi_index(&self, linear: usize) -> Vec<usize> {
        multi_index(&self.dims, linear)
    }

    pub fn get(&self, idx: &[usize]) -> T {
        self.data[self.linear_index(idx)]
    }

    /// `vec(T)` in storage order.
    pub fn vec(&self) -> DVector<T> {
        DVector::from_column_slice(&self.data)
    }

    /// Mode-`mode` matricization: `m_mode` rows, remaining indices enumerate the
    /// columns with earlier modes varying fastest.
    pub fn matricize(&self, mode: usize) -> Result<DMatrix<T>> {
        self.check_mode(mode)?;
        let (left, m, right) = split_sizes(&self.dims, mode);
        let mut out = DMatrix::zeros(m, left * right);
        for r in 0..right {
            for a in 0..m {
                let src = left * (a + m * r);
                for l in 0..left {
                    out[(a, l + left * r)] = self.data[src + l];
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`DenseTensor::matricize`].
    pub fn dematricize(mat: &DMatrix<T>, mode: usize, dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        if mode >= dims.len() {
            return Err(SfaError::ModeOutOfRange {
                mode,
                order: dims.len(),
            });
        }
        let (left, m, right) = split_sizes(dims, mode);
        if mat.nrows() != m || mat.ncols() != left * right {
            return Err(SfaError::Shape(format!(
                "{}x{} matrix cannot be folded into mode {} of {:?}",
                mat.nrows(),
                mat.ncols(),
                mode,
                dims
            )));
        }
        let mut data = vec![T::zero(); m * left * right];
        for r in 0..right {
            for a in 0..m {
                let dst = left * (a + m * r);
                for l in 0..left {
                    data[dst + l] = mat[(a, l + left * r)];
                }
            }
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    /// Mode product `T ×_mode A`: the result's mode-`mode` matricization is `A · T_(mode)`.
    pub fn mode_multiply(&self, a: &DMatrix<T>, mode: usize) -> Result<Self> {
        self.check_mode(mode)?;
        let (left, m, right) = split_sizes(&self.dims, mode);
        if a.ncols() != m {
            return Err(SfaError::Shape(format!(
                "matrix with {} columns cannot act on mode {} of size {}",
                a.ncols(),
                mode,
                m
            )));
        }
        let p = a.nrows();
        let mut dims = self.dims.clone();
        dims[mode] = p;
        check_dims(&dims)?;
        let mut data = vec![T::zero(); left * p * right];
        if left == 1 {
            // The array is an m × right column-major matrix.
            let x = DMatrixView::from_slice(&self.data, m, right);
            DMatrixViewMut::from_slice(&mut data, p, right).gemm(T::one(), a, &x, T::zero());
        } else {
            // Each block of fixed slower indices is a left × m matrix multiplied by Aᵀ.
            let at = a.transpose();
            for r in 0..right {
                let x = DMatrixView::from_slice(&self.data[left * m * r..left * m * (r + 1)], left, m);
                DMatrixViewMut::from_slice(&mut data[left * p * r..left * p * (r + 1)], left, p).gemm(T::one(), &x, &at, T::zero());
            }
        }
        Ok(Self { dims, data })
    }

    /// Applies one matrix per mode (`None` leaves that mode untouched).
    pub fn multilinear(&self, mats: &[Option<&DMatrix<T>>]) -> Result<Self> {
        if mats.len() != self.order() {
            return Err(SfaError::Shape(format!(
                "{} matrices for a {}-way array",
                mats.len(),
                self.order()
            )));
        }
        let mut out = self.clone();
        for (mode, mat) in mats.iter().enumerate() {
            if let Some(a) = mat {
                out = out.mode_multiply(a, mode)?;
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.dims != other.dims {
            return Err(SfaError::Shape(format!(
                "dims {:?} and {:?} differ",
                self.dims, other.dims
            )));
        }
        Ok(Self {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    pub fn norm_squared(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x * x)
    }

    pub fn dot(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
    }

    /// Converts to another scalar type through `f64`.
    pub fn cast<U: Scalar>(&self) -> DenseTensor<U> {
        DenseTensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| U::of(x.f64())).collect(),
        }
    }
}

/// Standard Kronecker product; block `(r, s)` of the result is `a[(r, s)] * b`.
pub fn kronecker<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    a.kronecker(b)
}

/// Assembles `A_K ⊗ ... ⊗ A_1` from mode matrices listed in mode order. Only
/// meant for small verification problems.
pub fn kronecker_chain<T: Scalar>(mats: &[DMatrix<T>]) -> DMatrix<T> {
    let mut acc = DMatrix::from_element(1, 1, T::one());
    for m in mats {
        acc = kronecker(m, &acc);
    }
    acc
}

/// Dense array with an observation mask (`true` = observed).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedTensor<T: Scalar> {
    tensor: DenseTensor<T>,
    mask: Vec<bool>,
}

impl<T: Scalar> MaskedTensor<T> {
    pub fn new(tensor: DenseTensor<T>, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != tensor.len() {
            return Err(SfaError::Shape(format!(
                "mask has {} entries, tensor has {}",
                mask.len(),
                tensor.len()
            )));
        }
        if !mask.iter().any(|&b| b) {
            return Err(SfaError::InvalidArgument(
                "masked tensor has no observed entries".into(),
            ));
        }
        Ok(Self { tensor, mask })
    }

    pub fn fully_observed(tensor: DenseTensor<T>) -> Self {
        let mask = vec![true; tensor.len()];
        Self { tensor, mask }
    }

    pub fn tensor(&self) -> &DenseTensor<T> {
        &self.tensor
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn dims(&self) -> &[usize] {
        self.tensor.dims()
    }

    pub fn n_observed(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn n_missing(&self) -> usize {
        self.mask.len() - self.n_observed()
    }

    pub fn is_complete(&self) -> bool {
        self.mask.iter().all(|&b| b)
    }

    pub fn missing_indices(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&l| !self.mask[l]).collect()
    }

    /// Copy with the listed cells additionally marked missing and their values zeroed,
    /// so nothing downstream can read them.
    pub fn with_hidden(&self, cells: &[usize]) -> Result<Self> {
        let mut tensor = self.tensor.clone();
        let mut mask = self.mask.clone();
        for &l in cells {
            mask[l] = false;
            tensor.data_mut()[l] = T::zero();
        }
        Self::new(tensor, mask)
    }

    pub fn into_parts(self) -> (DenseTensor<T>, Vec<bool>) {
        (self.tensor, self.mask)
    }
}

pub(crate) fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() {
        return Err(SfaError::Shape("a tensor needs at least one mode".into()));
    }
    if let Some(pos) = dims.iter().position(|&d| d == 0) {
        return Err(SfaError::Shape(format!("mode {} has zero length", pos)));
    }
    Ok(())
}

/// `(∏_{j<mode} m_j, m_mode, ∏_{j>mode} m_j)`.
pub(crate) fn split_sizes(dims: &[usize], mode: usize) -> (usize, usize, usize) {
    let left = dims[..mode].iter().product();
    let right = dims[mode + 1..].iter().product();
    (left, dims[mode], right)
}

pub fn linear_index(dims: &[usize], idx: &[usize]) -> usize {
    let mut lin = 0;
    let mut stride = 1;
    for (&i, &d) in idx.iter().zip(dims) {
        debug_assert!(i < d);
        lin += i * stride;
        stride *= d;
    }
    lin
}

pub fn multi_index(dims: &[usize], mut linear: usize) -> Vec<usize> {
    dims.iter()
        .map(|&d| {
            let i = linear % d;
            linear /= d;
            i
        })
        .collect()
}

fn increment(idx: &mut [usize], dims: &[usize]) {
    for (i, &d) in idx.iter_mut().zip(dims) {
        *i += 1;
        if *i < d {
            return;
        }
        *i = 0;
    }
}
