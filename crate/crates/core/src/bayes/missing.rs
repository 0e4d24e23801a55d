//! Exact conditional draws of missing cells, one slice at a time.
//!
//! Fix a group mode `g` with precision `P = Σ_g⁻¹`. Given every other slice, slice
//! `j` is array normal with mean `y_j − (P E)_j / P_jj` (`E` the centered array) and
//! covariance `Ω / P_jj`, `Ω = ⊗_{l≠g} Σ_l`. Within the slice the missing cells
//! are then conditioned on the observed ones through the precision
//! `Q = P_jj ⊗_{l≠g} Σ_l⁻¹`, so only `n_miss × n_miss` systems are solved.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::conditionals::std_normal;
use crate::error::{Result, SfaError};
use crate::scalar::Scalar;
use crate::tensor::{split_sizes, DenseTensor};

/// Conditional law of the missing cells of one slice.
#[derive(Debug, Clone)]
pub struct SliceConditional<T: Scalar> {
    /// Linear indices of the missing cells, in slice order.
    pub cells: Vec<usize>,
    pub mean: DVector<T>,
    pub precision: DMatrix<T>,
}

impl<T: Scalar> SliceConditional<T> {
    pub fn covariance(&self) -> Result<DMatrix<T>> {
        let inv = self
            .precision
            .clone()
            .cholesky()
            .ok_or(SfaError::Singular { ratio: 0.0 })?
            .inverse();
        Ok(crate::covariance::symmetrize(inv))
    }
}

/// Law of the missing cells of slice `slice` along `group_mode` given all other
/// cells of `values`. `precisions` are the mode precision matrices; `mean` is the
/// mean array (zero when `None`). Returns `None` when the slice has no missing cells.
pub fn slice_conditional<T: Scalar>(
    values: &DenseTensor<T>,
    mask: &[bool],
    mean: Option<&DenseTensor<T>>,
    precisions: &[DMatrix<T>],
    group_mode: usize,
    slice: usize,
) -> Result<Option<SliceConditional<T>>> {
    Ok(conditional_with_factor(values, mask, mean, precisions, group_mode, slice)?.map(|(c, _)| c))
}

type Factor<T> = nalgebra::Cholesky<T, nalgebra::Dyn>;

fn conditional_with_factor<T: Scalar>(
    values: &DenseTensor<T>,
    mask: &[bool],
    mean: Option<&DenseTensor<T>>,
    precisions: &[DMatrix<T>],
    group_mode: usize,
    slice: usize,
) -> Result<Option<(SliceConditional<T>, Factor<T>)>> {
    let dims = values.dims();
    values.check_mode(group_mode)?;
    if precisions.len() != dims.len() || mask.len() != values.len() {
        return Err(SfaError::Shape("precisions or mask do not match the array".into()));
    }
    let (left, mg, right) = split_sizes(dims, group_mode);
    if slice >= mg {
        return Err(SfaError::InvalidArgument(format!("slice {} out of range", slice)));
    }
    let cell_of = |l: usize, s: usize, r: usize| l + left * (s + mg * r);
    let size = left * right;
    let missing: Vec<usize> = (0..size)
        .filter(|&u| !mask[cell_of(u % left, slice, u / left)])
        .collect();
    if missing.is_empty() {
        return Ok(None);
    }

    let y = values.data();
    let centered = |c: usize| match mean {
        Some(m) => y[c] - m.data()[c],
        None => y[c],
    };
    let pg = &precisions[group_mode];
    let pjj = pg[(slice, slice)];

    // Step 1: slice law given the other slices.
    let mut a = vec![T::zero(); size];
    for u in 0..size {
        let (l, r) = (u % left, u / left);
        let mut pe = T::zero();
        for s in 0..mg {
            let w = pg[(slice, s)];
            if w != T::zero() {
                pe += w * centered(cell_of(l, s, r));
            }
        }
        a[u] = y[cell_of(l, slice, r)] - pe / pjj;
    }

    // Step 2: condition on the observed cells of the slice.
    let mut sub_dims: Vec<usize> = dims.iter().enumerate().filter(|&(l, _)| l != group_mode).map(|(_, &d)| d).collect();
    let mut sub_prec: Vec<&DMatrix<T>> = precisions
        .iter()
        .enumerate()
        .filter(|&(l, _)| l != group_mode)
        .map(|(_, p)| p)
        .collect();
    let one = DMatrix::identity(1, 1);
    if sub_dims.is_empty() {
        sub_dims.push(1);
        sub_prec.push(&one);
    }
    let resid = DenseTensor::new(
        sub_dims.clone(),
        (0..size)
            .map(|u| {
                let c = cell_of(u % left, slice, u / left);
                if mask[c] {
                    y[c] - a[u]
                } else {
                    T::zero()
                }
            })
            .collect(),
    )?;
    let w = resid.multilinear(&sub_prec.iter().map(|p| Some(*p)).collect::<Vec<_>>())?;

    let idx: Vec<Vec<usize>> = missing.iter().map(|&u| crate::tensor::multi_index(&sub_dims, u)).collect();
    let nm = missing.len();
    let mut q = DMatrix::zeros(nm, nm);
    for s in 0..nm {
        for t in s..nm {
            let mut v = pjj;
            for (l, p) in sub_prec.iter().enumerate() {
                v *= p[(idx[s][l], idx[t][l])];
                if v == T::zero() {
                    break;
                }
            }
            q[(s, t)] = v;
            q[(t, s)] = v;
        }
    }
    let chol = q.clone().cholesky().ok_or(SfaError::Singular { ratio: 0.0 })?;
    let wm = DVector::from_iterator(nm, missing.iter().map(|&u| pjj * w.data()[u]));
    let shift = chol.solve(&wm);
    let cond_mean = DVector::from_iterator(nm, missing.iter().zip(shift.iter()).map(|(&u, &s)| a[u] - s));
    Ok(Some((
        SliceConditional {
            cells: missing.iter().map(|&u| cell_of(u % left, slice, u / left)).collect(),
            mean: cond_mean,
            precision: q,
        },
        chol,
    )))
}

/// Redraws every missing cell of `values`, sweeping the slices along `group_mode`.
pub fn sample_missing_cells<T: Scalar, R: Rng + ?Sized>(
    values: &mut DenseTensor<T>,
    mask: &[bool],
    mean: Option<&DenseTensor<T>>,
    precisions: &[DMatrix<T>],
    group_mode: usize,
    rng: &mut R,
) -> Result<()> {
    let mg = values.dims()[group_mode];
    for slice in 0..mg {
        let Some((cond, chol)) = conditional_with_factor(values, mask, mean, precisions, group_mode, slice)? else {
            continue;
        };
        let l = chol.l_dirty();
        let xi = DVector::from_fn(cond.cells.len(), |_, _| std_normal::<T, R>(rng));
        // x = μ + L⁻ᵀ ξ has covariance (L Lᵀ)⁻¹.
        let step = l
            .transpose()
            .solve_upper_triangular(&xi)
            .ok_or(SfaError::Singular { ratio: 0.0 })?;
        let data = values.data_mut();
        for ((&c, &m), &s) in cond.cells.iter().zip(cond.mean.iter()).zip(step.iter()) {
            data[c] = m + s;
        }
    }
    Ok(())
}

fn missing_per_slice(dims: &[usize], mask: &[bool], mode: usize) -> Vec<usize> {
    let (left, mg, _) = split_sizes(dims, mode);
    let mut counts = vec![0; mg];
    for (c, &obs) in mask.iter().enumerate() {
        if !obs {
            counts[(c / left) % mg] += 1;
        }
    }
    counts
}

fn conditioning_cost(counts: &[usize]) -> f64 {
    counts.iter().map(|&n| (n as f64).powi(3)).sum()
}

/// Mode with the fewest slices containing missing cells; ties go to the
/// cheaper conditioning.
pub fn default_group_mode(dims: &[usize], mask: &[bool]) -> usize {
    (0..dims.len())
        .map(|g| {
            let counts = missing_per_slice(dims, mask, g);
            (g, counts.iter().filter(|&&n| n > 0).count(), conditioning_cost(&counts))
        })
        .min_by(|a, b| a.1.cmp(&b.1).then(a.2.partial_cmp(&b.2).unwrap_or(std::cmp::Ordering::Equal)))
        .map(|(g, _, _)| g)
        .unwrap_or(0)
}

/// Mode minimizing the per-sweep cost of the within-slice factorizations.
pub fn cheapest_group_mode(dims: &[usize], mask: &[bool]) -> usize {
    let m = mask.len() as f64;
    (0..dims.len())
        .map(|g| {
            let counts = missing_per_slice(dims, mask, g);
            let touched = counts.iter().filter(|&&n| n > 0).count() as f64;
            // Factorizations plus one Kronecker matvec per touched slice.
            let matvec = touched * (m / dims[g] as f64) * dims.iter().sum::<usize>() as f64;
            (g, conditioning_cost(&counts) / 3.0 + matvec)
        })
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(g, _)| g)
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use sfa_oracles as oracle;

    fn rand_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn no_missing_cells_leave_values_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut v = DenseTensor::from_fn(vec![2, 3], |_| rng.random_range(-1.0..1.0)).unwrap();
        let before = v.clone();
        let p = vec![rand_spd(2, &mut rng), rand_spd(3, &mut rng)];
        sample_missing_cells(&mut v, &[true; 6], None, &p, 0, &mut rng).unwrap();
        assert_eq!(v, before);
    }

    #[test]
    fn slice_conditional_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dims = [2usize, 3, 2];
        for trial in 0..20 {
            let covs: Vec<DMatrix<f64>> = dims.iter().map(|&d| rand_spd(d, &mut rng)).collect();
            let precs: Vec<DMatrix<f64>> = covs.iter().map(|c| c.clone().try_inverse().unwrap()).collect();
            let values = DenseTensor::from_fn(dims.to_vec(), |_| rng.random_range(-2.0..2.0)).unwrap();
            let mean = DenseTensor::from_fn(dims.to_vec(), |_| rng.random_range(-1.0..1.0)).unwrap();
            let mut mask = vec![true; 12];
            let n_miss = 1 + trial % 4;
            while mask.iter().filter(|&&b| !b).count() < n_miss {
                mask[rng.random_range(0..12)] = false;
            }
            let g = trial % 3;
            let dense = oracle::kron_chain(&covs);
            for s in 0..dims[g] {
                let Some(cond) = slice_conditional(&values, &mask, Some(&mean), &precs, g, s).unwrap() else {
                    continue;
                };
                let given: Vec<usize> = (0..12).filter(|c| !cond.cells.contains(c)).collect();
                let vals = DVector::from_iterator(given.len(), given.iter().map(|&c| values.data()[c]));
                let (cm, cc) = oracle::gaussian_condition(&mean.vec(), &dense, &cond.cells, &given, &vals);
                assert!((&cond.mean - cm).amax() < 1e-8);
                assert!((cond.covariance().unwrap() - cc).amax() < 1e-8);
            }
        }
    }

    #[test]
    fn fully_missing_slice_independence_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = vec![3, 2];
        let precs = vec![DMatrix::<f64>::identity(3, 3), DMatrix::identity(2, 2)];
        let mut values = DenseTensor::<f64>::zeros(dims.clone()).unwrap();
        let mask = vec![true, false, true, true, false, true];
        let n = 100_000;
        let (mut s1, mut s2, mut s12) = (0.0f64, 0.0f64, 0.0f64);
        let (mut q1, mut q2) = (0.0f64, 0.0f64);
        for _ in 0..n {
            sample_missing_cells(&mut values, &mask, None, &precs, 0, &mut rng).unwrap();
            let (a, b) = (values.data()[1], values.data()[4]);
            s1 += a;
            s2 += b;
            q1 += a * a;
            q2 += b * b;
            s12 += a * b;
        }
        let nf = n as f64;
        assert!((s1 / nf).abs() < 0.02 && (s2 / nf).abs() < 0.02);
        assert!((q1 / nf - 1.0).abs() < 0.03 && (q2 / nf - 1.0).abs() < 0.03);
        assert!((s12 / nf).abs() < 0.02);
    }

    #[test]
    fn one_way_array() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cov = rand_spd(4, &mut rng);
        let prec = cov.clone().try_inverse().unwrap();
        let values = DenseTensor::from_fn(vec![4], |_| rng.random_range(-1.0..1.0)).unwrap();
        let mask = vec![true, false, true, true];
        let cond = slice_conditional(&values, &mask, None, &[prec], 0, 1).unwrap().unwrap();
        let vals = DVector::from_vec(vec![values.data()[0], values.data()[2], values.data()[3]]);
        let (cm, cc) = oracle::gaussian_condition(&DVector::zeros(4), &cov, &[1], &[0, 2, 3], &vals);
        assert!((&cond.mean - cm).amax() < 1e-10);
        assert!((cond.covariance().unwrap() - cc).amax() < 1e-10);
    }

    #[test]
    fn group_mode_choice() {
        // Two missing cells in the same mode-1 slice but in different mode-0 slices.
        let dims = [2, 3];
        let mut mask = vec![true; 6];
        mask[2] = false;
        mask[3] = false;
        assert_eq!(default_group_mode(&dims, &mask), 1);
    }

}
