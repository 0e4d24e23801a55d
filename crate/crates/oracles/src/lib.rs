//! Brute-force reference computations for the test suites.
//!
//! Nothing here shares code paths with `sfa-core`: index bookkeeping is done by
//! explicit nested loops, Kronecker products by element formulas, Gaussian
//! densities and conditionals by dense Cholesky on the full covariance, and
//! optimization by a plain BFGS.

use nalgebra::{DMatrix, DVector};

/// Enumerates a K-way array with the first index innermost.
pub fn index_walk_vec(dims: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Vec<f64> {
    fn rec(
        dims: &[usize],
        level: usize,
        idx: &mut Vec<usize>,
        out: &mut Vec<f64>,
        f: &mut dyn FnMut(&[usize]) -> f64,
    ) {
        if level == usize::MAX {
            out.push(f(idx));
            return;
        }
        for i in 0..dims[level] {
            idx[level] = i;
            let next = if level == 0 { usize::MAX } else { level - 1 };
            rec(dims, next, idx, out, f);
        }
    }
    let mut idx = vec![0; dims.len()];
    let mut out = Vec::new();
    rec(dims, dims.len() - 1, &mut idx, &mut out, &mut f);
    out
}

/// Mode matricization from the column-index formula
/// `col = Σ_{j≠mode} i_j ∏_{l<j, l≠mode} m_l`.
pub fn matricize_by_index(
    dims: &[usize],
    mode: usize,
    mut f: impl FnMut(&[usize]) -> f64,
) -> DMatrix<f64> {
    let total: usize = dims.iter().product();
    let mut out = DMatrix::zeros(dims[mode], total / dims[mode]);
    let mut idx = vec![0usize; dims.len()];
    for _ in 0..total {
        let mut col = 0;
        let mut stride = 1;
        for j in 0..dims.len() {
            if j == mode {
                continue;
            }
            col += idx[j] * stride;
            stride *= dims[j];
        }
        out[(idx[mode], col)] = f(&idx);
        for j in 0..dims.len() {
            idx[j] += 1;
            if idx[j] < dims[j] {
                break;
            }
            idx[j] = 0;
        }
    }
    out
}

/// Element-formula Kronecker product.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    DMatrix::from_fn(ar * br, ac * bc, |i, j| a[(i / br, j / bc)] * b[(i % br, j % bc)])
}

/// `M_K ⊗ ... ⊗ M_1` for matrices given in mode order.
pub fn kron_chain(mats: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut acc = DMatrix::from_element(1, 1, 1.0);
    for m in mats {
        acc = kron(m, &acc);
    }
    acc
}

pub fn mvn_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let n = x.len() as f64;
    let chol = cov.clone().cholesky().expect("covariance must be PD");
    let diff = x - mean;
    let z = chol.l().solve_lower_triangular(&diff).unwrap();
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    -0.5 * n * (2.0 * std::f64::consts::PI).ln() - 0.5 * logdet - 0.5 * z.norm_squared()
}

/// Conditional law of `x[hidden]` given `x[given] = values` under `N(mean, cov)`.
pub fn gaussian_condition(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    hidden: &[usize],
    given: &[usize],
    values: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let sub = |r: &[usize], c: &[usize]| DMatrix::from_fn(r.len(), c.len(), |i, j| cov[(r[i], c[j])]);
    let s_hh = sub(hidden, hidden);
    let s_hg = sub(hidden, given);
    let s_gg = sub(given, given);
    let mu_h = DVector::from_fn(hidden.len(), |i, _| mean[hidden[i]]);
    if given.is_empty() {
        return (mu_h, s_hh);
    }
    let mu_g = DVector::from_fn(given.len(), |i, _| mean[given[i]]);
    let inv = s_gg.try_inverse().expect("observed block invertible");
    let gain = &s_hg * inv;
    let cm = mu_h + &gain * (values - mu_g);
    let cc = s_hh - &gain * s_hg.transpose();
    (cm, cc)
}

/// Result of [`bfgs_minimize`].
#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

/// Plain BFGS with Armijo backtracking. `fg` returns value and gradient.
pub fn bfgs_minimize(
    mut fg: impl FnMut(&DVector<f64>) -> (f64, DVector<f64>),
    x0: DVector<f64>,
    grad_tol: f64,
    max_iter: usize,
) -> Minimum {
    let n = x0.len();
    let mut x = x0;
    let (mut f, mut g) = fg(&x);
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut it = 0;
    while it < max_iter && g.amax() > grad_tol {
        it += 1;
        let mut dir = -(&h * &g);
        if dir.dot(&g) >= 0.0 {
            h = DMatrix::identity(n, n);
            dir = -g.clone();
        }
        let slope = dir.dot(&g);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn = &x + &dir * step;
            let (fn_, gn) = fg(&xn);
            if fn_.is_finite() && fn_ <= f + 1e-4 * step * slope {
                accepted = Some((xn, fn_, gn));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else { break };
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-300 {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let a = &i - &s * y.transpose() * rho;
            let b = &i - &y * s.transpose() * rho;
            h = &a * &h * &b + &s * s.transpose() * rho;
        }
        x = xn;
        f = fn_;
        g = gn;
    }
    Minimum {
        grad_norm: g.amax(),
        x,
        value: f,
        iterations: it,
    }
}

/// Central-difference gradient.
pub fn numerical_gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    })
}

/// One-sample Kolmogorov–Smirnov statistic and asymptotic p-value.
pub fn ks_test(sample: &[f64], cdf: impl Fn(f64) -> f64) -> (f64, f64) {
    let mut xs = sample.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let c = cdf(x);
        d = d.max((i as f64 + 1.0) / n - c).max(c - i as f64 / n);
    }
    let sn = n.sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let mut p = 0.0;
    for k in 1..200 {
        let kf = k as f64;
        let term = 2.0 * (-1f64).powi(k - 1) * (-2.0 * kf * kf * lambda * lambda).exp();
        p += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    (d, p.clamp(0.0, 1.0))
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Standard error of the mean of an autocorrelated series via non-overlapping batch means.
pub fn batch_means_se(x: &[f64], batches: usize) -> f64 {
    let size = x.len() / batches;
    let means: Vec<f64> = (0..batches)
        .map(|b| mean(&x[b * size..(b + 1) * size]))
        .collect();
    (variance(&means) / batches as f64).sqrt()
}

/// Numerical rank from singular values above `tol * σ_max`.
pub fn numerical_rank(m: &DMatrix<f64>, tol: f64) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    sv.iter().filter(|&&s| s > tol * max).count()
}

/// Solves weighted least squares `min (y - Xb)' W (y - Xb)` with dense `W`.
pub fn dense_wls(x: &DMatrix<f64>, y: &DVector<f64>, w: &DMatrix<f64>) -> DVector<f64> {
    let xtw = x.transpose() * w;
    let lhs = &xtw * x;
    let rhs = &xtw * y;
    lhs.lu().solve(&rhs).expect("WLS system solvable")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bfgs_finds_quadratic_minimum() {
        let m = bfgs_minimize(
            |x| {
                let f = (x[0] - 1.0).powi(2) + 10.0 * (x[1] + 2.0).powi(2);
                let g = DVector::from_vec(vec![2.0 * (x[0] - 1.0), 20.0 * (x[1] + 2.0)]);
                (f, g)
            },
            DVector::zeros(2),
            1e-10,
            200,
        );
        assert!((m.x[0] - 1.0).abs() < 1e-8 && (m.x[1] + 2.0).abs() < 1e-8);
    }

    #[test]
    fn kron_block_structure() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = DMatrix::identity(2, 2);
        let k = kron(&a, &b);
        assert_eq!(k[(0, 2)], 2.0);
        assert_eq!(k[(3, 1)], 3.0);
    }

    #[test]
    fn index_walk_order() {
        let v = index_walk_vec(&[2, 2], |i| (i[0] + 10 * i[1]) as f64);
        assert_eq!(v, vec![0.0, 1.0, 10.0, 11.0]);
    }
}

/// Gauss–Hermite rule for `∫ f(x) e^{-x²} dx` by the Golub–Welsch eigenproblem.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        let b = (i as f64 / 2.0).sqrt();
        j[(i, i - 1)] = b;
        j[(i - 1, i)] = b;
    }
    let eig = j.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], std::f64::consts::PI.sqrt() * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    pairs.into_iter().unzip()
}
