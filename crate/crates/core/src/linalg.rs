//! Small dense linear algebra for C×C problems.
//!
//! Channel counts are small (tens at most), so everything here is a
//! straightforward O(C³) routine on row-major `ndarray` storage.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lower-triangular Cholesky factor `L` with `a = L Lᵀ`.
///
/// Only the lower triangle of `a` is read.
pub fn cholesky<F: Scalar>(a: ArrayView2<F>) -> Result<Array2<F>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Dimension(format!(
            "cholesky of non-square {}x{}",
            n,
            a.ncols()
        )));
    }
    let mut l = Array2::<F>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > F::zero()) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite(format!(
                "pivot {j} is {}",
                d.as_f64()
            )));
        }
        let djj = d.sqrt();
        l[[j, j]] = djj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / djj;
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ x = b` given the Cholesky factor.
pub fn cholesky_solve<F: Scalar>(l: ArrayView2<F>, b: ArrayView1<F>) -> Array1<F> {
    let n = l.nrows();
    let mut y = b.to_owned();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[[k, i]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    y
}

/// LU factorization with partial pivoting, stored compactly.
#[derive(Debug, Clone)]
pub struct Lu<F> {
    lu: Array2<F>,
    perm: Vec<usize>,
    sign: F,
}

impl<F: Scalar> Lu<F> {
    pub fn new(a: ArrayView2<F>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Dimension(format!(
                "LU of non-square {}x{}",
                n,
                a.ncols()
            )));
        }
        let mut lu = a.to_owned();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = F::one();
        for k in 0..n {
            let mut p = k;
            let mut best = lu[[k, k]].abs();
            for i in (k + 1)..n {
                let v = lu[[i, k]].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == F::zero() || !best.is_finite() {
                return Err(Error::Singular(format!("zero pivot in column {k}")));
            }
            if p != k {
                for j in 0..n {
                    lu.swap([k, j], [p, j]);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = lu[[k, k]];
            for i in (k + 1)..n {
                let factor = lu[[i, k]] / pivot;
                lu[[i, k]] = factor;
                for j in (k + 1)..n {
                    let ukj = lu[[k, j]];
                    lu[[i, j]] -= factor * ukj;
                }
            }
        }
        Ok(Lu { lu, perm, sign })
    }

    /// `(sign(det), log|det|)`.
    pub fn sign_logabsdet(&self) -> (F, F) {
        let mut sign = self.sign;
        let mut acc = F::zero();
        for k in 0..self.lu.nrows() {
            let d = self.lu[[k, k]];
            if d < F::zero() {
                sign = -sign;
            }
            acc += d.abs().ln();
        }
        (sign, acc)
    }

    pub fn solve(&self, b: ArrayView1<F>) -> Array1<F> {
        let n = self.lu.nrows();
        let mut x: Array1<F> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s -= self.lu[[i, k]] * x[k];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.lu[[i, k]] * x[k];
            }
            x[i] = s / self.lu[[i, i]];
        }
        x
    }

    pub fn inverse(&self) -> Array2<F> {
        let n = self.lu.nrows();
        let mut inv = Array2::<F>::zeros((n, n));
        let mut e = Array1::<F>::zeros(n);
        for j in 0..n {
            e.fill(F::zero());
            e[j] = F::one();
            let col = self.solve(e.view());
            inv.column_mut(j).assign(&col);
        }
        inv
    }
}

/// `log|det a|`, failing on exactly singular input.
pub fn logabsdet<F: Scalar>(a: ArrayView2<F>) -> Result<F> {
    Ok(Lu::new(a)?.sign_logabsdet().1)
}

pub fn inverse<F: Scalar>(a: ArrayView2<F>) -> Result<Array2<F>> {
    Ok(Lu::new(a)?.inverse())
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching orthonormal
/// eigenvectors as columns.
pub fn symmetric_eigen<F: Scalar>(a: ArrayView2<F>) -> Result<(Array1<F>, Array2<F>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Dimension(format!(
            "eigendecomposition of non-square {}x{}",
            n,
            a.ncols()
        )));
    }
    let mut m = a.to_owned();
    // symmetrize to absorb rounding in the caller's construction
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = (m[[i, j]] + m[[j, i]]) * F::lit(0.5);
            m[[i, j]] = avg;
            m[[j, i]] = avg;
        }
    }
    let mut v = Array2::<F>::eye(n);
    let eps = F::epsilon();
    for _sweep in 0..100 {
        let mut off = F::zero();
        let mut diag = F::zero();
        for i in 0..n {
            diag += m[[i, i]] * m[[i, i]];
            for j in (i + 1)..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        if off <= eps * eps * diag || off == F::zero() {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq == F::zero() {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (F::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + F::one()).sqrt());
                let c = F::one() / (t * t + F::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m[[j, j]]
            .partial_cmp(&m[[i, i]])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values: Array1<F> = order.iter().map(|&i| m[[i, i]]).collect();
    let vectors = v.select(Axis(1), &order);
    Ok((values, vectors))
}

/// Singular values of a square matrix, descending.
pub fn singular_values<F: Scalar>(a: ArrayView2<F>) -> Result<Array1<F>> {
    let gram = a.t().dot(&a);
    let (vals, _) = symmetric_eigen(gram.view())?;
    Ok(vals.mapv(|x| x.max(F::zero()).sqrt()))
}

pub fn condition_number<F: Scalar>(a: ArrayView2<F>) -> Result<F> {
    let sv = singular_values(a)?;
    let smin = sv[sv.len() - 1];
    if smin == F::zero() {
        return Ok(F::infinity());
    }
    Ok(sv[0] / smin)
}

/// Largest eigenvalue of a symmetric PSD operator given as a mat-vec closure.
///
/// Power iteration from a fixed start; stops when the Rayleigh quotient
/// changes by less than `tol` relative, or after `max_iter` steps.
pub fn power_iteration<F, M>(dim: usize, mut matvec: M, max_iter: usize, tol: F) -> F
where
    F: Scalar,
    M: FnMut(ArrayView1<F>) -> Array1<F>,
{
    if dim == 0 {
        return F::zero();
    }
    // deterministic, not aligned with any coordinate axis
    let mut x: Array1<F> = (0..dim)
        .map(|i| F::one() + F::lit(0.1) * F::from_count(i % 7))
        .collect();
    let norm = x.dot(&x).sqrt();
    x.mapv_inplace(|v| v / norm);
    let mut lambda = F::zero();
    for _ in 0..max_iter {
        let y = matvec(x.view());
        let next = x.dot(&y);
        let ny = y.dot(&y).sqrt();
        if ny == F::zero() || !ny.is_finite() {
            return next.max(F::zero());
        }
        let converged = (next - lambda).abs() <= tol * next.abs();
        lambda = next;
        x = y.mapv(|v| v / ny);
        if converged {
            break;
        }
    }
    lambda.max(F::zero())
}

/// Squared spectral norm ‖x‖²₂,₂ of a rectangular matrix.
pub fn spectral_norm_sq<F: Scalar>(x: ArrayView2<F>) -> F {
    let gram = x.dot(&x.t());
    power_iteration(gram.nrows(), |v| gram.dot(&v), 10_000, F::lit(1e-8))
}
