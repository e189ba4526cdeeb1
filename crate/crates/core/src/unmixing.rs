//! Row-wise proximal updates of the unmixing matrix.
//!
//! Row `c` of `W` is replaced by minimizing the surrogate
//!
//! ```text
//! -log|det W| + ½ Σ_j W_jᵀ A_j W_j + λ ⟨B, W⟩ + ‖W - W_prev‖²_F / (2 η_u)
//! ```
//!
//! over that row only. Writing the new row as `rᵀ W_prev` turns the
//! log-determinant into `-log|r_c|` and the problem into
//! `½ rᵀ K r - log|r_c| - ⟨b, r⟩`, which has a closed-form minimizer.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::data::{AuxTensor, Dataset, UnmixingState};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_solve, logabsdet};
use crate::scalar::Scalar;
use crate::supervision::{loss_and_grads, source_row, FeatureMap, SupervisedTargetModel};

/// `log|det W|` below `-LOGDET_FLOOR_PER_CHANNEL · C` is treated as singular.
pub const LOGDET_FLOOR_PER_CHANNEL: f64 = 50.0;

/// Which root of `r_cc² - q r_cc - K⁻¹_cc = 0` a row update takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RowBranch {
    /// The root with the sign of `q`; this is the exact row minimizer.
    #[default]
    Best,
    /// Always `r_cc > 0`, keeping the sign of `det W` fixed.
    Positive,
}

impl std::str::FromStr for RowBranch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "best" => Ok(RowBranch::Best),
            "positive" => Ok(RowBranch::Positive),
            other => Err(Error::Config(format!("unknown row branch '{other}'"))),
        }
    }
}

impl std::fmt::Display for RowBranch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RowBranch::Best => "best",
            RowBranch::Positive => "positive",
        })
    }
}

/// Linearized supervision gradient; rows at and beyond `M` are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionGradMatrix<F> {
    b: Array2<F>,
    n_targets: usize,
}

impl<F: Scalar> SupervisionGradMatrix<F> {
    pub fn zeros(channels: usize) -> Self {
        SupervisionGradMatrix {
            b: Array2::zeros((channels, channels)),
            n_targets: 0,
        }
    }

    pub fn new(b: Array2<F>, n_targets: usize) -> Result<Self> {
        if b.nrows() != b.ncols() || n_targets > b.nrows() {
            return Err(Error::Dimension(format!(
                "B is {:?} with {n_targets} targets",
                b.dim()
            )));
        }
        if b.slice(s![n_targets.., ..]).iter().any(|&v| v != F::zero()) {
            return Err(Error::Schema("rows of B beyond M must be zero".into()));
        }
        Ok(SupervisionGradMatrix { b, n_targets })
    }

    pub fn matrix(&self) -> &Array2<F> {
        &self.b
    }

    pub fn n_targets(&self) -> usize {
        self.n_targets
    }
}

/// Observed columns of a minibatch: for each sampled trial, `z_i` restricted
/// to the sampled time steps.
#[derive(Debug, Clone)]
pub struct BatchColumns<F> {
    trials: Vec<usize>,
    times: Vec<usize>,
    columns: Vec<Array2<F>>,
}

impl<F: Scalar> BatchColumns<F> {
    pub fn new(data: &Dataset<F>, trials: &[usize], times: &[usize]) -> Result<Self> {
        if trials.is_empty() || times.is_empty() {
            return Err(Error::Empty("minibatch index set".into()));
        }
        let columns = trials
            .iter()
            .map(|&i| data.signal(i).select(Axis(1), times))
            .collect();
        Ok(BatchColumns {
            trials: trials.to_vec(),
            times: times.to_vec(),
            columns,
        })
    }

    /// `(1/(nτ)) Σ_{i∈I} Σ_{t∈T} U_{i,c,t} z_{i,t} z_{i,t}ᵀ`.
    pub fn a_c(&self, u: &AuxTensor<F>, c: usize) -> Array2<F> {
        let ch = self.columns[0].nrows();
        let parts: Vec<Array2<F>> = self
            .trials
            .par_iter()
            .zip(self.columns.par_iter())
            .map(|(&i, z)| {
                let mut weighted = z.clone();
                for (k, &t) in self.times.iter().enumerate() {
                    let wgt = u.u[[i, c, t]];
                    weighted.column_mut(k).mapv_inplace(|v| v * wgt);
                }
                weighted.dot(&z.t())
            })
            .collect();
        let mut acc = Array2::<F>::zeros((ch, ch));
        for p in &parts {
            acc += p;
        }
        let denom = F::from_count(self.trials.len() * self.times.len());
        acc.mapv(|v| v / denom)
    }
}

pub fn compute_a_c<F: Scalar>(
    u: &AuxTensor<F>,
    c: usize,
    data: &Dataset<F>,
    trials: &[usize],
    times: &[usize],
) -> Result<Array2<F>> {
    Ok(BatchColumns::new(data, trials, times)?.a_c(u, c))
}

/// Minibatch estimate of the supervision gradient matrix:
/// row `m` is `(1/n) Σ_{i∈I} (T/τ) Σ_{t∈T} [∇_s ℓ_m]_t z_{i,t}ᵀ`.
pub fn compute_b<F: Scalar>(
    w: &UnmixingState<F>,
    models: &[SupervisedTargetModel<F>],
    data: &Dataset<F>,
    trials: &[usize],
    times: &[usize],
    fmap: &FeatureMap<F>,
) -> Result<SupervisionGradMatrix<F>> {
    let (_, c, t, m_count) = data.dims();
    if models.len() != m_count {
        return Err(Error::Dimension(format!(
            "{} models for {m_count} targets",
            models.len()
        )));
    }
    if trials.is_empty() || times.is_empty() {
        return Err(Error::Empty("minibatch index set".into()));
    }
    let w_mat = w.w().view();
    let parts: Vec<Array2<F>> = trials
        .par_iter()
        .map(|&i| {
            let z = data.signal(i);
            let mut rows = Array2::<F>::zeros((m_count, c));
            for (m, model) in models.iter().enumerate() {
                let src = source_row(w_mat, m, z);
                let grad = loss_and_grads(model, src.view(), data.labels(i)[m], fmap)?.grad_s;
                let mut row = rows.row_mut(m);
                for &tt in times {
                    row.scaled_add(grad[tt], &z.column(tt));
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let mut acc = Array2::<F>::zeros((c, c));
    for p in &parts {
        let mut top = acc.slice_mut(s![..m_count, ..]);
        top += p;
    }
    let scale = F::from_count(t) / (F::from_count(times.len()) * F::from_count(trials.len()));
    acc.mapv_inplace(|v| v * scale);
    SupervisionGradMatrix::new(acc, m_count)
}

#[inline]
fn inv_rate<F: Scalar>(eta_u: F) -> F {
    if eta_u.is_infinite() {
        F::zero()
    } else {
        eta_u.recip()
    }
}

/// Result of a single row update, with the reparametrization vector.
#[derive(Debug, Clone)]
pub struct RowStep<F> {
    pub state: UnmixingState<F>,
    pub r: Array1<F>,
}

/// Closed-form update of row `c`; every other row is copied unchanged.
pub fn row_update<F: Scalar>(
    w_prev: &UnmixingState<F>,
    a_c: ArrayView2<F>,
    b: &SupervisionGradMatrix<F>,
    c: usize,
    eta_u: F,
    lambda: F,
) -> Result<UnmixingState<F>> {
    Ok(row_update_detail(
        w_prev,
        a_c,
        b.matrix().view(),
        c,
        eta_u,
        lambda,
        RowBranch::Best,
    )?
    .state)
}

/// [`row_update`] on a raw `B` matrix with an explicit root choice, also
/// returning `r`.
pub fn row_update_detail<F: Scalar>(
    w_prev: &UnmixingState<F>,
    a_c: ArrayView2<F>,
    b: ArrayView2<F>,
    c: usize,
    eta_u: F,
    lambda: F,
    branch: RowBranch,
) -> Result<RowStep<F>> {
    let w = w_prev.w();
    let ch = w.nrows();
    if c >= ch || a_c.dim() != (ch, ch) || b.dim() != (ch, ch) {
        return Err(Error::Dimension(format!(
            "row {c} update with W {:?}, A {:?}, B {:?}",
            w.dim(),
            a_c.dim(),
            b.dim()
        )));
    }
    if !(eta_u > F::zero()) {
        return Err(Error::Config("eta_u must be positive".into()));
    }
    let inv_eta = inv_rate(eta_u);
    let mut reg = a_c.to_owned();
    for j in 0..ch {
        reg[[j, j]] += inv_eta;
    }
    let mut k = w.dot(&reg).dot(&w.t());
    for i in 0..ch {
        for j in (i + 1)..ch {
            let avg = F::lit(0.5) * (k[[i, j]] + k[[j, i]]);
            k[[i, j]] = avg;
            k[[j, i]] = avg;
        }
    }
    let l = cholesky(k.view())
        .map_err(|e| Error::Singular(format!("row {c}: K is not positive definite ({e})")))?;
    let target = w.row(c).mapv(|v| v * inv_eta) - b.row(c).mapv(|v| v * lambda);
    let rhs = w.dot(&target);
    let mut e_c = Array1::<F>::zeros(ch);
    e_c[c] = F::one();
    let kinv_e = cholesky_solve(l.view(), e_c.view());
    let kinv_b = cholesky_solve(l.view(), rhs.view());
    let a = kinv_e[c];
    let q = kinv_b[c];
    // roots of r² - q r - a = 0, written to avoid cancellation
    let root = (a + F::lit(0.25) * q * q).sqrt();
    let r_cc = match branch {
        RowBranch::Best if q < F::zero() => F::lit(0.5) * q - root,
        _ if q >= F::zero() => root + F::lit(0.5) * q,
        _ => a / (root - F::lit(0.5) * q),
    };
    if r_cc == F::zero() || !r_cc.is_finite() {
        return Err(Error::Singular(format!(
            "row {c}: r_cc = {}",
            r_cc.as_f64()
        )));
    }
    let r = kinv_e.mapv(|v| v / r_cc) + &kinv_b;
    let new_row = w.t().dot(&r);
    let mut w_new = w.clone();
    w_new.row_mut(c).assign(&new_row);
    let logabsdet = w_prev.logabsdet() + r[c].abs().ln();
    let floor = -F::lit(LOGDET_FLOOR_PER_CHANNEL) * F::from_count(ch);
    if !(logabsdet > floor) {
        return Err(Error::Singular(format!(
            "log|det W| = {} after updating row {c}",
            logabsdet.as_f64()
        )));
    }
    Ok(RowStep {
        state: UnmixingState::from_parts(w_new, logabsdet),
        r,
    })
}

/// Updates rows `0..C` in order, each from the previous intermediate.
///
/// `a_for_row(c)` is called lazily so only one `A_c` is alive at a time.
pub fn cyclic_sweep<F, A>(
    w_prev: &UnmixingState<F>,
    mut a_for_row: A,
    b: &SupervisionGradMatrix<F>,
    eta_u: F,
    lambda: F,
    branch: RowBranch,
) -> Result<UnmixingState<F>>
where
    F: Scalar,
    A: FnMut(usize) -> Array2<F>,
{
    let mut state = w_prev.clone();
    for c in 0..state.channels() {
        let a_c = a_for_row(c);
        state = row_update_detail(
            &state,
            a_c.view(),
            b.matrix().view(),
            c,
            eta_u,
            lambda,
            branch,
        )?
        .state;
    }
    let refreshed = state.refresh()?;
    let floor = -F::lit(LOGDET_FLOOR_PER_CHANNEL) * F::from_count(refreshed.channels());
    if !(refreshed.logabsdet() > floor) {
        return Err(Error::Singular(format!(
            "log|det W| = {} after sweep",
            refreshed.logabsdet().as_f64()
        )));
    }
    Ok(refreshed)
}

/// `-log|det W| + ½ Σ_c W_cᵀ A_c W_c + λ⟨B, W⟩ + ‖W - W_anchor‖²_F / (2 η_u)`.
pub fn per_iteration_objective<F: Scalar>(
    w: ArrayView2<F>,
    w_anchor: ArrayView2<F>,
    a_set: &[Array2<F>],
    b: ArrayView2<F>,
    eta_u: F,
    lambda: F,
) -> Result<F> {
    let ch = w.nrows();
    if a_set.len() != ch {
        return Err(Error::Dimension(format!(
            "{} A matrices for {ch} rows",
            a_set.len()
        )));
    }
    let mut val = -logabsdet(w)?;
    for (c, a) in a_set.iter().enumerate() {
        let row = w.row(c);
        val += F::lit(0.5) * row.dot(&a.dot(&row));
    }
    if lambda != F::zero() {
        val += lambda * (&b * &w).sum();
    }
    let inv_eta = inv_rate(eta_u);
    if inv_eta != F::zero() {
        let diff = &w - &w_anchor;
        val += F::lit(0.5) * inv_eta * diff.iter().map(|&d| d * d).sum::<F>();
    }
    Ok(val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_is_a_fixed_point() {
        let w = UnmixingState::new(Array2::<f64>::eye(2)).unwrap();
        let a = Array2::eye(2);
        let b = Array2::zeros((2, 2));
        let step = row_update_detail(&w, a.view(), b.view(), 0, 1.0, 0.0, RowBranch::Best).unwrap();
        // K = 2I, b = e₁, K⁻¹b = ½e₁, r_cc = √(½ + 1/16) + ¼ = 1
        assert!((step.r[0] - 1.0).abs() < 1e-15);
        assert!(step.r[1].abs() < 1e-15);
        assert_eq!(step.state.w(), &Array2::<f64>::eye(2));
    }

    #[test]
    fn locality_and_invertibility() {
        let w =
            UnmixingState::new(array![[1.0, 0.2, 0.1], [0.3, 0.9, -0.2], [0.0, 0.4, 1.1]]).unwrap();
        let a = array![[2.0, 0.3, 0.1], [0.3, 1.5, 0.2], [0.1, 0.2, 0.8]];
        let b = SupervisionGradMatrix::new(
            array![[0.5, -0.2, 0.1], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
            1,
        )
        .unwrap();
        for c in 0..3 {
            let out = row_update(&w, a.view(), &b, c, 0.5, 0.1).unwrap();
            for j in 0..3 {
                if j != c {
                    assert_eq!(out.w().row(j), w.w().row(j));
                }
            }
            let fresh: f64 = logabsdet(out.w().view()).unwrap();
            assert!((fresh - out.logabsdet()).abs() <= 1e-10 * fresh.abs().max(1.0));
        }
    }

    #[test]
    fn b_rows_beyond_targets_must_vanish() {
        assert!(SupervisionGradMatrix::new(array![[0.0, 0.0], [1.0, 0.0]], 1).is_err());
        assert!(SupervisionGradMatrix::new(array![[3.0, 0.0], [0.0, 0.0]], 1).is_ok());
    }

    #[test]
    fn objective_hand_value() {
        let eye = Array2::<f64>::eye(3);
        let a_set = vec![eye.clone(), eye.clone(), eye.clone()];
        let zero = Array2::zeros((3, 3));
        let v =
            per_iteration_objective(eye.view(), eye.view(), &a_set, zero.view(), 1.0, 0.5).unwrap();
        assert!((v - 1.5).abs() < 1e-15);
    }

    #[test]
    fn non_positive_rate_rejected() {
        let w = UnmixingState::new(Array2::<f64>::eye(2)).unwrap();
        let a = Array2::eye(2);
        let b = Array2::zeros((2, 2));
        assert!(row_update_detail(&w, a.view(), b.view(), 0, 0.0, 0.0, RowBranch::Best).is_err());
        assert!(row_update_detail(&w, a.view(), b.view(), 2, 1.0, 0.0, RowBranch::Best).is_err());
    }

    #[test]
    fn best_branch_flips_sign_when_q_is_negative() {
        let w = UnmixingState::new(Array2::<f64>::eye(2)).unwrap();
        let a = Array2::eye(2);
        let b = array![[3.0, 0.0], [0.0, 0.0]];
        // b = e₁ − B₁ = −2e₁, K = 2I, so q = −1 and a = ½.
        let best = row_update_detail(&w, a.view(), b.view(), 0, 1.0, 1.0, RowBranch::Best).unwrap();
        let pos =
            row_update_detail(&w, a.view(), b.view(), 0, 1.0, 1.0, RowBranch::Positive).unwrap();
        assert!(best.r[0] < 0.0 && pos.r[0] > 0.0);
        let a_set = vec![a.clone(), a.clone()];
        let f = |s: &UnmixingState<f64>| {
            per_iteration_objective(s.w().view(), w.w().view(), &a_set, b.view(), 1.0, 1.0).unwrap()
        };
        assert!(f(&best.state) < f(&pos.state) - 1e-3);
    }

    #[test]
    fn degenerate_a_without_proximity_is_singular() {
        let w = UnmixingState::new(Array2::<f64>::eye(2)).unwrap();
        let a = array![[1.0, 0.0], [0.0, 0.0]];
        let b = Array2::zeros((2, 2));
        let err = row_update_detail(
            &w,
            a.view(),
            b.view(),
            0,
            f64::INFINITY,
            0.0,
            RowBranch::Best,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Singular(_)));
    }
}
