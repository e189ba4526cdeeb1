//! Super-Gaussian source densities and the auxiliary-variable updates.
//!
//! A density `exp(-g(x))` with `g(√x)` increasing and concave admits the
//! variational form `g(x) = min_{u ≥ 0} ½ u x² + f(u)`, whose minimizer is
//! `u = g'(x)/x`. Normalizing constants of `g` are dropped throughout.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, ArrayView2, Axis, Zip};
use rayon::prelude::*;

use crate::data::{AuxTensor, Dataset, UnmixingState};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default clamp on auxiliary weights; entries with |x| below 1e-8 saturate.
pub const DEFAULT_U_MAX: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensityKind {
    /// `g(x) = |x|`
    Laplace,
    /// `g(x) = x²/2` for `|x| ≤ 1`, `|x| - 1/2` otherwise
    Huber,
}

impl fmt::Display for DensityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DensityKind::Laplace => f.write_str("laplace"),
            DensityKind::Huber => f.write_str("huber"),
        }
    }
}

impl FromStr for DensityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "laplace" => Ok(DensityKind::Laplace),
            "huber" => Ok(DensityKind::Huber),
            other => Err(Error::Config(format!("unknown density '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuperGaussianDensity<F> {
    pub kind: DensityKind,
    pub u_max: F,
}

impl<F: Scalar> SuperGaussianDensity<F> {
    pub fn new(kind: DensityKind, u_max: F) -> Result<Self> {
        if !(u_max > F::zero()) {
            return Err(Error::Config("u_max must be positive".into()));
        }
        Ok(SuperGaussianDensity { kind, u_max })
    }

    pub fn laplace() -> Self {
        SuperGaussianDensity {
            kind: DensityKind::Laplace,
            u_max: F::lit(DEFAULT_U_MAX),
        }
    }

    pub fn huber() -> Self {
        SuperGaussianDensity {
            kind: DensityKind::Huber,
            u_max: F::lit(DEFAULT_U_MAX),
        }
    }

    #[inline]
    pub fn g(&self, x: F) -> F {
        let a = x.abs();
        match self.kind {
            DensityKind::Laplace => a,
            DensityKind::Huber => {
                if a <= F::one() {
                    F::lit(0.5) * x * x
                } else {
                    a - F::lit(0.5)
                }
            }
        }
    }

    #[inline]
    pub fn g_prime(&self, x: F) -> F {
        match self.kind {
            DensityKind::Laplace => {
                if x == F::zero() {
                    F::zero()
                } else {
                    x.signum()
                }
            }
            DensityKind::Huber => {
                if x.abs() <= F::one() {
                    x
                } else {
                    x.signum()
                }
            }
        }
    }

    /// The convex conjugate-type term `f(u)` of the variational form, when
    /// it is known in closed form.
    #[inline]
    pub fn f(&self, u: F) -> Option<F> {
        match self.kind {
            DensityKind::Laplace => Some(F::lit(0.5) / u),
            DensityKind::Huber => None,
        }
    }

    pub fn has_f(&self) -> bool {
        self.f(F::one()).is_some()
    }

    /// Exact auxiliary weight `g'(x)/x`, clamped to `[0, u_max]`.
    #[inline]
    pub fn weight(&self, x: F) -> F {
        let a = x.abs();
        let u = match self.kind {
            DensityKind::Laplace => {
                if a == F::zero() {
                    self.u_max
                } else {
                    a.recip()
                }
            }
            DensityKind::Huber => {
                if a <= F::one() {
                    F::one()
                } else {
                    a.recip()
                }
            }
        };
        u.min(self.u_max).max(F::zero())
    }

    /// Minimizer over `u ≥ 0` of `½ u x² + f(u) + (u - u_prev)² / (2 η_a)`.
    pub fn proximal_weight(&self, x: F, u_prev: F, eta_a: F) -> Result<F> {
        match self.kind {
            DensityKind::Laplace => Ok(prox_laplace(x, u_prev, eta_a).min(self.u_max)),
            DensityKind::Huber => Err(Error::Unsupported(
                "proximal auxiliary update needs f in closed form; huber has none".into(),
            )),
        }
    }

    /// `½ u x² + f(u)`; `None` when `f` is unknown.
    #[inline]
    pub fn variational_term(&self, u: F, x: F) -> Option<F> {
        self.f(u).map(|fu| F::lit(0.5) * u * x * x + fu)
    }
}

/// Safeguarded Newton on the stationarity condition
/// `x²/2 - 1/(2u²) + (u - p)/η = 0`, which is strictly increasing in `u > 0`.
fn prox_laplace<F: Scalar>(x: F, p: F, eta: F) -> F {
    let half = F::lit(0.5);
    let a = half * x * x;
    let inv_eta = if eta.is_infinite() {
        F::zero()
    } else {
        eta.recip()
    };
    let p = p.max(F::zero());
    let resid = |u: F| a - half / (u * u) + (u - p) * inv_eta;
    let scale = |u: F| a + half / (u * u) + (u - p).abs() * inv_eta;

    let mut hi = p.max(F::one());
    let mut guard = 0;
    while resid(hi) <= F::zero() && guard < 4000 {
        hi = hi + hi;
        guard += 1;
    }
    let mut lo = hi;
    guard = 0;
    while resid(lo) >= F::zero() && guard < 4000 {
        lo *= half;
        guard += 1;
    }
    // start from the unregularized minimizer when it lies in the bracket
    let mut u = if x != F::zero() { x.abs().recip() } else { hi };
    if !(u > lo && u < hi) {
        u = half * (lo + hi);
    }
    let tol = F::lit(1e-12);
    for _ in 0..500 {
        let r = resid(u);
        if r.abs() <= tol * scale(u) {
            break;
        }
        if r > F::zero() {
            hi = u;
        } else {
            lo = u;
        }
        let curvature = (u * u * u).recip() + inv_eta;
        let mut next = u - r / curvature;
        if !(next > lo && next < hi) {
            next = half * (lo + hi);
        }
        if hi - lo <= F::epsilon() * hi {
            u = next;
            break;
        }
        u = next;
    }
    u
}

/// Per-trial unsupervised loss `ℓ₀(W, z) = -log|det W| + (1/T) Σ g([Wz]_{c,t})`.
pub fn unsup_loss<F: Scalar>(
    w: &UnmixingState<F>,
    z: ArrayView2<F>,
    density: &SuperGaussianDensity<F>,
) -> F {
    let y = w.apply(z);
    let t = F::from_count(z.ncols());
    w.neg_logdet() + y.iter().map(|&x| density.g(x)).sum::<F>() / t
}

/// `(1/N) Σ_i ℓ₀(W, z_i)`.
pub fn mean_unsup_loss<F: Scalar>(
    w: &UnmixingState<F>,
    data: &Dataset<F>,
    density: &SuperGaussianDensity<F>,
) -> F {
    let per: Vec<F> = (0..data.n_trials())
        .into_par_iter()
        .map(|i| unsup_loss(w, data.signal(i), density))
        .collect();
    per.into_iter().sum::<F>() / F::from_count(data.n_trials())
}

/// Exact auxiliary update `U_{i,c,t} = g'(x)/x` at `x = [W z_i]_{c,t}`.
pub fn aux_exact<F: Scalar>(
    w: &UnmixingState<F>,
    data: &Dataset<F>,
    density: &SuperGaussianDensity<F>,
) -> AuxTensor<F> {
    let (n, c, t, _) = data.dims();
    let mut u = Array3::<F>::zeros((n, c, t));
    u.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut ui)| {
            let y = w.apply(data.signal(i));
            Zip::from(&mut ui)
                .and(&y)
                .for_each(|o, &x| *o = density.weight(x));
        });
    AuxTensor { u }
}

/// Exact update restricted to the sampled trials and time steps; all other
/// entries keep their previous value.
pub fn aux_exact_partial<F: Scalar>(
    u: &mut AuxTensor<F>,
    w: &UnmixingState<F>,
    data: &Dataset<F>,
    density: &SuperGaussianDensity<F>,
    trials: &[usize],
    times: &[usize],
) {
    let w_mat = w.w();
    let rows: Vec<(usize, Array2<F>)> = trials
        .par_iter()
        .map(|&i| {
            let z = data.signal(i).select(Axis(1), times);
            let y = w_mat.dot(&z);
            (i, y.mapv(|x| density.weight(x)))
        })
        .collect();
    for (i, vals) in rows {
        for (k, &t) in times.iter().enumerate() {
            u.u.slice_mut(s![i, .., t]).assign(&vals.column(k));
        }
    }
}

/// Proximal auxiliary update with step `eta_a`.
pub fn aux_proximal<F: Scalar>(
    w: &UnmixingState<F>,
    data: &Dataset<F>,
    density: &SuperGaussianDensity<F>,
    u_prev: &AuxTensor<F>,
    eta_a: F,
) -> Result<AuxTensor<F>> {
    let (n, c, t, _) = data.dims();
    if u_prev.dim() != (n, c, t) {
        return Err(Error::Dimension(format!(
            "previous auxiliary tensor is {:?}, data is ({n}, {c}, {t})",
            u_prev.dim()
        )));
    }
    let all_trials: Vec<usize> = (0..n).collect();
    let all_times: Vec<usize> = (0..t).collect();
    let mut out = u_prev.clone();
    aux_proximal_partial(&mut out, w, data, density, eta_a, &all_trials, &all_times)?;
    Ok(out)
}

/// Proximal update on the sampled entries only.
pub fn aux_proximal_partial<F: Scalar>(
    u: &mut AuxTensor<F>,
    w: &UnmixingState<F>,
    data: &Dataset<F>,
    density: &SuperGaussianDensity<F>,
    eta_a: F,
    trials: &[usize],
    times: &[usize],
) -> Result<()> {
    if !(eta_a > F::zero()) {
        return Err(Error::Config("eta_a must be positive".into()));
    }
    if !density.has_f() {
        return Err(Error::Unsupported(format!(
            "proximal auxiliary update is unavailable for the {} density",
            density.kind
        )));
    }
    let w_mat = w.w();
    let prev = &u.u;
    let rows: Vec<(usize, Array2<F>)> = trials
        .par_iter()
        .map(|&i| {
            let z = data.signal(i).select(Axis(1), times);
            let y = w_mat.dot(&z);
            let mut out = y.clone();
            for ((ch, k), o) in out.indexed_iter_mut() {
                let p = prev[[i, ch, times[k]]];
                *o = density
                    .proximal_weight(y[[ch, k]], p, eta_a)
                    .expect("density checked above");
            }
            (i, out)
        })
        .collect();
    for (i, vals) in rows {
        for (k, &t) in times.iter().enumerate() {
            u.u.slice_mut(s![i, .., t]).assign(&vals.column(k));
        }
    }
    Ok(())
}

/// `(1/(N T)) Σ_{i,c,t} [½ U x² + f(U)]` at `x = [W z_i]_{c,t}`; `None` if
/// `f` is unknown for this density.
pub fn aux_energy<F: Scalar>(
    w: &UnmixingState<F>,
    data: &Dataset<F>,
    u: &AuxTensor<F>,
    density: &SuperGaussianDensity<F>,
) -> Option<F> {
    if !density.has_f() {
        return None;
    }
    let (n, _, t, _) = data.dims();
    let per: Vec<F> = (0..n)
        .into_par_iter()
        .map(|i| {
            let y = w.apply(data.signal(i));
            let ui = u.u.index_axis(Axis(0), i);
            Zip::from(&y).and(&ui).fold(F::zero(), |acc, &x, &uu| {
                acc + density.variational_term(uu, x).expect("f present")
            })
        })
        .collect();
    Some(per.into_iter().sum::<F>() / F::from_count(n * t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{TargetSchema, Trial};
    use ndarray::{array, Array1};

    fn lap() -> SuperGaussianDensity<f64> {
        SuperGaussianDensity::laplace()
    }

    #[test]
    fn exact_weights() {
        assert_eq!(lap().weight(2.0), 0.5);
        assert_eq!(lap().weight(-4.0), 0.25);
        assert_eq!(lap().weight(0.0), DEFAULT_U_MAX);
        assert_eq!(lap().weight(1e-12), DEFAULT_U_MAX);
        let h = SuperGaussianDensity::<f64>::huber();
        assert_eq!(h.weight(0.5), 1.0);
        assert_eq!(h.weight(-3.0), 1.0 / 3.0);
        assert_eq!(h.weight(0.0), 1.0);
    }

    #[test]
    fn laplace_variational_identity() {
        // min_u ½ u x² + 1/(2u) = |x|, oracle: coarse log-grid then golden refinement
        let d = lap();
        let obj = |u: f64, x: f64| 0.5 * u * x * x + 0.5 / u;
        let mut x: f64 = -5.0;
        while x <= 5.0 {
            if x.abs() > 1e-9 {
                let mut best = (f64::INFINITY, 0.0);
                for k in -600..=600 {
                    let u = 10f64.powf(k as f64 / 100.0);
                    let v = obj(u, x);
                    if v < best.0 {
                        best = (v, u);
                    }
                }
                let (mut a, mut b) = (best.1 / 1.03, best.1 * 1.03);
                let phi = (5f64.sqrt() - 1.0) / 2.0;
                for _ in 0..200 {
                    let c1 = b - phi * (b - a);
                    let c2 = a + phi * (b - a);
                    if obj(c1, x) < obj(c2, x) {
                        b = c2;
                    } else {
                        a = c1;
                    }
                }
                let m = obj(0.5 * (a + b), x);
                assert!((m - x.abs()).abs() < 1e-10, "x={x}: {m}");
                assert!((d.variational_term(d.weight(x), x).unwrap() - x.abs()).abs() < 1e-12);
            }
            x += 0.25;
        }
    }

    #[test]
    fn g_prime_matches_finite_differences() {
        for d in [lap(), SuperGaussianDensity::huber()] {
            for &x in &[-3.0, -1.7, -0.4, 0.3, 0.9, 1.4, 4.0] {
                let h = 1e-6;
                let fd = (d.g(x + h) - d.g(x - h)) / (2.0 * h);
                let gp = d.g_prime(x);
                assert!(
                    (fd - gp).abs() <= 1e-6 * gp.abs().max(1.0),
                    "{:?} x={x}",
                    d.kind
                );
            }
        }
    }

    #[test]
    fn sqrt_composition_increasing_and_concave() {
        for d in [lap(), SuperGaussianDensity::huber()] {
            let h = |v: f64| d.g(v.sqrt());
            let grid: Vec<f64> = (1..=1000).map(|k| k as f64 * 0.1).collect();
            for w in grid.windows(2) {
                assert!(h(w[1]) >= h(w[0]));
                let mid = 0.5 * (w[0] + w[1]);
                assert!(h(mid) + 1e-12 >= 0.5 * (h(w[0]) + h(w[1])));
            }
        }
    }

    #[test]
    fn unsup_loss_hand_values() {
        let z = Array2::<f64>::zeros((2, 2));
        let eye = UnmixingState::new(Array2::eye(2)).unwrap();
        assert_eq!(unsup_loss(&eye, z.view(), &lap()), 0.0);
        let two = UnmixingState::new(Array2::eye(2) * 2.0).unwrap();
        let v = unsup_loss(&two, z.view(), &lap());
        assert!((v + 2.0 * 2f64.ln()).abs() < 1e-14);
        assert!((v + 1.3863).abs() < 1e-4);
    }

    #[test]
    fn unsup_loss_matches_scalar_loop() {
        let w = array![[1.0, 0.3, -0.2], [0.1, 0.9, 0.4], [-0.5, 0.2, 1.2]];
        let z = Array2::from_shape_fn((3, 8), |(c, t)| ((c * 8 + t) as f64 * 0.77).sin() * 2.0);
        let st = UnmixingState::new(w.clone()).unwrap();
        // oracle: explicit loops and a cofactor determinant
        let det = w[[0, 0]] * (w[[1, 1]] * w[[2, 2]] - w[[1, 2]] * w[[2, 1]])
            - w[[0, 1]] * (w[[1, 0]] * w[[2, 2]] - w[[1, 2]] * w[[2, 0]])
            + w[[0, 2]] * (w[[1, 0]] * w[[2, 1]] - w[[1, 1]] * w[[2, 0]]);
        let mut acc = 0.0;
        for c in 0..3 {
            for t in 0..8 {
                let mut x = 0.0;
                for k in 0..3 {
                    x += w[[c, k]] * z[[k, t]];
                }
                acc += x.abs();
            }
        }
        let oracle = -det.abs().ln() + acc / 8.0;
        assert!((unsup_loss(&st, z.view(), &lap()) - oracle).abs() < 1e-12);
    }

    #[test]
    fn proximal_limits_and_fixed_points() {
        let d = lap();
        for &x in &[-3.0, -0.7, 0.05, 1.0, 2.5] {
            let exact = d.weight(x);
            let far = d.proximal_weight(x, 0.3, 1e12).unwrap();
            assert!((far - exact).abs() <= 1e-6 * exact.max(1.0), "x={x}");
            for &eta in &[1e-3, 1.0, 50.0] {
                let fixed = d.proximal_weight(x, exact, eta).unwrap();
                assert!((fixed - exact).abs() <= 1e-10 * exact, "x={x} eta={eta}");
            }
        }
        let u = d.proximal_weight(1.0, 1.0, 1.0).unwrap();
        assert!((u - 1.0).abs() < 1e-12);
    }

    #[test]
    fn proximal_minimizes_its_objective() {
        let d = lap();
        for &(x, p, eta) in &[
            (0.4, 2.0, 0.5),
            (3.0, 0.01, 10.0),
            (0.0, 5.0, 1.0),
            (1.5, 1e3, 0.1),
        ] {
            let u = d.proximal_weight(x, p, eta).unwrap();
            let obj = |v: f64| 0.5 * v * x * x + 0.5 / v + (v - p).powi(2) / (2.0 * eta);
            for &h in &[1e-4, 1e-3, 1e-2] {
                assert!(obj(u) <= obj(u * (1.0 + h)) + 1e-14);
                assert!(obj(u) <= obj(u * (1.0 - h)) + 1e-14);
            }
        }
    }

    #[test]
    fn huber_proximal_is_unsupported() {
        assert!(matches!(
            SuperGaussianDensity::<f64>::huber().proximal_weight(1.0, 1.0, 1.0),
            Err(Error::Unsupported(_))
        ));
    }

    fn small_data() -> Dataset<f64> {
        let trials = (0..3)
            .map(|i| {
                let sig = Array2::from_shape_fn((2, 5), |(c, t)| {
                    ((i * 10 + c * 5 + t) as f64 * 1.3).cos() * 1.5
                });
                Trial::new(sig, Array1::zeros(0)).unwrap()
            })
            .collect();
        Dataset::new(trials, Vec::<TargetSchema>::new()).unwrap()
    }

    #[test]
    fn exact_aux_is_coordinatewise_argmin() {
        let data = small_data();
        let w = UnmixingState::new(array![[1.0, 0.4], [-0.3, 0.8]]).unwrap();
        let d = lap();
        let u = aux_exact(&w, &data, &d);
        let base = aux_energy(&w, &data, &u, &d).unwrap();
        for idx in [(0, 0, 0), (1, 1, 3), (2, 0, 4)] {
            for delta in [-1e-3, 1e-3] {
                let mut arr = u.clone().into_inner();
                arr[idx] += delta;
                let pert = AuxTensor::new(arr).unwrap();
                assert!(aux_energy(&w, &data, &pert, &d).unwrap() >= base);
            }
        }
        // replacing any U by the exact one never increases the energy
        let ones = AuxTensor::new(Array3::from_elem((3, 2, 5), 1.0)).unwrap();
        assert!(aux_energy(&w, &data, &ones, &d).unwrap() >= base);
        // and the energy equals the mean over trials of Σ_c mean_t |x|
        let direct = (0..3)
            .map(|i| w.apply(data.signal(i)).iter().map(|x| x.abs()).sum::<f64>())
            .sum::<f64>()
            / 15.0;
        assert!((base - direct).abs() < 1e-12);
    }

    #[test]
    fn partial_update_touches_only_sampled_entries() {
        let data = small_data();
        let w = UnmixingState::new(array![[1.0, 0.4], [-0.3, 0.8]]).unwrap();
        let d = lap();
        let mut u = AuxTensor::new(Array3::from_elem((3, 2, 5), 7.0)).unwrap();
        aux_exact_partial(&mut u, &w, &data, &d, &[1], &[0, 3]);
        let full = aux_exact(&w, &data, &d);
        for ((i, c, t), &v) in u.view().indexed_iter() {
            if i == 1 && (t == 0 || t == 3) {
                assert_eq!(v, full.view()[[i, c, t]]);
            } else {
                assert_eq!(v, 7.0);
            }
        }
    }

    #[test]
    fn proximal_tensor_converges_to_exact() {
        let data = small_data();
        let w = UnmixingState::new(array![[1.0, 0.4], [-0.3, 0.8]]).unwrap();
        let d = lap();
        let start = AuxTensor::new(Array3::from_elem((3, 2, 5), 1.0)).unwrap();
        let far = aux_proximal(&w, &data, &d, &start, 1e12).unwrap();
        let exact = aux_exact(&w, &data, &d);
        for (a, b) in far.view().iter().zip(exact.view().iter()) {
            assert!((a - b).abs() <= 1e-6 * b.max(1.0));
        }
        assert!(aux_proximal(&w, &data, &d, &start, 0.0).is_err());
    }
}
