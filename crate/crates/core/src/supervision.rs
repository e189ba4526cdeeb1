//! Supervised losses on individual sources.
//!
//! Each target `m` is predicted from spectrogram features `φ(s)` of the
//! source `s = W_{m·}ᵀ z`, with a linear model in the features. Gradients
//! with respect to both the source and the parameters are analytic.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::data::{Dataset, TargetKind, TargetSchema, UnmixingState};
use crate::error::{Error, Result};
use crate::linalg::power_iteration;
use crate::scalar::Scalar;

/// Short-time power spectrum settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureMapConfig {
    pub window: usize,
    pub hop: usize,
    pub log_power: bool,
    pub log_eps: f64,
}

impl Default for FeatureMapConfig {
    fn default() -> Self {
        FeatureMapConfig {
            window: 64,
            hop: 32,
            log_power: false,
            log_eps: 1e-6,
        }
    }
}

impl FeatureMapConfig {
    pub fn n_bins(&self) -> usize {
        self.window / 2 + 1
    }

    pub fn n_windows(&self, samples: usize) -> usize {
        if samples < self.window {
            0
        } else {
            (samples - self.window) / self.hop + 1
        }
    }

    /// Output dimension for signals of length `samples`.
    pub fn dim(&self, samples: usize) -> usize {
        self.n_windows(samples) * self.n_bins()
    }
}

/// A planned feature map for a fixed signal length.
#[derive(Clone)]
pub struct FeatureMap<F: Scalar> {
    cfg: FeatureMapConfig,
    samples: usize,
    forward: Arc<dyn Fft<F>>,
    inverse: Arc<dyn Fft<F>>,
}

impl<F: Scalar> fmt::Debug for FeatureMap<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeatureMap")
            .field("cfg", &self.cfg)
            .field("samples", &self.samples)
            .finish()
    }
}

/// Intermediate values kept from the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct FeatureCache<F> {
    spectra: Vec<Complex<F>>,
    power: Vec<F>,
}

impl<F: Scalar> FeatureMap<F> {
    pub fn new(cfg: FeatureMapConfig, samples: usize) -> Result<Self> {
        if cfg.window == 0 || cfg.hop == 0 {
            return Err(Error::Config("window and hop must be positive".into()));
        }
        if samples < cfg.window {
            return Err(Error::Dimension(format!(
                "signal length {samples} is shorter than the window {}",
                cfg.window
            )));
        }
        if cfg.log_power && !(cfg.log_eps > 0.0) {
            return Err(Error::Config("log_eps must be positive".into()));
        }
        let mut planner = FftPlanner::<F>::new();
        Ok(FeatureMap {
            cfg,
            samples,
            forward: planner.plan_fft_forward(cfg.window),
            inverse: planner.plan_fft_inverse(cfg.window),
        })
    }

    pub fn config(&self) -> &FeatureMapConfig {
        &self.cfg
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim(self.samples)
    }

    fn check_len(&self, s: ArrayView1<F>) -> Result<()> {
        if s.len() != self.samples {
            return Err(Error::Dimension(format!(
                "feature map planned for length {}, got {}",
                self.samples,
                s.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, s: ArrayView1<F>) -> Result<Array1<F>> {
        Ok(self.forward_cached(s)?.0)
    }

    /// Features plus the spectra needed by [`FeatureMap::backward`].
    pub fn forward_cached(&self, s: ArrayView1<F>) -> Result<(Array1<F>, FeatureCache<F>)> {
        self.check_len(s)?;
        let w = self.cfg.window;
        let nb = self.cfg.n_bins();
        let nw = self.cfg.n_windows(self.samples);
        let mut spectra = Vec::with_capacity(nw * nb);
        let mut power = Vec::with_capacity(nw * nb);
        let mut buf = vec![Complex::new(F::zero(), F::zero()); w];
        for j in 0..nw {
            let start = j * self.cfg.hop;
            for (n, slot) in buf.iter_mut().enumerate() {
                *slot = Complex::new(s[start + n], F::zero());
            }
            self.forward.process(&mut buf);
            for x in buf.iter().take(nb) {
                spectra.push(*x);
                power.push(x.norm_sqr());
            }
        }
        let eps = F::lit(self.cfg.log_eps);
        let features: Array1<F> = if self.cfg.log_power {
            power.iter().map(|&p| (p + eps).ln()).collect()
        } else {
            power.iter().copied().collect()
        };
        Ok((features, FeatureCache { spectra, power }))
    }

    /// Pulls a gradient with respect to the features back to the signal.
    ///
    /// For `P_k = |X_k|²`, `∂P_k/∂s_n = 2 Re(X_k e^{2πikn/w})`, so the pullback
    /// of each window is twice the real part of an unnormalized inverse DFT
    /// of `g_k X_k` over the retained bins.
    pub fn backward(&self, cache: &FeatureCache<F>, grad_features: ArrayView1<F>) -> Array1<F> {
        let w = self.cfg.window;
        let nb = self.cfg.n_bins();
        let nw = self.cfg.n_windows(self.samples);
        let eps = F::lit(self.cfg.log_eps);
        let two = F::lit(2.0);
        let mut out = Array1::<F>::zeros(self.samples);
        let mut buf = vec![Complex::new(F::zero(), F::zero()); w];
        for j in 0..nw {
            for slot in buf.iter_mut() {
                *slot = Complex::new(F::zero(), F::zero());
            }
            for (k, slot) in buf.iter_mut().take(nb).enumerate() {
                let idx = j * nb + k;
                let mut g = grad_features[idx];
                if self.cfg.log_power {
                    g /= cache.power[idx] + eps;
                }
                *slot = cache.spectra[idx] * g;
            }
            self.inverse.process(&mut buf);
            let start = j * self.cfg.hop;
            for n in 0..w {
                out[start + n] += two * buf[n].re;
            }
        }
        out
    }
}

/// Convenience wrapper planning a map for a single call.
pub fn feature_map<F: Scalar>(s: ArrayView1<F>, cfg: &FeatureMapConfig) -> Result<Array1<F>> {
    FeatureMap::new(*cfg, s.len())?.forward(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    SquaredRegression,
    SoftmaxClassification { n_classes: usize },
}

impl ModelKind {
    pub fn for_target(t: &TargetSchema) -> Self {
        match t.kind {
            TargetKind::Continuous => ModelKind::SquaredRegression,
            TargetKind::Categorical => ModelKind::SoftmaxClassification {
                n_classes: t.n_classes.unwrap_or(2),
            },
        }
    }

    pub fn output_rows(&self) -> usize {
        match self {
            ModelKind::SquaredRegression => 1,
            ModelKind::SoftmaxClassification { n_classes } => *n_classes,
        }
    }
}

/// Linear-in-features predictive model for one target.
///
/// `theta` is `1×d` for regression and `n_classes×d` for classification.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedTargetModel<F> {
    pub kind: ModelKind,
    pub theta: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct LossGrads<F> {
    pub loss: F,
    pub grad_s: Array1<F>,
    pub grad_theta: Array2<F>,
}

impl<F: Scalar> SupervisedTargetModel<F> {
    pub fn new(kind: ModelKind, theta: Array2<F>) -> Result<Self> {
        if theta.nrows() != kind.output_rows() {
            return Err(Error::Dimension(format!(
                "parameter matrix has {} rows, model needs {}",
                theta.nrows(),
                kind.output_rows()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(SupervisedTargetModel { kind, theta })
    }

    pub fn zeros(kind: ModelKind, dim: usize) -> Self {
        SupervisedTargetModel {
            kind,
            theta: Array2::zeros((kind.output_rows(), dim)),
        }
    }

    fn class_index(&self, y: F) -> Result<usize> {
        let ModelKind::SoftmaxClassification { n_classes } = self.kind else {
            unreachable!("regression has no class index")
        };
        let v = y.as_f64();
        if !(v >= 0.0) || v.fract() != 0.0 || v >= n_classes as f64 {
            return Err(Error::Label(format!(
                "class {v} out of range for {n_classes} classes"
            )));
        }
        Ok(v as usize)
    }

    /// Loss and gradient with respect to the features and parameters.
    pub fn loss_and_feature_grads(
        &self,
        phi: ArrayView1<F>,
        y: F,
    ) -> Result<(F, Array1<F>, Array2<F>)> {
        if phi.len() != self.theta.ncols() {
            return Err(Error::Dimension(format!(
                "features have {} entries, parameters {}",
                phi.len(),
                self.theta.ncols()
            )));
        }
        match self.kind {
            ModelKind::SquaredRegression => {
                let theta = self.theta.row(0);
                let resid = theta.dot(&phi) - y;
                let loss = F::lit(0.5) * resid * resid;
                let grad_phi = theta.mapv(|v| v * resid);
                let grad_theta = phi.mapv(|v| v * resid).insert_axis(Axis(0));
                Ok((loss, grad_phi, grad_theta))
            }
            ModelKind::SoftmaxClassification { .. } => {
                let label = self.class_index(y)?;
                let logits = self.theta.dot(&phi);
                let top = logits.fold(F::neg_infinity(), |a, &b| a.max(b));
                let exp = logits.mapv(|l| (l - top).exp());
                let z = exp.sum();
                let loss = z.ln() + top - logits[label];
                let mut delta = exp.mapv(|e| e / z);
                delta[label] -= F::one();
                let grad_phi = self.theta.t().dot(&delta);
                let grad_theta = outer(delta.view(), phi);
                Ok((loss, grad_phi, grad_theta))
            }
        }
    }

    /// Point prediction: the regression value or the arg-max class.
    pub fn predict(&self, phi: ArrayView1<F>) -> F {
        let logits = self.theta.dot(&phi);
        match self.kind {
            ModelKind::SquaredRegression => logits[0],
            ModelKind::SoftmaxClassification { .. } => {
                let mut best = 0;
                for k in 1..logits.len() {
                    if logits[k] > logits[best] {
                        best = k;
                    }
                }
                F::from_count(best)
            }
        }
    }
}

fn outer<F: Scalar>(a: ArrayView1<F>, b: ArrayView1<F>) -> Array2<F> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

/// `ℓ_m(s, y, θ_m)` with its gradients in `s` and `θ_m`.
pub fn loss_and_grads<F: Scalar>(
    model: &SupervisedTargetModel<F>,
    s: ArrayView1<F>,
    y: F,
    fmap: &FeatureMap<F>,
) -> Result<LossGrads<F>> {
    if s.iter().any(|v| !v.is_finite()) || !y.is_finite() {
        return Err(Error::NonFinite("supervised loss input".into()));
    }
    let (phi, cache) = fmap.forward_cached(s)?;
    let (loss, grad_phi, grad_theta) = model.loss_and_feature_grads(phi.view(), y)?;
    let grad_s = fmap.backward(&cache, grad_phi.view());
    Ok(LossGrads {
        loss,
        grad_s,
        grad_theta,
    })
}

/// Source `m` of trial signal `z`: `W_{m·}ᵀ z`.
pub fn source_row<F: Scalar>(w: ArrayView2<F>, m: usize, z: ArrayView2<F>) -> Array1<F> {
    z.t().dot(&w.row(m))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerRule {
    /// `θ ← (1 - η μ) θ - η g`
    SgdWd,
    /// Decoupled weight decay with bias-corrected moments.
    AdamW { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerRule {
    pub fn adamw_default() -> Self {
        OptimizerRule::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerRule::SgdWd => "sgd_wd",
            OptimizerRule::AdamW { .. } => "adamw",
        }
    }
}

impl FromStr for OptimizerRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd_wd" => Ok(OptimizerRule::SgdWd),
            "adamw" => Ok(OptimizerRule::adamw_default()),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F> {
    pub rule: OptimizerRule,
    pub eta_p: F,
    m: Option<Array2<F>>,
    v: Option<Array2<F>>,
    step: u64,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(rule: OptimizerRule, eta_p: F) -> Self {
        OptimizerState {
            rule,
            eta_p,
            m: None,
            v: None,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One parameter update; returns the new parameters.
    pub fn step(&mut self, theta: &Array2<F>, grad: &Array2<F>, mu: F) -> Result<Array2<F>> {
        if theta.dim() != grad.dim() {
            return Err(Error::Dimension(format!(
                "parameters {:?} vs gradient {:?}",
                theta.dim(),
                grad.dim()
            )));
        }
        self.step += 1;
        let eta = self.eta_p;
        let decay = F::one() - eta * mu;
        match self.rule {
            OptimizerRule::SgdWd => Ok(theta.mapv(|t| t * decay) - &grad.mapv(|g| g * eta)),
            OptimizerRule::AdamW { beta1, beta2, eps } => {
                let (b1, b2, e) = (F::lit(beta1), F::lit(beta2), F::lit(eps));
                let m = self.m.get_or_insert_with(|| Array2::zeros(theta.dim()));
                let v = self.v.get_or_insert_with(|| Array2::zeros(theta.dim()));
                if m.dim() != theta.dim() {
                    return Err(Error::Dimension("moment shape changed".into()));
                }
                ndarray::Zip::from(&mut *m)
                    .and(&mut *v)
                    .and(grad)
                    .for_each(|mi, vi, &g| {
                        *mi = b1 * *mi + (F::one() - b1) * g;
                        *vi = b2 * *vi + (F::one() - b2) * g * g;
                    });
                let t = self.step as i32;
                let c1 = F::one() - b1.powi(t);
                let c2 = F::one() - b2.powi(t);
                let mut out = theta.mapv(|x| x * decay);
                ndarray::Zip::from(&mut out)
                    .and(&*m)
                    .and(&*v)
                    .for_each(|o, &mi, &vi| {
                        let mhat = mi / c1;
                        let vhat = vi / c2;
                        *o -= eta * mhat / (vhat.sqrt() + e);
                    });
                Ok(out)
            }
        }
    }
}

/// Free-function form of [`OptimizerState::step`].
pub fn optimizer_step<F: Scalar>(
    state: &mut OptimizerState<F>,
    theta: &Array2<F>,
    grad: &Array2<F>,
    mu: F,
) -> Result<Array2<F>> {
    state.step(theta, grad, mu)
}

/// Mean over `batch` of `∇_θ ℓ_m` at `s = W_{m·}ᵀ z_i`.
pub fn batch_param_grad<F: Scalar>(
    model: &SupervisedTargetModel<F>,
    m: usize,
    w: &UnmixingState<F>,
    batch: &[usize],
    data: &Dataset<F>,
    fmap: &FeatureMap<F>,
) -> Result<Array2<F>> {
    if batch.is_empty() {
        return Err(Error::Empty("parameter-gradient batch".into()));
    }
    if m >= data.n_targets() {
        return Err(Error::Dimension(format!(
            "target {m} of {}",
            data.n_targets()
        )));
    }
    let parts: Vec<Array2<F>> = batch
        .par_iter()
        .map(|&i| {
            let s = source_row(w.w().view(), m, data.signal(i));
            loss_and_grads(model, s.view(), data.labels(i)[m], fmap).map(|lg| lg.grad_theta)
        })
        .collect::<Result<_>>()?;
    let mut acc = Array2::<F>::zeros(model.theta.dim());
    for p in &parts {
        acc += p;
    }
    let n = F::from_count(batch.len());
    Ok(acc.mapv(|v| v / n))
}

/// `(1/N) Σ_i Σ_m ℓ_m(W_{m·}ᵀ z_i, y_{i,m}, θ_m)` (no λ factor).
pub fn mean_sup_loss<F: Scalar>(
    models: &[SupervisedTargetModel<F>],
    w: &UnmixingState<F>,
    data: &Dataset<F>,
    fmap: &FeatureMap<F>,
) -> Result<F> {
    if models.is_empty() {
        return Ok(F::zero());
    }
    let per: Vec<F> = (0..data.n_trials())
        .into_par_iter()
        .map(|i| {
            let mut acc = F::zero();
            for (m, model) in models.iter().enumerate() {
                let s = source_row(w.w().view(), m, data.signal(i));
                let phi = fmap.forward(s.view())?;
                acc += model
                    .loss_and_feature_grads(phi.view(), data.labels(i)[m])?
                    .0;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().sum::<F>() / F::from_count(data.n_trials()))
}

/// Up to `cap` trial indices spread evenly over `0..n`.
fn spread_indices(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    (0..cap).map(|k| k * n / cap).collect()
}

const LIPSCHITZ_ITERS: usize = 50;
const LIPSCHITZ_TRIALS: usize = 16;

/// Estimate of the Lipschitz constant of `θ ↦ ∇_θ (1/N) Σ_i ℓ_m` at the
/// current sources: the top eigenvalue of the feature Gram matrix (halved
/// for softmax, whose logit Hessian is bounded by ½ I).
pub fn lipschitz_theta<F: Scalar>(
    model: &SupervisedTargetModel<F>,
    m: usize,
    w: &UnmixingState<F>,
    data: &Dataset<F>,
    fmap: &FeatureMap<F>,
) -> Result<F> {
    let feats: Vec<Array1<F>> = (0..data.n_trials())
        .into_par_iter()
        .map(|i| fmap.forward(source_row(w.w().view(), m, data.signal(i)).view()))
        .collect::<Result<_>>()?;
    let n = F::from_count(feats.len());
    let top = power_iteration(
        fmap.dim(),
        |v| {
            let mut acc = Array1::<F>::zeros(v.len());
            for phi in &feats {
                acc.scaled_add(phi.dot(&v) / n, phi);
            }
            acc
        },
        LIPSCHITZ_ITERS,
        F::lit(1e-8),
    );
    Ok(match model.kind {
        ModelKind::SquaredRegression => top,
        ModelKind::SoftmaxClassification { .. } => F::lit(0.5) * top,
    })
}

/// Local estimate of the Lipschitz constant of `s ↦ ∇_s ℓ_m`.
///
/// The loss is not globally smooth in `s` (power features are quadratic),
/// so this is the largest curvature found by power iteration on
/// finite-difference Hessian-vector products at the current sources of a
/// spread of trials.
pub fn lipschitz_source<F: Scalar>(
    model: &SupervisedTargetModel<F>,
    m: usize,
    w: &UnmixingState<F>,
    data: &Dataset<F>,
    fmap: &FeatureMap<F>,
) -> Result<F> {
    let picks = spread_indices(data.n_trials(), LIPSCHITZ_TRIALS);
    let vals: Vec<F> = picks
        .par_iter()
        .map(|&i| {
            let s = source_row(w.w().view(), m, data.signal(i));
            let y = data.labels(i)[m];
            let scale = s.dot(&s).sqrt() / F::from_count(s.len()).sqrt();
            let h = F::lit(1e-4) * (F::one() + scale);
            let mut failure = None;
            let top = power_iteration(
                s.len(),
                |v| {
                    let plus = &s + &v.mapv(|x| x * h);
                    let minus = &s - &v.mapv(|x| x * h);
                    match (
                        loss_and_grads(model, plus.view(), y, fmap),
                        loss_and_grads(model, minus.view(), y, fmap),
                    ) {
                        (Ok(a), Ok(b)) => (a.grad_s - b.grad_s).mapv(|d| d / (h + h)),
                        (Err(e), _) | (_, Err(e)) => {
                            failure = Some(e);
                            Array1::zeros(v.len())
                        }
                    }
                },
                LIPSCHITZ_ITERS,
                F::lit(1e-8),
            );
            match failure {
                Some(e) => Err(e),
                None => Ok(top),
            }
        })
        .collect::<Result<_>>()?;
    Ok(vals.into_iter().fold(F::zero(), |a, b| a.max(b)))
}
