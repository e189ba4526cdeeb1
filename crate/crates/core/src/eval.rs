//! Separation quality, the FOBI baseline, and sweep statistics.

use std::fmt;

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::data::{Dataset, UnmixingState};
use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigen, Lu};
use crate::scalar::Scalar;
use crate::supervision::{source_row, FeatureMap, ModelKind, SupervisedTargetModel};

/// Amari distance between an unmixing estimate `w` and the true mixing `a`,
/// computed on `R = |w a|`. Zero exactly when `w a` is a scaled permutation.
pub fn amari_distance<F: Scalar>(w: ArrayView2<F>, a: ArrayView2<F>) -> Result<F> {
    let c = w.nrows();
    if w.ncols() != c || a.nrows() != c || a.ncols() != c {
        return Err(Error::Dimension(format!(
            "amari distance needs two CxC matrices, got {:?} and {:?}",
            w.dim(),
            a.dim()
        )));
    }
    Lu::new(w)?;
    Lu::new(a)?;
    let r = w.dot(&a).mapv(|v| v.abs());
    Ok(amari_from_magnitudes(r.view()))
}

/// The Amari sum evaluated directly on a nonnegative matrix.
pub fn amari_from_magnitudes<F: Scalar>(r: ArrayView2<F>) -> F {
    let mut total = F::zero();
    for row in r.axis_iter(Axis(0)) {
        let top = row.fold(F::zero(), |m, &v| m.max(v));
        total += row.sum() / top - F::one();
    }
    for col in r.axis_iter(Axis(1)) {
        let top = col.fold(F::zero(), |m, &v| m.max(v));
        total += col.sum() / top - F::one();
    }
    total
}

#[derive(Debug, Clone)]
pub struct Whitened<F> {
    pub x: Array2<F>,
    pub v: Array2<F>,
    pub mean: Array1<F>,
}

/// Symmetric whitening `x̃ = V (x − mean)` with `V = cov^{-1/2}`; the
/// covariance uses the `1/S` normalization.
pub fn whiten<F: Scalar>(x: ArrayView2<F>) -> Result<Whitened<F>> {
    let (c, s) = x.dim();
    if s < c || s == 0 {
        return Err(Error::Dimension(format!(
            "whitening needs at least {c} samples, got {s}"
        )));
    }
    let mean = x.mean_axis(Axis(1)).expect("nonempty");
    let centered = &x - &mean.view().insert_axis(Axis(1));
    let cov = centered.dot(&centered.t()) / F::from_count(s);
    let (vals, vecs) = symmetric_eigen(cov.view())?;
    let floor = vals[0].abs() * F::lit(1e-12);
    if vals.iter().any(|&l| !(l > floor)) {
        return Err(Error::Singular("rank-deficient covariance".into()));
    }
    let scaled = &vecs * &vals.mapv(|l| F::one() / l.sqrt());
    let v = scaled.dot(&vecs.t());
    let xw = v.dot(&centered);
    Ok(Whitened { x: xw, v, mean })
}

#[derive(Debug, Clone)]
pub struct FobiResult<F> {
    pub unmixing: UnmixingState<F>,
    /// Eigenvalues of the fourth-moment matrix, descending.
    pub eigenvalues: Array1<F>,
    /// Set when two neighbouring eigenvalues cannot be told apart at this
    /// sample size; the corresponding sources are then not identifiable.
    pub degenerate: bool,
}

/// FOBI: whiten, then rotate onto the eigenvectors of
/// `Q = (1/S) Σ ‖x̃‖² x̃ x̃ᵀ`. Returns `W = Eᵀ V`.
///
/// Neighbouring eigenvalues are flagged as tied when their gap is below
/// `max(1e-8, 2·√(se_j² + se_{j+1}²))`, with `se_j` the standard error of
/// the sample mean behind eigenvalue `j`.
pub fn fobi<F: Scalar>(x: ArrayView2<F>) -> Result<FobiResult<F>> {
    let white = whiten(x)?;
    let (c, s) = white.x.dim();
    let norms = white.x.map_axis(Axis(0), |col| col.dot(&col));
    let weighted = &white.x * &norms.view().insert_axis(Axis(0));
    let q = weighted.dot(&white.x.t()) / F::from_count(s);
    let (vals, vecs) = symmetric_eigen(q.view())?;

    let proj = vecs.t().dot(&white.x);
    let se: Vec<f64> = (0..c)
        .map(|j| {
            let terms: Vec<f64> = proj
                .row(j)
                .iter()
                .zip(norms.iter())
                .map(|(&p, &n)| (n * p * p).as_f64())
                .collect();
            let mean = terms.iter().sum::<f64>() / s as f64;
            let var = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / s as f64;
            (var / s as f64).sqrt()
        })
        .collect();
    let degenerate = (0..c.saturating_sub(1)).any(|j| {
        let gap = (vals[j] - vals[j + 1]).as_f64();
        gap < f64::max(1e-8, 2.0 * (se[j] * se[j] + se[j + 1] * se[j + 1]).sqrt())
    });
    let w = vecs.t().dot(&white.v);
    Ok(FobiResult {
        unmixing: UnmixingState::new(w)?,
        eigenvalues: vals,
        degenerate,
    })
}

/// Fraction of values strictly below `threshold`.
pub fn success_rate(values: &[f64], threshold: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("success rate of no runs".into()));
    }
    let hits = values.iter().filter(|&&v| v < threshold).count();
    Ok(hits as f64 / values.len() as f64)
}

pub fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("mean of no values".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("median of no values".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Ok(if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Accuracy,
    Rmse,
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::Rmse => "rmse",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetMetric {
    pub target: String,
    pub kind: MetricKind,
    pub value: f64,
}

/// Held-out prediction quality: accuracy for categorical targets, RMSE for
/// continuous ones. Target `m` is predicted from source row `m` of `W z`.
pub fn prediction_metrics<F: Scalar>(
    models: &[SupervisedTargetModel<F>],
    w: &UnmixingState<F>,
    data: &Dataset<F>,
    fmap: &FeatureMap<F>,
) -> Result<Vec<TargetMetric>> {
    if models.len() != data.n_targets() {
        return Err(Error::Schema(format!(
            "{} models for {} targets",
            models.len(),
            data.n_targets()
        )));
    }
    if data.n_trials() == 0 {
        return Err(Error::Empty("no held-out trials".into()));
    }
    let n = data.n_trials() as f64;
    models
        .iter()
        .zip(data.schema())
        .enumerate()
        .map(|(m, (model, schema))| {
            let mut acc = 0.0;
            for i in 0..data.n_trials() {
                let s = source_row(w.w().view(), m, data.signal(i));
                let phi = fmap.forward(s.view())?;
                let pred = model.predict(phi.view()).as_f64();
                let y = data.labels(i)[m].as_f64();
                acc += match model.kind {
                    ModelKind::SquaredRegression => (pred - y).powi(2),
                    ModelKind::SoftmaxClassification { .. } => f64::from(u8::from(pred == y)),
                };
            }
            let (kind, value) = match model.kind {
                ModelKind::SquaredRegression => (MetricKind::Rmse, (acc / n).sqrt()),
                ModelKind::SoftmaxClassification { .. } => (MetricKind::Accuracy, acc / n),
            };
            Ok(TargetMetric {
                target: schema.name.clone(),
                kind,
                value,
            })
        })
        .collect()
}

/// One evaluated run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub run: String,
    pub seed: Option<u64>,
    pub amari: Option<f64>,
    pub metrics: Vec<TargetMetric>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "run,seed,amari,target,metric,value";

    /// One CSV line per metric, or a single line when there are none.
    pub fn csv_rows(&self) -> Vec<String> {
        let seed = self.seed.map_or_else(String::new, |s| s.to_string());
        let amari = self.amari.map_or_else(String::new, |a| format!("{a:e}"));
        if self.metrics.is_empty() {
            return vec![format!("{},{seed},{amari},,,", self.run)];
        }
        self.metrics
            .iter()
            .map(|m| {
                format!(
                    "{},{seed},{amari},{},{},{:e}",
                    self.run, m.target, m.kind, m.value
                )
            })
            .collect()
    }
}
