//! Domain types and the on-disk dataset format.
//!
//! A dataset directory holds three files:
//!
//! * `manifest.json` – dimensions, target schema and free-form parameters,
//! * `signals.bin` – `N·C·T` little-endian `f64`, trial-major, row-major `C×T`,
//! * `labels.bin` – `N·M` little-endian `f64`, trial-major.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Scalar;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SIGNALS_FILE: &str = "signals.bin";
pub const LABELS_FILE: &str = "labels.bin";
const PAYLOAD_DTYPE: &str = "f64le";
const LAYOUT: &str = "trial-major row-major C×T";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Continuous,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSchema {
    pub name: String,
    pub kind: TargetKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_classes: Option<usize>,
}

impl TargetSchema {
    pub fn continuous(name: impl Into<String>) -> Self {
        TargetSchema {
            name: name.into(),
            kind: TargetKind::Continuous,
            n_classes: None,
        }
    }

    pub fn categorical(name: impl Into<String>, n_classes: usize) -> Self {
        TargetSchema {
            name: name.into(),
            kind: TargetKind::Categorical,
            n_classes: Some(n_classes),
        }
    }

    fn validate(&self) -> Result<()> {
        match (self.kind, self.n_classes) {
            (TargetKind::Categorical, Some(k)) if k >= 2 => Ok(()),
            (TargetKind::Categorical, _) => Err(Error::Schema(format!(
                "categorical target '{}' needs n_classes >= 2",
                self.name
            ))),
            (TargetKind::Continuous, None) => Ok(()),
            (TargetKind::Continuous, Some(_)) => Err(Error::Schema(format!(
                "continuous target '{}' must not declare n_classes",
                self.name
            ))),
        }
    }

    /// Checks one label value against this schema.
    pub fn check_label<F: Scalar>(&self, y: F) -> Result<()> {
        if !y.is_finite() {
            return Err(Error::NonFinite(format!("label of '{}'", self.name)));
        }
        if let Some(k) = self.n_classes {
            let v = y.as_f64();
            if v < 0.0 || v.fract() != 0.0 || v >= k as f64 {
                return Err(Error::Label(format!(
                    "class {v} out of range for '{}' with {k} classes",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// One observation: a `C×T` signal and its `M` labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial<F> {
    pub signal: Array2<F>,
    pub labels: Array1<F>,
}

impl<F: Scalar> Trial<F> {
    pub fn new(signal: Array2<F>, labels: Array1<F>) -> Result<Self> {
        if signal.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("trial signal".into()));
        }
        Ok(Trial { signal, labels })
    }
}

/// `N` trials sharing `(C, T, M)` plus the target schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<F> {
    trials: Vec<Trial<F>>,
    schema: Vec<TargetSchema>,
    params: BTreeMap<String, String>,
}

impl<F: Scalar> Dataset<F> {
    pub fn new(trials: Vec<Trial<F>>, schema: Vec<TargetSchema>) -> Result<Self> {
        if trials.is_empty() {
            return Err(Error::Empty("dataset has no trials".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for t in &schema {
            t.validate()?;
            if !names.insert(t.name.as_str()) {
                return Err(Error::Schema(format!("duplicate target name '{}'", t.name)));
            }
        }
        let (c, t) = trials[0].signal.dim();
        let m = schema.len();
        if c == 0 || t == 0 {
            return Err(Error::Dimension("empty signal".into()));
        }
        if m > c {
            return Err(Error::Schema(format!("{m} targets exceed {c} channels")));
        }
        for (i, trial) in trials.iter().enumerate() {
            if trial.signal.dim() != (c, t) {
                return Err(Error::Dimension(format!(
                    "trial {i} is {:?}, expected ({c}, {t})",
                    trial.signal.dim()
                )));
            }
            if trial.labels.len() != m {
                return Err(Error::Dimension(format!(
                    "trial {i} has {} labels, expected {m}",
                    trial.labels.len()
                )));
            }
            if trial.signal.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("signal of trial {i}")));
            }
            for (target, &y) in schema.iter().zip(trial.labels.iter()) {
                target.check_label(y)?;
            }
        }
        Ok(Dataset {
            trials,
            schema,
            params: BTreeMap::new(),
        })
    }

    /// Builds a dataset from an `N×C×T` tensor and `N×M` labels.
    pub fn from_arrays(
        signals: &Array3<F>,
        labels: &Array2<F>,
        schema: Vec<TargetSchema>,
    ) -> Result<Self> {
        let n = signals.shape()[0];
        if labels.nrows() != n {
            return Err(Error::Dimension(format!(
                "{} label rows for {n} trials",
                labels.nrows()
            )));
        }
        let trials = (0..n)
            .map(|i| Trial {
                signal: signals.slice(s![i, .., ..]).to_owned(),
                labels: labels.row(i).to_owned(),
            })
            .collect();
        Dataset::new(trials, schema)
    }

    pub fn with_params(mut self, params: BTreeMap<String, String>) -> Self {
        self.params = params;
        self
    }

    pub fn params(&self) -> &BTreeMap<String, String> {
        &self.params
    }

    pub fn n_trials(&self) -> usize {
        self.trials.len()
    }

    pub fn channels(&self) -> usize {
        self.trials[0].signal.nrows()
    }

    pub fn samples(&self) -> usize {
        self.trials[0].signal.ncols()
    }

    pub fn n_targets(&self) -> usize {
        self.schema.len()
    }

    /// `(N, C, T, M)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (
            self.n_trials(),
            self.channels(),
            self.samples(),
            self.n_targets(),
        )
    }

    pub fn schema(&self) -> &[TargetSchema] {
        &self.schema
    }

    pub fn trials(&self) -> &[Trial<F>] {
        &self.trials
    }

    pub fn signal(&self, i: usize) -> ArrayView2<'_, F> {
        self.trials[i].signal.view()
    }

    pub fn labels(&self, i: usize) -> ArrayView1<'_, F> {
        self.trials[i].labels.view()
    }

    /// Trials `[start, end)` as a new dataset with the same schema.
    pub fn subset(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.n_trials() {
            return Err(Error::Dimension(format!(
                "trial range {start}..{end} of {}",
                self.n_trials()
            )));
        }
        Ok(Dataset {
            trials: self.trials[start..end].to_vec(),
            schema: self.schema.clone(),
            params: self.params.clone(),
        })
    }

    /// Splits off the last `fraction` of trials as a held-out set.
    pub fn split_holdout(&self, fraction: f64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&fraction) || fraction <= 0.0 {
            return Err(Error::Config(format!(
                "holdout fraction {fraction} must lie in (0, 1)"
            )));
        }
        let n = self.n_trials();
        let n_test = ((n as f64) * fraction).round().max(1.0) as usize;
        if n_test >= n {
            return Err(Error::Config(format!(
                "holdout of {n_test} leaves no training trials out of {n}"
            )));
        }
        Ok((self.subset(0, n - n_test)?, self.subset(n - n_test, n)?))
    }

    /// Convert to another scalar type.
    pub fn cast<G: Scalar>(&self) -> Dataset<G> {
        Dataset {
            trials: self
                .trials
                .iter()
                .map(|t| Trial {
                    signal: t.signal.mapv(|v| G::lit(v.as_f64())),
                    labels: t.labels.mapv(|v| G::lit(v.as_f64())),
                })
                .collect(),
            schema: self.schema.clone(),
            params: self.params.clone(),
        }
    }

    /// Subtracts each channel's per-trial mean and, optionally, rescales
    /// all trials by one global factor so the pooled channel variance is 1.
    pub fn preprocess(&self, center: bool, unit_variance: bool) -> Self {
        let mut out = self.clone();
        if center {
            for trial in &mut out.trials {
                for mut row in trial.signal.rows_mut() {
                    let mean = row.sum() / F::from_count(row.len());
                    row.mapv_inplace(|v| v - mean);
                }
            }
        }
        if unit_variance {
            let mut acc = F::zero();
            let mut count = 0usize;
            for trial in &out.trials {
                acc += trial.signal.iter().map(|&v| v * v).sum::<F>();
                count += trial.signal.len();
            }
            let sd = (acc / F::from_count(count)).sqrt();
            if sd > F::zero() {
                for trial in &mut out.trials {
                    trial.signal.mapv_inplace(|v| v / sd);
                }
            }
        }
        out
    }
}

/// Concatenates trials along time into a `C×(N·T)` matrix.
pub fn concat_trials<F: Scalar>(d: &Dataset<F>) -> Array2<F> {
    let (n, c, t, _) = d.dims();
    let mut out = Array2::<F>::zeros((c, n * t));
    for (i, trial) in d.trials.iter().enumerate() {
        out.slice_mut(s![.., i * t..(i + 1) * t])
            .assign(&trial.signal);
    }
    out
}

/// Invertible `C×C` unmixing matrix with its cached `log|det W|`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnmixingState<F> {
    w: Array2<F>,
    logabsdet: F,
}

impl<F: Scalar> UnmixingState<F> {
    pub fn new(w: Array2<F>) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("unmixing matrix".into()));
        }
        let logabsdet = linalg::logabsdet(w.view())?;
        Ok(UnmixingState { w, logabsdet })
    }

    pub(crate) fn from_parts(w: Array2<F>, logabsdet: F) -> Self {
        UnmixingState { w, logabsdet }
    }

    pub fn w(&self) -> &Array2<F> {
        &self.w
    }

    pub fn into_inner(self) -> Array2<F> {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.w.nrows()
    }

    /// Cached `log|det W|`.
    pub fn logabsdet(&self) -> F {
        self.logabsdet
    }

    /// `L(W) = -log|det W|`.
    pub fn neg_logdet(&self) -> F {
        -self.logabsdet
    }

    /// Recomputes the cached determinant from a fresh factorization.
    pub fn refresh(self) -> Result<Self> {
        UnmixingState::new(self.w)
    }

    /// Candidate sources `W z`.
    pub fn apply(&self, z: ArrayView2<F>) -> Array2<F> {
        self.w.dot(&z)
    }
}

/// Nonnegative variational weights `U`, indexed `[trial, channel, time]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxTensor<F> {
    pub(crate) u: Array3<F>,
}

impl<F: Scalar> AuxTensor<F> {
    pub fn new(u: Array3<F>) -> Result<Self> {
        if u.iter().any(|&v| !(v >= F::zero()) || !v.is_finite()) {
            return Err(Error::Schema(
                "auxiliary weights must be finite and nonnegative".into(),
            ));
        }
        Ok(AuxTensor { u })
    }

    pub fn zeros(n: usize, c: usize, t: usize) -> Self {
        AuxTensor {
            u: Array3::zeros((n, c, t)),
        }
    }

    pub fn view(&self) -> ndarray::ArrayView3<'_, F> {
        self.u.view()
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.u.dim()
    }

    pub fn into_inner(self) -> Array3<F> {
        self.u
    }
}

/// Ground-truth mixing matrix of a synthetic run.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingGroundTruth<F> {
    a: Array2<F>,
}

impl<F: Scalar> MixingGroundTruth<F> {
    pub fn new(a: Array2<F>) -> Result<Self> {
        linalg::Lu::new(a.view())?;
        Ok(MixingGroundTruth { a })
    }

    pub fn a(&self) -> &Array2<F> {
        &self.a
    }

    pub fn inverse(&self) -> Array2<F> {
        linalg::inverse(self.a.view()).expect("validated invertible")
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    n_trials: usize,
    channels: usize,
    samples: usize,
    targets: Vec<TargetSchema>,
    payload_dtype: String,
    layout: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    params: BTreeMap<String, String>,
}

fn write_f64s(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f64s(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Dimension(format!(
            "{} has {} bytes, not a multiple of 8",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Writes the dataset directory, creating it if needed.
pub fn save_dataset<F: Scalar>(d: &Dataset<F>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        n_trials: d.n_trials(),
        channels: d.channels(),
        samples: d.samples(),
        targets: d.schema.clone(),
        payload_dtype: PAYLOAD_DTYPE.into(),
        layout: LAYOUT.into(),
        params: d.params.clone(),
    };
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Manifest(e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    write_f64s(
        &dir.join(SIGNALS_FILE),
        d.trials
            .iter()
            .flat_map(|t| t.signal.iter().map(|v| v.as_f64())),
    )?;
    write_f64s(
        &dir.join(LABELS_FILE),
        d.trials
            .iter()
            .flat_map(|t| t.labels.iter().map(|v| v.as_f64())),
    )
}

/// Reads and validates a dataset directory.
pub fn load_dataset<F: Scalar>(dir: &Path) -> Result<Dataset<F>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
    if manifest.payload_dtype != PAYLOAD_DTYPE {
        return Err(Error::Manifest(format!(
            "unsupported payload dtype '{}'",
            manifest.payload_dtype
        )));
    }
    let (n, c, t, m) = (
        manifest.n_trials,
        manifest.channels,
        manifest.samples,
        manifest.targets.len(),
    );
    let signals = read_f64s(&dir.join(SIGNALS_FILE))?;
    if signals.len() != n * c * t {
        return Err(Error::Dimension(format!(
            "manifest declares {n}x{c}x{t} = {} signal values, payload has {}",
            n * c * t,
            signals.len()
        )));
    }
    let labels = read_f64s(&dir.join(LABELS_FILE))?;
    if labels.len() != n * m {
        return Err(Error::Dimension(format!(
            "manifest declares {n}x{m} labels, payload has {}",
            labels.len()
        )));
    }
    if signals.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(SIGNALS_FILE.into()));
    }
    let trials = (0..n)
        .map(|i| {
            let sig = Array2::from_shape_vec(
                (c, t),
                signals[i * c * t..(i + 1) * c * t]
                    .iter()
                    .map(|&v| F::lit(v))
                    .collect(),
            )
            .expect("shape checked");
            let lab: Array1<F> = labels[i * m..(i + 1) * m]
                .iter()
                .map(|&v| F::lit(v))
                .collect();
            Trial {
                signal: sig,
                labels: lab,
            }
        })
        .collect();
    Ok(Dataset::new(trials, manifest.targets)?.with_params(manifest.params))
}

/// Writes a matrix as raw little-endian `f64` (`<stem>.bin`) plus a text
/// sidecar (`<stem>.txt`) whose leading `#` lines carry `header`.
pub fn save_matrix<F: Scalar>(m: ArrayView2<F>, bin_path: &Path, header: &[String]) -> Result<()> {
    write_f64s(bin_path, m.iter().map(|v| v.as_f64()))?;
    let mut text = String::new();
    for line in header {
        text.push_str("# ");
        text.push_str(line);
        text.push('\n');
    }
    text.push_str(&format!("{} {}\n", m.nrows(), m.ncols()));
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{:e}", v.as_f64())).collect();
        text.push_str(&cells.join(" "));
        text.push('\n');
    }
    let txt = bin_path.with_extension("txt");
    fs::write(&txt, text).map_err(|e| Error::io(&txt, e))
}

/// Reads a square matrix from a `.bin` payload, or any matrix from a `.txt`
/// sidecar written by [`save_matrix`].
pub fn load_matrix<F: Scalar>(path: &Path) -> Result<Array2<F>> {
    if path.extension().and_then(|e| e.to_str()) == Some("txt") {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text
            .lines()
            .filter(|l| !l.trim_start().starts_with('#') && !l.trim().is_empty());
        let head = lines
            .next()
            .ok_or_else(|| Error::Manifest(format!("{} is empty", path.display())))?;
        let dims: Vec<usize> = head
            .split_whitespace()
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Manifest(format!("bad matrix header: {e}")))?;
        if dims.len() != 2 {
            return Err(Error::Manifest("matrix header needs rows and cols".into()));
        }
        let values: Vec<F> = lines
            .flat_map(|l| l.split_whitespace())
            .map(|s| s.parse::<f64>().map(F::lit))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Manifest(format!("bad matrix entry: {e}")))?;
        return Array2::from_shape_vec((dims[0], dims[1]), values)
            .map_err(|e| Error::Dimension(e.to_string()));
    }
    let values = read_f64s(path)?;
    let c = (values.len() as f64).sqrt().round() as usize;
    if c * c != values.len() || c == 0 {
        return Err(Error::Dimension(format!(
            "{} holds {} values, not a square matrix",
            path.display(),
            values.len()
        )));
    }
    Ok(
        Array2::from_shape_vec((c, c), values.into_iter().map(F::lit).collect())
            .expect("square shape"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny() -> Dataset<f64> {
        let t0 = Trial::new(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]], array![1.0]).unwrap();
        let t1 = Trial::new(array![[7.0, 8.0, 9.0], [0.5, 0.25, 0.125]], array![0.0]).unwrap();
        Dataset::new(vec![t0, t1], vec![TargetSchema::categorical("side", 2)]).unwrap()
    }

    #[test]
    fn concat_layout() {
        let d = tiny();
        let z = concat_trials(&d);
        assert_eq!(z.dim(), (2, 6));
        assert_eq!(z.row(0).to_vec(), vec![1.0, 2.0, 3.0, 7.0, 8.0, 9.0]);
        assert_eq!(z[[1, 5]], 0.125);
    }

    #[test]
    fn concat_single_trial_is_identity() {
        let d = tiny().subset(0, 1).unwrap();
        assert_eq!(concat_trials(&d), d.signal(0).to_owned());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(Trial::new(array![[f64::NAN]], array![]).is_err());
        let t = Trial::new(array![[1.0, 2.0]], array![3.0]).unwrap();
        assert!(matches!(
            Dataset::new(vec![t.clone()], vec![TargetSchema::categorical("c", 2)]),
            Err(Error::Label(_))
        ));
        assert!(matches!(
            Dataset::new(vec![t.clone()], vec![TargetSchema::categorical("c", 1)]),
            Err(Error::Schema(_))
        ));
        let t2 = Trial::new(array![[1.0, 2.0, 3.0]], array![3.0]).unwrap();
        assert!(matches!(
            Dataset::new(vec![t.clone(), t2], vec![TargetSchema::continuous("y")]),
            Err(Error::Dimension(_))
        ));
        // more targets than channels
        let t3 = Trial::new(array![[1.0, 2.0]], array![0.0, 1.0]).unwrap();
        assert!(matches!(
            Dataset::new(
                vec![t3],
                vec![TargetSchema::continuous("a"), TargetSchema::continuous("b")]
            ),
            Err(Error::Schema(_))
        ));
        let dup = Trial::new(array![[1.0], [2.0]], array![0.0, 1.0]).unwrap();
        assert!(Dataset::new(
            vec![dup],
            vec![TargetSchema::continuous("a"), TargetSchema::continuous("a")]
        )
        .is_err());
    }

    #[test]
    fn save_load_round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let d = tiny();
        save_dataset(&d, dir.path()).unwrap();
        let back: Dataset<f64> = load_dataset(dir.path()).unwrap();
        assert_eq!(back, d);
        let first = fs::read(dir.path().join(SIGNALS_FILE)).unwrap();
        let manifest = fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
        save_dataset(&d, dir.path()).unwrap();
        assert_eq!(first, fs::read(dir.path().join(SIGNALS_FILE)).unwrap());
        assert_eq!(manifest, fs::read(dir.path().join(MANIFEST_FILE)).unwrap());
    }

    #[test]
    fn unlabeled_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let t = Trial::new(array![[1.0, -1.0], [0.5, 2.0]], array![]).unwrap();
        let d = Dataset::new(vec![t], vec![]).unwrap();
        save_dataset(&d, dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join(LABELS_FILE)).unwrap().len(), 0);
        assert_eq!(load_dataset::<f64>(dir.path()).unwrap(), d);
    }

    #[test]
    fn payload_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = r#"{"n_trials":2,"channels":3,"samples":4,"targets":[],
            "payload_dtype":"f64le","layout":"trial-major row-major C×T"}"#;
        fs::write(dir.path().join(MANIFEST_FILE), manifest).unwrap();
        write_f64s(&dir.path().join(SIGNALS_FILE), (0..30).map(|i| i as f64)).unwrap();
        write_f64s(&dir.path().join(LABELS_FILE), std::iter::empty()).unwrap();
        assert!(matches!(
            load_dataset::<f64>(dir.path()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn garbled_manifest_and_nonfinite_payload() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "{not json").unwrap();
        assert!(matches!(
            load_dataset::<f64>(dir.path()),
            Err(Error::Manifest(_))
        ));
        let manifest = r#"{"n_trials":1,"channels":1,"samples":2,"targets":[],
            "payload_dtype":"f64le","layout":"x"}"#;
        fs::write(dir.path().join(MANIFEST_FILE), manifest).unwrap();
        write_f64s(
            &dir.path().join(SIGNALS_FILE),
            [1.0, f64::INFINITY].into_iter(),
        )
        .unwrap();
        write_f64s(&dir.path().join(LABELS_FILE), std::iter::empty()).unwrap();
        assert!(matches!(
            load_dataset::<f64>(dir.path()),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn unmixing_state_caches_determinant() {
        let w = array![[2.0, 0.0], [0.0, 2.0]];
        let s = UnmixingState::new(w).unwrap();
        assert!((s.neg_logdet() + 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!(UnmixingState::new(array![[1.0, 1.0], [1.0, 1.0]]).is_err());
    }

    #[test]
    fn matrix_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = array![[1.5, -2.0], [1e-300, 3.25]];
        let bin = dir.path().join("m.bin");
        save_matrix(m.view(), &bin, &["note=1".into()]).unwrap();
        assert_eq!(load_matrix::<f64>(&bin).unwrap(), m);
        assert_eq!(load_matrix::<f64>(&bin.with_extension("txt")).unwrap(), m);
    }

    #[test]
    fn preprocessing_centers_and_scales() {
        let d = tiny().preprocess(true, true);
        for i in 0..d.n_trials() {
            for row in d.signal(i).rows() {
                assert!(row.sum().abs() < 1e-12);
            }
        }
        let z = concat_trials(&d);
        let var = z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64;
        assert!((var - 1.0).abs() < 1e-12);
    }
}
