//! Block-coordinate solver: model parameters, auxiliary weights, then a
//! cyclic sweep over the rows of the unmixing matrix.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;

use crate::data::{AuxTensor, Dataset, MixingGroundTruth, UnmixingState};
use crate::error::{Error, Result};
use crate::eval::amari_distance;
use crate::likelihood::{
    aux_energy, aux_exact, aux_exact_partial, aux_proximal_partial, mean_unsup_loss, DensityKind,
    SuperGaussianDensity, DEFAULT_U_MAX,
};
use crate::linalg::spectral_norm_sq;
use crate::rng::{sample_without_replacement, standard_normal, stream, Xoshiro};
use crate::scalar::Scalar;
use crate::supervision::{
    batch_param_grad, lipschitz_source, lipschitz_theta, mean_sup_loss, FeatureMap,
    FeatureMapConfig, ModelKind, OptimizerRule, OptimizerState, SupervisedTargetModel,
};
use crate::unmixing::{compute_b, cyclic_sweep, BatchColumns, RowBranch, SupervisionGradMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuxMode {
    Exact,
    Proximal,
}

impl FromStr for AuxMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(AuxMode::Exact),
            "proximal" => Ok(AuxMode::Proximal),
            other => Err(Error::Config(format!("unknown aux_mode '{other}'"))),
        }
    }
}

impl fmt::Display for AuxMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AuxMode::Exact => "exact",
            AuxMode::Proximal => "proximal",
        })
    }
}

/// Solver settings. Rates and weights are stored as `f64` and converted to
/// the working scalar at fit time.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub iterations: usize,
    pub eta_u: f64,
    pub eta_p: f64,
    pub eta_a: f64,
    pub lambda: f64,
    pub mu: f64,
    pub density: DensityKind,
    pub u_max: f64,
    /// `None` means all trials.
    pub batch_trials: Option<usize>,
    /// `None` means all time steps.
    pub batch_times: Option<usize>,
    pub seed: u64,
    pub aux_mode: AuxMode,
    pub optimizer: OptimizerRule,
    pub trace_every: usize,
    pub feature: FeatureMapConfig,
    /// Update the auxiliary weights before the model parameters.
    pub lemma1_order: bool,
    pub record_wall_time: bool,
    /// Record the squared iterate gap `‖ΔU‖² + ‖Δθ‖² + ‖ΔW‖²` per iteration.
    pub track_gaps: bool,
    pub init_scale: f64,
    pub lipschitz_source: Option<f64>,
    pub lipschitz_theta: Option<f64>,
    pub row_branch: RowBranch,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            iterations: 1000,
            eta_u: 0.1,
            eta_p: 1e-4,
            eta_a: 1.0,
            lambda: 0.0,
            mu: 0.0,
            density: DensityKind::Laplace,
            u_max: DEFAULT_U_MAX,
            batch_trials: None,
            batch_times: None,
            seed: 0,
            aux_mode: AuxMode::Exact,
            optimizer: OptimizerRule::adamw_default(),
            trace_every: 10,
            feature: FeatureMapConfig::default(),
            lemma1_order: false,
            record_wall_time: false,
            track_gaps: false,
            init_scale: 0.01,
            lipschitz_source: None,
            lipschitz_theta: None,
            row_branch: RowBranch::Best,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::Config(format!("{key} = '{value}': {e}")))
}

fn parse_optional<T: FromStr>(key: &str, value: &str, none_word: &str) -> Result<Option<T>>
where
    T::Err: fmt::Display,
{
    if value == none_word {
        Ok(None)
    } else {
        parse_value(key, value).map(Some)
    }
}

fn show_optional<T: fmt::Display>(v: &Option<T>, none_word: &str) -> String {
    v.as_ref()
        .map_or_else(|| none_word.to_string(), |x| x.to_string())
}

impl SolverConfig {
    /// Parses flat `key = value` text; `#` starts a comment line. Keys not
    /// listed in [`SolverConfig::to_kv_string`] are rejected.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = SolverConfig::default();
        let (mut beta1, mut beta2, mut eps) = (0.9, 0.999, 1e-8);
        let mut optimizer = cfg.optimizer.name().to_string();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "iterations" => cfg.iterations = parse_value(key, value)?,
                "eta_u" => cfg.eta_u = parse_value(key, value)?,
                "eta_p" => cfg.eta_p = parse_value(key, value)?,
                "eta_a" => cfg.eta_a = parse_value(key, value)?,
                "lambda" => cfg.lambda = parse_value(key, value)?,
                "mu" => cfg.mu = parse_value(key, value)?,
                "density" => cfg.density = value.parse()?,
                "u_max" => cfg.u_max = parse_value(key, value)?,
                "batch_trials" => cfg.batch_trials = parse_optional(key, value, "all")?,
                "batch_times" => cfg.batch_times = parse_optional(key, value, "all")?,
                "seed" => cfg.seed = parse_value(key, value)?,
                "aux_mode" => cfg.aux_mode = value.parse()?,
                "optimizer" => optimizer = value.to_string(),
                "adam_beta1" => beta1 = parse_value(key, value)?,
                "adam_beta2" => beta2 = parse_value(key, value)?,
                "adam_eps" => eps = parse_value(key, value)?,
                "trace_every" => cfg.trace_every = parse_value(key, value)?,
                "window" => cfg.feature.window = parse_value(key, value)?,
                "hop" => cfg.feature.hop = parse_value(key, value)?,
                "log_power" => cfg.feature.log_power = parse_value(key, value)?,
                "log_eps" => cfg.feature.log_eps = parse_value(key, value)?,
                "lemma1_order" => cfg.lemma1_order = parse_value(key, value)?,
                "record_wall_time" => cfg.record_wall_time = parse_value(key, value)?,
                "track_gaps" => cfg.track_gaps = parse_value(key, value)?,
                "init_scale" => cfg.init_scale = parse_value(key, value)?,
                "lipschitz_source" => cfg.lipschitz_source = parse_optional(key, value, "auto")?,
                "lipschitz_theta" => cfg.lipschitz_theta = parse_optional(key, value, "auto")?,
                "row_branch" => cfg.row_branch = value.parse()?,
                other => return Err(Error::Config(format!("unknown key '{other}'"))),
            }
        }
        cfg.optimizer = match optimizer.as_str() {
            "sgd_wd" => OptimizerRule::SgdWd,
            "adamw" => OptimizerRule::AdamW { beta1, beta2, eps },
            other => return Err(Error::Config(format!("unknown optimizer '{other}'"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every field, one `key = value` per line, in a fixed order.
    pub fn to_kv_string(&self) -> String {
        let (beta1, beta2, eps) = match self.optimizer {
            OptimizerRule::AdamW { beta1, beta2, eps } => (beta1, beta2, eps),
            OptimizerRule::SgdWd => (0.9, 0.999, 1e-8),
        };
        let pairs: Vec<(&str, String)> = vec![
            ("iterations", self.iterations.to_string()),
            ("eta_u", self.eta_u.to_string()),
            ("eta_p", self.eta_p.to_string()),
            ("eta_a", self.eta_a.to_string()),
            ("lambda", self.lambda.to_string()),
            ("mu", self.mu.to_string()),
            ("density", self.density.to_string()),
            ("u_max", self.u_max.to_string()),
            ("batch_trials", show_optional(&self.batch_trials, "all")),
            ("batch_times", show_optional(&self.batch_times, "all")),
            ("seed", self.seed.to_string()),
            ("aux_mode", self.aux_mode.to_string()),
            ("optimizer", self.optimizer.name().to_string()),
            ("adam_beta1", beta1.to_string()),
            ("adam_beta2", beta2.to_string()),
            ("adam_eps", eps.to_string()),
            ("trace_every", self.trace_every.to_string()),
            ("window", self.feature.window.to_string()),
            ("hop", self.feature.hop.to_string()),
            ("log_power", self.feature.log_power.to_string()),
            ("log_eps", self.feature.log_eps.to_string()),
            ("lemma1_order", self.lemma1_order.to_string()),
            ("record_wall_time", self.record_wall_time.to_string()),
            ("track_gaps", self.track_gaps.to_string()),
            ("init_scale", self.init_scale.to_string()),
            (
                "lipschitz_source",
                show_optional(&self.lipschitz_source, "auto"),
            ),
            (
                "lipschitz_theta",
                show_optional(&self.lipschitz_theta, "auto"),
            ),
            ("row_branch", self.row_branch.to_string()),
        ];
        pairs
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("eta_u", self.eta_u),
            ("eta_p", self.eta_p),
            ("eta_a", self.eta_a),
            ("u_max", self.u_max),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config("lambda must be finite and >= 0".into()));
        }
        if !(self.mu >= 0.0) || !self.mu.is_finite() {
            return Err(Error::Config("mu must be finite and >= 0".into()));
        }
        if self.batch_trials == Some(0) || self.batch_times == Some(0) {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if self.trace_every == 0 {
            return Err(Error::Config("trace_every must be at least 1".into()));
        }
        if let OptimizerRule::AdamW { beta1, beta2, eps } = self.optimizer {
            if !(0.0 < beta1 && beta1 < 1.0 && 0.0 < beta2 && beta2 < 1.0 && eps > 0.0) {
                return Err(Error::Config(
                    "AdamW needs betas in (0,1) and eps > 0".into(),
                ));
            }
        }
        Ok(())
    }

    fn validate_against<F: Scalar>(&self, data: &Dataset<F>) -> Result<()> {
        self.validate()?;
        let (n, _, t, m) = data.dims();
        if self.lambda > 0.0 && m == 0 {
            return Err(Error::Schema(
                "lambda > 0 needs at least one supervised target".into(),
            ));
        }
        if self.batch_trials.is_some_and(|b| b > n) {
            return Err(Error::Config(format!("batch_trials exceeds N = {n}")));
        }
        if self.batch_times.is_some_and(|b| b > t) {
            return Err(Error::Config(format!("batch_times exceeds T = {t}")));
        }
        if self.aux_mode == AuxMode::Proximal && self.density == DensityKind::Huber {
            return Err(Error::Unsupported(
                "proximal auxiliary update is unavailable for the huber density".into(),
            ));
        }
        Ok(())
    }
}

/// Step-size bounds guaranteeing monotone descent of the full objective.
#[derive(Debug, Clone, PartialEq)]
pub struct RateGuards {
    pub l_source: Vec<f64>,
    pub l_theta: f64,
    pub mean_spectral_sq: f64,
    pub l_w: f64,
    pub eta_u_max: f64,
    pub eta_p_max: f64,
}

impl RateGuards {
    /// Bounds from given constants: `η_u ≤ 1/(2 λ L_W)` with
    /// `L_W = mean‖z_i‖²₂,₂ · √(Σ L_m²)`, and `η_p ≤ 1/(L_θ + μ)`.
    pub fn from_constants(
        l_source: Vec<f64>,
        l_theta: f64,
        mean_spectral_sq: f64,
        lambda: f64,
        mu: f64,
    ) -> Self {
        let l_w = mean_spectral_sq * l_source.iter().map(|l| l * l).sum::<f64>().sqrt();
        let eta_u_max = if lambda > 0.0 && l_w > 0.0 {
            1.0 / (2.0 * lambda * l_w)
        } else {
            f64::INFINITY
        };
        let denom = l_theta + mu;
        let eta_p_max = if denom > 0.0 {
            1.0 / denom
        } else {
            f64::INFINITY
        };
        RateGuards {
            l_source,
            l_theta,
            mean_spectral_sq,
            l_w,
            eta_u_max,
            eta_p_max,
        }
    }
}

/// Estimates the smoothness constants at `w` and derives the rate bounds.
pub fn compute_rate_guards<F: Scalar>(
    data: &Dataset<F>,
    w: &UnmixingState<F>,
    models: &[SupervisedTargetModel<F>],
    cfg: &SolverConfig,
) -> Result<RateGuards> {
    let n = data.n_trials();
    let mean_spectral_sq = (0..n)
        .map(|i| spectral_norm_sq(data.signal(i)).as_f64())
        .sum::<f64>()
        / n as f64;
    if models.is_empty() {
        return Ok(RateGuards::from_constants(
            vec![],
            cfg.lipschitz_theta.unwrap_or(0.0),
            mean_spectral_sq,
            cfg.lambda,
            cfg.mu,
        ));
    }
    let fmap = FeatureMap::<F>::new(cfg.feature, data.samples())?;
    let mut l_source = Vec::with_capacity(models.len());
    let mut l_theta = 0.0f64;
    for (m, model) in models.iter().enumerate() {
        let ls = match cfg.lipschitz_source {
            Some(v) => v,
            None => lipschitz_source(model, m, w, data, &fmap)?.as_f64(),
        };
        l_source.push(ls);
        let lt = match cfg.lipschitz_theta {
            Some(v) => v,
            None => lipschitz_theta(model, m, w, data, &fmap)?.as_f64(),
        };
        l_theta = l_theta.max(lt);
    }
    Ok(RateGuards::from_constants(
        l_source,
        l_theta,
        mean_spectral_sq,
        cfg.lambda,
        cfg.mu,
    ))
}

/// One row of the trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub k: usize,
    /// `(1/N) Σ ℓ₀(W, z_i)`
    pub loss_unsup: f64,
    /// `(λ/N) Σ_i Σ_m ℓ_m`
    pub loss_sup: f64,
    /// Full regularized objective; absent when `f` is unknown.
    pub objective: Option<f64>,
    pub amari: Option<f64>,
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

pub const TRACE_HEADER: &str = "k,loss_unsup,loss_sup,F,amari,wall_ms";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:e}"))
}

impl Trace {
    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    /// Objective values of every record that has one.
    pub fn objectives(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.objective).collect()
    }

    /// CSV with the fixed header; missing values are empty cells. Lines in
    /// `comments` are written first, each prefixed by `# `.
    pub fn write_csv<W: Write>(&self, mut out: W, comments: &[String]) -> std::io::Result<()> {
        for c in comments {
            writeln!(out, "# {c}")?;
        }
        writeln!(out, "{TRACE_HEADER}")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{:e},{:e},{},{},{}",
                r.k,
                r.loss_unsup,
                r.loss_sup,
                fmt_opt(r.objective),
                fmt_opt(r.amari),
                r.wall_ms.map_or_else(String::new, |x| format!("{x:.3}")),
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf, &[]).expect("in-memory write");
        String::from_utf8(buf).expect("ascii csv")
    }
}

#[derive(Debug, Clone)]
pub struct FitResult<F> {
    pub init: UnmixingState<F>,
    pub unmixing: UnmixingState<F>,
    pub models: Vec<SupervisedTargetModel<F>>,
    pub aux: AuxTensor<F>,
    pub trace: Trace,
    /// Per-iteration squared iterate gaps, when tracked.
    pub gaps: Vec<f64>,
    /// True when the objective column is unavailable for the chosen density.
    pub objective_omitted: bool,
}

/// A fit that stopped early, with the trace recorded so far.
#[derive(Debug)]
pub struct FitFailure {
    pub error: Error,
    pub trace: Trace,
    pub iteration: usize,
}

impl fmt::Display for FitFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "fit aborted at iteration {}: {}",
            self.iteration, self.error
        )
    }
}

impl std::error::Error for FitFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Seeded starting point: `W = I + s·G` and `θ_m = s·G` with `G` standard
/// normal and `s = init_scale`. Also returns the stream for later draws.
pub fn initialize<F: Scalar>(
    data: &Dataset<F>,
    cfg: &SolverConfig,
) -> Result<(UnmixingState<F>, Vec<SupervisedTargetModel<F>>, Xoshiro)> {
    let mut rng = stream(cfg.seed);
    let c = data.channels();
    let scale = F::lit(cfg.init_scale);
    let mut state = None;
    for _ in 0..16 {
        let w = Array2::from_shape_fn((c, c), |(i, j)| {
            let g: F = standard_normal(&mut rng);
            if i == j {
                F::one() + scale * g
            } else {
                scale * g
            }
        });
        if let Ok(s) = UnmixingState::new(w) {
            state = Some(s);
            break;
        }
    }
    let state = state.ok_or_else(|| Error::Singular("initial unmixing matrix".into()))?;
    let dim = if data.n_targets() > 0 {
        cfg.feature.dim(data.samples())
    } else {
        0
    };
    let models = data
        .schema()
        .iter()
        .map(|t| {
            let kind = ModelKind::for_target(t);
            let theta = Array2::from_shape_fn((kind.output_rows(), dim), |_| {
                scale * standard_normal::<F>(&mut rng)
            });
            SupervisedTargetModel { kind, theta }
        })
        .collect();
    Ok((state, models, rng))
}

struct Objective<F: Scalar> {
    density: SuperGaussianDensity<F>,
    fmap: Option<FeatureMap<F>>,
    lambda: F,
    mu: F,
}

impl<F: Scalar> Objective<F> {
    #[allow(clippy::too_many_arguments)]
    fn record(
        &self,
        k: usize,
        data: &Dataset<F>,
        w: &UnmixingState<F>,
        models: &[SupervisedTargetModel<F>],
        u: &AuxTensor<F>,
        truth: Option<&MixingGroundTruth<F>>,
        wall_ms: Option<f64>,
    ) -> Result<TraceRecord> {
        let loss_unsup = mean_unsup_loss(w, data, &self.density).as_f64();
        let sup = match &self.fmap {
            Some(fmap) if !models.is_empty() => mean_sup_loss(models, w, data, fmap)?,
            _ => F::zero(),
        };
        let loss_sup = (self.lambda * sup).as_f64();
        let ridge: F = models
            .iter()
            .map(|m| m.theta.iter().map(|&v| v * v).sum::<F>())
            .sum::<F>()
            * self.mu
            * F::lit(0.5);
        let objective = aux_energy(w, data, u, &self.density)
            .map(|e| (w.neg_logdet() + e + self.lambda * sup + ridge).as_f64());
        if !loss_unsup.is_finite()
            || !loss_sup.is_finite()
            || objective.is_some_and(|v| !v.is_finite())
        {
            return Err(Error::NonFinite(format!("objective at iteration {k}")));
        }
        let amari = match truth {
            Some(t) => Some(amari_distance(w.w().view(), t.a().view())?.as_f64()),
            None => None,
        };
        Ok(TraceRecord {
            k,
            loss_unsup,
            loss_sup,
            objective,
            amari,
            wall_ms,
        })
    }
}

/// Full-batch solver.
pub fn fit_full_batch<F: Scalar>(
    data: &Dataset<F>,
    cfg: &SolverConfig,
    truth: Option<&MixingGroundTruth<F>>,
) -> std::result::Result<FitResult<F>, FitFailure> {
    run(data, cfg, truth, false)
}

/// Minibatch solver: each iteration draws `batch_trials` trials and
/// `batch_times` time steps without replacement.
pub fn fit_stochastic<F: Scalar>(
    data: &Dataset<F>,
    cfg: &SolverConfig,
    truth: Option<&MixingGroundTruth<F>>,
) -> std::result::Result<FitResult<F>, FitFailure> {
    run(data, cfg, truth, true)
}

fn fail(error: Error, trace: &Trace, iteration: usize) -> FitFailure {
    FitFailure {
        error,
        trace: trace.clone(),
        iteration,
    }
}

fn sq_dist<F: Scalar>(a: &Array2<F>, b: &Array2<F>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).as_f64().powi(2))
        .sum()
}

fn run<F: Scalar>(
    data: &Dataset<F>,
    cfg: &SolverConfig,
    truth: Option<&MixingGroundTruth<F>>,
    stochastic: bool,
) -> std::result::Result<FitResult<F>, FitFailure> {
    let mut trace = Trace::default();
    let setup = (|| -> Result<_> {
        cfg.validate_against(data)?;
        let density = SuperGaussianDensity::new(cfg.density, F::lit(cfg.u_max))?;
        let fmap = if data.n_targets() > 0 {
            Some(FeatureMap::<F>::new(cfg.feature, data.samples())?)
        } else {
            None
        };
        let (w0, models, rng) = initialize(data, cfg)?;
        Ok((density, fmap, w0, models, rng))
    })();
    let (density, fmap, w0, mut models, mut rng) = setup.map_err(|e| fail(e, &trace, 0))?;

    let (n, _, t, _) = data.dims();
    let n_batch = if stochastic {
        cfg.batch_trials.unwrap_or(n)
    } else {
        n
    };
    let t_batch = if stochastic {
        cfg.batch_times.unwrap_or(t)
    } else {
        t
    };
    let lambda = F::lit(cfg.lambda);
    let mu = F::lit(cfg.mu);
    let eta_u = F::lit(cfg.eta_u);
    let eta_a = F::lit(cfg.eta_a);
    let objective = Objective {
        density,
        fmap: fmap.clone(),
        lambda,
        mu,
    };
    let mut optimizers: Vec<OptimizerState<F>> = models
        .iter()
        .map(|_| OptimizerState::new(cfg.optimizer, F::lit(cfg.eta_p)))
        .collect();
    let all_trials: Vec<usize> = (0..n).collect();
    let all_times: Vec<usize> = (0..t).collect();

    let started = Instant::now();
    let clock = |on: bool| on.then(|| started.elapsed().as_secs_f64() * 1e3);

    let mut w = w0.clone();
    let mut u = aux_exact(&w, data, &density);
    let first = objective
        .record(0, data, &w, &models, &u, truth, clock(cfg.record_wall_time))
        .map_err(|e| fail(e, &trace, 0))?;
    trace.records.push(first);
    let mut gaps = Vec::new();

    for k in 1..=cfg.iterations {
        let step = (|| -> Result<()> {
            let (trials, times) = if stochastic {
                (
                    sample_without_replacement(&mut rng, n, n_batch),
                    sample_without_replacement(&mut rng, t, t_batch),
                )
            } else {
                (all_trials.clone(), all_times.clone())
            };
            let u_before = cfg.track_gaps.then(|| u.clone());
            let theta_before: Vec<Array2<F>> = if cfg.track_gaps {
                models.iter().map(|m| m.theta.clone()).collect()
            } else {
                Vec::new()
            };

            let update_theta = |models: &mut Vec<SupervisedTargetModel<F>>,
                                optimizers: &mut Vec<OptimizerState<F>>|
             -> Result<()> {
                let Some(fmap) = &fmap else { return Ok(()) };
                let grads: Vec<Array2<F>> = models
                    .iter()
                    .enumerate()
                    .map(|(m, model)| batch_param_grad(model, m, &w, &trials, data, fmap))
                    .collect::<Result<_>>()?;
                for ((model, opt), g) in models.iter_mut().zip(optimizers.iter_mut()).zip(grads) {
                    model.theta = opt.step(&model.theta, &g, mu)?;
                }
                Ok(())
            };
            let update_aux = |u: &mut AuxTensor<F>| -> Result<()> {
                match cfg.aux_mode {
                    AuxMode::Exact => {
                        aux_exact_partial(u, &w, data, &density, &trials, &times);
                        Ok(())
                    }
                    AuxMode::Proximal => {
                        aux_proximal_partial(u, &w, data, &density, eta_a, &trials, &times)
                    }
                }
            };
            if cfg.lemma1_order {
                update_aux(&mut u)?;
                update_theta(&mut models, &mut optimizers)?;
            } else {
                update_theta(&mut models, &mut optimizers)?;
                update_aux(&mut u)?;
            }

            let b = match &fmap {
                Some(fmap) if cfg.lambda > 0.0 => {
                    compute_b(&w, &models, data, &trials, &times, fmap)?
                }
                _ => SupervisionGradMatrix::zeros(data.channels()),
            };
            let batch = BatchColumns::new(data, &trials, &times)?;
            let w_next = cyclic_sweep(&w, |c| batch.a_c(&u, c), &b, eta_u, lambda, cfg.row_branch)?;

            if let Some(prev_u) = u_before {
                let du: f64 = prev_u
                    .view()
                    .iter()
                    .zip(u.view().iter())
                    .map(|(&a, &b)| (a - b).as_f64().powi(2))
                    .sum();
                let dtheta: f64 = theta_before
                    .iter()
                    .zip(models.iter())
                    .map(|(a, m)| sq_dist(a, &m.theta))
                    .sum();
                gaps.push(du + dtheta + sq_dist(w.w(), w_next.w()));
            }
            w = w_next;
            Ok(())
        })();
        step.map_err(|e| fail(e, &trace, k))?;

        if k % cfg.trace_every == 0 || k == cfg.iterations {
            let rec = objective
                .record(k, data, &w, &models, &u, truth, clock(cfg.record_wall_time))
                .map_err(|e| fail(e, &trace, k))?;
            trace.records.push(rec);
        }
    }

    Ok(FitResult {
        init: w0,
        unmixing: w,
        models,
        aux: u,
        trace,
        gaps,
        objective_omitted: !density.has_f(),
    })
}
