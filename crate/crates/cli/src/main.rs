use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use rayon::prelude::*;

use supica::data::{concat_trials, load_dataset, load_matrix, save_dataset, save_matrix};
use supica::data::{Dataset, MixingGroundTruth, UnmixingState};
use supica::eval::{amari_distance, fobi, mean, median, prediction_metrics, EvalReport};
use supica::solver::{fit_full_batch, fit_stochastic, FitFailure, FitResult, SolverConfig};
use supica::supervision::{FeatureMap, FeatureMapConfig, ModelKind, SupervisedTargetModel};
use supica::synth::{gen_dataset, GenOverrides, Recipe};
use supica::Scalar;

#[derive(Parser)]
#[command(name = "supica", version, about = "Supervised multi-trial ICA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Fit an unmixing matrix and target models.
    Fit(FitArgs),
    /// Score fitted unmixing matrices.
    Eval(EvalArgs),
    /// Run the FOBI baseline.
    Baseline(BaselineArgs),
    /// Center and rescale a dataset.
    Prep(PrepArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    recipe: Recipe,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    c: Option<usize>,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    kappa: Option<f64>,
    /// Spectrogram window used for generated labels.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    hop: Option<usize>,
    #[arg(long)]
    log_power: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Mixing matrix; enables the amari column of the trace.
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    #[arg(long)]
    stochastic: bool,
    /// Update the auxiliary weights before the model parameters.
    #[arg(long)]
    lemma1_order: bool,
    /// Overrides the seed from the config file.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Sweep `a..b` (end exclusive) or `a..=b`, one subdirectory per seed.
    #[arg(long)]
    seeds: Option<String>,
    /// Fit on all but the last FRACTION of trials.
    #[arg(long)]
    holdout: Option<f64>,
    #[arg(long, value_enum, default_value = "f64")]
    precision: Precision,
}

#[derive(Args)]
struct EvalArgs {
    /// Unmixing matrix files; repeat to aggregate several runs.
    #[arg(long = "w", required = true)]
    w: Vec<PathBuf>,
    #[arg(long, required_unless_present = "data")]
    mixing: Option<PathBuf>,
    /// Dataset for held-out prediction metrics; θ is read next to each W.
    #[arg(long, requires = "holdout")]
    data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    holdout: Option<f64>,
    /// Append rows to this CSV instead of printing them.
    #[arg(long)]
    append: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BaselineMode {
    PerTrial,
    Concat,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Fobi,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "fobi")]
    method: Method,
    #[arg(long, value_enum)]
    mode: BaselineMode,
    #[arg(long)]
    mixing: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PrepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    center: bool,
    #[arg(long)]
    unit_variance: bool,
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Numerical(anyhow::Error),
    Other(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Numerical(_) => 3,
            Failure::Other(_) => 1,
        }
    }
}

impl From<supica::Error> for Failure {
    fn from(e: supica::Error) -> Self {
        use supica::Error as E;
        match e {
            _ if e.is_numerical() => Failure::Numerical(e.into()),
            E::Config(_) | E::Unsupported(_) | E::Schema(_) => Failure::Usage(e.into()),
            _ => Failure::Other(e.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Prep(a) => cmd_prep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(e) | Failure::Numerical(e) | Failure::Other(e)) = &f;
            eprintln!("error: {e:#}");
            ExitCode::from(f.code())
        }
    }
}

fn cmd_gen(a: GenArgs) -> CmdResult {
    let mut feature = FeatureMapConfig {
        log_power: a.log_power,
        ..FeatureMapConfig::default()
    };
    if let Some(w) = a.window {
        feature.window = w;
    }
    if let Some(h) = a.hop {
        feature.hop = h;
    }
    let overrides = GenOverrides {
        n: a.n,
        c: a.c,
        t: a.t,
        m: a.m,
        kappa: a.kappa,
        feature: Some(feature),
    };
    let gen = gen_dataset::<f64>(a.recipe, &overrides, a.seed)?;
    save_dataset(&gen.dataset, &a.out)?;
    let header: Vec<String> = gen
        .spec
        .params()
        .iter()
        .map(|(k, v)| format!("{k} = {v}"))
        .collect();
    save_matrix(gen.mixing.a().view(), &a.out.join("mixing.bin"), &header)?;
    if let Some(theta) = &gen.theta_star {
        save_matrix(theta.view(), &a.out.join("theta_star.bin"), &header)?;
    }
    Ok(())
}

fn read_config(path: &Path) -> std::result::Result<SolverConfig, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(Failure::Usage)?;
    Ok(SolverConfig::from_kv_str(&text)?)
}

fn parse_seed_range(s: &str) -> std::result::Result<Vec<u64>, Failure> {
    let bad = || Failure::Usage(anyhow!("--seeds expects a..b or a..=b, got '{s}'"));
    let (lo, hi, inclusive) = if let Some((lo, hi)) = s.split_once("..=") {
        (lo, hi, true)
    } else if let Some((lo, hi)) = s.split_once("..") {
        (lo, hi, false)
    } else {
        return Err(bad());
    };
    let lo: u64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: u64 = hi.trim().parse().map_err(|_| bad())?;
    let seeds: Vec<u64> = if inclusive {
        (lo..=hi).collect()
    } else {
        (lo..hi).collect()
    };
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

fn cmd_fit(a: FitArgs) -> CmdResult {
    let mut cfg = read_config(&a.config)?;
    if a.lemma1_order {
        cfg.lemma1_order = true;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if !a.stochastic {
        cfg.batch_trials = None;
        cfg.batch_times = None;
    }
    let data = load_dataset::<f64>(&a.data)?;
    let data = match a.holdout {
        Some(frac) => data.split_holdout(frac)?.0,
        None => data,
    };
    check_feature_params(&data, &cfg.feature);
    let truth = match &a.ground_truth {
        Some(p) => Some(MixingGroundTruth::new(load_matrix::<f64>(p)?)?),
        None => None,
    };
    let mode = if a.stochastic { "stochastic" } else { "batch" };
    let job = FitJob {
        data: &data,
        truth: truth.as_ref(),
        stochastic: a.stochastic,
        mode,
        data_path: &a.data,
        holdout: a.holdout,
        precision: a.precision,
    };
    match &a.seeds {
        None => job.run(&cfg, &a.out),
        Some(spec) => {
            let seeds = parse_seed_range(spec)?;
            let results: Vec<CmdResult> = seeds
                .par_iter()
                .map(|&seed| {
                    let cfg = SolverConfig {
                        seed,
                        ..cfg.clone()
                    };
                    job.run(&cfg, &a.out.join(format!("seed-{seed}")))
                })
                .collect();
            // Report every failed seed, exit with the first one's class.
            let mut first = None;
            for (seed, r) in seeds.iter().zip(results) {
                if let Err(f) = r {
                    let (Failure::Usage(e) | Failure::Numerical(e) | Failure::Other(e)) = &f;
                    eprintln!("seed {seed}: {e:#}");
                    first.get_or_insert(f);
                }
            }
            first.map_or(Ok(()), Err)
        }
    }
}

fn check_feature_params(data: &Dataset<f64>, feature: &FeatureMapConfig) {
    let p = data.params();
    let pairs = [
        ("window", feature.window.to_string()),
        ("hop", feature.hop.to_string()),
        ("log_power", feature.log_power.to_string()),
    ];
    for (key, ours) in pairs {
        if let Some(theirs) = p.get(key) {
            if *theirs != ours {
                eprintln!(
                    "warning: config {key} = {ours} but the labels were generated with {theirs}"
                );
            }
        }
    }
}

struct FitJob<'a> {
    data: &'a Dataset<f64>,
    truth: Option<&'a MixingGroundTruth<f64>>,
    stochastic: bool,
    mode: &'static str,
    data_path: &'a Path,
    holdout: Option<f64>,
    precision: Precision,
}

impl FitJob<'_> {
    fn header(&self, cfg: &SolverConfig) -> Vec<String> {
        let mut lines = vec![
            format!("data = {}", self.data_path.display()),
            format!("mode = {}", self.mode),
            format!(
                "precision = {}",
                match self.precision {
                    Precision::F32 => "f32",
                    Precision::F64 => "f64",
                }
            ),
        ];
        if let Some(h) = self.holdout {
            lines.push(format!("holdout = {h}"));
        }
        lines.extend(cfg.to_kv_string().lines().map(str::to_string));
        lines
    }

    fn run(&self, cfg: &SolverConfig, out: &Path) -> CmdResult {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let header = self.header(cfg);
        match self.precision {
            Precision::F64 => self.run_typed::<f64>(self.data.clone(), cfg, out, &header),
            Precision::F32 => self.run_typed::<f32>(self.data.cast(), cfg, out, &header),
        }
    }

    fn run_typed<F: Scalar>(
        &self,
        data: Dataset<F>,
        cfg: &SolverConfig,
        out: &Path,
        header: &[String],
    ) -> CmdResult {
        let truth = match self.truth {
            Some(t) => Some(MixingGroundTruth::new(t.a().mapv(|v| F::lit(v)))?),
            None => None,
        };
        let fitted = if self.stochastic {
            fit_stochastic(&data, cfg, truth.as_ref())
        } else {
            fit_full_batch(&data, cfg, truth.as_ref())
        };
        fs::write(out.join("config.txt"), header.join("\n") + "\n")
            .with_context(|| format!("writing config to {}", out.display()))?;
        match fitted {
            Ok(fit) => write_fit(&fit, data.schema(), out, header),
            Err(FitFailure {
                error,
                trace,
                iteration,
            }) => {
                let mut lines = header.to_vec();
                lines.push(format!("aborted at iteration {iteration}: {error}"));
                write_trace(&trace, out, &lines)?;
                Err(match Failure::from(error) {
                    Failure::Numerical(e) => Failure::Numerical(
                        e.context(format!("fit aborted at iteration {iteration}")),
                    ),
                    other => other,
                })
            }
        }
    }
}

fn write_trace(trace: &supica::solver::Trace, out: &Path, header: &[String]) -> CmdResult {
    let path = out.join("trace.csv");
    let mut file =
        fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    trace
        .write_csv(&mut file, header)
        .and_then(|()| file.flush())
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_fit<F: Scalar>(
    fit: &FitResult<F>,
    schema: &[supica::data::TargetSchema],
    out: &Path,
    header: &[String],
) -> CmdResult {
    save_matrix(fit.unmixing.w().view(), &out.join("W.bin"), header)?;
    save_matrix(fit.init.w().view(), &out.join("W_init.bin"), header)?;
    for (m, (model, target)) in fit.models.iter().zip(schema).enumerate() {
        let mut lines = header.to_vec();
        lines.push(format!("target = {}", target.name));
        lines.push(format!("model = {}", model_name(&model.kind)));
        save_matrix(
            model.theta.view(),
            &out.join(format!("theta{m}.bin")),
            &lines,
        )?;
    }
    write_trace(&fit.trace, out, header)
}

fn model_name(kind: &ModelKind) -> String {
    match kind {
        ModelKind::SquaredRegression => "squared_regression".into(),
        ModelKind::SoftmaxClassification { n_classes } => {
            format!("softmax_classification/{n_classes}")
        }
    }
}

fn run_name(w_path: &Path) -> String {
    w_path.parent().and_then(|p| p.file_name()).map_or_else(
        || w_path.display().to_string(),
        |n| n.to_string_lossy().into_owned(),
    )
}

fn load_models(
    dir: &Path,
    data: &Dataset<f64>,
) -> std::result::Result<Vec<SupervisedTargetModel<f64>>, Failure> {
    data.schema()
        .iter()
        .enumerate()
        .map(|(m, target)| {
            let theta = load_matrix::<f64>(&dir.join(format!("theta{m}.txt")))?;
            Ok(SupervisedTargetModel::new(
                ModelKind::for_target(target),
                theta,
            )?)
        })
        .collect()
}

/// Reads the feature-map keys back out of a fit's `config.txt`.
fn fit_feature_config(dir: &Path) -> std::result::Result<FeatureMapConfig, Failure> {
    let path = dir.join("config.txt");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let solver_keys: String = text
        .lines()
        .filter(|l| {
            let key = l.split('=').next().unwrap_or("").trim();
            !matches!(key, "data" | "mode" | "precision" | "holdout")
        })
        .map(|l| format!("{l}\n"))
        .collect();
    Ok(SolverConfig::from_kv_str(&solver_keys)?.feature)
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let truth = match &a.mixing {
        Some(p) => Some(load_matrix::<f64>(p)?),
        None => None,
    };
    let test = match (&a.data, a.holdout) {
        (Some(dir), Some(frac)) => Some(load_dataset::<f64>(dir)?.split_holdout(frac)?.1),
        _ => None,
    };
    let mut reports = Vec::new();
    for path in &a.w {
        let w = UnmixingState::new(load_matrix::<f64>(path)?)?;
        let amari = match &truth {
            Some(mix) => Some(amari_distance(w.w().view(), mix.view())?),
            None => None,
        };
        let dir = path.parent().unwrap_or(Path::new("."));
        let metrics = match &test {
            Some(test) if test.n_targets() > 0 => {
                let models = load_models(dir, test)?;
                let fmap = FeatureMap::new(fit_feature_config(dir)?, test.samples())?;
                prediction_metrics(&models, &w, test, &fmap)?
            }
            _ => Vec::new(),
        };
        let seed = fs::read_to_string(dir.join("config.txt"))
            .ok()
            .and_then(|t| {
                t.lines().find_map(|l| {
                    l.strip_prefix("seed = ")
                        .and_then(|v| v.trim().parse().ok())
                })
            });
        reports.push(EvalReport {
            run: run_name(path),
            seed,
            amari,
            metrics,
        });
    }
    let mut rows = vec![EvalReport::CSV_HEADER.to_string()];
    rows.extend(reports.iter().flat_map(EvalReport::csv_rows));
    rows.extend(aggregate_rows(&reports));
    emit(&rows, a.append.as_deref())
}

/// `mean` and `median` rows over the runs, for amari and each metric.
fn aggregate_rows(reports: &[EvalReport]) -> Vec<String> {
    let mut rows = Vec::new();
    let amaris: Vec<f64> = reports.iter().filter_map(|r| r.amari).collect();
    let mut targets: Vec<(String, String)> = Vec::new();
    for r in reports {
        for m in &r.metrics {
            let key = (m.target.clone(), m.kind.to_string());
            if !targets.contains(&key) {
                targets.push(key);
            }
        }
    }
    for (label, agg) in [("mean", mean as fn(&[f64]) -> _), ("median", median)] {
        let amari = agg(&amaris).map_or_else(|_| String::new(), |v| format!("{v:e}"));
        if targets.is_empty() {
            rows.push(format!("{label},,{amari},,,"));
        }
        for (target, kind) in &targets {
            let values: Vec<f64> = reports
                .iter()
                .flat_map(|r| &r.metrics)
                .filter(|m| m.target == *target && m.kind.to_string() == *kind)
                .map(|m| m.value)
                .collect();
            let v = agg(&values).map_or_else(|_| String::new(), |v| format!("{v:e}"));
            rows.push(format!("{label},,{amari},{target},{kind},{v}"));
        }
    }
    rows
}

/// Prints rows, or appends them to `path` (the header only when new).
fn emit(rows: &[String], path: Option<&Path>) -> CmdResult {
    match path {
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            for r in rows {
                writeln!(lock, "{r}").context("writing to stdout")?;
            }
        }
        Some(p) => {
            let fresh = !p.exists() || fs::metadata(p).map(|m| m.len() == 0).unwrap_or(true);
            let mut file = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .with_context(|| format!("opening {}", p.display()))?;
            let skip = usize::from(!fresh);
            for r in &rows[skip..] {
                writeln!(file, "{r}").with_context(|| format!("writing {}", p.display()))?;
            }
        }
    }
    Ok(())
}

fn cmd_baseline(a: BaselineArgs) -> CmdResult {
    let Method::Fobi = a.method;
    let data = load_dataset::<f64>(&a.data)?;
    let mixing: Array2<f64> = load_matrix(&a.mixing)?;
    let mut rows = vec!["run,amari,warning".to_string()];
    let warning = |degenerate: bool| if degenerate { "fobi_degenerate" } else { "" };
    match a.mode {
        BaselineMode::Concat => {
            let res = fobi(concat_trials(&data).view())?;
            let d = amari_distance(res.unmixing.w().view(), mixing.view())?;
            rows.push(format!("concat,{d:e},{}", warning(res.degenerate)));
        }
        BaselineMode::PerTrial => {
            let per: Vec<(f64, bool)> = (0..data.n_trials())
                .into_par_iter()
                .map(|i| {
                    let res = fobi(data.signal(i))?;
                    let d = amari_distance(res.unmixing.w().view(), mixing.view())?;
                    Ok((d, res.degenerate))
                })
                .collect::<supica::Result<_>>()?;
            for (i, (d, deg)) in per.iter().enumerate() {
                rows.push(format!("{i},{d:e},{}", warning(*deg)));
            }
            let values: Vec<f64> = per.iter().map(|p| p.0).collect();
            let flagged = per.iter().filter(|p| p.1).count();
            let note = if flagged > 0 {
                format!("fobi_degenerate:{flagged}")
            } else {
                String::new()
            };
            rows.push(format!("mean,{:e},{note}", mean(&values)?));
            rows.push(format!("median,{:e},{note}", median(&values)?));
        }
    }
    emit(&rows, a.out.as_deref())
}

fn cmd_prep(a: PrepArgs) -> CmdResult {
    let data = load_dataset::<f64>(&a.data)?;
    let mut params = data.params().clone();
    params.insert("center".into(), a.center.to_string());
    params.insert("unit_variance".into(), a.unit_variance.to_string());
    let out = data
        .preprocess(a.center, a.unit_variance)
        .with_params(params);
    save_dataset(&out, &a.out)?;
    Ok(())
}
