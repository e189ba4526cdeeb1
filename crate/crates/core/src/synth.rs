//! Seeded synthetic experiments: Laplace sources, Gaussian or
//! Hilbert-eigenspace mixing, and spectrogram regression targets.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::data::{Dataset, MixingGroundTruth, TargetSchema};
use crate::error::{Error, Result};
use crate::linalg::{condition_number, symmetric_eigen};
use crate::rng::{laplace, mix_seed, standard_normal, stream};
use crate::scalar::Scalar;
use crate::supervision::{FeatureMap, FeatureMapConfig};

const MAX_MIXING_COND: f64 = 1e8;
const MIXING_RETRIES: usize = 100;

// sub-stream ids derived from the user seed
const SOURCES: u64 = 1;
const MIXING: u64 = 2;
const TARGETS: u64 = 3;

/// `N×C×T` iid unit-scale Laplace entries. Trial `i` uses its own
/// sub-stream, so the result does not depend on thread scheduling.
pub fn gen_laplace_sources<F: Scalar>(n: usize, c: usize, t: usize, seed: u64) -> Array3<F> {
    let mut out = Array3::<F>::zeros((n, c, t));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut trial)| {
            let mut rng = stream(mix_seed(seed, i as u64));
            for v in trial.iter_mut() {
                *v = laplace(&mut rng);
            }
        });
    out
}

/// Standard-normal `C×C` mixing, redrawn while its condition number
/// exceeds 1e8.
pub fn gen_gaussian_mixing<F: Scalar>(c: usize, seed: u64) -> Result<MixingGroundTruth<F>> {
    if c == 0 {
        return Err(Error::Dimension("mixing needs at least one channel".into()));
    }
    let mut rng = stream(seed);
    for _ in 0..MIXING_RETRIES {
        let a = Array2::from_shape_fn((c, c), |_| standard_normal::<F>(&mut rng));
        let cond = condition_number(a.view())?.as_f64();
        if cond.is_finite() && cond <= MAX_MIXING_COND {
            return MixingGroundTruth::new(a);
        }
    }
    Err(Error::RetriesExhausted(format!(
        "no {c}x{c} gaussian mixing with condition number <= 1e8 in {MIXING_RETRIES} draws"
    )))
}

pub fn hilbert_matrix<F: Scalar>(c: usize) -> Array2<F> {
    Array2::from_shape_fn((c, c), |(i, j)| F::one() / F::from_count(i + j + 1))
}

/// `A = V diag(σ) Vᵀ` with `V` the eigenvectors of the `C×C` Hilbert
/// matrix and `σ` geometric from 1 to `e^κ`. The seed decides which
/// eigenvector receives which `σ`.
pub fn gen_hilbert_mixing<F: Scalar>(
    c: usize,
    kappa: f64,
    seed: u64,
) -> Result<MixingGroundTruth<F>> {
    if c == 0 {
        return Err(Error::Dimension("mixing needs at least one channel".into()));
    }
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(Error::Config(format!(
            "kappa must be positive, got {kappa}"
        )));
    }
    let (_, v) = symmetric_eigen(hilbert_matrix::<F>(c).view())?;
    let mut sigma: Vec<f64> = (0..c)
        .map(|j| {
            if c == 1 {
                1.0
            } else {
                (kappa * j as f64 / (c - 1) as f64).exp()
            }
        })
        .collect();
    sigma.shuffle(&mut stream(seed));
    let sigma: Array1<F> = sigma.into_iter().map(F::lit).collect();
    let a = (&v * &sigma).dot(&v.t());
    MixingGroundTruth::new(a)
}

/// Noiseless labels `y_{i,m} = ⟨θ*_m, φ(s_{i,m})⟩` for the first `m`
/// sources, with `θ*` standard normal. Returns the `N×M` labels and the
/// `M×d` parameter matrix.
pub fn gen_regression_targets<F: Scalar>(
    sources: &Array3<F>,
    m: usize,
    cfg: &FeatureMapConfig,
    seed: u64,
) -> Result<(Array2<F>, Array2<F>)> {
    let (_, c, t) = sources.dim();
    if m > c {
        return Err(Error::Schema(format!("{m} targets exceed {c} sources")));
    }
    let fmap = FeatureMap::<F>::new(*cfg, t)?;
    let mut rng = stream(seed);
    let theta = Array2::from_shape_fn((m, fmap.dim()), |_| standard_normal::<F>(&mut rng));
    let labels = regression_labels(sources, &theta, &fmap)?;
    Ok((labels, theta))
}

/// Labels of each trial's first `theta.nrows()` sources under `theta`.
pub fn regression_labels<F: Scalar>(
    sources: &Array3<F>,
    theta: &Array2<F>,
    fmap: &FeatureMap<F>,
) -> Result<Array2<F>> {
    let n = sources.dim().0;
    let m = theta.nrows();
    let rows: Vec<Vec<F>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..m)
                .map(|k| {
                    let phi = fmap.forward(sources.slice(s![i, k, ..]))?;
                    Ok(theta.row(k).dot(&phi))
                })
                .collect::<Result<Vec<F>>>()
        })
        .collect::<Result<_>>()?;
    Ok(Array2::from_shape_fn((n, m), |(i, k)| rows[i][k]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recipe {
    /// Laplace sources, Gaussian mixing, no targets by default.
    MultiTrial,
    /// Laplace sources, Hilbert-eigenspace mixing, regression targets.
    Supervision,
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi_trial" => Ok(Recipe::MultiTrial),
            "supervision" => Ok(Recipe::Supervision),
            other => Err(Error::Config(format!("unknown recipe '{other}'"))),
        }
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Recipe::MultiTrial => "multi_trial",
            Recipe::Supervision => "supervision",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenOverrides {
    pub n: Option<usize>,
    pub c: Option<usize>,
    pub t: Option<usize>,
    pub m: Option<usize>,
    pub kappa: Option<f64>,
    pub feature: Option<FeatureMapConfig>,
}

/// Fully resolved generator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub recipe: Recipe,
    pub n: usize,
    pub c: usize,
    pub t: usize,
    pub m: usize,
    pub kappa: f64,
    pub feature: FeatureMapConfig,
    pub seed: u64,
}

impl GenSpec {
    pub fn resolve(recipe: Recipe, o: &GenOverrides, seed: u64) -> Self {
        let (n, c, t, m) = match recipe {
            Recipe::MultiTrial => (80, 10, 1000, 0),
            Recipe::Supervision => (6000, 10, 1000, 3),
        };
        GenSpec {
            recipe,
            n: o.n.unwrap_or(n),
            c: o.c.unwrap_or(c),
            t: o.t.unwrap_or(t),
            m: o.m.unwrap_or(m),
            kappa: o.kappa.unwrap_or(5.0),
            feature: o.feature.unwrap_or_default(),
            seed,
        }
    }

    pub fn params(&self) -> BTreeMap<String, String> {
        let mut p = BTreeMap::new();
        p.insert("recipe".into(), self.recipe.to_string());
        p.insert("n".into(), self.n.to_string());
        p.insert("c".into(), self.c.to_string());
        p.insert("t".into(), self.t.to_string());
        p.insert("m".into(), self.m.to_string());
        p.insert("seed".into(), self.seed.to_string());
        if self.recipe == Recipe::Supervision {
            p.insert("kappa".into(), self.kappa.to_string());
        }
        if self.m > 0 {
            p.insert("window".into(), self.feature.window.to_string());
            p.insert("hop".into(), self.feature.hop.to_string());
            p.insert("log_power".into(), self.feature.log_power.to_string());
            p.insert("log_eps".into(), self.feature.log_eps.to_string());
        }
        p
    }
}

#[derive(Debug, Clone)]
pub struct Generated<F> {
    pub dataset: Dataset<F>,
    pub mixing: MixingGroundTruth<F>,
    pub sources: Array3<F>,
    /// `M×d` target parameters; `None` when there are no targets.
    pub theta_star: Option<Array2<F>>,
    pub spec: GenSpec,
}

/// Mixes `z_i = A s_i` for every trial.
pub fn mix_sources<F: Scalar>(a: &Array2<F>, sources: &Array3<F>) -> Array3<F> {
    let mut out = Array3::<F>::zeros(sources.raw_dim());
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(sources.axis_iter(Axis(0)).into_par_iter())
        .for_each(|(mut z, s)| z.assign(&a.dot(&s)));
    out
}

pub fn gen_dataset<F: Scalar>(
    recipe: Recipe,
    overrides: &GenOverrides,
    seed: u64,
) -> Result<Generated<F>> {
    let spec = GenSpec::resolve(recipe, overrides, seed);
    if spec.n == 0 || spec.c == 0 || spec.t == 0 {
        return Err(Error::Dimension(
            "generator dimensions must be positive".into(),
        ));
    }
    if spec.m > spec.c {
        return Err(Error::Schema(format!(
            "{} targets exceed {} channels",
            spec.m, spec.c
        )));
    }
    let sources = gen_laplace_sources::<F>(spec.n, spec.c, spec.t, mix_seed(seed, SOURCES));
    let mixing = match recipe {
        Recipe::MultiTrial => gen_gaussian_mixing(spec.c, mix_seed(seed, MIXING))?,
        Recipe::Supervision => gen_hilbert_mixing(spec.c, spec.kappa, mix_seed(seed, MIXING))?,
    };
    let (labels, theta_star) = if spec.m > 0 {
        let (y, th) =
            gen_regression_targets(&sources, spec.m, &spec.feature, mix_seed(seed, TARGETS))?;
        (y, Some(th))
    } else {
        (Array2::zeros((spec.n, 0)), None)
    };
    let schema = (0..spec.m)
        .map(|k| TargetSchema::continuous(format!("y{k}")))
        .collect();
    let signals = mix_sources(mixing.a(), &sources);
    let dataset = Dataset::from_arrays(&signals, &labels, schema)?.with_params(spec.params());
    Ok(Generated {
        dataset,
        mixing,
        sources,
        theta_star,
        spec,
    })
}
