//! Estimator selection shared by `estimate` and `bootstrap`.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use multiway::estimators::{MeanEstimator, OlsEstimator, QuantileEstimator, RatioEstimator};
use multiway::gmm::{
    cell_moment_sums, gmm_fit, gmm_variance, two_step_weight, Column, GmmEstimator, MomentSpec, WeightChoice,
};
use multiway::{
    ols_sandwich, variance, Adjustment, CenteredScores, ClusteredSample, EcdfSpec, Error, EstimateResult, FnStatistic,
    GmmResult, LinearModelSpec, MomentModel, OptimizerConfig, PigeonholeWeights, Result, ThetaBox, VarianceEstimate,
    VarianceKind, WeightMatrix,
};
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EstimatorName {
    Mean,
    Ratio,
    Ols,
    Quantile,
    Gmm,
}

impl EstimatorName {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorName::Mean => "mean",
            EstimatorName::Ratio => "ratio",
            EstimatorName::Ols => "ols",
            EstimatorName::Quantile => "quantile",
            EstimatorName::Gmm => "gmm",
        }
    }
}

/// Estimator flags. Column numbers are 1-based, as in the data files.
#[derive(Debug, Clone, Args)]
pub struct EstimatorArgs {
    #[arg(long, value_enum, default_value = "mean")]
    pub estimator: EstimatorName,

    /// Observation columns averaged by `mean` and `ratio`, or fed to `quantile` (default: all).
    #[arg(long, value_delimiter = ',')]
    pub columns: Vec<usize>,

    /// OLS outcome column.
    #[arg(long)]
    pub outcome: Option<usize>,

    /// OLS regressor columns.
    #[arg(long, value_delimiter = ',')]
    pub regressors: Vec<usize>,

    /// Fit OLS without a constant.
    #[arg(long)]
    pub no_intercept: bool,

    /// Quantile level.
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,

    /// JSON file describing the moment model, bounds, optimizer and weighting.
    #[arg(long)]
    pub gmm_config: Option<PathBuf>,
}

/// Contents of `--gmm-config`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmConfig {
    pub model: MomentSpec,
    #[serde(default)]
    pub bounds: Option<BoundsConfig>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub weight: WeightChoice,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Reads JSON into `T`, reporting the path of the offending field.
pub fn parse_config<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Config {
            path,
            msg: e.inner().to_string(),
        }
    })
}

fn zero_based(c: usize, what: &str) -> Result<usize> {
    c.checked_sub(1)
        .ok_or_else(|| Error::Argument(format!("{what}: columns are numbered from 1")))
}

fn shift_columns(cols: &[Column], what: &str) -> Result<Vec<Column>> {
    cols.iter()
        .map(|c| match *c {
            Column::Obs(i) => Ok(Column::Obs(zero_based(i, what)?)),
            Column::One => Ok(Column::One),
        })
        .collect()
}

/// Converts a spec with 1-based columns to the 0-based library form.
fn shift_spec(spec: &MomentSpec) -> Result<MomentSpec> {
    Ok(match spec {
        MomentSpec::Mean { coordinate } => MomentSpec::Mean {
            coordinate: zero_based(*coordinate, "model.coordinate")?,
        },
        MomentSpec::LinearIv { outcome, x, z } => MomentSpec::LinearIv {
            outcome: zero_based(*outcome, "model.outcome")?,
            x: shift_columns(x, "model.x")?,
            z: shift_columns(z, "model.z")?,
        },
        MomentSpec::QuantileIv { tau, outcome, x, z } => MomentSpec::QuantileIv {
            tau: *tau,
            outcome: zero_based(*outcome, "model.outcome")?,
            x: shift_columns(x, "model.x")?,
            z: shift_columns(z, "model.z")?,
        },
        MomentSpec::Probit { outcome, x } => MomentSpec::Probit {
            outcome: zero_based(*outcome, "model.outcome")?,
            x: zero_based(*x, "model.x")?,
        },
    })
}

fn columns(args: &EstimatorArgs, obs_dim: usize) -> Result<Vec<usize>> {
    if args.columns.is_empty() {
        return Ok((0..obs_dim).collect());
    }
    args.columns
        .iter()
        .map(|&c| {
            let i = zero_based(c, "--columns")?;
            if i >= obs_dim {
                return Err(Error::Index(format!(
                    "column {c} exceeds the {obs_dim} observation columns"
                )));
            }
            Ok(i)
        })
        .collect()
}

fn select(cols: Vec<usize>) -> FnStatistic<impl Fn(&[f64], usize) -> Vec<f64> + Send + Sync> {
    let n = cols.len();
    FnStatistic::new(n, move |y: &[f64], _| cols.iter().map(|&c| y[c]).collect())
}

pub struct GmmSetup {
    pub model: MomentModel,
    pub xi: WeightMatrix,
    pub config: OptimizerConfig,
}

/// An estimator bound to a sample, ready to fit and to re-estimate under bootstrap weights.
pub enum Prepared<'a> {
    Mean(MeanEstimator),
    Ratio(RatioEstimator),
    Ols(OlsEstimator),
    Quantile(QuantileEstimator),
    Gmm {
        sample: &'a ClusteredSample,
        setup: GmmSetup,
    },
}

/// A full-sample fit.
pub enum Fitted {
    Plain(EstimateResult),
    Gmm(GmmResult),
}

impl Fitted {
    pub fn theta(&self) -> &[f64] {
        match self {
            Fitted::Plain(r) => &r.theta,
            Fitted::Gmm(g) => &g.theta,
        }
    }
}

impl<'a> Prepared<'a> {
    pub fn new(sample: &'a ClusteredSample, args: &EstimatorArgs) -> Result<Self> {
        let d = sample.obs_dim();
        Ok(match args.estimator {
            EstimatorName::Mean => Prepared::Mean(MeanEstimator::new(sample, &select(columns(args, d)?))?),
            EstimatorName::Ratio => Prepared::Ratio(RatioEstimator::new(sample, &select(columns(args, d)?))?),
            EstimatorName::Ols => {
                let outcome = args
                    .outcome
                    .ok_or_else(|| Error::Argument("ols needs --outcome".into()))?;
                let spec = LinearModelSpec {
                    outcome_index: zero_based(outcome, "--outcome")?,
                    regressor_indices: args
                        .regressors
                        .iter()
                        .map(|&c| zero_based(c, "--regressors"))
                        .collect::<Result<_>>()?,
                    intercept: !args.no_intercept,
                };
                Prepared::Ols(OlsEstimator::new(sample, &spec)?)
            }
            EstimatorName::Quantile => {
                let spec = EcdfSpec {
                    coordinates: columns(args, d)?,
                    grid: None,
                };
                Prepared::Quantile(QuantileEstimator::new(sample, &spec, args.tau)?)
            }
            EstimatorName::Gmm => {
                let path = args
                    .gmm_config
                    .as_ref()
                    .ok_or_else(|| Error::Argument("gmm needs --gmm-config".into()))?;
                let cfg: GmmConfig = parse_config(&std::fs::read_to_string(path)?)?;
                let spec = shift_spec(&cfg.model)?;
                let p = spec.n_params();
                let bounds = match cfg.bounds {
                    Some(b) => ThetaBox::new(b.lower, b.upper)?,
                    None => ThetaBox::symmetric(p, 10.0),
                };
                let model = spec.build(bounds)?;
                let xi = match cfg.weight {
                    WeightChoice::Identity => WeightMatrix::identity(model.n_moments()),
                    WeightChoice::TwoStep => two_step_weight(sample, &model, &cfg.optimizer)?,
                };
                Prepared::Gmm {
                    sample,
                    setup: GmmSetup {
                        model,
                        xi,
                        config: cfg.optimizer,
                    },
                }
            }
        })
    }

    pub fn fit(&self) -> Result<Fitted> {
        Ok(match self {
            Prepared::Mean(e) => Fitted::Plain(e.fit()),
            Prepared::Ratio(e) => Fitted::Plain(e.fit()?),
            Prepared::Ols(e) => Fitted::Plain(e.fit()?),
            Prepared::Quantile(e) => Fitted::Plain(e.fit()?),
            Prepared::Gmm { sample, setup } => Fitted::Gmm(gmm_fit(sample, &setup.model, &setup.xi, &setup.config)?),
        })
    }

    pub fn reestimate(&self, w: &PigeonholeWeights, theta_hat: &[f64]) -> Result<Vec<f64>> {
        match self {
            Prepared::Mean(e) => e.reestimate(w),
            Prepared::Ratio(e) => e.reestimate(w),
            Prepared::Ols(e) => e.reestimate(w),
            Prepared::Quantile(e) => e.reestimate(w),
            Prepared::Gmm { sample, setup } => GmmEstimator {
                sample,
                model: &setup.model,
                xi: setup.xi.clone(),
                config: setup.config.clone(),
                theta_hat: theta_hat.to_vec(),
            }
            .reestimate(w),
        }
    }

    /// The requested variance estimate of `θ̂`, or `None` when only the bootstrap applies.
    pub fn variance(&self, fit: &Fitted, kind: VarianceKind, adj: Adjustment) -> Result<Option<VarianceEstimate>> {
        match (self, fit) {
            (Prepared::Quantile(_), _) => Ok(None),
            (Prepared::Ols(_), Fitted::Plain(r)) => ols_sandwich(r, kind, adj).map(Some),
            (_, Fitted::Plain(r)) => match &r.scores {
                Some(s) => variance(s, kind, adj).map(Some),
                None => Ok(None),
            },
            (Prepared::Gmm { sample, setup }, Fitted::Gmm(g)) => {
                let Some(j) = &g.jhat else { return Ok(None) };
                let sums = cell_moment_sums(sample, &setup.model, &g.theta)?;
                let mut est = variance(&CenteredScores::new(sums), kind, adj)?;
                est.matrix = gmm_variance(j, &est.matrix, &setup.xi)?;
                Ok(Some(est))
            }
            (_, Fitted::Gmm(_)) => Err(Error::Argument("fit does not match the estimator".into())),
        }
    }
}

impl Prepared<'_> {
    /// Per-cell scores behind the variance estimators, when the estimator has them.
    pub fn scores(&self, fit: &Fitted) -> Result<Option<CenteredScores>> {
        match (self, fit) {
            (Prepared::Gmm { sample, setup }, Fitted::Gmm(g)) => Ok(Some(CenteredScores::new(cell_moment_sums(
                sample,
                &setup.model,
                &g.theta,
            )?))),
            (_, Fitted::Plain(r)) => Ok(r.scores.clone()),
            _ => Ok(None),
        }
    }
}
