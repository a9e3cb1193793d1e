//! Separately exchangeable data-generating processes and the Monte Carlo
//! coverage harness.
//!
//! Every DGP is built from independent per-cluster factors (one draw per
//! cluster of each dimension) plus cell- and unit-level noise.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{format_float, percentile_ci, run_bootstrap, symmetric_abs_ci};
use crate::data::{ClusteredSample, Coordinate, Dimensions};
use crate::error::{Error, Result};
use crate::estimators::{EcdfSpec, MeanEstimator, QuantileEstimator, RatioEstimator};
use crate::gmm::{
    gmm_fit, gmm_hhat_with, gmm_variance, probit_score_moments, GmmEstimator, MomentModel, OptimizerConfig, ThetaBox,
    WeightMatrix,
};
use crate::region::Region;
use crate::rng;
use crate::variance::{variance, wald_region_from_matrix, Adjustment, CenteredScores, VarianceKind};

/// Law of the number of units `N_j` in a cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum CellSizeLaw {
    Fixed {
        n: usize,
    },
    /// `N_j = 1 + Poisson(μ)`, or `1 + Poisson(μ expit(α¹_{j₁}))` when factor-linked.
    OnePlusPoisson {
        mu: f64,
        #[serde(default)]
        factor_linked: bool,
    },
}

impl Default for CellSizeLaw {
    fn default() -> Self {
        CellSizeLaw::Fixed { n: 1 }
    }
}

impl CellSizeLaw {
    fn validate(&self) -> Result<()> {
        match self {
            CellSizeLaw::OnePlusPoisson { mu, .. } if !(mu.is_finite() && *mu >= 0.0) => {
                Err(Error::Argument(format!("Poisson mean {mu} must be finite and >= 0")))
            }
            _ => Ok(()),
        }
    }

    fn draw<R: Rng>(&self, first_factor: f64, r: &mut R) -> usize {
        match *self {
            CellSizeLaw::Fixed { n } => n,
            CellSizeLaw::OnePlusPoisson { mu, factor_linked } => {
                let rate = if factor_linked { mu * expit(first_factor) } else { mu };
                1 + poisson(rate, r)
            }
        }
    }
}

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn poisson<R: Rng>(rate: f64, r: &mut R) -> usize {
    if rate <= 0.0 {
        return 0;
    }
    Poisson::new(rate).expect("positive finite rate").sample(r) as usize
}

/// Unit value `y = μ + Σ_i α^i_{j_i} + ε_j + η`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditiveParams {
    /// Factor standard deviation σ_i for each dimension.
    pub sigma: Vec<f64>,
    #[serde(default = "one")]
    pub sigma_eps: f64,
    #[serde(default = "one")]
    pub sigma_unit: f64,
    #[serde(default)]
    pub mu: f64,
    #[serde(default)]
    pub cell_size: CellSizeLaw,
}

fn one() -> f64 {
    1.0
}

impl AdditiveParams {
    pub fn unit_variance(k: usize) -> Self {
        Self {
            sigma: vec![1.0; k],
            sigma_eps: 1.0,
            sigma_unit: 1.0,
            mu: 0.0,
            cell_size: CellSizeLaw::Fixed { n: 1 },
        }
    }
}

/// Latent-index probit with `X` and the error each additive in margin factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbitParams {
    #[serde(default = "default_beta")]
    pub beta: [f64; 2],
    /// Per-dimension factor SDs of `X`.
    #[serde(default = "default_half")]
    pub sigma_x: Vec<f64>,
    /// SD of the unit-level part of `X`.
    #[serde(default = "half")]
    pub sigma_x_unit: f64,
    /// Per-dimension factor SDs of the latent error before normalization.
    #[serde(default = "default_half")]
    pub sigma_e: Vec<f64>,
    #[serde(default = "one")]
    pub sigma_e_unit: f64,
    #[serde(default)]
    pub cell_size: CellSizeLaw,
}

fn default_beta() -> [f64; 2] {
    [0.0, 1.0]
}

fn half() -> f64 {
    0.5
}

fn default_half() -> Vec<f64> {
    Vec::new()
}

impl ProbitParams {
    fn factor_sds(v: &[f64], k: usize) -> Result<Vec<f64>> {
        match v.len() {
            0 => Ok(vec![0.5; k]),
            n if n == k => Ok(v.to_vec()),
            n => Err(Error::Argument(format!("{n} factor SDs for {k} dimensions"))),
        }
    }
}

impl Default for ProbitParams {
    fn default() -> Self {
        Self {
            beta: default_beta(),
            sigma_x: Vec::new(),
            sigma_x_unit: 0.5,
            sigma_e: Vec::new(),
            sigma_e_unit: 1.0,
            cell_size: CellSizeLaw::Fixed { n: 1 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum DgpSpec {
    AdditiveEffects(AdditiveParams),
    /// `S_j = (U_{j₁} - ½)(V_{j₂} - ½) + ε_j`, one unit per cell, `k = 2`.
    ProductDegenerate {
        #[serde(default)]
        sigma_eps: f64,
    },
    ProbitDesign(ProbitParams),
    /// The additive design restricted to `k = 3`.
    AdditiveThreeWay(AdditiveParams),
}

impl DgpSpec {
    pub fn name(&self) -> &'static str {
        match self {
            DgpSpec::AdditiveEffects(_) => "additive_effects",
            DgpSpec::ProductDegenerate { .. } => "product_degenerate",
            DgpSpec::ProbitDesign(_) => "probit_design",
            DgpSpec::AdditiveThreeWay(_) => "additive_three_way",
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            DgpSpec::ProbitDesign(_) => 2,
            _ => 1,
        }
    }

    pub fn validate(&self, dims: &Dimensions) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Argument(format!("{name} = {v} must be finite and >= 0")))
            }
        };
        match self {
            DgpSpec::AdditiveEffects(p) | DgpSpec::AdditiveThreeWay(p) => {
                if matches!(self, DgpSpec::AdditiveThreeWay(_)) && dims.k() != 3 {
                    return Err(Error::Argument(format!(
                        "additive_three_way needs k = 3, got k = {}",
                        dims.k()
                    )));
                }
                if p.sigma.len() != dims.k() {
                    return Err(Error::Argument(format!(
                        "{} factor SDs for {} dimensions",
                        p.sigma.len(),
                        dims.k()
                    )));
                }
                for &s in &p.sigma {
                    nonneg("sigma", s)?;
                }
                nonneg("sigma_eps", p.sigma_eps)?;
                nonneg("sigma_unit", p.sigma_unit)?;
                if !p.mu.is_finite() {
                    return Err(Error::Argument("mu must be finite".into()));
                }
                p.cell_size.validate()
            }
            DgpSpec::ProductDegenerate { sigma_eps } => {
                if dims.k() != 2 {
                    return Err(Error::Argument(format!(
                        "product_degenerate needs k = 2, got k = {}",
                        dims.k()
                    )));
                }
                nonneg("sigma_eps", *sigma_eps)
            }
            DgpSpec::ProbitDesign(p) => {
                for s in ProbitParams::factor_sds(&p.sigma_x, dims.k())?
                    .into_iter()
                    .chain(ProbitParams::factor_sds(&p.sigma_e, dims.k())?)
                {
                    nonneg("factor SD", s)?;
                }
                nonneg("sigma_x_unit", p.sigma_x_unit)?;
                nonneg("sigma_e_unit", p.sigma_e_unit)?;
                if p.sigma_e_unit == 0.0
                    && ProbitParams::factor_sds(&p.sigma_e, dims.k())?
                        .iter()
                        .all(|&s| s == 0.0)
                {
                    return Err(Error::Argument("the latent error needs positive variance".into()));
                }
                if !p.beta.iter().all(|b| b.is_finite()) {
                    return Err(Error::Argument("beta must be finite".into()));
                }
                p.cell_size.validate()
            }
        }
    }
}

/// Population parameters implied by a DGP.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Truth {
    /// Per-unit mean for the additive designs, `β` for the probit design.
    pub theta0: Vec<f64>,
    /// `E S_j`, the target of the mean estimator.
    pub cell_sum_mean: Option<Vec<f64>>,
    /// Median of a unit's outcome, when the cell size is independent of it.
    pub median: Option<f64>,
}

/// The population parameters of `dgp`.
pub fn truth(dgp: &DgpSpec) -> Truth {
    match dgp {
        DgpSpec::AdditiveEffects(p) | DgpSpec::AdditiveThreeWay(p) => additive_truth(p),
        DgpSpec::ProductDegenerate { .. } => Truth {
            theta0: vec![0.0],
            cell_sum_mean: Some(vec![0.0]),
            median: Some(0.0),
        },
        DgpSpec::ProbitDesign(p) => Truth {
            theta0: p.beta.to_vec(),
            cell_sum_mean: None,
            median: None,
        },
    }
}

/// Draws a sample. Cells are generated in lexicographic order from a single
/// stream keyed by `(seed, "data")`.
pub fn generate(dgp: &DgpSpec, dims: &Dimensions, seed: u64) -> Result<(ClusteredSample, Truth)> {
    dgp.validate(dims)?;
    let mut r = rng::stream(seed, &[rng::TAG_DATA]);
    let k = dims.k();
    let factors = |sds: &[f64], r: &mut rng::StreamRng| -> Vec<Vec<f64>> {
        (0..k)
            .map(|i| (0..dims.count(i)).map(|_| sds[i] * normal(r)).collect())
            .collect()
    };
    let pi_c = dims.pi_c();
    let mut cells = Vec::with_capacity(pi_c);
    match dgp {
        DgpSpec::AdditiveEffects(p) | DgpSpec::AdditiveThreeWay(p) => {
            let alpha = factors(&p.sigma, &mut r);
            for lin in 0..pi_c {
                let j = dims.coords(lin);
                let base = p.mu + (0..k).map(|i| alpha[i][j.0[i]]).sum::<f64>() + p.sigma_eps * normal(&mut r);
                let n = p.cell_size.draw(alpha[0][j.0[0]], &mut r);
                cells.push((0..n).map(|_| base + p.sigma_unit * normal(&mut r)).collect());
            }
            let sample = ClusteredSample::from_cells(dims.clone(), 1, cells)?;
            Ok((sample, truth(dgp)))
        }
        DgpSpec::ProductDegenerate { sigma_eps } => {
            let u: Vec<f64> = (0..dims.count(0)).map(|_| r.random::<f64>() - 0.5).collect();
            let v: Vec<f64> = (0..dims.count(1)).map(|_| r.random::<f64>() - 0.5).collect();
            for lin in 0..pi_c {
                let j = dims.coords(lin);
                cells.push(vec![u[j.0[0]] * v[j.0[1]] + sigma_eps * normal(&mut r)]);
            }
            let sample = ClusteredSample::from_cells(dims.clone(), 1, cells)?;
            Ok((sample, truth(dgp)))
        }
        DgpSpec::ProbitDesign(p) => {
            let sx = ProbitParams::factor_sds(&p.sigma_x, k)?;
            let se = ProbitParams::factor_sds(&p.sigma_e, k)?;
            let ax = factors(&sx, &mut r);
            let ae = factors(&se, &mut r);
            let e_scale = (se.iter().map(|s| s * s).sum::<f64>() + p.sigma_e_unit * p.sigma_e_unit).sqrt();
            for lin in 0..pi_c {
                let j = dims.coords(lin);
                let x_cell: f64 = (0..k).map(|i| ax[i][j.0[i]]).sum();
                let e_cell: f64 = (0..k).map(|i| ae[i][j.0[i]]).sum();
                let n = p.cell_size.draw(ax[0][j.0[0]], &mut r);
                let mut cell = Vec::with_capacity(2 * n);
                for _ in 0..n {
                    let x = x_cell + p.sigma_x_unit * normal(&mut r);
                    let e = (e_cell + p.sigma_e_unit * normal(&mut r)) / e_scale;
                    let y = if p.beta[0] + p.beta[1] * x + e > 0.0 { 1.0 } else { 0.0 };
                    cell.extend([y, x]);
                }
                cells.push(cell);
            }
            let sample = ClusteredSample::from_cells(dims.clone(), 2, cells)?;
            Ok((sample, truth(dgp)))
        }
    }
}

fn normal<R: Rng>(r: &mut R) -> f64 {
    StandardNormal.sample(r)
}

fn additive_truth(p: &AdditiveParams) -> Truth {
    match p.cell_size {
        CellSizeLaw::Fixed { n } => Truth {
            theta0: vec![p.mu],
            cell_sum_mean: Some(vec![n as f64 * p.mu]),
            median: (n > 0).then_some(p.mu),
        },
        CellSizeLaw::OnePlusPoisson {
            mu,
            factor_linked: false,
        } => Truth {
            theta0: vec![p.mu],
            cell_sum_mean: Some(vec![(1.0 + mu) * p.mu]),
            median: Some(p.mu),
        },
        CellSizeLaw::OnePlusPoisson {
            mu,
            factor_linked: true,
        } => {
            // E N = 1 + μ E expit(α), E[N α] = μ E[α expit(α)] with α ~ N(0, σ₁²)
            let s = p.sigma[0];
            let (e_expit, e_a_expit) = gauss_expectations(s);
            let en = 1.0 + mu * e_expit;
            let ens = p.mu * en + mu * e_a_expit;
            Truth {
                theta0: vec![ens / en],
                cell_sum_mean: Some(vec![ens]),
                median: None,
            }
        }
    }
}

/// `(E expit(α), E[α expit(α)])` for `α ~ N(0, s²)` by the trapezoid rule.
fn gauss_expectations(s: f64) -> (f64, f64) {
    if s == 0.0 {
        return (0.5, 0.0);
    }
    let n = 8000;
    let (lo, hi) = (-12.0, 12.0);
    let h = (hi - lo) / n as f64;
    let mut acc = (0.0, 0.0);
    for g in 0..=n {
        let z = lo + h * g as f64;
        let w =
            if g == 0 || g == n { 0.5 } else { 1.0 } * h * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let e = expit(s * z);
        acc.0 += w * e;
        acc.1 += w * s * z * e;
    }
    acc
}

/// `Σ_i (C̲/C_i) n² σ_i²` for additive designs with fixed cell size `n`.
pub fn analytic_asymptotic_variance(dgp: &DgpSpec, dims: &Dimensions) -> Result<DMatrix<f64>> {
    let p = match dgp {
        DgpSpec::AdditiveEffects(p) | DgpSpec::AdditiveThreeWay(p) => p,
        other => {
            return Err(Error::Unsupported(format!(
                "no closed-form asymptotic variance for {}",
                other.name()
            )))
        }
    };
    dgp.validate(dims)?;
    let CellSizeLaw::Fixed { n } = p.cell_size else {
        return Err(Error::Unsupported(
            "closed-form asymptotic variance needs fixed cell sizes".into(),
        ));
    };
    let n2 = (n * n) as f64;
    let v = dims
        .lambda_hats()
        .iter()
        .zip(&p.sigma)
        .map(|(l, s)| l * n2 * s * s)
        .sum::<f64>();
    Ok(DMatrix::from_element(1, 1, v))
}

/// Relabels the clusters of dimension `dim`: old label `c` becomes `perm[c]`.
pub fn permute_clusters(sample: &ClusteredSample, dim: usize, perm: &[usize]) -> Result<ClusteredSample> {
    let dims = sample.dims();
    dims.check_dim(dim)?;
    let c = dims.count(dim);
    let mut seen = vec![false; c];
    if perm.len() != c || !perm.iter().all(|&p| p < c && !std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Argument(format!("not a permutation of {c} labels")));
    }
    let mut cells = vec![Vec::new(); dims.pi_c()];
    for lin in 0..dims.pi_c() {
        let mut j = dims.coords(lin);
        j.0[dim] = perm[j.0[dim]];
        cells[dims.linear(&j.0)?] = sample.cell(lin).flatten().copied().collect();
    }
    ClusteredSample::from_cells(dims.clone(), sample.obs_dim(), cells)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum McMethod {
    #[serde(rename = "wald-v1")]
    WaldV1,
    #[serde(rename = "wald-v2")]
    WaldV2,
    #[serde(rename = "wald-cgm")]
    WaldCgm,
    #[serde(rename = "boot-symabs")]
    BootSymAbs,
    #[serde(rename = "boot-percentile")]
    BootPercentile,
}

impl McMethod {
    pub const ALL: [McMethod; 5] = [
        McMethod::WaldV1,
        McMethod::WaldV2,
        McMethod::WaldCgm,
        McMethod::BootSymAbs,
        McMethod::BootPercentile,
    ];

    pub fn name(self) -> &'static str {
        match self {
            McMethod::WaldV1 => "wald-v1",
            McMethod::WaldV2 => "wald-v2",
            McMethod::WaldCgm => "wald-cgm",
            McMethod::BootSymAbs => "boot-symabs",
            McMethod::BootPercentile => "boot-percentile",
        }
    }

    fn variance_kind(self) -> Option<VarianceKind> {
        match self {
            McMethod::WaldV1 => Some(VarianceKind::V1),
            McMethod::WaldV2 => Some(VarianceKind::V2),
            McMethod::WaldCgm => Some(VarianceKind::Cgm),
            _ => None,
        }
    }

    fn is_bootstrap(self) -> bool {
        self.variance_kind().is_none()
    }
}

impl std::str::FromStr for McMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        McMethod::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Argument(format!("unknown method `{s}`")))
    }
}

/// Which parameter the experiment targets.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McEstimator {
    /// `Σ_j S_j / Π_C`, targeting `E S_j`.
    #[default]
    Mean,
    /// Per-unit mean `Σ S_j / Σ N_j`.
    Ratio,
    /// Pooled median (bootstrap methods only).
    Median,
    /// Probit pseudo-MLE via the score moments.
    Probit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub dgp: DgpSpec,
    pub dims: Dimensions,
    #[serde(default)]
    pub estimator: McEstimator,
    pub replications: usize,
    #[serde(default)]
    pub bootstrap_b: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub methods: Vec<McMethod>,
    #[serde(default)]
    pub adjustment: Adjustment,
    #[serde(default)]
    pub seed: u64,
}

fn default_alpha() -> f64 {
    0.05
}

impl McConfig {
    /// Checks the configuration; errors carry the offending field name.
    pub fn validate(&self) -> Result<()> {
        let field = |path: &str, msg: String| Error::Config { path: path.into(), msg };
        if self.replications == 0 {
            return Err(field("replications", "must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(field("alpha", format!("{} not in (0, 1)", self.alpha)));
        }
        if self.methods.is_empty() {
            return Err(field("methods", "no method requested".into()));
        }
        if self.methods.iter().any(|m| m.is_bootstrap()) {
            let need = (1.0 / self.alpha - 1e-9).ceil() as usize;
            let need = if self.methods.contains(&McMethod::BootPercentile) {
                (2.0 / self.alpha - 1e-9).ceil() as usize
            } else {
                need
            };
            if self.bootstrap_b < need {
                return Err(field(
                    "bootstrap_b",
                    format!(
                        "{} replicates, need at least {need} at alpha = {}",
                        self.bootstrap_b, self.alpha
                    ),
                ));
            }
        }
        if self.estimator == McEstimator::Median && self.methods.iter().any(|m| !m.is_bootstrap()) {
            return Err(field(
                "methods",
                "the median estimator only supports bootstrap methods".into(),
            ));
        }
        match (self.estimator, &self.dgp) {
            (McEstimator::Probit, DgpSpec::ProbitDesign(_)) => {}
            (McEstimator::Probit, _) => return Err(field("estimator", "probit needs the probit_design DGP".into())),
            (_, DgpSpec::ProbitDesign(_)) => {
                return Err(field(
                    "estimator",
                    "the probit_design DGP needs the probit estimator".into(),
                ))
            }
            _ => {}
        }
        self.dgp.validate(&self.dims).map_err(|e| field("dgp", e.to_string()))?;
        if self.estimator == McEstimator::Median && truth(&self.dgp).median.is_none() {
            return Err(field("estimator", "median truth is unavailable for this DGP".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodReport {
    pub method: McMethod,
    /// Replications that produced a region.
    pub completed: usize,
    pub failures: usize,
    pub coverage: f64,
    /// `sqrt(cov (1 - cov) / R)` over completed replications.
    pub mc_se: f64,
    /// Mean interval length, averaged over coordinates.
    pub avg_length: f64,
    pub rejection_rate: f64,
    /// Replications whose `V̂` trace was below 5% of the mean squared cell score.
    pub near_zero_vhat: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McReport {
    pub schema_version: u32,
    pub config: McConfig,
    pub truth: Vec<f64>,
    pub methods: Vec<MethodReport>,
    /// Replications where the point estimate itself failed.
    pub estimator_failures: usize,
    /// Mean and standard deviation of `θ̂` across replications (first coordinate).
    pub theta_mean: f64,
    pub theta_sd: f64,
    /// Mean bootstrap standard error (first coordinate), when bootstrap methods ran.
    pub mean_bootstrap_se: Option<f64>,
    /// Median of `V̂₁` (first diagonal entry) over replications, when wald-v1 ran.
    pub median_vhat1: Option<f64>,
}

pub const SCHEMA_VERSION: u32 = 1;

impl McReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("method,completed,failures,coverage,mc_se,avg_length,rejection_rate,near_zero_vhat\n");
        for m in &self.methods {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                m.method.name(),
                m.completed,
                m.failures,
                format_float(m.coverage),
                format_float(m.mc_se),
                format_float(m.avg_length),
                format_float(m.rejection_rate),
                m.near_zero_vhat
            ));
        }
        out
    }
}

/// Outcome of one method in one replication.
#[derive(Debug, Clone, Default)]
struct MethodOutcome {
    covered: bool,
    length: f64,
    near_zero: bool,
    failed: bool,
}

struct Replication {
    theta: Option<f64>,
    boot_se: Option<f64>,
    vhat1: Option<f64>,
    outcomes: Vec<MethodOutcome>,
}

fn mean_length(intervals: &[crate::region::Interval]) -> f64 {
    intervals.iter().map(|i| i.length()).sum::<f64>() / intervals.len() as f64
}

fn near_zero(v: &DMatrix<f64>, scores: Option<&CenteredScores>) -> bool {
    let Some(s) = scores else { return false };
    let sums = s.sums();
    let n = sums.dims().pi_c() as f64;
    let scale = sums.values().iter().map(|x| x * x).sum::<f64>() / n;
    v.trace() <= 0.05 * scale
}

fn failed() -> MethodOutcome {
    MethodOutcome {
        failed: true,
        ..Default::default()
    }
}

fn one_replication(cfg: &McConfig, r: usize) -> Replication {
    let rep_seed = rng::derive_seed(cfg.seed, &[r as u64]);
    let all_failed = || Replication {
        theta: None,
        boot_se: None,
        vhat1: None,
        outcomes: cfg.methods.iter().map(|_| failed()).collect(),
    };
    let Ok((sample, truth)) = generate(&cfg.dgp, &cfg.dims, rep_seed) else {
        return all_failed();
    };
    let target = match cfg.estimator {
        McEstimator::Mean => truth.cell_sum_mean.clone(),
        McEstimator::Ratio | McEstimator::Probit => Some(truth.theta0.clone()),
        McEstimator::Median => truth.median.map(|m| vec![m]),
    };
    let Some(target) = target else { return all_failed() };

    // point estimate, scores (or Jacobian + moment sums) and a bootstrap closure
    type Boot<'a> = Box<dyn Fn(&crate::bootstrap::PigeonholeWeights) -> Result<Vec<f64>> + Sync + 'a>;
    let model = match cfg.estimator {
        McEstimator::Probit => match MomentModel::new(probit_score_moments(0, 1), ThetaBox::symmetric(2, 10.0)) {
            Ok(m) => Some(m),
            Err(_) => return all_failed(),
        },
        _ => None,
    };
    let fitted: Result<(Vec<f64>, Option<CenteredScores>, Boot)> = match (cfg.estimator, &model) {
        (McEstimator::Mean, _) => MeanEstimator::new(&sample, &Coordinate(0)).map(|e| {
            let fit = e.fit();
            let boot: Boot = Box::new(move |w| e.reestimate(w));
            (fit.theta, fit.scores, boot)
        }),
        (McEstimator::Ratio, _) => RatioEstimator::new(&sample, &Coordinate(0)).and_then(|e| {
            let fit = e.fit()?;
            let boot: Boot = Box::new(move |w| e.reestimate(w));
            Ok((fit.theta, fit.scores, boot))
        }),
        (McEstimator::Median, _) => QuantileEstimator::new(&sample, &EcdfSpec::scalar(0), 0.5).and_then(|e| {
            let fit = e.fit()?;
            let boot: Boot = Box::new(move |w| e.reestimate(w));
            Ok((fit.theta, None, boot))
        }),
        (McEstimator::Probit, Some(model)) => {
            let opt = OptimizerConfig {
                seed: rep_seed,
                ..Default::default()
            };
            let xi = WeightMatrix::identity(2);
            gmm_fit(&sample, model, &xi, &opt).map(|fit| {
                let est = GmmEstimator {
                    sample: &sample,
                    model,
                    xi,
                    config: opt,
                    theta_hat: fit.theta.clone(),
                };
                let boot: Boot = Box::new(move |w| est.reestimate(w));
                (fit.theta, None, boot)
            })
        }
        (McEstimator::Probit, None) => unreachable!("model built above"),
    };
    let Ok((theta_hat, scores, boot)) = fitted else {
        return all_failed();
    };

    let mut vhat1 = None;
    let wald = |kind: VarianceKind| -> Result<(DMatrix<f64>, Option<&CenteredScores>)> {
        match (&scores, &model) {
            (Some(s), _) => Ok((variance(s, kind, cfg.adjustment)?.matrix, Some(s))),
            (None, Some(m)) => {
                let j = crate::gmm::gmm_jhat(&sample, m, &theta_hat)?;
                let h = gmm_hhat_with(&sample, m, &theta_hat, kind, cfg.adjustment)?;
                Ok((gmm_variance(&j, &h, &WeightMatrix::identity(2))?, None))
            }
            _ => Err(Error::Unsupported("no variance estimator for this estimator".into())),
        }
    };

    let needs_boot = cfg.methods.iter().any(|m| m.is_bootstrap());
    let reps = if needs_boot {
        run_bootstrap(&boot, sample.dims(), theta_hat.clone(), cfg.bootstrap_b, rep_seed).ok()
    } else {
        None
    };
    let boot_se = reps.as_ref().map(|r| r.std_errors()[0]);

    let outcomes = cfg
        .methods
        .iter()
        .map(|&m| match m.variance_kind() {
            Some(kind) => {
                let Ok((v, s)) = wald(kind) else { return failed() };
                if kind == VarianceKind::V1 {
                    vhat1 = Some(v[(0, 0)]);
                }
                if v.iter().all(|&x| x == 0.0) {
                    // zero variance: the region collapses to its center
                    return MethodOutcome {
                        covered: theta_hat == target,
                        length: 0.0,
                        near_zero: true,
                        failed: false,
                    };
                }
                match wald_region_from_matrix(&theta_hat, &v, sample.dims(), cfg.alpha) {
                    Ok(region) => MethodOutcome {
                        covered: region.contains(&target),
                        length: mean_length(&region.intervals),
                        near_zero: near_zero(&v, s),
                        failed: false,
                    },
                    Err(_) => failed(),
                }
            }
            None => {
                let Some(reps) = reps.as_ref().filter(|r| !r.excessive_failures()) else {
                    return failed();
                };
                if m == McMethod::BootSymAbs {
                    match symmetric_abs_ci(reps, cfg.alpha) {
                        Ok(ball) => MethodOutcome {
                            covered: ball.contains(&target),
                            length: 2.0 * ball.radius,
                            ..Default::default()
                        },
                        Err(_) => failed(),
                    }
                } else {
                    match percentile_ci(reps, cfg.alpha) {
                        Ok(iv) => MethodOutcome {
                            covered: iv.iter().zip(&target).all(|(i, t)| i.contains_value(*t)),
                            length: mean_length(&iv),
                            ..Default::default()
                        },
                        Err(_) => failed(),
                    }
                }
            }
        })
        .collect();
    Replication {
        theta: Some(theta_hat[0]),
        boot_se,
        vhat1,
        outcomes,
    }
}

/// Runs the experiment; replications are processed in parallel and
/// aggregated in index order, so the report depends only on the config.
pub fn run_coverage(config: &McConfig) -> Result<McReport> {
    run_coverage_with_progress(config, |_, _| {})
}

/// As [`run_coverage`], calling `progress(done, total)` as replications finish.
pub fn run_coverage_with_progress(config: &McConfig, progress: impl Fn(usize, usize) + Sync) -> Result<McReport> {
    config.validate()?;
    let truth = truth(&config.dgp);
    let truth_vec = match config.estimator {
        McEstimator::Mean => truth.cell_sum_mean.clone().unwrap_or_default(),
        McEstimator::Ratio | McEstimator::Probit => truth.theta0.clone(),
        McEstimator::Median => truth.median.into_iter().collect(),
    };
    let done = std::sync::atomic::AtomicUsize::new(0);
    let total = config.replications;
    let reps: Vec<Replication> = (0..total)
        .into_par_iter()
        .map(|r| {
            let rep = one_replication(config, r);
            let d = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
            progress(d, total);
            rep
        })
        .collect();

    let methods = config
        .methods
        .iter()
        .enumerate()
        .map(|(mi, &method)| {
            let outs: Vec<&MethodOutcome> = reps.iter().map(|r| &r.outcomes[mi]).filter(|o| !o.failed).collect();
            let completed = outs.len();
            let n = completed.max(1) as f64;
            let coverage = outs.iter().filter(|o| o.covered).count() as f64 / n;
            MethodReport {
                method,
                completed,
                failures: total - completed,
                coverage,
                mc_se: (coverage * (1.0 - coverage) / n).sqrt(),
                avg_length: outs.iter().map(|o| o.length).sum::<f64>() / n,
                rejection_rate: if completed == 0 { 0.0 } else { 1.0 - coverage },
                near_zero_vhat: outs.iter().filter(|o| o.near_zero).count(),
            }
        })
        .collect();
    let thetas: Vec<f64> = reps.iter().filter_map(|r| r.theta).collect();
    let (theta_mean, theta_sd) = mean_sd(&thetas);
    let boot: Vec<f64> = reps.iter().filter_map(|r| r.boot_se).collect();
    let mut v1: Vec<f64> = reps.iter().filter_map(|r| r.vhat1).collect();
    v1.sort_by(f64::total_cmp);
    Ok(McReport {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        truth: truth_vec,
        methods,
        estimator_failures: total - thetas.len(),
        theta_mean,
        theta_sd,
        mean_bootstrap_se: (!boot.is_empty()).then(|| boot.iter().sum::<f64>() / boot.len() as f64),
        median_vhat1: (!v1.is_empty()).then(|| median_sorted(&v1)),
    })
}

pub fn mean_sd(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn median_sorted(x: &[f64]) -> f64 {
    let n = x.len();
    if n % 2 == 1 {
        x[n / 2]
    } else {
        0.5 * (x[n / 2 - 1] + x[n / 2])
    }
}
