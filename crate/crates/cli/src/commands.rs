use std::io::Write;
use std::path::{Path, PathBuf};

use multiway::bootstrap::QUANTILE_RULE;
use multiway::io::{read_sample, write_sample};
use multiway::simulation::{
    run_coverage_with_progress, AdditiveParams, CellSizeLaw, McConfig, ProbitParams, Truth, SCHEMA_VERSION,
};
use multiway::{
    percentile_ci, run_bootstrap, sigma_subset, symmetric_abs_ci, variance, wald_region, Adjustment, BallRegion,
    ClusteredSample, DgpSpec, Dimensions, Error, Interval, Result, VarianceEstimate, VarianceKind, WaldRegion,
};
use serde::Serialize;

use crate::estimator::{parse_config, Fitted, Prepared};
use crate::{BootstrapArgs, DgpName, EstimateArgs, McArgs, SimulateArgs};

fn announce_seed(seed: u64) {
    eprintln!("seed: {seed}");
}

fn dims_arg(v: &[usize]) -> Result<Option<Dimensions>> {
    if v.is_empty() {
        Ok(None)
    } else {
        Dimensions::new(v.to_vec()).map(Some)
    }
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("output serializes") + "\n";
    std::fs::write(path, text)?;
    Ok(())
}

fn dgp_from_args(a: &SimulateArgs, k: usize) -> Result<DgpSpec> {
    if let Some(path) = &a.dgp_config {
        return parse_config(&std::fs::read_to_string(path)?);
    }
    let cell_size = match a.poisson_mu {
        Some(mu) => CellSizeLaw::OnePlusPoisson {
            mu,
            factor_linked: a.factor_linked,
        },
        None => CellSizeLaw::Fixed { n: a.cell_size },
    };
    let additive = || AdditiveParams {
        sigma: if a.sigma.is_empty() {
            vec![1.0; k]
        } else {
            a.sigma.clone()
        },
        sigma_eps: a.sigma_eps.unwrap_or(1.0),
        sigma_unit: a.sigma_unit,
        mu: a.mu,
        cell_size: cell_size.clone(),
    };
    Ok(match a.dgp {
        DgpName::Additive => DgpSpec::AdditiveEffects(additive()),
        DgpName::Additive3 => DgpSpec::AdditiveThreeWay(additive()),
        DgpName::Product => DgpSpec::ProductDegenerate {
            sigma_eps: a.sigma_eps.unwrap_or(0.0),
        },
        DgpName::Probit => DgpSpec::ProbitDesign(ProbitParams {
            sigma_x: a.sigma.clone(),
            cell_size: cell_size.clone(),
            ..ProbitParams::default()
        }),
    })
}

#[derive(Serialize)]
struct TruthFile<'a> {
    schema_version: u32,
    dgp: &'a DgpSpec,
    dims: &'a [usize],
    seed: u64,
    truth: &'a Truth,
}

pub fn simulate(a: &SimulateArgs, seed: u64) -> Result<()> {
    announce_seed(seed);
    let dims = Dimensions::new(a.dims.clone())?;
    let dgp = dgp_from_args(a, dims.k())?;
    let (sample, truth) = multiway::generate(&dgp, &dims, seed)?;
    write_sample(&a.output, &sample)?;
    let truth_path = a.output.with_extension("truth.json");
    write_json(
        &truth_path,
        &TruthFile {
            schema_version: SCHEMA_VERSION,
            dgp: &dgp,
            dims: dims.counts(),
            seed,
            truth: &truth,
        },
    )?;
    eprintln!(
        "wrote {} units in {} cells to {}",
        sample.total_units(),
        dims.pi_c(),
        a.output.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct VarianceReport {
    #[serde(flatten)]
    estimate: VarianceEstimate,
    std_errors: Vec<f64>,
    min_eigenvalue: f64,
    wald: WaldRegion,
}

#[derive(Serialize)]
struct Diagnostics {
    total_units: usize,
    condition_number: Option<f64>,
    residual_norm: Option<f64>,
    /// `‖V̂₁ - V̂_cgm - C̲ Σ̂_{1,2}‖ / ‖V̂₁‖`, two-way designs only.
    two_way_identity_residual: Option<f64>,
    gmm_objective: Option<f64>,
    notes: Vec<String>,
}

#[derive(Serialize)]
struct EstimateReport<'a> {
    schema_version: u32,
    estimator: &'static str,
    dims: &'a [usize],
    alpha: f64,
    theta: &'a [f64],
    variances: Vec<VarianceReport>,
    diagnostics: Diagnostics,
    #[serde(skip_serializing_if = "Option::is_none")]
    gmm: Option<&'a multiway::GmmResult>,
}

fn two_way_residual(scores: &multiway::CenteredScores) -> Result<Option<f64>> {
    let dims = scores.dims();
    if dims.k() != 2 {
        return Ok(None);
    }
    let v1 = variance(scores, VarianceKind::V1, Adjustment::Unit)?.matrix;
    let cgm = variance(scores, VarianceKind::Cgm, Adjustment::Unit)?.matrix;
    let s12 = sigma_subset(scores, &[0, 1], Adjustment::Unit)?;
    let resid = &v1 - &cgm - s12 * dims.c_min() as f64;
    let norm = v1.norm();
    Ok(Some(if norm > 0.0 { resid.norm() / norm } else { resid.norm() }))
}

fn load(input: &Path, dims: &[usize]) -> Result<ClusteredSample> {
    read_sample(input, dims_arg(dims)?.as_ref())
}

pub fn estimate(a: &EstimateArgs, seed: u64) -> Result<()> {
    announce_seed(seed);
    let kinds = a
        .variance
        .iter()
        .map(|s| s.parse::<VarianceKind>())
        .collect::<Result<Vec<_>>>()?;
    let adj: Adjustment = a.adjustment.parse()?;
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(Error::Argument(format!("alpha = {} not in (0, 1)", a.alpha)));
    }
    let sample = load(&a.input, &a.dims)?;
    let prepared = Prepared::new(&sample, &a.est)?;
    let fit = prepared.fit()?;
    let theta = fit.theta().to_vec();
    let dims = sample.dims();

    let mut notes = Vec::new();
    let mut variances = Vec::new();
    for &kind in &kinds {
        match prepared.variance(&fit, kind, adj)? {
            Some(estimate) => {
                let wald = wald_region(&theta, &estimate, dims, a.alpha)?;
                let c = dims.c_min() as f64;
                variances.push(VarianceReport {
                    std_errors: (0..theta.len()).map(|r| (estimate.matrix[(r, r)] / c).sqrt()).collect(),
                    min_eigenvalue: estimate.min_eigenvalue(),
                    wald,
                    estimate,
                });
            }
            None => {
                notes.push(format!(
                    "{} variance unavailable for this estimator; use the bootstrap",
                    kind.name()
                ));
                break;
            }
        }
    }

    let scores = prepared.scores(&fit)?;
    let two_way_identity_residual = match &scores {
        Some(s) => two_way_residual(s)?,
        None => None,
    };
    let (condition_number, residual_norm, gmm_objective, gmm) = match &fit {
        Fitted::Plain(r) => (r.meta.condition_number, r.meta.residual_norm, None, None),
        Fitted::Gmm(g) => (None, None, Some(g.objective_value), Some(g)),
    };
    let report = EstimateReport {
        schema_version: SCHEMA_VERSION,
        estimator: a.est.estimator.name(),
        dims: dims.counts(),
        alpha: a.alpha,
        theta: &theta,
        variances,
        diagnostics: Diagnostics {
            total_units: sample.total_units(),
            condition_number,
            residual_norm,
            two_way_identity_residual,
            gmm_objective,
            notes,
        },
        gmm,
    };
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    match &a.output {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

#[derive(Serialize)]
struct SymmetricReport {
    #[serde(flatten)]
    ball: BallRegion,
    intervals: Vec<Interval>,
}

#[derive(Serialize)]
struct Failures {
    count: usize,
    rate: f64,
    /// 1-based replicate numbers.
    replicates: Vec<usize>,
}

#[derive(Serialize)]
struct CiReport<'a> {
    schema_version: u32,
    estimator: &'static str,
    seed: u64,
    #[serde(rename = "B")]
    b: usize,
    alpha: f64,
    theta_hat: &'a [f64],
    quantile_rule: &'static str,
    symmetric_abs: SymmetricReport,
    percentile: Option<Vec<Interval>>,
    std_errors: Vec<f64>,
    failures: Failures,
}

fn replicates_needed(alpha: f64, factor: f64) -> usize {
    (factor / alpha - 1e-9).ceil() as usize
}

pub fn bootstrap(a: &BootstrapArgs, seed: u64) -> Result<()> {
    announce_seed(seed);
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(Error::Argument(format!("alpha = {} not in (0, 1)", a.alpha)));
    }
    let need = replicates_needed(a.alpha, 1.0);
    if a.b < need {
        return Err(Error::InsufficientReplicates { have: a.b, need });
    }
    let sample = load(&a.input, &a.dims)?;
    let prepared = Prepared::new(&sample, &a.est)?;
    let fit = prepared.fit()?;
    let theta_hat = fit.theta().to_vec();
    let reps = run_bootstrap(
        |w| prepared.reestimate(w, &theta_hat),
        sample.dims(),
        theta_hat.clone(),
        a.b,
        seed,
    )?;
    if reps.excessive_failures() {
        eprintln!(
            "warning: {} of {} replicates failed to re-estimate",
            reps.failed.len(),
            reps.b
        );
    }
    let ball = symmetric_abs_ci(&reps, a.alpha)?;
    let percentile = if reps.thetas.len() >= replicates_needed(a.alpha, 2.0) {
        Some(percentile_ci(&reps, a.alpha)?)
    } else {
        eprintln!(
            "note: percentile intervals need B >= {}",
            replicates_needed(a.alpha, 2.0)
        );
        None
    };
    std::fs::write(with_suffix(&a.output, ".replicates.csv"), reps.to_csv())?;
    let report = CiReport {
        schema_version: SCHEMA_VERSION,
        estimator: a.est.estimator.name(),
        seed,
        b: a.b,
        alpha: a.alpha,
        theta_hat: &theta_hat,
        quantile_rule: QUANTILE_RULE,
        symmetric_abs: SymmetricReport {
            intervals: ball.intervals(),
            ball,
        },
        percentile,
        std_errors: reps.std_errors(),
        failures: Failures {
            count: reps.failed.len(),
            rate: reps.failure_rate(),
            replicates: reps.failed.iter().map(|i| i + 1).collect(),
        },
    };
    write_json(&with_suffix(&a.output, ".ci.json"), &report)
}

pub fn mc(a: &McArgs, seed: Option<u64>) -> Result<()> {
    let mut config: McConfig = parse_config(&std::fs::read_to_string(&a.config)?)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    announce_seed(config.seed);
    let step = (config.replications / 20).max(1);
    let report = run_coverage_with_progress(&config, |done, total| {
        if done % step == 0 || done == total {
            eprintln!("replications: {done}/{total}");
        }
    })?;
    std::fs::write(with_suffix(&a.output, ".json"), report.to_json())?;
    std::fs::write(with_suffix(&a.output, ".csv"), report.to_csv())?;
    for m in &report.methods {
        eprintln!(
            "{:<16} coverage {:.4} (mc se {:.4}), {} failures",
            m.method.name(),
            m.coverage,
            m.mc_se,
            m.failures
        );
    }
    Ok(())
}
