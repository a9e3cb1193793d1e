//! GMM estimation with multiway cluster-robust inference.
//!
//! The moment average is `m̄(θ) = Σ_j Σ_ℓ m(Y_{ℓ,j}, θ) / Π_C` and the
//! objective `M_C(θ) = |Ξ̂^{1/2} m̄(θ)| = sqrt(m̄' Ξ̂ m̄)`. Smooth models are
//! minimized by projected Gauss-Newton, nonsmooth ones by Nelder-Mead (or a
//! refining grid when `p = 1`), each from several starting points.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::PigeonholeWeights;
use crate::data::{CellSums, ClusteredSample};
use crate::error::{Error, Result};
use crate::linalg::{checked_inverse, min_eigenvalue, spd_inverse, symmetrize, to_rows};
use crate::rng;
use crate::variance::{variance, Adjustment, CenteredScores, VarianceKind};

/// A vector of moment functions `m(y, θ) ∈ R^L`, `θ ∈ R^p`.
pub trait Moments: Send + Sync {
    fn n_params(&self) -> usize;
    fn n_moments(&self) -> usize;

    fn check_input(&self, _obs_dim: usize) -> Result<()> {
        Ok(())
    }

    fn eval(&self, y: &[f64], theta: &[f64], out: &mut [f64]) -> Result<()>;

    fn has_jacobian(&self) -> bool {
        false
    }

    /// Writes `d(y, θ) = ∂m/∂θ'` row-major (`L × p`) into `out`.
    fn jacobian(&self, _y: &[f64], _theta: &[f64], _out: &mut [f64]) -> Result<()> {
        Err(Error::Model(format!(
            "model `{}` has no analytic Jacobian",
            self.name()
        )))
    }

    /// Whether `θ ↦ m(y, θ)` is differentiable, allowing numeric Jacobians.
    fn is_smooth(&self) -> bool {
        true
    }

    fn name(&self) -> &str {
        "custom"
    }
}

/// Compact parameter box `Θ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ThetaBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::Argument(
                "parameter box bounds must have equal, positive length".into(),
            ));
        }
        if lower
            .iter()
            .zip(&upper)
            .any(|(l, u)| !(l.is_finite() && u.is_finite() && l < u))
        {
            return Err(Error::Argument(
                "parameter box needs finite bounds with lower < upper".into(),
            ));
        }
        Ok(Self { lower, upper })
    }

    pub fn symmetric(p: usize, half_width: f64) -> Self {
        Self {
            lower: vec![-half_width; p],
            upper: vec![half_width; p],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    pub fn project(&self, theta: &mut [f64]) {
        for ((t, l), u) in theta.iter_mut().zip(&self.lower).zip(&self.upper) {
            *t = t.clamp(*l, *u);
        }
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta
            .iter()
            .zip(&self.lower)
            .zip(&self.upper)
            .all(|((t, l), u)| l <= t && t <= u)
    }
}

/// Moment functions together with the parameter box they are minimized over.
#[derive(Clone)]
pub struct MomentModel {
    moments: Arc<dyn Moments>,
    bounds: ThetaBox,
    numeric_jacobian: bool,
}

impl std::fmt::Debug for MomentModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MomentModel")
            .field("moments", &self.moments.name())
            .field("p", &self.n_params())
            .field("L", &self.n_moments())
            .field("bounds", &self.bounds)
            .finish()
    }
}

impl MomentModel {
    pub fn new(moments: impl Moments + 'static, bounds: ThetaBox) -> Result<Self> {
        Self::from_arc(Arc::new(moments), bounds)
    }

    pub fn from_arc(moments: Arc<dyn Moments>, bounds: ThetaBox) -> Result<Self> {
        let p = moments.n_params();
        let l = moments.n_moments();
        if p == 0 || l < p {
            return Err(Error::Model(format!("need 0 < p <= L, got p = {p}, L = {l}")));
        }
        if bounds.dim() != p {
            return Err(Error::Argument(format!(
                "parameter box of dimension {} for {} parameters",
                bounds.dim(),
                p
            )));
        }
        let numeric_jacobian = moments.is_smooth();
        Ok(Self {
            moments,
            bounds,
            numeric_jacobian,
        })
    }

    /// Enables or disables the finite-difference Jacobian fallback. It can only
    /// be enabled for smooth models.
    pub fn with_numeric_jacobian(mut self, enabled: bool) -> Self {
        self.numeric_jacobian = enabled && self.moments.is_smooth();
        self
    }

    pub fn n_params(&self) -> usize {
        self.moments.n_params()
    }

    pub fn n_moments(&self) -> usize {
        self.moments.n_moments()
    }

    pub fn bounds(&self) -> &ThetaBox {
        &self.bounds
    }

    pub fn moments(&self) -> &dyn Moments {
        self.moments.as_ref()
    }

    pub fn is_smooth(&self) -> bool {
        self.moments.is_smooth()
    }

    pub fn has_analytic_jacobian(&self) -> bool {
        self.moments.has_jacobian()
    }

    pub fn numeric_jacobian_enabled(&self) -> bool {
        self.numeric_jacobian
    }
}

/// Symmetric positive definite GMM weight matrix `Ξ̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    xi: DMatrix<f64>,
}

impl WeightMatrix {
    pub fn new(xi: DMatrix<f64>) -> Result<Self> {
        if xi.nrows() != xi.ncols() || xi.nrows() == 0 {
            return Err(Error::Argument("weight matrix must be square".into()));
        }
        let scale = xi.amax().max(f64::MIN_POSITIVE);
        if (&xi - xi.transpose()).amax() > 1e-12 * scale {
            return Err(Error::Argument("weight matrix is not symmetric".into()));
        }
        if !(min_eigenvalue(&xi) > 0.0) {
            return Err(Error::Argument("weight matrix is not positive definite".into()));
        }
        Ok(Self { xi })
    }

    pub fn identity(l: usize) -> Self {
        Self {
            xi: DMatrix::identity(l, l),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.xi
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(&self.xi * c)
    }
}

/// Per-cell moment sums `D_j(θ) = Σ_ℓ m(Y_{ℓ,j}, θ)`.
pub fn cell_moment_sums(sample: &ClusteredSample, model: &MomentModel, theta: &[f64]) -> Result<CellSums> {
    let mom = model.moments();
    mom.check_input(sample.obs_dim())?;
    let l = mom.n_moments();
    let mut out = CellSums::zeros(sample.dims().clone(), l);
    let mut buf = vec![0.0; l];
    for lin in 0..sample.dims().pi_c() {
        let acc = out.get_mut(lin);
        for y in sample.cell(lin) {
            mom.eval(y, theta, &mut buf)?;
            for (a, v) in acc.iter_mut().zip(&buf) {
                *a += v;
            }
        }
    }
    Ok(out)
}

const CHUNK: usize = 256;

/// Weighted per-unit sums of `f` over cells, reduced in a fixed chunk order.
fn reduce_cells<F>(sample: &ClusteredSample, weights: Option<&[u64]>, width: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &mut [f64]) -> Result<()> + Sync,
{
    let pi_c = sample.dims().pi_c();
    let partials: Result<Vec<Vec<f64>>> = (0..pi_c.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; width];
            let mut buf = vec![0.0; width];
            for lin in c * CHUNK..((c + 1) * CHUNK).min(pi_c) {
                let w = weights.map_or(1.0, |w| w[lin] as f64);
                if w == 0.0 {
                    continue;
                }
                for y in sample.cell(lin) {
                    f(y, &mut buf)?;
                    for (a, v) in acc.iter_mut().zip(&buf) {
                        *a += w * v;
                    }
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = vec![0.0; width];
    for part in partials? {
        for (t, v) in total.iter_mut().zip(&part) {
            *t += v;
        }
    }
    let pi_c = pi_c as f64;
    Ok(total.iter().map(|t| t / pi_c).collect())
}

/// `m̄(θ)`, optionally with bootstrap cell weights.
fn moment_mean(
    sample: &ClusteredSample,
    model: &MomentModel,
    theta: &[f64],
    weights: Option<&[u64]>,
) -> Result<Vec<f64>> {
    let mom = model.moments();
    reduce_cells(sample, weights, mom.n_moments(), |y, out| mom.eval(y, theta, out))
}

fn objective_from_mean(xi: &WeightMatrix, mbar: &[f64]) -> f64 {
    crate::linalg::quad_form(xi.matrix(), mbar).max(0.0).sqrt()
}

/// `M_C(θ) = |Ξ̂^{1/2} m̄(θ)|`.
pub fn gmm_objective(sample: &ClusteredSample, model: &MomentModel, xi: &WeightMatrix, theta: &[f64]) -> Result<f64> {
    check_shapes(sample, model, xi, theta)?;
    Ok(objective_from_mean(xi, &moment_mean(sample, model, theta, None)?))
}

fn check_shapes(sample: &ClusteredSample, model: &MomentModel, xi: &WeightMatrix, theta: &[f64]) -> Result<()> {
    model.moments().check_input(sample.obs_dim())?;
    if theta.len() != model.n_params() {
        return Err(Error::Shape(format!(
            "θ has length {}, model has {} parameters",
            theta.len(),
            model.n_params()
        )));
    }
    if xi.matrix().nrows() != model.n_moments() {
        return Err(Error::Shape(format!(
            "weight matrix is {0}x{0}, model has {1} moments",
            xi.matrix().nrows(),
            model.n_moments()
        )));
    }
    Ok(())
}

fn analytic_jacobian_mean(
    sample: &ClusteredSample,
    model: &MomentModel,
    theta: &[f64],
    weights: Option<&[u64]>,
) -> Result<DMatrix<f64>> {
    let mom = model.moments();
    let (l, p) = (mom.n_moments(), mom.n_params());
    let acc = reduce_cells(sample, weights, l * p, |y, out| mom.jacobian(y, theta, out))?;
    Ok(DMatrix::from_row_slice(l, p, &acc))
}

fn numeric_jacobian_mean(
    sample: &ClusteredSample,
    model: &MomentModel,
    theta: &[f64],
    weights: Option<&[u64]>,
) -> Result<DMatrix<f64>> {
    let (l, p) = (model.n_moments(), model.n_params());
    let mut jac = DMatrix::zeros(l, p);
    let mut t = theta.to_vec();
    for r in 0..p {
        let h = (1e-6 * theta[r].abs()).max(1e-6);
        t[r] = theta[r] + h;
        let up = moment_mean(sample, model, &t, weights)?;
        t[r] = theta[r] - h;
        let down = moment_mean(sample, model, &t, weights)?;
        t[r] = theta[r];
        for s in 0..l {
            jac[(s, r)] = (up[s] - down[s]) / (2.0 * h);
        }
    }
    Ok(jac)
}

fn jacobian_mean(
    sample: &ClusteredSample,
    model: &MomentModel,
    theta: &[f64],
    weights: Option<&[u64]>,
) -> Result<DMatrix<f64>> {
    if model.has_analytic_jacobian() {
        return analytic_jacobian_mean(sample, model, theta, weights);
    }
    if model.numeric_jacobian_enabled() {
        return numeric_jacobian_mean(sample, model, theta, weights);
    }
    Err(Error::Model(format!(
        "model `{}` has no Jacobian and the numeric fallback is disabled",
        model.moments().name()
    )))
}

/// `Ĵ = Σ_j Σ_ℓ d(Y_{ℓ,j}, θ) / Π_C`, analytic when available, otherwise
/// central differences of `m̄` with step `max(1e-6, 1e-6 |θ_r|)`.
pub fn gmm_jhat(sample: &ClusteredSample, model: &MomentModel, theta: &[f64]) -> Result<DMatrix<f64>> {
    model.moments().check_input(sample.obs_dim())?;
    jacobian_mean(sample, model, theta, None)
}

/// Finite-difference `Ĵ` regardless of analytic availability (smooth models only).
pub fn gmm_jhat_numeric(sample: &ClusteredSample, model: &MomentModel, theta: &[f64]) -> Result<DMatrix<f64>> {
    if !model.is_smooth() {
        return Err(Error::Model("finite differences need a smooth model".into()));
    }
    numeric_jacobian_mean(sample, model, theta, None)
}

/// `Ĥ`: the `V̂₁` construction applied to the per-cell moment sums at `θ`.
pub fn gmm_hhat(sample: &ClusteredSample, model: &MomentModel, theta: &[f64]) -> Result<DMatrix<f64>> {
    gmm_hhat_with(sample, model, theta, VarianceKind::V1, Adjustment::Unit)
}

pub fn gmm_hhat_with(
    sample: &ClusteredSample,
    model: &MomentModel,
    theta: &[f64],
    kind: VarianceKind,
    adjustment: Adjustment,
) -> Result<DMatrix<f64>> {
    let sums = cell_moment_sums(sample, model, theta)?;
    Ok(variance(&CenteredScores::new(sums), kind, adjustment)?.matrix)
}

/// `V̂ = (Ĵ'Ξ̂Ĵ)⁻¹ Ĵ'Ξ̂ Ĥ Ξ̂Ĵ (Ĵ'Ξ̂Ĵ)⁻¹`.
pub fn gmm_variance(jhat: &DMatrix<f64>, hhat: &DMatrix<f64>, xi: &WeightMatrix) -> Result<DMatrix<f64>> {
    let l = jhat.nrows();
    if hhat.nrows() != l || hhat.ncols() != l || xi.matrix().nrows() != l {
        return Err(Error::Shape("Ĵ, Ĥ and Ξ̂ dimensions disagree".into()));
    }
    let jx = jhat.transpose() * xi.matrix();
    let bread = &jx * jhat;
    let bread_inv = checked_inverse(&bread).ok_or_else(|| Error::SingularDesign("Ĵ'Ξ̂Ĵ is singular".into()))?;
    let meat = &jx * hhat * jx.transpose();
    let mut v = &bread_inv * meat * bread_inv.transpose();
    symmetrize(&mut v);
    Ok(v)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightChoice {
    #[default]
    Identity,
    /// `Ξ̂ = (Ĥ(θ̂₁) + εI)⁻¹` with `ε = 1e-10 tr(Ĥ)/L` from a first identity-weighted fit.
    TwoStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Number of starting points: the box center plus `starts - 1` uniform draws.
    pub starts: usize,
    pub step_tol: f64,
    pub objective_tol: f64,
    /// Objective evaluations allowed per start.
    pub max_evals: usize,
    /// Points per refinement round of the scalar grid search.
    pub grid_points: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            starts: 5,
            step_tol: 1e-9,
            objective_tol: 1e-9,
            max_evals: 10_000,
            grid_points: 201,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StartTrace {
    pub start: Vec<f64>,
    pub theta: Vec<f64>,
    pub objective: f64,
    pub evaluations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizerTrace {
    pub method: &'static str,
    pub starts: Vec<StartTrace>,
    pub evaluations: usize,
}

#[derive(Debug, Clone)]
pub struct GmmResult {
    pub theta: Vec<f64>,
    pub objective_value: f64,
    /// `None` for models without a Jacobian (inference by bootstrap only).
    pub jhat: Option<DMatrix<f64>>,
    pub hhat: DMatrix<f64>,
    pub vhat: Option<DMatrix<f64>>,
    pub weight: WeightMatrix,
    pub optimizer_trace: OptimizerTrace,
}

impl Serialize for GmmResult {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr<'a> {
            theta: &'a [f64],
            objective_value: f64,
            jhat: Option<Vec<Vec<f64>>>,
            hhat: Vec<Vec<f64>>,
            vhat: Option<Vec<Vec<f64>>>,
            weight: Vec<Vec<f64>>,
            optimizer: &'a OptimizerTrace,
        }
        Repr {
            theta: &self.theta,
            objective_value: self.objective_value,
            jhat: self.jhat.as_ref().map(to_rows),
            hhat: to_rows(&self.hhat),
            vhat: self.vhat.as_ref().map(to_rows),
            weight: to_rows(self.weight.matrix()),
            optimizer: &self.optimizer_trace,
        }
        .serialize(s)
    }
}

/// Objective over a sample with optional bootstrap cell weights.
struct Problem<'a> {
    sample: &'a ClusteredSample,
    model: &'a MomentModel,
    xi: &'a WeightMatrix,
    weights: Option<&'a [u64]>,
}

impl Problem<'_> {
    fn mbar(&self, theta: &[f64]) -> Result<Vec<f64>> {
        moment_mean(self.sample, self.model, theta, self.weights)
    }

    fn value(&self, theta: &[f64]) -> Result<f64> {
        Ok(objective_from_mean(self.xi, &self.mbar(theta)?))
    }
}

struct Outcome {
    theta: Vec<f64>,
    value: f64,
    evaluations: usize,
    converged: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn gauss_newton(prob: &Problem, start: &[f64], cfg: &OptimizerConfig) -> Result<Outcome> {
    let bounds = prob.model.bounds();
    let mut theta = start.to_vec();
    bounds.project(&mut theta);
    let mut mbar = prob.mbar(&theta)?;
    let mut value = objective_from_mean(prob.xi, &mbar);
    let mut evals = 1;
    let xi = prob.xi.matrix();
    while evals < cfg.max_evals {
        if value == 0.0 {
            return Ok(Outcome {
                theta,
                value,
                evaluations: evals,
                converged: true,
            });
        }
        let jac = jacobian_mean(prob.sample, prob.model, &theta, prob.weights)?;
        evals += 1;
        let jx = jac.transpose() * xi;
        let mut normal = &jx * &jac;
        let grad = &jx * DVector::from_column_slice(&mbar);
        let step = match checked_inverse(&normal) {
            Some(inv) => -(inv * &grad),
            None => {
                // Levenberg damping when the Gauss-Newton system is singular
                let damp = 1e-8 * normal.trace().abs().max(1e-12);
                for r in 0..normal.nrows() {
                    normal[(r, r)] += damp;
                }
                match normal.clone().cholesky() {
                    Some(ch) => -ch.solve(&grad),
                    None => break,
                }
            }
        };
        let mut t = 1.0;
        let mut accepted = None;
        while evals < cfg.max_evals && t > 1e-12 {
            let mut cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            bounds.project(&mut cand);
            let cand_mbar = prob.mbar(&cand)?;
            evals += 1;
            let cand_value = objective_from_mean(prob.xi, &cand_mbar);
            if cand_value < value || cand_value == 0.0 {
                accepted = Some((cand, cand_mbar, cand_value));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, cand_mbar, cand_value)) = accepted else {
            // no descent along the step: stationary up to numerical precision
            return Ok(Outcome {
                theta,
                value,
                evaluations: evals,
                converged: true,
            });
        };
        let moved: Vec<f64> = cand.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let small_step = norm(&moved) <= cfg.step_tol * (1.0 + norm(&theta));
        let small_gain = value - cand_value <= cfg.objective_tol * value.max(f64::MIN_POSITIVE)
            || cand_value <= cfg.objective_tol * 1e-6;
        theta = cand;
        mbar = cand_mbar;
        value = cand_value;
        if small_step || small_gain {
            return Ok(Outcome {
                theta,
                value,
                evaluations: evals,
                converged: true,
            });
        }
    }
    Ok(Outcome {
        theta,
        value,
        evaluations: evals,
        converged: false,
    })
}

fn nelder_mead(prob: &Problem, start: &[f64], cfg: &OptimizerConfig) -> Result<Outcome> {
    let bounds = prob.model.bounds();
    let p = start.len();
    let eval = |x: &[f64]| -> Result<(Vec<f64>, f64)> {
        let mut y = x.to_vec();
        bounds.project(&mut y);
        let v = prob.value(&y)?;
        Ok((y, v))
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(p + 1);
    simplex.push(eval(start)?);
    for r in 0..p {
        let mut x = start.to_vec();
        let width = bounds.upper[r] - bounds.lower[r];
        let step = 0.05 * width;
        x[r] = if x[r] + step <= bounds.upper[r] {
            x[r] + step
        } else {
            x[r] - step
        };
        simplex.push(eval(&x)?);
    }
    let mut evals = p + 1;
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = &simplex[0];
        let spread = simplex[p].1 - best.1;
        let diameter = simplex[1..]
            .iter()
            .map(|(x, _)| norm(&x.iter().zip(&best.0).map(|(a, b)| a - b).collect::<Vec<_>>()))
            .fold(0.0, f64::max);
        let scale = 1.0 + norm(&best.0);
        if diameter <= cfg.step_tol * scale
            || (spread <= cfg.objective_tol * (1.0 + best.1) && diameter <= 1e-6 * scale)
        {
            let (theta, value) = simplex.swap_remove(0);
            return Ok(Outcome {
                theta,
                value,
                evaluations: evals,
                converged: true,
            });
        }
        if evals >= cfg.max_evals {
            let (theta, value) = simplex.swap_remove(0);
            return Ok(Outcome {
                theta,
                value,
                evaluations: evals,
                converged: false,
            });
        }
        let centroid: Vec<f64> = (0..p)
            .map(|r| simplex[..p].iter().map(|(x, _)| x[r]).sum::<f64>() / p as f64)
            .collect();
        let worst = simplex[p].clone();
        let along = |c: f64| -> Vec<f64> { centroid.iter().zip(&worst.0).map(|(m, w)| m + c * (m - w)).collect() };
        let refl = eval(&along(1.0))?;
        evals += 1;
        if refl.1 < simplex[0].1 {
            let exp = eval(&along(2.0))?;
            evals += 1;
            simplex[p] = if exp.1 < refl.1 { exp } else { refl };
        } else if refl.1 < simplex[p - 1].1 {
            simplex[p] = refl;
        } else {
            let contr = if refl.1 < worst.1 {
                eval(&along(0.5))?
            } else {
                eval(&along(-0.5))?
            };
            evals += 1;
            if contr.1 < worst.1.min(refl.1) {
                simplex[p] = contr;
            } else {
                let best = simplex[0].0.clone();
                for v in simplex[1..].iter_mut() {
                    let x: Vec<f64> = v.0.iter().zip(&best).map(|(a, b)| b + 0.5 * (a - b)).collect();
                    *v = eval(&x)?;
                    evals += 1;
                }
            }
        }
    }
}

/// Scalar minimization over the whole box: a uniform grid, then repeated
/// zooming on the neighbours of the best point.
fn grid_refine(prob: &Problem, cfg: &OptimizerConfig) -> Result<Outcome> {
    let bounds = prob.model.bounds();
    let n = cfg.grid_points.max(3);
    let (mut lo, mut hi) = (bounds.lower[0], bounds.upper[0]);
    let mut best = (f64::NAN, f64::INFINITY);
    let mut evals = 0;
    while evals + n <= cfg.max_evals {
        let h = (hi - lo) / (n - 1) as f64;
        let point = |g: usize| if g == n - 1 { hi } else { lo + h * g as f64 };
        let mut pos = 0;
        let mut round_min = f64::INFINITY;
        for g in 0..n {
            let v = prob.value(&[point(g)])?;
            evals += 1;
            if v < round_min {
                round_min = v;
                pos = g;
            }
        }
        // leftmost minimizer, so plateaus resolve to their left end
        if round_min <= best.1 {
            best = (point(pos), round_min);
        } else {
            pos = (((best.0 - lo) / h).round().max(0.0) as usize).min(n - 1);
        }
        let (new_lo, new_hi) = (point(pos.saturating_sub(1)), point((pos + 1).min(n - 1)));
        lo = new_lo.min(best.0);
        hi = new_hi.max(best.0);
        if hi - lo <= cfg.step_tol * (1.0 + best.0.abs()) {
            return Ok(Outcome {
                theta: vec![best.0],
                value: best.1,
                evaluations: evals,
                converged: true,
            });
        }
    }
    Ok(Outcome {
        theta: vec![best.0],
        value: best.1,
        evaluations: evals,
        converged: false,
    })
}

fn starting_points(bounds: &ThetaBox, cfg: &OptimizerConfig) -> Vec<Vec<f64>> {
    let mut starts = vec![bounds.center()];
    let mut r = rng::stream(cfg.seed, &[rng::TAG_START]);
    for _ in 1..cfg.starts.max(1) {
        starts.push(
            bounds
                .lower
                .iter()
                .zip(&bounds.upper)
                .map(|(l, u)| r.random_range(*l..*u))
                .collect(),
        );
    }
    starts
}

fn minimize(prob: &Problem, cfg: &OptimizerConfig, starts: &[Vec<f64>]) -> Result<(Outcome, OptimizerTrace)> {
    let smooth =
        prob.model.is_smooth() && (prob.model.numeric_jacobian_enabled() || prob.model.has_analytic_jacobian());
    let p = prob.model.n_params();
    let (method, outcomes): (&'static str, Vec<(Vec<f64>, Outcome)>) = if smooth {
        let outs: Result<Vec<_>> = starts
            .par_iter()
            .map(|s| gauss_newton(prob, s, cfg).map(|o| (s.clone(), o)))
            .collect();
        ("gauss-newton", outs?)
    } else if p == 1 {
        (
            "grid-refine",
            vec![(prob.model.bounds().center(), grid_refine(prob, cfg)?)],
        )
    } else {
        let outs: Result<Vec<_>> = starts
            .par_iter()
            .map(|s| nelder_mead(prob, s, cfg).map(|o| (s.clone(), o)))
            .collect();
        ("nelder-mead", outs?)
    };
    let trace = OptimizerTrace {
        method,
        starts: outcomes
            .iter()
            .map(|(s, o)| StartTrace {
                start: s.clone(),
                theta: o.theta.clone(),
                objective: o.value,
                evaluations: o.evaluations,
                converged: o.converged,
            })
            .collect(),
        evaluations: outcomes.iter().map(|(_, o)| o.evaluations).sum(),
    };
    // best converged start; ties resolved by start order
    let best = outcomes
        .into_iter()
        .map(|(_, o)| o)
        .fold(None::<Outcome>, |acc, o| match acc {
            None => Some(o),
            Some(a) => {
                let better = match (o.converged, a.converged) {
                    (true, false) => true,
                    (false, true) => false,
                    _ => o.value < a.value,
                };
                Some(if better { o } else { a })
            }
        })
        .expect("at least one start");
    if !best.converged {
        return Err(Error::Convergence {
            best_theta: best.theta,
            best_value: best.value,
            evaluations: trace.evaluations,
        });
    }
    Ok((best, trace))
}

/// Minimizes `M_C` over the model's box and evaluates `Ĵ`, `Ĥ`, `V̂` at the minimizer.
pub fn gmm_fit(
    sample: &ClusteredSample,
    model: &MomentModel,
    xi: &WeightMatrix,
    config: &OptimizerConfig,
) -> Result<GmmResult> {
    let center = model.bounds().center();
    check_shapes(sample, model, xi, &center)?;
    let prob = Problem {
        sample,
        model,
        xi,
        weights: None,
    };
    let starts = starting_points(model.bounds(), config);
    let (best, trace) = minimize(&prob, config, &starts)?;
    let hhat = gmm_hhat(sample, model, &best.theta)?;
    let jhat = match gmm_jhat(sample, model, &best.theta) {
        Ok(j) => Some(j),
        Err(Error::Model(_)) => None,
        Err(e) => return Err(e),
    };
    let vhat = match &jhat {
        Some(j) => Some(gmm_variance(j, &hhat, xi)?),
        None => None,
    };
    Ok(GmmResult {
        theta: best.theta,
        objective_value: best.value,
        jhat,
        hhat,
        vhat,
        weight: xi.clone(),
        optimizer_trace: trace,
    })
}

/// Identity-weighted first step, then `Ξ̂ = (Ĥ(θ̂₁) + εI)⁻¹`.
pub fn two_step_weight(
    sample: &ClusteredSample,
    model: &MomentModel,
    config: &OptimizerConfig,
) -> Result<WeightMatrix> {
    let l = model.n_moments();
    let first = gmm_fit(sample, model, &WeightMatrix::identity(l), config)?;
    let mut h = first.hhat;
    let eps = 1e-10 * h.trace() / l as f64;
    for r in 0..l {
        h[(r, r)] += eps;
    }
    let mut inv = spd_inverse(&h)?;
    symmetrize(&mut inv);
    WeightMatrix::new(inv)
}

pub fn gmm_fit_with(
    sample: &ClusteredSample,
    model: &MomentModel,
    weight: WeightChoice,
    config: &OptimizerConfig,
) -> Result<GmmResult> {
    let xi = match weight {
        WeightChoice::Identity => WeightMatrix::identity(model.n_moments()),
        WeightChoice::TwoStep => two_step_weight(sample, model, config)?,
    };
    gmm_fit(sample, model, &xi, config)
}

/// GMM re-estimation under pigeonhole weights, for the bootstrap.
pub struct GmmEstimator<'a> {
    pub sample: &'a ClusteredSample,
    pub model: &'a MomentModel,
    pub xi: WeightMatrix,
    pub config: OptimizerConfig,
    /// Full-sample estimate; smooth models restart from it.
    pub theta_hat: Vec<f64>,
}

impl GmmEstimator<'_> {
    pub fn reestimate(&self, w: &PigeonholeWeights) -> Result<Vec<f64>> {
        if self.sample.dims() != w.dims() {
            return Err(Error::Shape("bootstrap weights do not match the sample design".into()));
        }
        let cw = w.cell_weights();
        let prob = Problem {
            sample: self.sample,
            model: self.model,
            xi: &self.xi,
            weights: Some(&cw),
        };
        let starts = if self.model.is_smooth() {
            vec![self.theta_hat.clone()]
        } else {
            starting_points(self.model.bounds(), &self.config)
        };
        Ok(minimize(&prob, &self.config, &starts)?.0.theta)
    }
}

/// A moment regressor or instrument: an observation column or the constant 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Column {
    Obs(usize),
    One,
}

impl Column {
    fn value(self, y: &[f64]) -> f64 {
        match self {
            Column::Obs(c) => y[c],
            Column::One => 1.0,
        }
    }

    fn check(self, obs_dim: usize) -> Result<()> {
        match self {
            Column::Obs(c) if c >= obs_dim => Err(Error::Index(format!(
                "column {c} out of range for observations of width {obs_dim}"
            ))),
            _ => Ok(()),
        }
    }
}

impl Serialize for Column {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Column::Obs(c) => s.serialize_u64(*c as u64),
            Column::One => s.serialize_str("const"),
        }
    }
}

impl<'de> Deserialize<'de> for Column {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Index(usize),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Index(c) => Ok(Column::Obs(c)),
            Raw::Name(n) if n == "const" || n == "one" || n == "1" => Ok(Column::One),
            Raw::Name(n) => Err(serde::de::Error::custom(format!(
                "column must be an index or \"const\", got `{n}`"
            ))),
        }
    }
}

/// `m(y, θ) = y_c - θ`.
#[derive(Debug, Clone)]
pub struct MeanMoment {
    pub coordinate: usize,
}

impl Moments for MeanMoment {
    fn n_params(&self) -> usize {
        1
    }

    fn n_moments(&self) -> usize {
        1
    }

    fn check_input(&self, obs_dim: usize) -> Result<()> {
        Column::Obs(self.coordinate).check(obs_dim)
    }

    fn eval(&self, y: &[f64], theta: &[f64], out: &mut [f64]) -> Result<()> {
        out[0] = y[self.coordinate] - theta[0];
        Ok(())
    }

    fn has_jacobian(&self) -> bool {
        true
    }

    fn jacobian(&self, _: &[f64], _: &[f64], out: &mut [f64]) -> Result<()> {
        out[0] = -1.0;
        Ok(())
    }

    fn name(&self) -> &str {
        "mean"
    }
}

/// `m(y, θ) = Z (ỹ - X'θ)`.
#[derive(Debug, Clone)]
pub struct LinearIv {
    pub outcome: usize,
    pub x: Vec<Column>,
    pub z: Vec<Column>,
}

impl LinearIv {
    fn residual(&self, y: &[f64], theta: &[f64]) -> f64 {
        y[self.outcome] - self.x.iter().zip(theta).map(|(c, t)| c.value(y) * t).sum::<f64>()
    }
}

impl Moments for LinearIv {
    fn n_params(&self) -> usize {
        self.x.len()
    }

    fn n_moments(&self) -> usize {
        self.z.len()
    }

    fn check_input(&self, obs_dim: usize) -> Result<()> {
        Column::Obs(self.outcome).check(obs_dim)?;
        self.x.iter().chain(&self.z).try_for_each(|c| c.check(obs_dim))
    }

    fn eval(&self, y: &[f64], theta: &[f64], out: &mut [f64]) -> Result<()> {
        let u = self.residual(y, theta);
        for (o, z) in out.iter_mut().zip(&self.z) {
            *o = z.value(y) * u;
        }
        Ok(())
    }

    fn has_jacobian(&self) -> bool {
        true
    }

    fn jacobian(&self, y: &[f64], _: &[f64], out: &mut [f64]) -> Result<()> {
        let p = self.x.len();
        for (s, z) in self.z.iter().enumerate() {
            for (r, x) in self.x.iter().enumerate() {
                out[s * p + r] = -z.value(y) * x.value(y);
            }
        }
        Ok(())
    }

    fn name(&self) -> &str {
        "linear_iv"
    }
}

/// `m(y, θ) = Z (τ - 1{W - X'θ ≤ 0})`; nonsmooth, no Jacobian.
#[derive(Debug, Clone)]
pub struct QuantileIv {
    pub tau: f64,
    pub outcome: usize,
    pub x: Vec<Column>,
    pub z: Vec<Column>,
}

impl Moments for QuantileIv {
    fn n_params(&self) -> usize {
        self.x.len()
    }

    fn n_moments(&self) -> usize {
        self.z.len()
    }

    fn check_input(&self, obs_dim: usize) -> Result<()> {
        Column::Obs(self.outcome).check(obs_dim)?;
        self.x.iter().chain(&self.z).try_for_each(|c| c.check(obs_dim))
    }

    fn eval(&self, y: &[f64], theta: &[f64], out: &mut [f64]) -> Result<()> {
        let fitted: f64 = self.x.iter().zip(theta).map(|(c, t)| c.value(y) * t).sum();
        let ind = if y[self.outcome] - fitted <= 0.0 { 1.0 } else { 0.0 };
        for (o, z) in out.iter_mut().zip(&self.z) {
            *o = z.value(y) * (self.tau - ind);
        }
        Ok(())
    }

    fn is_smooth(&self) -> bool {
        false
    }

    fn name(&self) -> &str {
        "quantile_iv"
    }
}

pub fn quantile_iv_moments(tau: f64, outcome: usize, x: Vec<Column>, z: Vec<Column>) -> Result<QuantileIv> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Argument(format!("tau = {tau} not in (0, 1)")));
    }
    if x.is_empty() || z.len() < x.len() {
        return Err(Error::Argument("quantile IV needs 0 < dim(X) <= dim(Z)".into()));
    }
    Ok(QuantileIv { tau, outcome, x, z })
}

/// `φ(z) / Φ(z)`, accurate far into the lower tail.
pub fn inverse_mills(z: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    if z > -5.0 {
        let phi = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let cdf = 0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2);
        phi / cdf
    } else {
        SQRT_2_OVER_PI / erfcx(-z / std::f64::consts::SQRT_2)
    }
}

/// Scaled complementary error function `exp(x²) erfc(x)` for `x ≥ 3.5`,
/// by backward evaluation of its continued fraction.
fn erfcx(x: f64) -> f64 {
    debug_assert!(x >= 3.5);
    let mut frac = 0.0;
    for n in (1..=80).rev() {
        frac = (n as f64 * 0.5) / (x + frac);
    }
    1.0 / (std::f64::consts::PI.sqrt() * (x + frac))
}

/// Probit score moments `s(β) = λ(β) (1, X)'`, with the analytic Hessian as Jacobian.
#[derive(Debug, Clone)]
pub struct ProbitScore {
    pub outcome: usize,
    pub x: usize,
}

impl ProbitScore {
    /// `λ = (2Y-1) φ((2Y-1)(β₀+β₁X)) / Φ((2Y-1)(β₀+β₁X))`.
    pub fn lambda(&self, y: &[f64], beta: &[f64]) -> Result<f64> {
        let yv = y[self.outcome];
        if yv != 0.0 && yv != 1.0 {
            return Err(Error::Model(format!("probit outcome must be 0 or 1, got {yv}")));
        }
        let q = 2.0 * yv - 1.0;
        let index = beta[0] + beta[1] * y[self.x];
        Ok(q * inverse_mills(q * index))
    }
}

impl Moments for ProbitScore {
    fn n_params(&self) -> usize {
        2
    }

    fn n_moments(&self) -> usize {
        2
    }

    fn check_input(&self, obs_dim: usize) -> Result<()> {
        Column::Obs(self.outcome).check(obs_dim)?;
        Column::Obs(self.x).check(obs_dim)
    }

    fn eval(&self, y: &[f64], beta: &[f64], out: &mut [f64]) -> Result<()> {
        let l = self.lambda(y, beta)?;
        out[0] = l;
        out[1] = l * y[self.x];
        Ok(())
    }

    fn has_jacobian(&self) -> bool {
        true
    }

    /// `d = -λ (β₀ + β₁X + λ) [1 X; X X²]`.
    fn jacobian(&self, y: &[f64], beta: &[f64], out: &mut [f64]) -> Result<()> {
        let l = self.lambda(y, beta)?;
        let x = y[self.x];
        let c = -l * (beta[0] + beta[1] * x + l);
        out.copy_from_slice(&[c, c * x, c * x, c * x * x]);
        Ok(())
    }

    fn name(&self) -> &str {
        "probit"
    }
}

pub fn probit_score_moments(outcome: usize, x: usize) -> ProbitScore {
    ProbitScore { outcome, x }
}

type MomentFn = dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync;

/// Moments given by closures.
pub struct FnMoments {
    p: usize,
    l: usize,
    m: Box<MomentFn>,
    d: Option<Box<MomentFn>>,
    smooth: bool,
}

impl FnMoments {
    pub fn new(p: usize, l: usize, m: impl Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        Self {
            p,
            l,
            m: Box::new(m),
            d: None,
            smooth: true,
        }
    }

    /// Analytic Jacobian returning `L·p` values, row-major.
    pub fn with_jacobian(mut self, d: impl Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.d = Some(Box::new(d));
        self
    }

    pub fn nonsmooth(mut self) -> Self {
        self.smooth = false;
        self
    }
}

impl Moments for FnMoments {
    fn n_params(&self) -> usize {
        self.p
    }

    fn n_moments(&self) -> usize {
        self.l
    }

    fn eval(&self, y: &[f64], theta: &[f64], out: &mut [f64]) -> Result<()> {
        let v = (self.m)(y, theta);
        if v.len() != self.l {
            return Err(Error::Model(format!(
                "moment returned {} values, expected {}",
                v.len(),
                self.l
            )));
        }
        out.copy_from_slice(&v);
        Ok(())
    }

    fn has_jacobian(&self) -> bool {
        self.d.is_some()
    }

    fn jacobian(&self, y: &[f64], theta: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self
            .d
            .as_ref()
            .ok_or_else(|| Error::Model("no analytic Jacobian supplied".into()))?;
        let v = d(y, theta);
        if v.len() != self.l * self.p {
            return Err(Error::Model("jacobian has the wrong length".into()));
        }
        out.copy_from_slice(&v);
        Ok(())
    }

    fn is_smooth(&self) -> bool {
        self.smooth
    }
}

/// Serializable description of a built-in moment family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum MomentSpec {
    Mean {
        coordinate: usize,
    },
    LinearIv {
        outcome: usize,
        x: Vec<Column>,
        z: Vec<Column>,
    },
    QuantileIv {
        tau: f64,
        outcome: usize,
        x: Vec<Column>,
        z: Vec<Column>,
    },
    Probit {
        outcome: usize,
        x: usize,
    },
}

impl MomentSpec {
    pub fn build(&self, bounds: ThetaBox) -> Result<MomentModel> {
        match self {
            MomentSpec::Mean { coordinate } => MomentModel::new(
                MeanMoment {
                    coordinate: *coordinate,
                },
                bounds,
            ),
            MomentSpec::LinearIv { outcome, x, z } => MomentModel::new(
                LinearIv {
                    outcome: *outcome,
                    x: x.clone(),
                    z: z.clone(),
                },
                bounds,
            ),
            MomentSpec::QuantileIv { tau, outcome, x, z } => {
                MomentModel::new(quantile_iv_moments(*tau, *outcome, x.clone(), z.clone())?, bounds)
            }
            MomentSpec::Probit { outcome, x } => MomentModel::new(probit_score_moments(*outcome, *x), bounds),
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            MomentSpec::Mean { .. } => 1,
            MomentSpec::LinearIv { x, .. } | MomentSpec::QuantileIv { x, .. } => x.len(),
            MomentSpec::Probit { .. } => 2,
        }
    }
}
