//! Mean, ratio, OLS and ECDF/quantile estimators.
//!
//! Each estimator is prepared once from a sample (cell-level aggregates are
//! cached) and then exposes `fit` for the point estimate plus scores, and
//! `reestimate` for the pigeonhole bootstrap. Bootstrap weights multiply whole
//! cells, never units within a cell.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bootstrap::PigeonholeWeights;
use crate::data::{cell_sums, CellStatistic, CellSums, ClusteredSample, Count, Dimensions};
use crate::error::{Error, Result};
use crate::linalg::{checked_inverse, condition_number, to_rows};
use crate::variance::{variance, Adjustment, CenteredScores, VarianceEstimate, VarianceKind};

/// Point estimate, the per-cell scores feeding the variance estimators, and diagnostics.
#[derive(Debug, Clone)]
pub struct EstimateResult {
    pub theta: Vec<f64>,
    /// `None` for estimators that are only inferred by bootstrap (quantiles).
    pub scores: Option<CenteredScores>,
    pub meta: EstimateMeta,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct EstimateMeta {
    pub estimator: String,
    pub total_units: usize,
    /// `Ĵ = Σ XX' / Π_C` for OLS.
    #[serde(serialize_with = "serialize_opt_matrix")]
    pub jhat: Option<DMatrix<f64>>,
    pub condition_number: Option<f64>,
    pub residual_norm: Option<f64>,
}

fn serialize_opt_matrix<S: serde::Serializer>(m: &Option<DMatrix<f64>>, s: S) -> std::result::Result<S::Ok, S::Error> {
    m.as_ref().map(to_rows).serialize(s)
}

fn check_weights(dims: &Dimensions, w: &PigeonholeWeights) -> Result<Vec<u64>> {
    if dims != w.dims() {
        return Err(Error::Shape("bootstrap weights do not match the sample design".into()));
    }
    Ok(w.cell_weights())
}

/// `θ̂ = Σ_j S_j / Π_C`.
#[derive(Debug, Clone)]
pub struct MeanEstimator {
    sums: CellSums,
}

impl MeanEstimator {
    pub fn new(sample: &ClusteredSample, f: &dyn CellStatistic) -> Result<Self> {
        Ok(Self {
            sums: cell_sums(sample, f)?,
        })
    }

    pub fn from_sums(sums: CellSums) -> Self {
        Self { sums }
    }

    pub fn sums(&self) -> &CellSums {
        &self.sums
    }

    fn weighted_mean(&self, w: Option<&[u64]>) -> Vec<f64> {
        let m = self.sums.out_dim();
        let mut acc = vec![0.0; m];
        for (lin, s) in self.sums.iter().enumerate() {
            let f = w.map_or(1.0, |w| w[lin] as f64);
            for (a, v) in acc.iter_mut().zip(s) {
                *a += f * v;
            }
        }
        let pi_c = self.sums.dims().pi_c() as f64;
        acc.iter().map(|a| a / pi_c).collect()
    }

    pub fn fit(&self) -> EstimateResult {
        let theta = self.weighted_mean(None);
        let scores = CenteredScores::new(self.sums.map_cells(|_, s, out| {
            for ((o, v), t) in out.iter_mut().zip(s).zip(&theta) {
                *o = v - t;
            }
        }));
        EstimateResult {
            theta,
            scores: Some(scores),
            meta: EstimateMeta {
                estimator: "mean".into(),
                ..Default::default()
            },
        }
    }

    /// `θ̂* = Σ_j W_j S_j / Π_C`.
    pub fn reestimate(&self, w: &PigeonholeWeights) -> Result<Vec<f64>> {
        let cw = check_weights(self.sums.dims(), w)?;
        Ok(self.weighted_mean(Some(&cw)))
    }
}

pub fn mean_estimate(sample: &ClusteredSample, f: &dyn CellStatistic) -> Result<EstimateResult> {
    let mut r = MeanEstimator::new(sample, f)?.fit();
    r.meta.total_units = sample.total_units();
    Ok(r)
}

/// `θ̂ = Σ_j S_j / Σ_j N_j` with linearized scores `T̂_j`.
#[derive(Debug, Clone)]
pub struct RatioEstimator {
    sums: CellSums,
    sizes: Vec<f64>,
}

impl RatioEstimator {
    pub fn new(sample: &ClusteredSample, f: &dyn CellStatistic) -> Result<Self> {
        let sums = cell_sums(sample, f)?;
        let sizes = cell_sums(sample, &Count)?.into_values();
        Ok(Self { sums, sizes })
    }

    fn weighted_ratio(&self, w: Option<&[u64]>) -> Result<Vec<f64>> {
        let m = self.sums.out_dim();
        let mut num = vec![0.0; m];
        let mut den = 0.0;
        for (lin, s) in self.sums.iter().enumerate() {
            let f = w.map_or(1.0, |w| w[lin] as f64);
            for (a, v) in num.iter_mut().zip(s) {
                *a += f * v;
            }
            den += f * self.sizes[lin];
        }
        if den == 0.0 {
            return Err(Error::EmptySample);
        }
        Ok(num.iter().map(|a| a / den).collect())
    }

    pub fn fit(&self) -> Result<EstimateResult> {
        let theta = self.weighted_ratio(None)?;
        let pi_c = self.sums.dims().pi_c() as f64;
        let mean_n = self.sizes.iter().sum::<f64>() / pi_c;
        let scores = CenteredScores::new(self.sums.map_cells(|lin, s, out| {
            let n = self.sizes[lin];
            for ((o, v), t) in out.iter_mut().zip(s).zip(&theta) {
                *o = (v - n * t) / mean_n;
            }
        }));
        Ok(EstimateResult {
            theta,
            scores: Some(scores),
            meta: EstimateMeta {
                estimator: "ratio".into(),
                total_units: self.sizes.iter().sum::<f64>() as usize,
                ..Default::default()
            },
        })
    }

    /// `Σ_j W_j S_j / Σ_j W_j N_j`.
    pub fn reestimate(&self, w: &PigeonholeWeights) -> Result<Vec<f64>> {
        let cw = check_weights(self.sums.dims(), w)?;
        self.weighted_ratio(Some(&cw))
    }
}

pub fn ratio_estimate(sample: &ClusteredSample, f: &dyn CellStatistic) -> Result<EstimateResult> {
    RatioEstimator::new(sample, f)?.fit()
}

/// Which observation coordinates form the outcome and regressors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearModelSpec {
    pub outcome_index: usize,
    pub regressor_indices: Vec<usize>,
    /// Prepend a constant-1 regressor.
    #[serde(default)]
    pub intercept: bool,
}

impl LinearModelSpec {
    pub fn n_params(&self) -> usize {
        self.regressor_indices.len() + usize::from(self.intercept)
    }

    pub fn validate(&self, obs_dim: usize) -> Result<()> {
        if self.n_params() == 0 {
            return Err(Error::Argument("linear model has no regressors".into()));
        }
        let mut all = self.regressor_indices.clone();
        all.push(self.outcome_index);
        if let Some(&bad) = all.iter().find(|&&i| i >= obs_dim) {
            return Err(Error::Index(format!(
                "column {bad} out of range for observations of width {obs_dim}"
            )));
        }
        all.sort_unstable();
        all.dedup();
        if all.len() != self.regressor_indices.len() + 1 {
            return Err(Error::Argument("outcome and regressor columns must be distinct".into()));
        }
        Ok(())
    }

    /// Fills `x` with the regressor vector of observation `y`.
    pub fn regressors(&self, y: &[f64], x: &mut [f64]) {
        let mut r = 0;
        if self.intercept {
            x[0] = 1.0;
            r = 1;
        }
        for (slot, &c) in x[r..].iter_mut().zip(&self.regressor_indices) {
            *slot = y[c];
        }
    }
}

/// Cached per-cell `Σ XX'` and `Σ X ỹ`.
#[derive(Debug, Clone)]
pub struct OlsEstimator {
    dims: Dimensions,
    spec: LinearModelSpec,
    p: usize,
    cell_xx: Vec<f64>,
    cell_xy: Vec<f64>,
    total_units: usize,
}

impl OlsEstimator {
    pub fn new(sample: &ClusteredSample, spec: &LinearModelSpec) -> Result<Self> {
        spec.validate(sample.obs_dim())?;
        let p = spec.n_params();
        let pi_c = sample.dims().pi_c();
        let mut cell_xx = vec![0.0; pi_c * p * p];
        let mut cell_xy = vec![0.0; pi_c * p];
        let mut x = vec![0.0; p];
        for lin in 0..pi_c {
            let xx = &mut cell_xx[lin * p * p..(lin + 1) * p * p];
            let xy = &mut cell_xy[lin * p..(lin + 1) * p];
            for y in sample.cell(lin) {
                spec.regressors(y, &mut x);
                let yt = y[spec.outcome_index];
                for r in 0..p {
                    xy[r] += x[r] * yt;
                    for c in 0..p {
                        xx[r * p + c] += x[r] * x[c];
                    }
                }
            }
        }
        Ok(Self {
            dims: sample.dims().clone(),
            spec: spec.clone(),
            p,
            cell_xx,
            cell_xy,
            total_units: sample.total_units(),
        })
    }

    fn normal_equations(&self, w: Option<&[u64]>) -> (DMatrix<f64>, DVector<f64>) {
        let p = self.p;
        let mut xx = DMatrix::zeros(p, p);
        let mut xy = DVector::zeros(p);
        for lin in 0..self.dims.pi_c() {
            let f = w.map_or(1.0, |w| w[lin] as f64);
            if f == 0.0 {
                continue;
            }
            for r in 0..p {
                xy[r] += f * self.cell_xy[lin * p + r];
                for c in 0..p {
                    xx[(r, c)] += f * self.cell_xx[lin * p * p + r * p + c];
                }
            }
        }
        let pi_c = self.dims.pi_c() as f64;
        (xx / pi_c, xy / pi_c)
    }

    fn solve(&self, w: Option<&[u64]>) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let (jhat, xy) = self.normal_equations(w);
        let inv = checked_inverse(&jhat)
            .ok_or_else(|| Error::SingularDesign("Gram matrix of the regressors is singular".into()))?;
        Ok(((inv * xy).iter().cloned().collect(), jhat))
    }

    pub fn fit(&self) -> Result<EstimateResult> {
        let (theta, jhat) = self.solve(None)?;
        let p = self.p;
        let mut scores = CellSums::zeros(self.dims.clone(), p);
        for lin in 0..self.dims.pi_c() {
            let d = scores.get_mut(lin);
            for r in 0..p {
                let mut v = self.cell_xy[lin * p + r];
                for c in 0..p {
                    v -= self.cell_xx[lin * p * p + r * p + c] * theta[c];
                }
                d[r] = v;
            }
        }
        Ok(EstimateResult {
            theta,
            scores: Some(CenteredScores::new(scores)),
            meta: EstimateMeta {
                estimator: "ols".into(),
                total_units: self.total_units,
                condition_number: Some(condition_number(&jhat)),
                jhat: Some(jhat),
                residual_norm: None,
            },
        })
    }

    pub fn reestimate(&self, w: &PigeonholeWeights) -> Result<Vec<f64>> {
        let cw = check_weights(&self.dims, w)?;
        Ok(self.solve(Some(&cw))?.0)
    }

    pub fn spec(&self) -> &LinearModelSpec {
        &self.spec
    }
}

/// `θ̂ = (Σ XX')⁻¹ Σ Xỹ` with scores `D_j = Σ_ℓ X û` and `Ĵ` in the diagnostics.
pub fn ols_fit(sample: &ClusteredSample, spec: &LinearModelSpec) -> Result<EstimateResult> {
    let mut r = OlsEstimator::new(sample, spec)?.fit()?;
    let p = spec.n_params();
    let mut x = vec![0.0; p];
    let mut ss = 0.0;
    for (_, y) in sample.units() {
        spec.regressors(y, &mut x);
        let fitted: f64 = x.iter().zip(&r.theta).map(|(a, b)| a * b).sum();
        ss += (y[spec.outcome_index] - fitted).powi(2);
    }
    r.meta.residual_norm = Some(ss.sqrt());
    Ok(r)
}

/// `V̂ = Ĵ⁻¹ Ĥ Ĵ⁻¹` with `Ĥ` the chosen multiway estimator applied to the OLS scores.
pub fn ols_sandwich(result: &EstimateResult, kind: VarianceKind, adjustment: Adjustment) -> Result<VarianceEstimate> {
    let jhat = result
        .meta
        .jhat
        .as_ref()
        .ok_or_else(|| Error::Argument("result does not come from ols_fit".into()))?;
    let scores = result
        .scores
        .as_ref()
        .ok_or_else(|| Error::Argument("result has no scores".into()))?;
    let j_inv = checked_inverse(jhat).ok_or_else(|| Error::SingularDesign("Ĵ is singular".into()))?;
    let mut h = variance(scores, kind, adjustment)?;
    let mut v = &j_inv * &h.matrix * j_inv.transpose();
    crate::linalg::symmetrize(&mut v);
    h.matrix = v;
    Ok(h)
}

/// Coordinates entering the (componentwise) ECDF, and an optional evaluation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcdfSpec {
    pub coordinates: Vec<usize>,
    #[serde(default)]
    pub grid: Option<Vec<f64>>,
}

impl EcdfSpec {
    pub fn scalar(coordinate: usize) -> Self {
        Self {
            coordinates: vec![coordinate],
            grid: None,
        }
    }

    pub fn validate(&self, obs_dim: usize) -> Result<()> {
        if self.coordinates.is_empty() {
            return Err(Error::Argument("ECDF needs at least one coordinate".into()));
        }
        if let Some(&c) = self.coordinates.iter().find(|&&c| c >= obs_dim) {
            return Err(Error::Index(format!("coordinate {c} out of range for width {obs_dim}")));
        }
        if let Some(g) = &self.grid {
            if g.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::Argument("ECDF grid must be strictly increasing".into()));
            }
        }
        Ok(())
    }
}

/// `F̂(y) = Σ_j Σ_ℓ 1{Y_{ℓ,j} ≤ y} / Σ_j N_j`, componentwise `≤` for vector `y`.
pub fn ecdf_eval(sample: &ClusteredSample, spec: &EcdfSpec, y: &[f64]) -> Result<f64> {
    spec.validate(sample.obs_dim())?;
    if y.len() != spec.coordinates.len() {
        return Err(Error::Shape(format!(
            "evaluation point of length {} for {} coordinates",
            y.len(),
            spec.coordinates.len()
        )));
    }
    let total = sample.total_units();
    if total == 0 {
        return Err(Error::EmptySample);
    }
    let below = sample
        .units()
        .filter(|(_, obs)| spec.coordinates.iter().zip(y).all(|(&c, &t)| obs[c] <= t))
        .count();
    Ok(below as f64 / total as f64)
}

/// `F̂` on the spec's grid (scalar ECDFs only).
pub fn ecdf_on_grid(sample: &ClusteredSample, spec: &EcdfSpec) -> Result<Vec<f64>> {
    let grid = spec
        .grid
        .as_ref()
        .ok_or_else(|| Error::Argument("ECDF spec has no grid".into()))?;
    grid.iter().map(|&g| ecdf_eval(sample, spec, &[g])).collect()
}

/// Left-continuous generalized inverse of the pooled ECDF, restricted to observed values.
#[derive(Debug, Clone)]
pub struct QuantileEstimator {
    dims: Dimensions,
    tau: f64,
    /// Pooled values, sorted ascending.
    values: Vec<f64>,
    /// Cell of each sorted value.
    cells: Vec<usize>,
}

impl QuantileEstimator {
    pub fn new(sample: &ClusteredSample, spec: &EcdfSpec, tau: f64) -> Result<Self> {
        spec.validate(sample.obs_dim())?;
        if spec.coordinates.len() != 1 {
            return Err(Error::Argument("quantiles need a single coordinate".into()));
        }
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::Argument(format!("tau = {tau} not in (0, 1)")));
        }
        if sample.total_units() == 0 {
            return Err(Error::EmptySample);
        }
        let c = spec.coordinates[0];
        let mut pooled: Vec<(f64, usize)> = sample.units().map(|(lin, y)| (y[c], lin)).collect();
        pooled.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let (values, cells) = pooled.into_iter().unzip();
        Ok(Self {
            dims: sample.dims().clone(),
            tau,
            values,
            cells,
        })
    }

    fn invert(&self, w: Option<&[u64]>) -> Result<f64> {
        let weight = |u: usize| w.map_or(1, |w| w[self.cells[u]]);
        let total: u64 = (0..self.values.len()).map(weight).sum();
        if total == 0 {
            return Err(Error::EmptySample);
        }
        let mut cum = 0u64;
        let mut u = 0;
        while u < self.values.len() {
            let v = self.values[u];
            while u < self.values.len() && self.values[u] == v {
                cum += weight(u);
                u += 1;
            }
            if cum > 0 && cum as f64 / total as f64 >= self.tau {
                return Ok(v);
            }
        }
        Ok(*self.values.last().expect("non-empty"))
    }

    pub fn fit(&self) -> Result<EstimateResult> {
        Ok(EstimateResult {
            theta: vec![self.invert(None)?],
            scores: None,
            meta: EstimateMeta {
                estimator: "quantile".into(),
                total_units: self.values.len(),
                ..Default::default()
            },
        })
    }

    /// Inverts `F̂*(y) = Σ_j W_j Σ_ℓ 1{Y ≤ y} / Σ_j W_j N_j`.
    pub fn reestimate(&self, w: &PigeonholeWeights) -> Result<Vec<f64>> {
        let cw = check_weights(&self.dims, w)?;
        Ok(vec![self.invert(Some(&cw))?])
    }
}

pub fn quantile_estimate(sample: &ClusteredSample, spec: &EcdfSpec, tau: f64) -> Result<EstimateResult> {
    QuantileEstimator::new(sample, spec, tau)?.fit()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_sample, Identity};

    fn dims(c: &[usize]) -> Dimensions {
        Dimensions::new(c.to_vec()).unwrap()
    }

    fn scalar_sample(c: &[usize], recs: &[(Vec<usize>, f64)]) -> ClusteredSample {
        let r: Vec<_> = recs.iter().map(|(j, y)| (j.clone(), vec![*y])).collect();
        load_sample(&r, &dims(c)).unwrap()
    }

    #[test]
    fn mean_single_cell() {
        let s = scalar_sample(&[1, 1], &[(vec![0, 0], 7.0)]);
        let r = mean_estimate(&s, &Identity { dim: 1 }).unwrap();
        assert_eq!(r.theta, vec![7.0]);
        assert_eq!(r.scores.unwrap().sums().values(), &[0.0]);
    }

    #[test]
    fn mean_of_cell_sums() {
        let s = scalar_sample(
            &[2, 2],
            &[
                (vec![0, 0], 1.0),
                (vec![0, 1], 2.0),
                (vec![1, 0], 3.0),
                (vec![1, 1], 4.0),
            ],
        );
        assert_eq!(mean_estimate(&s, &Identity { dim: 1 }).unwrap().theta, vec![2.5]);
    }

    #[test]
    fn ratio_with_empty_cells() {
        let s = scalar_sample(&[2, 1], &[(vec![0, 0], 2.0), (vec![0, 0], 4.0)]);
        let r = ratio_estimate(&s, &Identity { dim: 1 }).unwrap();
        assert_eq!(r.theta, vec![3.0]);
        let total: f64 = r.scores.unwrap().sums().total()[0];
        assert!(total.abs() < 1e-14);
    }

    #[test]
    fn ratio_rejects_empty_sample() {
        let s = load_sample(&[], &dims(&[2, 2])).unwrap();
        assert!(matches!(
            ratio_estimate(&s, &Identity { dim: 1 }),
            Err(Error::EmptySample)
        ));
    }

    #[test]
    fn unit_weights_reproduce_fit() {
        let s = scalar_sample(
            &[2, 3],
            &[
                (vec![0, 0], 1.5),
                (vec![1, 2], -0.5),
                (vec![1, 2], 2.0),
                (vec![0, 1], 0.25),
            ],
        );
        let ones = PigeonholeWeights::ones(s.dims());
        let m = MeanEstimator::new(&s, &Identity { dim: 1 }).unwrap();
        assert_eq!(m.reestimate(&ones).unwrap(), m.fit().theta);
        let r = RatioEstimator::new(&s, &Identity { dim: 1 }).unwrap();
        assert_eq!(r.reestimate(&ones).unwrap(), r.fit().unwrap().theta);
        let q = QuantileEstimator::new(&s, &EcdfSpec::scalar(0), 0.5).unwrap();
        assert_eq!(q.reestimate(&ones).unwrap(), q.fit().unwrap().theta);
    }

    #[test]
    fn ols_perfect_fit() {
        let d = dims(&[2, 2]);
        let recs: Vec<_> = (0..12)
            .map(|u| {
                let x = u as f64 * 0.3 - 1.0;
                (vec![u % 2, (u / 2) % 2], vec![1.0 + 2.0 * x, x])
            })
            .collect();
        let s = load_sample(&recs, &d).unwrap();
        let spec = LinearModelSpec {
            outcome_index: 0,
            regressor_indices: vec![1],
            intercept: true,
        };
        let r = ols_fit(&s, &spec).unwrap();
        assert!((r.theta[0] - 1.0).abs() < 1e-12 && (r.theta[1] - 2.0).abs() < 1e-12);
        let v = ols_sandwich(&r, VarianceKind::V1, Adjustment::Unit).unwrap();
        assert!(v.matrix.amax() < 1e-20);
    }

    #[test]
    fn ols_singular_design() {
        let s = load_sample(&[(vec![0], vec![1.0, 2.0]), (vec![1], vec![2.0, 2.0])], &dims(&[2])).unwrap();
        let spec = LinearModelSpec {
            outcome_index: 0,
            regressor_indices: vec![1],
            intercept: true,
        };
        assert!(matches!(ols_fit(&s, &spec), Err(Error::SingularDesign(_))));
        let bad = LinearModelSpec {
            outcome_index: 0,
            regressor_indices: vec![0],
            intercept: false,
        };
        assert!(ols_fit(&s, &bad).is_err());
    }

    #[test]
    fn ecdf_boundaries_and_midpoint() {
        let s = scalar_sample(
            &[2, 2],
            &[
                (vec![0, 0], 1.0),
                (vec![0, 1], 2.0),
                (vec![1, 0], 3.0),
                (vec![1, 1], 4.0),
            ],
        );
        let spec = EcdfSpec::scalar(0);
        assert_eq!(ecdf_eval(&s, &spec, &[0.0]).unwrap(), 0.0);
        assert_eq!(ecdf_eval(&s, &spec, &[10.0]).unwrap(), 1.0);
        assert_eq!(ecdf_eval(&s, &spec, &[2.5]).unwrap(), 0.5);
        let grid = EcdfSpec {
            coordinates: vec![0],
            grid: Some(vec![1.0, 3.0]),
        };
        assert_eq!(ecdf_on_grid(&s, &grid).unwrap(), vec![0.25, 0.75]);
        let unsorted = EcdfSpec {
            coordinates: vec![0],
            grid: Some(vec![3.0, 1.0]),
        };
        assert!(ecdf_eval(&s, &unsorted, &[0.0]).is_err());
        let empty = load_sample(&[], &dims(&[2])).unwrap();
        assert!(matches!(ecdf_eval(&empty, &spec, &[0.0]), Err(Error::EmptySample)));
    }

    #[test]
    fn medians() {
        let spec = EcdfSpec::scalar(0);
        let odd = scalar_sample(&[3], &[(vec![0], 3.0), (vec![1], 1.0), (vec![2], 2.0)]);
        assert_eq!(quantile_estimate(&odd, &spec, 0.5).unwrap().theta, vec![2.0]);
        let even = scalar_sample(
            &[2, 2],
            &[
                (vec![0, 0], 4.0),
                (vec![0, 1], 2.0),
                (vec![1, 0], 3.0),
                (vec![1, 1], 1.0),
            ],
        );
        assert_eq!(quantile_estimate(&even, &spec, 0.5).unwrap().theta, vec![2.0]);
        let flat = scalar_sample(&[2], &[(vec![0], 5.0), (vec![1], 5.0), (vec![1], 5.0)]);
        for tau in [0.01, 0.5, 0.99] {
            assert_eq!(quantile_estimate(&flat, &spec, tau).unwrap().theta, vec![5.0]);
        }
        assert!(quantile_estimate(&flat, &spec, 1.0).is_err());
    }
}
