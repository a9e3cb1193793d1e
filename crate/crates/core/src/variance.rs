//! Multiway cluster-robust variance estimators.
//!
//! All three estimators are assembled from the subset outer-product sums
//!
//! ```text
//! P(U) = Σ_t M_U(t) M_U(t)'
//! ```
//!
//! where `M_U(t)` is the sum of the scores `D_j` over cells whose clusters on the
//! dimension subset `U` equal the tuple `t`. `P(U)` equals the pair sum
//! `Σ_{(j,j'): j_U = j'_U} D_j D_j'`, so every estimator costs `O(Π_C m²)` per
//! subset instead of `O(Π_C² m²)`.
//!
//! * `V̂₁ = C̲ Σ_i c_i P({i}) / Π_C²`, positive semidefinite by construction.
//! * `V̂₂` averages cross products over pairs sharing exactly one cluster; the
//!   "exactly" is obtained by inclusion-exclusion over the other dimensions.
//! * `V̂_cgm = C̲ Σ_U (-1)^{|U|+1} c_U P(U) / Π_C²`.
//!
//! The scores are used as given: callers center them (mean, ratio) or pass
//! moment/score sums that are centered by construction (OLS, GMM).

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::data::{pair_counts, subset_margin_sum, CellSums, Dimensions};
use crate::error::{Error, Result};
use crate::linalg::{add_outer, spd_inverse, symmetrize, to_rows};
use crate::region::{Interval, WaldRegion};

/// Per-cell scores `D_j` fed to the variance estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredScores(CellSums);

impl CenteredScores {
    pub fn new(sums: CellSums) -> Self {
        Self(sums)
    }

    /// `D_j = S_j - θ̂` with `θ̂ = Σ_j S_j / Π_C`.
    pub fn centered(sums: &CellSums) -> Self {
        let pi_c = sums.dims().pi_c() as f64;
        let mean: Vec<f64> = sums.total().iter().map(|t| t / pi_c).collect();
        Self(sums.map_cells(|_, s, out| {
            for ((o, v), m) in out.iter_mut().zip(s).zip(&mean) {
                *o = v - m;
            }
        }))
    }

    pub fn dims(&self) -> &Dimensions {
        self.0.dims()
    }

    pub fn out_dim(&self) -> usize {
        self.0.out_dim()
    }

    pub fn sums(&self) -> &CellSums {
        &self.0
    }

    pub fn into_sums(self) -> CellSums {
        self.0
    }

    /// Multiplies every score by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self(self.0.map_cells(|_, v, out| {
            for (o, x) in out.iter_mut().zip(v) {
                *o = s * x;
            }
        }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceKind {
    V1,
    V2,
    Cgm,
}

impl VarianceKind {
    pub const ALL: [VarianceKind; 3] = [VarianceKind::V1, VarianceKind::V2, VarianceKind::Cgm];

    pub fn name(self) -> &'static str {
        match self {
            VarianceKind::V1 => "v1",
            VarianceKind::V2 => "v2",
            VarianceKind::Cgm => "cgm",
        }
    }
}

impl std::str::FromStr for VarianceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "v1" => Ok(VarianceKind::V1),
            "v2" => Ok(VarianceKind::V2),
            "cgm" | "vcgm" => Ok(VarianceKind::Cgm),
            other => Err(Error::Argument(format!("unknown variance kind `{other}`"))),
        }
    }
}

/// Finite-sample factors `c_U` replacing `1/Π_C²` by `c_U/Π_C²`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Adjustment {
    /// `c_U = 1`.
    #[default]
    Unit,
    /// `c_U = P / (P - 1)` with `P = Π_{i∈U} C_i` (1 when `P = 1`).
    Cgm,
}

impl Adjustment {
    pub fn factor(self, dims: &Dimensions, subset: &[usize]) -> f64 {
        match self {
            Adjustment::Unit => 1.0,
            Adjustment::Cgm => {
                let p: f64 = subset.iter().map(|&i| dims.count(i) as f64).product();
                if p > 1.0 {
                    p / (p - 1.0)
                } else {
                    1.0
                }
            }
        }
    }
}

impl std::str::FromStr for Adjustment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "unit" | "none" => Ok(Adjustment::Unit),
            "cgm" => Ok(Adjustment::Cgm),
            other => Err(Error::Argument(format!("unknown adjustment preset `{other}`"))),
        }
    }
}

/// A variance estimate with the plug-in weights and adjustment factors used.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceEstimate {
    pub matrix: DMatrix<f64>,
    pub kind: VarianceKind,
    pub lambda_hats: Vec<f64>,
    pub adjustment: Adjustment,
    /// Factor applied to each dimension subset, keyed by 1-based labels like `"1,3"`.
    pub factors: BTreeMap<String, f64>,
}

impl VarianceEstimate {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        crate::linalg::min_eigenvalue(&self.matrix)
    }
}

impl Serialize for VarianceEstimate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Adj<'a> {
            preset: Adjustment,
            factors: &'a BTreeMap<String, f64>,
        }
        #[derive(Serialize)]
        struct Repr<'a> {
            kind: VarianceKind,
            matrix: Vec<Vec<f64>>,
            lambda: &'a [f64],
            adjustments: Adj<'a>,
        }
        Repr {
            kind: self.kind,
            matrix: to_rows(&self.matrix),
            lambda: &self.lambda_hats,
            adjustments: Adj {
                preset: self.adjustment,
                factors: &self.factors,
            },
        }
        .serialize(s)
    }
}

fn subset_label(subset: &[usize]) -> String {
    subset.iter().map(|i| (i + 1).to_string()).collect::<Vec<_>>().join(",")
}

fn subset_of_mask(mask: usize, k: usize) -> Vec<usize> {
    (0..k).filter(|i| mask >> i & 1 == 1).collect()
}

/// Unscaled `P(U) = Σ_t M_U(t) M_U(t)'`.
fn outer_sum(scores: &CenteredScores, subset: &[usize]) -> Result<DMatrix<f64>> {
    let m = scores.out_dim();
    let margins = subset_margin_sum(scores.sums(), subset)?;
    let mut acc = DMatrix::zeros(m, m);
    for v in margins.iter() {
        add_outer(&mut acc, v, v, 1.0);
    }
    symmetrize(&mut acc);
    Ok(acc)
}

/// `c_U / Π_C² · Σ_{(j,j') ∈ B_U} D_j D_j'`.
pub fn sigma_subset(scores: &CenteredScores, subset: &[usize], adjustment: Adjustment) -> Result<DMatrix<f64>> {
    let dims = scores.dims();
    let pi_c = dims.pi_c() as f64;
    let p = outer_sum(scores, subset)?;
    let mut sorted = subset.to_vec();
    sorted.sort_unstable();
    Ok(p * (adjustment.factor(dims, &sorted) / (pi_c * pi_c)))
}

fn estimate(
    scores: &CenteredScores,
    kind: VarianceKind,
    matrix: DMatrix<f64>,
    adjustment: Adjustment,
    factors: BTreeMap<String, f64>,
) -> VarianceEstimate {
    VarianceEstimate {
        matrix,
        kind,
        lambda_hats: scores.dims().lambda_hats(),
        adjustment,
        factors,
    }
}

/// `V̂₁` with unit adjustments.
pub fn vhat1(scores: &CenteredScores) -> VarianceEstimate {
    vhat1_adjusted(scores, Adjustment::Unit)
}

pub fn vhat1_adjusted(scores: &CenteredScores, adjustment: Adjustment) -> VarianceEstimate {
    let dims = scores.dims();
    let c_min = dims.c_min() as f64;
    let m = scores.out_dim();
    let mut total = DMatrix::zeros(m, m);
    let mut factors = BTreeMap::new();
    for i in 0..dims.k() {
        let c = adjustment.factor(dims, &[i]);
        factors.insert(subset_label(&[i]), c);
        let s = sigma_subset(scores, &[i], adjustment).expect("valid singleton subset");
        total += s * c_min;
    }
    estimate(scores, VarianceKind::V1, total, adjustment, factors)
}

/// `V̂₂` with unit adjustments.
pub fn vhat2(scores: &CenteredScores) -> Result<VarianceEstimate> {
    vhat2_adjusted(scores, Adjustment::Unit)
}

pub fn vhat2_adjusted(scores: &CenteredScores, adjustment: Adjustment) -> Result<VarianceEstimate> {
    let dims = scores.dims();
    let k = dims.k();
    if k >= 2 {
        if let Some(s) = dims.counts().iter().position(|&c| c < 2) {
            return Err(Error::DegenerateDesign { dim: s });
        }
    }
    let c_min = dims.c_min() as f64;
    let m = scores.out_dim();

    let mut cache: BTreeMap<usize, DMatrix<f64>> = BTreeMap::new();
    let mut total = DMatrix::zeros(m, m);
    let mut factors = BTreeMap::new();
    for i in 0..k {
        let others: Vec<usize> = (0..k).filter(|&s| s != i).collect();
        // Σ_{A_i} D_j D_j' = Σ_{T ⊆ others} (-1)^{|T|} P({i} ∪ T)
        let mut pair_sum = DMatrix::zeros(m, m);
        for t in 0..(1usize << others.len()) {
            let mut mask = 1usize << i;
            let mut size = 0;
            for (b, &s) in others.iter().enumerate() {
                if t >> b & 1 == 1 {
                    mask |= 1 << s;
                    size += 1;
                }
            }
            if let std::collections::btree_map::Entry::Vacant(e) = cache.entry(mask) {
                e.insert(outer_sum(scores, &subset_of_mask(mask, k))?);
            }
            let p = &cache[&mask];
            if size % 2 == 0 {
                pair_sum += p;
            } else {
                pair_sum -= p;
            }
        }
        let (a_i, _) = pair_counts(dims, i)?;
        let c = adjustment.factor(dims, &[i]);
        factors.insert(subset_label(&[i]), c);
        let lambda = c_min / dims.count(i) as f64;
        total += pair_sum * (lambda * c / a_i as f64);
    }
    symmetrize(&mut total);
    Ok(estimate(scores, VarianceKind::V2, total, adjustment, factors))
}

/// `V̂_cgm` with unit adjustments.
pub fn vhat_cgm(scores: &CenteredScores) -> VarianceEstimate {
    vhat_cgm_adjusted(scores, Adjustment::Unit)
}

pub fn vhat_cgm_adjusted(scores: &CenteredScores, adjustment: Adjustment) -> VarianceEstimate {
    let dims = scores.dims();
    let k = dims.k();
    let c_min = dims.c_min() as f64;
    let m = scores.out_dim();
    let mut masks: Vec<usize> = (1..1usize << k).collect();
    masks.sort_by_key(|&mask| (mask.count_ones(), subset_of_mask(mask, k)));
    let mut total = DMatrix::zeros(m, m);
    let mut factors = BTreeMap::new();
    for mask in masks {
        let subset = subset_of_mask(mask, k);
        factors.insert(subset_label(&subset), adjustment.factor(dims, &subset));
        let s = sigma_subset(scores, &subset, adjustment).expect("valid subset");
        if subset.len() % 2 == 1 {
            total += s * c_min;
        } else {
            total -= s * c_min;
        }
    }
    estimate(scores, VarianceKind::Cgm, total, adjustment, factors)
}

/// Dispatches on `kind`.
pub fn variance(scores: &CenteredScores, kind: VarianceKind, adjustment: Adjustment) -> Result<VarianceEstimate> {
    match kind {
        VarianceKind::V1 => Ok(vhat1_adjusted(scores, adjustment)),
        VarianceKind::V2 => vhat2_adjusted(scores, adjustment),
        VarianceKind::Cgm => Ok(vhat_cgm_adjusted(scores, adjustment)),
    }
}

/// `χ²_p(1-α)` quantile.
pub fn chi2_quantile(df: usize, level: f64) -> f64 {
    ChiSquared::new(df as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(level)
}

/// Standard normal quantile.
pub fn normal_quantile(level: f64) -> f64 {
    Normal::standard().inverse_cdf(level)
}

/// Wald ellipsoid `C̲ (θ-θ̂)' V̂⁻¹ (θ-θ̂) ≤ χ²_p(1-α)` and intervals
/// `θ̂_r ± z_{1-α/2} √(V̂_rr / C̲)`.
pub fn wald_region(theta_hat: &[f64], v_hat: &VarianceEstimate, dims: &Dimensions, alpha: f64) -> Result<WaldRegion> {
    wald_region_from_matrix(theta_hat, &v_hat.matrix, dims, alpha)
}

pub fn wald_region_from_matrix(
    theta_hat: &[f64],
    v: &DMatrix<f64>,
    dims: &Dimensions,
    alpha: f64,
) -> Result<WaldRegion> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Argument(format!("alpha = {alpha} not in (0, 1)")));
    }
    let p = theta_hat.len();
    if v.nrows() != p || v.ncols() != p {
        return Err(Error::Shape(format!(
            "{}x{} variance for a parameter of length {}",
            v.nrows(),
            v.ncols(),
            p
        )));
    }
    let v_inv = spd_inverse(v)?;
    let c_min = dims.c_min();
    let z = normal_quantile(1.0 - alpha / 2.0);
    let intervals = theta_hat
        .iter()
        .enumerate()
        .map(|(r, &t)| {
            let half = z * (v[(r, r)] / c_min as f64).sqrt();
            Interval {
                lo: t - half,
                hi: t + half,
            }
        })
        .collect();
    Ok(WaldRegion {
        center: theta_hat.to_vec(),
        v_inv,
        c_min,
        threshold: chi2_quantile(p, 1.0 - alpha),
        intervals,
    })
}
