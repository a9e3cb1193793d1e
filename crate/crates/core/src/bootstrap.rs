//! Pigeonhole bootstrap: each dimension's clusters are drawn with replacement
//! independently, and cell `j` enters the resample `W_j = Π_i W^i_{j_i}` times.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CellSums, Dimensions};
use crate::error::{Error, Result};
use crate::region::{BallRegion, Interval};
use crate::rng;

/// Per-dimension draw counts `W^i_{j_i}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PigeonholeWeights {
    dims: Dimensions,
    per_dim_counts: Vec<Vec<u32>>,
}

impl PigeonholeWeights {
    /// Validates that every dimension's counts sum to its cluster count.
    pub fn new(dims: Dimensions, per_dim_counts: Vec<Vec<u32>>) -> Result<Self> {
        if per_dim_counts.len() != dims.k() {
            return Err(Error::Shape(format!(
                "{} count vectors for {} dimensions",
                per_dim_counts.len(),
                dims.k()
            )));
        }
        for (i, w) in per_dim_counts.iter().enumerate() {
            let total: u64 = w.iter().map(|&x| x as u64).sum();
            if w.len() != dims.count(i) || total != dims.count(i) as u64 {
                return Err(Error::Argument(format!(
                    "dimension {} counts must have length {} and sum to it",
                    i + 1,
                    dims.count(i)
                )));
            }
        }
        Ok(Self { dims, per_dim_counts })
    }

    /// Every cluster drawn exactly once.
    pub fn ones(dims: &Dimensions) -> Self {
        Self {
            per_dim_counts: dims.counts().iter().map(|&c| vec![1; c]).collect(),
            dims: dims.clone(),
        }
    }

    pub fn dims(&self) -> &Dimensions {
        &self.dims
    }

    pub fn per_dim_counts(&self) -> &[Vec<u32>] {
        &self.per_dim_counts
    }

    /// `W_j` for every cell in lexicographic order.
    pub fn cell_weights(&self) -> Vec<u64> {
        let mut w = vec![1u64];
        for counts in &self.per_dim_counts {
            let mut next = Vec::with_capacity(w.len() * counts.len());
            for &a in &w {
                next.extend(counts.iter().map(|&c| a * c as u64));
            }
            w = next;
        }
        w
    }
}

/// Tallies `C_i` uniform categorical draws over `{1..C_i}` in each dimension.
pub fn draw_weights<R: Rng + ?Sized>(dims: &Dimensions, rng: &mut R) -> PigeonholeWeights {
    let per_dim_counts = dims
        .counts()
        .iter()
        .map(|&c| {
            let mut counts = vec![0u32; c];
            for _ in 0..c {
                counts[rng.random_range(0..c)] += 1;
            }
            counts
        })
        .collect();
    PigeonholeWeights {
        dims: dims.clone(),
        per_dim_counts,
    }
}

/// Weight draw for replicate `b` of a bootstrap keyed by `seed`.
pub fn replicate_weights(dims: &Dimensions, seed: u64, b: u64) -> PigeonholeWeights {
    draw_weights(dims, &mut rng::stream(seed, &[rng::TAG_BOOTSTRAP, b]))
}

/// `W_j S_j` for every cell.
pub fn weighted_cell_sums(sums: &CellSums, w: &PigeonholeWeights) -> Result<CellSums> {
    if sums.dims() != w.dims() {
        return Err(Error::Shape(format!(
            "weights for {:?} applied to sums over {:?}",
            w.dims().counts(),
            sums.dims().counts()
        )));
    }
    let cw = w.cell_weights();
    Ok(sums.map_cells(|lin, s, out| {
        let f = cw[lin] as f64;
        for (o, v) in out.iter_mut().zip(s) {
            *o = f * v;
        }
    }))
}

/// Bootstrap replicate estimates `θ*_b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReplicates {
    pub theta_hat: Vec<f64>,
    /// Successful replicates, in replicate order.
    pub thetas: Vec<Vec<f64>>,
    /// Replicate index of each row of `thetas`.
    pub indices: Vec<usize>,
    pub b: usize,
    pub seed: u64,
    /// Indices of replicates whose re-estimation failed.
    pub failed: Vec<usize>,
}

impl BootstrapReplicates {
    pub fn failure_rate(&self) -> f64 {
        self.failed.len() as f64 / self.b as f64
    }

    /// More than 1% of replicates failed.
    pub fn excessive_failures(&self) -> bool {
        self.failed.len() * 100 > self.b
    }

    /// Coordinate-wise standard deviation of the replicates.
    pub fn std_errors(&self) -> Vec<f64> {
        let n = self.thetas.len() as f64;
        (0..self.theta_hat.len())
            .map(|r| {
                let mean = self.thetas.iter().map(|t| t[r]).sum::<f64>() / n;
                let ss = self.thetas.iter().map(|t| (t[r] - mean).powi(2)).sum::<f64>();
                (ss / (n - 1.0)).sqrt()
            })
            .collect()
    }

    /// `replicate,theta_1,...,theta_p` with one row per successful replicate.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("replicate");
        for r in 0..self.theta_hat.len() {
            out.push_str(&format!(",theta_{}", r + 1));
        }
        out.push('\n');
        for (idx, t) in self.indices.iter().zip(&self.thetas) {
            out.push_str(&(idx + 1).to_string());
            for v in t {
                out.push(',');
                out.push_str(&format_float(*v));
            }
            out.push('\n');
        }
        out
    }
}

/// Shortest decimal representation that round-trips.
pub(crate) fn format_float(v: f64) -> String {
    format!("{v:?}")
}

/// Re-runs `estimator` under `b` independent pigeonhole draws. Replicate `b`
/// always uses the weights derived from `(seed, b)`, whatever the thread count.
pub fn run_bootstrap<F>(
    estimator: F,
    dims: &Dimensions,
    theta_hat: Vec<f64>,
    b: usize,
    seed: u64,
) -> Result<BootstrapReplicates>
where
    F: Fn(&PigeonholeWeights) -> Result<Vec<f64>> + Sync,
{
    if b == 0 {
        return Err(Error::Argument("at least one replicate is required".into()));
    }
    let p = theta_hat.len();
    let results: Vec<Option<Vec<f64>>> = (0..b)
        .into_par_iter()
        .map(|idx| {
            let w = replicate_weights(dims, seed, idx as u64);
            match estimator(&w) {
                Ok(t) if t.len() == p && t.iter().all(|v| v.is_finite()) => Some(t),
                _ => None,
            }
        })
        .collect();
    let mut reps = BootstrapReplicates {
        theta_hat,
        thetas: Vec::with_capacity(b),
        indices: Vec::with_capacity(b),
        b,
        seed,
        failed: Vec::new(),
    };
    for (idx, r) in results.into_iter().enumerate() {
        match r {
            Some(t) => {
                reps.thetas.push(t);
                reps.indices.push(idx);
            }
            None => reps.failed.push(idx),
        }
    }
    Ok(reps)
}

/// The `ceil(n q)`-th order statistic of `sorted` (1-based), i.e. the
/// left-continuous inverse of the empirical CDF.
pub fn order_statistic(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((n as f64) * q - 1e-9).ceil().max(1.0) as usize;
    sorted[rank.min(n) - 1]
}

fn check_replicates(reps: &BootstrapReplicates, alpha: f64, factor: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Argument(format!("alpha = {alpha} not in (0, 1)")));
    }
    let need = (factor / alpha - 1e-9).ceil() as usize;
    if reps.thetas.len() < need {
        return Err(Error::InsufficientReplicates {
            have: reps.thetas.len(),
            need,
        });
    }
    Ok(())
}

/// `{θ : |θ̂ - θ| ≤ q*_{1-α}}` with `q*` the empirical quantile of `|θ*_b - θ̂|`
/// (Euclidean norm).
pub fn symmetric_abs_ci(reps: &BootstrapReplicates, alpha: f64) -> Result<BallRegion> {
    check_replicates(reps, alpha, 1.0)?;
    let mut dist: Vec<f64> = reps
        .thetas
        .iter()
        .map(|t| {
            t.iter()
                .zip(&reps.theta_hat)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    dist.sort_by(f64::total_cmp);
    Ok(BallRegion {
        center: reps.theta_hat.clone(),
        radius: order_statistic(&dist, 1.0 - alpha),
    })
}

/// Coordinate-wise `[q_{α/2}(θ*_r), q_{1-α/2}(θ*_r)]`.
pub fn percentile_ci(reps: &BootstrapReplicates, alpha: f64) -> Result<Vec<Interval>> {
    check_replicates(reps, alpha, 2.0)?;
    Ok((0..reps.theta_hat.len())
        .map(|r| {
            let mut col: Vec<f64> = reps.thetas.iter().map(|t| t[r]).collect();
            col.sort_by(f64::total_cmp);
            Interval {
                lo: order_statistic(&col, alpha / 2.0),
                hi: order_statistic(&col, 1.0 - alpha / 2.0),
            }
        })
        .collect())
}

/// Name of the quantile rule, echoed in JSON outputs.
pub const QUANTILE_RULE: &str = "ceil(B*q)-th order statistic";
