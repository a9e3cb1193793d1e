//! Inference under multiway clustering.
//!
//! Data live in the cells of a `C_1 × … × C_k` design. Estimators are built from
//! cell sums `S_j`; their variance is estimated by `V̂₁`, `V̂₂` or `V̂_cgm`, or by
//! the pigeonhole bootstrap. Coordinates are 0-based in this API and 1-based
//! in dataset files.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bootstrap;
pub mod data;
pub mod error;
pub mod estimators;
pub mod gmm;
pub mod io;
pub mod linalg;
pub mod region;
pub mod rng;
pub mod simulation;
pub mod variance;

pub use nalgebra;

pub use bootstrap::{
    draw_weights, percentile_ci, replicate_weights, run_bootstrap, symmetric_abs_ci, weighted_cell_sums,
    BootstrapReplicates, PigeonholeWeights,
};
pub use data::{
    cell_sums, load_sample, margin_sum, pair_counts, subset_margin_sum, CellIndex, CellStatistic, CellSums,
    ClusteredSample, Coordinate, Count, Dimensions, FnStatistic, Identity, MarginSums,
};
pub use error::{Error, Result};
pub use estimators::{
    ecdf_eval, ecdf_on_grid, mean_estimate, ols_fit, ols_sandwich, quantile_estimate, ratio_estimate, EcdfSpec,
    EstimateResult, LinearModelSpec,
};
pub use gmm::{
    gmm_fit, gmm_hhat, gmm_jhat, gmm_objective, gmm_variance, probit_score_moments, quantile_iv_moments, GmmResult,
    MomentModel, Moments, OptimizerConfig, ThetaBox, WeightMatrix,
};
pub use region::{BallRegion, Interval, Region, WaldRegion};
pub use simulation::{analytic_asymptotic_variance, generate, run_coverage, DgpSpec, McConfig, McReport};
pub use variance::{
    sigma_subset, variance, vhat1, vhat2, vhat_cgm, wald_region, Adjustment, CenteredScores, VarianceEstimate,
    VarianceKind,
};

/// Runs `f` on a dedicated pool of `workers` threads. Results never depend on
/// the worker count.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}
