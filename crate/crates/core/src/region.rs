//! Confidence regions returned by the Wald and bootstrap constructions.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::linalg::{quad_form, to_rows};

pub trait Region {
    fn contains(&self, theta: &[f64]) -> bool;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains_value(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn length(&self) -> f64 {
        self.hi - self.lo
    }
}

impl Region for Interval {
    fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == 1 && self.contains_value(theta[0])
    }
}

/// `{θ : C̲ (θ - θ̂)' V̂⁻¹ (θ - θ̂) ≤ χ²_p(1-α)}` with per-coordinate normal intervals.
#[derive(Debug, Clone)]
pub struct WaldRegion {
    pub center: Vec<f64>,
    pub v_inv: DMatrix<f64>,
    pub c_min: usize,
    pub threshold: f64,
    pub intervals: Vec<Interval>,
}

impl WaldRegion {
    pub fn statistic(&self, theta: &[f64]) -> f64 {
        let d: Vec<f64> = theta.iter().zip(&self.center).map(|(a, b)| a - b).collect();
        self.c_min as f64 * quad_form(&self.v_inv, &d)
    }
}

impl Region for WaldRegion {
    fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.center.len() && self.statistic(theta) <= self.threshold
    }
}

impl Serialize for WaldRegion {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr<'a> {
            center: &'a [f64],
            c_min: usize,
            chi2_threshold: f64,
            v_inv: Vec<Vec<f64>>,
            intervals: &'a [Interval],
        }
        Repr {
            center: &self.center,
            c_min: self.c_min,
            chi2_threshold: self.threshold,
            v_inv: to_rows(&self.v_inv),
            intervals: &self.intervals,
        }
        .serialize(s)
    }
}

/// Euclidean ball `{θ : |θ̂ - θ| ≤ radius}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallRegion {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl BallRegion {
    /// Coordinate-wise projection `[θ̂_r - radius, θ̂_r + radius]`.
    pub fn intervals(&self) -> Vec<Interval> {
        self.center
            .iter()
            .map(|&c| Interval {
                lo: c - self.radius,
                hi: c + self.radius,
            })
            .collect()
    }
}

impl Region for BallRegion {
    fn contains(&self, theta: &[f64]) -> bool {
        if theta.len() != self.center.len() {
            return false;
        }
        let d2: f64 = theta.iter().zip(&self.center).map(|(a, b)| (a - b) * (a - b)).sum();
        d2.sqrt() <= self.radius
    }
}
