//! Step and piecewise-linear functions of time shared by estimators and models.

use serde::{Deserialize, Serialize};

/// Right-continuous cumulative hazard step function.
///
/// `H(t)` is zero below the first knot and equals `values[k]` for
/// `knots[k] <= t < knots[k + 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumHazardFn {
    knots: Vec<f64>,
    values: Vec<f64>,
}

impl CumHazardFn {
    /// Builds from sorted knots and non-decreasing values. Panics on malformed
    /// input since every producer in the crate constructs these internally.
    pub fn new(knots: Vec<f64>, values: Vec<f64>) -> Self {
        assert_eq!(knots.len(), values.len(), "knot/value length mismatch");
        debug_assert!(
            knots.windows(2).all(|w| w[0] < w[1]),
            "knots not strictly increasing"
        );
        debug_assert!(values.windows(2).all(|w| w[0] <= w[1]), "hazard decreasing");
        Self { knots, values }
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn eval(&self, t: f64) -> f64 {
        // number of knots <= t
        let k = self.knots.partition_point(|&x| x <= t);
        if k == 0 {
            0.0
        } else {
            self.values[k - 1]
        }
    }

    pub fn eval_many(&self, ts: &[f64]) -> Vec<f64> {
        ts.iter().map(|&t| self.eval(t)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Right-continuous step between grid points.
    Step,
    /// Linear between grid points (constant density within an interval).
    Linear,
}

/// A survival function sampled on a sorted time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub interpolation: Interpolation,
}

impl SurvivalCurve {
    pub fn new(times: Vec<f64>, survival: Vec<f64>, interpolation: Interpolation) -> Self {
        assert_eq!(times.len(), survival.len());
        Self {
            times,
            survival,
            interpolation,
        }
    }

    /// Evaluates S(t). Before the first grid point S is 1 (step) or linearly
    /// joined from (0, 1) (linear); after the last point S stays constant.
    pub fn at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&x| x <= t);
        match self.interpolation {
            Interpolation::Step => {
                if k == 0 {
                    1.0
                } else {
                    self.survival[k - 1]
                }
            }
            Interpolation::Linear => {
                if k == self.times.len() {
                    return *self.survival.last().unwrap_or(&1.0);
                }
                let (t0, s0) = if k == 0 {
                    (0.0, 1.0)
                } else {
                    (self.times[k - 1], self.survival[k - 1])
                };
                let (t1, s1) = (self.times[k], self.survival[k]);
                if t <= t0 || t1 <= t0 {
                    return s0;
                }
                s0 + (s1 - s0) * (t - t0) / (t1 - t0)
            }
        }
    }

    pub fn is_non_increasing(&self) -> bool {
        self.survival.windows(2).all(|w| w[1] <= w[0])
    }
}
