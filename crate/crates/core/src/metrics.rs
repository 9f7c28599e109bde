//! Survival model evaluation: Kaplan-Meier, concordance, IPCW Brier scores,
//! cumulative/dynamic AUC and stratified bootstrap intervals.

use ndarray::ArrayView2;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive, rng_from};

/// Upper bound on the number of grid points used by [`ibs_grid`].
pub const MAX_IBS_POINTS: usize = 100;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("empty input")]
    Empty,
    #[error("input lengths disagree: {0}")]
    Shape(String),
    #[error("negative or non-finite time {0}")]
    BadTime(f64),
    #[error("no comparable pairs")]
    NoComparablePairs,
    #[error("evaluation grid is empty")]
    EmptyGrid,
    #[error("no time point had both cases and controls")]
    NoAucPoints,
    #[error("metric failed on {failed} of {total} bootstrap replicates")]
    TooManyFailures { failed: usize, total: usize },
    #[error("bootstrap needs at least {min} replicates, got {got}")]
    TooFewReplicates { min: usize, got: usize },
}

fn check_lengths(n: usize, others: &[(&str, usize)]) -> Result<(), MetricError> {
    if n == 0 {
        return Err(MetricError::Empty);
    }
    for (name, len) in others {
        if *len != n {
            return Err(MetricError::Shape(format!("{n} times vs {len} {name}")));
        }
    }
    Ok(())
}

/// Right-continuous Kaplan-Meier step function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub knots: Vec<f64>,
    pub survival: Vec<f64>,
}

impl KmCurve {
    /// `S(t)`.
    pub fn eval(&self, t: f64) -> f64 {
        let k = self.knots.partition_point(|&x| x <= t);
        if k == 0 {
            1.0
        } else {
            self.survival[k - 1]
        }
    }

    /// Left limit `S(t⁻)`.
    pub fn eval_left(&self, t: f64) -> f64 {
        let k = self.knots.partition_point(|&x| x < t);
        if k == 0 {
            1.0
        } else {
            self.survival[k - 1]
        }
    }
}

/// `S(t) = Π_{tᵢ ≤ t} (1 − dᵢ/nᵢ)` over distinct event times.
pub fn kaplan_meier(times: &[f64], events: &[bool]) -> Result<KmCurve, MetricError> {
    check_lengths(times.len(), &[("events", events.len())])?;
    if let Some(&t) = times.iter().find(|t| !t.is_finite() || **t < 0.0) {
        return Err(MetricError::BadTime(t));
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut at_risk = times.len();
    let mut s = 1.0;
    let mut curve = KmCurve {
        knots: vec![],
        survival: vec![],
    };
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let mut j = i;
        let mut d = 0;
        while j < order.len() && times[order[j]] == t {
            d += events[order[j]] as usize;
            j += 1;
        }
        if d > 0 {
            s *= 1.0 - d as f64 / at_risk as f64;
            curve.knots.push(t);
            curve.survival.push(s);
        }
        at_risk -= j - i;
        i = j;
    }
    Ok(curve)
}

/// Kaplan-Meier estimate of the censoring survivor function `G`.
pub fn censoring_km(times: &[f64], events: &[bool]) -> Result<KmCurve, MetricError> {
    let censored: Vec<bool> = events.iter().map(|e| !e).collect();
    kaplan_meier(times, &censored)
}

/// Fenwick tree over ranks.
struct Fenwick(Vec<u64>);

impl Fenwick {
    fn add(&mut self, mut i: usize) {
        i += 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks `< i`.
    fn below(&self, mut i: usize) -> u64 {
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i &= i - 1;
        }
        s
    }
}

/// Harrell's C-index: for each event `i`, subjects with a later time or a
/// censoring at the same time are comparable; higher risk should fail first.
/// Risk ties count one half. `O(n log n)`.
pub fn concordance_index(times: &[f64], events: &[bool], risk: &[f64]) -> Result<f64, MetricError> {
    check_lengths(
        times.len(),
        &[("events", events.len()), ("risk scores", risk.len())],
    )?;
    let n = times.len();
    let mut by_risk: Vec<usize> = (0..n).collect();
    by_risk.sort_by(|&a, &b| risk[a].total_cmp(&risk[b]));
    let mut rank = vec![0usize; n];
    let mut r = 0;
    for k in 0..n {
        if k > 0 && risk[by_risk[k]] != risk[by_risk[k - 1]] {
            r += 1;
        }
        rank[by_risk[k]] = r;
    }
    let mut tree = Fenwick(vec![0; r + 2]);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));
    // twice the concordance so ties stay integral
    let (mut twice_conc, mut pairs) = (0u64, 0u64);
    let mut inserted = 0u64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && times[order[j]] == times[order[i]] {
            j += 1;
        }
        let group = &order[i..j];
        for &c in group.iter().filter(|&&c| !events[c]) {
            tree.add(rank[c]);
            inserted += 1;
        }
        for &e in group.iter().filter(|&&e| events[e]) {
            let below = tree.below(rank[e]);
            let tied = tree.below(rank[e] + 1) - below;
            twice_conc += 2 * below + tied;
            pairs += inserted;
        }
        for &e in group.iter().filter(|&&e| events[e]) {
            tree.add(rank[e]);
            inserted += 1;
        }
        i = j;
    }
    if pairs == 0 {
        return Err(MetricError::NoComparablePairs);
    }
    Ok(twice_conc as f64 / (2 * pairs) as f64)
}

/// IPCW Brier score at one time point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BrierPoint {
    pub value: f64,
    /// Observations dropped because their censoring weight was zero.
    pub dropped: usize,
}

/// Events before `t` are scored against 0 with weight `1/G(tᵢ⁻)`, subjects
/// still at risk after `t` against 1 with weight `1/G(t)`; subjects censored
/// before `t` contribute nothing. Normalized by the full sample size.
pub fn brier_score(
    t: f64,
    predicted: &[f64],
    times: &[f64],
    events: &[bool],
    censor_km: &KmCurve,
) -> Result<BrierPoint, MetricError> {
    check_lengths(
        times.len(),
        &[("events", events.len()), ("predictions", predicted.len())],
    )?;
    let g_t = censor_km.eval(t);
    let mut sum = 0.0;
    let mut dropped = 0;
    for i in 0..times.len() {
        let (target, g) = if times[i] <= t && events[i] {
            (0.0, censor_km.eval_left(times[i]))
        } else if times[i] > t {
            (1.0, g_t)
        } else {
            continue;
        };
        if g <= 0.0 {
            dropped += 1;
            continue;
        }
        sum += (target - predicted[i]).powi(2) / g;
    }
    if dropped > 0 {
        log::warn!("Brier at t={t}: dropped {dropped} observations with zero censoring weight");
    }
    Ok(BrierPoint {
        value: sum / times.len() as f64,
        dropped,
    })
}

/// Integration grid for the integrated Brier score: the range endpoints plus
/// the distinct event times strictly inside, thinned evenly to at most
/// [`MAX_IBS_POINTS`]. The default range runs from the first event time to
/// the 90th percentile of follow-up.
pub fn ibs_grid(
    times: &[f64],
    events: &[bool],
    range: Option<(f64, f64)>,
) -> Result<Vec<f64>, MetricError> {
    check_lengths(times.len(), &[("events", events.len())])?;
    let mut ev: Vec<f64> = times
        .iter()
        .zip(events)
        .filter(|(_, &e)| e)
        .map(|(&t, _)| t)
        .collect();
    ev.sort_by(f64::total_cmp);
    ev.dedup();
    let (lo, hi) = match range {
        Some(r) => r,
        None => {
            let first = *ev.first().ok_or(MetricError::EmptyGrid)?;
            let mut sorted = times.to_vec();
            sorted.sort_by(f64::total_cmp);
            (first, quantile(&sorted, 0.9))
        }
    };
    if !(hi > lo) {
        return Err(MetricError::EmptyGrid);
    }
    let inner: Vec<f64> = ev.into_iter().filter(|&t| t > lo && t < hi).collect();
    let room = MAX_IBS_POINTS - 2;
    let mut grid = vec![lo];
    if inner.len() <= room {
        grid.extend(inner);
    } else {
        grid.extend((0..room).map(|k| inner[k * (inner.len() - 1) / (room - 1)]));
        grid.dedup();
    }
    grid.push(hi);
    Ok(grid)
}

/// Trapezoidal integral of the Brier score over `grid`, divided by the grid's
/// length. `survival` holds predictions with one row per subject and one
/// column per grid point.
pub fn integrated_brier(
    survival: ArrayView2<f64>,
    grid: &[f64],
    times: &[f64],
    events: &[bool],
    censor_km: &KmCurve,
) -> Result<f64, MetricError> {
    if grid.len() < 2 {
        return Err(MetricError::EmptyGrid);
    }
    if survival.dim() != (times.len(), grid.len()) {
        return Err(MetricError::Shape(format!(
            "survival {:?} vs {} subjects × {} grid points",
            survival.dim(),
            times.len(),
            grid.len()
        )));
    }
    let scores: Vec<f64> = grid
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            brier_score(t, &survival.column(k).to_vec(), times, events, censor_km).map(|b| b.value)
        })
        .collect::<Result<_, _>>()?;
    let area: f64 = (1..grid.len())
        .map(|k| 0.5 * (scores[k] + scores[k - 1]) * (grid[k] - grid[k - 1]))
        .sum();
    Ok(area / (grid[grid.len() - 1] - grid[0]))
}

/// Per-time AUC and their unweighted mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeAuc {
    pub times: Vec<f64>,
    pub auc: Vec<f64>,
    pub mean: f64,
    /// Requested times without cases or controls.
    pub skipped: Vec<f64>,
}

/// Deciles 10%–90% of the event times.
pub fn default_auc_times(times: &[f64], events: &[bool]) -> Vec<f64> {
    let mut ev: Vec<f64> = times
        .iter()
        .zip(events)
        .filter(|(_, &e)| e)
        .map(|(&t, _)| t)
        .collect();
    if ev.is_empty() {
        return vec![];
    }
    ev.sort_by(f64::total_cmp);
    let mut out: Vec<f64> = (1..=9).map(|k| quantile(&ev, k as f64 / 10.0)).collect();
    out.dedup();
    out
}

/// Cumulative cases (events by `t`, weighted `1/G(tᵢ⁻)`) against dynamic
/// controls (still at risk after `t`).
pub fn cumulative_dynamic_auc(
    times: &[f64],
    events: &[bool],
    risk: &[f64],
    eval_times: &[f64],
    censor_km: &KmCurve,
) -> Result<TimeAuc, MetricError> {
    check_lengths(
        times.len(),
        &[("events", events.len()), ("risk scores", risk.len())],
    )?;
    let mut out = TimeAuc {
        times: vec![],
        auc: vec![],
        mean: f64::NAN,
        skipped: vec![],
    };
    for &t in eval_times {
        let mut controls: Vec<f64> = (0..times.len())
            .filter(|&j| times[j] > t)
            .map(|j| risk[j])
            .collect();
        controls.sort_by(f64::total_cmp);
        let mut num = 0.0;
        let mut wsum = 0.0;
        for i in (0..times.len()).filter(|&i| times[i] <= t && events[i]) {
            let g = censor_km.eval_left(times[i]);
            if g <= 0.0 {
                continue;
            }
            let w = 1.0 / g;
            let below = controls.partition_point(|&r| r < risk[i]);
            let upto = controls.partition_point(|&r| r <= risk[i]);
            num += w * (below as f64 + 0.5 * (upto - below) as f64);
            wsum += w;
        }
        if controls.is_empty() || wsum == 0.0 {
            log::warn!("tAUC at t={t}: no cases or no controls, point skipped");
            out.skipped.push(t);
            continue;
        }
        out.times.push(t);
        out.auc.push(num / (wsum * controls.len() as f64));
    }
    if out.auc.is_empty() {
        return Err(MetricError::NoAucPoints);
    }
    out.mean = out.auc.iter().sum::<f64>() / out.auc.len() as f64;
    Ok(out)
}

/// Linear-interpolation sample quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Point estimate with a percentile bootstrap interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub metric: String,
    pub estimate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n_boot: usize,
    pub seed: u64,
    /// Replicates on which the metric could not be computed.
    pub failed: usize,
}

pub const MIN_BOOTSTRAP: usize = 100;

/// Resampled row indices for replicate `r`. With `stratify` the event and
/// censored groups are resampled separately, preserving their sizes.
pub fn bootstrap_indices(events: &[bool], seed: u64, r: usize, stratify: bool) -> Vec<usize> {
    let mut rng = rng_from(derive(seed, r as u64));
    let n = events.len();
    if !stratify {
        return (0..n).map(|_| rng.random_range(0..n)).collect();
    }
    let ev: Vec<usize> = (0..n).filter(|&i| events[i]).collect();
    let ce: Vec<usize> = (0..n).filter(|&i| !events[i]).collect();
    let mut idx = Vec::with_capacity(n);
    for group in [&ev, &ce] {
        for _ in 0..group.len() {
            idx.push(group[rng.random_range(0..group.len())]);
        }
    }
    idx
}

/// Percentile bootstrap for a metric computed on row subsets. Replicates run
/// in parallel; replicate `r` draws from a stream derived from `(seed, r)`, so
/// results do not depend on scheduling.
pub fn bootstrap_ci<F, E>(
    name: &str,
    metric: F,
    events: &[bool],
    n_boot: usize,
    seed: u64,
    stratify: bool,
) -> Result<MetricResult, MetricError>
where
    F: Fn(&[usize]) -> Result<f64, E> + Sync,
    E: Into<MetricError>,
{
    if n_boot < MIN_BOOTSTRAP {
        return Err(MetricError::TooFewReplicates {
            min: MIN_BOOTSTRAP,
            got: n_boot,
        });
    }
    if events.is_empty() {
        return Err(MetricError::Empty);
    }
    let all: Vec<usize> = (0..events.len()).collect();
    let estimate = metric(&all).map_err(Into::into)?;
    let reps: Vec<Option<f64>> = (0..n_boot)
        .into_par_iter()
        .map(|r| {
            metric(&bootstrap_indices(events, seed, r, stratify))
                .ok()
                .filter(|v| v.is_finite())
        })
        .collect();
    let mut ok: Vec<f64> = reps.iter().flatten().copied().collect();
    let failed = n_boot - ok.len();
    if failed * 10 > n_boot {
        return Err(MetricError::TooManyFailures {
            failed,
            total: n_boot,
        });
    }
    ok.sort_by(f64::total_cmp);
    Ok(MetricResult {
        metric: name.to_string(),
        estimate,
        ci_lo: quantile(&ok, 0.025),
        ci_hi: quantile(&ok, 0.975),
        n_boot,
        seed,
        failed,
    })
}
