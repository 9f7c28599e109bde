//! Discrete-time survival network with a softmax head over time bins.
//!
//! The loss combines the discrete likelihood with a pairwise ranking term:
//! `L = L_lik + α·L_rank`, where `L_lik` averages `−log pmf[k]` (events) and
//! `−log Σ_{j>k} pmf[j]` (censored) over the batch and
//! `L_rank = n⁻² Σ_{(i,j) comparable} exp(−(Fᵢ(kᵢ) − Fⱼ(kᵢ))/σ)`.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curve::{Interpolation, SurvivalCurve};
use crate::nnet::{Adam, Mlp, Mode, NnError};
use crate::rng::{derive, rng_from};

/// Guard inside the logarithms of the likelihood.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DeepHitError {
    #[error(transparent)]
    Net(#[from] NnError),
    #[error("need at least two bins, got {0}")]
    TooFewBins(usize),
    #[error("observed times are degenerate (all equal or non-positive maximum)")]
    DegenerateTimes,
    #[error("empty batch")]
    EmptyBatch,
    #[error("bin label {label} out of range for {n_bins} bins")]
    LabelOutOfRange { label: usize, n_bins: usize },
    #[error("training diverged (non-finite loss) in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("{0}")]
    Shape(String),
}

/// Interval cut points; bin `k` covers `(cuts[k-1], cuts[k]]` with `cuts[-1] = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    cuts: Vec<f64>,
}

impl TimeGrid {
    /// Cuts at the `k/n_bins` quantiles of all observed times, deduplicated;
    /// the last cut is the maximum time.
    pub fn from_quantiles(times: &[f64], n_bins: usize) -> Result<TimeGrid, DeepHitError> {
        if n_bins < 2 {
            return Err(DeepHitError::TooFewBins(n_bins));
        }
        let mut sorted: Vec<f64> = times.to_vec();
        sorted.sort_by(f64::total_cmp);
        let (Some(&lo), Some(&hi)) = (sorted.first(), sorted.last()) else {
            return Err(DeepHitError::DegenerateTimes);
        };
        if hi <= 0.0 || lo == hi {
            return Err(DeepHitError::DegenerateTimes);
        }
        let mut cuts: Vec<f64> = Vec::with_capacity(n_bins);
        for k in 1..n_bins {
            let c = quantile(&sorted, k as f64 / n_bins as f64);
            if c > 0.0 && cuts.last().is_none_or(|&last| c > last) && c < hi {
                cuts.push(c);
            }
        }
        cuts.push(hi);
        if cuts.len() < 2 {
            return Err(DeepHitError::DegenerateTimes);
        }
        Ok(TimeGrid { cuts })
    }

    pub fn cuts(&self) -> &[f64] {
        &self.cuts
    }

    pub fn n_bins(&self) -> usize {
        self.cuts.len()
    }

    pub fn t_max(&self) -> f64 {
        *self.cuts.last().expect("validated")
    }

    /// Smallest `k` with `t ≤ cuts[k]`; times past the grid fall in the last bin.
    pub fn bin(&self, t: f64) -> usize {
        self.cuts
            .partition_point(|&c| c < t)
            .min(self.cuts.len() - 1)
    }
}

/// Linear-interpolation sample quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Row-wise softmax.
pub fn softmax(z: ArrayView2<f64>) -> Array2<f64> {
    let mut p = z.to_owned();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

/// Loss value and its gradient with respect to the pre-softmax outputs.
pub fn deephit_loss(
    logits: ArrayView2<f64>,
    labels: &[usize],
    events: &[bool],
    alpha: f64,
    sigma: f64,
) -> Result<(f64, Array2<f64>), DeepHitError> {
    let (n, n_bins) = logits.dim();
    if n == 0 {
        return Err(DeepHitError::EmptyBatch);
    }
    if labels.len() != n || events.len() != n {
        return Err(DeepHitError::Shape(format!(
            "{n} rows, {} labels, {} events",
            labels.len(),
            events.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&k| k >= n_bins) {
        return Err(DeepHitError::LabelOutOfRange { label, n_bins });
    }
    let pmf = softmax(logits);
    let nf = n as f64;
    let mut dp = Array2::<f64>::zeros((n, n_bins));
    let mut value = 0.0;

    for i in 0..n {
        let k = labels[i];
        if events[i] {
            let p = pmf[[i, k]];
            value -= p.max(LOG_FLOOR).ln() / nf;
            if p > LOG_FLOOR {
                dp[[i, k]] -= 1.0 / (nf * p);
            }
        } else {
            let s: f64 = pmf.row(i).iter().skip(k + 1).sum();
            value -= s.max(LOG_FLOOR).ln() / nf;
            if s > LOG_FLOOR {
                for j in k + 1..n_bins {
                    dp[[i, j]] -= 1.0 / (nf * s);
                }
            }
        }
    }

    if alpha > 0.0 {
        let mut cdf = pmf.clone();
        for mut row in cdf.rows_mut() {
            let mut acc = 0.0;
            for v in row.iter_mut() {
                acc += *v;
                *v = acc;
            }
        }
        // gradient with respect to F(i, k), turned into pmf gradients below
        let mut df = Array2::<f64>::zeros((n, n_bins));
        let scale = alpha / (nf * nf);
        for i in 0..n {
            if !events[i] {
                continue;
            }
            let ki = labels[i];
            for j in 0..n {
                let comparable = labels[j] > ki || (labels[j] == ki && !events[j]);
                if j == i || !comparable {
                    continue;
                }
                let w = (-(cdf[[i, ki]] - cdf[[j, ki]]) / sigma).exp();
                value += scale * w;
                df[[i, ki]] -= scale * w / sigma;
                df[[j, ki]] += scale * w / sigma;
            }
        }
        for i in 0..n {
            let mut acc = 0.0;
            for l in (0..n_bins).rev() {
                acc += df[[i, l]];
                dp[[i, l]] += acc;
            }
        }
    }

    // through the softmax: dz = p ⊙ (dp − ⟨dp, p⟩)
    let mut dz = Array2::<f64>::zeros((n, n_bins));
    for i in 0..n {
        let dot: f64 = dp.row(i).dot(&pmf.row(i));
        for l in 0..n_bins {
            dz[[i, l]] = pmf[[i, l]] * (dp[[i, l]] - dot);
        }
    }
    Ok((value, dz))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeepHitParams {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    pub weight_decay: f64,
    pub n_bins: usize,
    pub n_interp: usize,
    pub alpha: f64,
    pub sigma: f64,
}

impl DeepHitParams {
    /// Disease-free survival configuration.
    pub fn dfs() -> Self {
        Self {
            hidden: vec![64, 128, 64],
            dropout: 0.1,
            epochs: 25,
            batch_size: 64,
            learning_rate: 0.005,
            gamma: 0.7,
            weight_decay: 0.05,
            n_bins: 60,
            n_interp: 50,
            alpha: 0.2,
            sigma: 0.1,
        }
    }

    /// Overall survival configuration.
    pub fn os() -> Self {
        Self {
            epochs: 100,
            ..Self::dfs()
        }
    }
}

impl Default for DeepHitParams {
    fn default() -> Self {
        Self::dfs()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    /// Sample-weighted mean batch loss of each epoch.
    pub epoch_loss: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeepHitModel {
    pub names: Vec<String>,
    pub net: Mlp,
    pub grid: TimeGrid,
    pub params: DeepHitParams,
    pub history: TrainingHistory,
}

pub fn fit_deephit(
    x: ArrayView2<f64>,
    times: &[f64],
    events: &[bool],
    names: &[String],
    params: &DeepHitParams,
    seed: u64,
) -> Result<DeepHitModel, DeepHitError> {
    if x.nrows() != times.len() || times.len() != events.len() || names.len() != x.ncols() {
        return Err(DeepHitError::Shape(format!(
            "design {:?}, {} times, {} events, {} names",
            x.dim(),
            times.len(),
            events.len(),
            names.len()
        )));
    }
    if params.batch_size == 0 {
        return Err(DeepHitError::Shape("batch size must be positive".into()));
    }
    let grid = TimeGrid::from_quantiles(times, params.n_bins)?;
    let labels: Vec<usize> = times.iter().map(|&t| grid.bin(t)).collect();
    let mut sizes = vec![x.ncols()];
    sizes.extend(&params.hidden);
    sizes.push(grid.n_bins());
    let mut net = Mlp::new(&sizes, params.dropout, derive(seed, 0))?;
    let mut opt = Adam::new(
        &net,
        params.learning_rate,
        params.gamma,
        params.weight_decay,
    );
    let mut shuffle = rng_from(derive(seed, 1));
    let mut masks = rng_from(derive(seed, 2));
    let mut history = TrainingHistory::default();
    let mut order: Vec<usize> = (0..x.nrows()).collect();

    for epoch in 0..params.epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for batch in order.chunks(params.batch_size) {
            let bl: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let be: Vec<bool> = batch.iter().map(|&i| events[i]).collect();
            let xb = x.select(Axis(0), batch);
            let (out, cache) = net.forward(
                xb.view(),
                Mode::Train {
                    seed: masks.random(),
                },
            )?;
            let (loss, dz) = deephit_loss(out.view(), &bl, &be, params.alpha, params.sigma)?;
            if !loss.is_finite() {
                return Err(DeepHitError::Diverged { epoch });
            }
            total += loss * batch.len() as f64;
            let grads = net.backward(&cache, dz.view()).map_err(|e| match e {
                NnError::NonFiniteGradient { .. } => DeepHitError::Diverged { epoch },
                e => e.into(),
            })?;
            opt.step(&mut net, &grads, epoch)?;
        }
        let mean = total / x.nrows().max(1) as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        history.epoch_loss.push(mean);
    }
    Ok(DeepHitModel {
        names: names.to_vec(),
        net,
        grid,
        params: params.clone(),
        history,
    })
}

impl DeepHitModel {
    /// Eval-mode probability mass over bins, one row per subject.
    pub fn pmf(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, DeepHitError> {
        Ok(softmax(self.net.predict(x)?.view()))
    }

    /// Survival at the grid points `0, cuts[0], …, cuts[K-1]` for one pmf row.
    fn knots(&self, pmf: ArrayView1<f64>) -> (Vec<f64>, Vec<f64>) {
        let mut t = vec![0.0];
        let mut s = vec![1.0];
        let mut acc = 0.0;
        for (k, &c) in self.grid.cuts().iter().enumerate() {
            acc += pmf[k];
            t.push(c);
            s.push((1.0 - acc).clamp(0.0, 1.0));
        }
        (t, s)
    }

    /// Survival curve sampled at `n_points` equidistant times on `[0, t_max]`,
    /// linear within bins.
    pub fn predict_survival(
        &self,
        x: ArrayView1<f64>,
        n_points: usize,
    ) -> Result<SurvivalCurve, DeepHitError> {
        if n_points < 2 {
            return Err(DeepHitError::Shape(format!(
                "need at least two points, got {n_points}"
            )));
        }
        let t_max = self.grid.t_max();
        let times: Vec<f64> = (0..n_points)
            .map(|k| t_max * k as f64 / (n_points - 1) as f64)
            .collect();
        let s = self.survival_matrix(x.insert_axis(Axis(0)), &times)?;
        Ok(SurvivalCurve::new(
            times,
            s.row(0).to_vec(),
            Interpolation::Linear,
        ))
    }

    /// Piecewise-linear survival at arbitrary times; constant past `t_max`.
    pub fn survival_matrix(
        &self,
        x: ArrayView2<f64>,
        times: &[f64],
    ) -> Result<Array2<f64>, DeepHitError> {
        let pmf = self.pmf(x)?;
        let mut out = Array2::zeros((pmf.nrows(), times.len()));
        for (i, row) in pmf.rows().into_iter().enumerate() {
            let (kt, ks) = self.knots(row);
            let curve = SurvivalCurve::new(kt, ks, Interpolation::Linear);
            for (c, &t) in times.iter().enumerate() {
                out[[i, c]] = curve.at(t);
            }
        }
        Ok(out)
    }

    /// Negative restricted mean survival time on `[0, t_max]`; larger means
    /// higher risk.
    pub fn risk_scores(&self, x: ArrayView2<f64>) -> Result<Vec<f64>, DeepHitError> {
        let pmf = self.pmf(x)?;
        Ok(pmf
            .rows()
            .into_iter()
            .map(|row| {
                let (t, s) = self.knots(row);
                let area: f64 = (1..t.len())
                    .map(|k| 0.5 * (s[k] + s[k - 1]) * (t[k] - t[k - 1]))
                    .sum();
                -area
            })
            .collect())
    }

    /// Discrete survival `1 − Σ_{j≤k} pmf[j]` at each cut.
    pub fn discrete_survival(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, DeepHitError> {
        let mut s = self.pmf(x)?;
        for mut row in s.rows_mut() {
            let mut acc = 0.0;
            for v in row.iter_mut() {
                acc += *v;
                *v = (1.0 - acc).clamp(0.0, 1.0);
            }
        }
        Ok(s)
    }
}
