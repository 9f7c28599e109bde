//! Neural Cox model: a network output replaces the linear predictor.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coxph::{breslow_from_scores, CoxError, RiskSets};
use crate::curve::{CumHazardFn, Interpolation, SurvivalCurve};
use crate::nnet::{Adam, Mlp, Mode, NnError};
use crate::rng::{derive, rng_from};

#[derive(Debug, Error)]
pub enum DeepSurvError {
    #[error(transparent)]
    Net(#[from] NnError),
    #[error(transparent)]
    Cox(#[from] CoxError),
    #[error("training diverged (non-finite loss) in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("{0}")]
    Shape(String),
    #[error("prediction times must be sorted ascending")]
    UnsortedTimes,
}

/// Training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeepSurvParams {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    pub weight_decay: f64,
}

impl DeepSurvParams {
    /// Disease-free survival configuration.
    pub fn dfs() -> Self {
        Self {
            hidden: vec![64, 64],
            dropout: 0.1,
            epochs: 75,
            batch_size: 64,
            learning_rate: 0.1,
            gamma: 0.7,
            weight_decay: 0.05,
        }
    }

    /// Overall survival configuration.
    pub fn os() -> Self {
        Self {
            hidden: vec![64, 128, 64],
            epochs: 70,
            batch_size: 256,
            ..Self::dfs()
        }
    }
}

impl Default for DeepSurvParams {
    fn default() -> Self {
        Self::dfs()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    /// Mean per-event batch loss of each epoch.
    pub epoch_loss: Vec<f64>,
    pub skipped_batches: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeepSurvModel {
    pub names: Vec<String>,
    pub net: Mlp,
    pub baseline: CumHazardFn,
    /// Subtracted from scores before exponentiation; keeps the Breslow sums finite.
    pub score_offset: f64,
    pub params: DeepSurvParams,
    pub history: TrainingHistory,
}

/// Efron negative log partial likelihood of `scores` within one batch, with
/// its gradient with respect to the scores.
pub fn deepsurv_loss(
    scores: ArrayView1<f64>,
    times: &[f64],
    events: &[bool],
) -> Result<(f64, Array1<f64>), CoxError> {
    if scores.len() != times.len() {
        return Err(CoxError::Shape(format!(
            "{} scores vs {} times",
            scores.len(),
            times.len()
        )));
    }
    Ok(RiskSets::new(times, events)?.nll(scores))
}

fn check_inputs(
    x: ArrayView2<f64>,
    times: &[f64],
    events: &[bool],
    names: &[String],
) -> Result<(), DeepSurvError> {
    if x.nrows() != times.len() || times.len() != events.len() || names.len() != x.ncols() {
        return Err(DeepSurvError::Shape(format!(
            "design {:?}, {} times, {} events, {} names",
            x.dim(),
            times.len(),
            events.len(),
            names.len()
        )));
    }
    Ok(())
}

/// Minibatch training; afterwards the Breslow baseline is fitted on the full
/// training data with the eval-mode scores.
pub fn fit_deepsurv(
    x: ArrayView2<f64>,
    times: &[f64],
    events: &[bool],
    names: &[String],
    params: &DeepSurvParams,
    seed: u64,
) -> Result<DeepSurvModel, DeepSurvError> {
    check_inputs(x, times, events, names)?;
    if params.batch_size == 0 {
        return Err(DeepSurvError::Shape("batch size must be positive".into()));
    }
    let mut sizes = vec![x.ncols()];
    sizes.extend(&params.hidden);
    sizes.push(1);
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
        let (mut total, mut n_events) = (0.0, 0usize);
        for batch in order.chunks(params.batch_size) {
            let bt: Vec<f64> = batch.iter().map(|&i| times[i]).collect();
            let be: Vec<bool> = batch.iter().map(|&i| events[i]).collect();
            let d = be.iter().filter(|&&e| e).count();
            // the dropout seed is drawn even for skipped batches so the
            // stream does not depend on batch composition
            let mask_seed: u64 = masks.random();
            if d == 0 {
                history.skipped_batches += 1;
                log::warn!(
                    "epoch {epoch}: skipping event-free batch of {}",
                    batch.len()
                );
                continue;
            }
            let xb = x.select(Axis(0), batch);
            let (out, cache) = net.forward(xb.view(), Mode::Train { seed: mask_seed })?;
            let (loss, g) = deepsurv_loss(out.column(0), &bt, &be)?;
            if !loss.is_finite() {
                return Err(DeepSurvError::Diverged { epoch });
            }
            total += loss;
            n_events += d;
            let grad = g.insert_axis(Axis(1));
            let grads = net.backward(&cache, grad.view()).map_err(|e| match e {
                NnError::NonFiniteGradient { .. } => DeepSurvError::Diverged { epoch },
                e => e.into(),
            })?;
            opt.step(&mut net, &grads, epoch)?;
        }
        let mean = if n_events > 0 {
            total / n_events as f64
        } else {
            f64::NAN
        };
        log::debug!("epoch {epoch}: loss {mean:.6}");
        history.epoch_loss.push(mean);
    }

    let scores = net.predict(x)?.column(0).to_owned();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(DeepSurvError::Diverged {
            epoch: params.epochs.saturating_sub(1),
        });
    }
    let score_offset = scores.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let shifted: Vec<f64> = scores.iter().map(|s| s - score_offset).collect();
    let baseline = breslow_from_scores(times, events, &shifted)?;
    Ok(DeepSurvModel {
        names: names.to_vec(),
        net,
        baseline,
        score_offset,
        params: params.clone(),
        history,
    })
}

impl DeepSurvModel {
    /// Eval-mode network outputs `f(x)`.
    pub fn risk_scores(&self, x: ArrayView2<f64>) -> Result<Vec<f64>, DeepSurvError> {
        Ok(self.net.predict(x)?.column(0).to_vec())
    }

    /// `S(t | x) = exp(−H₀(t)·exp(f(x)))`.
    pub fn predict_survival(
        &self,
        x: ArrayView1<f64>,
        times: &[f64],
    ) -> Result<SurvivalCurve, DeepSurvError> {
        if times.windows(2).any(|w| w[1] < w[0]) {
            return Err(DeepSurvError::UnsortedTimes);
        }
        let s = self.survival_matrix(x.insert_axis(Axis(0)), times)?;
        Ok(SurvivalCurve::new(
            times.to_vec(),
            s.row(0).to_vec(),
            Interpolation::Step,
        ))
    }

    /// Survival probabilities, one row per subject.
    pub fn survival_matrix(
        &self,
        x: ArrayView2<f64>,
        times: &[f64],
    ) -> Result<Array2<f64>, DeepSurvError> {
        let scores = self.risk_scores(x)?;
        let h = self.baseline.eval_many(times);
        let mut out = Array2::zeros((scores.len(), times.len()));
        for (i, s) in scores.iter().enumerate() {
            let r = (s - self.score_offset).exp();
            for (k, hk) in h.iter().enumerate() {
                out[[i, k]] = (-hk * r).exp();
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Exp, StandardNormal};

    fn cox_data(n: usize, beta: &[f64], seed: u64) -> (Array2<f64>, Vec<f64>, Vec<bool>) {
        let mut rng = rng_from(seed);
        let x = Array2::from_shape_simple_fn((n, beta.len()), || StandardNormal.sample(&mut rng));
        let mut t = Vec::with_capacity(n);
        let mut e = Vec::with_capacity(n);
        for i in 0..n {
            let eta: f64 = x.row(i).iter().zip(beta).map(|(a, b)| a * b).sum();
            let ti: f64 = Exp::new(0.1 * eta.exp()).unwrap().sample(&mut rng);
            let ci: f64 = Exp::new(0.05).unwrap().sample(&mut rng);
            t.push(ti.min(ci));
            e.push(ti <= ci);
        }
        (x, t, e)
    }

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|j| format!("x{j}")).collect()
    }

    fn harrell(times: &[f64], events: &[bool], risk: &[f64]) -> f64 {
        let (mut conc, mut total) = (0.0, 0.0);
        for i in 0..times.len() {
            if !events[i] {
                continue;
            }
            for j in 0..times.len() {
                if times[j] > times[i] {
                    total += 1.0;
                    conc += if risk[i] > risk[j] {
                        1.0
                    } else if risk[i] == risk[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        conc / total
    }

    #[test]
    fn zero_scores_give_log_risk_set_sizes() {
        let times = [1.0, 2.0, 3.0, 4.0, 5.0];
        let events = [true, false, true, true, false];
        let (v, _) = deepsurv_loss(Array1::zeros(5).view(), &times, &events).unwrap();
        let expected = 5f64.ln() + 3f64.ln() + 2f64.ln();
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = rng_from(4);
        let s: Array1<f64> = Array1::from_shape_simple_fn(10, || StandardNormal.sample(&mut rng));
        let times = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0, 5.0, 3.0];
        let events = [
            true, true, false, true, true, false, true, true, false, true,
        ];
        let (_, g) = deepsurv_loss(s.view(), &times, &events).unwrap();
        let eps = 1e-6;
        for i in 0..10 {
            let mut p = s.clone();
            p[i] += eps;
            let mut m = s.clone();
            m[i] -= eps;
            let num = (deepsurv_loss(p.view(), &times, &events).unwrap().0
                - deepsurv_loss(m.view(), &times, &events).unwrap().0)
                / (2.0 * eps);
            assert!(
                (num - g[i]).abs() / g[i].abs().max(1e-3) < 1e-6,
                "{i}: {num} vs {}",
                g[i]
            );
        }
    }

    #[test]
    fn loss_is_shift_invariant() {
        let mut rng = rng_from(5);
        let s: Array1<f64> = Array1::from_shape_simple_fn(30, || StandardNormal.sample(&mut rng));
        let times: Vec<f64> = (0..30).map(|i| ((i * 7) % 11) as f64).collect();
        let events: Vec<bool> = (0..30).map(|i| i % 3 != 0).collect();
        let (v0, _) = deepsurv_loss(s.view(), &times, &events).unwrap();
        for c in [-40.0, -1.5, 0.3, 25.0] {
            let (v, _) = deepsurv_loss((&s + c).view(), &times, &events).unwrap();
            assert!((v - v0).abs() < 1e-9 * v0.abs());
        }
        assert!(matches!(
            deepsurv_loss(s.view(), &times, &[false; 30]),
            Err(CoxError::NoEvents)
        ));
    }

    #[test]
    fn dfs_and_os_configurations() {
        let d = DeepSurvParams::dfs();
        assert_eq!(
            (d.hidden.clone(), d.epochs, d.batch_size),
            (vec![64, 64], 75, 64)
        );
        assert_eq!(
            (d.learning_rate, d.gamma, d.weight_decay, d.dropout),
            (0.1, 0.7, 0.05, 0.1)
        );
        let o = DeepSurvParams::os();
        assert_eq!(
            (o.hidden, o.epochs, o.batch_size),
            (vec![64, 128, 64], 70, 256)
        );
    }

    #[test]
    fn training_is_deterministic_and_curves_are_proportional() {
        let (x, t, e) = cox_data(300, &[0.8, -0.5, 0.0], 1);
        let params = DeepSurvParams {
            epochs: 5,
            ..DeepSurvParams::dfs()
        };
        let a = fit_deepsurv(x.view(), &t, &e, &names(3), &params, 9).unwrap();
        let b = fit_deepsurv(x.view(), &t, &e, &names(3), &params, 9).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(
            a.risk_scores(x.view()).unwrap(),
            b.risk_scores(x.view()).unwrap()
        );

        let grid: Vec<f64> = (0..20).map(|k| k as f64 * 2.0).collect();
        let s = a
            .survival_matrix(x.slice(ndarray::s![0..5, ..]), &grid)
            .unwrap();
        let scores = a.risk_scores(x.slice(ndarray::s![0..5, ..])).unwrap();
        for i in 0..5 {
            assert_eq!(s[[i, 0]], 1.0);
            for k in 1..grid.len() {
                assert!(s[[i, k]] <= s[[i, k - 1]] && s[[i, k]] > 0.0);
            }
            for j in 0..5 {
                if scores[i] > scores[j] {
                    assert!((0..grid.len()).all(|k| s[[i, k]] <= s[[j, k]]));
                }
            }
        }
    }

    #[test]
    fn linear_net_matches_cox_regression() {
        use crate::coxph::{fit_coxph, FitOptions, Penalty};
        let beta = [0.7, -0.4, 0.25];
        let (x, t, e) = cox_data(2000, &beta, 2);
        let (xt, tt, et) = cox_data(1000, &beta, 3);
        let cox = fit_coxph(&x, &t, &e, &names(3), Penalty::NONE, &FitOptions::default()).unwrap();
        let params = DeepSurvParams {
            hidden: vec![],
            dropout: 0.0,
            epochs: 40,
            batch_size: 256,
            learning_rate: 0.01,
            gamma: 1.0,
            weight_decay: 0.0,
        };
        let ds = fit_deepsurv(x.view(), &t, &e, &names(3), &params, 4).unwrap();
        let r_cox = cox.risk_scores(&xt).unwrap();
        let r_ds = ds.risk_scores(xt.view()).unwrap();
        let c_cox = harrell(&tt, &et, &r_cox);
        let c_ds = harrell(&tt, &et, &r_ds);
        assert!((c_cox - c_ds).abs() < 0.01, "{c_cox} vs {c_ds}");
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (ma, mb) = (mean(&r_cox), mean(&r_ds));
        let cov: f64 = r_cox
            .iter()
            .zip(&r_ds)
            .map(|(a, b)| (a - ma) * (b - mb))
            .sum();
        let va: f64 = r_cox.iter().map(|a| (a - ma).powi(2)).sum();
        let vb: f64 = r_ds.iter().map(|b| (b - mb).powi(2)).sum();
        assert!(cov / (va * vb).sqrt() > 0.99);
    }

    #[test]
    fn event_free_batches_are_skipped() {
        let (x, t, mut e) = cox_data(40, &[0.5], 6);
        for (i, ev) in e.iter_mut().enumerate() {
            *ev = i == 0;
        }
        let params = DeepSurvParams {
            hidden: vec![4],
            epochs: 2,
            batch_size: 10,
            ..DeepSurvParams::dfs()
        };
        let m = fit_deepsurv(x.view(), &t, &e, &names(1), &params, 1).unwrap();
        assert_eq!(m.history.skipped_batches, 6);
    }
}
