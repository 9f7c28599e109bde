//! Cox proportional-hazards regression.
//!
//! The partial likelihood uses Efron's correction for tied event times. Fits
//! minimize `NLPL(β)/n + l1·‖β‖₁ + (l2/2)·‖β‖²`, where `n` is the number of
//! subjects: Newton-Raphson when `l1 = 0`, otherwise a monotone accelerated
//! proximal-gradient scheme whose soft-threshold step yields exact zeros.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::curve::{CumHazardFn, Interpolation, SurvivalCurve};
use crate::linalg::{cholesky, cholesky_solve, spd_inverse};
use crate::tabular::{DataError, SurvivalDataset};

/// |β| beyond this is reported as (quasi-)separation.
pub const SEPARATION_LIMIT: f64 = 50.0;
/// Two-sided 95% normal quantile.
pub const Z_975: f64 = 1.959_963_984_540_054;

#[derive(Debug, Error)]
pub enum CoxError {
    #[error("no observed events")]
    NoEvents,
    #[error("input lengths disagree: {0}")]
    Shape(String),
    #[error("non-finite coefficient vector")]
    NonFinite,
    #[error("penalty components must be non-negative")]
    NegativePenalty,
    #[error("coefficient for `{column}` reached {value:.2}; the data are (quasi-)separated")]
    Separation { column: String, value: f64 },
    #[error("model did not converge; refusing to predict")]
    NotConverged,
    #[error("Wald inference requires an unpenalized fit")]
    PenalizedInference,
    #[error("observed information matrix is singular")]
    Singular,
    #[error("prediction times must be sorted ascending")]
    UnsortedTimes,
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Subjects sorted by time and grouped by distinct time.
#[derive(Debug, Clone)]
pub struct RiskSets {
    order: Vec<usize>,
    /// (start, end) ranges into `order`, ascending time.
    groups: Vec<(usize, usize)>,
    times: Vec<f64>,
    events: Vec<bool>,
}

impl RiskSets {
    pub fn new(times: &[f64], events: &[bool]) -> Result<Self, CoxError> {
        if times.len() != events.len() {
            return Err(CoxError::Shape(format!(
                "{} times vs {} events",
                times.len(),
                events.len()
            )));
        }
        if !events.iter().any(|&e| e) {
            return Err(CoxError::NoEvents);
        }
        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by(|&a, &b| times[a].total_cmp(&times[b]).then(a.cmp(&b)));
        let mut groups = Vec::new();
        let mut s = 0;
        while s < order.len() {
            let mut e = s + 1;
            while e < order.len() && times[order[e]] == times[order[s]] {
                e += 1;
            }
            groups.push((s, e));
            s = e;
        }
        Ok(Self {
            order,
            groups,
            times: times.to_vec(),
            events: events.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Running maximum of `eta` over each group's risk set (times ≥ the group's
    /// time). Non-increasing in ascending group order.
    fn risk_set_max(&self, eta: ArrayView1<f64>) -> Vec<f64> {
        let mut m = vec![f64::NEG_INFINITY; self.groups.len()];
        let mut run = f64::NEG_INFINITY;
        for (g, &(st, en)) in self.groups.iter().enumerate().rev() {
            for &i in &self.order[st..en] {
                run = run.max(eta[i]);
            }
            m[g] = run;
        }
        m
    }

    /// Efron negative log partial likelihood of linear predictors `eta` and
    /// its gradient with respect to `eta`.
    ///
    /// Risk-set sums are carried relative to the running maximum of `eta`, so
    /// widely spread predictors neither overflow nor underflow.
    pub fn nll(&self, eta: ArrayView1<f64>) -> (f64, Array1<f64>) {
        let n = self.len();
        let m = self.risk_set_max(eta);

        // per group: a = Σ_l 1/den_l, b = Σ_l (l/d)/den_l on the exp(-m_g) scale
        let mut a = vec![0.0; self.groups.len()];
        let mut b = vec![0.0; self.groups.len()];
        let mut value = 0.0;
        let mut s0 = 0.0;
        let mut prev_m = f64::NEG_INFINITY;
        for (g, &(st, en)) in self.groups.iter().enumerate().rev() {
            if prev_m.is_finite() {
                s0 *= (prev_m - m[g]).exp();
            }
            prev_m = m[g];
            let mut s0_d = 0.0;
            let mut d = 0usize;
            for &i in &self.order[st..en] {
                let w = (eta[i] - m[g]).exp();
                s0 += w;
                if self.events[i] {
                    s0_d += w;
                    d += 1;
                    value -= eta[i] - m[g];
                }
            }
            for l in 0..d {
                let frac = l as f64 / d as f64;
                let den = s0 - frac * s0_d;
                value += den.ln();
                a[g] += 1.0 / den;
                b[g] += frac / den;
            }
        }

        let mut grad = Array1::zeros(n);
        let mut cum = 0.0;
        let mut prev_m = f64::NAN;
        for (g, &(st, en)) in self.groups.iter().enumerate() {
            if prev_m.is_finite() {
                cum *= (m[g] - prev_m).exp();
            }
            prev_m = m[g];
            cum += a[g];
            for &i in &self.order[st..en] {
                let w = (eta[i] - m[g]).exp();
                let mut gi = w * cum;
                if self.events[i] {
                    gi -= w * b[g] + 1.0;
                }
                grad[i] = gi;
            }
        }
        (value, grad)
    }

    /// Hessian of the Efron NLPL with respect to β for design `x` at `eta = xβ`.
    pub fn hessian(&self, x: &Array2<f64>, eta: ArrayView1<f64>) -> Array2<f64> {
        let p = x.ncols();
        let m = self.risk_set_max(eta);
        let mut h = Array2::<f64>::zeros((p, p));
        let mut s0 = 0.0;
        let mut s1 = Array1::<f64>::zeros(p);
        let mut s2 = Array2::<f64>::zeros((p, p));
        let mut prev_m = f64::NEG_INFINITY;
        for (g, &(st, en)) in self.groups.iter().enumerate().rev() {
            if prev_m.is_finite() {
                let f = (prev_m - m[g]).exp();
                s0 *= f;
                s1 *= f;
                s2 *= f;
            }
            prev_m = m[g];
            let mut s0_d = 0.0;
            let mut s1_d = Array1::<f64>::zeros(p);
            let mut s2_d = Array2::<f64>::zeros((p, p));
            let mut d = 0usize;
            for &i in &self.order[st..en] {
                let xi = x.row(i);
                let w = (eta[i] - m[g]).exp();
                s0 += w;
                s1.scaled_add(w, &xi);
                for r in 0..p {
                    let wr = w * xi[r];
                    for c in 0..p {
                        s2[[r, c]] += wr * xi[c];
                    }
                }
                if self.events[i] {
                    d += 1;
                    s0_d += w;
                    s1_d.scaled_add(w, &xi);
                    for r in 0..p {
                        let wr = w * xi[r];
                        for c in 0..p {
                            s2_d[[r, c]] += wr * xi[c];
                        }
                    }
                }
            }
            for l in 0..d {
                let frac = l as f64 / d as f64;
                let den = s0 - frac * s0_d;
                let m1 = (&s1 - &(&s1_d * frac)) / den;
                for r in 0..p {
                    for c in 0..p {
                        let m2 = (s2[[r, c]] - frac * s2_d[[r, c]]) / den;
                        h[[r, c]] += m2 - m1[r] * m1[c];
                    }
                }
            }
        }
        h
    }
}

/// Efron NLPL of `beta` on design `x` and its gradient in β. No penalty.
pub fn neg_log_partial_likelihood(
    beta: &Array1<f64>,
    x: &Array2<f64>,
    times: &[f64],
    events: &[bool],
) -> Result<(f64, Array1<f64>), CoxError> {
    if x.nrows() != times.len() || x.ncols() != beta.len() {
        return Err(CoxError::Shape(format!(
            "design {:?} vs beta {} / {} times",
            x.dim(),
            beta.len(),
            times.len()
        )));
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(CoxError::NonFinite);
    }
    let rs = RiskSets::new(times, events)?;
    let (v, g_eta) = rs.nll(x.dot(beta).view());
    Ok((v, x.t().dot(&g_eta)))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Penalty {
    pub l1: f64,
    pub l2: f64,
}

impl Penalty {
    pub const NONE: Penalty = Penalty { l1: 0.0, l2: 0.0 };

    pub fn new(l1: f64, l2: f64) -> Self {
        Self { l1, l2 }
    }

    pub fn is_zero(&self) -> bool {
        self.l1 == 0.0 && self.l2 == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iter: usize,
    pub rel_tol: f64,
    pub step_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            rel_tol: 1e-9,
            step_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Penalized objective at the solution.
    pub objective: f64,
    /// Unpenalized Efron NLPL at the solution.
    pub neg_log_partial_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every accepted iterate, starting at β = 0.
    #[serde(skip)]
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxModel {
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    pub penalty: Penalty,
    pub baseline: CumHazardFn,
    /// Inverse observed information; present for unpenalized fits only.
    pub covariance: Option<Array2<f64>>,
    pub diagnostics: FitDiagnostics,
}

struct Problem<'a> {
    x: &'a Array2<f64>,
    rs: RiskSets,
    n: f64,
    penalty: Penalty,
}

impl Problem<'_> {
    /// Smooth part: NLPL/n + (l2/2)‖β‖², with gradient.
    fn smooth(&self, beta: &Array1<f64>) -> (f64, Array1<f64>) {
        let (v, g_eta) = self.rs.nll(self.x.dot(beta).view());
        let mut g = self.x.t().dot(&g_eta) / self.n;
        g.scaled_add(self.penalty.l2, beta);
        (v / self.n + 0.5 * self.penalty.l2 * beta.dot(beta), g)
    }

    fn objective(&self, beta: &Array1<f64>) -> f64 {
        self.smooth(beta).0 + self.penalty.l1 * beta.iter().map(|b| b.abs()).sum::<f64>()
    }
}

fn soft_threshold(v: f64, k: f64) -> f64 {
    if v > k {
        v - k
    } else if v < -k {
        v + k
    } else {
        0.0
    }
}

fn converged(prev: f64, cur: f64, step: f64, opts: &FitOptions) -> bool {
    (prev - cur).abs() <= opts.rel_tol * prev.abs().max(f64::MIN_POSITIVE) || step < opts.step_tol
}

fn newton(pb: &Problem, opts: &FitOptions, diag: &mut FitDiagnostics) -> Array1<f64> {
    let p = pb.x.ncols();
    let mut beta = Array1::<f64>::zeros(p);
    let (mut f, mut g) = pb.smooth(&beta);
    diag.trace.push(f);
    for it in 1..=opts.max_iter {
        diag.iterations = it;
        let mut h = pb.rs.hessian(pb.x, pb.x.dot(&beta).view()) / pb.n;
        for d in 0..p {
            h[[d, d]] += pb.penalty.l2;
        }
        let dir = match cholesky(&h) {
            Some(l) => cholesky_solve(&l, &g),
            None => {
                // information numerically singular (typically separation):
                // gradient step scaled by the mean curvature
                let scale = (0..p).map(|d| h[[d, d]].abs()).sum::<f64>() / p as f64;
                &g / scale.max(1e-300)
            }
        };
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &beta - &(&dir * t);
            let (fc, gc) = pb.smooth(&cand);
            if fc.is_finite() && fc <= f {
                accepted = Some((cand, fc, gc));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, fc, gc)) = accepted else {
            // no descent possible at machine precision
            diag.converged = g.iter().all(|v| v.abs() < 1e-6);
            break;
        };
        let step = (&cand - &beta).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        // a flat objective with steps that stay large means the likelihood is
        // monotone (separation); keep stepping so the limit check trips
        let bmax = cand.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let done = converged(f, fc, step, opts) && step < 1e-3 * (1.0 + bmax);
        beta = cand;
        f = fc;
        g = gc;
        diag.trace.push(f);
        if done {
            diag.converged = true;
            break;
        }
        if beta.iter().any(|b| b.abs() > SEPARATION_LIMIT) {
            break;
        }
    }
    beta
}

/// Monotone FISTA with backtracking and restart on rejected momentum steps.
fn proximal_gradient(pb: &Problem, opts: &FitOptions, diag: &mut FitDiagnostics) -> Array1<f64> {
    let p = pb.x.ncols();
    let l1 = pb.penalty.l1;
    let mut beta = Array1::<f64>::zeros(p);
    let mut fobj = pb.objective(&beta);
    diag.trace.push(fobj);
    let mut y = beta.clone();
    let mut t_mom = 1.0f64;
    let mut step = 1.0f64;

    for it in 1..=opts.max_iter {
        diag.iterations = it;
        let (gy, grad_y) = pb.smooth(&y);
        let mut s = step * 2.0;
        let (z, fz_smooth) = loop {
            let z: Array1<f64> = (&y - &(&grad_y * s)).mapv(|v| soft_threshold(v, s * l1));
            let dz = &z - &y;
            let (fz, _) = pb.smooth(&z);
            if fz.is_finite()
                && fz <= gy + grad_y.dot(&dz) + dz.dot(&dz) / (2.0 * s) + 1e-15 * gy.abs()
            {
                break (z, fz);
            }
            s *= 0.5;
            if s < 1e-20 {
                break (y.clone(), gy);
            }
        };
        step = s;
        let fz = fz_smooth + l1 * z.iter().map(|b| b.abs()).sum::<f64>();
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_mom * t_mom).sqrt());
        if fz <= fobj {
            let moved = (&z - &beta).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let done = converged(fobj, fz, moved, opts);
            let prev = std::mem::replace(&mut beta, z);
            fobj = fz;
            diag.trace.push(fobj);
            if done {
                diag.converged = true;
                break;
            }
            y = &beta + &((&beta - &prev) * ((t_mom - 1.0) / t_next));
            t_mom = t_next;
        } else {
            // momentum overshot: restart from the last accepted iterate
            y = beta.clone();
            t_mom = 1.0;
        }
        if beta.iter().any(|b| b.abs() > SEPARATION_LIMIT) {
            break;
        }
    }
    beta
}

/// Breslow cumulative baseline hazard for linear predictors `eta`:
/// `H₀(t) = Σ_{tᵢ ≤ t} dᵢ / Σ_{tⱼ ≥ tᵢ} exp(ηⱼ)`.
pub fn breslow_from_scores(
    times: &[f64],
    events: &[bool],
    eta: &[f64],
) -> Result<CumHazardFn, CoxError> {
    let rs = RiskSets::new(times, events)?;
    let mut denom = vec![0.0; rs.groups.len()];
    let mut acc = 0.0;
    for (g, &(st, en)) in rs.groups.iter().enumerate().rev() {
        for &i in &rs.order[st..en] {
            acc += eta[i].exp();
        }
        denom[g] = acc;
    }
    let mut knots = Vec::new();
    let mut values = Vec::new();
    let mut h = 0.0;
    for (g, &(st, en)) in rs.groups.iter().enumerate() {
        let d = rs.order[st..en].iter().filter(|&&i| events[i]).count();
        if d > 0 {
            h += d as f64 / denom[g];
            knots.push(times[rs.order[st]]);
            values.push(h);
        }
    }
    Ok(CumHazardFn::new(knots, values))
}

/// Fits a Cox model on a dense design.
pub fn fit_coxph(
    x: &Array2<f64>,
    times: &[f64],
    events: &[bool],
    names: &[String],
    penalty: Penalty,
    opts: &FitOptions,
) -> Result<CoxModel, CoxError> {
    if penalty.l1 < 0.0 || penalty.l2 < 0.0 || !penalty.l1.is_finite() || !penalty.l2.is_finite() {
        return Err(CoxError::NegativePenalty);
    }
    if x.nrows() != times.len() || names.len() != x.ncols() {
        return Err(CoxError::Shape(format!(
            "design {:?}, {} times, {} names",
            x.dim(),
            times.len(),
            names.len()
        )));
    }
    warn_if_unscaled(x, names);
    let rs = RiskSets::new(times, events)?;
    let pb = Problem {
        x,
        rs,
        n: times.len() as f64,
        penalty,
    };
    let mut diag = FitDiagnostics::default();
    let beta = if penalty.l1 == 0.0 {
        newton(&pb, opts, &mut diag)
    } else {
        proximal_gradient(&pb, opts, &mut diag)
    };

    if let Some(j) = (0..beta.len()).find(|&j| beta[j].abs() > SEPARATION_LIMIT) {
        return Err(CoxError::Separation {
            column: names[j].clone(),
            value: beta[j],
        });
    }
    if !diag.converged {
        log::warn!(
            "Cox fit stopped after {} iterations without converging",
            diag.iterations
        );
    }
    let eta = x.dot(&beta);
    let (nlpl, _) = pb.rs.nll(eta.view());
    diag.neg_log_partial_likelihood = nlpl;
    diag.objective = pb.objective(&beta);

    let covariance = if penalty.is_zero() {
        let h = pb.rs.hessian(x, eta.view());
        match spd_inverse(&h).filter(|c| c.iter().all(|v| v.is_finite())) {
            Some(c) => Some(c),
            None => return Err(singular_or_separated(x, &beta, names)),
        }
    } else {
        None
    };
    let baseline = breslow_from_scores(times, events, eta.as_slice().expect("contiguous"))?;
    Ok(CoxModel {
        names: names.to_vec(),
        beta: beta.to_vec(),
        penalty,
        baseline,
        covariance,
        diagnostics: diag,
    })
}

/// A flat likelihood at a coefficient worth more than `e^5` per standard
/// deviation means the optimum is at infinity: report it as separation.
fn singular_or_separated(x: &Array2<f64>, beta: &Array1<f64>, names: &[String]) -> CoxError {
    let n = x.nrows() as f64;
    let scaled = |j: usize| {
        let col = x.column(j);
        let mean = col.sum() / n;
        let sd = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        beta[j].abs() * sd
    };
    (0..beta.len())
        .filter(|&j| scaled(j) > 5.0)
        .max_by(|&a, &b| scaled(a).total_cmp(&scaled(b)))
        .map(|j| CoxError::Separation {
            column: names[j].clone(),
            value: beta[j],
        })
        .unwrap_or(CoxError::Singular)
}

/// Fits on the covariates of a complete (imputed, encoded) dataset.
pub fn fit_coxph_dataset(
    ds: &SurvivalDataset,
    penalty: Penalty,
    opts: &FitOptions,
) -> Result<CoxModel, CoxError> {
    ds.require_outcomes()?;
    let x = ds.covariate_matrix()?;
    fit_coxph(
        &x,
        ds.time(),
        ds.event(),
        &ds.covariate_names(),
        penalty,
        opts,
    )
}

fn warn_if_unscaled(x: &Array2<f64>, names: &[String]) {
    let n = x.nrows() as f64;
    for (j, name) in names.iter().enumerate() {
        let col = x.column(j);
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        if mean.abs() > 5.0 || var.sqrt() > 5.0 {
            log::warn!(
                "covariate `{name}` looks unstandardized (mean {mean:.2}, sd {:.2})",
                var.sqrt()
            );
        }
    }
}

impl CoxModel {
    pub fn linear_predictor(&self, x: ArrayView1<f64>) -> Result<f64, CoxError> {
        if x.len() != self.beta.len() {
            return Err(CoxError::Shape(format!(
                "expected {} covariates, got {}",
                self.beta.len(),
                x.len()
            )));
        }
        Ok(x.iter().zip(&self.beta).map(|(a, b)| a * b).sum())
    }

    pub fn risk_scores(&self, x: &Array2<f64>) -> Result<Vec<f64>, CoxError> {
        x.rows()
            .into_iter()
            .map(|r| self.linear_predictor(r))
            .collect()
    }

    /// Recomputes the Breslow baseline on other data with this model's β.
    pub fn breslow_baseline(
        &self,
        x: &Array2<f64>,
        times: &[f64],
        events: &[bool],
    ) -> Result<CumHazardFn, CoxError> {
        if !self.diagnostics.converged {
            return Err(CoxError::NotConverged);
        }
        let eta = self.risk_scores(x)?;
        breslow_from_scores(times, events, &eta)
    }

    /// `S(t | x) = exp(−H₀(t)·exp(xβ))` at the given ascending times.
    pub fn predict_survival(
        &self,
        x: ArrayView1<f64>,
        times: &[f64],
    ) -> Result<SurvivalCurve, CoxError> {
        if !self.diagnostics.converged {
            return Err(CoxError::NotConverged);
        }
        if times.windows(2).any(|w| w[1] < w[0]) {
            return Err(CoxError::UnsortedTimes);
        }
        let risk = self.linear_predictor(x)?.exp();
        let s = times
            .iter()
            .map(|&t| (-self.baseline.eval(t) * risk).exp())
            .collect();
        Ok(SurvivalCurve::new(times.to_vec(), s, Interpolation::Step))
    }

    /// Survival matrix (rows × times) for a design.
    pub fn survival_matrix(&self, x: &Array2<f64>, times: &[f64]) -> Result<Array2<f64>, CoxError> {
        survival_matrix_from_scores(&self.baseline, &self.risk_scores(x)?, times)
    }
}

pub(crate) fn survival_matrix_from_scores(
    baseline: &CumHazardFn,
    scores: &[f64],
    times: &[f64],
) -> Result<Array2<f64>, CoxError> {
    let h: Vec<f64> = baseline.eval_many(times);
    let mut out = Array2::zeros((scores.len(), times.len()));
    for (i, &s) in scores.iter().enumerate() {
        let r = s.exp();
        for (k, &hk) in h.iter().enumerate() {
            out[[i, k]] = (-hk * r).exp();
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldRow {
    pub variable: String,
    pub beta: f64,
    pub se: f64,
    pub hazard_ratio: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub p_value: f64,
}

/// Per-coefficient Wald statistics from the inverse observed information.
pub fn wald_stats(model: &CoxModel) -> Result<Vec<WaldRow>, CoxError> {
    if !model.penalty.is_zero() {
        return Err(CoxError::PenalizedInference);
    }
    if !model.diagnostics.converged {
        return Err(CoxError::NotConverged);
    }
    let cov = model.covariance.as_ref().ok_or(CoxError::Singular)?;
    let z = Normal::standard();
    Ok(model
        .names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let b = model.beta[j];
            let se = cov[[j, j]].sqrt();
            WaldRow {
                variable: name.clone(),
                beta: b,
                se,
                hazard_ratio: b.exp(),
                ci_lo: (b - Z_975 * se).exp(),
                ci_hi: (b + Z_975 * se).exp(),
                p_value: (2.0 * z.sf((b / se).abs())).min(1.0),
            }
        })
        .collect())
}

/// `variable,HR,CI_lo,CI_hi,p` table.
pub fn wald_table_csv(rows: &[WaldRow]) -> String {
    let mut s = String::from("variable,HR,CI_lo,CI_hi,p\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6e}\n",
            r.variable, r.hazard_ratio, r.ci_lo, r.ci_hi, r.p_value
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::impute::nelson_aalen;
    use crate::rng::rng_from;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    fn random_cohort(
        n: usize,
        p: usize,
        seed: u64,
        ties: bool,
    ) -> (Array2<f64>, Vec<f64>, Vec<bool>) {
        let mut rng = rng_from(seed);
        let x = Array2::from_shape_fn((n, p), |_| rng.sample::<f64, _>(StandardNormal));
        let beta: Vec<f64> = (0..p).map(|j| 0.5 - 0.3 * j as f64).collect();
        let mut times = Vec::with_capacity(n);
        let mut events = Vec::with_capacity(n);
        for i in 0..n {
            let eta: f64 = (0..p).map(|j| x[[i, j]] * beta[j]).sum();
            let t = -rng.random::<f64>().ln() / eta.exp();
            let c = -rng.random::<f64>().ln() * 2.0;
            let obs = t.min(c);
            times.push(if ties { (obs * 4.0).ceil() / 4.0 } else { obs });
            events.push(t <= c);
        }
        (x, times, events)
    }

    #[test]
    fn zero_beta_value_is_log_risk_set_sizes() {
        let times = [5.0, 1.0, 3.0, 4.0, 2.0];
        let events = [true, true, false, true, true];
        let x = Array2::from_shape_vec((5, 1), vec![0.3, -1.0, 2.0, 0.1, 0.7]).unwrap();
        let (v, _) = neg_log_partial_likelihood(&Array1::zeros(1), &x, &times, &events).unwrap();
        // events at t=1 (5 at risk), 2 (4), 4 (2), 5 (1)
        let want = 5f64.ln() + 4f64.ln() + 2f64.ln() + 1f64.ln();
        assert!((v - want).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (seed, ties) in [(1, false), (2, true), (3, true)] {
            let (x, t, e) = random_cohort(50, 3, seed, ties);
            let mut rng = rng_from(seed + 100);
            let beta: Array1<f64> = (0..3)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * 0.5)
                .collect();
            let (_, g) = neg_log_partial_likelihood(&beta, &x, &t, &e).unwrap();
            let eps = 1e-6;
            for j in 0..3 {
                let mut bp = beta.clone();
                bp[j] += eps;
                let mut bm = beta.clone();
                bm[j] -= eps;
                let fd = (neg_log_partial_likelihood(&bp, &x, &t, &e).unwrap().0
                    - neg_log_partial_likelihood(&bm, &x, &t, &e).unwrap().0)
                    / (2.0 * eps);
                let rel = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-8);
                assert!(rel < 1e-6, "seed {seed} j {j}: fd {fd} analytic {}", g[j]);
            }
        }
    }

    #[test]
    fn hessian_matches_finite_differences_of_gradient() {
        let (x, t, e) = random_cohort(60, 3, 9, true);
        let beta = Array1::from(vec![0.2, -0.4, 0.1]);
        let rs = RiskSets::new(&t, &e).unwrap();
        let h = rs.hessian(&x, x.dot(&beta).view());
        let eps = 1e-6;
        for j in 0..3 {
            let mut bp = beta.clone();
            bp[j] += eps;
            let mut bm = beta.clone();
            bm[j] -= eps;
            let gp = neg_log_partial_likelihood(&bp, &x, &t, &e).unwrap().1;
            let gm = neg_log_partial_likelihood(&bm, &x, &t, &e).unwrap().1;
            for r in 0..3 {
                let fd = (gp[r] - gm[r]) / (2.0 * eps);
                assert!((fd - h[[r, j]]).abs() < 1e-5 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn translation_invariant() {
        let (x, t, e) = random_cohort(40, 2, 4, true);
        let beta = Array1::from(vec![0.3, -0.2]);
        let shifted = &x + 7.5;
        let a = neg_log_partial_likelihood(&beta, &x, &t, &e).unwrap().0;
        let b = neg_log_partial_likelihood(&beta, &shifted, &t, &e)
            .unwrap()
            .0;
        assert!((a - b).abs() < 1e-9);
        assert!(matches!(
            neg_log_partial_likelihood(&beta, &x, &t, &vec![false; 40]),
            Err(CoxError::NoEvents)
        ));
    }

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|j| format!("x{j}")).collect()
    }

    #[test]
    fn large_l1_gives_exact_zeros() {
        let (x, t, e) = random_cohort(300, 4, 5, false);
        let m = fit_coxph(
            &x,
            &t,
            &e,
            &names(4),
            Penalty::new(10.0, 0.0),
            &FitOptions::default(),
        )
        .unwrap();
        assert!(m.beta.iter().all(|&b| b == 0.0));
        assert!(m.diagnostics.converged);
        assert!(m.covariance.is_none());
    }

    #[test]
    fn objective_decreases_every_step() {
        let (x, t, e) = random_cohort(400, 5, 6, true);
        for pen in [
            Penalty::new(0.008, 0.001),
            Penalty::new(0.05, 0.0),
            Penalty::NONE,
            Penalty::new(0.0, 0.1),
        ] {
            let m = fit_coxph(&x, &t, &e, &names(5), pen, &FitOptions::default()).unwrap();
            assert!(m.diagnostics.converged, "{pen:?}");
            for w in m.diagnostics.trace.windows(2) {
                assert!(w[1] <= w[0], "{pen:?}: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn penalized_fit_satisfies_optimality() {
        // KKT: |grad_j| <= l1 where beta_j = 0, grad_j = -l1*sign(beta_j) otherwise
        let (x, t, e) = random_cohort(500, 5, 7, false);
        let pen = Penalty::new(0.03, 0.001);
        let m = fit_coxph(&x, &t, &e, &names(5), pen, &FitOptions::default()).unwrap();
        let beta = Array1::from(m.beta.clone());
        let (_, g) = neg_log_partial_likelihood(&beta, &x, &t, &e).unwrap();
        let g = g / 500.0 + &beta * pen.l2;
        for j in 0..5 {
            if beta[j] == 0.0 {
                assert!(g[j].abs() <= pen.l1 + 1e-6);
            } else {
                assert!(
                    (g[j] + pen.l1 * beta[j].signum()).abs() < 1e-3,
                    "j {j}: {}",
                    g[j]
                );
            }
        }
    }

    #[test]
    fn unpenalized_gradient_vanishes() {
        let (x, t, e) = random_cohort(800, 3, 8, true);
        let m = fit_coxph(&x, &t, &e, &names(3), Penalty::NONE, &FitOptions::default()).unwrap();
        let (_, g) = neg_log_partial_likelihood(&Array1::from(m.beta.clone()), &x, &t, &e).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-6), "{g}");
    }

    #[test]
    fn breslow_reductions() {
        let (x, t, e) = random_cohort(100, 2, 10, true);
        let zero = breslow_from_scores(&t, &e, &vec![0.0; 100]).unwrap();
        let na = nelson_aalen(&t, &e).unwrap();
        assert_eq!(zero, na);

        // n=3 hand case with fixed beta = 1 on x = [0, 1, 2]
        let times = [1.0, 2.0, 3.0];
        let events = [true, false, true];
        let eta = [0.0, 1.0, 2.0];
        let h = breslow_from_scores(&times, &events, &eta).unwrap();
        let e1 = 1.0 + 1f64.exp() + 2f64.exp();
        let e3 = 2f64.exp();
        assert_eq!(h.knots(), &[1.0, 3.0]);
        assert!((h.values()[0] - 1.0 / e1).abs() < 1e-15);
        assert!((h.values()[1] - (1.0 / e1 + 1.0 / e3)).abs() < 1e-15);

        let m = fit_coxph(&x, &t, &e, &names(2), Penalty::NONE, &FitOptions::default()).unwrap();
        assert!(m.baseline.values().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn predictions_and_wald() {
        let (x, t, e) = random_cohort(500, 2, 11, false);
        let m = fit_coxph(&x, &t, &e, &names(2), Penalty::NONE, &FitOptions::default()).unwrap();
        let first = m.baseline.knots()[0];
        let grid = [first * 0.5, 0.5, 1.0, 2.0, 5.0];
        let lo = m
            .predict_survival(Array1::from(vec![-1.0, 0.0]).view(), &grid)
            .unwrap();
        let hi = m
            .predict_survival(Array1::from(vec![1.0, 0.0]).view(), &grid)
            .unwrap();
        assert_eq!(lo.survival[0], 1.0);
        assert!(lo.is_non_increasing() && hi.is_non_increasing());
        for k in 0..grid.len() {
            assert!(hi.survival[k] <= lo.survival[k]);
            assert!(hi.survival[k] > 0.0 && hi.survival[k] <= 1.0);
        }
        assert!(matches!(
            m.predict_survival(Array1::zeros(3).view(), &grid),
            Err(CoxError::Shape(_))
        ));
        assert!(matches!(
            m.predict_survival(Array1::zeros(2).view(), &[2.0, 1.0]),
            Err(CoxError::UnsortedTimes)
        ));

        let rows = wald_stats(&m).unwrap();
        let cov = m.covariance.as_ref().unwrap();
        let se0 = cov[[0, 0]].sqrt();
        assert!((rows[0].ci_lo - (m.beta[0] - 1.959963984540054 * se0).exp()).abs() < 1e-12);
        assert!((rows[0].ci_hi - (m.beta[0] + 1.959963984540054 * se0).exp()).abs() < 1e-12);
        assert!(rows
            .iter()
            .all(|r| r.ci_lo <= r.hazard_ratio && r.hazard_ratio <= r.ci_hi));

        let pen = fit_coxph(
            &x,
            &t,
            &e,
            &names(2),
            Penalty::new(0.01, 0.0),
            &FitOptions::default(),
        )
        .unwrap();
        assert!(matches!(
            wald_stats(&pen),
            Err(CoxError::PenalizedInference)
        ));
    }

    #[test]
    fn zero_coefficient_wald_row() {
        let mut m = {
            let (x, t, e) = random_cohort(200, 1, 12, false);
            fit_coxph(&x, &t, &e, &names(1), Penalty::NONE, &FitOptions::default()).unwrap()
        };
        m.beta[0] = 0.0;
        let r = &wald_stats(&m).unwrap()[0];
        assert_eq!(r.hazard_ratio, 1.0);
        assert!((r.p_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn separation_is_reported() {
        let n = 40;
        let x = Array2::from_shape_fn((n, 1), |(i, _)| i as f64);
        // higher x always fails first: perfect ordering
        let times: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
        let events = vec![true; n];
        let r = fit_coxph(
            &x,
            &times,
            &events,
            &names(1),
            Penalty::NONE,
            &FitOptions::default(),
        );
        assert!(matches!(r, Err(CoxError::Separation { .. })), "{r:?}");
    }
}
