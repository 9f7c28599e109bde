//! Nelson-Aalen outcome transform, chained-equations imputation and Rubin pooling.
//!
//! Each incomplete covariate is imputed from every other covariate plus the
//! event indicator and the Nelson-Aalen cumulative hazard at the subject's
//! follow-up time. The per-column model is a Bayesian normal linear regression:
//! coefficients and residual scale are drawn from their posterior before the
//! missing cells are drawn, so dummy columns receive unrounded continuous values.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng as _;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

use crate::curve::CumHazardFn;
use crate::linalg::{cholesky, spd_inverse};
use crate::rng::{self, rng_from, Rng};
use crate::tabular::{ColumnKind, DataError, SurvivalDataset};

/// Diagonal jitter on the imputation normal equations.
pub const RIDGE: f64 = 1e-6;
pub const DEFAULT_ITERATIONS: usize = 10;

#[derive(Debug, Error)]
pub enum ImputeError {
    #[error("no observed events; cumulative hazard undefined")]
    NoEvents,
    #[error("input is empty")]
    Empty,
    #[error("negative or non-finite time {0}")]
    BadTime(f64),
    #[error("column `{0}` has no observed cells")]
    AllMissing(String),
    #[error("column `{0}` is categorical; dummy-encode before imputing")]
    Categorical(String),
    #[error("number of imputations must be at least {min}, got {got}")]
    TooFewImputations { min: usize, got: usize },
    #[error("estimates and variances differ in length")]
    LengthMismatch,
    #[error("within-imputation variances must be positive")]
    NonPositiveVariance,
    #[error("imputation model for `{0}` is singular")]
    Singular(String),
    #[error("imputer was fitted on different covariates")]
    ColumnMismatch,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Nelson-Aalen cumulative hazard `H(t) = Σ_{tᵢ ≤ t} dᵢ / nᵢ`.
pub fn nelson_aalen(times: &[f64], events: &[bool]) -> Result<CumHazardFn, ImputeError> {
    if times.is_empty() || times.len() != events.len() {
        return Err(ImputeError::Empty);
    }
    if let Some(&t) = times.iter().find(|t| !(**t >= 0.0 && t.is_finite())) {
        return Err(ImputeError::BadTime(t));
    }
    if !events.iter().any(|&e| e) {
        return Err(ImputeError::NoEvents);
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut knots = Vec::new();
    let mut values = Vec::new();
    let mut at_risk = times.len();
    let mut h = 0.0;
    let mut k = 0;
    while k < order.len() {
        let t = times[order[k]];
        let mut d = 0;
        let mut leaving = 0;
        while k < order.len() && times[order[k]] == t {
            d += events[order[k]] as usize;
            leaving += 1;
            k += 1;
        }
        if d > 0 {
            h += d as f64 / at_risk as f64;
            knots.push(t);
            values.push(h);
        }
        at_risk -= leaving;
    }
    Ok(CumHazardFn::new(knots, values))
}

/// Posterior-mean regression for one column, used to impute new rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnModel {
    pub column: String,
    /// Intercept, then one coefficient per other covariate, then event, then H(t).
    pub coefficients: Vec<f64>,
    pub residual_sd: f64,
}

/// Imputation state fitted on one dataset and reusable on others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiceImputer {
    pub columns: Vec<String>,
    pub means: Vec<f64>,
    pub visit_order: Vec<usize>,
    pub iterations: usize,
    pub hazard: CumHazardFn,
    pub models: Vec<ColumnModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationProvenance {
    pub seed: u64,
    pub m: usize,
    pub iterations: usize,
    pub visit_order: Vec<String>,
    pub chain_seeds: Vec<u64>,
    pub ridge: f64,
}

#[derive(Debug, Clone)]
pub struct ImputationSet {
    pub datasets: Vec<SurvivalDataset>,
    pub provenance: ImputationProvenance,
}

impl ImputationSet {
    /// Writes `{stem}_{k}.csv` for k = 1..=m plus `{stem}_provenance.json`.
    pub fn write_dir(
        &self,
        dir: &Path,
        stem: &str,
    ) -> Result<Vec<std::path::PathBuf>, ImputeError> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for (k, ds) in self.datasets.iter().enumerate() {
            let p = dir.join(format!("{stem}_{}.csv", k + 1));
            ds.write_csv_file(&p)?;
            written.push(p);
        }
        let p = dir.join(format!("{stem}_provenance.json"));
        std::fs::write(
            &p,
            serde_json::to_string_pretty(&self.provenance).expect("serializable"),
        )?;
        written.push(p);
        Ok(written)
    }
}

/// Working copy of covariates plus the two outcome-derived predictors.
struct Workspace {
    x: Array2<f64>,
    miss: Array2<bool>,
    aux: Array2<f64>,
}

impl Workspace {
    fn design_row(&self, i: usize, target: usize, out: &mut [f64]) {
        let p = self.x.ncols();
        out[0] = 1.0;
        let mut k = 1;
        for j in 0..p {
            if j != target {
                out[k] = self.x[[i, j]];
                k += 1;
            }
        }
        out[k] = self.aux[[i, 0]];
        out[k + 1] = self.aux[[i, 1]];
    }

    fn design(&self, rows: &[usize], target: usize) -> Array2<f64> {
        let q = self.x.ncols() + 2;
        let mut d = Array2::zeros((rows.len(), q));
        let mut buf = vec![0.0; q];
        for (r, &i) in rows.iter().enumerate() {
            self.design_row(i, target, &mut buf);
            d.row_mut(r).assign(&ndarray::ArrayView1::from(&buf[..]));
        }
        d
    }
}

struct Posterior {
    beta_hat: Array1<f64>,
    cov_unscaled: Array2<f64>,
    ssr: f64,
    n_obs: usize,
}

fn fit_normal(design: &Array2<f64>, y: &Array1<f64>, name: &str) -> Result<Posterior, ImputeError> {
    let mut xtx = design.t().dot(design);
    for d in 0..xtx.nrows() {
        xtx[[d, d]] += RIDGE;
    }
    let v = spd_inverse(&xtx).ok_or_else(|| ImputeError::Singular(name.to_string()))?;
    let beta_hat = v.dot(&design.t().dot(y));
    let resid = y - &design.dot(&beta_hat);
    Ok(Posterior {
        beta_hat,
        cov_unscaled: v,
        ssr: resid.dot(&resid),
        n_obs: y.len(),
    })
}

fn draw_parameters(
    post: &Posterior,
    rng: &mut Rng,
    name: &str,
) -> Result<(Array1<f64>, f64), ImputeError> {
    let q = post.beta_hat.len();
    let df = (post.n_obs as f64 - q as f64).max(1.0);
    let g: f64 = ChiSquared::new(df).expect("positive df").sample(rng);
    let sigma = (post.ssr.max(0.0) / g).sqrt();
    let l = cholesky(&post.cov_unscaled).ok_or_else(|| ImputeError::Singular(name.to_string()))?;
    let z: Array1<f64> = (0..q)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok((&post.beta_hat + &(l.dot(&z) * sigma), sigma))
}

fn covariate_block(
    ds: &SurvivalDataset,
) -> Result<(Vec<usize>, Array2<f64>, Array2<bool>), ImputeError> {
    let idx = ds.covariate_indices();
    for &j in &idx {
        if matches!(ds.columns()[j].kind, ColumnKind::Categorical { .. }) {
            return Err(ImputeError::Categorical(ds.columns()[j].name.clone()));
        }
    }
    let x = ds.values().select(ndarray::Axis(1), &idx);
    let miss = ds.missing().select(ndarray::Axis(1), &idx);
    Ok((idx, x, miss))
}

fn aux_predictors(ds: &SurvivalDataset, hazard: &CumHazardFn) -> Array2<f64> {
    let n = ds.n_rows();
    let mut aux = Array2::zeros((n, 2));
    for i in 0..n {
        aux[[i, 0]] = if ds.event()[i] { 1.0 } else { 0.0 };
        aux[[i, 1]] = hazard.eval(ds.time()[i]);
    }
    aux
}

fn write_back(
    ds: &SurvivalDataset,
    idx: &[usize],
    x: &Array2<f64>,
) -> Result<SurvivalDataset, ImputeError> {
    let mut values = ds.values().clone();
    let mut missing = ds.missing().clone();
    for (k, &j) in idx.iter().enumerate() {
        for i in 0..ds.n_rows() {
            if missing[[i, j]] {
                values[[i, j]] = x[[i, k]];
                missing[[i, j]] = false;
            }
        }
    }
    Ok(ds.with_cells(values, missing)?)
}

/// Visit order: columns with missing cells, ascending missing count, schema order on ties.
fn visit_order(miss: &Array2<bool>) -> Vec<usize> {
    let counts: Vec<usize> = (0..miss.ncols())
        .map(|j| miss.column(j).iter().filter(|&&m| m).count())
        .collect();
    let mut order: Vec<usize> = (0..miss.ncols()).filter(|&j| counts[j] > 0).collect();
    order.sort_by_key(|&j| counts[j]);
    order
}

/// Runs one chain and returns the completed dataset together with an imputer
/// fitted on it.
pub fn fit_chain(
    ds: &SurvivalDataset,
    iterations: usize,
    seed: u64,
) -> Result<(SurvivalDataset, MiceImputer), ImputeError> {
    ds.require_outcomes()?;
    if ds.n_rows() == 0 {
        return Err(ImputeError::Empty);
    }
    let hazard = nelson_aalen(ds.time(), ds.event())?;
    let (idx, mut x, miss) = covariate_block(ds)?;
    let names: Vec<String> = idx.iter().map(|&j| ds.columns()[j].name.clone()).collect();
    let n = ds.n_rows();
    let p = idx.len();

    let mut means = vec![0.0; p];
    for j in 0..p {
        let obs: Vec<f64> = (0..n)
            .filter(|&i| !miss[[i, j]])
            .map(|i| x[[i, j]])
            .collect();
        if obs.is_empty() {
            return Err(ImputeError::AllMissing(names[j].clone()));
        }
        means[j] = obs.iter().sum::<f64>() / obs.len() as f64;
        for i in 0..n {
            if miss[[i, j]] {
                x[[i, j]] = means[j];
            }
        }
    }

    let order = visit_order(&miss);
    let aux = aux_predictors(ds, &hazard);
    let mut ws = Workspace { x, miss, aux };
    let mut rng = rng_from(seed);
    let q = p + 2;
    let mut buf = vec![0.0; q];

    for _ in 0..iterations {
        for &j in &order {
            let obs_rows: Vec<usize> = (0..n).filter(|&i| !ws.miss[[i, j]]).collect();
            let mis_rows: Vec<usize> = (0..n).filter(|&i| ws.miss[[i, j]]).collect();
            let design = ws.design(&obs_rows, j);
            let y: Array1<f64> = obs_rows.iter().map(|&i| ws.x[[i, j]]).collect();
            let post = fit_normal(&design, &y, &names[j])?;
            let (beta, sigma) = draw_parameters(&post, &mut rng, &names[j])?;
            for &i in &mis_rows {
                ws.design_row(i, j, &mut buf);
                let mean: f64 = buf.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
                let noise: f64 = rng.sample(StandardNormal);
                ws.x[[i, j]] = mean + sigma * noise;
            }
        }
    }

    // deterministic per-column models on the completed data, for new rows
    let all_rows: Vec<usize> = (0..n).collect();
    let mut models = Vec::with_capacity(p);
    for j in 0..p {
        let design = ws.design(&all_rows, j);
        let y = ws.x.column(j).to_owned();
        let post = fit_normal(&design, &y, &names[j])?;
        let sd = (post.ssr / (n as f64 - q as f64).max(1.0)).sqrt();
        models.push(ColumnModel {
            column: names[j].clone(),
            coefficients: post.beta_hat.to_vec(),
            residual_sd: sd,
        });
    }

    let completed = write_back(ds, &idx, &ws.x)?;
    let imputer = MiceImputer {
        columns: names,
        means,
        visit_order: order,
        iterations,
        hazard,
        models,
    };
    Ok((completed, imputer))
}

impl MiceImputer {
    /// Fills masked covariate cells of `ds` using only state fitted on the
    /// training data: training means as the start, then conditional-mean sweeps.
    pub fn transform(&self, ds: &SurvivalDataset) -> Result<SurvivalDataset, ImputeError> {
        ds.require_outcomes()?;
        let (idx, mut x, miss) = covariate_block(ds)?;
        let names: Vec<String> = idx.iter().map(|&j| ds.columns()[j].name.clone()).collect();
        if names != self.columns {
            return Err(ImputeError::ColumnMismatch);
        }
        let n = ds.n_rows();
        let p = idx.len();
        for j in 0..p {
            for i in 0..n {
                if miss[[i, j]] {
                    x[[i, j]] = self.means[j];
                }
            }
        }
        let aux = aux_predictors(ds, &self.hazard);
        let mut ws = Workspace { x, miss, aux };
        let mut order = visit_order(&ws.miss);
        // any column missing here, in the training order first
        order.sort_by_key(|j| {
            self.visit_order
                .iter()
                .position(|v| v == j)
                .unwrap_or(usize::MAX)
        });
        let mut buf = vec![0.0; p + 2];
        for _ in 0..self.iterations.max(1) {
            for &j in &order {
                let beta = &self.models[j].coefficients;
                for i in 0..n {
                    if ws.miss[[i, j]] {
                        ws.design_row(i, j, &mut buf);
                        ws.x[[i, j]] = buf.iter().zip(beta).map(|(a, b)| a * b).sum();
                    }
                }
            }
        }
        write_back(ds, &idx, &ws.x)
    }
}

/// Seed of imputation chain `k` under master seed `seed`.
pub fn chain_seed(seed: u64, k: usize) -> u64 {
    rng::derive(seed, rng::offsets::IMPUTATION_BASE + k as u64)
}

/// `m` independent chains of `iterations` sweeps. `m = 1` is single imputation.
pub fn mice_impute(
    ds: &SurvivalDataset,
    m: usize,
    iterations: usize,
    seed: u64,
) -> Result<ImputationSet, ImputeError> {
    if m < 1 {
        return Err(ImputeError::TooFewImputations { min: 1, got: m });
    }
    let chain_seeds: Vec<u64> = (0..m).map(|k| chain_seed(seed, k)).collect();
    let datasets = chain_seeds
        .par_iter()
        .map(|&s| fit_chain(ds, iterations, s).map(|(d, _)| d))
        .collect::<Result<Vec<_>, _>>()?;
    let (idx, _, miss) = covariate_block(ds)?;
    let visit = visit_order(&miss)
        .into_iter()
        .map(|k| ds.columns()[idx[k]].name.clone())
        .collect();
    Ok(ImputationSet {
        datasets,
        provenance: ImputationProvenance {
            seed,
            m,
            iterations,
            visit_order: visit,
            chain_seeds,
            ridge: RIDGE,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PooledEstimate {
    pub estimate: f64,
    pub total_variance: f64,
    pub within_variance: f64,
    pub between_variance: f64,
    /// `f64::INFINITY` when the between-imputation variance is zero.
    pub df: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub p_value: f64,
}

/// Above this many degrees of freedom the t quantile comes from its
/// Cornish-Fisher series; the incomplete-beta inversion loses accuracy and
/// can fail to terminate for very large df.
const T_SERIES_DF: f64 = 1e4;
/// Above this many degrees of freedom the t tail is taken as normal.
const T_NORMAL_DF: f64 = 1e8;

/// 0.975 quantile of Student's t with `df` degrees of freedom.
fn t_quantile_975(df: f64) -> f64 {
    if df < T_SERIES_DF {
        return StudentsT::new(0.0, 1.0, df)
            .expect("valid t")
            .inverse_cdf(0.975);
    }
    let z = Normal::standard().inverse_cdf(0.975);
    if !df.is_finite() {
        return z;
    }
    let (z2, v) = (z * z, df);
    let g1 = z * (z2 + 1.0) / 4.0;
    let g2 = z * ((5.0 * z2 + 16.0) * z2 + 3.0) / 96.0;
    let g3 = z * (((3.0 * z2 + 19.0) * z2 + 17.0) * z2 - 15.0) / 384.0;
    z + g1 / v + g2 / (v * v) + g3 / (v * v * v)
}

/// Upper tail `P(T > x)` of Student's t.
fn t_sf(x: f64, df: f64) -> f64 {
    if df < T_NORMAL_DF {
        StudentsT::new(0.0, 1.0, df).expect("valid t").sf(x)
    } else {
        Normal::standard().sf(x)
    }
}
/// Rubin's rules: `T = W + (1 + 1/m)·B`, Rubin's degrees of freedom
/// `(m − 1)(1 + 1/r)²` with `r = (1 + 1/m)B / W`, t-based CI and p-value.
pub fn pool_rubin(estimates: &[f64], variances: &[f64]) -> Result<PooledEstimate, ImputeError> {
    let m = estimates.len();
    if variances.len() != m {
        return Err(ImputeError::LengthMismatch);
    }
    if m < 2 {
        return Err(ImputeError::TooFewImputations { min: 2, got: m });
    }
    if variances.iter().any(|v| !(*v > 0.0)) {
        return Err(ImputeError::NonPositiveVariance);
    }
    let mf = m as f64;
    // identical estimates are pooled exactly; the float mean could drift by an ulp
    let identical = estimates.iter().all(|&e| e == estimates[0]);
    let estimate = if identical {
        estimates[0]
    } else {
        estimates.iter().sum::<f64>() / mf
    };
    let between = if identical {
        0.0
    } else {
        estimates
            .iter()
            .map(|e| (e - estimate) * (e - estimate))
            .sum::<f64>()
            / (mf - 1.0)
    };
    let within = variances.iter().sum::<f64>() / mf;
    let total = within + (1.0 + 1.0 / mf) * between;
    let df = if between > 0.0 {
        let r = (1.0 + 1.0 / mf) * between / within;
        (mf - 1.0) * (1.0 + 1.0 / r).powi(2)
    } else {
        f64::INFINITY
    };
    let se = total.sqrt();
    let q = t_quantile_975(df);
    let tail = 2.0 * t_sf((estimate / se).abs(), df);
    Ok(PooledEstimate {
        estimate,
        total_variance: total,
        within_variance: within,
        between_variance: between,
        df,
        ci_lo: estimate - q * se,
        ci_hi: estimate + q * se,
        p_value: tail.clamp(0.0, 1.0),
    })
}
