//! Synthetic proportional-hazards cohorts with known ground truth.
//!
//! Event times follow a Weibull PH model,
//! `T = scale·(−ln U / exp(η))^{1/shape}`, censored by an independent
//! exponential whose rate is tuned by bisection to a target censored
//! fraction. Missingness is applied afterwards by logistic rules on columns
//! that are themselves never masked, so it is MAR by construction.

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::concordance_index;
use crate::rng::{derive, rng_from};
use crate::tabular::{ColumnSpec, DataError, Role, SurvivalDataset};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("spec JSON: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CovariateSpec {
    /// `mean + sd·z`, where `z` optionally loads on an earlier continuous
    /// column's standard score: `z = ρ·z_parent + √(1−ρ²)·ε`.
    Continuous {
        name: String,
        #[serde(default)]
        mean: f64,
        #[serde(default = "one")]
        sd: f64,
        #[serde(default)]
        beta: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        parent: Option<(String, f64)>,
    },
    Binary {
        name: String,
        p: f64,
        #[serde(default)]
        beta: f64,
    },
    /// The first level is the reference; `betas` has one entry per other level.
    Categorical {
        name: String,
        levels: Vec<String>,
        probs: Vec<f64>,
        betas: Vec<f64>,
    },
}

fn one() -> f64 {
    1.0
}

impl CovariateSpec {
    pub fn name(&self) -> &str {
        match self {
            CovariateSpec::Continuous { name, .. }
            | CovariateSpec::Binary { name, .. }
            | CovariateSpec::Categorical { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Weibull {
    pub shape: f64,
    pub scale: f64,
}

/// `P(missing) = logistic(intercept + Σ w·x + center_effect[c])` for one column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarRule {
    pub column: String,
    pub intercept: f64,
    /// Predictor columns (continuous or binary, never masked) and weights.
    #[serde(default)]
    pub weights: Vec<(String, f64)>,
    /// One additive effect per center; empty means none.
    #[serde(default)]
    pub center_effects: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub n: usize,
    pub seed: u64,
    pub covariates: Vec<CovariateSpec>,
    pub baseline: Weibull,
    /// Target fraction of censored rows, in `[0, 1)`.
    pub censoring_fraction: f64,
    #[serde(default)]
    pub missingness: Vec<MarRule>,
    /// Number of centers; 0 omits the center column.
    #[serde(default)]
    pub n_centers: usize,
    #[serde(default = "default_time_name")]
    pub time_name: String,
    #[serde(default = "default_event_name")]
    pub event_name: String,
}

fn default_time_name() -> String {
    "time".into()
}

fn default_event_name() -> String {
    "event".into()
}

/// What the generator knows and the data do not show.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// (encoded column name, coefficient); dummies named `{column}_{level}`.
    pub beta: Vec<(String, f64)>,
    pub ids: Vec<String>,
    pub linear_predictor: Vec<f64>,
    /// Uncensored event times.
    pub event_times: Vec<f64>,
    pub censoring_rate: f64,
    pub censored_fraction: f64,
    /// C-index of the true linear predictor on the generated outcomes.
    pub oracle_c: f64,
}

impl GroundTruth {
    pub fn to_json_string(&self) -> Result<String, SynthError> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl GeneratorSpec {
    pub fn from_json_str(s: &str) -> Result<Self, SynthError> {
        let spec: GeneratorSpec = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json_string(&self) -> Result<String, SynthError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Spec(m));
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        if !(0.0..1.0).contains(&self.censoring_fraction) {
            return bad(format!(
                "censoring fraction {} outside [0, 1)",
                self.censoring_fraction
            ));
        }
        if !(self.baseline.shape > 0.0 && self.baseline.scale > 0.0) {
            return bad("Weibull shape and scale must be positive".into());
        }
        let mut seen: Vec<&str> = Vec::new();
        for c in &self.covariates {
            if seen.contains(&c.name()) || c.name() == "center" || c.name() == "id" {
                return bad(format!("duplicate or reserved column name `{}`", c.name()));
            }
            match c {
                CovariateSpec::Continuous { sd, parent, .. } => {
                    if !(*sd > 0.0) {
                        return bad(format!("`{}`: sd must be positive", c.name()));
                    }
                    if let Some((p, rho)) = parent {
                        let ok = self.covariates.iter().take_while(|o| o.name() != c.name()).any(
                            |o| matches!(o, CovariateSpec::Continuous { name, .. } if name == p),
                        );
                        if !ok || rho.abs() > 1.0 {
                            return bad(format!(
                                "`{}`: parent must be an earlier continuous column and |ρ| ≤ 1",
                                c.name()
                            ));
                        }
                    }
                }
                CovariateSpec::Binary { p, .. } => {
                    if !(0.0..=1.0).contains(p) {
                        return bad(format!("`{}`: probability outside [0, 1]", c.name()));
                    }
                }
                CovariateSpec::Categorical {
                    levels,
                    probs,
                    betas,
                    ..
                } => {
                    if levels.len() < 2
                        || probs.len() != levels.len()
                        || betas.len() + 1 != levels.len()
                    {
                        return bad(format!("`{}`: need ≥2 levels, one probability per level, one beta per non-reference level", c.name()));
                    }
                    if probs.iter().any(|p| *p < 0.0)
                        || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9
                    {
                        return bad(format!(
                            "`{}`: probabilities must be non-negative and sum to 1",
                            c.name()
                        ));
                    }
                }
            }
            seen.push(c.name());
        }
        let masked: Vec<&str> = self.missingness.iter().map(|r| r.column.as_str()).collect();
        for rule in &self.missingness {
            if !seen.contains(&rule.column.as_str()) {
                return bad(format!(
                    "missingness rule for unknown column `{}`",
                    rule.column
                ));
            }
            if masked.iter().filter(|&&m| m == rule.column).count() > 1 {
                return bad(format!("two missingness rules for `{}`", rule.column));
            }
            for (w, _) in &rule.weights {
                let spec = self.covariates.iter().find(|c| c.name() == w);
                match spec {
                    None => {
                        return bad(format!(
                            "rule for `{}` uses unknown predictor `{w}`",
                            rule.column
                        ))
                    }
                    Some(CovariateSpec::Categorical { .. }) => {
                        return bad(format!(
                            "rule for `{}`: predictor `{w}` must be continuous or binary",
                            rule.column
                        ))
                    }
                    _ => {}
                }
                if masked.contains(&w.as_str()) {
                    return bad(format!(
                        "rule for `{}` conditions on `{w}`, which is itself masked",
                        rule.column
                    ));
                }
            }
            if !rule.center_effects.is_empty() && rule.center_effects.len() != self.n_centers {
                return bad(format!(
                    "rule for `{}`: need one center effect per center",
                    rule.column
                ));
            }
        }
        Ok(())
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Smallest exponential censoring rate whose realized censored fraction
/// reaches `target`, given event times and unit-exponential draws `e`
/// (censoring time `e/λ`).
fn tune_censoring(t: &[f64], e: &[f64], target: f64) -> f64 {
    if target <= 0.0 {
        return 0.0;
    }
    let frac = |rate: f64| {
        t.iter()
            .zip(e)
            .filter(|(ti, ei)| **ei / rate < **ti)
            .count() as f64
            / t.len() as f64
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    while frac(hi) < target {
        hi *= 2.0;
        if hi > 1e12 {
            break;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if frac(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Draws a cohort. Independent streams (offsets 1–5) for covariates, event
/// times, censoring, centers and masks, so editing one part of a spec does
/// not reshuffle the others.
pub fn generate(spec: &GeneratorSpec) -> Result<(SurvivalDataset, GroundTruth), SynthError> {
    spec.validate()?;
    let n = spec.n;
    let mut cov_rng = rng_from(derive(spec.seed, 1));
    let mut time_rng = rng_from(derive(spec.seed, 2));
    let mut cens_rng = rng_from(derive(spec.seed, 3));
    let mut center_rng = rng_from(derive(spec.seed, 4));
    let mut mask_rng = rng_from(derive(spec.seed, 5));

    let p = spec.covariates.len();
    let mut values = Array2::<f64>::zeros((n, p));
    let mut std_scores: Vec<Option<Vec<f64>>> = vec![None; p];
    let mut beta = Vec::new();
    let mut eta = vec![0.0; n];
    let mut columns = Vec::with_capacity(p + 1);

    for (j, c) in spec.covariates.iter().enumerate() {
        match c {
            CovariateSpec::Continuous {
                name,
                mean,
                sd,
                beta: b,
                parent,
            } => {
                let parent_z = parent.as_ref().map(|(pn, rho)| {
                    let k = spec
                        .covariates
                        .iter()
                        .position(|o| o.name() == pn)
                        .expect("validated");
                    (std_scores[k].clone().expect("parent precedes child"), *rho)
                });
                let z: Vec<f64> = (0..n)
                    .map(|i| {
                        let e: f64 = StandardNormal.sample(&mut cov_rng);
                        match &parent_z {
                            Some((pz, rho)) => rho * pz[i] + (1.0 - rho * rho).sqrt() * e,
                            None => e,
                        }
                    })
                    .collect();
                for i in 0..n {
                    values[[i, j]] = mean + sd * z[i];
                    eta[i] += b * values[[i, j]];
                }
                std_scores[j] = Some(z);
                beta.push((name.clone(), *b));
                columns.push(ColumnSpec::continuous(name));
            }
            CovariateSpec::Binary {
                name,
                p: prob,
                beta: b,
            } => {
                for i in 0..n {
                    let v = if cov_rng.random::<f64>() < *prob {
                        1.0
                    } else {
                        0.0
                    };
                    values[[i, j]] = v;
                    eta[i] += b * v;
                }
                beta.push((name.clone(), *b));
                columns.push(ColumnSpec::binary(name));
            }
            CovariateSpec::Categorical {
                name,
                levels,
                probs,
                betas,
            } => {
                for i in 0..n {
                    let u: f64 = cov_rng.random();
                    let mut acc = 0.0;
                    let mut k = levels.len() - 1;
                    for (l, pr) in probs.iter().enumerate() {
                        acc += pr;
                        if u < acc {
                            k = l;
                            break;
                        }
                    }
                    values[[i, j]] = k as f64;
                    if k > 0 {
                        eta[i] += betas[k - 1];
                    }
                }
                for (l, b) in levels.iter().skip(1).zip(betas) {
                    beta.push((format!("{name}_{l}"), *b));
                }
                columns.push(ColumnSpec::categorical(name, levels.clone()));
            }
        }
    }

    let Weibull { shape, scale } = spec.baseline;
    let event_times: Vec<f64> = eta
        .iter()
        .map(|&e| {
            let u: f64 = time_rng.random::<f64>().max(f64::MIN_POSITIVE);
            scale * (-u.ln() / e.exp()).powf(1.0 / shape)
        })
        .collect();
    let unit: Vec<f64> = (0..n).map(|_| Exp1.sample(&mut cens_rng)).collect();
    let rate = tune_censoring(&event_times, &unit, spec.censoring_fraction);
    let mut time = Vec::with_capacity(n);
    let mut event = Vec::with_capacity(n);
    for i in 0..n {
        let c = if rate > 0.0 {
            unit[i] / rate
        } else {
            f64::INFINITY
        };
        time.push(event_times[i].min(c));
        event.push(event_times[i] <= c);
    }
    let censored_fraction = event.iter().filter(|&&e| !e).count() as f64 / n as f64;

    let centers: Vec<usize> = (0..n)
        .map(|_| {
            if spec.n_centers > 0 {
                center_rng.random_range(0..spec.n_centers)
            } else {
                0
            }
        })
        .collect();
    let mut missing = Array2::<bool>::from_elem((n, p), false);
    for rule in &spec.missingness {
        let j = spec
            .covariates
            .iter()
            .position(|c| c.name() == rule.column)
            .expect("validated");
        let preds: Vec<(usize, f64)> = rule
            .weights
            .iter()
            .map(|(w, b)| {
                (
                    spec.covariates
                        .iter()
                        .position(|c| c.name() == w)
                        .expect("validated"),
                    *b,
                )
            })
            .collect();
        for i in 0..n {
            let mut lin = rule.intercept;
            for &(k, b) in &preds {
                lin += b * values[[i, k]];
            }
            if !rule.center_effects.is_empty() {
                lin += rule.center_effects[centers[i]];
            }
            missing[[i, j]] = mask_rng.random::<f64>() < logistic(lin);
        }
    }

    if spec.n_centers > 0 {
        let levels: Vec<String> = (1..=spec.n_centers).map(|c| format!("C{c}")).collect();
        columns.push(ColumnSpec::categorical("center", levels).with_role(Role::Center));
        let mut v = Array2::<f64>::zeros((n, p + 1));
        v.slice_mut(ndarray::s![.., ..p]).assign(&values);
        for i in 0..n {
            v[[i, p]] = centers[i] as f64;
        }
        let mut m = Array2::<bool>::from_elem((n, p + 1), false);
        m.slice_mut(ndarray::s![.., ..p]).assign(&missing);
        values = v;
        missing = m;
    }

    let width = n.to_string().len().max(4);
    let ids: Vec<String> = (1..=n).map(|i| format!("P{i:0width$}")).collect();
    let ds = SurvivalDataset::new(columns, values, missing, time, event)?
        .with_ids(ids.clone())?
        .with_outcome_names(&spec.time_name, &spec.event_name);
    let oracle_c = concordance_index(ds.time(), ds.event(), &eta).unwrap_or(f64::NAN);
    let truth = GroundTruth {
        beta,
        ids,
        linear_predictor: eta,
        event_times,
        censoring_rate: rate,
        censored_fraction,
        oracle_c,
    };
    Ok((ds, truth))
}

/// Number of rows in [`ensure_like`].
pub const ENSURE_LIKE_ROWS: usize = 3921;
/// Number of events the cohort is shaped after.
pub const ENSURE_LIKE_EVENTS: usize = 2308;

/// Canned spec: 3921 rows, 34 encoded covariates (22 continuous, 6 binary,
/// 3 three-level categoricals), about 59% events, median follow-up about 30
/// time units, five centers and MAR gaps in eight columns.
pub fn ensure_like_spec(seed: u64) -> GeneratorSpec {
    let mut covariates = Vec::new();
    // continuous: a handful of informative columns, the rest weak or null
    let cont_betas = [
        0.60, -0.48, 0.42, 0.34, -0.28, 0.22, 0.17, -0.14, 0.11, 0.08, 0.0, 0.0, 0.0, 0.0, 0.0,
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
    ];
    for (k, b) in cont_betas.iter().enumerate() {
        let parent = match k {
            // strongly tied to x01: exercises correlation pruning
            11 => Some(("x01".to_string(), 0.85)),
            12 => Some(("x03".to_string(), 0.5)),
            _ => None,
        };
        covariates.push(CovariateSpec::Continuous {
            name: format!("x{:02}", k + 1),
            mean: 0.0,
            sd: 1.0,
            beta: *b,
            parent,
        });
    }
    let bin = [
        (0.45, 0.5),
        (0.3, -0.35),
        (0.2, 0.28),
        (0.5, 0.0),
        (0.15, 0.0),
        (0.6, 0.14),
    ];
    for (k, (p, b)) in bin.iter().enumerate() {
        covariates.push(CovariateSpec::Binary {
            name: format!("b{}", k + 1),
            p: *p,
            beta: *b,
        });
    }
    let cats = [
        ("stage", vec![0.4, 0.35, 0.25], vec![0.42, 0.84]),
        ("grade", vec![0.5, 0.3, 0.2], vec![0.2, 0.42]),
        ("site", vec![0.34, 0.33, 0.33], vec![0.0, 0.0]),
    ];
    for (name, probs, betas) in cats {
        covariates.push(CovariateSpec::Categorical {
            name: name.into(),
            levels: vec!["L1".into(), "L2".into(), "L3".into()],
            probs,
            betas,
        });
    }
    let center_effects = vec![-0.6, -0.2, 0.0, 0.3, 0.6];
    let rule = |col: &str, intercept: f64, w: Vec<(&str, f64)>| MarRule {
        column: col.into(),
        intercept,
        weights: w.into_iter().map(|(n, b)| (n.to_string(), b)).collect(),
        center_effects: center_effects.clone(),
    };
    let missingness = vec![
        rule("x04", -2.6, vec![("x02", 0.4)]),
        rule("x06", -2.2, vec![("b1", 0.5)]),
        rule("x09", -2.0, vec![("x02", -0.3)]),
        rule("x14", -1.5, vec![("x05", 0.5)]),
        rule("x15", -1.8, vec![]),
        rule("x18", -2.4, vec![("b2", 0.6)]),
        rule("x20", -1.2, vec![("x07", 0.3)]),
        rule("b4", -2.5, vec![("x05", 0.3)]),
    ];
    GeneratorSpec {
        n: ENSURE_LIKE_ROWS,
        seed,
        covariates,
        baseline: Weibull {
            shape: 1.1,
            scale: 160.0,
        },
        censoring_fraction: 1.0 - ENSURE_LIKE_EVENTS as f64 / ENSURE_LIKE_ROWS as f64,
        missingness,
        n_centers: 5,
        time_name: "dfs_months".into(),
        event_name: "dfs_event".into(),
    }
}

/// Cohort shaped like the disease-free-survival study data.
pub fn ensure_like(seed: u64) -> (SurvivalDataset, GroundTruth) {
    generate(&ensure_like_spec(seed)).expect("canned spec is valid")
}
