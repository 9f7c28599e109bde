//! Experiment orchestration: stratified splits, leakage-safe cross-validation,
//! grid search, multiple-imputation factor analysis and the train/test run.
//!
//! Seed derivation from the master seed `s`:
//!
//! - outer split `derive(s, SPLIT)`, inner folds `derive(s, FOLDS)`
//! - fold `k` preprocessing chain `derive_path(s, [FOLDS, k])`
//! - final preprocessing chain `derive(s, IMPUTATION_BASE)`
//! - model for family `f`, grid point `g`, fold `k`: `derive_path(s, [MODEL_INIT, f, g, k])`
//! - refit on the whole training split: `derive_path(s, [MODEL_INIT, f, FINAL_FIT])`
//! - bootstrap replicates `derive(s, BOOTSTRAP)`, shared by all models (paired)

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::coxph::{
    fit_coxph, fit_coxph_dataset, wald_stats, CoxError, CoxModel, FitOptions, Penalty,
};
use crate::deephit::{fit_deephit, DeepHitModel, DeepHitParams};
use crate::deepsurv::{fit_deepsurv, DeepSurvModel, DeepSurvParams};
use crate::impute::{fit_chain, mice_impute, pool_rubin, MiceImputer};
use crate::metrics::{
    bootstrap_ci, censoring_km, concordance_index, cumulative_dynamic_auc, default_auc_times,
    ibs_grid, integrated_brier, MetricError, MetricResult, TimeAuc, MIN_BOOTSTRAP,
};
use crate::preprocess::{
    apply_scaler, continuous_covariates, dummy_encode, fit_scaler, missing_rates, prune_correlated,
    EncodingMap, PruneReport, RemovedColumn, ScalerStats,
};
use crate::rng::{derive, derive_path, offsets, rng_from};
use crate::tabular::{DataError, SurvivalDataset};

/// Last path element of the seed used for the refit on the full training split.
pub const FINAL_FIT: u64 = u64::MAX;

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot split: {0}")]
    Split(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: BoxError,
    },
    #[error("every grid point failed for {family}")]
    AllConfigsFailed { family: ModelFamily },
    #[error("Cox fit on imputed dataset {index} failed: {source}")]
    ImputationFit {
        index: usize,
        #[source]
        source: CoxError,
    },
}

impl HarnessError {
    /// Errors caused by the inputs rather than by a computation.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            HarnessError::Config(_) | HarnessError::Split(_) | HarnessError::Data(_)
        )
    }
}

fn stage<E: Into<BoxError>>(name: impl Into<String>) -> impl FnOnce(E) -> HarnessError {
    let stage = name.into();
    move |e| HarnessError::Stage {
        stage,
        source: e.into(),
    }
}

// ---------------------------------------------------------------------------
// Splitting

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum InnerScheme {
    KFold { k: usize },
    Holdout { fraction: f64 },
}

/// Outer train/test split plus the inner validation scheme, both stratified
/// on the event indicator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitPlan {
    pub test_fraction: f64,
    pub inner: InnerScheme,
}

impl Default for SplitPlan {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            inner: InnerScheme::KFold { k: 5 },
        }
    }
}

impl SplitPlan {
    /// 80/20 outer split with an 85/15 inner holdout.
    pub fn holdout() -> Self {
        Self {
            test_fraction: 0.2,
            inner: InnerScheme::Holdout { fraction: 0.15 },
        }
    }
}

/// Row indices into the source dataset, each list sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub folds: Vec<Fold>,
}

fn strata(rows: &[usize], events: &[bool]) -> [Vec<usize>; 2] {
    let (ev, ce): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| events[i]);
    [ce, ev]
}

/// Moves `round(fraction · size)` rows of each stratum into the held-out part.
fn stratified_holdout(
    rows: &[usize],
    events: &[bool],
    fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut rng = rng_from(seed);
    let (mut keep, mut held) = (Vec::new(), Vec::new());
    for mut s in strata(rows, events) {
        s.shuffle(&mut rng);
        let k = (fraction * s.len() as f64).round() as usize;
        held.extend_from_slice(&s[..k]);
        keep.extend_from_slice(&s[k..]);
    }
    keep.sort_unstable();
    held.sort_unstable();
    (keep, held)
}

/// Deals shuffled strata round-robin into `k` folds; the dealing position
/// carries over between strata so fold sizes differ by at most one.
fn stratified_kfold(
    rows: &[usize],
    events: &[bool],
    k: usize,
    seed: u64,
) -> Result<Vec<Fold>, HarnessError> {
    if k < 2 {
        return Err(HarnessError::Config(format!("k-fold needs k ≥ 2, got {k}")));
    }
    let mut rng = rng_from(seed);
    let mut assign: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut pos = 0;
    for (label, mut s) in strata(rows, events).into_iter().enumerate() {
        if !s.is_empty() && s.len() < k {
            let what = if label == 1 {
                "events"
            } else {
                "censored rows"
            };
            return Err(HarnessError::Split(format!(
                "only {} {what} for {k} folds",
                s.len()
            )));
        }
        s.shuffle(&mut rng);
        for i in s {
            assign[pos % k].push(i);
            pos += 1;
        }
    }
    Ok((0..k)
        .map(|f| {
            let mut validation = assign[f].clone();
            validation.sort_unstable();
            let mut train: Vec<usize> = (0..k)
                .filter(|&g| g != f)
                .flat_map(|g| assign[g].iter().copied())
                .collect();
            train.sort_unstable();
            Fold { train, validation }
        })
        .collect())
}

/// Deterministic stratified partition of all rows.
pub fn split(ds: &SurvivalDataset, plan: &SplitPlan, seed: u64) -> Result<Partition, HarnessError> {
    ds.require_outcomes()?;
    if !(plan.test_fraction > 0.0 && plan.test_fraction < 1.0) {
        return Err(HarnessError::Config(format!(
            "test fraction {} outside (0, 1)",
            plan.test_fraction
        )));
    }
    let rows: Vec<usize> = (0..ds.n_rows()).collect();
    let (train, test) = stratified_holdout(
        &rows,
        ds.event(),
        plan.test_fraction,
        derive(seed, offsets::SPLIT),
    );
    if train.is_empty() || test.is_empty() {
        return Err(HarnessError::Split(format!(
            "{} rows give an empty train or test part",
            ds.n_rows()
        )));
    }
    let folds = match plan.inner {
        InnerScheme::KFold { k } => {
            stratified_kfold(&train, ds.event(), k, derive(seed, offsets::FOLDS))?
        }
        InnerScheme::Holdout { fraction } => {
            if !(fraction > 0.0 && fraction < 1.0) {
                return Err(HarnessError::Config(format!(
                    "holdout fraction {fraction} outside (0, 1)"
                )));
            }
            let (tr, va) =
                stratified_holdout(&train, ds.event(), fraction, derive(seed, offsets::FOLDS));
            if tr.is_empty() || va.is_empty() {
                return Err(HarnessError::Split(
                    "inner holdout leaves an empty part".into(),
                ));
            }
            vec![Fold {
                train: tr,
                validation: va,
            }]
        }
    };
    Ok(Partition { train, test, folds })
}

// ---------------------------------------------------------------------------
// Preprocessing pipeline

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Reference level per categorical column; the first declared level otherwise.
    pub reference_levels: BTreeMap<String, String>,
    /// Absolute Pearson threshold for correlation pruning; `None` disables it.
    pub prune_threshold: Option<f64>,
    pub mice_iterations: usize,
    pub standardize: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            reference_levels: BTreeMap::new(),
            prune_threshold: Some(0.7),
            mice_iterations: crate::impute::DEFAULT_ITERATIONS,
            standardize: true,
        }
    }
}

fn reference_map(levels: &BTreeMap<String, String>) -> HashMap<String, String> {
    levels.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
}

/// Encoding, scaling, pruning and imputation state fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub encoding: EncodingMap,
    pub scaler: Option<ScalerStats>,
    pub prune: Option<PruneReport>,
    pub imputer: MiceImputer,
    /// Covariate columns of the transformed data, in order.
    pub columns: Vec<String>,
}

impl Pipeline {
    /// Fits every step on `train` and returns the completed training data.
    pub fn fit(
        train: &SurvivalDataset,
        cfg: &PreprocessConfig,
        seed: u64,
    ) -> Result<(Pipeline, SurvivalDataset), HarnessError> {
        let (encoded, encoding) = dummy_encode(train, &reference_map(&cfg.reference_levels))
            .map_err(stage("encoding"))?;
        let (scaled, scaler) = if cfg.standardize {
            let stats =
                fit_scaler(&encoded, &continuous_covariates(&encoded)).map_err(stage("scaling"))?;
            (
                apply_scaler(&encoded, &stats).map_err(stage("scaling"))?,
                Some(stats),
            )
        } else {
            (encoded, None)
        };
        let (pruned, prune) = match cfg.prune_threshold {
            Some(th) => {
                let (d, r) = prune_correlated(&scaled, th, &missing_rates(&scaled))
                    .map_err(stage("pruning"))?;
                (d, Some(r))
            }
            None => (scaled, None),
        };
        let (completed, imputer) =
            fit_chain(&pruned, cfg.mice_iterations, seed).map_err(stage("imputation"))?;
        let columns = completed.covariate_names();
        Ok((
            Pipeline {
                encoding,
                scaler,
                prune,
                imputer,
                columns,
            },
            completed,
        ))
    }

    /// Applies the fitted steps to other rows without refitting anything.
    pub fn transform(&self, ds: &SurvivalDataset) -> Result<SurvivalDataset, HarnessError> {
        let mut out = self.encoding.apply(ds).map_err(stage("encoding"))?;
        if let Some(s) = &self.scaler {
            out = apply_scaler(&out, s).map_err(stage("scaling"))?;
        }
        if let Some(p) = &self.prune {
            out = p.apply(&out).map_err(stage("pruning"))?;
        }
        self.imputer.transform(&out).map_err(stage("imputation"))
    }
}

/// Model-ready design matrix with outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignData {
    pub x: Array2<f64>,
    pub times: Vec<f64>,
    pub events: Vec<bool>,
}

impl DesignData {
    pub fn from_dataset(ds: &SurvivalDataset) -> Result<Self, HarnessError> {
        Ok(Self {
            x: ds.covariate_matrix()?,
            times: ds.time().to_vec(),
            events: ds.event().to_vec(),
        })
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select(Axis(0), rows),
            times: rows.iter().map(|&i| self.times[i]).collect(),
            events: rows.iter().map(|&i| self.events[i]).collect(),
        }
    }
}

/// One preprocessed fold. `rows` are the only source rows any fit on this
/// fold has seen.
#[derive(Debug, Clone)]
pub struct FoldData {
    pub rows: Vec<usize>,
    pub validation_rows: Vec<usize>,
    pub pipeline: Pipeline,
    pub train: DesignData,
    pub validation: DesignData,
}

impl FoldData {
    pub fn names(&self) -> &[String] {
        &self.pipeline.columns
    }
}

/// Fits the pipeline on `train_rows` only and applies it to `validation_rows`.
pub fn prepare_fold(
    ds: &SurvivalDataset,
    train_rows: &[usize],
    validation_rows: &[usize],
    cfg: &PreprocessConfig,
    seed: u64,
) -> Result<FoldData, HarnessError> {
    let (pipeline, completed) = Pipeline::fit(&ds.select_rows(train_rows), cfg, seed)?;
    let validation = pipeline.transform(&ds.select_rows(validation_rows))?;
    Ok(FoldData {
        rows: train_rows.to_vec(),
        validation_rows: validation_rows.to_vec(),
        train: DesignData::from_dataset(&completed)?,
        validation: DesignData::from_dataset(&validation)?,
        pipeline,
    })
}

pub fn prepare_folds(
    ds: &SurvivalDataset,
    partition: &Partition,
    cfg: &PreprocessConfig,
    seed: u64,
) -> Result<Vec<FoldData>, HarnessError> {
    partition
        .folds
        .par_iter()
        .enumerate()
        .map(|(k, f)| {
            prepare_fold(
                ds,
                &f.train,
                &f.validation,
                cfg,
                derive_path(seed, &[offsets::FOLDS, k as u64]),
            )
            .map_err(|e| HarnessError::Stage {
                stage: format!("fold {k} preprocessing"),
                source: Box::new(e),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Model families

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelFamily {
    #[serde(rename = "coxph")]
    CoxPh,
    #[serde(rename = "deepsurv")]
    DeepSurv,
    #[serde(rename = "deephit")]
    DeepHit,
}

impl ModelFamily {
    pub const ALL: [ModelFamily; 3] = [
        ModelFamily::CoxPh,
        ModelFamily::DeepSurv,
        ModelFamily::DeepHit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelFamily::CoxPh => "coxph",
            ModelFamily::DeepSurv => "deepsurv",
            ModelFamily::DeepHit => "deephit",
        }
    }

    fn seed_index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelFamily {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = Self::ALL.iter().map(|f| f.name()).collect();
                HarnessError::Config(format!(
                    "unknown model `{s}`; valid names: {}",
                    valid.join(", ")
                ))
            })
    }
}

/// Elastic-net penalty weights for the Cox model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoxParams {
    pub l1: f64,
    pub l2: f64,
}

impl CoxParams {
    /// Disease-free survival configuration.
    pub fn dfs() -> Self {
        Self {
            l1: 0.008,
            l2: 0.001,
        }
    }

    /// Overall survival configuration.
    pub fn os() -> Self {
        Self {
            l1: 0.006,
            l2: 0.002,
        }
    }
}

impl Default for CoxParams {
    fn default() -> Self {
        Self::dfs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ModelParams {
    CoxPh(CoxParams),
    DeepSurv(DeepSurvParams),
    DeepHit(DeepHitParams),
}

impl ModelParams {
    pub fn default_for(family: ModelFamily) -> Self {
        match family {
            ModelFamily::CoxPh => ModelParams::CoxPh(CoxParams::default()),
            ModelFamily::DeepSurv => ModelParams::DeepSurv(DeepSurvParams::default()),
            ModelFamily::DeepHit => ModelParams::DeepHit(DeepHitParams::default()),
        }
    }

    pub fn family(&self) -> ModelFamily {
        match self {
            ModelParams::CoxPh(_) => ModelFamily::CoxPh,
            ModelParams::DeepSurv(_) => ModelFamily::DeepSurv,
            ModelParams::DeepHit(_) => ModelFamily::DeepHit,
        }
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("parameters serialize")
    }

    pub fn from_value(family: ModelFamily, v: Value) -> Result<Self, HarnessError> {
        let bad = |e: serde_json::Error| HarnessError::Config(format!("{family} parameters: {e}"));
        Ok(match family {
            ModelFamily::CoxPh => ModelParams::CoxPh(serde_json::from_value(v).map_err(bad)?),
            ModelFamily::DeepSurv => ModelParams::DeepSurv(serde_json::from_value(v).map_err(bad)?),
            ModelFamily::DeepHit => ModelParams::DeepHit(serde_json::from_value(v).map_err(bad)?),
        })
    }

    /// Learning rate used for tie-breaking; 0 for the Cox model.
    pub fn learning_rate(&self) -> f64 {
        match self {
            ModelParams::CoxPh(_) => 0.0,
            ModelParams::DeepSurv(p) => p.learning_rate,
            ModelParams::DeepHit(p) => p.learning_rate,
        }
    }

    /// Number of trainable parameters for `n_inputs` covariates.
    pub fn n_parameters(&self, n_inputs: usize) -> usize {
        let mlp = |hidden: &[usize], out: usize| {
            let mut sizes = vec![n_inputs];
            sizes.extend_from_slice(hidden);
            sizes.push(out);
            sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
        };
        match self {
            ModelParams::CoxPh(_) => n_inputs,
            ModelParams::DeepSurv(p) => mlp(&p.hidden, 1),
            ModelParams::DeepHit(p) => mlp(&p.hidden, p.n_bins),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family")]
pub enum FittedModel {
    #[serde(rename = "coxph")]
    CoxPh(CoxModel),
    #[serde(rename = "deepsurv")]
    DeepSurv(DeepSurvModel),
    #[serde(rename = "deephit")]
    DeepHit(DeepHitModel),
}

impl FittedModel {
    pub fn fit(
        params: &ModelParams,
        data: &DesignData,
        names: &[String],
        seed: u64,
    ) -> Result<Self, HarnessError> {
        let what = format!("{} fit", params.family());
        Ok(match params {
            ModelParams::CoxPh(p) => {
                let m = fit_coxph(
                    &data.x,
                    &data.times,
                    &data.events,
                    names,
                    Penalty::new(p.l1, p.l2),
                    &FitOptions::default(),
                )
                .map_err(stage(what))?;
                if !m.diagnostics.converged {
                    log::warn!(
                        "Cox fit stopped after {} iterations without converging",
                        m.diagnostics.iterations
                    );
                }
                FittedModel::CoxPh(m)
            }
            ModelParams::DeepSurv(p) => FittedModel::DeepSurv(
                fit_deepsurv(data.x.view(), &data.times, &data.events, names, p, seed)
                    .map_err(stage(what))?,
            ),
            ModelParams::DeepHit(p) => FittedModel::DeepHit(
                fit_deephit(data.x.view(), &data.times, &data.events, names, p, seed)
                    .map_err(stage(what))?,
            ),
        })
    }

    pub fn family(&self) -> ModelFamily {
        match self {
            FittedModel::CoxPh(_) => ModelFamily::CoxPh,
            FittedModel::DeepSurv(_) => ModelFamily::DeepSurv,
            FittedModel::DeepHit(_) => ModelFamily::DeepHit,
        }
    }

    /// Higher means earlier expected event.
    pub fn risk_scores(&self, x: &Array2<f64>) -> Result<Vec<f64>, HarnessError> {
        let what = format!("{} prediction", self.family());
        match self {
            FittedModel::CoxPh(m) => m.risk_scores(x).map_err(stage(what)),
            FittedModel::DeepSurv(m) => m.risk_scores(x.view()).map_err(stage(what)),
            FittedModel::DeepHit(m) => m.risk_scores(x.view()).map_err(stage(what)),
        }
    }

    /// Survival probabilities at ascending `times`, one row per subject.
    pub fn survival_matrix(
        &self,
        x: &Array2<f64>,
        times: &[f64],
    ) -> Result<Array2<f64>, HarnessError> {
        let what = format!("{} prediction", self.family());
        match self {
            FittedModel::CoxPh(m) => m.survival_matrix(x, times).map_err(stage(what)),
            FittedModel::DeepSurv(m) => m.survival_matrix(x.view(), times).map_err(stage(what)),
            FittedModel::DeepHit(m) => m.survival_matrix(x.view(), times).map_err(stage(what)),
        }
    }
}

// ---------------------------------------------------------------------------
// Grid search

/// Candidate configurations: explicit points plus the Cartesian product of
/// `axes`. Every candidate is merged onto the family defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpace {
    pub points: Vec<Map<String, Value>>,
    /// Axis name to a non-empty array of candidate values.
    pub axes: Map<String, Value>,
}

impl GridSpace {
    pub fn single(params: &ModelParams) -> Self {
        let point = match params.to_value() {
            Value::Object(m) => m,
            _ => unreachable!("parameters serialize to objects"),
        };
        Self {
            points: vec![point],
            axes: Map::new(),
        }
    }

    /// The standard disease-free and overall survival configurations.
    pub fn standard(family: ModelFamily) -> Self {
        let (dfs, os) = match family {
            ModelFamily::CoxPh => (
                ModelParams::CoxPh(CoxParams::dfs()),
                ModelParams::CoxPh(CoxParams::os()),
            ),
            ModelFamily::DeepSurv => (
                ModelParams::DeepSurv(DeepSurvParams::dfs()),
                ModelParams::DeepSurv(DeepSurvParams::os()),
            ),
            ModelFamily::DeepHit => (
                ModelParams::DeepHit(DeepHitParams::dfs()),
                ModelParams::DeepHit(DeepHitParams::os()),
            ),
        };
        let mut g = Self::single(&dfs);
        g.points.extend(Self::single(&os).points);
        g
    }

    pub fn expand(&self, family: ModelFamily) -> Result<Vec<ModelParams>, HarnessError> {
        let base = match ModelParams::default_for(family).to_value() {
            Value::Object(m) => m,
            _ => unreachable!("parameters serialize to objects"),
        };
        let mut candidates: Vec<Map<String, Value>> = self.points.clone();
        if !self.axes.is_empty() {
            let mut product = vec![Map::new()];
            for (name, values) in &self.axes {
                let values = match values {
                    Value::Array(v) if !v.is_empty() => v,
                    _ => {
                        return Err(HarnessError::Config(format!(
                            "grid axis `{name}` must be a non-empty array"
                        )))
                    }
                };
                product = product
                    .into_iter()
                    .flat_map(|p| {
                        values.iter().map(move |v| {
                            let mut q = p.clone();
                            q.insert(name.clone(), v.clone());
                            q
                        })
                    })
                    .collect();
            }
            candidates.extend(product);
        }
        if candidates.is_empty() {
            return Err(HarnessError::Config(format!("empty grid for {family}")));
        }
        candidates
            .into_iter()
            .map(|c| {
                let mut merged = base.clone();
                merged.extend(c);
                ModelParams::from_value(family, Value::Object(merged))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub index: usize,
    pub params: Value,
    pub fold_scores: Vec<f64>,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub n_parameters: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub family: ModelFamily,
    pub rows: Vec<GridRow>,
    pub best: usize,
    pub best_params: ModelParams,
}

fn model_seed(seed: u64, family: ModelFamily, grid: usize, fold: u64) -> u64 {
    derive_path(
        seed,
        &[offsets::MODEL_INIT, family.seed_index(), grid as u64, fold],
    )
}

/// Fits on the fold's training rows and scores C-index on its validation rows.
fn evaluate_unit(fold: &FoldData, params: &ModelParams, seed: u64) -> Result<f64, HarnessError> {
    let model = FittedModel::fit(params, &fold.train, fold.names(), seed)?;
    let risk = model.risk_scores(&fold.validation.x)?;
    concordance_index(&fold.validation.times, &fold.validation.events, &risk)
        .map_err(stage("validation C-index"))
}

/// Validation C-index of one configuration on every fold.
pub fn cv_evaluate(
    folds: &[FoldData],
    params: &ModelParams,
    seed: u64,
) -> Result<Vec<f64>, HarnessError> {
    folds
        .par_iter()
        .enumerate()
        .map(|(k, f)| evaluate_unit(f, params, model_seed(seed, params.family(), 0, k as u64)))
        .collect()
}

fn mean_sd(v: &[f64]) -> (f64, Option<f64>) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.len() > 1)
        .then(|| (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, sd)
}

/// Index of the row with the highest finite mean; ties go to fewer
/// parameters, then the lower learning rate, then the earlier row.
fn select_best(rows: &[GridRow], learning_rates: &[f64]) -> Option<usize> {
    rows.iter()
        .filter(|r| r.mean.is_some_and(f64::is_finite))
        .min_by(|a, b| {
            b.mean
                .unwrap()
                .total_cmp(&a.mean.unwrap())
                .then(a.n_parameters.cmp(&b.n_parameters))
                .then(learning_rates[a.index].total_cmp(&learning_rates[b.index]))
                .then(a.index.cmp(&b.index))
        })
        .map(|r| r.index)
}

/// Evaluates every grid point on every fold (all units in parallel) and picks
/// the highest mean validation C-index.
pub fn grid_search(
    folds: &[FoldData],
    family: ModelFamily,
    grid: &GridSpace,
    seed: u64,
) -> Result<GridResult, HarnessError> {
    if folds.is_empty() {
        return Err(HarnessError::Config("no folds to evaluate".into()));
    }
    let points = grid.expand(family)?;
    log::info!(
        "{family}: {} grid points × {} folds",
        points.len(),
        folds.len()
    );
    let units: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|g| (0..folds.len()).map(move |f| (g, f)))
        .collect();
    let scores: Vec<Result<f64, HarnessError>> = units
        .par_iter()
        .map(|&(g, f)| evaluate_unit(&folds[f], &points[g], model_seed(seed, family, g, f as u64)))
        .collect();

    let n_inputs = folds[0].names().len();
    let mut rows = Vec::with_capacity(points.len());
    for (g, p) in points.iter().enumerate() {
        let mine = &scores[g * folds.len()..(g + 1) * folds.len()];
        let error = mine
            .iter()
            .enumerate()
            .find_map(|(f, r)| r.as_ref().err().map(|e| format!("fold {f}: {e}")));
        let fold_scores: Vec<f64> = mine
            .iter()
            .filter_map(|r| r.as_ref().ok().copied())
            .collect();
        let (mean, sd) = match error {
            None => {
                let (m, s) = mean_sd(&fold_scores);
                (Some(m), s)
            }
            Some(ref e) => {
                log::warn!("{family} grid point {g} failed: {e}");
                (None, None)
            }
        };
        rows.push(GridRow {
            index: g,
            params: p.to_value(),
            fold_scores,
            mean,
            sd,
            n_parameters: p.n_parameters(n_inputs),
            error,
        });
    }
    let lrs: Vec<f64> = points.iter().map(ModelParams::learning_rate).collect();
    let best = select_best(&rows, &lrs).ok_or(HarnessError::AllConfigsFailed { family })?;
    Ok(GridResult {
        family,
        rows,
        best,
        best_params: points[best].clone(),
    })
}

// ---------------------------------------------------------------------------
// Prognostic factors

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FactorConfig {
    pub m: usize,
    pub iterations: usize,
    pub standardize: bool,
    pub reference_levels: BTreeMap<String, String>,
    pub seed: u64,
}

impl Default for FactorConfig {
    fn default() -> Self {
        Self {
            m: 10,
            iterations: crate::impute::DEFAULT_ITERATIONS,
            standardize: true,
            reference_levels: BTreeMap::new(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorRow {
    pub variable: String,
    pub beta: f64,
    pub se: f64,
    pub hr: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub p_value: f64,
    pub df: Option<f64>,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorTable {
    pub rows: Vec<FactorRow>,
    pub m: usize,
    pub n_rows: usize,
    pub n_events: usize,
    pub chain_seeds: Vec<u64>,
}

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

impl FactorTable {
    pub fn row(&self, variable: &str) -> Option<&FactorRow> {
        self.rows.iter().find(|r| r.variable == variable)
    }

    /// `variable,HR,CI_lo,CI_hi,p,significant`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variable,HR,CI_lo,CI_hi,p,significant\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6e},{}\n",
                r.variable, r.hr, r.ci_lo, r.ci_hi, r.p_value, r.significant
            ));
        }
        s
    }
}

/// Multiple imputation, one unpenalized Cox fit per completed dataset, and
/// Rubin pooling of each coefficient. Rows follow covariate order.
pub fn identify_factors(
    ds: &SurvivalDataset,
    cfg: &FactorConfig,
) -> Result<FactorTable, HarnessError> {
    if cfg.m < 2 {
        return Err(HarnessError::Config(format!(
            "factor identification needs m ≥ 2 imputations, got {}",
            cfg.m
        )));
    }
    ds.require_outcomes()?;
    let (encoded, _) =
        dummy_encode(ds, &reference_map(&cfg.reference_levels)).map_err(stage("encoding"))?;
    let prepared = if cfg.standardize {
        let stats =
            fit_scaler(&encoded, &continuous_covariates(&encoded)).map_err(stage("scaling"))?;
        apply_scaler(&encoded, &stats).map_err(stage("scaling"))?
    } else {
        encoded
    };
    let set =
        mice_impute(&prepared, cfg.m, cfg.iterations, cfg.seed).map_err(stage("imputation"))?;
    let fits: Vec<Vec<crate::coxph::WaldRow>> = set
        .datasets
        .par_iter()
        .enumerate()
        .map(|(index, d)| {
            fit_coxph_dataset(d, Penalty::NONE, &FitOptions::default())
                .and_then(|m| wald_stats(&m))
                .map_err(|source| HarnessError::ImputationFit { index, source })
        })
        .collect::<Result<_, _>>()?;

    let mut rows = Vec::new();
    for (j, first) in fits[0].iter().enumerate() {
        let est: Vec<f64> = fits.iter().map(|f| f[j].beta).collect();
        let var: Vec<f64> = fits.iter().map(|f| f[j].se * f[j].se).collect();
        let pooled =
            pool_rubin(&est, &var).map_err(stage(format!("pooling `{}`", first.variable)))?;
        rows.push(FactorRow {
            variable: first.variable.clone(),
            beta: pooled.estimate,
            se: pooled.total_variance.sqrt(),
            hr: pooled.estimate.exp(),
            ci_lo: pooled.ci_lo.exp(),
            ci_hi: pooled.ci_hi.exp(),
            p_value: pooled.p_value,
            df: pooled.df.is_finite().then_some(pooled.df),
            significant: pooled.p_value < SIGNIFICANCE_LEVEL,
        });
    }
    Ok(FactorTable {
        rows,
        m: cfg.m,
        n_rows: ds.n_rows(),
        n_events: ds.n_events(),
        chain_seeds: set.provenance.chain_seeds,
    })
}

// ---------------------------------------------------------------------------
// Full experiment

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSettings {
    pub n_boot: usize,
    pub stratify: bool,
    /// Integration range of the IBS; first event to 90th percentile of follow-up by default.
    pub ibs_range: Option<(f64, f64)>,
    /// Evaluation times of the AUC; event-time deciles by default.
    pub auc_times: Option<Vec<f64>>,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self {
            n_boot: 1000,
            stratify: true,
            ibs_range: None,
            auc_times: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: ModelFamily,
    /// Standard grid when absent.
    #[serde(default)]
    pub grid: Option<GridSpace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub split: SplitPlan,
    pub preprocess: PreprocessConfig,
    pub models: Vec<ModelSpec>,
    pub metrics: MetricSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            split: SplitPlan::default(),
            preprocess: PreprocessConfig::default(),
            models: ModelFamily::ALL
                .iter()
                .map(|&family| ModelSpec { family, grid: None })
                .collect(),
            metrics: MetricSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_str(s: &str) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.models.is_empty() {
            return Err(HarnessError::Config("no models requested".into()));
        }
        for (i, m) in self.models.iter().enumerate() {
            if self.models[..i].iter().any(|o| o.family == m.family) {
                return Err(HarnessError::Config(format!(
                    "model `{}` listed twice",
                    m.family
                )));
            }
            self.grid_for(m).expand(m.family)?;
        }
        if self.metrics.n_boot < MIN_BOOTSTRAP {
            return Err(HarnessError::Config(format!(
                "n_boot must be at least {MIN_BOOTSTRAP}, got {}",
                self.metrics.n_boot
            )));
        }
        if let Some(th) = self.preprocess.prune_threshold {
            if !(th > 0.0 && th <= 1.0) {
                return Err(HarnessError::Config(format!(
                    "prune threshold {th} outside (0, 1]"
                )));
            }
        }
        Ok(())
    }

    /// Keeps only the listed families, in the given order, adding any that
    /// were not configured with their standard grids.
    pub fn restrict_models(&mut self, families: &[ModelFamily]) {
        self.models = families
            .iter()
            .map(|&f| {
                self.models
                    .iter()
                    .find(|m| m.family == f)
                    .cloned()
                    .unwrap_or(ModelSpec {
                        family: f,
                        grid: None,
                    })
            })
            .collect();
    }

    fn grid_for(&self, spec: &ModelSpec) -> GridSpace {
        spec.grid
            .clone()
            .unwrap_or_else(|| GridSpace::standard(spec.family))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub family: ModelFamily,
    pub grid: Vec<GridRow>,
    pub selected: usize,
    pub params: Value,
    pub fit_seed: u64,
    /// C-index, integrated Brier score and mean time-dependent AUC on the test rows.
    pub test: Vec<MetricResult>,
    pub auc_by_time: TimeAuc,
}

/// Everything needed to trace each number back to the seed, split and
/// configuration. Contains no timing data, so reruns are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub config: ExperimentConfig,
    pub n_rows: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub events_train: usize,
    pub events_test: usize,
    pub fold_sizes: Vec<(usize, usize)>,
    pub test_ids: Vec<String>,
    pub removed_columns: Vec<RemovedColumn>,
    pub final_columns: Vec<String>,
    pub ibs_grid: Vec<f64>,
    pub auc_times: Vec<f64>,
    pub models: Vec<ModelReport>,
}

pub const METRIC_NAMES: [&str; 3] = ["c_index", "ibs", "auc"];

impl ExperimentReport {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `model,metric,estimate,ci_lo,ci_hi`, one row per model and metric.
    pub fn table_csv(&self) -> String {
        let mut s = String::from("model,metric,estimate,ci_lo,ci_hi\n");
        for m in &self.models {
            for r in &m.test {
                s.push_str(&format!(
                    "{},{},{:.6},{:.6},{:.6}\n",
                    m.family, r.metric, r.estimate, r.ci_lo, r.ci_hi
                ));
            }
        }
        s
    }

    pub fn model(&self, family: ModelFamily) -> Option<&ModelReport> {
        self.models.iter().find(|m| m.family == family)
    }
}

/// Source rows passed to one fitting call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub stage: String,
    pub rows: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub report: ExperimentReport,
    pub partition: Partition,
    pub pipeline: Pipeline,
    pub models: Vec<FittedModel>,
    pub fit_audit: Vec<FitRecord>,
}

impl RunArtifacts {
    /// Predicted survival at `times` for the rows with the given ids, one
    /// matrix (ids × times) per fitted model.
    pub fn survival_curves(
        &self,
        ds: &SurvivalDataset,
        ids: &[String],
        times: &[f64],
    ) -> Result<Vec<(ModelFamily, Array2<f64>)>, HarnessError> {
        let rows: Vec<usize> = ids
            .iter()
            .map(|id| {
                ds.ids()
                    .iter()
                    .position(|x| x == id)
                    .ok_or_else(|| HarnessError::Config(format!("unknown patient id `{id}`")))
            })
            .collect::<Result<_, _>>()?;
        let data = DesignData::from_dataset(&self.pipeline.transform(&ds.select_rows(&rows))?)?;
        self.models
            .iter()
            .map(|m| Ok((m.family(), m.survival_matrix(&data.x, times)?)))
            .collect()
    }
}

fn test_metrics(
    name: ModelFamily,
    risk: &[f64],
    surv: &Array2<f64>,
    test: &DesignData,
    grid: &[f64],
    auc_times: &[f64],
    settings: &MetricSettings,
    seed: u64,
) -> Result<(Vec<MetricResult>, TimeAuc), HarnessError> {
    let what = format!("{name} evaluation");
    let sub = |idx: &[usize]| -> (Vec<f64>, Vec<bool>) {
        (
            idx.iter().map(|&i| test.times[i]).collect(),
            idx.iter().map(|&i| test.events[i]).collect(),
        )
    };
    let c = bootstrap_ci(
        METRIC_NAMES[0],
        |idx: &[usize]| {
            let (t, e) = sub(idx);
            let r: Vec<f64> = idx.iter().map(|&i| risk[i]).collect();
            concordance_index(&t, &e, &r)
        },
        &test.events,
        settings.n_boot,
        seed,
        settings.stratify,
    )
    .map_err(stage(what.clone()))?;
    let ibs = bootstrap_ci(
        METRIC_NAMES[1],
        |idx: &[usize]| {
            let (t, e) = sub(idx);
            let g = censoring_km(&t, &e)?;
            integrated_brier(surv.select(Axis(0), idx).view(), grid, &t, &e, &g)
        },
        &test.events,
        settings.n_boot,
        seed,
        settings.stratify,
    )
    .map_err(stage(what.clone()))?;
    let auc_at = |idx: &[usize]| -> Result<TimeAuc, MetricError> {
        let (t, e) = sub(idx);
        let g = censoring_km(&t, &e)?;
        let r: Vec<f64> = idx.iter().map(|&i| risk[i]).collect();
        cumulative_dynamic_auc(&t, &e, &r, auc_times, &g)
    };
    let auc = bootstrap_ci(
        METRIC_NAMES[2],
        |idx: &[usize]| auc_at(idx).map(|a| a.mean),
        &test.events,
        settings.n_boot,
        seed,
        settings.stratify,
    )
    .map_err(stage(what.clone()))?;
    let all: Vec<usize> = (0..test.times.len()).collect();
    let curve = auc_at(&all).map_err(stage(what))?;
    Ok((vec![c, ibs, auc], curve))
}

/// Split, per-family grid search with cross-validation, refit of the chosen
/// configuration on the whole training split, and bootstrap evaluation on
/// the untouched test rows.
pub fn run_experiment(
    ds: &SurvivalDataset,
    cfg: &ExperimentConfig,
) -> Result<RunArtifacts, HarnessError> {
    cfg.validate()?;
    let seed = cfg.seed;
    let partition = split(ds, &cfg.split, seed)?;
    let mut audit = Vec::new();

    let folds = prepare_folds(ds, &partition, &cfg.preprocess, seed)?;
    for (k, f) in folds.iter().enumerate() {
        audit.push(FitRecord {
            stage: format!("fold {k} preprocessing"),
            rows: f.rows.clone(),
        });
    }

    let mut searches = Vec::new();
    for spec in &cfg.models {
        let result = grid_search(&folds, spec.family, &cfg.grid_for(spec), seed)?;
        for g in 0..result.rows.len() {
            for (k, f) in folds.iter().enumerate() {
                audit.push(FitRecord {
                    stage: format!("{} grid {g} fold {k}", spec.family),
                    rows: f.rows.clone(),
                });
            }
        }
        searches.push(result);
    }

    let (pipeline, completed) = Pipeline::fit(
        &ds.select_rows(&partition.train),
        &cfg.preprocess,
        derive(seed, offsets::IMPUTATION_BASE),
    )
    .map_err(|e| HarnessError::Stage {
        stage: "final preprocessing".into(),
        source: Box::new(e),
    })?;
    audit.push(FitRecord {
        stage: "final preprocessing".into(),
        rows: partition.train.clone(),
    });
    let train = DesignData::from_dataset(&completed)?;
    let test_ds = pipeline.transform(&ds.select_rows(&partition.test))?;
    let test = DesignData::from_dataset(&test_ds)?;

    let grid =
        ibs_grid(&test.times, &test.events, cfg.metrics.ibs_range).map_err(stage("IBS grid"))?;
    let auc_times = cfg
        .metrics
        .auc_times
        .clone()
        .unwrap_or_else(|| default_auc_times(&test.times, &test.events));
    let boot_seed = derive(seed, offsets::BOOTSTRAP);

    let mut models = Vec::new();
    let mut reports = Vec::new();
    for search in searches {
        let fit_seed = derive_path(
            seed,
            &[offsets::MODEL_INIT, search.family.seed_index(), FINAL_FIT],
        );
        let model = FittedModel::fit(&search.best_params, &train, &pipeline.columns, fit_seed)?;
        audit.push(FitRecord {
            stage: format!("{} final fit", search.family),
            rows: partition.train.clone(),
        });
        let risk = model.risk_scores(&test.x)?;
        let surv = model.survival_matrix(&test.x, &grid)?;
        let (test_results, auc_by_time) = test_metrics(
            search.family,
            &risk,
            &surv,
            &test,
            &grid,
            &auc_times,
            &cfg.metrics,
            boot_seed,
        )?;
        log::info!(
            "{}: test C-index {:.4}, IBS {:.4}, AUC {:.4}",
            search.family,
            test_results[0].estimate,
            test_results[1].estimate,
            test_results[2].estimate
        );
        reports.push(ModelReport {
            family: search.family,
            selected: search.best,
            params: search.best_params.to_value(),
            grid: search.rows,
            fit_seed,
            test: test_results,
            auc_by_time,
        });
        models.push(model);
    }

    let report = ExperimentReport {
        seed,
        config: cfg.clone(),
        n_rows: ds.n_rows(),
        n_train: partition.train.len(),
        n_test: partition.test.len(),
        events_train: partition.train.iter().filter(|&&i| ds.event()[i]).count(),
        events_test: partition.test.iter().filter(|&&i| ds.event()[i]).count(),
        fold_sizes: partition
            .folds
            .iter()
            .map(|f| (f.train.len(), f.validation.len()))
            .collect(),
        test_ids: partition
            .test
            .iter()
            .map(|&i| ds.ids()[i].clone())
            .collect(),
        removed_columns: pipeline
            .prune
            .as_ref()
            .map(|p| p.removed.clone())
            .unwrap_or_default(),
        final_columns: pipeline.columns.clone(),
        ibs_grid: grid,
        auc_times,
        models: reports,
    };
    Ok(RunArtifacts {
        report,
        partition,
        pipeline,
        models,
        fit_audit: audit,
    })
}
