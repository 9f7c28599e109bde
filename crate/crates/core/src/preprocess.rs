//! Dummy coding, z-score standardization and Pearson-correlation pruning.
//!
//! Every transform is split into a fit step that reads statistics from one
//! dataset and an apply step that uses only those stored statistics, so the
//! harness can fit on training rows and transform held-out rows.

use std::collections::HashMap;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tabular::{ColumnKind, ColumnSpec, DataError, Role, SurvivalDataset};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("reference level `{level}` is not declared for `{column}`")]
    UnknownReference { column: String, level: String },
    #[error("column `{0}` is not continuous")]
    NotContinuous(String),
    #[error("column `{0}` has fewer than two distinct observed values")]
    Degenerate(String),
    #[error("column `{0}` has no scaler statistics")]
    MissingStats(String),
    #[error("correlation threshold {0} outside (0, 1]")]
    BadThreshold(f64),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Output columns for one categorical input column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedColumn {
    pub column: String,
    pub reference: String,
    /// (level, output column name) for each non-reference level, in declared order.
    pub dummies: Vec<(String, String)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EncodingMap {
    pub columns: Vec<EncodedColumn>,
}

impl EncodingMap {
    /// Recovers the original level of `column` for every row of an encoded
    /// dataset. `None` for masked rows.
    pub fn decode(
        &self,
        encoded: &SurvivalDataset,
        column: &str,
    ) -> Result<Vec<Option<String>>, PreprocessError> {
        let enc = self
            .columns
            .iter()
            .find(|c| c.column == column)
            .ok_or_else(|| PreprocessError::UnknownColumn(column.to_string()))?;
        let idx: Vec<usize> = enc
            .dummies
            .iter()
            .map(|(_, name)| {
                encoded
                    .column_index(name)
                    .ok_or_else(|| PreprocessError::UnknownColumn(name.clone()))
            })
            .collect::<Result<_, _>>()?;
        Ok((0..encoded.n_rows())
            .map(|i| {
                if idx.iter().any(|&j| encoded.missing()[[i, j]]) {
                    return None;
                }
                let hit = idx.iter().position(|&j| encoded.values()[[i, j]] == 1.0);
                Some(match hit {
                    Some(k) => enc.dummies[k].0.clone(),
                    None => enc.reference.clone(),
                })
            })
            .collect())
    }

    /// Applies a previously built encoding to another dataset with the same schema.
    pub fn apply(&self, ds: &SurvivalDataset) -> Result<SurvivalDataset, PreprocessError> {
        let refs = self
            .columns
            .iter()
            .map(|c| (c.column.clone(), c.reference.clone()))
            .collect();
        Ok(dummy_encode(ds, &refs)?.0)
    }
}

fn dummy_name(column: &str, level: &str) -> String {
    format!("{column}_{level}")
}

/// Replaces each categorical covariate with k−1 binary columns. The reference
/// level defaults to the first declared level. A masked categorical cell
/// masks all of its dummy cells.
pub fn dummy_encode(
    ds: &SurvivalDataset,
    refs: &HashMap<String, String>,
) -> Result<(SurvivalDataset, EncodingMap), PreprocessError> {
    for name in refs.keys() {
        if ds.column_index(name).is_none() {
            return Err(PreprocessError::UnknownColumn(name.clone()));
        }
    }
    let n = ds.n_rows();
    let mut specs = Vec::new();
    let mut cols: Vec<(Vec<f64>, Vec<bool>)> = Vec::new();
    let mut map = EncodingMap::default();

    for (j, spec) in ds.columns().iter().enumerate() {
        let values = ds.values().column(j);
        let mask = ds.missing().column(j);
        match (&spec.kind, spec.role) {
            (ColumnKind::Categorical { levels }, Role::Covariate) => {
                let reference = match refs.get(&spec.name) {
                    Some(r) => {
                        if !levels.contains(r) {
                            return Err(PreprocessError::UnknownReference {
                                column: spec.name.clone(),
                                level: r.clone(),
                            });
                        }
                        r.clone()
                    }
                    None => levels[0].clone(),
                };
                let ref_code = levels.iter().position(|l| *l == reference).unwrap();
                let mut enc = EncodedColumn {
                    column: spec.name.clone(),
                    reference,
                    dummies: Vec::new(),
                };
                for (code, level) in levels.iter().enumerate() {
                    if code == ref_code {
                        continue;
                    }
                    let name = dummy_name(&spec.name, level);
                    let v: Vec<f64> = values
                        .iter()
                        .map(|&x| if x as usize == code { 1.0 } else { 0.0 })
                        .collect();
                    specs.push(ColumnSpec {
                        name: name.clone(),
                        kind: ColumnKind::Binary,
                        role: Role::Covariate,
                    });
                    cols.push((v, mask.to_vec()));
                    enc.dummies.push((level.clone(), name));
                }
                map.columns.push(enc);
            }
            _ => {
                specs.push(spec.clone());
                cols.push((values.to_vec(), mask.to_vec()));
            }
        }
    }

    let p = specs.len();
    let mut values = Array2::<f64>::zeros((n, p));
    let mut missing = Array2::from_elem((n, p), false);
    for (j, (v, m)) in cols.into_iter().enumerate() {
        values.column_mut(j).assign(&ndarray::Array1::from(v));
        missing.column_mut(j).assign(&ndarray::Array1::from(m));
    }
    Ok((ds.with_columns(specs, values, missing)?, map))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub column: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScalerStats {
    pub columns: Vec<ColumnStats>,
}

impl ScalerStats {
    pub fn get(&self, column: &str) -> Option<&ColumnStats> {
        self.columns.iter().find(|c| c.column == column)
    }
}

/// Names of continuous covariate columns, the default scaling target.
pub fn continuous_covariates(ds: &SurvivalDataset) -> Vec<String> {
    ds.columns()
        .iter()
        .filter(|c| c.role == Role::Covariate && c.kind == ColumnKind::Continuous)
        .map(|c| c.name.clone())
        .collect()
}

/// Mean and sample standard deviation (n−1) over observed cells.
pub fn fit_scaler(
    ds: &SurvivalDataset,
    columns: &[String],
) -> Result<ScalerStats, PreprocessError> {
    let mut stats = ScalerStats::default();
    for name in columns {
        let j = ds
            .column_index(name)
            .ok_or_else(|| PreprocessError::UnknownColumn(name.clone()))?;
        if ds.columns()[j].kind != ColumnKind::Continuous {
            return Err(PreprocessError::NotContinuous(name.clone()));
        }
        let obs: Vec<f64> = ds
            .values()
            .column(j)
            .iter()
            .zip(ds.missing().column(j))
            .filter(|(_, &m)| !m)
            .map(|(&v, _)| v)
            .collect();
        let distinct = obs.iter().any(|&v| v != obs[0]);
        if obs.len() < 2 || !distinct {
            return Err(PreprocessError::Degenerate(name.clone()));
        }
        let n = obs.len() as f64;
        let mean = obs.iter().sum::<f64>() / n;
        let var = obs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        stats.columns.push(ColumnStats {
            column: name.clone(),
            mean,
            std: var.sqrt(),
        });
    }
    Ok(stats)
}

/// `cell ← (cell − mean) / std` on every column named in `stats`; masks unchanged.
pub fn apply_scaler(
    ds: &SurvivalDataset,
    stats: &ScalerStats,
) -> Result<SurvivalDataset, PreprocessError> {
    let mut values = ds.values().clone();
    for s in &stats.columns {
        let j = ds
            .column_index(&s.column)
            .ok_or_else(|| PreprocessError::MissingStats(s.column.clone()))?;
        values.column_mut(j).mapv_inplace(|v| (v - s.mean) / s.std);
    }
    Ok(ds.with_cells(values, ds.missing().clone())?)
}

/// Applies stats, failing if any of `requested` has no entry.
pub fn apply_scaler_checked(
    ds: &SurvivalDataset,
    stats: &ScalerStats,
    requested: &[String],
) -> Result<SurvivalDataset, PreprocessError> {
    if let Some(c) = requested.iter().find(|c| stats.get(c).is_none()) {
        return Err(PreprocessError::MissingStats(c.clone()));
    }
    apply_scaler(ds, stats)
}

/// Pearson correlation over rows where both cells are observed. `None` with
/// fewer than 3 overlapping rows or zero variance in the overlap.
pub fn pairwise_pearson(a: &[f64], a_miss: &[bool], b: &[f64], b_miss: &[bool]) -> Option<f64> {
    let pairs: Vec<(f64, f64)> = (0..a.len())
        .filter(|&i| !a_miss[i] && !b_miss[i])
        .map(|i| (a[i], b[i]))
        .collect();
    if pairs.len() < 3 {
        return None;
    }
    let n = pairs.len() as f64;
    let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for &(x, y) in &pairs {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovedColumn {
    pub column: String,
    /// The surviving column it was too correlated with.
    pub partner: String,
    pub abs_r: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub threshold: f64,
    pub removed: Vec<RemovedColumn>,
    /// Column pairs with fewer than 3 jointly observed rows.
    pub skipped_pairs: Vec<(String, String)>,
}

impl PruneReport {
    /// Drops the same columns from another dataset.
    pub fn apply(&self, ds: &SurvivalDataset) -> Result<SurvivalDataset, PreprocessError> {
        let names: Vec<&str> = self.removed.iter().map(|r| r.column.as_str()).collect();
        drop_columns(ds, &names)
    }
}

pub fn drop_columns(
    ds: &SurvivalDataset,
    names: &[&str],
) -> Result<SurvivalDataset, PreprocessError> {
    for n in names {
        if ds.column_index(n).is_none() {
            return Err(PreprocessError::UnknownColumn(n.to_string()));
        }
    }
    let keep: Vec<usize> = (0..ds.n_cols())
        .filter(|&j| !names.contains(&ds.columns()[j].name.as_str()))
        .collect();
    let specs = keep.iter().map(|&j| ds.columns()[j].clone()).collect();
    Ok(ds.with_columns(
        specs,
        ds.values().select(Axis(1), &keep),
        ds.missing().select(Axis(1), &keep),
    )?)
}

/// Per-column fraction of masked cells, used as pruning priority.
pub fn missing_rates(ds: &SurvivalDataset) -> HashMap<String, f64> {
    let n = ds.n_rows().max(1) as f64;
    ds.columns()
        .iter()
        .enumerate()
        .map(|(j, c)| {
            (
                c.name.clone(),
                ds.missing().column(j).iter().filter(|&&m| m).count() as f64 / n,
            )
        })
        .collect()
}

/// Greedy removal of highly correlated covariates.
///
/// Repeatedly takes the surviving pair with the largest |r| above `threshold`
/// and drops the member with the higher missing rate (ties: the later column).
/// Afterwards no surviving pair exceeds the threshold.
pub fn prune_correlated(
    ds: &SurvivalDataset,
    threshold: f64,
    priority: &HashMap<String, f64>,
) -> Result<(SurvivalDataset, PruneReport), PreprocessError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(PreprocessError::BadThreshold(threshold));
    }
    let cov = ds.covariate_indices();
    let names: Vec<&str> = cov.iter().map(|&j| ds.columns()[j].name.as_str()).collect();
    let cols: Vec<(Vec<f64>, Vec<bool>)> = cov
        .iter()
        .map(|&j| {
            (
                ds.values().column(j).to_vec(),
                ds.missing().column(j).to_vec(),
            )
        })
        .collect();

    let mut report = PruneReport {
        threshold,
        ..Default::default()
    };
    let mut pairs = Vec::new();
    for a in 0..cov.len() {
        for b in (a + 1)..cov.len() {
            match pairwise_pearson(&cols[a].0, &cols[a].1, &cols[b].0, &cols[b].1) {
                Some(r) => pairs.push((a, b, r.abs())),
                None => report
                    .skipped_pairs
                    .push((names[a].to_string(), names[b].to_string())),
            }
        }
    }
    // strongest first; stable on (a, b) order for equal |r|
    pairs.sort_by(|x, y| y.2.total_cmp(&x.2));

    let mut alive = vec![true; cov.len()];
    for &(a, b, r) in &pairs {
        if r <= threshold {
            break;
        }
        if !alive[a] || !alive[b] {
            continue;
        }
        let ra = priority.get(names[a]).copied().unwrap_or(0.0);
        let rb = priority.get(names[b]).copied().unwrap_or(0.0);
        let (drop, keep) = if ra > rb { (a, b) } else { (b, a) };
        alive[drop] = false;
        report.removed.push(RemovedColumn {
            column: names[drop].to_string(),
            partner: names[keep].to_string(),
            abs_r: r,
        });
    }
    let pruned = report.apply(ds)?;
    Ok((pruned, report))
}
