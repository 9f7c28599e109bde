//! Command implementations behind the `survkit` binary.
//!
//! Every command writes into its own run directory under `--out` and ends
//! with a `manifest.json` holding input, config and output hashes.

pub mod manifest;
pub mod plot;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use thiserror::Error;

use survkit::harness::{
    identify_factors, run_experiment, ExperimentConfig, FactorConfig, HarnessError, ModelFamily,
};
use survkit::impute::{mice_impute, ImputeError};
use survkit::preprocess::dummy_encode;
use survkit::synth::{ensure_like_spec, generate, GeneratorSpec, SynthError};
use survkit::tabular::{apply_inclusion, load_csv, InclusionRules, LoadOptions};
use survkit::{ColumnKind, Schema, SurvivalDataset};

pub use manifest::{FileDigest, Run, RunManifest, RunOutput};

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_COMPUTATION: i32 = 3;

#[derive(Debug, Error)]
#[error("{message}")]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }

    pub fn computation(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_COMPUTATION,
            message: message.into(),
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Self::computation(format!("cannot write {}: {e}", path.display()))
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        let mut message = e.to_string();
        let mut source = std::error::Error::source(&e);
        while let Some(s) = source {
            let text = s.to_string();
            if !message.contains(&text) {
                message.push_str(": ");
                message.push_str(&text);
            }
            source = s.source();
        }
        if e.is_input_error() {
            Self::input(message)
        } else {
            Self::computation(message)
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "survkit",
    version,
    about = "Survival modeling: imputation, Cox and neural models, evaluation"
)]
pub struct Cli {
    /// Worker threads for the parallel work queue (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Root directory for run outputs.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Multiple imputation by chained equations.
    Impute(ImputeArgs),
    /// Pooled Cox hazard ratios over multiply imputed datasets.
    IdentifyFactors(FactorArgs),
    /// Grid search, refit and test-set evaluation of survival models.
    Experiment(ExperimentArgs),
    /// Synthetic proportional-hazards cohort.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Cohort CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Column schema JSON.
    #[arg(long)]
    pub schema: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ImputeArgs {
    #[command(flatten)]
    pub input: DataArgs,
    /// Number of imputed datasets.
    #[arg(long, default_value_t = 10)]
    pub m: usize,
    /// Chained-equation sweeps per dataset.
    #[arg(long, default_value_t = 10)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct FactorArgs {
    #[command(flatten)]
    pub input: DataArgs,
    /// Factor analysis JSON config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Keep continuous covariates on their original scale.
    #[arg(long)]
    pub no_standardize: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ExperimentArgs {
    #[command(flatten)]
    pub input: DataArgs,
    /// Experiment JSON config; defaults apply when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated model families to run.
    #[arg(long)]
    pub models: Option<String>,
    /// Comma-separated patient ids; one survival-curve SVG per model.
    #[arg(long)]
    pub plot_patients: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Canned cohort shaped like the disease-free-survival study data.
    #[arg(long, conflicts_with = "spec", required_unless_present = "spec")]
    pub ensure_like: bool,
    /// Generator spec JSON.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Overrides the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(cli: &Cli) -> Result<RunOutput, CliError> {
    match &cli.command {
        Command::Impute(a) => cmd_impute(a, &cli.out),
        Command::IdentifyFactors(a) => cmd_identify_factors(a, &cli.out),
        Command::Experiment(a) => cmd_experiment(a, &cli.out),
        Command::Synth(a) => cmd_synth(a, &cli.out),
    }
}

fn read_text(path: &Path, what: &str) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::input(format!("cannot read {what} {}: {e}", path.display())))
}

/// Loads schema and data and drops rows with missing outcomes.
pub fn load_dataset(args: &DataArgs) -> Result<SurvivalDataset, CliError> {
    let schema = Schema::from_json_str(&read_text(&args.schema, "schema")?)
        .map_err(|e| CliError::input(format!("{}: {e}", args.schema.display())))?;
    if !args.data.exists() {
        return Err(CliError::input(format!(
            "data file {} does not exist",
            args.data.display()
        )));
    }
    let ds = load_csv(&args.data, &schema, &LoadOptions::default())
        .map_err(|e| CliError::input(format!("{}: {e}", args.data.display())))?;
    let kept = apply_inclusion(&ds, &InclusionRules::default())
        .map_err(|e| CliError::input(e.to_string()))?;
    if kept.n_rows() < ds.n_rows() {
        log::warn!(
            "dropped {} rows with missing outcome",
            ds.n_rows() - kept.n_rows()
        );
    }
    if kept.n_rows() == 0 {
        return Err(CliError::input(format!(
            "{}: no rows with complete outcomes",
            args.data.display()
        )));
    }
    Ok(kept)
}

fn input_digests(args: &DataArgs) -> Result<Vec<FileDigest>, CliError> {
    Ok(vec![
        FileDigest::of(&args.data)?,
        FileDigest::of(&args.schema)?,
    ])
}

fn impute_error(e: ImputeError) -> CliError {
    match e {
        ImputeError::Data(_)
        | ImputeError::AllMissing(_)
        | ImputeError::Empty
        | ImputeError::BadTime(_) => CliError::input(e.to_string()),
        e => CliError::computation(e.to_string()),
    }
}

/// Writes `m` completed datasets. Categorical covariates are dummy coded and
/// binary covariates become continuous, since imputed cells are real-valued.
pub fn cmd_impute(args: &ImputeArgs, out: &Path) -> Result<RunOutput, CliError> {
    if args.m == 0 {
        return Err(CliError::input("--m must be at least 1"));
    }
    let ds = load_dataset(&args.input)?;
    ds.require_outcomes()
        .map_err(|e| CliError::input(e.to_string()))?;
    let (encoded, _) =
        dummy_encode(&ds, &Default::default()).map_err(|e| CliError::input(e.to_string()))?;
    let columns = encoded
        .columns()
        .iter()
        .map(|c| {
            let mut c = c.clone();
            if c.kind == ColumnKind::Binary && c.role == survkit::Role::Covariate {
                c.kind = ColumnKind::Continuous;
            }
            c
        })
        .collect();
    let prepared = encoded
        .with_columns(columns, encoded.values().clone(), encoded.missing().clone())
        .map_err(|e| CliError::input(e.to_string()))?;
    let set = mice_impute(&prepared, args.m, args.iters, args.seed).map_err(impute_error)?;

    let settings = json!({"m": args.m, "iterations": args.iters, "seed": args.seed});
    let mut run = Run::start(
        out,
        "impute",
        settings,
        None,
        input_digests(&args.input)?,
        args.seed,
    )?;
    let written = set
        .write_dir(&run.dir, "imputed")
        .map_err(|e| CliError::computation(e.to_string()))?;
    for p in written {
        run.record(p);
    }
    run.write("imputed_schema.json", prepared.schema().to_json_string())?;
    run.finish()
}

pub fn cmd_identify_factors(args: &FactorArgs, out: &Path) -> Result<RunOutput, CliError> {
    let (mut cfg, config_digest) = match &args.config {
        Some(p) => {
            let cfg: FactorConfig = serde_json::from_str(&read_text(p, "config")?)
                .map_err(|e| CliError::input(format!("{}: {e}", p.display())))?;
            (cfg, Some(FileDigest::of(p)?))
        }
        None => (FactorConfig::default(), None),
    };
    if let Some(m) = args.m {
        cfg.m = m;
    }
    if let Some(i) = args.iters {
        cfg.iterations = i;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.no_standardize {
        cfg.standardize = false;
    }
    let ds = load_dataset(&args.input)?;
    let table = identify_factors(&ds, &cfg)?;

    let settings = serde_json::to_value(&cfg).expect("config serializes");
    let mut run = Run::start(
        out,
        "identify-factors",
        settings,
        config_digest,
        input_digests(&args.input)?,
        cfg.seed,
    )?;
    run.write("factors.csv", table.to_csv())?;
    run.write(
        "factors.json",
        serde_json::to_string_pretty(&table).expect("table serializes"),
    )?;
    run.finish()
}

/// Parses a comma-separated list of model family names.
pub fn parse_models(list: &str) -> Result<Vec<ModelFamily>, CliError> {
    let mut out = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let f: ModelFamily = name
            .parse()
            .map_err(|e: HarnessError| CliError::input(e.to_string()))?;
        if !out.contains(&f) {
            out.push(f);
        }
    }
    if out.is_empty() {
        return Err(CliError::input("--models lists no model"));
    }
    Ok(out)
}

pub const PLOT_POINTS: usize = 200;

pub fn cmd_experiment(args: &ExperimentArgs, out: &Path) -> Result<RunOutput, CliError> {
    let (mut cfg, config_digest) = match &args.config {
        Some(p) => {
            let cfg = ExperimentConfig::from_json_str(&read_text(p, "config")?)
                .map_err(|e| CliError::input(format!("{}: {e}", p.display())))?;
            (cfg, Some(FileDigest::of(p)?))
        }
        None => (ExperimentConfig::default(), None),
    };
    if let Some(list) = &args.models {
        cfg.restrict_models(&parse_models(list)?);
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let patients: Vec<String> = args
        .plot_patients
        .as_deref()
        .map(|s| {
            s.split(',')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(String::from)
                .collect()
        })
        .unwrap_or_default();

    let ds = load_dataset(&args.input)?;
    if let Some(id) = patients.iter().find(|id| !ds.ids().contains(id)) {
        return Err(CliError::input(format!(
            "--plot-patients: unknown patient id `{id}`"
        )));
    }
    let art = run_experiment(&ds, &cfg)?;

    let settings = serde_json::to_value(&cfg).expect("config serializes");
    let mut run = Run::start(
        out,
        "experiment",
        settings,
        config_digest,
        input_digests(&args.input)?,
        cfg.seed,
    )?;
    run.write("report.json", art.report.to_json_string())?;
    run.write("metrics.csv", art.report.table_csv())?;
    run.write("grid.csv", grid_csv(&art.report))?;
    run.write(
        "pipeline.json",
        serde_json::to_string_pretty(&art.pipeline).expect("pipeline serializes"),
    )?;
    for m in &art.models {
        let text = serde_json::to_string(m).expect("model serializes");
        run.write(&format!("models/{}.json", m.family()), text)?;
    }
    if !patients.is_empty() {
        let t_end = art.report.ibs_grid.last().copied().unwrap_or(1.0);
        let times: Vec<f64> = (0..PLOT_POINTS)
            .map(|k| t_end * k as f64 / (PLOT_POINTS - 1) as f64)
            .collect();
        for (family, s) in art.survival_curves(&ds, &patients, &times)? {
            let rows: Vec<Vec<f64>> = s.rows().into_iter().map(|r| r.to_vec()).collect();
            let svg = plot::survival_svg(
                &format!("Predicted survival: {family}"),
                &times,
                &patients,
                &rows,
            );
            run.write(&format!("plots/survival_{family}.svg"), svg)?;
        }
    }
    run.finish()
}

fn grid_csv(report: &survkit::harness::ExperimentReport) -> String {
    let mut s = String::from("model,index,selected,mean,sd,n_parameters,error,params\n");
    let quote = |v: &str| format!("\"{}\"", v.replace('"', "\"\""));
    let num = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for m in &report.models {
        for r in &m.grid {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                m.family,
                r.index,
                r.index == m.selected,
                num(r.mean),
                num(r.sd),
                r.n_parameters,
                quote(r.error.as_deref().unwrap_or("")),
                quote(&r.params.to_string())
            ));
        }
    }
    s
}

pub fn cmd_synth(args: &SynthArgs, out: &Path) -> Result<RunOutput, CliError> {
    let (mut spec, config_digest) = match (&args.spec, args.ensure_like) {
        (Some(p), false) => {
            let spec = GeneratorSpec::from_json_str(&read_text(p, "spec")?)
                .map_err(|e| CliError::input(format!("{}: {e}", p.display())))?;
            (spec, Some(FileDigest::of(p)?))
        }
        (None, true) => (ensure_like_spec(args.seed.unwrap_or(0)), None),
        _ => {
            return Err(CliError::input(
                "give exactly one of --spec or --ensure-like",
            ))
        }
    };
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    let (ds, truth) = generate(&spec).map_err(|e| match e {
        SynthError::Spec(_) | SynthError::Json(_) => CliError::input(e.to_string()),
        e => CliError::computation(e.to_string()),
    })?;
    let spec_json = spec
        .to_json_string()
        .map_err(|e| CliError::computation(e.to_string()))?;
    let settings: serde_json::Value = serde_json::from_str(&spec_json).expect("spec JSON parses");
    let mut run = Run::start(out, "synth", settings, config_digest, vec![], spec.seed)?;
    let cohort = run.dir.join("cohort.csv");
    ds.write_csv_file(&cohort)
        .map_err(|e| CliError::computation(e.to_string()))?;
    run.record(cohort);
    run.write("schema.json", ds.schema().to_json_string())?;
    run.write(
        "truth.json",
        truth
            .to_json_string()
            .map_err(|e| CliError::computation(e.to_string()))?,
    )?;
    run.write("spec.json", spec_json)?;
    run.finish()
}
