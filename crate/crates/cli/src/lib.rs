//! `ugsim` command-line driver.

pub mod config;

use clap::{Args, Parser, Subcommand};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;
use tracing::{info, warn};
use ugsim_core::analysis::{analyze, cell_rows, fit_ols, Dependent, DesignSpec, ExpectationVariant, RegressionResult};
use ugsim_core::backend::BackendError;
use ugsim_core::orchestrator::{run_grid, GridError};
use ugsim_core::report::{
    deviation_csv, deviation_markdown, main_results_markdown, metrics_csv, policy_note, read_deviation_csv,
    regression_csv, regression_markdown, summary_json, Provenance,
};
use ugsim_core::store::{load_run, read_manifest, StoreError, TranscriptStore};

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("missing credential: environment variable `{0}` is not set")]
    CredentialMissing(String),
    #[error("partial run: {completed} cells done, {remaining} remaining ({first_failure}); rerun with --resume")]
    PartialRun {
        completed: usize,
        remaining: usize,
        first_failure: String,
    },
    #[error("analysis failed: {0}")]
    Analysis(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::ConfigInvalid(_) => 2,
            CliError::CredentialMissing(_) => 3,
            CliError::PartialRun { .. } => 4,
            CliError::Analysis(_) => 5,
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::ConfigMismatch { .. } => CliError::ConfigInvalid(e.to_string()),
            StoreError::MissingManifest(_) => CliError::Analysis(format!("no transcripts: {e}")),
            other => CliError::Io(other.to_string()),
        }
    }
}

impl From<GridError> for CliError {
    fn from(e: GridError) -> Self {
        match e {
            GridError::Invalid(e) => CliError::ConfigInvalid(e.to_string()),
            GridError::Backend(BackendError::CredentialMissing(var)) => CliError::CredentialMissing(var),
            GridError::Backend(e) => CliError::ConfigInvalid(e.to_string()),
            GridError::Store(e) => e.into(),
            GridError::PartialRun {
                completed,
                remaining,
                first_failure,
            } => CliError::PartialRun {
                completed: completed.len(),
                remaining: remaining.len(),
                first_failure,
            },
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "ugsim", version, about = "Belief-conditioned ultimatum-game negotiation harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an experiment grid and store transcripts.
    Run(RunArgs),
    /// Compute metrics and deviation scores for a stored run.
    Analyze(AnalyzeArgs),
    /// Fit the dummy-coded OLS model on a deviation CSV.
    Regress(RegressArgs),
    /// Analyze a run and fit all three regressions into one report.
    Report(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, required_unless_present = "oracle_demo", conflicts_with = "oracle_demo")]
    pub config: Option<PathBuf>,
    /// Use the built-in offline oracle configuration.
    #[arg(long)]
    pub oracle_demo: bool,
    /// Continue a run, skipping cells already complete.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Overrides the configured output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Run directory holding manifest.json and cells/.
    pub run_dir: PathBuf,
    /// Extra expectation variants, besides pointwise-fair.
    #[arg(long = "variant")]
    pub variants: Vec<ExpectationVariant>,
    /// Where to write outputs; defaults to <run_dir>/analysis.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Reference level for the model factor.
    #[arg(long)]
    pub reference_model: Option<String>,
}

#[derive(Debug, Args)]
pub struct RegressArgs {
    /// Deviation CSV written by `analyze`.
    #[arg(long)]
    pub deviations: PathBuf,
    #[arg(long, default_value = "P")]
    pub dependent: Dependent,
    #[arg(long)]
    pub reference_model: Option<String>,
    /// Directory for regression_<dep>.md and .csv; stdout only when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// What a successful command did, for callers and tests.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Ran {
        dir: PathBuf,
        transcripts: usize,
        executed_games: usize,
        resumed_cells: usize,
    },
    Analyzed {
        dir: PathBuf,
        files: Vec<PathBuf>,
    },
    Regressed(Box<RegressionResult>),
}

pub fn execute(cli: Cli) -> Result<Outcome, CliError> {
    match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Analyze(args) => cmd_analyze(&args, false),
        Command::Report(args) => cmd_analyze(&args, true),
        Command::Regress(args) => cmd_regress(&args),
    }
}

pub fn cmd_run(args: &RunArgs) -> Result<Outcome, CliError> {
    let config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::oracle_demo(),
    };
    let grid = config.grid()?;
    let templates = config.templates()?;
    let parallelism = args.parallelism.unwrap_or(config.parallelism);
    if parallelism < 1 {
        return Err(CliError::ConfigInvalid("parallelism must be at least 1".into()));
    }
    let dir = args.out.clone().unwrap_or_else(|| config.output_dir());
    if !args.resume && read_manifest(&dir)?.is_some() {
        return Err(CliError::ConfigInvalid(format!(
            "{} already holds a run; pass --resume to continue it",
            dir.display()
        )));
    }
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    let config_path = dir.join("config.json");
    if !config_path.exists() {
        let body = serde_json::to_string_pretty(&config).expect("config serializes");
        fs::write(&config_path, body + "\n").map_err(io(&config_path))?;
    }
    let store = TranscriptStore::open(&dir, &config.run_id, config.digest())?;
    info!(
        run = %config.run_id,
        cells = grid.cells().len(),
        games = grid.total_games(),
        parallelism,
        "starting run"
    );
    let outcome = run_grid(&grid, parallelism, &templates, Some(&store))?;
    info!(
        executed = outcome.executed_games,
        resumed_cells = outcome.resumed_cells,
        "run complete"
    );
    Ok(Outcome::Ran {
        dir,
        transcripts: outcome.transcripts.len(),
        executed_games: outcome.executed_games,
        resumed_cells: outcome.resumed_cells,
    })
}

fn write(path: PathBuf, body: &str, files: &mut Vec<PathBuf>) -> Result<(), CliError> {
    fs::write(&path, body).map_err(io(&path))?;
    files.push(path);
    Ok(())
}

pub fn cmd_analyze(args: &AnalyzeArgs, with_regression: bool) -> Result<Outcome, CliError> {
    let (manifest, transcripts) = load_run(&args.run_dir)?;
    if transcripts.is_empty() {
        return Err(CliError::Analysis(format!(
            "no transcripts in {}",
            args.run_dir.display()
        )));
    }
    let mut variants = vec![ExpectationVariant::PointwiseFair];
    for v in &args.variants {
        if !variants.contains(v) {
            variants.push(*v);
        }
    }
    let analysis = analyze(&transcripts, &variants);
    if analysis.metrics.is_empty() {
        return Err(CliError::Analysis("every game is invalid; nothing to analyze".into()));
    }
    for (cell, n) in &analysis.empty_cells {
        warn!(%cell, invalid = n, "cell has no valid games");
    }
    let prov = Provenance {
        run_id: manifest.run_id.clone(),
        config_digest: manifest.config_digest.clone(),
        template_checksum: manifest.template_checksum.clone(),
        harness_version: manifest.harness_version.clone(),
    };
    let out = args.out.clone().unwrap_or_else(|| args.run_dir.join("analysis"));
    fs::create_dir_all(&out).map_err(io(&out))?;
    let mut files = Vec::new();
    write(out.join("metrics.csv"), &metrics_csv(&analysis.metrics, &prov), &mut files)?;
    let mut main_md = main_results_markdown(&analysis.metrics, &prov);
    main_md.push('\n');
    main_md.push_str(&policy_note(&transcripts));
    for (variant, reports) in &analysis.deviations {
        write(out.join(format!("deviations_{variant}.csv")), &deviation_csv(reports, &prov), &mut files)?;
        write(
            out.join(format!("deviations_{variant}.md")),
            &deviation_markdown(reports, *variant, &prov),
            &mut files,
        )?;
    }
    write(out.join("main_results.md"), &main_md, &mut files)?;

    let mut regressions = Vec::new();
    if with_regression {
        let spec = DesignSpec {
            reference_model: args.reference_model.clone(),
            ..DesignSpec::default()
        };
        let reports = &analysis.deviations[&ExpectationVariant::PointwiseFair];
        let mut notes = Vec::new();
        for dependent in Dependent::ALL {
            match fit_ols(&cell_rows(reports, dependent), dependent, &spec) {
                Ok(fit) => {
                    write(out.join(format!("regression_{dependent}.csv")), &regression_csv(&fit, &prov), &mut files)?;
                    regressions.push(fit);
                }
                Err(e) => {
                    warn!(%dependent, error = %e, "regression skipped");
                    notes.push(format!("{dependent}: {e}"));
                }
            }
        }
        let mut report = main_md.clone();
        for (variant, reports) in &analysis.deviations {
            report.push('\n');
            report.push_str(&deviation_markdown(reports, *variant, &prov));
        }
        report.push('\n');
        report.push_str(&regression_markdown(&regressions, &prov));
        for note in notes {
            report.push_str(&format!("\nNot fitted: {note}\n"));
        }
        main_md = report;
        write(out.join("report.md"), &main_md, &mut files)?;
    }
    write(out.join("summary.json"), &summary_json(&analysis, &regressions, &prov), &mut files)?;
    Ok(Outcome::Analyzed { dir: out, files })
}

pub fn cmd_regress(args: &RegressArgs) -> Result<Outcome, CliError> {
    let text = fs::read_to_string(&args.deviations).map_err(io(&args.deviations))?;
    let (rows, prov) = read_deviation_csv(&text, args.dependent).map_err(|e| CliError::Analysis(e.to_string()))?;
    let spec = DesignSpec {
        reference_model: args.reference_model.clone(),
        ..DesignSpec::default()
    };
    let fit = fit_ols(&rows, args.dependent, &spec).map_err(|e| CliError::Analysis(e.to_string()))?;
    for w in &fit.warnings {
        warn!("{w}");
    }
    let md = regression_markdown(std::slice::from_ref(&fit), &prov);
    print!("{md}");
    if let Some(out) = &args.out {
        fs::create_dir_all(out).map_err(io(out))?;
        let mut files = Vec::new();
        write(out.join(format!("regression_{}.md", args.dependent)), &md, &mut files)?;
        write(out.join(format!("regression_{}.csv", args.dependent)), &regression_csv(&fit, &prov), &mut files)?;
    }
    Ok(Outcome::Regressed(Box::new(fit)))
}
