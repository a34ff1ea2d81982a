//! `aftercast`: headless forecast correction.
//!
//! Exit codes: 0 success, 2 invalid input or usage, 1 internal failure.
//! Machine-readable output is JSON; human summaries go to stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aftercast_core::data::{
    load_predictions, parse_csv, prepare, split_windows, BaselineKind, DatasetConfig, PredictionFile,
    PredictionSource, Window, WindowSpec,
};
use aftercast_core::metrics::{mse, per_channel_report};
use aftercast_core::optimize::{self, DEFAULT_GUARD_TOLERANCE};
use aftercast_core::{AffineScope, CorrectionPlan, Error, EvalReport, Objective, OptimizerConfig, SplitSpec, Strategy};
use aftercast_service::{ServeError, ServiceConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "aftercast", version, about = "Post-training correction of time-series forecasts")]
struct Cli {
    /// More log output on stderr (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search for a correction plan and report it once on the test split.
    Optimize(OptimizeArgs),
    /// Apply a plan to a prediction file.
    Apply(ApplyArgs),
    /// Score predictions against the windows of a data file.
    Evaluate(EvaluateArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct WindowArgs {
    /// Context length in rows.
    #[arg(long, alias = "window_size")]
    window: usize,
    /// Forecast horizon in rows.
    #[arg(long, alias = "prediction_horizon")]
    horizon: usize,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Chronological train,val,test fractions.
    #[arg(long, default_value = "0.6,0.2,0.2", value_parser = parse_split)]
    split: SplitSpec,
    /// Z-score channels with train statistics before windowing.
    #[arg(long)]
    normalize: bool,
}

impl WindowArgs {
    fn dataset(&self) -> Result<DatasetConfig, Error> {
        Ok(DatasetConfig {
            windows: WindowSpec::new(self.window, self.horizon, self.stride)?,
            split: self.split,
            normalize: self.normalize,
        })
    }
}

fn parse_split(s: &str) -> Result<SplitSpec, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [train, val, test] => SplitSpec::new(train, val, test).map_err(|e| e.to_string()),
        _ => Err("expected three comma-separated fractions".into()),
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Persistence,
    Ridge,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Random,
    ShHpo,
    Ppo,
    Ga,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Global,
    PerChannel,
    PerHorizon,
}

#[derive(Clone, Copy, ValueEnum)]
enum Subset {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["predictions", "baseline"]))]
struct OptimizeArgs {
    /// Series CSV: optional leading date/time column, then numeric channels.
    #[arg(long, alias = "train_path")]
    data: PathBuf,
    /// Base forecasts (CSV with a .meta.json sidecar).
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Built-in base forecaster.
    #[arg(long, value_enum)]
    baseline: Option<BaselineArg>,
    #[command(flatten)]
    windows: WindowArgs,
    #[arg(long, value_enum, default_value = "sh-hpo")]
    strategy: StrategyArg,
    /// Candidate evaluations, excluding the baseline.
    #[arg(long, default_value_t = 200)]
    budget: usize,
    /// Policy updates (ppo) or generations (ga).
    #[arg(long, default_value_t = 20)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads; 0 uses all cores.
    #[arg(long, alias = "n-jobs", default_value_t = 0)]
    jobs: usize,
    /// Fit an affine tail on validation after the search.
    #[arg(long, value_enum)]
    affine_tail: Option<ScopeArg>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ApplyArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    /// Corrected prediction CSV; its sidecar is written alongside.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    truth_data: PathBuf,
    /// Uncorrected predictions; enables improvement and the train check.
    #[arg(long)]
    baseline_predictions: Option<PathBuf>,
    #[command(flatten)]
    windows: WindowArgs,
    /// Windows to score.
    #[arg(long, value_enum, default_value = "test")]
    subset: Subset,
}

#[derive(Args)]
struct ServeArgs {
    /// TOML config; AFTERCAST_* environment variables override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_user_error() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

fn user(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn internal(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn read(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| user(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, contents: &str) -> CliResult {
    std::fs::write(path, contents).map_err(|e| internal(format!("cannot write {}: {e}", path.display())))
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("artifacts serialize") + "\n"
}

fn cmd_optimize(a: OptimizeArgs) -> CliResult {
    let series = parse_csv(&read(&a.data)?)?;
    let dataset = a.windows.dataset()?;
    let source = match (&a.predictions, a.baseline) {
        (Some(path), _) => PredictionSource::File(PredictionFile::read(path)?),
        (None, Some(BaselineArg::Persistence)) => PredictionSource::Baseline(BaselineKind::Persistence),
        (None, Some(BaselineArg::Ridge)) => PredictionSource::Baseline(BaselineKind::Ridge),
        (None, None) => return Err(user("one of --predictions or --baseline is required")),
    };
    let prepared = prepare(&series, &dataset, &source)?;
    let cfg = OptimizerConfig {
        strategy: match a.strategy {
            StrategyArg::Random => Strategy::Random,
            StrategyArg::ShHpo => Strategy::ShHpo,
            StrategyArg::Ppo => Strategy::Ppo,
            StrategyArg::Ga => Strategy::Ga,
        },
        budget: a.budget,
        episodes: a.episodes,
        seed: a.seed,
        jobs: a.jobs,
        affine_tail: a.affine_tail.map(|s| match s {
            ScopeArg::Global => AffineScope::Global,
            ScopeArg::PerChannel => AffineScope::PerChannel,
            ScopeArg::PerHorizon => AffineScope::PerHorizon,
        }),
        ..OptimizerConfig::default()
    };
    cfg.validate()?;
    let s = prepared.summary;
    eprintln!(
        "data: {} rows x {} channels; windows train {} / val {} / test {}",
        s.rows, s.channels, s.train_windows, s.val_windows, s.test_windows
    );
    let objective = Objective::new(prepared.train, prepared.val)?;
    let test = prepared.test.unseal();
    let (trace, report) = optimize::run(&objective, &cfg, &test)?;

    std::fs::create_dir_all(&a.out).map_err(|e| internal(format!("cannot create {}: {e}", a.out.display())))?;
    write(&a.out.join("plan.json"), &to_json(&trace.best_plan))?;
    write(&a.out.join("trace.jsonl"), &trace.to_jsonl(Some(&report))?)?;
    write(&a.out.join("report.json"), &to_json(&report))?;
    prepared.predictions.write(&a.out.join("baseline.csv"))?;

    eprintln!(
        "{}: {} evaluations, best plan {}",
        trace.strategy,
        trace.evaluations,
        trace.best_plan.label()
    );
    eprintln!(
        "validation improvement {:.2}%, test improvement {}",
        100.0 * trace.best_improvement().unwrap_or(0.0),
        report
            .improvement_m
            .map_or_else(|| "undefined".to_string(), |m| format!("{:.2}%", 100.0 * m))
    );
    Ok(())
}

fn cmd_apply(a: ApplyArgs) -> CliResult {
    let plan: CorrectionPlan = serde_json::from_slice(&read(&a.plan)?)
        .map_err(|e| user(format!("invalid plan {}: {e}", a.plan.display())))?;
    let file = PredictionFile::read(&a.predictions)?;
    let ids = file.sample_ids();
    let corrected = plan.apply(file.to_tensor(&ids)?.view(), &ids)?;
    let out = PredictionFile::from_tensor(file.meta.clone(), &ids, corrected.view())?;
    out.write(&a.out)?;
    eprintln!("applied {} to {} samples", plan.label(), ids.len());
    Ok(())
}

fn windows_for(all: [Vec<Window>; 3], subset: Subset) -> Vec<Window> {
    let [train, val, test] = all;
    match subset {
        Subset::Train => train,
        Subset::Val => val,
        Subset::Test => test,
        Subset::All => train.into_iter().chain(val).chain(test).collect(),
    }
}

fn cmd_evaluate(a: EvaluateArgs) -> CliResult {
    let series = parse_csv(&read(&a.truth_data)?)?;
    let [train_w, val_w, test_w] = split_windows(&series, &a.windows.dataset()?)?;
    let targets = windows_for([train_w.clone(), val_w, test_w], a.subset);
    let predictions = PredictionFile::read(&a.predictions)?;
    let after = load_predictions(&predictions, &targets)?;
    let report: EvalReport = match &a.baseline_predictions {
        Some(path) => {
            let baseline = PredictionFile::read(path)?;
            let before = load_predictions(&baseline, &targets)?;
            let mut report = per_channel_report(&before, &after)?;
            let train_before = load_predictions(&baseline, &train_w)?;
            let train_after = load_predictions(&predictions, &train_w)?;
            let train_mse = mse(train_after.predictions(), train_before.truth())?;
            report.train_consistent = Some(train_mse <= train_before.mse() * (1.0 + DEFAULT_GUARD_TOLERANCE));
            report
        }
        None => {
            let mut report = per_channel_report(&after, &after)?;
            report.improvement_m = None;
            for c in &mut report.per_channel {
                c.improvement_m = None;
            }
            report
        }
    };
    print!("{}", to_json(&report));
    eprintln!("mse {:.6} over {} windows", report.mse_after, targets.len());
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> CliResult {
    let cfg = ServiceConfig::load(a.config.as_deref()).map_err(|e| user(e.to_string()))?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| internal(e.to_string()))?;
    let listen = cfg.listen.clone();
    runtime
        .block_on(async move {
            eprintln!("serving on {listen}");
            aftercast_service::serve(cfg, shutdown_signal()).await
        })
        .map_err(|e: ServeError| internal(e.to_string()))?;
    eprintln!("stopped");
    Ok(())
}

async fn shutdown_signal() {
    let interrupt = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        match signal(SignalKind::terminate()) {
            Ok(mut term) => {
                tokio::select! {
                    _ = interrupt => {}
                    _ = term.recv() => {}
                }
            }
            Err(_) => interrupt.await,
        }
    }
    #[cfg(not(unix))]
    interrupt.await;
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    let result = match cli.command {
        Command::Optimize(a) => cmd_optimize(a),
        Command::Apply(a) => cmd_apply(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Serve(a) => cmd_serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
