//! Command-line front end: dataset generation, score preprocessing, model
//! training, prediction, order selection, stability analysis and evaluation.
//! Every subcommand is a thin shell over the library; file formats are the
//! library's CSV and versioned JSON documents.
//!
//! Exit codes: 0 success, 1 validation, 2 numerical failure, 3 I/O.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tvsq_core::analysis;
use tvsq_core::dataprep::{self, io};
use tvsq_core::error::Error;
use tvsq_core::eval;
use tvsq_core::ident::{self, TrainConfig};
use tvsq_core::model::InitPolicy;
use tvsq_core::order;
use tvsq_core::synth::{self, GroundTruthSpec};

#[derive(Parser)]
#[command(name = "tvsq", version, about = "Time-varying subjective quality modeling toolkit")]
struct Cli {
    /// Log level: error, warn, info, debug, trace
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic ground-truth dataset from a spec file
    Generate(GenerateArgs),
    /// Aggregate subject score panels into TVSQ traces
    Prep(PrepArgs),
    /// Train a model on a dataset
    Train(TrainArgs),
    /// Predict a TVSQ trace from an STSQ series
    Predict(PredictArgs),
    /// Scan candidate model orders
    Order(OrderArgs),
    /// Stability and nonlinearity diagnostics for a trained model
    Analyze(AnalyzeArgs),
    /// Evaluate a model (and optional pooling baselines) on a dataset
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Ground-truth spec JSON
    #[arg(long)]
    spec: PathBuf,
    /// Output directory for the dataset and truth parameters
    #[arg(long)]
    out: PathBuf,
    /// Override the spec's seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PrepArgs {
    /// Subject scores CSV (subject,video,t,score)
    #[arg(long)]
    scores: PathBuf,
    /// Reference scores CSV (subject,t,score)
    #[arg(long)]
    reference: PathBuf,
    /// Output directory for per-video TVSQ traces
    #[arg(long)]
    out: PathBuf,
    /// Session label recorded in the stats file
    #[arg(long, default_value = "session")]
    session: String,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest JSON
    #[arg(long)]
    dataset: PathBuf,
    /// Model order r
    #[arg(long)]
    order: usize,
    /// Output directory for model.json and report.json
    #[arg(long)]
    out: PathBuf,
    /// Training configuration JSON (partial TrainConfig; unknown keys rejected)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from a previously trained model instead of the default init
    #[arg(long)]
    warm_start: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// Trained model JSON
    #[arg(long)]
    model: PathBuf,
    /// Input STSQ CSV (t,stsq or a full trace file)
    #[arg(long)]
    stsq: PathBuf,
    /// Output prediction CSV
    #[arg(long)]
    out: PathBuf,
    /// Initialization policy: zero or hold
    #[arg(long, default_value = "zero")]
    init: String,
}

#[derive(Args)]
struct OrderArgs {
    /// Dataset manifest JSON
    #[arg(long)]
    dataset: PathBuf,
    /// Candidate orders, comma separated (e.g. 1,2,3,4,5)
    #[arg(long, value_delimiter = ',')]
    orders: Vec<usize>,
    /// Output scan JSON
    #[arg(long)]
    out: PathBuf,
    /// Training configuration JSON
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Trained model JSON
    #[arg(long)]
    model: PathBuf,
    /// Output directory for stability.json and plot CSVs
    #[arg(long)]
    out: PathBuf,
    /// Impulse truncation tolerance
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained model JSON (optional when --folds-by-group is given)
    #[arg(long)]
    model: Option<PathBuf>,
    /// Dataset manifest JSON
    #[arg(long)]
    dataset: PathBuf,
    /// Output metrics JSON
    #[arg(long)]
    out: PathBuf,
    /// Also evaluate the max/min/median/mean 12-second pooling baselines
    #[arg(long)]
    baselines: bool,
    /// Leave-one-group-out protocol: train on the other groups, evaluate on
    /// each held-out group (uses the manifest's group labels)
    #[arg(long)]
    folds_by_group: bool,
    /// Model order for --folds-by-group training
    #[arg(long)]
    order: Option<usize>,
    /// Training configuration JSON for --folds-by-group
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Parse { .. } | Error::Json(_) => 3,
        Error::Unstable { .. } => 2,
        Error::TraceContext { source, .. } => exit_code(source),
        _ => 1,
    }
}

fn load_train_config(path: Option<&Path>) -> Result<TrainConfig, Error> {
    let config = match path {
        Some(path) => io::load_json::<TrainConfig>(path)?,
        None => TrainConfig::default(),
    };
    config.validate()?;
    Ok(config)
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Generate(args) => cmd_generate(args),
        Command::Prep(args) => cmd_prep(args),
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Order(args) => cmd_order(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Eval(args) => cmd_eval(args),
    }
}

fn cmd_generate(args: GenerateArgs) -> Result<(), Error> {
    let mut spec: GroundTruthSpec = io::load_json(&args.spec)?;
    if let Some(seed) = args.seed {
        spec.target.seed = seed;
    }
    let truth = synth::generate_ground_truth(&spec)?;
    std::fs::create_dir_all(&args.out)?;
    let manifest = io::save_dataset(
        &args.out,
        &truth.dataset,
        None,
        Some("synthetic ground-truth dataset"),
    )?;
    io::save_params(&args.out.join("truth_params.json"), &truth.generator)?;
    println!(
        "wrote {} traces ({} s each) under {}",
        truth.dataset.n_traces(),
        truth.dataset.trace_len(),
        manifest.parent().unwrap_or(&args.out).display()
    );
    Ok(())
}

fn cmd_prep(args: PrepArgs) -> Result<(), Error> {
    let panel = io::read_panel_csv(&args.scores, &args.reference, &args.session)?;
    let result = dataprep::aggregate_tvsq(&panel)?;
    std::fs::create_dir_all(&args.out)?;
    for (j, trace) in result.traces.iter().enumerate() {
        io::write_tvsq_csv(&args.out.join(format!("video_{:02}.csv", j + 1)), trace)?;
    }
    io::save_json(
        &args.out.join("stats.json"),
        &serde_json::json!({
            "session": panel.session,
            "stats": result.stats,
            "warnings": result.warnings,
        }),
    )?;
    for warning in &result.warnings {
        log::warn!("{warning}");
    }
    println!("wrote {} TVSQ traces under {}", result.traces.len(), args.out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let config = load_train_config(args.config.as_deref())?;
    let loaded = io::load_dataset(&args.dataset)?;
    let report = match args.warm_start {
        Some(path) => {
            let theta0 = io::load_params(&path)?;
            if theta0.r != args.order {
                return Err(Error::Contract(format!(
                    "warm start has order {} but --order is {}",
                    theta0.r, args.order
                )));
            }
            ident::train_with_start(&loaded.data, theta0, &config)?
        }
        None => ident::train(&loaded.data, args.order, &config)?,
    };
    std::fs::create_dir_all(&args.out)?;
    io::save_params(&args.out.join("model.json"), &report.theta_star)?;
    io::save_report(&args.out.join("report.json"), &report)?;
    if !report.stalled_stages.is_empty() {
        log::warn!("descent stalled at stages {:?}", report.stalled_stages);
    }
    println!(
        "trained r={} model: outage {:.4}, rho {:.4} ({} stages, {:.1} s)",
        report.theta_star.r,
        report.final_outage,
        report.theta_star.rho(),
        report.objective_history.len(),
        report.wall_time_s
    );
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<(), Error> {
    let params = io::load_params(&args.model)?;
    let stsq = io::read_stsq_csv(&args.stsq)?;
    let policy = match args.init.as_str() {
        "zero" => InitPolicy::ZeroState,
        "hold" => InitPolicy::HoldFirstInput,
        other => {
            return Err(Error::Contract(format!(
                "unknown init policy '{other}' (expected zero or hold)"
            )))
        }
    };
    let pred = tvsq_core::model::simulate(&stsq, &params, policy)?;
    io::write_prediction_csv(&args.out, &pred)?;
    println!("wrote {} predictions ({} warm-up) to {}", pred.values.len(), pred.warmup, args.out.display());
    Ok(())
}

fn cmd_order(args: OrderArgs) -> Result<(), Error> {
    let config = load_train_config(args.config.as_deref())?;
    let loaded = io::load_dataset(&args.dataset)?;
    let scan = order::select_order(&loaded.data, &args.orders, &config)?;
    io::save_json(&args.out, &scan)?;
    println!("{:>4}  {:>12}  {:>12}", "r", "Q_lip", "L_des");
    for i in 0..scan.candidates.len() {
        println!(
            "{:>4}  {:>12.6}  {:>12.6}",
            scan.candidates[i], scan.lipschitz[i], scan.mdl[i]
        );
    }
    println!("selected r = {}", scan.selected);
    for warning in &scan.warnings {
        log::warn!("{warning}");
    }
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), Error> {
    let params = io::load_params(&args.model)?;
    let report = analysis::stability_report(&params, args.tol)?;
    std::fs::create_dir_all(&args.out)?;
    io::save_json(&args.out.join("stability.json"), &report)?;
    io::write_impulse_csv(&args.out.join("impulse.csv"), &report.impulse)?;
    let input_grid: Vec<f64> = (0..=200).map(|i| i as f64 * 0.5).collect();
    let (v_lo, v_hi) = bounded_latent_grid(&report);
    let latent_grid: Vec<f64> = (0..=200)
        .map(|i| v_lo + (v_hi - v_lo) * i as f64 / 200.0)
        .collect();
    let profile = analysis::nonlinearity_profile(&params, &input_grid, &latent_grid);
    io::write_profile_csv(&args.out.join("input_profile.csv"), &profile.input)?;
    io::write_profile_csv(&args.out.join("output_profile.csv"), &profile.output)?;
    println!(
        "rho {:.6}, tau {:.4} s, |h|_1 {:.6}, peak lag {}, output range [{:.2}, {:.2}]",
        report.rho,
        report.tau,
        report.l1_norm,
        report.peak_lag,
        report.output_range.0,
        report.output_range.1
    );
    Ok(())
}

fn bounded_latent_grid(report: &analysis::StabilityReport) -> (f64, f64) {
    // latent grid spanning the reachable range for RDMOS inputs
    let reach = report.l1_norm * 110.0;
    (-0.1 * reach, reach)
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let loaded = io::load_dataset(&args.dataset)?;
    let mut doc = serde_json::Map::new();
    if args.folds_by_group {
        let r = args.order.ok_or_else(|| {
            Error::Contract("--folds-by-group requires --order".into())
        })?;
        let config = load_train_config(args.config.as_deref())?;
        let folds = eval::leave_one_group_out(&loaded.data, &loaded.groups, r, &config)?;
        doc.insert("folds".into(), serde_json::to_value(&folds)?);
    } else {
        let model_path = args
            .model
            .as_ref()
            .ok_or_else(|| Error::Contract("--model is required without --folds-by-group".into()))?;
        let params = io::load_params(model_path)?;
        let report = eval::evaluate_params(&params, &loaded.data)?;
        doc.insert("model".into(), serde_json::to_value(&report)?);
    }
    if args.baselines {
        let mut baselines = serde_json::Map::new();
        for kind in eval::PoolKind::ALL {
            let report = eval::evaluate_pooling(&loaded.data, eval::POOL_WINDOW, kind)?;
            baselines.insert(kind.name().into(), serde_json::to_value(&report)?);
        }
        doc.insert("baselines".into(), serde_json::Value::Object(baselines));
    }
    io::save_json(&args.out, &serde_json::Value::Object(doc))?;
    println!("wrote metrics to {}", args.out.display());
    Ok(())
}
