use std::path::PathBuf;
use std::process::ExitCode;

use cfiot::harness::{run_experiment, write_results, ExperimentId, ExperimentSpec, Preset, RunOptions, VERSION};
use cfiot::{Error, ScenarioConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cfiot", version = VERSION, about = "Cell-free massive-MIMO IoT experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Deterministic-equivalent vs Monte-Carlo MMSE uplink rates
    UlRmAccuracy(RunArgs),
    /// MMSE vs MR receivers and uplink max-min power control
    UlMaxminCompare(RunArgs),
    /// Energy efficiency of target-rate uplink power control
    UlTargetEe(RunArgs),
    /// Downlink predictor trained on some areas, applied to others
    DlNnAreaTransfer(RunArgs),
    /// Downlink predictor trained at fixed AP density
    DlDensityTransfer(RunArgs),
    /// Downlink energy efficiency of predicted powers on a large network
    DlEeLarge(RunArgs),
    /// Write a scenario (positions, gains, pilots) as JSON
    DumpScenario {
        /// Scenario TOML (M, K, D, seed, radio)
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(Args)]
struct RunArgs {
    /// TOML overlay on the preset
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Scenarios per evaluation network
    #[arg(long)]
    trials: Option<usize>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: PresetArg,
    /// Saved predictor to use instead of training one
    #[arg(long)]
    model: Option<PathBuf>,
    /// Print the resolved config and exit
    #[arg(long)]
    dry_run: bool,
}

fn stage_of(e: &Error) -> &'static str {
    match e {
        Error::Stage { stage, .. } => stage,
        Error::Config(_) | Error::TomlDe(_) | Error::Argument(_) => "config",
        Error::Io(_) => "io",
        _ => "run",
    }
}

fn resolve(id: ExperimentId, a: &RunArgs) -> Result<ExperimentSpec, Error> {
    let overlay = match &a.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::from(e).at_stage("config"))?),
        None => None,
    };
    let preset = match a.preset {
        PresetArg::Desk => Preset::Desk,
        PresetArg::Paper => Preset::Paper,
    };
    let mut spec = ExperimentSpec::resolve(id, preset, overlay.as_deref()).map_err(|e| e.at_stage("config"))?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(t) = a.trials {
        spec.trials = t;
    }
    if let Some(o) = &a.out {
        spec.out = o.clone();
    }
    if let Some(m) = &a.model {
        spec.model_path = Some(m.clone());
    }
    spec.validate().map_err(|e| e.at_stage("config"))?;
    Ok(spec)
}

fn run(id: ExperimentId, a: &RunArgs) -> Result<(), Error> {
    let spec = resolve(id, a)?;
    if a.dry_run {
        print!("{}", spec.to_toml_string()?);
        return Ok(());
    }
    let table = run_experiment(&spec, &RunOptions::default())?;
    let files = write_results(&spec, &table)?;
    println!("{} finished in {:.1} s", id, table.elapsed.as_secs_f64());
    for (k, v) in &table.metrics {
        println!("  {k} = {v:.6}");
    }
    for (k, v) in &table.ee {
        println!("  ee[{k}] = {v:.6e} bit/J");
    }
    println!("rates: {}", files.csv.display());
    println!("summary: {}", files.summary.display());
    if table.trained_model.is_some() {
        println!("model: {}", files.model.display());
    }
    Ok(())
}

fn dump(config: &PathBuf, out: &PathBuf) -> Result<(), Error> {
    let cfg = ScenarioConfig::load(config).map_err(|e| e.at_stage("config"))?;
    let scn = cfg.generate().map_err(|e| e.at_stage("generate"))?;
    std::fs::write(out, serde_json::to_string_pretty(&scn.dump())?).map_err(|e| Error::from(e).at_stage("write"))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::UlRmAccuracy(a) => run(ExperimentId::UlRmAccuracy, a),
        Command::UlMaxminCompare(a) => run(ExperimentId::UlMaxminCompare, a),
        Command::UlTargetEe(a) => run(ExperimentId::UlTargetEe, a),
        Command::DlNnAreaTransfer(a) => run(ExperimentId::DlNnAreaTransfer, a),
        Command::DlDensityTransfer(a) => run(ExperimentId::DlDensityTransfer, a),
        Command::DlEeLarge(a) => run(ExperimentId::DlEeLarge, a),
        Command::DumpScenario { config, out } => dump(config, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let stage = stage_of(&e);
            eprintln!("error [{stage}]: {e}");
            ExitCode::from(if stage == "config" { 2 } else { 1 })
        }
    }
}
