use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use phm_cli::config::{Ablation, Arch, ExperimentConfig};
use phm_cli::stages::Pipeline;
use phm_cli::store::Store;
use phm_core::features::{FeatureVariant, Split};

#[derive(Parser, Debug)]
#[command(name = "phm", version, about = "Hybrid prognostics pipeline: simulate, calibrate, train, evaluate")]
struct Cli {
    /// JSON file matching ExperimentConfig; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Development units to keep, e.g. 16,18,20.
    #[arg(long, global = true, value_delimiter = ',')]
    units: Option<Vec<u32>>,
    /// DATA_DRIVEN, PLUS_XS_HAT, PLUS_XV_HAT or FULL_HYBRID.
    #[arg(long, global = true)]
    variant: Option<FeatureVariant>,
    /// FNN or CNN.
    #[arg(long, global = true)]
    arch: Option<Arch>,
    /// White noise on θ̂ at this signal-to-noise ratio.
    #[arg(long, global = true, allow_hyphen_values = true)]
    snr_db: Option<f64>,
    /// Linear drift on θ̂ with this intensity.
    #[arg(long, global = true, allow_hyphen_values = true)]
    alpha_bias: Option<f64>,
    /// Calibrate through the fitted response surrogate.
    #[arg(long, global = true)]
    surrogate: bool,
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SplitArg {
    Dev,
    Test,
    All,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Simulate the fleet and write one CSV per unit.
    Generate,
    /// Estimate θ̂ with the filter for every unit of a split.
    Calibrate {
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
    /// Train one network per seed.
    Train,
    /// Score the trained networks on the test units.
    Evaluate,
    /// Run an ablation study.
    Ablate {
        /// dataset-size, feature-set or calibration-quality.
        #[arg(long)]
        study: Ablation,
    },
    /// Collect metrics and ablations into report.json / report.csv.
    Report,
    /// generate, calibrate dev, train, calibrate test, evaluate, report.
    Run,
}

impl Cli {
    fn command_name(&self) -> &'static str {
        match self.cmd {
            Cmd::Generate => "generate",
            Cmd::Calibrate { .. } => "calibrate",
            Cmd::Train => "train",
            Cmd::Evaluate => "evaluate",
            Cmd::Ablate { .. } => "ablate",
            Cmd::Report => "report",
            Cmd::Run => "run",
        }
    }

    fn experiment_config(&self) -> Result<ExperimentConfig> {
        let mut cfg: ExperimentConfig = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.fleet.master_seed = s;
        }
        if let Some(ids) = &self.units {
            for id in ids {
                anyhow::ensure!(cfg.fleet.dev.iter().any(|u| u.unit_id == *id), "unknown development unit {id}");
            }
            cfg.fleet.dev.retain(|u| ids.contains(&u.unit_id));
            cfg.small_dev_units.retain(|u| ids.contains(u));
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if let Some(a) = self.arch {
            cfg.arch = a;
        }
        if self.snr_db.is_some() {
            cfg.perturbation.snr_db = self.snr_db;
        }
        if self.alpha_bias.is_some() {
            cfg.perturbation.alpha_bias = self.alpha_bias;
        }
        if self.surrogate {
            cfg.use_surrogate = true;
        }
        Ok(cfg)
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.experiment_config()?;
    let mut p = Pipeline::open(cfg, Store::new(&cli.out)?)?;
    match &cli.cmd {
        Cmd::Generate => p.generate().map(drop),
        Cmd::Calibrate { split } => {
            if matches!(split, SplitArg::Dev | SplitArg::All) {
                p.calibrate(Split::Dev)?;
            }
            if matches!(split, SplitArg::Test | SplitArg::All) {
                p.calibrate(Split::Test)?;
            }
            Ok(())
        }
        Cmd::Train => p.train().map(drop),
        Cmd::Evaluate => p.evaluate().map(drop),
        Cmd::Ablate { study } => p.ablate(*study).map(drop),
        Cmd::Report => p.report().map(drop),
        Cmd::Run => p.run_all(),
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    use phm_core::Error as E;
    match e.downcast_ref::<E>() {
        Some(E::Domain(_)) => "domain",
        Some(E::ModelRange(_)) => "model_range",
        Some(E::Config(_)) => "config",
        Some(E::Shape(_)) => "shape",
        Some(E::Numeric(_)) => "numeric",
        Some(E::Cholesky { .. }) => "cholesky",
        Some(E::Generation(_)) => "generation",
        Some(E::Io(_)) => "io",
        Some(E::Json(_)) => "json",
        None if e.downcast_ref::<std::io::Error>().is_some() => "io",
        None => "pipeline",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = json!({
                "status": "error",
                "command": cli.command_name(),
                "kind": error_kind(&e),
                "message": format!("{e:#}"),
            });
            eprintln!("{record}");
            ExitCode::from(if error_kind(&e) == "config" { 2 } else { 1 })
        }
    }
}
