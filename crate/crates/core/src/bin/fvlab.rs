use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fvlab::dataset::BackgroundMode;
use fvlab::experiment::{DataSource, Experiment, ExperimentConfig};
use fvlab::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;

#[derive(Parser)]
#[command(name = "fvlab", version, about = "Background-variant training and feature visualization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON). Defaults to <out>/config.json if present.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
    /// Worker threads (affects wall time only).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the source dataset to <out>/data.
    GenerateData {
        #[command(flatten)]
        common: Common,
        /// Tie background hue to the class with this probability.
        #[arg(long, value_name = "RHO")]
        correlated: Option<f64>,
    },
    /// Build the four training-set variants.
    BuildVariants {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model per variant.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Generate class visualizations from every model.
    Visualize {
        #[command(flatten)]
        common: Common,
    },
    /// Assemble figure grids and report.csv.
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// Run every stage.
    Run {
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common) -> Result<Experiment, Error> {
    let out_hint = common.out.clone();
    let mut config = match (&common.config, &out_hint) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(out)) if out.join("config.json").is_file() => ExperimentConfig::load(&out.join("config.json"))?,
        _ => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.master_seed = seed;
    }
    let out = out_hint
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))?;
    Experiment::new(config, out)
}

fn execute(command: Command) -> Result<(), Error> {
    let common = match &command {
        Command::GenerateData { common, .. }
        | Command::BuildVariants { common }
        | Command::Train { common }
        | Command::Visualize { common }
        | Command::Report { common }
        | Command::Run { common } => common.clone(),
    };
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let mut exp = resolve(&common)?;
    match command {
        Command::GenerateData { correlated, .. } => {
            if let Some(rho) = correlated {
                match &mut exp.config.dataset {
                    DataSource::Synthetic(cfg) => {
                        cfg.background_mode = BackgroundMode::Correlated;
                        cfg.correlation = rho;
                    }
                    DataSource::VocStyle { .. } => {
                        return Err(Error::Config("--correlated applies only to synthetic data".into()))
                    }
                }
                exp = Experiment::new(exp.config, exp.out)?;
            }
            let summary = exp.generate_data(common.force)?;
            println!(
                "wrote {} images at {}x{} to {}",
                summary.images,
                summary.resolution,
                summary.resolution,
                exp.out.join("data").display()
            );
            for (name, count) in summary.class_counts {
                println!("  {name}: {count}");
            }
        }
        Command::BuildVariants { .. } => {
            exp.build_variants()?;
            println!("wrote variants to {}", exp.out.join("variants").display());
        }
        Command::Train { .. } => {
            for (kind, m) in exp.train()? {
                println!(
                    "{kind:>8}  train_acc {:.4}  val_acc {:.4}  loss {:.4}",
                    m.train_acc, m.val_acc, m.final_loss
                );
            }
        }
        Command::Visualize { .. } => {
            exp.visualize()?;
            println!("wrote visualizations to {}", exp.out.join("viz").display());
        }
        Command::Report { .. } => {
            exp.report()?;
            println!("wrote figures and report.csv to {}", exp.out.display());
        }
        Command::Run { .. } => {
            exp.run(common.force)?;
            println!("experiment complete: {}", exp.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(EXIT_CONFIG),
                _ => ExitCode::from(EXIT_STAGE),
            }
        }
    }
}
