use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flowmamba_cli::commands::{self, AblateOptions, BenchOptions, EvalOptions, GenOptions, TrainOptions};
use flowmamba_cli::{Result, RunConfig};
use flowmamba_core::isu::UpdateKind;

#[derive(Parser)]
#[command(
    name = "flowmamba",
    version,
    about = "Synthetic scene flow with state-space update operators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by the commands that build a network.
#[derive(clap::Args)]
struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one option; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Update operator: conv-gru, mamba-uni, bimamba, isu or isu-fio.
    #[arg(long)]
    update: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = commands::resolve_config(self.config.as_deref(), &self.set)?;
        if let Some(u) = &self.update {
            cfg.set("update", u)?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scene files.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = GenOptions::default().objects)]
        objects: usize,
        #[arg(long, default_value_t = GenOptions::default().points_per_object)]
        points_per_object: usize,
        /// identity, translate[:m], rotate30, rotate:<deg> or rigid.
        #[arg(long, default_value = "rigid")]
        transform: String,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0.0)]
        occlusion: f64,
        #[arg(long, default_value_t = GenOptions::default().extent)]
        extent: f64,
    },
    /// Train on a directory of scenes.
    Train {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        steps: Option<u64>,
        /// Network initialization seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint after 1..N iterations.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Train and evaluate several update operators on the same scenes.
    Ablate {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "conv-gru,mamba-uni,bimamba,isu,isu-fio"
        )]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Time the scan kernels and cross-check them.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048,4096")]
        lengths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "4,16")]
        states: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 4)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            out,
            seed,
            count,
            objects,
            points_per_object,
            transform,
            noise,
            occlusion,
            extent,
        } => {
            let paths = commands::gen(&GenOptions {
                out: out.clone(),
                seed,
                count,
                objects,
                points_per_object,
                transform,
                noise,
                occlusion,
                extent,
            })?;
            println!("wrote {} scene(s) to {}", paths.len(), out.display());
        }
        Command::Train {
            scenes,
            out,
            cfg,
            steps,
            seed,
        } => {
            let mut config = cfg.resolve()?;
            if let Some(s) = steps {
                config.train.total_steps = s;
            }
            if let Some(s) = seed {
                config.network.seed = s;
            }
            let log = commands::train(&TrainOptions {
                scenes,
                out: out.clone(),
                config,
            })?;
            match (log.first(), log.last()) {
                (Some(a), Some(b)) => println!("loss {} -> {} over {} steps", a.loss, b.loss, log.len()),
                _ => println!("wrote initial checkpoint"),
            }
        }
        Command::Eval {
            checkpoint,
            scenes,
            out,
            cfg,
            iters,
        } => {
            let rows = commands::eval(&EvalOptions {
                checkpoint,
                scenes,
                out: out.clone(),
                config: cfg.resolve()?,
                iters,
            })?;
            let last = rows.iter().map(|r| r.iteration).max().unwrap_or(0);
            let finals: Vec<f64> = rows
                .iter()
                .filter(|r| r.iteration == last)
                .map(|r| r.metrics.epe3d)
                .collect();
            println!(
                "mean epe3d after {last} iteration(s): {}",
                finals.iter().sum::<f64>() / finals.len().max(1) as f64
            );
        }
        Command::Ablate {
            scenes,
            out,
            cfg,
            steps,
            variants,
            seeds,
        } => {
            let mut config = cfg.resolve()?;
            if let Some(s) = steps {
                config.train.total_steps = s;
            }
            let variants = variants
                .iter()
                .map(|v| v.parse::<UpdateKind>())
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let rows = commands::ablate(&AblateOptions {
                scenes,
                out,
                config,
                variants: variants.clone(),
                seeds,
            })?;
            for v in variants {
                println!(
                    "{:10} {}",
                    v.name(),
                    commands::variant_mean(&rows, v).unwrap_or(f64::NAN)
                );
            }
        }
        Command::Bench {
            lengths,
            states,
            repeats,
            channels,
            seed,
            out,
        } => {
            let rows = commands::bench(&BenchOptions {
                lengths,
                states,
                repeats,
                channels,
                seed,
                out,
            })?;
            println!("kernel,L,S,ns_per_element,max_abs_diff");
            for r in rows {
                println!(
                    "{},{},{},{:.4},{:e}",
                    r.kernel.name(),
                    r.len,
                    r.state,
                    r.ns_per_element,
                    r.max_abs_diff
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
