use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dmo_core::checkpoint::Archive;
use dmo_core::config::ExperimentConfig;
use dmo_core::harness;
use dmo_core::Result;

#[derive(Parser)]
#[command(name = "dmo", about = "Decoupled forward-backward model-based policy optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a configuration.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        algo: Option<String>,
        #[arg(long)]
        env: Option<String>,
        /// Run only this seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        num_actors: Option<usize>,
        #[arg(long)]
        total_env_steps: Option<u64>,
        /// Continue from a checkpoint written by an earlier run of the same seed.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate the mean-action policy stored in a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
    },
    /// Train while logging gradient cosines every `report_every` epochs.
    CosineStudy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate run logs into per-epoch means and 95% intervals.
    Summarize {
        #[arg(long)]
        glob: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&PathBuf>, overrides: &[(&str, String)]) -> Result<ExperimentConfig> {
    let cfg = match path {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.with_overrides(overrides)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, algo, env, seed, out, horizon, num_actors, total_env_steps, resume } => {
            let mut overrides: Vec<(&str, String)> = Vec::new();
            if let Some(a) = algo {
                overrides.push(("algo", a));
            }
            if let Some(e) = env {
                overrides.push(("env", e));
            }
            if let Some(s) = seed {
                overrides.push(("seeds", s.to_string()));
            }
            if let Some(o) = out {
                overrides.push(("out_dir", o.to_string_lossy().into_owned()));
            }
            if let Some(h) = horizon {
                overrides.push(("horizon", h.to_string()));
            }
            if let Some(n) = num_actors {
                overrides.push(("num_actors", n.to_string()));
            }
            if let Some(t) = total_env_steps {
                overrides.push(("total_env_steps", t.to_string()));
            }
            let cfg = load_config(config.as_ref(), &overrides)?;
            let outcomes = match resume {
                Some(path) => {
                    let archive = Archive::read(&path)?;
                    let seed = cfg.seeds[0];
                    vec![harness::run_seed(&cfg, seed, Some(&archive))?]
                }
                None => harness::run(&cfg)?,
            };
            for o in outcomes {
                let ret = o.last.and_then(|m| m.episodic_return).map_or("n/a".to_string(), |r| format!("{r:.4}"));
                println!("seed {}: {} (last episodic return {ret})", o.seed, o.csv.display());
            }
        }
        Command::Eval { ckpt, episodes } => {
            let r = harness::evaluate_checkpoint(&ckpt, episodes)?;
            println!("episodes {episodes}");
            println!("mean_return {}", r.mean_return);
            println!("mean_discounted_return {}", r.mean_discounted_return);
        }
        Command::CosineStudy { config, out } => {
            let overrides: Vec<(&str, String)> =
                out.map(|o| vec![("out_dir", o.to_string_lossy().into_owned())]).unwrap_or_default();
            let cfg = load_config(config.as_ref(), &overrides)?;
            for o in harness::cosine_study(&cfg)? {
                println!("seed {}: {}", o.seed, o.csv.display());
            }
        }
        Command::Summarize { glob, out } => {
            let n = harness::summarize_glob(&glob, &out)?;
            println!("summarized {n} runs into {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
