use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use pet_core::agent::training::{pretrain_offline, AgentSetup};
use pet_core::experiment::runner::{evaluate_checkpoint, measured_flows, run_ablation, run_experiment, summarize_dir};
use pet_core::experiment::{Bucket, RunOptions, Scenario};
use pet_core::par::Parallelism;
use pet_core::sim::{SimConfig, Topology};
use pet_core::traffic::write_trace;
use pet_core::units::NS_PER_MS;

#[derive(Parser)]
#[command(name = "pet", version, about = "Leaf-spine ECN tuning experiments")]
struct Cli {
    /// Run jobs one after another instead of across threads.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every (load, seed, scheme) job of a scenario.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
    },
    /// Train a shared model offline on replayed traces.
    Pretrain {
        /// Trace CSV (`start_ns,src,dst,size_bytes`); repeat for several.
        #[arg(long, required = true)]
        trace: Vec<PathBuf>,
        #[arg(long)]
        episodes: usize,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Scenario supplying topology, hyperparameters and reward weights.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Per-episode drain after the last arrival, in ms.
        #[arg(long, default_value_t = 10)]
        drain_ms: u64,
        /// Where to write the per-episode training report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a scenario.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
    },
    /// Recompute FCT and queue summaries for every bundle below a directory.
    Summarize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the measured-run trace of a scenario (first load level).
    Trace {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Compare PET with incast and ratio state components zeroed out.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
    },
}

fn load(config: &Path) -> Result<Scenario> {
    Scenario::load(config).with_context(|| format!("invalid scenario {}", config.display()))
}

fn options(out: &Path, seed_offset: u64, sequential: bool) -> RunOptions {
    let mut o = RunOptions::new(out);
    o.seed_offset = seed_offset;
    if sequential {
        o.parallelism = Parallelism::Sequential;
    }
    o
}

fn print_summaries(s: &[pet_core::experiment::JobSummary]) {
    for j in s {
        let all = j.bucket(Bucket::All);
        println!(
            "{:<16} load {:.2} seed {:<4} flows {:<6} mean norm FCT {} p99 mice {}",
            j.scheme,
            j.load,
            j.seed,
            all.count,
            all.mean_norm.map(|v| format!("{v:.3}")).unwrap_or("-".into()),
            j.bucket(Bucket::Small).p99_norm.map(|v| format!("{v:.3}")).unwrap_or("-".into()),
        );
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PET_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Run { config, out, seed_offset } => {
            let sc = load(&config)?;
            print_summaries(&run_experiment(&sc, &options(&out, seed_offset, cli.sequential))?);
        }
        Cmd::Pretrain {
            trace,
            episodes,
            out,
            config,
            seed,
            drain_ms,
            report,
        } => {
            let (cfg, setup) = match config {
                Some(c) => {
                    let sc = load(&c)?;
                    (sc.sim_config(seed)?, sc.setup)
                }
                None => (SimConfig::new(Topology::default(), seed), AgentSetup::default()),
            };
            let rep = pretrain_offline(&trace, episodes, &out, &cfg, &setup, drain_ms * NS_PER_MS)?;
            for (i, r) in rep.episode_rewards.iter().enumerate() {
                println!("episode {i}: mean reward {r:.5}");
            }
            if let Some(p) = report {
                rep.write_csv(&p)?;
            }
        }
        Cmd::Eval {
            ckpt,
            config,
            out,
            seed_offset,
        } => {
            let sc = load(&config)?;
            print_summaries(&evaluate_checkpoint(&sc, &ckpt, &options(&out, seed_offset, cli.sequential))?);
        }
        Cmd::Summarize { input, out } => {
            let n = summarize_dir(&input, &out)?;
            println!("summarized {n} runs into {}", out.display());
        }
        Cmd::Trace { config, out, seed } => {
            let sc = load(&config)?;
            let flows = measured_flows(&sc, 0, seed)?;
            write_trace(&out, &flows)?;
            println!("wrote {} flows to {}", flows.len(), out.display());
        }
        Cmd::Ablate {
            config,
            out,
            seed_offset,
        } => {
            let sc = load(&config)?;
            for r in run_ablation(&sc, &options(&out, seed_offset, cli.sequential))? {
                println!(
                    "{:<16} seed {:<4} mean norm FCT {} vs full {}",
                    r.variant,
                    r.seed,
                    r.mean_norm_all.map(|v| format!("{v:.3}")).unwrap_or("-".into()),
                    r.vs_full.map(|v| format!("{:+.1}%", v * 100.0)).unwrap_or("-".into()),
                );
            }
        }
    }
    Ok(())
}
