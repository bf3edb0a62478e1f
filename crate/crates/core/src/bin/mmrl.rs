use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mmrl_core::cli::{eval_checkpoint, exit_code, export_checkpoint, train_to_dir, EvalRequest};
use mmrl_core::config::RunConfig;
use mmrl_core::env::TaskKind;
use mmrl_core::eval::AlphaSource;
use mmrl_core::verify::{run_suite, VerifyOptions, SUITES};
use mmrl_core::{Error, Result};

#[derive(Parser)]
#[command(name = "mmrl", version, about = "Event-driven behavioral diversity for cooperative multi-agent RL")]
struct Cli {
    /// Master seed; overrides the configuration file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a configuration file.
    Train {
        config: PathBuf,
        /// Environment-step budget; overrides `train.total_steps`.
        #[arg(long)]
        steps: Option<u64>,
        /// Output directory for the checkpoint, metrics and metadata.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Query the hypernetwork only at episode start.
        #[arg(long)]
        single_query: bool,
        /// Suppress the per-update progress line.
        #[arg(long)]
        quiet: bool,
    },
    /// Roll out a checkpoint and print a summary.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Configuration file whose `[eval]` section supplies defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Perturbations, e.g. `remove:first_on_plate2,target:0.8@100`.
        #[arg(long)]
        perturb: Option<String>,
        /// Diversity target; defaults to the geometric mean of the training range.
        #[arg(long)]
        nmd_des: Option<f64>,
        /// Write per-step trajectory records here (JSON lines).
        #[arg(long)]
        traj_out: Option<PathBuf>,
        /// Sample actions instead of acting with the mean.
        #[arg(long)]
        stochastic: bool,
        /// Override the checkpoint's query mode.
        #[arg(long)]
        single_query: Option<bool>,
        /// Print the summary as one JSON object.
        #[arg(long)]
        json: bool,
    },
    /// Run the numerical verification suites.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
        /// Test fixture for the harness itself.
        #[arg(long, hide = true)]
        mutate: Option<Mutation>,
    },
    /// Export the behaviors emitted by every hypernetwork query.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Task the checkpoint must have been trained on.
        #[arg(long)]
        env: Option<String>,
        #[arg(long, default_value_t = 128)]
        episodes: usize,
        /// Sample actions instead of acting with the mean.
        #[arg(long)]
        stochastic: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mutation {
    NmdGradSign,
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("MMRL_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Usage(format!("MMRL_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Usage(e.to_string()))
}

fn run(cli: Cli) -> Result<bool> {
    init_threads()?;
    match cli.command {
        Command::Train {
            config,
            steps,
            out,
            single_query,
            quiet,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            if let Some(s) = steps {
                cfg.train.total_steps = s;
            }
            cfg.train.single_query |= single_query;
            let outcome = train_to_dir(&cfg, &out, |m| {
                if !quiet {
                    eprintln!(
                        "update {} steps {} reward {:.3} completion {:.2} nmd {:.3}/{:.3} entropy {:.3} ({:.1}s)",
                        m.update,
                        m.env_steps,
                        m.mean_reward,
                        m.completion_rate,
                        m.nmd_realized_mean,
                        m.nmd_target_mean,
                        m.entropy,
                        m.seconds
                    );
                }
            })?;
            println!(
                "trained {} steps in {} updates; checkpoint {}",
                outcome.metadata.env_steps,
                outcome.metadata.updates,
                outcome.checkpoint.display()
            );
            Ok(true)
        }
        Command::Eval {
            checkpoint,
            config,
            episodes,
            perturb,
            nmd_des,
            traj_out,
            stochastic,
            single_query,
            json,
        } => {
            let defaults = match &config {
                Some(path) => RunConfig::load(path)?.eval,
                None => RunConfig::default().eval,
            };
            let req = EvalRequest {
                checkpoint,
                episodes: episodes.unwrap_or(defaults.episodes),
                seed: cli.seed.unwrap_or(0),
                perturb: perturb.unwrap_or(defaults.perturb),
                nmd_des: nmd_des.or(defaults.nmd_des),
                traj_out,
                stochastic: stochastic || !defaults.deterministic,
                single_query,
            };
            let s = eval_checkpoint(&req)?;
            if s.alpha_source == AlphaSource::Ema {
                eprintln!(
                    "note: a single episode has no batch to normalize over; the diversity scalar is the stored \
                     training average, so realized diversity only approximates the target"
                );
            }
            if json {
                println!("{}", serde_json::to_string(&s)?);
            } else {
                println!("episodes: {}", s.episodes);
                println!("completion_rate: {:.4}", s.completion_rate);
                println!("mean_reward: {:.4}", s.mean_reward);
                println!("mean_episode_len: {:.2}", s.mean_episode_len);
                println!("hypernet_calls: {}", s.hypernet_calls);
                println!("nmd_des: {}", s.nmd_des);
            }
            Ok(true)
        }
        Command::Verify { suite, mutate } => {
            let opts = VerifyOptions {
                seed: cli.seed.unwrap_or(0),
                mutate_grad_sign: matches!(mutate, Some(Mutation::NmdGradSign)),
            };
            let names: Vec<&str> = if suite == "all" {
                SUITES.to_vec()
            } else {
                vec![suite.as_str()]
            };
            let (mut checks, mut failed, mut suites_failed) = (0, 0, 0);
            for name in &names {
                let rep = run_suite(name, &opts)?;
                for line in rep.lines() {
                    println!("{line}");
                }
                checks += rep.checks.len();
                failed += rep.checks.iter().filter(|c| !c.passed).count();
                suites_failed += usize::from(!rep.passed());
            }
            println!(
                "{} suites, {checks} checks, {failed} failed ({suites_failed} suites failing)",
                names.len()
            );
            Ok(failed == 0)
        }
        Command::Export {
            checkpoint,
            env,
            episodes,
            stochastic,
            out,
        } => {
            let env = env.map(|e| e.parse::<TaskKind>()).transpose()?;
            let n = export_checkpoint(&checkpoint, env, episodes, cli.seed.unwrap_or(0), stochastic, &out)?;
            println!("wrote {n} records to {}", out.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
