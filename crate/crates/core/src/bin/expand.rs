use std::path::PathBuf;
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use expand_core::agent::Algo;
use expand_core::dqn::Checkpoint;
use expand_core::orchestrator::metrics::{
    ablation_ordering, context_agnostic_negative, efficiency_claim, load_sweep, steps_to_threshold, StepsToThreshold, RETURN_THRESHOLD,
    RUNNING_WINDOW,
};
use expand_core::orchestrator::plot::write_plot;
use expand_core::orchestrator::{evaluate, run_experiment, FeedbackMode, OracleProvider, RunConfig, Trainer};
use expand_core::service::{port_from_env, spawn_server, HumanProvider, SessionHub};

#[derive(Parser)]
#[command(name = "expand", about = "Train and evaluate feedback-driven Q-learning agents on Pixel-Taxi")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Oracle,
    Human,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run training for one algorithm over a set of seeds.
    Train {
        #[arg(long)]
        algo: Option<String>,
        #[arg(long, default_value = "pixel-taxi")]
        env: String,
        #[arg(long)]
        episodes: Option<usize>,
        /// Number of seeds, 0..k.
        #[arg(long)]
        seeds: Option<u64>,
        /// Run exactly this seed.
        #[arg(long, conflicts_with = "seeds")]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        feedback: Option<Source>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seeds run as this many parallel processes.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Learning curves (PNG and CSV) from a run directory.
    Plot {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Steps-to-threshold per algorithm and the comparison criteria.
    Report {
        #[arg(long)]
        runs: PathBuf,
    },
    /// Greedy returns of a checkpointed agent.
    Evaluate {
        /// Checkpoint manifest, e.g. runs/expand/seed0/checkpoints/episode_00500.json
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn train(cfg: RunConfig, jobs: usize) -> anyhow::Result<()> {
    if jobs > 1 && cfg.seeds.len() > 1 {
        if cfg.feedback == FeedbackMode::Human {
            bail!("human feedback runs one seed at a time");
        }
        let exe = std::env::current_exe()?;
        std::fs::create_dir_all(&cfg.out)?;
        let cfg_path = cfg.out.join(format!("{}.toml", cfg.algo));
        std::fs::write(&cfg_path, cfg.to_toml()?)?;
        for chunk in cfg.seeds.chunks(jobs) {
            let children = chunk
                .iter()
                .map(|s| {
                    Command::new(&exe)
                        .args(["train", "--config"])
                        .arg(&cfg_path)
                        .args(["--seed", &s.to_string()])
                        .spawn()
                })
                .collect::<std::io::Result<Vec<_>>>()?;
            for mut c in children {
                if !c.wait()?.success() {
                    bail!("a seed process failed");
                }
            }
        }
        return Ok(());
    }
    for &seed in &cfg.seeds {
        let dir = cfg.seed_dir(seed);
        if dir.join("metrics.jsonl").exists() {
            bail!("{} already holds metrics; choose another --out", dir.display());
        }
        info!("training {} seed {} for {} episodes into {}", cfg.algo, seed, cfg.episodes, dir.display());
        let metrics = match cfg.feedback {
            FeedbackMode::Oracle => run_experiment(
                &cfg,
                seed,
                &mut OracleProvider {
                    density: cfg.feedback_density,
                },
                Some(&dir),
            )?,
            FeedbackMode::Human => {
                // the hub must share the trainer's buffer, so build both here
                let trainer = Trainer::new(cfg.clone(), seed)?;
                let hub = Arc::new(SessionHub::new(
                    trainer.feedback_buffer(),
                    Duration::from_secs_f64(cfg.session_budget_secs),
                    cfg.cell_px,
                ));
                spawn_server(hub.clone(), port_from_env()?)?;
                expand_core::orchestrator::run_with_trainer(&cfg, trainer, &mut HumanProvider { hub }, Some(&dir))?
            }
        };
        let s = steps_to_threshold(&metrics, RETURN_THRESHOLD, RUNNING_WINDOW);
        println!(
            "{} seed {}: {} episodes, {} env steps, threshold {} at {} steps",
            cfg.algo,
            seed,
            metrics.len(),
            metrics.last().map_or(0, |m| m.total_steps),
            if s.reached { "reached" } else { "not reached" },
            s.steps
        );
    }
    Ok(())
}

fn report(runs: &PathBuf) -> anyhow::Result<()> {
    let sweep = load_sweep(runs)?;
    if sweep.is_empty() {
        bail!("no metrics under {}", runs.display());
    }
    let steps = |algo: Algo| -> Vec<StepsToThreshold> {
        sweep
            .get(algo.as_str())
            .map(|r| r.iter().map(|m| steps_to_threshold(m, RETURN_THRESHOLD, RUNNING_WINDOW)).collect())
            .unwrap_or_default()
    };
    for (name, seeds) in &sweep {
        let s: Vec<String> = seeds
            .iter()
            .map(|m| {
                let r = steps_to_threshold(m, RETURN_THRESHOLD, RUNNING_WINDOW);
                format!("{}{}", r.steps, if r.reached { "" } else { "*" })
            })
            .collect();
        println!("{name:<24} steps to {RETURN_THRESHOLD}: {}", s.join(" "));
    }
    let have = |a: &[Algo]| a.iter().all(|x| sweep.contains_key(x.as_str()));
    let mut results = Vec::new();
    if have(&[Algo::Expand, Algo::DqnFeedback, Algo::DqnOnly]) {
        results.push(efficiency_claim(&steps(Algo::Expand), &steps(Algo::DqnFeedback), &steps(Algo::DqnOnly), 0.2));
    }
    if have(&[Algo::Expand, Algo::ExpandNoInvariance, Algo::ExpandNoAugAdvantage, Algo::DqnFeedback]) {
        results.push(ablation_ordering(
            &steps(Algo::Expand),
            &steps(Algo::ExpandNoInvariance),
            &steps(Algo::ExpandNoAugAdvantage),
            &steps(Algo::DqnFeedback),
        ));
    }
    if have(&[Algo::AugCrop, Algo::AugBlur, Algo::DqnFeedback]) {
        results.push(context_agnostic_negative(&steps(Algo::AugCrop), &steps(Algo::AugBlur), &steps(Algo::DqnFeedback), 0.05));
    }
    for r in results {
        println!("[{}] {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Cmd::Train {
            algo,
            env,
            episodes,
            seeds,
            seed,
            feedback,
            config,
            out,
            jobs,
        } => {
            let mut cfg = match &config {
                Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
                None => RunConfig::default(),
            };
            if let Some(a) = algo {
                cfg.algo = a.parse()?;
            }
            if config.is_none() || env != "pixel-taxi" {
                cfg.env = env;
            }
            if let Some(n) = episodes {
                cfg.episodes = n;
            }
            if let Some(k) = seeds {
                cfg.seeds = (0..k).collect();
            }
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            if let Some(f) = feedback {
                cfg.feedback = match f {
                    Source::Oracle => FeedbackMode::Oracle,
                    Source::Human => FeedbackMode::Human,
                };
            }
            if let Some(o) = out {
                cfg.out = o;
            }
            cfg.validate()?;
            train(cfg, jobs)
        }
        Cmd::Plot { runs, out } => {
            let sweep = load_sweep(&runs)?;
            if sweep.is_empty() {
                bail!("no metrics under {}", runs.display());
            }
            let dir = out.unwrap_or_else(|| runs.clone());
            let series = write_plot(&sweep, &dir, "learning_curves")?;
            println!("wrote {} series to {}", series.len(), dir.join("learning_curves.{png,csv}").display());
            Ok(())
        }
        Cmd::Report { runs } => report(&runs),
        Cmd::Evaluate {
            checkpoint,
            episodes,
            config,
            seed,
        } => {
            // accept the stem, the manifest or the blob path
            let ck = Checkpoint::load(&checkpoint.with_extension("json"))?;
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => {
                    // checkpoints sit in <seed dir>/checkpoints next to config.toml
                    let guess = checkpoint.parent().and_then(|p| p.parent()).map(|p| p.join("config.toml"));
                    match guess.filter(|p| p.exists()) {
                        Some(p) => RunConfig::load(&p)?,
                        None => RunConfig::default(),
                    }
                }
            };
            let returns = evaluate(&cfg, &ck, episodes, seed)?;
            let mean = returns.iter().sum::<f64>() / returns.len().max(1) as f64;
            println!("{} episode {}: mean greedy return {mean:.3} over {} episodes", ck.manifest.algo, ck.manifest.episode, returns.len());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
