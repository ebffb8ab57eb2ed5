use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use hdpcmdp::envs::{load_dataset, save_dataset};
use hdpcmdp::experiment::{
    decoding_accuracy, distill_model, evaluate_agents, random_dataset, run_experiment, write_jsonl, zseq_csv,
    ExperimentConfig,
};
use hdpcmdp::belief::{beliefs_csv, decode_contexts, filter_trajectory};
use hdpcmdp::inference::{fit, message_pass, VariationalParams};
use hdpcmdp::par::map_indexed;
use hdpcmdp::prior::PriorKind;
use hdpcmdp::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "hdpcmdp", version, about = "Learn and control contextual MDPs with hidden Markov context switches")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// hdp, dirichlet or mle.
    #[arg(long, global = true)]
    prior: Option<PriorKind>,
    /// Distillation threshold used both during training and for the final model.
    #[arg(long, global = true)]
    epsilon: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample random-action trajectories from the configured environment.
    GenData {
        /// Number of trajectories (n_warm when absent).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Fit the model to a dataset for `model_iters_warm` passes.
    Fit {
        /// Dataset to fit (random trajectories are sampled when absent).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Distill a fitted model at the configured test threshold.
    Distill {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score a fitted model on a dataset: evidence, beliefs and decoding accuracy.
    EvalModel {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Closed-loop evaluation of belief-MPC on a fitted model against the
    /// oracle-context planner and the random agent.
    Control {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Warm start, then alternate data collection, model fitting and distillation.
    Experiment,
}

#[derive(Serialize)]
struct ErrorManifest<'a> {
    status: &'a str,
    command: &'a str,
    kind: &'a str,
    message: String,
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Invalid(_) => "invalid",
        Error::Dimension(_) => "dimension",
        Error::Domain(_) => "domain",
        Error::NoConvergence { .. } => "no_convergence",
        Error::Singular(_) => "singular",
        Error::Underflow { .. } => "underflow",
        Error::NonFinite(_) => "non_finite",
        Error::Parse { .. } => "parse",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

fn load_config(g: &Global) -> Result<(ExperimentConfig, Option<String>)> {
    let (mut cfg, text) = match &g.config {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            (ExperimentConfig::from_toml(&text)?, Some(text))
        }
        None => (ExperimentConfig::default(), None),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(p) = g.prior {
        cfg.prior = p;
    }
    if let Some(e) = g.epsilon {
        cfg.epsilon_train = e;
        cfg.epsilon_test = e;
    }
    cfg.validate()?;
    Ok((cfg, text))
}

fn write_config(out: &Path, cfg: &ExperimentConfig, text: Option<&str>) -> Result<()> {
    fs::create_dir_all(out)?;
    if let Some(t) = text {
        fs::write(out.join("config.toml"), t)?;
    }
    fs::write(out.join("config.resolved.toml"), cfg.to_toml())?;
    Ok(())
}

#[derive(Serialize)]
struct ModelSummary {
    phase: &'static str,
    k: usize,
    distilled_contexts: usize,
    kept: Vec<usize>,
    stationary: Vec<f64>,
    third_mass: f64,
    mean_diagonal: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    log_evidence: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    decoding_accuracy: Option<f64>,
}

fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    let (cfg, text) = load_config(g)?;
    let out = &g.out;
    match &cli.cmd {
        Command::GenData { n } => {
            write_config(out, &cfg, text.as_deref())?;
            let env = cfg.env()?;
            let data = random_dataset(&env, n.unwrap_or(cfg.n_warm), cfg.horizon, cfg.seed, cfg.exec())?;
            save_dataset(&out.join("dataset.jsonl"), &data)?;
            info!("wrote {} trajectories", data.len());
        }
        Command::Fit { data } => {
            write_config(out, &cfg, text.as_deref())?;
            let data = match data {
                Some(p) => load_dataset(p)?,
                None => {
                    let env = cfg.env()?;
                    let d = random_dataset(&env, cfg.n_warm, cfg.horizon, cfg.seed, cfg.exec())?;
                    save_dataset(&out.join("dataset.jsonl"), &d)?;
                    d
                }
            };
            let res = fit(&data, &cfg.network(), &cfg.hyper(), &cfg.train_config(cfg.model_iters_warm))?;
            write_jsonl(&out.join("train_log.jsonl"), &res.log)?;
            let mut rows: Vec<serde_json::Value> = res
                .log
                .iter()
                .map(|r| {
                    serde_json::json!({
                        "phase": "fit",
                        "epoch": r.epoch,
                        "elbo": r.elbo,
                        "active_contexts": r.active_contexts,
                    })
                })
                .collect();
            res.vp.save_json(&out.join("checkpoint.json"))?;
            let d = distill_model(&res.vp, &res.active, cfg.epsilon_test)?;
            d.full_chain.save_csv(&out.join("chain_full.csv"))?;
            d.model.chain.save_csv(&out.join("chain.csv"))?;
            fs::write(out.join("active.json"), serde_json::to_string(&res.active)?)?;
            rows.push(serde_json::to_value(summary(&d, None, None))?);
            write_jsonl(&out.join("metrics.jsonl"), &rows)?;
            if let Some(msg) = res.aborted {
                return Err(Error::NonFinite(format!("training aborted: {msg}")));
            }
        }
        Command::Distill { checkpoint } => {
            let vp = VariationalParams::load_json(checkpoint)?;
            fs::create_dir_all(out)?;
            let d = distill_model(&vp, &active_for(checkpoint, vp.k())?, cfg.epsilon_test)?;
            d.full_chain.save_csv(&out.join("chain_full.csv"))?;
            d.model.chain.save_csv(&out.join("chain.csv"))?;
            write_jsonl(&out.join("metrics.jsonl"), &[summary(&d, None, None)])?;
        }
        Command::EvalModel { checkpoint, data } => {
            let vp = VariationalParams::load_json(checkpoint)?;
            let data = load_dataset(data)?;
            if data.is_empty() {
                return Err(Error::Invalid("empty dataset".into()));
            }
            fs::create_dir_all(out)?;
            let d = distill_model(&vp, &active_for(checkpoint, vp.k())?, cfg.epsilon_test)?;
            let m = &d.model;
            let evidence = map_indexed(data.len(), cfg.exec(), |i| {
                message_pass(&m.chain, &m.thetas, &data[i]).map(|t| t.log_evidence)
            })
            .into_iter()
            .sum::<Result<f64>>()?;
            let acc = if data.iter().all(|t| t.true_z.is_some()) {
                Some(decoding_accuracy(m, &data, cfg.cooloff)?)
            } else {
                None
            };
            let first = &data[0];
            let b = filter_trajectory(&m.chain, &m.thetas, first)?;
            let dec = decode_contexts(&m.chain, &m.thetas, first)?;
            fs::write(out.join("beliefs.csv"), beliefs_csv(&b, &dec, first.true_z.as_deref()))?;
            fs::write(out.join("zseq.csv"), zseq_csv(m, &data)?)?;
            write_jsonl(&out.join("metrics.jsonl"), &[summary(&d, Some(evidence), acc)])?;
        }
        Command::Control { checkpoint } => {
            write_config(out, &cfg, text.as_deref())?;
            let vp = VariationalParams::load_json(checkpoint)?;
            let d = distill_model(&vp, &active_for(checkpoint, vp.k())?, cfg.epsilon_test)?;
            let env = cfg.env()?;
            let (s, records) = evaluate_agents(&cfg, &env, &d.model, cfg.eval_episodes.max(1), cfg.seed)?;
            write_jsonl(&out.join("returns.jsonl"), &records)?;
            write_jsonl(&out.join("metrics.jsonl"), &[s])?;
        }
        Command::Experiment => {
            let art = run_experiment(&cfg, out, text.as_deref())?;
            info!("artifacts in {}", art.dir.display());
        }
    }
    Ok(())
}

/// Active contexts saved next to a checkpoint by `fit`, or all of them.
fn active_for(checkpoint: &Path, k: usize) -> Result<Vec<usize>> {
    let p = checkpoint.with_file_name("active.json");
    if p.exists() {
        Ok(serde_json::from_str(&fs::read_to_string(p)?)?)
    } else {
        Ok((0..k).collect())
    }
}

fn summary(d: &hdpcmdp::experiment::Distilled, log_evidence: Option<f64>, acc: Option<f64>) -> ModelSummary {
    ModelSummary {
        phase: "model",
        k: d.full_chain.k(),
        distilled_contexts: d.count(),
        kept: d.kept.clone(),
        stationary: d.stationary.clone(),
        third_mass: d.third_mass(),
        mean_diagonal: d.mean_diagonal(),
        log_evidence,
        decoding_accuracy: acc,
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData { .. } => "gen-data",
        Command::Fit { .. } => "fit",
        Command::Distill { .. } => "distill",
        Command::EvalModel { .. } => "eval-model",
        Command::Control { .. } => "control",
        Command::Experiment => "experiment",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::new().filter_level(log::LevelFilter::Info).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let manifest = ErrorManifest {
                status: "error",
                command: command_name(&cli.cmd),
                kind: error_kind(&e),
                message: e.to_string(),
            };
            let json = serde_json::to_string_pretty(&manifest).unwrap_or_else(|_| e.to_string());
            eprintln!("{json}");
            if fs::create_dir_all(&cli.global.out).is_ok() {
                let _ = fs::write(cli.global.out.join("error.json"), &json);
            }
            ExitCode::FAILURE
        }
    }
}
