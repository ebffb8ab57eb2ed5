//! Experiment configuration, the outer learn-and-control loop and the
//! artifacts it writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::belief::{beliefs_csv, decode_contexts, filter_trajectory, permutation_matches};
use crate::chain::{distill_partition, partition, stationary_distribution, ContextChain, DistillMode};
use crate::control::{
    evaluate, paired_bootstrap, CemConfig, ContextSource, EvalRecord, EvalStats, LearnedModel, MpcAgent, PairedBootstrap,
    PlantModel,
};
use crate::dynamics::NetworkSpec;
use crate::envs::{
    rollout, save_dataset, Agent, CartPole, ContextMode, ContextProcess, Env, Plant, RandomAgent, SwitchingLinear,
};
use crate::error::{invalid, Error, Result};
use crate::inference::{extract_chain, fit, fit_from, EpochRecord, FitResult, TrainConfig, Trajectory, VariationalParams};
use crate::par::{map_indexed, mix_seed, stream_rng, Parallelism};
use crate::prior::{HdpHyper, PriorKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    SwitchingLinear,
    #[default]
    CartpoleSwingup,
}

/// Flat run configuration; every key is optional in the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvKind,
    pub context_mode: ContextMode,
    pub cooloff: usize,
    /// Probability of leaving the current context once the cool-off is over;
    /// the mass is spread uniformly over the other contexts.
    pub switch_prob: f64,
    /// Force multipliers of the cart-pole contexts.
    pub chis: Vec<f64>,
    /// Process noise; the environment default when absent.
    pub noise_std: Option<f64>,
    /// Episode length.
    pub horizon: usize,

    pub k: usize,
    pub gamma: f64,
    pub alpha: f64,
    /// Sticky factor; `3K/5` when absent.
    pub kappa: Option<f64>,
    pub theta_prior_std: f64,
    pub prior: PriorKind,
    /// Hidden layer widths; none for the linear system and `[128]` for the
    /// cart-pole when absent.
    pub hidden: Option<Vec<usize>>,

    pub lr_theta: f64,
    pub lr_mu: f64,
    pub lr_nu: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub n_mu_samples: usize,
    /// Passes over the dataset after the warm start.
    pub model_iters_warm: usize,
    /// Passes over the dataset after each epoch's data collection.
    pub model_iters_per_epoch: usize,
    pub distill_every: usize,
    pub mask_removed: bool,
    pub epsilon_train: f64,
    pub epsilon_test: f64,

    pub n_warm: usize,
    pub n_traj: usize,
    pub n_epochs: usize,

    pub cem_horizon: usize,
    pub cem_pops: usize,
    pub cem_elites: usize,
    pub cem_traces: usize,
    pub cem_iters: usize,
    pub cem_lr: f64,
    pub cem_init_std: f64,
    pub discount: f64,
    pub replan_every: usize,

    /// Closed-loop evaluation episodes per agent after training.
    pub eval_episodes: usize,
    pub seed: u64,
    /// Run everything on one thread.
    pub sequential: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: EnvKind::CartpoleSwingup,
            context_mode: ContextMode::Markov,
            cooloff: 5,
            switch_prob: 0.1,
            chis: vec![1.0, -1.0],
            noise_std: None,
            horizon: 100,
            k: 5,
            gamma: 2.0,
            alpha: 1e3,
            kappa: None,
            theta_prior_std: 0.1,
            prior: PriorKind::Hdp,
            hidden: None,
            lr_theta: 5e-3,
            lr_mu: 1e-2,
            lr_nu: 1e-2,
            clip_norm: 10.0,
            batch_size: 100,
            n_mu_samples: 1,
            model_iters_warm: 500,
            model_iters_per_epoch: 500,
            distill_every: 5,
            mask_removed: false,
            epsilon_train: 0.1,
            epsilon_test: 0.02,
            n_warm: 100,
            n_traj: 20,
            n_epochs: 10,
            cem_horizon: 10,
            cem_pops: 100,
            cem_elites: 10,
            cem_traces: 4,
            cem_iters: 5,
            cem_lr: 0.9,
            cem_init_std: 0.5,
            discount: 1.0,
            replan_every: 1,
            eval_episodes: 20,
            seed: 0,
            sequential: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.n_warm == 0 {
            return Err(invalid("horizon and n_warm must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.switch_prob) {
            return Err(invalid(format!("switch_prob {} not in [0, 1]", self.switch_prob)));
        }
        if !(0.0..1.0).contains(&self.epsilon_test) {
            return Err(invalid(format!("epsilon_test {} not in [0, 1)", self.epsilon_test)));
        }
        if self.env == EnvKind::CartpoleSwingup && self.chis.is_empty() {
            return Err(invalid("cart-pole needs at least one context"));
        }
        if self.noise_std.is_some_and(|s| s.is_nan() || s <= 0.0) {
            return Err(invalid("noise_std must be positive"));
        }
        self.hyper().validate()?;
        self.train_config(1).validate()?;
        self.cem().validate()?;
        self.env()?;
        Ok(())
    }

    pub fn exec(&self) -> Parallelism {
        if self.sequential {
            Parallelism::Sequential
        } else {
            Parallelism::Parallel
        }
    }

    pub fn plant(&self) -> Plant {
        match self.env {
            EnvKind::SwitchingLinear => {
                let mut p = SwitchingLinear::benchmark();
                if let Some(s) = self.noise_std {
                    p.noise_std = s;
                }
                Plant::SwitchingLinear(p)
            }
            EnvKind::CartpoleSwingup => {
                let mut p = CartPole { chis: self.chis.clone(), ..CartPole::default() };
                if let Some(s) = self.noise_std {
                    p.noise_std = s;
                }
                Plant::CartpoleSwingup(p)
            }
        }
    }

    pub fn env(&self) -> Result<Env> {
        let plant = self.plant();
        let n = plant.n_contexts();
        let leave = if n > 1 { self.switch_prob } else { 0.0 };
        let off = leave / (n.max(2) - 1) as f64;
        let r = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 - leave } else { off }).collect()).collect();
        let chain = ContextChain::new(vec![1.0 / n as f64; n], r)?;
        Env::new(plant, ContextProcess::new(chain, self.cooloff, self.context_mode)?)
    }

    pub fn hyper(&self) -> HdpHyper {
        HdpHyper {
            gamma: self.gamma,
            alpha: self.alpha,
            kappa: self.kappa.unwrap_or(3.0 * self.k as f64 / 5.0),
            k: self.k,
            theta_prior_std: self.theta_prior_std,
        }
    }

    pub fn network(&self) -> NetworkSpec {
        let plant = self.plant();
        let hidden = self.hidden.clone().unwrap_or_else(|| match self.env {
            EnvKind::SwitchingLinear => vec![],
            EnvKind::CartpoleSwingup => vec![128],
        });
        NetworkSpec::new(plant.state_dim(), plant.action_dim(), &hidden)
    }

    pub fn train_config(&self, epochs: usize) -> TrainConfig {
        TrainConfig {
            kind: self.prior,
            lr_theta: self.lr_theta,
            lr_mu: self.lr_mu,
            lr_nu: self.lr_nu,
            clip_norm: self.clip_norm,
            epochs,
            batch_size: self.batch_size,
            n_mu_samples: self.n_mu_samples,
            distill_every: self.distill_every,
            epsilon_train: self.epsilon_train,
            mask_removed: self.mask_removed,
            seed: self.seed,
            exec: self.exec(),
        }
    }

    pub fn cem(&self) -> CemConfig {
        CemConfig {
            horizon: self.cem_horizon,
            n_pops: self.cem_pops,
            n_elite: self.cem_elites,
            n_traces: self.cem_traces,
            n_iters: self.cem_iters,
            lr: self.cem_lr,
            init_std: self.cem_init_std,
            discount: self.discount,
            replan_every: self.replan_every,
            exec: self.exec(),
        }
    }
}

/// Runs `n` episodes of freshly built agents; episode `i` uses seed
/// `mix_seed(seed, i)` for both the environment and the agent streams.
pub fn collect<A, F>(make_agent: F, env: &Env, n: usize, horizon: usize, seed: u64, exec: Parallelism) -> Result<Vec<(Trajectory, f64)>>
where
    A: Agent,
    F: Fn() -> Result<A> + Sync,
{
    map_indexed(n, exec, |i| {
        let ep_seed = mix_seed(seed, i as u64);
        let mut agent = make_agent()?;
        let ro = rollout(env, &mut agent, horizon, &mut stream_rng(ep_seed, 0), &mut stream_rng(ep_seed, 1))?;
        let ret = ro.total_reward();
        let mut traj = ro.traj;
        traj.seed = Some(ep_seed);
        Ok((traj, ret))
    })
    .into_iter()
    .collect()
}

/// Random-action trajectories.
pub fn random_dataset(env: &Env, n: usize, horizon: usize, seed: u64, exec: Parallelism) -> Result<Vec<Trajectory>> {
    let agent = RandomAgent::for_plant(&env.plant);
    Ok(collect(|| Ok(agent.clone()), env, n, horizon, seed, exec)?.into_iter().map(|(t, _)| t).collect())
}

/// The learned model restricted to its distilled contexts.
#[derive(Debug, Clone)]
pub struct Distilled {
    pub model: LearnedModel,
    /// Indices of the kept contexts in the full model.
    pub kept: Vec<usize>,
    /// Expected chain of the full model.
    pub full_chain: ContextChain,
    /// Its stationary distribution.
    pub stationary: Vec<f64>,
}

impl Distilled {
    pub fn count(&self) -> usize {
        self.kept.len()
    }

    /// Third-largest stationary mass of the full chain (0 for fewer than
    /// three contexts).
    pub fn third_mass(&self) -> f64 {
        let mut p = self.stationary.clone();
        p.sort_by(|a, b| b.total_cmp(a));
        p.get(2).copied().unwrap_or(0.0)
    }

    /// Mean self-transition probability of the full chain.
    pub fn mean_diagonal(&self) -> f64 {
        let k = self.full_chain.k();
        (0..k).map(|i| self.full_chain.r[i][i]).sum::<f64>() / k as f64
    }
}

/// Distills the expected chain of `vp` at `epsilon`, never re-admitting
/// contexts outside `active`.
pub fn distill_model(vp: &VariationalParams, active: &[usize], epsilon: f64) -> Result<Distilled> {
    let full_chain = extract_chain(vp)?;
    let stationary = stationary_distribution(&full_chain.r)?;
    let (by_mass, _) = partition(&stationary, epsilon);
    let mut kept: Vec<usize> = by_mass.into_iter().filter(|c| active.contains(c)).collect();
    if kept.is_empty() {
        let best = active
            .iter()
            .copied()
            .max_by(|&a, &b| stationary[a].total_cmp(&stationary[b]).then(b.cmp(&a)))
            .ok_or_else(|| invalid("no active contexts"))?;
        kept.push(best);
    }
    let removed: Vec<usize> = (0..full_chain.k()).filter(|c| !kept.contains(c)).collect();
    let chain = distill_partition(&full_chain, &kept, &removed, DistillMode::Mpc)?;
    let thetas = kept.iter().map(|&c| vp.thetas[c].clone()).collect();
    Ok(Distilled { model: LearnedModel::new(chain, thetas)?, kept, full_chain, stationary })
}

/// Steps that lie at least `cooloff` steps after the latest true switch.
pub fn settled_mask(true_z: &[usize], cooloff: usize) -> Vec<bool> {
    let mut last = None;
    true_z
        .iter()
        .enumerate()
        .map(|(t, &z)| {
            if t > 0 && z != true_z[t - 1] {
                last = Some(t);
            }
            last.is_none_or(|s| t - s >= cooloff)
        })
        .collect()
}

/// Smoothed-decoding accuracy over a dataset under one global relabeling,
/// counting only settled steps.
pub fn decoding_accuracy(model: &LearnedModel, data: &[Trajectory], cooloff: usize) -> Result<f64> {
    let mut decoded = Vec::new();
    let mut truth = Vec::new();
    let mut mask = Vec::new();
    for traj in data {
        let z = traj.true_z.as_ref().ok_or_else(|| invalid("trajectory without true contexts"))?;
        decoded.extend(decode_contexts(&model.chain, &model.thetas, traj)?);
        mask.extend(settled_mask(z, cooloff));
        truth.extend_from_slice(z);
    }
    let (hits, total) = permutation_matches(&decoded, &truth, &mask);
    Ok(if total == 0 { 1.0 } else { hits as f64 / total as f64 })
}

/// One line of `metrics.jsonl`. Contains no timings, so identical runs
/// produce identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub phase: String,
    pub epoch: usize,
    pub n_trajectories: usize,
    pub elbo: f64,
    pub active_contexts: usize,
    pub distilled_contexts: usize,
    pub stationary: Vec<f64>,
    pub third_mass: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_collect_return: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
}

/// Final evaluation summary, the last line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub phase: String,
    pub belief_mpc: EvalStats,
    pub oracle_mpc: EvalStats,
    pub random: EvalStats,
    /// Oracle minus belief-MPC.
    pub gap: PairedBootstrap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub config: PathBuf,
    pub dataset: PathBuf,
    pub chain: PathBuf,
    pub chain_full: PathBuf,
    pub epoch_chains: Vec<PathBuf>,
    pub checkpoint: PathBuf,
    pub beliefs: PathBuf,
    pub zseq: PathBuf,
    pub metrics: PathBuf,
    pub train_log: PathBuf,
    pub returns: Option<PathBuf>,
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn append_jsonl<T: Serialize>(path: &Path, row: &T) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_vec(row)?;
    line.push(b'\n');
    f.write_all(&line)?;
    Ok(())
}

/// `t,trajectory,decoded_z,true_z` rows for every transition of `data`.
pub fn zseq_csv(model: &LearnedModel, data: &[Trajectory]) -> Result<String> {
    let mut out = String::from("trajectory,t,decoded_z,true_z\n");
    for (i, traj) in data.iter().enumerate() {
        let dec = decode_contexts(&model.chain, &model.thetas, traj)?;
        for (t, d) in dec.iter().enumerate() {
            let truth = traj.true_z.as_ref().map_or(String::new(), |z| z[t].to_string());
            out.push_str(&format!("{i},{t},{d},{truth}\n"));
        }
    }
    Ok(out)
}

fn epoch_metrics(phase: &str, epoch: usize, n: usize, res: &FitResult, d: &Distilled, ret: Option<f64>) -> EpochMetrics {
    EpochMetrics {
        phase: phase.to_string(),
        epoch,
        n_trajectories: n,
        elbo: res.log.last().map_or(f64::NAN, |r| r.elbo),
        active_contexts: res.active.len(),
        distilled_contexts: d.count(),
        stationary: d.stationary.clone(),
        third_mass: d.third_mass(),
        mean_collect_return: ret,
        aborted: res.aborted.clone(),
    }
}

/// Evaluates belief-MPC on `model`, the oracle on the true dynamics and
/// the random agent, all on the same episode seeds.
pub fn evaluate_agents(
    cfg: &ExperimentConfig,
    env: &Env,
    model: &LearnedModel,
    episodes: usize,
    seed: u64,
) -> Result<(EvalSummary, Vec<EvalRecord>)> {
    let exec = cfg.exec();
    let cem = cfg.cem();
    let oracle = PlantModel { plant: env.plant.clone(), chain: env.process.chain.clone() };
    let (b, mut rec) = evaluate(
        || MpcAgent::new(model, &env.plant, cem.clone(), ContextSource::Belief),
        "belief_mpc",
        env,
        episodes,
        cfg.horizon,
        seed,
        exec,
    )?;
    let (o, rec_o) = evaluate(
        || MpcAgent::new(&oracle, &env.plant, cem.clone(), ContextSource::Oracle),
        "oracle_mpc",
        env,
        episodes,
        cfg.horizon,
        seed,
        exec,
    )?;
    let random = RandomAgent::for_plant(&env.plant);
    let (r, rec_r) = evaluate(|| Ok(random.clone()), "random", env, episodes, cfg.horizon, seed, exec)?;
    rec.extend(rec_o);
    rec.extend(rec_r);
    let gap = paired_bootstrap(&o.returns, &b.returns, 2000, seed)?;
    Ok((EvalSummary { phase: "final".into(), belief_mpc: b, oracle_mpc: o, random: r, gap }, rec))
}

/// The outer loop: warm start on random trajectories, then per epoch collect
/// trajectories with belief-MPC on the distilled model, refit and distill.
/// `config_text` is echoed into the output directory when given.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, config_text: Option<&str>) -> Result<RunArtifacts> {
    cfg.validate()?;
    fs::create_dir_all(out.join("chains"))?;
    let config = out.join("config.toml");
    fs::write(&config, config_text.map_or_else(|| cfg.to_toml(), str::to_string))?;
    fs::write(out.join("config.resolved.toml"), cfg.to_toml())?;
    let metrics = out.join("metrics.jsonl");
    let train_log = out.join("train_log.jsonl");
    fs::write(&metrics, "")?;
    fs::write(&train_log, "")?;

    let exec = cfg.exec();
    let env = cfg.env()?;
    let hyper = cfg.hyper();
    let spec = cfg.network();
    let mut data = random_dataset(&env, cfg.n_warm, cfg.horizon, mix_seed(cfg.seed, 0xa11), exec)?;

    let mut res = fit(&data, &spec, &hyper, &cfg.train_config(cfg.model_iters_warm))?;
    let log_fit = |phase: &str, epoch: usize, log: &[EpochRecord]| -> Result<()> {
        for r in log {
            append_jsonl(&train_log, &serde_json::json!({ "phase": phase, "epoch": epoch, "record": r }))?;
        }
        Ok(())
    };
    log_fit("warm", 0, &res.log)?;
    let mut distilled = distill_model(&res.vp, &res.active, cfg.epsilon_test)?;
    append_jsonl(&metrics, &epoch_metrics("warm", 0, data.len(), &res, &distilled, None))?;
    let mut epoch_chains = Vec::new();
    let p = out.join("chains").join("warm.csv");
    distilled.model.chain.save_csv(&p)?;
    epoch_chains.push(p);

    for epoch in 0..cfg.n_epochs {
        if res.aborted.is_some() {
            break;
        }
        let cem = cfg.cem();
        let model = &distilled.model;
        let collected = collect(
            || MpcAgent::new(model, &env.plant, cem.clone(), ContextSource::Belief),
            &env,
            cfg.n_traj,
            cfg.horizon,
            mix_seed(cfg.seed, 0xe00 + epoch as u64),
            exec,
        )?;
        let mean_ret = (!collected.is_empty())
            .then(|| collected.iter().map(|(_, r)| r).sum::<f64>() / collected.len() as f64);
        data.extend(collected.into_iter().map(|(t, _)| t));
        let mut tc = cfg.train_config(cfg.model_iters_per_epoch);
        tc.seed = mix_seed(cfg.seed, 1 + epoch as u64);
        res = fit_from(res.vp, Some(res.active), &data, &hyper, &tc)?;
        log_fit("epoch", epoch, &res.log)?;
        distilled = distill_model(&res.vp, &res.active, cfg.epsilon_test)?;
        append_jsonl(&metrics, &epoch_metrics("epoch", epoch, data.len(), &res, &distilled, mean_ret))?;
        let p = out.join("chains").join(format!("epoch_{epoch:03}.csv"));
        distilled.model.chain.save_csv(&p)?;
        epoch_chains.push(p);
    }

    let dataset = out.join("dataset.jsonl");
    save_dataset(&dataset, &data)?;
    let chain = out.join("chain.csv");
    distilled.model.chain.save_csv(&chain)?;
    let chain_full = out.join("chain_full.csv");
    distilled.full_chain.save_csv(&chain_full)?;
    let checkpoint = out.join("checkpoint.json");
    res.vp.save_json(&checkpoint)?;
    let beliefs = out.join("beliefs.csv");
    let last = data.last().expect("warm start is non-empty");
    let b = filter_trajectory(&distilled.model.chain, &distilled.model.thetas, last)?;
    let dec = decode_contexts(&distilled.model.chain, &distilled.model.thetas, last)?;
    fs::write(&beliefs, beliefs_csv(&b, &dec, last.true_z.as_deref()))?;
    let zseq = out.join("zseq.csv");
    fs::write(&zseq, zseq_csv(&distilled.model, &data)?)?;

    let returns = if cfg.eval_episodes > 0 {
        let (summary, records) = evaluate_agents(cfg, &env, &distilled.model, cfg.eval_episodes, mix_seed(cfg.seed, 0xe7a1))?;
        let p = out.join("returns.jsonl");
        write_jsonl(&p, &records)?;
        append_jsonl(&metrics, &summary)?;
        Some(p)
    } else {
        None
    };
    if let Some(msg) = &res.aborted {
        return Err(Error::NonFinite(format!("training aborted: {msg}")));
    }
    Ok(RunArtifacts {
        dir: out.to_path_buf(),
        config,
        dataset,
        chain,
        chain_full,
        epoch_chains,
        checkpoint,
        beliefs,
        zseq,
        metrics,
        train_log,
        returns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(cfg.hyper().kappa, 3.0);
    }

    #[test]
    fn unknown_and_bad_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("nope = 1").is_err());
        assert!(ExperimentConfig::from_toml("cem_elites = 1000").is_err());
        let cfg = ExperimentConfig::from_toml("prior = \"dirichlet\"\nk = 8").unwrap();
        assert_eq!(cfg.network().layer_sizes, vec![5, 128, 4]);
        assert_eq!(cfg.prior, PriorKind::StickyDirichlet);
        let cfg = ExperimentConfig::from_toml("env = \"switching_linear\"").unwrap();
        assert_eq!(cfg.network().layer_sizes, vec![4, 2]);
    }

    #[test]
    fn settled_steps() {
        let z = [0, 0, 1, 1, 1, 1, 0, 0];
        assert_eq!(settled_mask(&z, 2), vec![true, true, false, false, true, true, false, false]);
    }
}
