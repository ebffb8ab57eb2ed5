//! Cross-entropy-method model-predictive control over sampled context
//! sequences, plus closed-loop evaluation.

use std::cmp::Ordering;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::belief::{permutation_matches, posterior, Belief};
use crate::chain::ContextChain;
use crate::dynamics::{ContextParams, Workspace};
use crate::envs::{rollout, Agent, Env, Plant};
use crate::error::{dim, invalid, Error, Result};
use crate::par::{map_indexed, mix_seed, stream_rng, Parallelism};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CemConfig {
    pub horizon: usize,
    pub n_pops: usize,
    pub n_elite: usize,
    pub n_traces: usize,
    pub n_iters: usize,
    pub lr: f64,
    pub init_std: f64,
    pub discount: f64,
    /// Environment steps between replanning calls.
    pub replan_every: usize,
    #[serde(skip)]
    pub exec: Parallelism,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            n_pops: 100,
            n_elite: 10,
            n_traces: 4,
            n_iters: 5,
            lr: 0.9,
            init_std: 0.5,
            discount: 1.0,
            replan_every: 1,
            exec: Parallelism::Parallel,
        }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.n_traces == 0 || self.n_iters == 0 || self.replan_every == 0 {
            return Err(invalid("horizon, n_traces, n_iters and replan_every must be at least 1"));
        }
        if self.n_elite == 0 || self.n_elite > self.n_pops {
            return Err(invalid(format!("need 1 <= n_elite ({}) <= n_pops ({})", self.n_elite, self.n_pops)));
        }
        if !(self.lr > 0.0 && self.lr <= 1.0) {
            return Err(invalid(format!("lr {} outside (0, 1]", self.lr)));
        }
        if !(self.init_std > 0.0) || !(0.0..=1.0).contains(&self.discount) {
            return Err(invalid("init_std must be positive and discount in [0, 1]"));
        }
        Ok(())
    }
}

/// Nominal action plan with a diagonal Gaussian over plan updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub actions: Vec<Vec<f64>>,
    pub mu: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
}

const SIGMA_FLOOR: f64 = 1e-9;

impl Plan {
    pub fn zeros(horizon: usize, action_dim: usize, init_std: f64) -> Self {
        Self {
            actions: vec![vec![0.0; action_dim]; horizon],
            mu: vec![vec![0.0; action_dim]; horizon],
            sigma: vec![vec![init_std; action_dim]; horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    /// `a_k + mu_k`, clipped to the action box.
    pub fn refined(&self, bound: f64) -> Vec<Vec<f64>> {
        self.actions
            .iter()
            .zip(&self.mu)
            .map(|(a, m)| a.iter().zip(m).map(|(x, d)| (x + d).clamp(-bound, bound)).collect())
            .collect()
    }

    /// Warm start for the next step: drop the first refined action, append
    /// a zero action and reset the update distribution.
    pub fn shifted(&self, bound: f64, init_std: f64) -> Self {
        let h = self.horizon();
        let ad = self.actions.first().map_or(0, Vec::len);
        let mut actions: Vec<Vec<f64>> = self.refined(bound).into_iter().skip(1).collect();
        actions.push(vec![0.0; ad]);
        Self { actions, mu: vec![vec![0.0; ad]; h], sigma: vec![vec![init_std; ad]; h] }
    }
}

/// A sampling model of the context-switching dynamics used for planning
/// and for belief filtering.
pub trait WorldModel: Sync {
    fn chain(&self) -> &ContextChain;

    fn state_dim(&self) -> usize;

    /// Writes `mean(s, a, z) + std * eps` into `out`.
    fn sample_into(&self, ws: &mut Workspace, s: &[f64], a: &[f64], z: usize, eps: &[f64], out: &mut [f64]);

    /// Log-density of `s_next` under every context.
    fn log_liks(&self, s: &[f64], a: &[f64], s_next: &[f64]) -> Vec<f64>;
}

/// Learned per-context networks with their context chain.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedModel {
    pub chain: ContextChain,
    pub thetas: Vec<ContextParams>,
}

impl LearnedModel {
    pub fn new(chain: ContextChain, thetas: Vec<ContextParams>) -> Result<Self> {
        chain.validate()?;
        if thetas.len() != chain.k() || thetas.is_empty() {
            return Err(dim(format!("{} parameter sets for a {}-context chain", thetas.len(), chain.k())));
        }
        Ok(Self { chain, thetas })
    }
}

impl WorldModel for LearnedModel {
    fn chain(&self) -> &ContextChain {
        &self.chain
    }

    fn state_dim(&self) -> usize {
        self.thetas[0].state_dim()
    }

    fn sample_into(&self, ws: &mut Workspace, s: &[f64], a: &[f64], z: usize, eps: &[f64], out: &mut [f64]) {
        let th = &self.thetas[z];
        th.mean_into(ws, s, a, out);
        for ((o, e), ls) in out.iter_mut().zip(eps).zip(&th.log_std) {
            *o += ls.exp() * e;
        }
    }

    fn log_liks(&self, s: &[f64], a: &[f64], s_next: &[f64]) -> Vec<f64> {
        let mut ws = Workspace::default();
        self.thetas.iter().map(|th| th.log_likelihood_ws(&mut ws, s, a, s_next)).collect()
    }
}

/// The simulator's own dynamics, used by oracle agents.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    pub plant: Plant,
    pub chain: ContextChain,
}

impl WorldModel for PlantModel {
    fn chain(&self) -> &ContextChain {
        &self.chain
    }

    fn state_dim(&self) -> usize {
        self.plant.state_dim()
    }

    fn sample_into(&self, _ws: &mut Workspace, s: &[f64], a: &[f64], z: usize, eps: &[f64], out: &mut [f64]) {
        let std = self.plant.noise_std();
        for ((o, m), e) in out.iter_mut().zip(self.plant.mean_next(s, a, z)).zip(eps) {
            *o = m + std * e;
        }
    }

    fn log_liks(&self, s: &[f64], a: &[f64], s_next: &[f64]) -> Vec<f64> {
        let std = self.plant.noise_std();
        (0..self.chain.k())
            .map(|z| {
                let mean = self.plant.mean_next(s, a, z);
                mean.iter()
                    .zip(s_next)
                    .map(|(m, x)| {
                        let r = (x - m) / std;
                        -std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * r * r
                    })
                    .sum()
            })
            .collect()
    }
}

fn sample_index<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Per-iteration summary of a planning call.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CemTrace {
    pub best_score: Vec<f64>,
    pub median_elite_score: Vec<f64>,
}

/// Refines `plan` by CEM. Every candidate is scored by the mean discounted
/// model return over `n_traces` sampled traces; each trace draws its first
/// context from `z_dist` and later contexts from the chain.
#[allow(clippy::too_many_arguments)]
pub fn cem_plan<M, F>(
    model: &M,
    reward: &F,
    bound: f64,
    s: &[f64],
    z_dist: &[f64],
    plan: &Plan,
    cfg: &CemConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Plan, CemTrace)>
where
    M: WorldModel + ?Sized,
    F: Fn(&[f64], &[f64]) -> f64 + Sync + ?Sized,
{
    cfg.validate()?;
    let k = model.chain().k();
    let sd = model.state_dim();
    if z_dist.len() != k {
        return Err(dim(format!("context distribution of length {} for {k} contexts", z_dist.len())));
    }
    if s.len() != sd {
        return Err(dim(format!("state of length {} for a {sd}-dim model", s.len())));
    }
    if plan.horizon() != cfg.horizon {
        return Err(dim(format!("plan horizon {} differs from configured {}", plan.horizon(), cfg.horizon)));
    }
    let h = cfg.horizon;
    let ad = plan.actions[0].len();
    let mut plan = plan.clone();
    let mut trace = CemTrace::default();

    for _ in 0..cfg.n_iters {
        let base: u64 = rng.random();
        let scored: Vec<(Vec<Vec<f64>>, f64)> = map_indexed(cfg.n_pops, cfg.exec, |i| {
            let mut crng = stream_rng(base, i as u64);
            let delta: Vec<Vec<f64>> = (0..h)
                .map(|t| {
                    (0..ad)
                        .map(|d| {
                            let e: f64 = StandardNormal.sample(&mut crng);
                            plan.mu[t][d] + plan.sigma[t][d] * e
                        })
                        .collect()
                })
                .collect();
            let acts: Vec<Vec<f64>> = plan
                .actions
                .iter()
                .zip(&delta)
                .map(|(a, d)| a.iter().zip(d).map(|(x, y)| (x + y).clamp(-bound, bound)).collect())
                .collect();
            let mut ws = Workspace::default();
            let mut cur = vec![0.0; sd];
            let mut next = vec![0.0; sd];
            let mut eps = vec![0.0; sd];
            let mut total = 0.0;
            for _ in 0..cfg.n_traces {
                let mut z = sample_index(z_dist, &mut crng);
                cur.copy_from_slice(s);
                let mut ret = 0.0;
                let mut disc = 1.0;
                for a in &acts {
                    for e in &mut eps {
                        *e = StandardNormal.sample(&mut crng);
                    }
                    model.sample_into(&mut ws, &cur, a, z, &eps, &mut next);
                    ret += disc * reward(&next, a);
                    disc *= cfg.discount;
                    std::mem::swap(&mut cur, &mut next);
                    z = sample_index(&model.chain().r[z], &mut crng);
                }
                total += ret;
            }
            let score = total / cfg.n_traces as f64;
            (delta, if score.is_finite() { score } else { f64::NEG_INFINITY })
        });

        let mut order: Vec<usize> = (0..cfg.n_pops).collect();
        order.sort_by(|&a, &b| scored[b].1.partial_cmp(&scored[a].1).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
        let elites = &order[..cfg.n_elite];
        if scored[elites[0]].1 == f64::NEG_INFINITY {
            return Err(Error::NonFinite("every planning rollout diverged".into()));
        }
        trace.best_score.push(scored[elites[0]].1);
        trace.median_elite_score.push(scored[elites[cfg.n_elite / 2]].1);

        let n = cfg.n_elite as f64;
        for t in 0..h {
            for d in 0..ad {
                let mean = elites.iter().map(|&i| scored[i].0[t][d]).sum::<f64>() / n;
                let var = elites.iter().map(|&i| (scored[i].0[t][d] - mean).powi(2)).sum::<f64>() / n;
                let mu = (1.0 - cfg.lr) * plan.mu[t][d] + cfg.lr * mean;
                let v = (1.0 - cfg.lr) * plan.sigma[t][d].powi(2) + cfg.lr * var;
                plan.mu[t][d] = mu;
                plan.sigma[t][d] = v.sqrt().max(SIGMA_FLOOR);
            }
        }
    }
    Ok((plan, trace))
}

/// Where the MPC agent gets its context distribution from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextSource {
    /// Filtered belief from observed transitions.
    Belief,
    /// The true upcoming context.
    Oracle,
}

/// Receding-horizon CEM agent.
pub struct MpcAgent<'a, M: WorldModel + ?Sized> {
    pub model: &'a M,
    pub plant: &'a Plant,
    pub cfg: CemConfig,
    pub source: ContextSource,
    plan: Plan,
    belief: Option<Belief>,
    steps: usize,
    trace: Vec<usize>,
}

impl<'a, M: WorldModel + ?Sized> MpcAgent<'a, M> {
    pub fn new(model: &'a M, plant: &'a Plant, cfg: CemConfig, source: ContextSource) -> Result<Self> {
        cfg.validate()?;
        if model.state_dim() != plant.state_dim() {
            return Err(dim("model and plant state dimensions differ"));
        }
        let plan = Plan::zeros(cfg.horizon, plant.action_dim(), cfg.init_std);
        Ok(Self { model, plant, cfg, source, plan, belief: None, steps: 0, trace: Vec::new() })
    }

    pub fn belief(&self) -> Option<&Belief> {
        self.belief.as_ref()
    }

    /// Distribution of the context governing the next transition.
    pub fn context_distribution(&self, true_z: usize) -> Vec<f64> {
        let chain = self.model.chain();
        match self.source {
            ContextSource::Oracle => Belief::one_hot(chain.k(), true_z).probs,
            ContextSource::Belief => match &self.belief {
                Some(b) => b.predict(chain),
                None => chain.rho0.clone(),
            },
        }
    }

    /// One receding-horizon step: plan (or reuse the shifted plan between
    /// replanning steps), return the first action, warm-start the next call.
    pub fn mpc_act(&mut self, s: &[f64], z_dist: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let bound = self.plant.action_bound();
        if self.steps.is_multiple_of(self.cfg.replan_every) {
            let plant = self.plant;
            let reward = move |sn: &[f64], a: &[f64]| plant.reward(sn, a);
            let (refined, _) = cem_plan(self.model, &reward, bound, s, z_dist, &self.plan, &self.cfg, rng)?;
            self.plan = refined;
        }
        self.steps += 1;
        let action = self.plan.refined(bound).swap_remove(0);
        self.plan = self.plan.shifted(bound, self.cfg.init_std);
        Ok(action)
    }
}

impl<M: WorldModel + ?Sized> Agent for MpcAgent<'_, M> {
    fn reset(&mut self) {
        self.plan = Plan::zeros(self.cfg.horizon, self.plant.action_dim(), self.cfg.init_std);
        self.belief = None;
        self.steps = 0;
        self.trace.clear();
    }

    fn act(&mut self, s: &[f64], true_z: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        if self.source == ContextSource::Oracle {
            self.trace.push(true_z);
        }
        let z_dist = self.context_distribution(true_z);
        self.mpc_act(s, &z_dist, rng)
    }

    fn observe(&mut self, s: &[f64], a: &[f64], s_next: &[f64]) -> Result<()> {
        if self.source == ContextSource::Belief {
            let pred = match &self.belief {
                Some(b) => b.predict(self.model.chain()),
                None => self.model.chain().rho0.clone(),
            };
            let b = posterior(&pred, &self.model.log_liks(s, a, s_next), self.trace.len())?;
            self.trace.push(b.argmax());
            self.belief = Some(b);
        }
        Ok(())
    }

    fn context_trace(&self) -> Option<&[usize]> {
        Some(&self.trace)
    }
}

/// One line of the evaluation output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub agent: String,
    pub env: String,
    pub episode: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    /// Steps at which the agent's context estimate, under the best
    /// relabeling for the episode, differs from the true context.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub misidentified_switches: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub mean: f64,
    pub std: f64,
    pub returns: Vec<f64>,
}

impl EvalStats {
    pub fn from_returns(returns: Vec<f64>) -> Self {
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let std = if returns.len() > 1 {
            (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std, returns }
    }
}

/// Runs `episodes` closed-loop episodes. Episode `e` uses environment
/// stream `mix_seed(seed, e)`, so agents evaluated with the same seed face
/// identical initial states, noise and context sequences.
pub fn evaluate<A, F>(
    make_agent: F,
    label: &str,
    env: &Env,
    episodes: usize,
    horizon: usize,
    seed: u64,
    exec: Parallelism,
) -> Result<(EvalStats, Vec<EvalRecord>)>
where
    A: Agent,
    F: Fn() -> Result<A> + Sync,
{
    if episodes == 0 {
        return Err(invalid("episodes must be at least 1"));
    }
    let results = map_indexed(episodes, exec, |e| -> Result<EvalRecord> {
        let ep_seed = mix_seed(seed, e as u64);
        let mut agent = make_agent()?;
        let ro = rollout(env, &mut agent, horizon, &mut stream_rng(ep_seed, 0), &mut stream_rng(ep_seed, 1))?;
        let truth = ro.traj.true_z.as_deref().unwrap_or(&[]);
        let misidentified = agent.context_trace().filter(|t| t.len() == truth.len()).map(|est| {
            let (hits, total) = permutation_matches(est, truth, &vec![true; truth.len()]);
            total - hits
        });
        Ok(EvalRecord {
            agent: label.to_string(),
            env: env.name().to_string(),
            episode: e,
            ret: ro.total_reward(),
            misidentified_switches: misidentified,
            seed: ep_seed,
        })
    });
    let records = results.into_iter().collect::<Result<Vec<_>>>()?;
    let stats = EvalStats::from_returns(records.iter().map(|r| r.ret).collect());
    Ok((stats, records))
}

/// Percentile bootstrap of the mean paired difference `a - b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedBootstrap {
    pub mean_diff: f64,
    pub lo: f64,
    pub hi: f64,
    /// Half the width of the 95% interval.
    pub half_width: f64,
}

pub fn paired_bootstrap(a: &[f64], b: &[f64], n_boot: usize, seed: u64) -> Result<PairedBootstrap> {
    if a.len() != b.len() || a.is_empty() {
        return Err(dim("paired samples must be non-empty and of equal length"));
    }
    if n_boot == 0 {
        return Err(invalid("n_boot must be at least 1"));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len();
    let mean_diff = diffs.iter().sum::<f64>() / n as f64;
    let mut rng = stream_rng(seed, 0xb007);
    let mut means: Vec<f64> = (0..n_boot)
        .map(|_| (0..n).map(|_| diffs[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let q = |p: f64| means[((p * (n_boot - 1) as f64).round() as usize).min(n_boot - 1)];
    let (lo, hi) = (q(0.025), q(0.975));
    Ok(PairedBootstrap { mean_diff, lo, hi, half_width: 0.5 * (hi - lo) })
}
