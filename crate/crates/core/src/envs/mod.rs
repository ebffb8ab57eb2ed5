//! Ground-truth simulators with hidden context switches, closed-loop
//! rollouts and the JSONL dataset format.

mod cartpole;
mod linear;

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::chain::ContextChain;
use crate::error::{Error, Result};
use crate::inference::Trajectory;

pub use cartpole::CartPole;
pub use linear::{LinearContext, SwitchingLinear};

/// How the next context is drawn once the cool-off period is over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    #[default]
    Markov,
    /// The next context is drawn from the row of the context before the
    /// current one.
    NonMarkovLag2,
    /// Alternating bands of width 0.1 in the first state coordinate.
    StateDependent,
}

impl std::str::FromStr for ContextMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markov" => Ok(Self::Markov),
            "non_markov_lag2" => Ok(Self::NonMarkovLag2),
            "state_dependent" => Ok(Self::StateDependent),
            _ => Err(Error::Invalid(format!("unknown context mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextProcess {
    pub chain: ContextChain,
    /// Steps after a switch during which no further switch happens.
    pub cooloff: usize,
    #[serde(default)]
    pub mode: ContextMode,
}

impl ContextProcess {
    pub fn new(chain: ContextChain, cooloff: usize, mode: ContextMode) -> Result<Self> {
        chain.validate()?;
        Ok(Self { chain, cooloff, mode })
    }

    /// Two contexts that stay put with probability 0.9.
    pub fn sticky_pair(cooloff: usize) -> Self {
        Self {
            chain: ContextChain {
                rho0: vec![0.5, 0.5],
                r: vec![vec![0.9, 0.1], vec![0.1, 0.9]],
            },
            cooloff,
            mode: ContextMode::Markov,
        }
    }
}

/// Simulator state. `z` is the context that governs the next transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub s: Vec<f64>,
    pub z: usize,
    /// Context before the last switch, used by the lag-2 process.
    pub prev_z: usize,
    pub steps_since_switch: usize,
    pub t: usize,
}

fn sample_row<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding: fall back to the last context with positive mass
    row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Band rule: `z = 0` on `[0, 0.1)`, `[0.2, 0.3)`, `[-0.2, -0.1)`, ... and
/// `z = 1` on the remaining bands.
fn band_context(pos: f64) -> usize {
    let n = (pos.abs() / 0.1).floor() as usize;
    (n + usize::from(pos < 0.0)) % 2
}

/// Draws the context for the next transition. Does not touch the counters.
pub fn context_step<R: Rng + ?Sized>(proc: &ContextProcess, state: &EnvState, rng: &mut R) -> usize {
    if state.steps_since_switch < proc.cooloff {
        return state.z;
    }
    match proc.mode {
        ContextMode::Markov => sample_row(&proc.chain.r[state.z], rng),
        ContextMode::NonMarkovLag2 => sample_row(&proc.chain.r[state.prev_z], rng),
        ContextMode::StateDependent => band_context(state.s.first().copied().unwrap_or(0.0)) % proc.chain.k(),
    }
}

/// Advances the context of `state` in place.
pub fn advance_context<R: Rng + ?Sized>(proc: &ContextProcess, state: &mut EnvState, rng: &mut R) {
    let next = context_step(proc, state, rng);
    if next != state.z {
        state.prev_z = state.z;
        state.z = next;
        state.steps_since_switch = 0;
    } else {
        state.steps_since_switch += 1;
    }
}

/// Physical system whose parameters depend on the context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Plant {
    SwitchingLinear(SwitchingLinear),
    CartpoleSwingup(CartPole),
}

impl Plant {
    pub fn name(&self) -> &'static str {
        match self {
            Plant::SwitchingLinear(_) => "switching_linear",
            Plant::CartpoleSwingup(_) => "cartpole_swingup",
        }
    }

    pub fn n_contexts(&self) -> usize {
        match self {
            Plant::SwitchingLinear(p) => p.contexts.len(),
            Plant::CartpoleSwingup(p) => p.chis.len(),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Plant::SwitchingLinear(_) => 2,
            Plant::CartpoleSwingup(_) => 4,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            Plant::SwitchingLinear(_) => 2,
            Plant::CartpoleSwingup(_) => 1,
        }
    }

    /// Symmetric per-dimension bound on actions.
    pub fn action_bound(&self) -> f64 {
        match self {
            Plant::SwitchingLinear(p) => p.action_bound,
            Plant::CartpoleSwingup(p) => p.force_max,
        }
    }

    pub fn noise_std(&self) -> f64 {
        match self {
            Plant::SwitchingLinear(p) => p.noise_std,
            Plant::CartpoleSwingup(p) => p.noise_std,
        }
    }

    pub fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Plant::SwitchingLinear(p) => p.initial_state(rng),
            Plant::CartpoleSwingup(p) => p.initial_state(rng),
        }
    }

    /// Noise-free successor state.
    pub fn mean_next(&self, s: &[f64], a: &[f64], z: usize) -> Vec<f64> {
        match self {
            Plant::SwitchingLinear(p) => p.mean_next(s, a, z),
            Plant::CartpoleSwingup(p) => p.mean_next(s, a, z),
        }
    }

    /// Reward of the transition `(s, a) -> s_next`.
    pub fn reward(&self, s_next: &[f64], a: &[f64]) -> f64 {
        match self {
            Plant::SwitchingLinear(p) => p.reward(s_next, a),
            Plant::CartpoleSwingup(_) => CartPole::reward(s_next),
        }
    }

    /// Successor with additive Gaussian noise. Always draws `state_dim`
    /// normals so that the random stream does not depend on the action.
    pub fn sample_next<R: Rng + ?Sized>(&self, s: &[f64], a: &[f64], z: usize, rng: &mut R) -> Vec<f64> {
        let mut next = self.mean_next(s, a, z);
        let std = self.noise_std();
        for v in &mut next {
            let e: f64 = StandardNormal.sample(rng);
            *v += std * e;
        }
        next
    }

    pub fn clip_action(&self, a: &[f64]) -> Vec<f64> {
        let b = self.action_bound();
        a.iter().map(|v| v.clamp(-b, b)).collect()
    }
}

/// A plant together with its context process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Env {
    pub plant: Plant,
    pub process: ContextProcess,
}

impl Env {
    pub fn new(plant: Plant, process: ContextProcess) -> Result<Self> {
        process.chain.validate()?;
        if process.chain.k() != plant.n_contexts() {
            return Err(Error::Dimension(format!(
                "context chain over {} contexts for a plant with {}",
                process.chain.k(),
                plant.n_contexts()
            )));
        }
        Ok(Self { plant, process })
    }

    pub fn name(&self) -> &'static str {
        self.plant.name()
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> EnvState {
        let s = self.plant.initial_state(rng);
        let z = sample_row(&self.process.chain.rho0, rng);
        EnvState { s, z, prev_z: z, steps_since_switch: 0, t: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    /// The successor state is not finite; the episode must stop.
    pub failed: bool,
}

/// One environment step under the current context, followed by a context
/// update for the next step.
pub fn env_step<R: Rng + ?Sized>(env: &Env, state: &EnvState, a: &[f64], rng: &mut R) -> StepOutcome {
    let a = env.plant.clip_action(a);
    let s_next = env.plant.sample_next(&state.s, &a, state.z, rng);
    let failed = s_next.iter().any(|v| !v.is_finite());
    let reward = if failed { 0.0 } else { env.plant.reward(&s_next, &a) };
    let mut next = EnvState { s: s_next, t: state.t + 1, ..state.clone() };
    if !failed {
        advance_context(&env.process, &mut next, rng);
    }
    StepOutcome { state: next, reward, failed }
}

/// A controller acting in an environment.
pub trait Agent {
    /// Called at the start of every episode.
    fn reset(&mut self) {}

    /// Chooses the action for state `s`. `true_z` is the context that will
    /// govern the transition; only oracle agents may use it.
    fn act(&mut self, s: &[f64], true_z: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>>;

    /// Receives the observed transition.
    fn observe(&mut self, _s: &[f64], _a: &[f64], _s_next: &[f64]) -> Result<()> {
        Ok(())
    }

    /// Most probable context after each observed transition, if the agent
    /// tracks one.
    fn context_trace(&self) -> Option<&[usize]> {
        None
    }
}

/// Uniformly random actions inside the action box.
#[derive(Debug, Clone)]
pub struct RandomAgent {
    pub action_dim: usize,
    pub bound: f64,
}

impl RandomAgent {
    pub fn for_plant(plant: &Plant) -> Self {
        Self { action_dim: plant.action_dim(), bound: plant.action_bound() }
    }
}

impl Agent for RandomAgent {
    fn act(&mut self, _s: &[f64], _z: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        Ok((0..self.action_dim).map(|_| rng.random_range(-self.bound..=self.bound)).collect())
    }
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub traj: Trajectory,
    pub rewards: Vec<f64>,
    pub failed: bool,
}

impl Rollout {
    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Runs one closed-loop episode. The environment draws from `env_rng` and
/// the agent from `agent_rng`, so agents compared on the same `env_rng`
/// seed face the same initial state, noise and context sequence.
pub fn rollout<A: Agent + ?Sized>(
    env: &Env,
    agent: &mut A,
    horizon: usize,
    env_rng: &mut ChaCha8Rng,
    agent_rng: &mut ChaCha8Rng,
) -> Result<Rollout> {
    if horizon == 0 {
        return Err(Error::Invalid("horizon must be at least 1".into()));
    }
    agent.reset();
    let mut state = env.reset(env_rng);
    let mut states = vec![state.s.clone()];
    let mut actions = Vec::with_capacity(horizon);
    let mut true_z = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    let mut failed = false;
    for _ in 0..horizon {
        let a = env.plant.clip_action(&agent.act(&state.s, state.z, agent_rng)?);
        let out = env_step(env, &state, &a, env_rng);
        if out.failed {
            failed = true;
            break;
        }
        agent.observe(&state.s, &a, &out.state.s)?;
        true_z.push(state.z);
        actions.push(a);
        rewards.push(out.reward);
        states.push(out.state.s.clone());
        state = out.state;
    }
    if actions.is_empty() {
        return Err(Error::NonFinite("episode failed on its first step".into()));
    }
    let traj = Trajectory { states, actions, true_z: Some(true_z), env: Some(env.name().into()), seed: None };
    Ok(Rollout { traj, rewards, failed })
}

/// Writes one trajectory per line.
pub fn save_dataset(path: &Path, data: &[Trajectory]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for traj in data {
        serde_json::to_writer(&mut w, traj)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<Trajectory>> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let traj: Trajectory = serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        traj.validate().map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        out.push(traj);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::par::stream_rng;

    fn linear_env(cooloff: usize) -> Env {
        Env::new(Plant::SwitchingLinear(SwitchingLinear::benchmark()), ContextProcess::sticky_pair(cooloff)).unwrap()
    }

    #[test]
    fn bands() {
        assert_eq!(band_context(0.05), 0);
        assert_eq!(band_context(-0.05), 1);
        assert_eq!(band_context(0.15), 1);
        assert_eq!(band_context(-0.15), 0);
        assert_eq!(band_context(0.25), 0);
        assert_eq!(band_context(-0.25), 1);
    }

    #[test]
    fn full_cooloff_freezes_context() {
        let env = linear_env(100);
        let mut agent = RandomAgent::for_plant(&env.plant);
        let ro = rollout(&env, &mut agent, 100, &mut stream_rng(1, 0), &mut stream_rng(1, 1)).unwrap();
        let z = ro.traj.true_z.unwrap();
        assert!(z.iter().all(|&c| c == z[0]));
    }

    #[test]
    fn identity_chain_freezes_context() {
        let mut env = linear_env(0);
        env.process.chain.r = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let mut agent = RandomAgent::for_plant(&env.plant);
        let ro = rollout(&env, &mut agent, 100, &mut stream_rng(2, 0), &mut stream_rng(2, 1)).unwrap();
        let z = ro.traj.true_z.unwrap();
        assert!(z.iter().all(|&c| c == z[0]));
    }

    #[test]
    fn switch_rate_matches_censored_geometric() {
        // sojourn = cooloff + Geometric(0.1) on {1, 2, ...}: mean 15 steps
        let proc = ContextProcess::sticky_pair(5);
        let mut rng = stream_rng(3, 0);
        let mut st = EnvState { s: vec![0.0], z: 0, prev_z: 0, steps_since_switch: 0, t: 0 };
        let n = 100_000;
        let mut switches = 0;
        let mut occupancy = 0;
        for _ in 0..n {
            let before = st.z;
            advance_context(&proc, &mut st, &mut rng);
            switches += usize::from(st.z != before);
            occupancy += usize::from(st.z == 0);
        }
        let rate = switches as f64 / n as f64;
        assert!((rate * 15.0 - 1.0).abs() < 0.02, "rate {rate}");
        assert!((occupancy as f64 / n as f64 - 0.5).abs() < 0.02);
    }

    #[test]
    fn rollout_shapes_and_determinism() {
        let env = linear_env(5);
        let mut agent = RandomAgent::for_plant(&env.plant);
        let a = rollout(&env, &mut agent, 100, &mut stream_rng(4, 0), &mut stream_rng(4, 1)).unwrap();
        let b = rollout(&env, &mut agent, 100, &mut stream_rng(4, 0), &mut stream_rng(4, 1)).unwrap();
        assert_eq!(a.traj.states.len(), 101);
        assert_eq!(a.traj.actions.len(), 100);
        assert_eq!(a.traj, b.traj);
        assert!(rollout(&env, &mut agent, 0, &mut stream_rng(4, 0), &mut stream_rng(4, 1)).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let env = linear_env(5);
        let mut agent = RandomAgent::for_plant(&env.plant);
        let data: Vec<Trajectory> = (0..3)
            .map(|i| rollout(&env, &mut agent, 20, &mut stream_rng(i, 0), &mut stream_rng(i, 1)).unwrap().traj)
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_dataset(&path, &data).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), data);
        save_dataset(&path, &[]).unwrap();
        assert!(load_dataset(&path).unwrap().is_empty());
        std::fs::write(&path, "{\"states\": [[0.0]], \"actions\": []}\nnot json\n").unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Parse { line: 1, .. })));
    }
}
