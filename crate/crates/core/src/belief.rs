//! Online context-belief filtering and offline decoding.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::chain::ContextChain;
use crate::dynamics::{ContextParams, Workspace};
use crate::error::{dim, Error, Result};
use crate::inference::{message_pass, Trajectory};

/// Posterior over the current context index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Belief {
    pub probs: Vec<f64>,
}

impl Belief {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let s: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|p| !(*p >= 0.0)) || (s - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid(format!("belief {probs:?} is not on the simplex")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(k: usize) -> Self {
        Self { probs: vec![1.0 / k as f64; k] }
    }

    pub fn one_hot(k: usize, z: usize) -> Self {
        let mut probs = vec![0.0; k];
        probs[z] = 1.0;
        Self { probs }
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    /// Most probable context; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    /// Distribution of the context that generates the next transition,
    /// `b R`.
    pub fn predict(&self, chain: &ContextChain) -> Vec<f64> {
        let k = self.k();
        (0..k).map(|c| (0..k).map(|j| self.probs[j] * chain.r[j][c]).sum()).collect()
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

fn normalize_log(log_n: &[f64], t: usize) -> Result<Belief> {
    let m = log_n.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m.is_nan() {
        return Err(Error::Underflow { t });
    }
    let w: Vec<f64> = log_n.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = w.iter().sum();
    Ok(Belief { probs: w.into_iter().map(|v| v / s).collect() })
}

fn check_model(chain: &ContextChain, thetas: &[ContextParams]) -> Result<()> {
    if thetas.len() != chain.k() {
        return Err(dim(format!("{} parameter sets for a {}-context chain", thetas.len(), chain.k())));
    }
    Ok(())
}

fn log_liks(thetas: &[ContextParams], s: &[f64], a: &[f64], s_next: &[f64]) -> Result<Vec<f64>> {
    let mut ws = Workspace::default();
    thetas
        .iter()
        .map(|th| {
            if s.len() != th.state_dim() || a.len() != th.action_dim() || s_next.len() != th.state_dim() {
                return Err(dim("state or action length differs from the model"));
            }
            Ok(th.log_likelihood_ws(&mut ws, s, a, s_next))
        })
        .collect()
}

/// Posterior given the predictive context distribution `pred` and the
/// per-context log-likelihoods of the new transition.
pub fn posterior(pred: &[f64], log_liks: &[f64], t: usize) -> Result<Belief> {
    if pred.len() != log_liks.len() {
        return Err(dim(format!("{} prior weights for {} likelihoods", pred.len(), log_liks.len())));
    }
    let log_n: Vec<f64> = log_liks.iter().zip(pred).map(|(l, p)| l + p.ln()).collect();
    normalize_log(&log_n, t)
}

/// First filtering step: posterior of the context generating `s_1`, with
/// the initial distribution as prior.
pub fn belief_init(s: &[f64], a: &[f64], s_next: &[f64], chain: &ContextChain, thetas: &[ContextParams]) -> Result<Belief> {
    check_model(chain, thetas)?;
    posterior(&chain.rho0, &log_liks(thetas, s, a, s_next)?, 0)
}

/// One filter update `N_i = p(s' | s, a, theta_i) sum_j R_ji b_j`,
/// normalized, in log space. `t` is only used in error reports.
pub fn belief_step_at(
    b: &Belief,
    s: &[f64],
    a: &[f64],
    s_next: &[f64],
    chain: &ContextChain,
    thetas: &[ContextParams],
    t: usize,
) -> Result<Belief> {
    check_model(chain, thetas)?;
    if b.k() != chain.k() {
        return Err(dim(format!("belief over {} contexts, chain has {}", b.k(), chain.k())));
    }
    posterior(&b.predict(chain), &log_liks(thetas, s, a, s_next)?, t)
}

pub fn belief_step(
    b: &Belief,
    s: &[f64],
    a: &[f64],
    s_next: &[f64],
    chain: &ContextChain,
    thetas: &[ContextParams],
) -> Result<Belief> {
    belief_step_at(b, s, a, s_next, chain, thetas, 0)
}

/// Filtered beliefs for every transition of a trajectory.
pub fn filter_trajectory(chain: &ContextChain, thetas: &[ContextParams], traj: &Trajectory) -> Result<Vec<Belief>> {
    traj.validate()?;
    let mut out = Vec::with_capacity(traj.len());
    let mut b = belief_init(&traj.states[0], &traj.actions[0], &traj.states[1], chain, thetas)?;
    out.push(b.clone());
    for t in 1..traj.len() {
        b = belief_step_at(&b, &traj.states[t], &traj.actions[t], &traj.states[t + 1], chain, thetas, t)?;
        out.push(b.clone());
    }
    Ok(out)
}

/// Argmax of the smoothed marginals at every transition.
pub fn decode_contexts(chain: &ContextChain, thetas: &[ContextParams], traj: &Trajectory) -> Result<Vec<usize>> {
    let table = message_pass(chain, thetas, traj)?;
    Ok(table.marginals.iter().map(|m| argmax(m)).collect())
}

/// CSV trace: `t, b_0..b_{K-1}, decoded_z[, true_z]`.
pub fn beliefs_csv(beliefs: &[Belief], decoded: &[usize], true_z: Option<&[usize]>) -> String {
    let k = beliefs.first().map_or(0, Belief::k);
    let mut out = String::from("t");
    for c in 0..k {
        let _ = write!(out, ",b_{c}");
    }
    out.push_str(",decoded_z");
    if true_z.is_some() {
        out.push_str(",true_z");
    }
    out.push('\n');
    for (t, b) in beliefs.iter().enumerate() {
        let _ = write!(out, "{t}");
        for p in &b.probs {
            let _ = write!(out, ",{p:.16e}");
        }
        let _ = write!(out, ",{}", decoded[t]);
        if let Some(z) = true_z {
            let _ = write!(out, ",{}", z[t]);
        }
        out.push('\n');
    }
    out
}

/// Fraction of steps where `decoded` matches `truth` under the best
/// injective relabeling of decoded contexts, restricted to `mask`.
pub fn permutation_accuracy(decoded: &[usize], truth: &[usize], mask: &[bool]) -> f64 {
    let (hits, total) = permutation_matches(decoded, truth, mask);
    if total == 0 {
        return 1.0;
    }
    hits as f64 / total as f64
}

/// `(matches, considered)` under the best injective relabeling.
pub fn permutation_matches(decoded: &[usize], truth: &[usize], mask: &[bool]) -> (usize, usize) {
    let kd = decoded.iter().copied().max().map_or(0, |m| m + 1);
    let kt = truth.iter().copied().max().map_or(0, |m| m + 1);
    let mut counts = vec![vec![0usize; kt]; kd];
    let mut total = 0usize;
    for ((&d, &z), &m) in decoded.iter().zip(truth).zip(mask) {
        if m {
            counts[d][z] += 1;
            total += 1;
        }
    }
    if kt > 20 {
        // too many true labels for the bitmask search; score labels as-is
        let hits = (0..kd.min(kt)).map(|c| counts[c][c]).sum();
        return (hits, total);
    }
    // best[d][used]: largest match count using decoded labels d.. when the
    // true labels in `used` are already taken
    let full = 1usize << kt;
    let mut best = vec![0usize; full];
    for d in (0..kd).rev() {
        let mut next = best.clone();
        for (used, slot) in next.iter_mut().enumerate() {
            for z in 0..kt {
                if used & (1 << z) == 0 {
                    *slot = (*slot).max(counts[d][z] + best[used | (1 << z)]);
                }
            }
        }
        best = next;
    }
    (best[0], total)
}
