//! Exact forward-backward context posteriors in log space.

use crate::chain::ContextChain;
use crate::dynamics::{ContextParams, Workspace};
use crate::error::{dim, Error, Result};

use super::Trajectory;

/// Forward/backward messages and posteriors of one trajectory.
///
/// Row `t` refers to the context generating `s_{t+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageTable {
    /// `log p(s_{t+1} | s_t, a_t, theta_k)`, T x K.
    pub log_lik: Vec<Vec<f64>>,
    pub log_forward: Vec<Vec<f64>>,
    pub log_backward: Vec<Vec<f64>>,
    pub log_evidence: f64,
    /// `p(z_t | s, a)`, T x K.
    pub marginals: Vec<Vec<f64>>,
    /// `p(z_{t-1} = j, z_t = k | s, a)` for t = 1..T-1, each K x K.
    pub pairwise: Vec<Vec<Vec<f64>>>,
}

/// Gradient of the log-evidence of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodGrads {
    /// Per-context gradient over the flattened parameters.
    pub theta: Vec<Vec<f64>>,
    /// d log p / d rho0_k, treating the entries as free.
    pub rho0: Vec<f64>,
    /// d log p / d R_jk, treating the entries as free.
    pub r: Vec<Vec<f64>>,
}

pub(crate) fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn check_inputs(chain: &ContextChain, thetas: &[ContextParams], traj: &Trajectory) -> Result<()> {
    let k = chain.k();
    if thetas.len() != k || chain.r.len() != k {
        return Err(dim(format!("{} parameter sets for a {k}-context chain", thetas.len())));
    }
    let sd = thetas[0].state_dim();
    let ad = thetas[0].action_dim();
    if traj.states[0].len() != sd || traj.actions[0].len() != ad {
        return Err(dim(format!(
            "trajectory state/action dims {}/{} vs model {sd}/{ad}",
            traj.states[0].len(),
            traj.actions[0].len()
        )));
    }
    Ok(())
}

/// Per-step transition log-likelihoods under every context.
pub fn transition_log_liks(thetas: &[ContextParams], traj: &Trajectory) -> Vec<Vec<f64>> {
    let mut ws = Workspace::default();
    (0..traj.len())
        .map(|t| {
            thetas
                .iter()
                .map(|th| th.log_likelihood_ws(&mut ws, &traj.states[t], &traj.actions[t], &traj.states[t + 1]))
                .collect()
        })
        .collect()
}

/// Runs the forward and backward recursions and assembles the posteriors.
pub fn message_pass(chain: &ContextChain, thetas: &[ContextParams], traj: &Trajectory) -> Result<MessageTable> {
    check_inputs(chain, thetas, traj)?;
    let log_lik = transition_log_liks(thetas, traj);
    messages_from_log_liks(chain, log_lik)
}

pub(crate) fn messages_from_log_liks(chain: &ContextChain, log_lik: Vec<Vec<f64>>) -> Result<MessageTable> {
    let k = chain.k();
    let t_len = log_lik.len();
    let log_rho0: Vec<f64> = chain.rho0.iter().map(|p| p.ln()).collect();
    let log_r: Vec<Vec<f64>> = chain.r.iter().map(|row| row.iter().map(|p| p.ln()).collect()).collect();

    for (t, row) in log_lik.iter().enumerate() {
        if row.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite(format!("transition log-likelihood at t = {t}")));
        }
    }

    let mut log_forward = vec![vec![0.0; k]; t_len];
    for c in 0..k {
        log_forward[0][c] = log_lik[0][c] + log_rho0[c];
    }
    for t in 1..t_len {
        let (prev, cur) = log_forward.split_at_mut(t);
        let prev = &prev[t - 1];
        for c in 0..k {
            cur[0][c] = log_lik[t][c] + logsumexp((0..k).map(|j| prev[j] + log_r[j][c]));
        }
    }
    for (t, row) in log_forward.iter().enumerate() {
        if row.iter().all(|v| *v == f64::NEG_INFINITY) {
            return Err(Error::Underflow { t });
        }
    }

    let mut log_backward = vec![vec![0.0; k]; t_len];
    for t in (1..t_len).rev() {
        let (head, tail) = log_backward.split_at_mut(t);
        let next = &tail[0];
        for j in 0..k {
            head[t - 1][j] = logsumexp((0..k).map(|c| log_r[j][c] + log_lik[t][c] + next[c]));
        }
    }

    let log_evidence = logsumexp(log_forward[t_len - 1].iter().copied());
    if !log_evidence.is_finite() {
        return Err(Error::Underflow { t: t_len - 1 });
    }

    let marginals: Vec<Vec<f64>> = (0..t_len)
        .map(|t| {
            let row: Vec<f64> = (0..k)
                .map(|c| (log_forward[t][c] + log_backward[t][c] - log_evidence).exp())
                .collect();
            let s: f64 = row.iter().sum();
            row.into_iter().map(|v| v / s).collect()
        })
        .collect();

    let pairwise: Vec<Vec<Vec<f64>>> = (1..t_len)
        .map(|t| {
            let mut slab: Vec<Vec<f64>> = (0..k)
                .map(|j| {
                    (0..k)
                        .map(|c| {
                            (log_forward[t - 1][j] + log_r[j][c] + log_lik[t][c] + log_backward[t][c]
                                - log_evidence)
                                .exp()
                        })
                        .collect()
                })
                .collect();
            let s: f64 = slab.iter().flatten().sum();
            slab.iter_mut().flatten().for_each(|v| *v /= s);
            slab
        })
        .collect();

    Ok(MessageTable { log_lik, log_forward, log_backward, log_evidence, marginals, pairwise })
}

/// Chain-entry part of the log-evidence gradient. The ratio
/// `pairwise / R_jk` is assembled directly from the messages, so zero
/// entries of the chain need no division.
pub(crate) fn chain_grads(table: &MessageTable) -> (Vec<f64>, Vec<Vec<f64>>) {
    let k = table.log_lik[0].len();
    let t_len = table.log_lik.len();
    let z = table.log_evidence;
    let rho0 = (0..k)
        .map(|c| (table.log_lik[0][c] + table.log_backward[0][c] - z).exp())
        .collect();
    let mut r = vec![vec![0.0; k]; k];
    for t in 1..t_len {
        for c in 0..k {
            let tail = table.log_lik[t][c] + table.log_backward[t][c] - z;
            if tail == f64::NEG_INFINITY {
                continue;
            }
            for (j, row) in r.iter_mut().enumerate() {
                row[c] += (table.log_forward[t - 1][j] + tail).exp();
            }
        }
    }
    (rho0, r)
}

/// Posterior-weighted per-context parameter gradient:
/// `sum_t marginal[t][k] * d log p(s_{t+1} | s_t, a_t, theta_k) / d theta_k`.
pub(crate) fn theta_grads(thetas: &[ContextParams], traj: &Trajectory, marginals: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut ws = Workspace::default();
    thetas
        .iter()
        .enumerate()
        .map(|(c, th)| {
            let mut g = vec![0.0; th.n_params()];
            for t in 0..traj.len() {
                let w = marginals[t][c];
                if w == 0.0 {
                    continue;
                }
                th.accumulate_grad(&mut ws, &traj.states[t], &traj.actions[t], &traj.states[t + 1], w, &mut g);
            }
            g
        })
        .collect()
}

/// Gradient of `log p(s | a)` with respect to every context's parameters and
/// to the chain entries.
pub fn likelihood_grads(
    chain: &ContextChain,
    thetas: &[ContextParams],
    traj: &Trajectory,
    table: &MessageTable,
) -> Result<LikelihoodGrads> {
    check_inputs(chain, thetas, traj)?;
    if table.marginals.len() != traj.len() {
        return Err(dim("message table does not belong to this trajectory"));
    }
    let theta = theta_grads(thetas, traj, &table.marginals);
    let (rho0, r) = chain_grads(table);
    if theta.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("parameter gradient".into()));
    }
    Ok(LikelihoodGrads { theta, rho0, r })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::NetworkSpec;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_traj(t: usize, rng: &mut impl Rng) -> Trajectory {
        Trajectory::new(
            (0..=t).map(|_| vec![rng.random_range(-1.0..1.0)]).collect(),
            (0..t).map(|_| vec![rng.random_range(-1.0..1.0)]).collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_context_evidence_is_sum_of_log_densities() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = NetworkSpec::new(1, 1, &[3]);
        let theta = ContextParams::init(&spec, 0.5, &mut rng);
        let traj = random_traj(7, &mut rng);
        let chain = ContextChain::new(vec![1.0], vec![vec![1.0]]).unwrap();
        let table = message_pass(&chain, std::slice::from_ref(&theta), &traj).unwrap();
        let direct: f64 = (0..7)
            .map(|t| theta.log_likelihood(&traj.states[t], &traj.actions[t], &traj.states[t + 1]).unwrap())
            .sum();
        assert_abs_diff_eq!(table.log_evidence, direct, epsilon = 1e-10);
        assert!(table.marginals.iter().all(|m| m[0] == 1.0));

        let grads = likelihood_grads(&chain, std::slice::from_ref(&theta), &traj, &table).unwrap();
        let mut plain = vec![0.0; theta.n_params()];
        for t in 0..7 {
            let (_, g) = theta.log_likelihood_and_grad(&traj.states[t], &traj.actions[t], &traj.states[t + 1]).unwrap();
            plain.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        for (a, b) in grads.theta[0].iter().zip(&plain) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn identical_contexts_follow_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = NetworkSpec::new(1, 1, &[]);
        let theta = ContextParams::init(&spec, 0.5, &mut rng);
        let thetas = vec![theta.clone(), theta];
        let chain = ContextChain::new(vec![0.9, 0.1], vec![vec![0.7, 0.3], vec![0.2, 0.8]]).unwrap();
        let traj = random_traj(6, &mut rng);
        let table = message_pass(&chain, &thetas, &traj).unwrap();
        let mut p = chain.rho0.clone();
        for t in 0..6 {
            assert_abs_diff_eq!(table.marginals[t][0], p[0], epsilon = 1e-12);
            p = vec![
                p[0] * chain.r[0][0] + p[1] * chain.r[1][0],
                p[0] * chain.r[0][1] + p[1] * chain.r[1][1],
            ];
        }
    }

    #[test]
    fn zero_mass_context_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = NetworkSpec::new(1, 1, &[2]);
        let thetas: Vec<_> = (0..2).map(|_| ContextParams::init(&spec, 0.5, &mut rng)).collect();
        let chain = ContextChain::new(vec![1.0, 0.0], vec![vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
        let traj = random_traj(5, &mut rng);
        let table = message_pass(&chain, &thetas, &traj).unwrap();
        let g = likelihood_grads(&chain, &thetas, &traj, &table).unwrap();
        assert!(g.theta[1].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn underflow_is_reported() {
        let spec = NetworkSpec::new(1, 1, &[]);
        let mut th = ContextParams::zeros(&spec, -30.0);
        th.log_std = vec![-400.0];
        let traj = Trajectory::new(vec![vec![0.0], vec![1e3]], vec![vec![0.0]]).unwrap();
        let chain = ContextChain::new(vec![1.0], vec![vec![1.0]]).unwrap();
        assert!(matches!(message_pass(&chain, &[th], &traj), Err(Error::Underflow { t: 0 })));
    }
}
