//! Variational learning of the switching dynamics model.
//!
//! The variational family is truncated at K contexts: point estimates for
//! the top-level stick fractions `nu_hat` and the dynamics parameters, and
//! independent Beta factors for every transition-row stick fraction
//! `mu_{jk}` (rows `j = 0..=K`, sticks `k = 1..K-1`), with shapes
//! `(mu_hat[j][k], mu_hat_row[j] - sum_{i<=k} mu_hat[j][i])`.

mod elbo;
mod fit;
mod messages;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chain::ContextChain;
use crate::dynamics::{ContextParams, NetworkSpec};
use crate::error::{dim, invalid, Error, Result};
use crate::prior::{self, BetaParams, HdpHyper, PriorKind, StickWeights};

pub use elbo::{elbo_estimate, elbo_gradients, ElboTerms, Objective, VpGrad};
pub use fit::{fit, fit_from, Adam, EpochRecord, FitResult, TrainConfig};
pub use messages::{likelihood_grads, message_pass, LikelihoodGrads, MessageTable};

/// One episode: states `s_0..s_T`, actions `a_0..a_{T-1}` and, for
/// evaluation only, the context `true_z[t]` that generated `s_{t+1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_z: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Trajectory {
    pub fn new(states: Vec<Vec<f64>>, actions: Vec<Vec<f64>>) -> Result<Self> {
        let t = Self { states, actions, true_z: None, env: None, seed: None };
        t.validate()?;
        Ok(t)
    }

    /// Number of transitions T.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.actions.len();
        if t == 0 {
            return Err(invalid("trajectory without transitions"));
        }
        if self.states.len() != t + 1 {
            return Err(dim(format!("{} states for {t} actions", self.states.len())));
        }
        let sd = self.states[0].len();
        let ad = self.actions[0].len();
        if self.states.iter().any(|s| s.len() != sd) || self.actions.iter().any(|a| a.len() != ad) {
            return Err(dim("ragged state or action rows"));
        }
        if let Some(z) = &self.true_z {
            if z.len() != t {
                return Err(dim(format!("{} context labels for {t} transitions", z.len())));
            }
        }
        Ok(())
    }
}

/// Free parameters of the truncated variational distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalParams {
    /// Top-level stick fractions, length K-1, each in (0, 1).
    pub nu_hat: Vec<f64>,
    /// First Beta shapes, `(K+1) x (K-1)`.
    pub mu_hat: Vec<Vec<f64>>,
    /// Row totals, length K+1.
    pub mu_hat_row: Vec<f64>,
    pub thetas: Vec<ContextParams>,
}

impl VariationalParams {
    pub fn k(&self) -> usize {
        self.thetas.len()
    }

    /// Initialization: `nu_hat` at the prior mean `1/(1+gamma)`, each
    /// `q(mu_jk)` equal to its prior at the resulting stick weights, and
    /// network weights drawn from the Gaussian weight prior.
    pub fn init<R: Rng + ?Sized>(
        spec: &NetworkSpec,
        hyper: &HdpHyper,
        kind: PriorKind,
        rng: &mut R,
    ) -> Result<Self> {
        hyper.validate()?;
        spec.validate()?;
        let k = hyper.k;
        let nu_hat = vec![1.0 / (1.0 + hyper.gamma); k - 1];
        let beta = StickWeights { beta: beta_weights(&nu_hat)? };
        let mut mu_hat = Vec::with_capacity(k + 1);
        let mut mu_hat_row = Vec::with_capacity(k + 1);
        for j in 0..=k {
            let priors = match kind {
                PriorKind::StickyDirichlet => prior::dirichlet_row_priors(j, hyper),
                _ => prior::sticky_row_priors(j, &beta, hyper)?,
            };
            let a: Vec<f64> = priors.iter().map(|p| p.a).collect();
            let total = a.iter().sum::<f64>() + priors.last().map_or(1.0, |p| p.b);
            mu_hat.push(a);
            mu_hat_row.push(total);
        }
        let thetas = (0..k)
            .map(|_| ContextParams::init(spec, hyper.theta_prior_std, rng))
            .collect();
        let vp = Self { nu_hat, mu_hat, mu_hat_row, thetas };
        vp.validate()?;
        Ok(vp)
    }

    /// Beta shapes of `q(mu_j.)` for row `j`.
    pub fn q_shapes(&self, j: usize) -> Vec<BetaParams> {
        let row = &self.mu_hat[j];
        let mut cum = 0.0;
        row.iter()
            .map(|&a| {
                cum += a;
                BetaParams { a, b: self.mu_hat_row[j] - cum }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k < 1 {
            return Err(invalid("no contexts"));
        }
        if self.nu_hat.len() + 1 != k {
            return Err(dim(format!("nu_hat has length {}, K = {k}", self.nu_hat.len())));
        }
        if self.nu_hat.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::Domain("nu_hat outside (0, 1)".into()));
        }
        if self.mu_hat.len() != k + 1
            || self.mu_hat_row.len() != k + 1
            || self.mu_hat.iter().any(|r| r.len() + 1 != k)
        {
            return Err(dim("mu_hat must be (K+1) x (K-1) with K+1 row totals"));
        }
        for j in 0..=k {
            for p in self.q_shapes(j) {
                if !(p.a > 0.0 && p.b > 0.0 && p.a.is_finite() && p.b.is_finite()) {
                    return Err(Error::Domain(format!("row {j} has Beta shapes ({}, {})", p.a, p.b)));
                }
            }
        }
        let spec = &self.thetas[0].spec;
        if self.thetas.iter().any(|t| &t.spec != spec) {
            return Err(invalid("contexts use different network layouts"));
        }
        Ok(())
    }

    pub fn stick_weights(&self) -> Result<StickWeights> {
        Ok(StickWeights { beta: beta_weights(&self.nu_hat)? })
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile::from(self);
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        file.into_params()
    }
}

/// On-disk checkpoint: JSON header fields followed by flat double arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub k: usize,
    pub spec: NetworkSpec,
    pub nu_hat: Vec<f64>,
    pub mu_hat: Vec<Vec<f64>>,
    pub mu_hat_row: Vec<f64>,
    pub params: Vec<Vec<f64>>,
}

impl From<&VariationalParams> for CheckpointFile {
    fn from(vp: &VariationalParams) -> Self {
        Self {
            k: vp.k(),
            spec: vp.thetas[0].spec.clone(),
            nu_hat: vp.nu_hat.clone(),
            mu_hat: vp.mu_hat.clone(),
            mu_hat_row: vp.mu_hat_row.clone(),
            params: vp.thetas.iter().map(|t| t.flatten()).collect(),
        }
    }
}

impl CheckpointFile {
    pub fn into_params(self) -> Result<VariationalParams> {
        if self.params.len() != self.k {
            return Err(dim("checkpoint parameter count differs from K"));
        }
        let thetas = self
            .params
            .iter()
            .map(|p| ContextParams::unflatten(&self.spec, p))
            .collect::<Result<Vec<_>>>()?;
        let vp = VariationalParams {
            nu_hat: self.nu_hat,
            mu_hat: self.mu_hat,
            mu_hat_row: self.mu_hat_row,
            thetas,
        };
        vp.validate()?;
        Ok(vp)
    }
}

/// Top-level stick weights from K-1 fractions (the K-th fraction is 1).
pub fn beta_weights(nu_hat: &[f64]) -> Result<Vec<f64>> {
    prior::stick_breaking(nu_hat, nu_hat.len() + 1)
}

/// Expected chain under `q(mu)`: by mean-field independence,
/// `E[rho_jk] = E[mu_jk] prod_{i<k} (1 - E[mu_ji])`. Row 0 becomes `rho0`.
pub fn extract_chain(vp: &VariationalParams) -> Result<ContextChain> {
    let k = vp.k();
    let mut rows = Vec::with_capacity(k + 1);
    for j in 0..=k {
        let means: Vec<f64> = vp.q_shapes(j).iter().map(BetaParams::mean).collect();
        let mut row = Vec::with_capacity(k);
        let mut rest = 1.0;
        for &m in &means {
            row.push(m * rest);
            rest *= 1.0 - m;
        }
        row.push(rest);
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v = (*v / s).clamp(0.0, 1.0));
        rows.push(row);
    }
    let rho0 = rows.remove(0);
    Ok(ContextChain { rho0, r: rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_vp(k: usize) -> VariationalParams {
        let spec = NetworkSpec::new(1, 1, &[]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        VariationalParams::init(&spec, &HdpHyper::with_k(k), PriorKind::Hdp, &mut rng).unwrap()
    }

    #[test]
    fn init_matches_prior() {
        let vp = toy_vp(4);
        let hyper = HdpHyper::with_k(4);
        let beta = vp.stick_weights().unwrap();
        for j in 0..=4 {
            let prior = prior::sticky_row_priors(j, &beta, &hyper).unwrap();
            for (q, p) in vp.q_shapes(j).iter().zip(&prior) {
                assert!((q.a - p.a).abs() < 1e-9 && (q.b - p.b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn symmetric_sticks_give_halving_rows() {
        let mut vp = toy_vp(3);
        for j in 0..=3 {
            // shapes (4, 8 - 4) and (2, 8 - 6): Beta(4, 4) and Beta(2, 2)
            vp.mu_hat[j] = vec![4.0, 2.0];
            vp.mu_hat_row[j] = 8.0;
        }
        let c = extract_chain(&vp).unwrap();
        for row in std::iter::once(&c.rho0).chain(&c.r) {
            assert!((row[0] - 0.5).abs() < 1e-12 && (row[1] - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_shapes_give_first_context() {
        let mut vp = toy_vp(3);
        vp.mu_hat[1] = vec![1e9, 1.0];
        vp.mu_hat_row[1] = 1e9 + 2.0;
        let c = extract_chain(&vp).unwrap();
        assert!((c.r[0][0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn validation_catches_bad_shapes() {
        let mut vp = toy_vp(3);
        vp.mu_hat_row[0] = vp.mu_hat[0].iter().sum::<f64>();
        assert!(vp.validate().is_err());
        let mut vp = toy_vp(3);
        vp.nu_hat[0] = 1.0;
        assert!(vp.validate().is_err());
    }

    #[test]
    fn trajectory_validation() {
        assert!(Trajectory::new(vec![vec![0.0]], vec![]).is_err());
        assert!(Trajectory::new(vec![vec![0.0]], vec![vec![1.0]]).is_err());
        assert!(Trajectory::new(vec![vec![0.0], vec![1.0]], vec![vec![1.0]]).is_ok());
    }

    #[test]
    fn checkpoint_round_trip() {
        let vp = toy_vp(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vp.json");
        vp.save_json(&path).unwrap();
        assert_eq!(VariationalParams::load_json(&path).unwrap(), vp);
    }
}
