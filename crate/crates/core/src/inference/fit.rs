//! Stochastic-gradient ascent on the ELBO with per-block Adam, global
//! gradient-norm clipping and distillation during training.
//!
//! The optimizer works on unconstrained surrogates: logits of `nu_hat`, logs
//! of every first Beta shape `mu_hat[j][k]`, logs of each row slack
//! `mu_hat_row[j] - sum_k mu_hat[j][k]`, and the raw network parameters.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chain::{partition, stationary_distribution};
use crate::dynamics::NetworkSpec;
use crate::error::{Error, Result};
use crate::par::{mix_seed, Parallelism};
use crate::prior::{HdpHyper, PriorKind};

use super::elbo::{elbo_gradients, Objective, VpGrad};
use super::{extract_chain, Trajectory, VariationalParams};

/// Training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub kind: PriorKind,
    pub lr_theta: f64,
    pub lr_mu: f64,
    pub lr_nu: f64,
    /// Global gradient-norm clip applied to the surrogate gradient.
    pub clip_norm: f64,
    /// Passes over the dataset.
    pub epochs: usize,
    pub batch_size: usize,
    pub n_mu_samples: usize,
    /// Distill every this many epochs; 0 disables distillation.
    pub distill_every: usize,
    pub epsilon_train: f64,
    /// Also restrict the ELBO likelihood to the active contexts (the removed
    /// ones folded into the kept ones). Off by default: distillation then
    /// only shrinks the active set handed to the agent.
    pub mask_removed: bool,
    pub seed: u64,
    #[serde(skip)]
    pub exec: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kind: PriorKind::Hdp,
            lr_theta: 5e-3,
            lr_mu: 1e-2,
            lr_nu: 1e-2,
            clip_norm: 10.0,
            epochs: 50,
            batch_size: 20,
            n_mu_samples: 1,
            distill_every: 5,
            epsilon_train: 0.01,
            mask_removed: false,
            seed: 0,
            exec: Parallelism::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lrs_ok = [self.lr_theta, self.lr_mu, self.lr_nu].iter().all(|&l| l > 0.0 && l.is_finite());
        if !lrs_ok || !(self.clip_norm > 0.0) {
            return Err(Error::Invalid("learning rates and clip_norm must be positive".into()));
        }
        if self.batch_size == 0 || self.n_mu_samples == 0 {
            return Err(Error::Invalid("batch_size and n_mu_samples must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.epsilon_train) {
            return Err(Error::Invalid(format!("epsilon_train {} not in [0, 1)", self.epsilon_train)));
        }
        Ok(())
    }
}

/// Adam ascent on one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, n: usize) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// Moves `params` along `grad` (gradient ascent).
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] += self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the per-batch ELBO estimates over the epoch.
    pub elbo: f64,
    pub active_contexts: usize,
    pub grad_norm_theta: f64,
    pub grad_norm_mu: f64,
    pub grad_norm_nu: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub vp: VariationalParams,
    pub log: Vec<EpochRecord>,
    /// Contexts kept by the last distillation during training (all contexts
    /// if none ran).
    pub active: Vec<usize>,
    /// Set when training stopped early; `vp` then holds the last finite
    /// parameters.
    pub aborted: Option<String>,
}

/// Surrogate coordinates of the variational parameters.
struct Surrogate {
    nu: Vec<f64>,
    mu: Vec<f64>,
    theta: Vec<f64>,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn to_surrogate(vp: &VariationalParams) -> Surrogate {
    let mut mu = Vec::new();
    for (row, &total) in vp.mu_hat.iter().zip(&vp.mu_hat_row) {
        mu.extend(row.iter().map(|a| a.ln()));
        mu.push((total - row.iter().sum::<f64>()).ln());
    }
    Surrogate {
        nu: vp.nu_hat.iter().map(|&v| logit(v)).collect(),
        mu,
        theta: vp.thetas.iter().flat_map(|t| t.flatten()).collect(),
    }
}

fn from_surrogate(s: &Surrogate, vp: &mut VariationalParams) {
    let k = vp.k();
    for (v, &x) in vp.nu_hat.iter_mut().zip(&s.nu) {
        *v = sigmoid(x).clamp(1e-12, 1.0 - 1e-12);
    }
    for j in 0..=k {
        let base = j * k;
        let row: Vec<f64> = s.mu[base..base + k - 1].iter().map(|x| x.exp()).collect();
        let slack = s.mu[base + k - 1].exp();
        vp.mu_hat_row[j] = row.iter().sum::<f64>() + slack;
        vp.mu_hat[j] = row;
    }
    let mut off = 0;
    for th in &mut vp.thetas {
        let n = th.n_params();
        th.assign(&s.theta[off..off + n]);
        off += n;
    }
}

/// Chain rule from the natural-parameter gradient to the surrogates.
fn surrogate_grad(vp: &VariationalParams, g: &VpGrad) -> Surrogate {
    let nu = vp.nu_hat.iter().zip(&g.nu).map(|(&v, &d)| d * v * (1.0 - v)).collect();
    let mut mu = Vec::new();
    for j in 0..vp.mu_hat.len() {
        let row = &vp.mu_hat[j];
        // mu_hat[j][i] = e^{u_i}; mu_hat_row[j] = sum_i e^{u_i} + e^{w}
        mu.extend(row.iter().zip(&g.mu[j]).map(|(&a, &d)| a * (d + g.mu_row[j])));
        let slack = vp.mu_hat_row[j] - row.iter().sum::<f64>();
        mu.push(slack * g.mu_row[j]);
    }
    Surrogate { nu, mu, theta: g.theta.iter().flatten().copied().collect() }
}

fn finite(vp: &VariationalParams) -> bool {
    vp.validate().is_ok()
        && vp.thetas.iter().all(|t| t.flatten().iter().all(|v| v.is_finite()))
}

/// Trains from the default initialization drawn with `cfg.seed`.
pub fn fit(dataset: &[Trajectory], spec: &NetworkSpec, hyper: &HdpHyper, cfg: &TrainConfig) -> Result<FitResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x1a17));
    let init = VariationalParams::init(spec, hyper, cfg.kind, &mut rng)?;
    fit_from(init, None, dataset, hyper, cfg)
}

/// Continues training from `init`, optionally with an existing set of
/// active contexts.
pub fn fit_from(
    init: VariationalParams,
    active: Option<Vec<usize>>,
    dataset: &[Trajectory],
    hyper: &HdpHyper,
    cfg: &TrainConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    hyper.validate()?;
    init.validate()?;
    if dataset.is_empty() {
        return Err(Error::Invalid("empty dataset".into()));
    }
    dataset.iter().try_for_each(Trajectory::validate)?;
    let k = init.k();
    let mut active = active.unwrap_or_else(|| (0..k).collect());
    let mut vp = init;
    let mut log = Vec::with_capacity(cfg.epochs);

    let mut surr = to_surrogate(&vp);
    let mut adam_nu = Adam::new(cfg.lr_nu, surr.nu.len());
    let mut adam_mu = Adam::new(cfg.lr_mu, surr.mu.len());
    let mut adam_theta = Adam::new(cfg.lr_theta, surr.theta.len());
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xf17));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let bs = cfg.batch_size.min(dataset.len());

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut elbo_sum = 0.0;
        let mut n_batches = 0;
        let mut norms = (0.0, 0.0, 0.0);
        for chunk in order.chunks(bs) {
            let batch: Vec<Trajectory> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let mask = (cfg.mask_removed && active.len() < k).then_some(active.as_slice());
            let obj = Objective {
                hyper,
                kind: cfg.kind,
                n_samples: cfg.n_mu_samples,
                dataset_size: dataset.len(),
                active: mask,
                exec: cfg.exec,
            };
            let step = elbo_gradients(&vp, &batch, &obj, &mut rng).and_then(|(terms, g)| {
                if g.is_finite() {
                    Ok((terms, g))
                } else {
                    Err(Error::NonFinite("ELBO gradient".into()))
                }
            });
            let (terms, g) = match step {
                Ok(v) => v,
                Err(e) => return Ok(aborted(vp, log, active, epoch, e)),
            };
            elbo_sum += terms.elbo;
            n_batches += 1;
            norms = (g.norm_theta(), g.norm_mu(), g.norm_nu());

            let mut sg = surrogate_grad(&vp, &g);
            let total = sg.nu.iter().chain(&sg.mu).chain(&sg.theta).map(|v| v * v).sum::<f64>().sqrt();
            if total > cfg.clip_norm {
                let c = cfg.clip_norm / total;
                for v in sg.nu.iter_mut().chain(sg.mu.iter_mut()).chain(sg.theta.iter_mut()) {
                    *v *= c;
                }
            }
            let prev = surr.nu.clone();
            let prev_mu = surr.mu.clone();
            let prev_theta = surr.theta.clone();
            adam_nu.step(&mut surr.nu, &sg.nu);
            adam_mu.step(&mut surr.mu, &sg.mu);
            adam_theta.step(&mut surr.theta, &sg.theta);
            let mut next = vp.clone();
            from_surrogate(&surr, &mut next);
            if !finite(&next) {
                surr.nu = prev;
                surr.mu = prev_mu;
                surr.theta = prev_theta;
                let e = Error::NonFinite("parameters after update".into());
                return Ok(aborted(vp, log, active, epoch, e));
            }
            vp = next;
        }

        if cfg.distill_every > 0 && (epoch + 1) % cfg.distill_every == 0 {
            let chain = extract_chain(&vp)?;
            match stationary_distribution(&chain.r) {
                Ok(p) => {
                    let (kept, _) = partition(&p, cfg.epsilon_train);
                    let next: Vec<usize> = active.iter().copied().filter(|c| kept.contains(c)).collect();
                    if !next.is_empty() && next.len() < active.len() {
                        log::info!("epoch {epoch}: distilled to contexts {next:?}");
                        active = next;
                    }
                }
                Err(e) => log::warn!("epoch {epoch}: skipping distillation ({e})"),
            }
        }

        log.push(EpochRecord {
            epoch,
            elbo: elbo_sum / n_batches.max(1) as f64,
            active_contexts: active.len(),
            grad_norm_theta: norms.0,
            grad_norm_mu: norms.1,
            grad_norm_nu: norms.2,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }
    Ok(FitResult { vp, log, active, aborted: None })
}

fn aborted(vp: VariationalParams, log: Vec<EpochRecord>, active: Vec<usize>, epoch: usize, e: Error) -> FitResult {
    log::warn!("training aborted in epoch {epoch}: {e}");
    FitResult { vp, log, active, aborted: Some(format!("epoch {epoch}: {e}")) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ContextParams;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn surrogate_round_trip() {
        let spec = NetworkSpec::new(2, 1, &[3]);
        let hyper = HdpHyper::with_k(4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vp = VariationalParams::init(&spec, &hyper, PriorKind::Hdp, &mut rng).unwrap();
        let mut back = vp.clone();
        from_surrogate(&to_surrogate(&vp), &mut back);
        for (a, b) in vp.mu_hat.iter().flatten().zip(back.mu_hat.iter().flatten()) {
            assert!((a - b).abs() < 1e-9 * a);
        }
        for (a, b) in vp.nu_hat.iter().zip(&back.nu_hat) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(vp.thetas, back.thetas);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::new(0.1, 2);
        let mut p = vec![0.0, 0.0];
        adam.step(&mut p, &[3.0, -0.001]);
        assert!((p[0] - 0.1).abs() < 1e-6 && (p[1] + 0.1).abs() < 1e-4);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let spec = NetworkSpec::new(1, 1, &[]);
        let hyper = HdpHyper::with_k(3);
        let traj = Trajectory::new(vec![vec![0.0], vec![0.1]], vec![vec![0.0]]).unwrap();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let res = fit(&[traj], &spec, &hyper, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x1a17));
        let init = VariationalParams::init(&spec, &hyper, cfg.kind, &mut rng).unwrap();
        assert_eq!(res.vp, init);
        assert!(res.log.is_empty());
    }

    #[test]
    fn mle_recovers_linear_map() {
        // s' = s + (W [s; a] + c) + noise with W = [[-0.2, 0.5]], c = 0.1
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let data: Vec<Trajectory> = (0..20)
            .map(|_| {
                let mut s = vec![vec![rng.random_range(-1.0..1.0)]];
                let mut a = Vec::new();
                for t in 0..30 {
                    let u: f64 = rng.random_range(-1.0..1.0);
                    let x = s[t][0];
                    s.push(vec![x + (-0.2 * x + 0.5 * u + 0.1) + noise.sample(&mut rng)]);
                    a.push(vec![u]);
                }
                Trajectory::new(s, a).unwrap()
            })
            .collect();
        let spec = NetworkSpec::new(1, 1, &[]);
        let hyper = HdpHyper::with_k(2);
        let cfg = TrainConfig {
            kind: PriorKind::Mle,
            epochs: 300,
            batch_size: 10,
            lr_theta: 2e-2,
            distill_every: 0,
            ..TrainConfig::default()
        };
        let res = fit(&data, &spec, &hyper, &cfg).unwrap();
        assert!(res.aborted.is_none());
        // closed-form least squares on [s, a, 1] -> s' - s
        let rows: Vec<[f64; 4]> = data
            .iter()
            .flat_map(|tr| {
                (0..tr.len()).map(move |t| {
                    let x = tr.states[t][0];
                    [x, tr.actions[t][0], 1.0, tr.states[t + 1][0] - x]
                })
            })
            .collect();
        let x = nalgebra::DMatrix::from_fn(rows.len(), 3, |i, c| rows[i][c]);
        let y = nalgebra::DVector::from_fn(rows.len(), |i, _| rows[i][3]);
        let ls = (x.transpose() * &x).lu().solve(&(x.transpose() * y)).unwrap();
        // both contexts see the same data; check the dominant one
        let chain = extract_chain(&res.vp).unwrap();
        let c = if chain.rho0[0] >= chain.rho0[1] { 0 } else { 1 };
        let th: &ContextParams = &res.vp.thetas[c];
        let l = &th.layers[0];
        let learned = [l.w[0], l.w[1], l.b[0]];
        let err: f64 = (0..3).map(|i| (learned[i] - ls[i]).powi(2)).sum::<f64>().sqrt();
        assert!(err < 0.05 * ls.norm(), "learned {learned:?} vs least squares {ls:?}");
    }
}
