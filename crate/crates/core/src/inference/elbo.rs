//! Monte-Carlo ELBO and its gradient with respect to the variational
//! parameters.
//!
//! The likelihood term is estimated with `n_samples` draws of the stick
//! fractions `mu ~ q(mu)`; its gradient with respect to the Beta shapes uses
//! implicit reparameterization chained through the stick-breaking map and the
//! exact chain gradient of the forward-backward evidence.

use rand::Rng;

use crate::chain::{self, ContextChain, DistillMode};
use crate::error::{dim, Error, Result};
use crate::par::{map_indexed, Parallelism};
use crate::prior::{self, BetaParams, HdpHyper, PriorKind, StickWeights};

use super::messages::{chain_grads, message_pass, theta_grads};
use super::{beta_weights, Trajectory, VariationalParams};

const X_FLOOR: f64 = 1e-12;

/// Everything the objective needs besides the parameters and the batch.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub hyper: &'a HdpHyper,
    pub kind: PriorKind,
    /// Number of `mu` draws per estimate.
    pub n_samples: usize,
    /// Dataset size N; the batch likelihood is scaled by N / B.
    pub dataset_size: usize,
    /// Contexts that survived distillation. When set, every sampled chain is
    /// replaced by its dimension-preserving stochastic complement on these
    /// contexts and the rows of the other contexts are frozen.
    pub active: Option<&'a [usize]>,
    pub exec: Parallelism,
}

impl<'a> Objective<'a> {
    pub fn new(hyper: &'a HdpHyper, kind: PriorKind, dataset_size: usize) -> Self {
        Self { hyper, kind, n_samples: 1, dataset_size, active: None, exec: Parallelism::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ElboTerms {
    pub elbo: f64,
    /// Scaled expected log-evidence of the batch.
    pub log_lik: f64,
    /// Sum of the Beta KL terms over all rows and sticks.
    pub kl: f64,
    /// Log-prior of the point estimates.
    pub log_prior: f64,
}

/// ELBO gradient, laid out like [`VariationalParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct VpGrad {
    pub nu: Vec<f64>,
    pub mu: Vec<Vec<f64>>,
    pub mu_row: Vec<f64>,
    pub theta: Vec<Vec<f64>>,
}

impl VpGrad {
    pub fn zeros(vp: &VariationalParams) -> Self {
        let k = vp.k();
        Self {
            nu: vec![0.0; k - 1],
            mu: vec![vec![0.0; k - 1]; k + 1],
            mu_row: vec![0.0; k + 1],
            theta: vp.thetas.iter().map(|t| vec![0.0; t.n_params()]).collect(),
        }
    }

    pub fn norm_nu(&self) -> f64 {
        l2(self.nu.iter())
    }

    pub fn norm_mu(&self) -> f64 {
        l2(self.mu.iter().flatten().chain(self.mu_row.iter()))
    }

    pub fn norm_theta(&self) -> f64 {
        l2(self.theta.iter().flatten())
    }

    pub fn is_finite(&self) -> bool {
        self.nu
            .iter()
            .chain(self.mu.iter().flatten())
            .chain(&self.mu_row)
            .chain(self.theta.iter().flatten())
            .all(|v| v.is_finite())
    }
}

fn l2<'a>(it: impl Iterator<Item = &'a f64>) -> f64 {
    it.map(|v| v * v).sum::<f64>().sqrt()
}

fn check(vp: &VariationalParams, batch: &[Trajectory], obj: &Objective) -> Result<()> {
    vp.validate()?;
    obj.hyper.validate()?;
    if obj.hyper.k != vp.k() {
        return Err(dim(format!("hyper K = {} but parameters have K = {}", obj.hyper.k, vp.k())));
    }
    if obj.n_samples == 0 {
        return Err(Error::Invalid("n_samples must be at least 1".into()));
    }
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    if let Some(active) = obj.active {
        if active.is_empty() || active.iter().any(|&c| c >= vp.k()) {
            return Err(Error::Invalid(format!("active context set {active:?}")));
        }
    }
    batch.iter().try_for_each(Trajectory::validate)
}

/// Prior shapes of row `j` given the top-level weights.
fn row_priors(j: usize, beta: &StickWeights, obj: &Objective) -> Result<Vec<BetaParams>> {
    match obj.kind {
        PriorKind::StickyDirichlet => Ok(prior::dirichlet_row_priors(j, obj.hyper)),
        _ => prior::sticky_row_priors(j, beta, obj.hyper),
    }
}

fn removed_of(k: usize, active: &[usize]) -> Vec<usize> {
    (0..k).filter(|c| !active.contains(c)).collect()
}

/// Rows `0..=K` of stick fractions -> chain.
fn chain_from_fractions(mu: &[Vec<f64>]) -> ContextChain {
    let mut rows: Vec<Vec<f64>> = mu.iter().map(|m| sticks(m)).collect();
    let rho0 = rows.remove(0);
    ContextChain { rho0, r: rows }
}

fn sticks(m: &[f64]) -> Vec<f64> {
    let mut row = Vec::with_capacity(m.len() + 1);
    let mut rest = 1.0;
    for &v in m {
        row.push(v * rest);
        rest *= 1.0 - v;
    }
    row.push(rest);
    row
}

/// Back-propagates `dL/drho` through the stick-breaking map of one row.
fn sticks_backward(m: &[f64], g_row: &[f64]) -> Vec<f64> {
    let n = m.len();
    (0..n)
        .map(|i| {
            let mut g = 0.0;
            // rho_i = m_i * prod_{l<i} (1 - m_l)
            let mut head = 1.0;
            for &v in &m[..i] {
                head *= 1.0 - v;
            }
            g += g_row[i] * head;
            // rho_c for c > i carries a factor (1 - m_i)
            for c in i + 1..=n {
                let mut prod = if c < n { m[c] } else { 1.0 };
                for (l, &v) in m[..c].iter().enumerate() {
                    if l != i {
                        prod *= 1.0 - v;
                    }
                }
                g -= g_row[c] * prod;
            }
            g
        })
        .collect()
}

/// Chain actually used for message passing, with what is needed to map its
/// gradient back to the sampled chain.
struct Masked {
    chain: ContextChain,
    kept: Vec<usize>,
    /// Escape block `(I - R22)^{-1} R21`, removed x kept.
    x: Vec<Vec<f64>>,
    rho0_mass: f64,
}

fn mask_chain(sampled: &ContextChain, active: &[usize]) -> Result<Masked> {
    let k = sampled.k();
    let removed = removed_of(k, active);
    let kept = active.to_vec();
    let chain = chain::distill_partition(sampled, &kept, &removed, DistillMode::Policy)?;
    let x = if removed.is_empty() {
        Vec::new()
    } else {
        let m = chain::escape_block(&sampled.r, &kept, &removed)?;
        (0..removed.len()).map(|a| (0..kept.len()).map(|b| m[(a, b)]).collect()).collect()
    };
    let rho0_mass = kept.iter().map(|&i| sampled.rho0[i]).sum();
    Ok(Masked { chain, kept, x, rho0_mass })
}

impl Masked {
    /// Maps gradients on the complement back to the rows of the sampled
    /// chain. Rows of removed contexts get no gradient.
    fn backward(&self, k: usize, g_rho0: &[f64], g_r: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let removed = removed_of(k, &self.kept);
        let mut out_r = vec![vec![0.0; k]; k];
        for &i in &self.kept {
            for &j in &self.kept {
                out_r[i][j] += g_r[i][j];
            }
            // R_hat[i][b] = R[i][b] + sum_l R[i][l] X[l][b]
            for (c, &l) in removed.iter().enumerate() {
                out_r[i][l] += self
                    .kept
                    .iter()
                    .enumerate()
                    .map(|(b, &j)| g_r[i][j] * self.x[c][b])
                    .sum::<f64>();
            }
        }
        let mut out_rho0 = vec![0.0; k];
        if self.rho0_mass > 0.0 {
            let mean: f64 = self.kept.iter().map(|&i| g_rho0[i] * self.chain.rho0[i]).sum();
            for &i in &self.kept {
                out_rho0[i] = (g_rho0[i] - mean) / self.rho0_mass;
            }
        }
        (out_rho0, out_r)
    }
}

struct SampleOut {
    log_ev: f64,
    g_rho0: Vec<f64>,
    g_r: Vec<Vec<f64>>,
    g_theta: Vec<Vec<f64>>,
}

fn per_trajectory(
    chain: &ContextChain,
    vp: &VariationalParams,
    batch: &[Trajectory],
    exec: Parallelism,
    want_grad: bool,
) -> Result<Vec<SampleOut>> {
    map_indexed(batch.len(), exec, |i| {
        let traj = &batch[i];
        let table = message_pass(chain, &vp.thetas, traj)?;
        if !want_grad {
            return Ok(SampleOut { log_ev: table.log_evidence, g_rho0: vec![], g_r: vec![], g_theta: vec![] });
        }
        let (g_rho0, g_r) = chain_grads(&table);
        let g_theta = theta_grads(&vp.thetas, traj, &table.marginals);
        Ok(SampleOut { log_ev: table.log_evidence, g_rho0, g_r, g_theta })
    })
    .into_iter()
    .collect()
}

fn draw_fractions<R: Rng + ?Sized>(shapes: &[Vec<BetaParams>], rng: &mut R) -> Vec<Vec<f64>> {
    shapes
        .iter()
        .map(|row| row.iter().map(|p| p.sample(rng).clamp(X_FLOOR, 1.0 - X_FLOOR)).collect())
        .collect()
}

/// Shared implementation: returns the terms and, if requested, the gradient.
fn evaluate<R: Rng + ?Sized>(
    vp: &VariationalParams,
    batch: &[Trajectory],
    obj: &Objective,
    rng: &mut R,
    want_grad: bool,
) -> Result<(ElboTerms, Option<VpGrad>)> {
    check(vp, batch, obj)?;
    let k = vp.k();
    let shapes: Vec<Vec<BetaParams>> = (0..=k).map(|j| vp.q_shapes(j)).collect();
    let frozen: Vec<bool> = match obj.active {
        Some(active) => (0..=k).map(|j| j > 0 && !active.contains(&(j - 1))).collect(),
        None => vec![false; k + 1],
    };
    let scale = obj.dataset_size as f64 / batch.len() as f64;
    let per_sample = scale / obj.n_samples as f64;

    let mut grad = VpGrad::zeros(vp);
    // gradient with respect to the q shapes (a, b) of every row and stick
    let mut g_qa = vec![vec![0.0; k - 1]; k + 1];
    let mut g_qb = vec![vec![0.0; k - 1]; k + 1];
    let mut log_lik = 0.0;

    for _ in 0..obj.n_samples {
        let mu = draw_fractions(&shapes, rng);
        let sampled = chain_from_fractions(&mu);
        let masked = obj.active.map(|a| mask_chain(&sampled, a)).transpose()?;
        let used = masked.as_ref().map_or(&sampled, |m| &m.chain);
        let outs = per_trajectory(used, vp, batch, obj.exec, want_grad)?;
        log_lik += per_sample * outs.iter().map(|o| o.log_ev).sum::<f64>();
        if !want_grad {
            continue;
        }

        let mut g_rho0 = vec![0.0; k];
        let mut g_r = vec![vec![0.0; k]; k];
        for o in &outs {
            g_rho0.iter_mut().zip(&o.g_rho0).for_each(|(a, b)| *a += b);
            for (row, orow) in g_r.iter_mut().zip(&o.g_r) {
                row.iter_mut().zip(orow).for_each(|(a, b)| *a += b);
            }
            for (acc, g) in grad.theta.iter_mut().zip(&o.g_theta) {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += per_sample * b);
            }
        }
        let (g_rho0, g_r) = match &masked {
            Some(m) => m.backward(k, &g_rho0, &g_r),
            None => (g_rho0, g_r),
        };

        for j in 0..=k {
            if frozen[j] {
                continue;
            }
            let g_row = if j == 0 { &g_rho0 } else { &g_r[j - 1] };
            let g_mu = sticks_backward(&mu[j], g_row);
            for (s, (&x, &g)) in mu[j].iter().zip(&g_mu).enumerate() {
                if g == 0.0 {
                    continue;
                }
                match prior::beta_implicit_grad(x, shapes[j][s]) {
                    Ok((dxa, dxb)) => {
                        g_qa[j][s] += per_sample * g * dxa;
                        g_qb[j][s] += per_sample * g * dxb;
                    }
                    Err(e) => log::debug!("row {j} stick {s}: implicit gradient skipped ({e})"),
                }
            }
        }
    }

    // KL(q(mu) || p(mu | nu)) and the log-prior of the point estimates
    let mut kl = 0.0;
    let mut log_prior = 0.0;
    if obj.kind != PriorKind::Mle {
        let beta = StickWeights { beta: beta_weights(&vp.nu_hat)? };
        // gradient of the objective with respect to the top-level weights
        let mut g_beta = vec![0.0; k];
        let alpha = obj.hyper.alpha;
        for j in 0..=k {
            let priors = row_priors(j, &beta, obj)?;
            for s in 0..k - 1 {
                let (q, p) = (shapes[j][s], priors[s]);
                kl += prior::kl_beta(q, p);
                if !want_grad {
                    continue;
                }
                let d = prior::kl_beta_grad(q, p);
                if !frozen[j] {
                    g_qa[j][s] -= d[0];
                    g_qb[j][s] -= d[1];
                }
                if obj.kind == PriorKind::Hdp {
                    // a = alpha beta_s + ..., b = alpha + kappa - sum_{i<=s} (alpha beta_i + ...)
                    g_beta[s] -= d[2] * alpha;
                    for gb in &mut g_beta[..=s] {
                        *gb += d[3] * alpha;
                    }
                }
            }
        }
        if obj.kind == PriorKind::Hdp {
            for &v in &vp.nu_hat {
                log_prior += prior::ln_gem_fraction_prior(v, obj.hyper.gamma);
            }
            if want_grad {
                let g_nu = beta_backward(&vp.nu_hat, &beta.beta, &g_beta);
                for (i, &v) in vp.nu_hat.iter().enumerate() {
                    grad.nu[i] = g_nu[i] - (obj.hyper.gamma - 1.0) / (1.0 - v);
                }
            }
        }
        log_prior += prior::ln_theta_prior(vp, obj.hyper);
        if want_grad {
            let var = obj.hyper.theta_prior_std.powi(2);
            for (g, th) in grad.theta.iter_mut().zip(&vp.thetas) {
                for (gi, w) in g.iter_mut().zip(th.weights_iter()) {
                    *gi -= w / var;
                }
            }
        }
    }

    if want_grad {
        if let Some(active) = obj.active {
            for c in removed_of(k, active) {
                grad.theta[c].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        // (a_s, b_s) = (mu_hat[j][s], mu_hat_row[j] - sum_{i<=s} mu_hat[j][i])
        for j in 0..=k {
            let mut tail = 0.0;
            for s in (0..k - 1).rev() {
                tail += g_qb[j][s];
                grad.mu[j][s] = g_qa[j][s] - tail;
            }
            grad.mu_row[j] = tail;
        }
    }

    let terms = ElboTerms { elbo: log_lik - kl + log_prior, log_lik, kl, log_prior };
    if !terms.elbo.is_finite() {
        return Err(Error::NonFinite(format!("ELBO terms {terms:?}")));
    }
    Ok((terms, want_grad.then_some(grad)))
}

/// `dL/dnu` from `dL/dbeta` for `beta_k = nu_k prod_{i<k} (1 - nu_i)` with
/// the final fraction fixed at 1.
fn beta_backward(nu: &[f64], beta: &[f64], g_beta: &[f64]) -> Vec<f64> {
    let k = beta.len();
    (0..nu.len())
        .map(|m| {
            let head: f64 = nu[..m].iter().map(|v| 1.0 - v).product();
            let mut g = g_beta[m] * head;
            for c in m + 1..k {
                // d beta_c / d nu_m = -beta_c / (1 - nu_m), written without the division
                let mut prod = if c < nu.len() { nu[c] } else { 1.0 };
                for (l, &v) in nu[..c].iter().enumerate() {
                    if l != m {
                        prod *= 1.0 - v;
                    }
                }
                g -= g_beta[c] * prod;
            }
            g
        })
        .collect()
}

/// Monte-Carlo estimate of the ELBO.
pub fn elbo_estimate<R: Rng + ?Sized>(
    vp: &VariationalParams,
    batch: &[Trajectory],
    obj: &Objective,
    rng: &mut R,
) -> Result<ElboTerms> {
    evaluate(vp, batch, obj, rng, false).map(|(t, _)| t)
}

/// ELBO estimate and its gradient. Uses the same random draws as
/// [`elbo_estimate`] called with an identically seeded generator.
pub fn elbo_gradients<R: Rng + ?Sized>(
    vp: &VariationalParams,
    batch: &[Trajectory],
    obj: &Objective,
    rng: &mut R,
) -> Result<(ElboTerms, VpGrad)> {
    let (terms, grad) = evaluate(vp, batch, obj, rng, true)?;
    Ok((terms, grad.expect("gradient requested")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{ContextParams, NetworkSpec};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn traj(rng: &mut ChaCha8Rng, t: usize) -> Trajectory {
        Trajectory::new(
            (0..=t).map(|_| vec![rng.random_range(-1.0..1.0)]).collect(),
            (0..t).map(|_| vec![rng.random_range(-1.0..1.0)]).collect(),
        )
        .unwrap()
    }

    fn setup(k: usize, kind: PriorKind) -> (VariationalParams, HdpHyper, Vec<Trajectory>) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut hyper = HdpHyper::with_k(k);
        hyper.alpha = 5.0;
        hyper.kappa = 1.0;
        let spec = NetworkSpec::new(1, 1, &[2]);
        let mut vp = VariationalParams::init(&spec, &hyper, kind, &mut rng).unwrap();
        for th in &mut vp.thetas {
            *th = ContextParams::init(&spec, 0.5, &mut rng);
            th.log_std = vec![-0.5];
        }
        let batch = (0..3).map(|_| traj(&mut rng, 5)).collect();
        (vp, hyper, batch)
    }

    #[test]
    fn sticks_backward_matches_finite_differences() {
        let m = [0.3, 0.6, 0.2];
        let g = [0.5, -1.0, 2.0, 0.7];
        let f = |m: &[f64]| sticks(m).iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
        let an = sticks_backward(&m, &g);
        for i in 0..3 {
            let mut p = m;
            let mut q = m;
            p[i] += 1e-6;
            q[i] -= 1e-6;
            assert_abs_diff_eq!(an[i], (f(&p) - f(&q)) / 2e-6, epsilon = 1e-8);
        }
    }

    #[test]
    fn mle_single_context_is_scaled_evidence() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = NetworkSpec::new(1, 1, &[]);
        let th = ContextParams::init(&spec, 0.5, &mut rng);
        let batch: Vec<_> = (0..2).map(|_| traj(&mut rng, 4)).collect();
        // K = 1 has no sticks; the hyper-parameter check needs K >= 2, so
        // emulate with two identical contexts
        let hyper = HdpHyper::with_k(2);
        let mut vp = VariationalParams::init(&spec, &hyper, PriorKind::Mle, &mut rng).unwrap();
        vp.thetas = vec![th.clone(), th.clone()];
        let obj = Objective::new(&hyper, PriorKind::Mle, 10);
        let terms = elbo_estimate(&vp, &batch, &obj, &mut rng).unwrap();
        let direct: f64 = batch
            .iter()
            .flat_map(|tr| {
                let th = th.clone();
                (0..tr.len()).map(move |t| th.log_likelihood(&tr.states[t], &tr.actions[t], &tr.states[t + 1]).unwrap())
            })
            .sum();
        assert_abs_diff_eq!(terms.elbo, 5.0 * direct, epsilon = 1e-9);
        assert_eq!(terms.kl, 0.0);
    }

    #[test]
    fn kl_vanishes_at_initialization() {
        let (vp, hyper, batch) = setup(3, PriorKind::Hdp);
        let obj = Objective::new(&hyper, PriorKind::Hdp, 3);
        let terms = elbo_estimate(&vp, &batch, &obj, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(terms.kl < 1e-9);
    }

    fn fd_check(kind: PriorKind, active: Option<&[usize]>) {
        let (mut vp, hyper, batch) = setup(3, kind);
        // move q away from the prior so the KL has a gradient
        for row in &mut vp.mu_hat {
            row[0] *= 1.3;
        }
        vp.nu_hat[0] = 0.45;
        let mut obj = Objective::new(&hyper, kind, 6);
        obj.active = active;
        let seed = 99;
        let (_, g) = elbo_gradients(&vp, &batch, &obj, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let eval = |vp: &VariationalParams| {
            elbo_estimate(vp, &batch, &obj, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().elbo
        };
        for i in 0..vp.nu_hat.len() {
            let h = 1e-6;
            let mut p = vp.clone();
            let mut q = vp.clone();
            p.nu_hat[i] += h;
            q.nu_hat[i] -= h;
            let fd = (eval(&p) - eval(&q)) / (2.0 * h);
            assert!((fd - g.nu[i]).abs() <= 1e-3 * fd.abs().max(1.0), "nu[{i}]: fd {fd} vs {}", g.nu[i]);
        }
        for c in 0..vp.k() {
            for i in 0..vp.thetas[c].n_params() {
                let h = 1e-6;
                let mut flat = vp.thetas[c].flatten();
                let mut p = vp.clone();
                flat[i] += h;
                p.thetas[c].assign(&flat);
                let mut q = vp.clone();
                flat[i] -= 2.0 * h;
                q.thetas[c].assign(&flat);
                let fd = (eval(&p) - eval(&q)) / (2.0 * h);
                let frozen = active.is_some_and(|a| !a.contains(&c));
                let expect = if frozen { 0.0 } else { fd };
                assert!(
                    (expect - g.theta[c][i]).abs() <= 1e-4 * fd.abs().max(1.0),
                    "theta[{c}][{i}]: fd {fd} vs {}",
                    g.theta[c][i]
                );
            }
        }
    }

    #[test]
    fn deterministic_blocks_match_finite_differences() {
        fd_check(PriorKind::Hdp, None);
        fd_check(PriorKind::StickyDirichlet, None);
        fd_check(PriorKind::Hdp, Some(&[0, 2]));
    }

    /// Gradient with respect to the mu shapes at fixed fractions: the mu
    /// draws depend on the shapes, so compare against the reparameterized
    /// objective evaluated on quantile-transformed common uniforms.
    #[test]
    fn kl_block_matches_finite_differences_without_data_term() {
        let (mut vp, hyper, _) = setup(3, PriorKind::Hdp);
        for row in &mut vp.mu_hat {
            row[1] *= 0.7;
        }
        let obj = Objective::new(&hyper, PriorKind::Hdp, 1);
        let kl_of = |vp: &VariationalParams| {
            let beta = vp.stick_weights().unwrap();
            (0..=3)
                .map(|j| {
                    let pr = prior::sticky_row_priors(j, &beta, &hyper).unwrap();
                    vp.q_shapes(j).iter().zip(&pr).map(|(q, p)| prior::kl_beta(*q, *p)).sum::<f64>()
                })
                .sum::<f64>()
        };
        // the likelihood part has zero scale when dataset_size is 0
        let mut obj0 = obj;
        obj0.dataset_size = 0;
        let one = [traj(&mut ChaCha8Rng::seed_from_u64(3), 2)];
        let (_, g) = elbo_gradients(&vp, &one, &obj0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let h = 1e-5;
        for j in 0..=3 {
            for s in 0..2 {
                let mut p = vp.clone();
                let mut q = vp.clone();
                p.mu_hat[j][s] += h;
                q.mu_hat[j][s] -= h;
                let fd = -(kl_of(&p) - kl_of(&q)) / (2.0 * h);
                assert!((fd - g.mu[j][s]).abs() < 1e-4 * fd.abs().max(1.0), "mu[{j}][{s}] {fd} vs {}", g.mu[j][s]);
            }
            let mut p = vp.clone();
            let mut q = vp.clone();
            p.mu_hat_row[j] += h;
            q.mu_hat_row[j] -= h;
            let fd = -(kl_of(&p) - kl_of(&q)) / (2.0 * h);
            assert!((fd - g.mu_row[j]).abs() < 1e-4 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn masked_backward_matches_finite_differences() {
        let sampled = ContextChain::new(
            vec![0.5, 0.3, 0.2],
            vec![vec![0.6, 0.3, 0.1], vec![0.2, 0.5, 0.3], vec![0.3, 0.3, 0.4]],
        )
        .unwrap();
        let active = [0, 2];
        let w = [[0.3, -1.2, 0.8], [0.5, 0.1, -0.4], [1.1, 0.2, 0.9]];
        let wr0 = [0.7, -0.3, 1.5];
        let f = |c: &ContextChain| {
            let m = mask_chain(c, &active).unwrap();
            let mut v: f64 = m.chain.rho0.iter().zip(&wr0).map(|(a, b)| a * b).sum();
            for i in 0..3 {
                for j in 0..3 {
                    v += w[i][j] * m.chain.r[i][j];
                }
            }
            v
        };
        let m = mask_chain(&sampled, &active).unwrap();
        let g_r: Vec<Vec<f64>> = w.iter().map(|r| r.to_vec()).collect();
        let (g0, gr) = m.backward(3, &wr0, &g_r);
        let h = 1e-7;
        for &i in &active {
            for j in 0..3 {
                let mut p = sampled.clone();
                let mut q = sampled.clone();
                p.r[i][j] += h;
                q.r[i][j] -= h;
                assert_abs_diff_eq!(gr[i][j], (f(&p) - f(&q)) / (2.0 * h), epsilon = 1e-6);
            }
            let mut p = sampled.clone();
            let mut q = sampled.clone();
            p.rho0[i] += h;
            q.rho0[i] -= h;
            assert_abs_diff_eq!(g0[i], (f(&p) - f(&q)) / (2.0 * h), epsilon = 1e-6);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let (vp, hyper, batch) = setup(3, PriorKind::Hdp);
        let mut obj = Objective::new(&hyper, PriorKind::Hdp, 3);
        obj.n_samples = 0;
        assert!(elbo_estimate(&vp, &batch, &obj, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let obj = Objective::new(&hyper, PriorKind::Hdp, 3);
        assert!(elbo_estimate(&vp, &[], &obj, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
