//! Stick-breaking constructions, Beta-distribution machinery and log-prior
//! densities for the HDP, sticky-Dirichlet and MLE model variants.

pub mod special;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::VariationalParams;
use special::{beta_ln_pdf, beta_reg, digamma, ln_beta};

/// Smallest second Beta shape handed out by [`sticky_row_priors`].
pub const MIN_SHAPE: f64 = 1e-8;

/// Hyper-parameters of the sticky HDP prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HdpHyper {
    /// Top-level concentration.
    pub gamma: f64,
    /// Lower-level concentration.
    pub alpha: f64,
    /// Sticky factor.
    pub kappa: f64,
    /// Truncation level.
    pub k: usize,
    /// Prior standard deviation of the dynamics network weights.
    pub theta_prior_std: f64,
}

impl HdpHyper {
    /// Cart-pole defaults: gamma 2, alpha 1000, kappa 3K/5, std 0.1.
    pub fn with_k(k: usize) -> Self {
        Self {
            gamma: 2.0,
            alpha: 1e3,
            kappa: 3.0 * k as f64 / 5.0,
            k,
            theta_prior_std: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma > 0.0
            && self.alpha > 0.0
            && self.kappa >= 0.0
            && self.k >= 2
            && self.theta_prior_std > 0.0
            && self.gamma.is_finite()
            && self.alpha.is_finite()
            && self.kappa.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("hyper-parameters {self:?}")))
        }
    }
}

/// Which prior the transition model is trained under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    #[default]
    Hdp,
    #[serde(alias = "dirichlet")]
    StickyDirichlet,
    Mle,
}

impl std::str::FromStr for PriorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hdp" => Ok(PriorKind::Hdp),
            "dirichlet" | "sticky_dirichlet" => Ok(PriorKind::StickyDirichlet),
            "mle" => Ok(PriorKind::Mle),
            other => Err(Error::Invalid(format!("unknown prior kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub a: f64,
    pub b: f64,
}

impl BetaParams {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite() {
            Ok(Self { a, b })
        } else {
            Err(Error::Domain(format!("Beta shapes ({a}, {b})")))
        }
    }

    pub fn mean(&self) -> f64 {
        self.a / (self.a + self.b)
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        beta_ln_pdf(x, self.a, self.b)
    }

    pub fn cdf(&self, x: f64) -> Result<f64> {
        beta_reg(x, self.a, self.b)
    }

    /// Draws a sample as a ratio of two Gamma variates, computed in log space
    /// so that very small shapes do not collapse to 0/0.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let lx = ln_gamma_variate(self.a, rng);
        let ly = ln_gamma_variate(self.b, rng);
        // x = e^lx / (e^lx + e^ly)
        let d = ly - lx;
        if d > 0.0 {
            let e = (-d).exp();
            e / (1.0 + e)
        } else {
            1.0 / (1.0 + d.exp())
        }
    }
}

fn ln_gamma_variate<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape >= 1.0 {
        Gamma::new(shape, 1.0).expect("positive shape").sample(rng).ln()
    } else {
        // G(a) = G(a + 1) * U^(1/a)
        let g = Gamma::new(shape + 1.0, 1.0).expect("positive shape").sample(rng);
        let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        g.ln() + u.ln() / shape
    }
}

/// Stick weights; the last stick absorbs whatever mass remains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StickWeights {
    pub beta: Vec<f64>,
}

/// Stick-breaking map `w_k = v_k * prod_{i<k} (1 - v_i)`.
///
/// `fractions` may have length K (last entry must be 1) or K-1, in which
/// case the implicit final fraction 1 is appended.
pub fn stick_breaking(fractions: &[f64], k: usize) -> Result<Vec<f64>> {
    if fractions.len() != k && fractions.len() + 1 != k {
        return Err(Error::Dimension(format!(
            "{} stick fractions for K = {k}",
            fractions.len()
        )));
    }
    let mut out = Vec::with_capacity(k);
    let mut remaining = 1.0;
    for i in 0..k {
        let v = if i < fractions.len() { fractions[i] } else { 1.0 };
        if !(v > 0.0 && v <= 1.0) {
            return Err(Error::Domain(format!("stick fraction {v} at index {i}")));
        }
        if i == k - 1 && (v - 1.0).abs() > 0.0 {
            return Err(Error::Domain(format!("last stick fraction must be 1, got {v}")));
        }
        out.push(v * remaining);
        remaining *= 1.0 - v;
    }
    Ok(out)
}

/// GEM stick weights from the top-level fractions.
pub fn gem_weights(nu: &[f64]) -> Result<StickWeights> {
    Ok(StickWeights {
        beta: stick_breaking(nu, nu.len())?,
    })
}

/// Transition-row probabilities from one row of stick fractions.
pub fn rows_from_mu(mu_row: &[f64]) -> Result<Vec<f64>> {
    stick_breaking(mu_row, mu_row.len())
}

/// Beta prior shapes of the K-1 stick fractions of row `j` (row 0 is the
/// initial distribution, row `j >= 1` the transitions out of context j-1).
///
/// The k-th pair is `(alpha b_k + kappa d_jk, alpha + kappa - sum_{i<=k}(alpha b_i + kappa d_ji))`
/// with 1-based sticks. A nonpositive second shape is clamped to
/// [`MIN_SHAPE`] with a warning.
pub fn sticky_row_priors(j: usize, beta: &StickWeights, hyper: &HdpHyper) -> Result<Vec<BetaParams>> {
    let k = hyper.k;
    if beta.beta.len() != k {
        return Err(Error::Dimension(format!("beta has length {}, K = {k}", beta.beta.len())));
    }
    if j > k {
        return Err(Error::Invalid(format!("row {j} out of range for K = {k}")));
    }
    let mut cum = 0.0;
    let mut out = Vec::with_capacity(k - 1);
    for stick in 1..k {
        let delta = if stick == j { hyper.kappa } else { 0.0 };
        let a = hyper.alpha * beta.beta[stick - 1] + delta;
        cum += a;
        let mut b = hyper.alpha + hyper.kappa - cum;
        if b <= MIN_SHAPE {
            log::warn!("row {j} stick {stick}: second Beta shape {b:e} clamped to {MIN_SHAPE:e}");
            b = MIN_SHAPE;
        }
        let a = a.max(MIN_SHAPE);
        out.push(BetaParams { a, b });
    }
    Ok(out)
}

/// Stick-fraction Beta shapes equivalent to the sticky Dirichlet row prior
/// `Dir(alpha/K + kappa d_jk)`.
pub fn dirichlet_row_priors(j: usize, hyper: &HdpHyper) -> Vec<BetaParams> {
    let k = hyper.k;
    let conc: Vec<f64> = (1..=k)
        .map(|c| hyper.alpha / k as f64 + if c == j { hyper.kappa } else { 0.0 })
        .collect();
    (0..k - 1)
        .map(|i| BetaParams {
            a: conc[i],
            b: conc[i + 1..].iter().sum(),
        })
        .collect()
}

/// Central-difference derivative of the Beta CDF with respect to its shapes.
pub fn beta_cdf_shape_grad(x: f64, p: BetaParams) -> Result<(f64, f64)> {
    let ha = (1e-5 * (1.0 + p.a)).min(0.5 * p.a);
    let hb = (1e-5 * (1.0 + p.b)).min(0.5 * p.b);
    let da = (beta_reg(x, p.a + ha, p.b)? - beta_reg(x, p.a - ha, p.b)?) / (2.0 * ha);
    let db = (beta_reg(x, p.a, p.b + hb)? - beta_reg(x, p.a, p.b - hb)?) / (2.0 * hb);
    Ok((da, db))
}

/// Implicit reparameterization gradient `dx/dphi = -(dF/dphi) / p(x)` of a
/// Beta sample with respect to both shapes.
pub fn beta_implicit_grad(x: f64, params: BetaParams) -> Result<(f64, f64)> {
    if !(x > 0.0 && x < 1.0) {
        return Err(Error::Domain(format!("implicit gradient at x = {x}")));
    }
    let (dfa, dfb) = beta_cdf_shape_grad(x, params)?;
    let ln_p = params.ln_pdf(x);
    let inv_p = (-ln_p).exp();
    if !inv_p.is_finite() {
        return Err(Error::NonFinite(format!("Beta density underflow at x = {x}")));
    }
    Ok((-dfa * inv_p, -dfb * inv_p))
}

/// KL(Beta(q) || Beta(p)) in closed form.
pub fn kl_beta(q: BetaParams, p: BetaParams) -> f64 {
    let qs = q.a + q.b;
    let kl = ln_beta(p.a, p.b) - ln_beta(q.a, q.b)
        + (q.a - p.a) * digamma(q.a)
        + (q.b - p.b) * digamma(q.b)
        + (p.a - q.a + p.b - q.b) * digamma(qs);
    kl.max(0.0)
}

/// Gradient of [`kl_beta`] with respect to `(q.a, q.b, p.a, p.b)` by central
/// differences with relative step 1e-5.
pub fn kl_beta_grad(q: BetaParams, p: BetaParams) -> [f64; 4] {
    let raw = |qa: f64, qb: f64, pa: f64, pb: f64| {
        let qs = qa + qb;
        ln_beta(pa, pb) - ln_beta(qa, qb)
            + (qa - pa) * digamma(qa)
            + (qb - pb) * digamma(qb)
            + (pa - qa + pb - qb) * digamma(qs)
    };
    let step = |v: f64| (1e-5 * (1.0 + v)).min(0.5 * v);
    let (ha, hb, hpa, hpb) = (step(q.a), step(q.b), step(p.a), step(p.b));
    [
        (raw(q.a + ha, q.b, p.a, p.b) - raw(q.a - ha, q.b, p.a, p.b)) / (2.0 * ha),
        (raw(q.a, q.b + hb, p.a, p.b) - raw(q.a, q.b - hb, p.a, p.b)) / (2.0 * hb),
        (raw(q.a, q.b, p.a + hpa, p.b) - raw(q.a, q.b, p.a - hpa, p.b)) / (2.0 * hpa),
        (raw(q.a, q.b, p.a, p.b + hpb) - raw(q.a, q.b, p.a, p.b - hpb)) / (2.0 * hpb),
    ]
}

/// Log-density of Beta(1, gamma) at `v`.
pub fn ln_gem_fraction_prior(v: f64, gamma: f64) -> f64 {
    gamma.ln() + (gamma - 1.0) * (-v).ln_1p()
}

fn ln_normal(x: f64, std: f64) -> f64 {
    -0.5 * (x / std).powi(2) - std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Log-density of a Dirichlet with concentrations `conc` at `p`.
pub fn ln_dirichlet(p: &[f64], conc: &[f64]) -> f64 {
    let total: f64 = conc.iter().sum();
    let norm = statrs::function::gamma::ln_gamma(total)
        - conc.iter().map(|&c| statrs::function::gamma::ln_gamma(c)).sum::<f64>();
    norm + p.iter().zip(conc).map(|(&x, &c)| (c - 1.0) * x.ln()).sum::<f64>()
}

/// Gaussian log-prior over the network weights and biases of every context.
/// The per-dimension log standard deviations are left unregularized.
pub fn ln_theta_prior(vp: &VariationalParams, hyper: &HdpHyper) -> f64 {
    vp.thetas
        .iter()
        .flat_map(|t| t.weights_iter())
        .map(|w| ln_normal(w, hyper.theta_prior_std))
        .sum()
}

/// Log-prior of the point-estimated parameters.
///
/// * `Hdp`: Beta(1, gamma) terms for the top-level fractions plus the
///   Gaussian weight prior.
/// * `StickyDirichlet`: `Dir(alpha/K + kappa d_jk)` evaluated at the rows of
///   the expected chain plus the Gaussian weight prior.
/// * `Mle`: zero.
pub fn log_prior(vp: &VariationalParams, hyper: &HdpHyper, kind: PriorKind) -> Result<f64> {
    match kind {
        PriorKind::Mle => Ok(0.0),
        PriorKind::Hdp => {
            let mut lp = 0.0;
            for &v in &vp.nu_hat {
                if !(v > 0.0 && v < 1.0) {
                    return Err(Error::Domain(format!("nu_hat entry {v}")));
                }
                lp += ln_gem_fraction_prior(v, hyper.gamma);
            }
            Ok(lp + ln_theta_prior(vp, hyper))
        }
        PriorKind::StickyDirichlet => {
            let chain = crate::inference::extract_chain(vp)?;
            let k = hyper.k;
            let mut lp = 0.0;
            for j in 0..=k {
                let row = if j == 0 { &chain.rho0 } else { &chain.r[j - 1] };
                let conc: Vec<f64> = (1..=k)
                    .map(|c| hyper.alpha / k as f64 + if c == j { hyper.kappa } else { 0.0 })
                    .collect();
                lp += ln_dirichlet(row, &conc);
            }
            Ok(lp + ln_theta_prior(vp, hyper))
        }
    }
}
