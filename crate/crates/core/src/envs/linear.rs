use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{ContextParams, NetworkSpec};

/// Dynamics of one context: `s' = A s + B (chi a) + noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearContext {
    pub a: [[f64; 2]; 2],
    pub b: [[f64; 2]; 2],
    pub chi: f64,
}

impl LinearContext {
    /// `decay * Rot(angle)` with `B = gain * I`.
    pub fn rotation(angle: f64, decay: f64, gain: f64, chi: f64) -> Self {
        let (sn, cs) = angle.sin_cos();
        Self {
            a: [[decay * cs, -decay * sn], [decay * sn, decay * cs]],
            b: [[gain, 0.0], [0.0, gain]],
            chi,
        }
    }
}

/// Two-dimensional switching linear-Gaussian system with quadratic reward
/// `1 - |s' - goal|^2 - action_cost |a|^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchingLinear {
    pub contexts: Vec<LinearContext>,
    pub noise_std: f64,
    pub init_std: f64,
    pub action_bound: f64,
    pub goal: [f64; 2],
    pub action_cost: f64,
}

impl SwitchingLinear {
    /// Two contexts rotating in opposite directions with opposite action
    /// signs.
    pub fn benchmark() -> Self {
        Self {
            contexts: vec![
                LinearContext::rotation(0.3, 0.95, 0.5, 1.0),
                LinearContext::rotation(-0.3, 0.95, 0.5, -1.0),
            ],
            noise_std: 0.05,
            init_std: 0.1,
            action_bound: 1.0,
            goal: [1.0, 0.0],
            action_cost: 0.01,
        }
    }

    pub fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..2)
            .map(|_| {
                let e: f64 = StandardNormal.sample(rng);
                self.init_std * e
            })
            .collect()
    }

    pub fn mean_next(&self, s: &[f64], a: &[f64], z: usize) -> Vec<f64> {
        let c = &self.contexts[z];
        (0..2)
            .map(|i| {
                (0..2).map(|j| c.a[i][j] * s[j]).sum::<f64>() + (0..2).map(|j| c.b[i][j] * c.chi * a[j]).sum::<f64>()
            })
            .collect()
    }

    pub fn reward(&self, s_next: &[f64], a: &[f64]) -> f64 {
        let dist: f64 = s_next.iter().zip(&self.goal).map(|(s, g)| (s - g).powi(2)).sum();
        let effort: f64 = a.iter().map(|v| v * v).sum();
        1.0 - dist - self.action_cost * effort
    }

    /// The exact dynamics of each context as an affine network, usable by
    /// the planner and the filter.
    pub fn true_params(&self) -> Vec<ContextParams> {
        let spec = NetworkSpec::new(2, 2, &[]);
        self.contexts
            .iter()
            .map(|c| {
                let mut th = ContextParams::zeros(&spec, self.noise_std.ln());
                // mean = s + W [s; a] + b, so W = [A - I, chi B]
                for i in 0..2 {
                    for j in 0..2 {
                        let w = &mut th.layers[0].w;
                        w[i * 4 + j] = c.a[i][j] - f64::from(u8::from(i == j));
                        w[i * 4 + 2 + j] = c.chi * c.b[i][j];
                    }
                }
                th
            })
            .collect()
    }
}
