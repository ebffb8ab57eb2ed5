use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Cart-pole swing-up. State `(x, x_dot, theta, theta_dot)` with
/// `theta = 0` upright; the applied force is `chi_z * clip(a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CartPole {
    pub cart_mass: f64,
    pub pole_mass: f64,
    /// Full pole length; the pole is a uniform rod.
    pub pole_length: f64,
    pub gravity: f64,
    pub friction: f64,
    pub dt: f64,
    pub force_max: f64,
    /// Force multiplier per context.
    pub chis: Vec<f64>,
    pub noise_std: f64,
    pub init_std: f64,
}

impl Default for CartPole {
    fn default() -> Self {
        Self {
            cart_mass: 0.5,
            pole_mass: 0.5,
            pole_length: 0.6,
            gravity: 9.82,
            friction: 0.1,
            dt: 0.04,
            force_max: 20.0,
            chis: vec![1.0, -1.0],
            noise_std: 0.01,
            init_std: 0.05,
        }
    }
}

impl CartPole {
    /// Hanging pole with small perturbations.
    pub fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut s = vec![0.0, 0.0, PI, 0.0];
        for v in &mut s {
            let e: f64 = StandardNormal.sample(rng);
            *v += self.init_std * e;
        }
        s
    }

    /// Cart and pole accelerations for force `f`.
    pub fn accelerations(&self, s: &[f64], f: f64) -> (f64, f64) {
        let (m_c, m_p, g) = (self.cart_mass, self.pole_mass, self.gravity);
        let l = 0.5 * self.pole_length;
        let (sn, cs) = s[2].sin_cos();
        let th_dot = s[3];
        let num = 4.0 * (f - self.friction * s[1]) + 4.0 * m_p * l * th_dot * th_dot * sn - 3.0 * m_p * g * sn * cs;
        let den = 4.0 * (m_c + m_p) - 3.0 * m_p * cs * cs;
        let x_acc = num / den;
        let th_acc = 3.0 / (4.0 * l) * (g * sn - cs * x_acc);
        (x_acc, th_acc)
    }

    /// Semi-implicit Euler: velocities first, then positions with the new
    /// velocities.
    pub fn mean_next(&self, s: &[f64], a: &[f64], z: usize) -> Vec<f64> {
        let f = self.chis[z] * a[0].clamp(-self.force_max, self.force_max);
        let (x_acc, th_acc) = self.accelerations(s, f);
        let x_dot = s[1] + self.dt * x_acc;
        let th_dot = s[3] + self.dt * th_acc;
        vec![s[0] + self.dt * x_dot, x_dot, s[2] + self.dt * th_dot, th_dot]
    }

    pub fn reward(s_next: &[f64]) -> f64 {
        s_next[2].cos()
    }

    /// Total mechanical energy, zero potential at the pivot height.
    pub fn energy(&self, s: &[f64]) -> f64 {
        let (m_c, m_p, g) = (self.cart_mass, self.pole_mass, self.gravity);
        let l = 0.5 * self.pole_length;
        let (x_dot, th, th_dot) = (s[1], s[2], s[3]);
        0.5 * (m_c + m_p) * x_dot * x_dot
            + m_p * l * th.cos() * x_dot * th_dot
            + 2.0 / 3.0 * m_p * l * l * th_dot * th_dot
            + m_p * g * l * th.cos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upright_rest_is_equilibrium() {
        let cp = CartPole::default();
        let s = [0.0; 4];
        let next = cp.mean_next(&s, &[0.0], 0);
        assert_eq!(next, vec![0.0; 4]);
        assert_eq!(CartPole::reward(&next), 1.0);
    }

    #[test]
    fn context_flips_force() {
        let cp = CartPole::default();
        let s = [0.0, 0.0, PI, 0.0];
        let a = cp.mean_next(&s, &[5.0], 0);
        let b = cp.mean_next(&s, &[5.0], 1);
        assert!(a[1] > 0.0 && b[1] < 0.0);
        assert!((a[1] + b[1]).abs() < 1e-12);
        // clipping happens before the context multiplier
        assert_eq!(cp.mean_next(&s, &[50.0], 1), cp.mean_next(&s, &[20.0], 1));
    }

    #[test]
    fn energy_is_conserved_without_friction() {
        let cp = CartPole { friction: 0.0, ..CartPole::default() };
        // 0.3 rad swing around the hanging position; larger swings lose
        // several percent per 100 steps at this step size
        let mut s = vec![0.0, 0.0, PI - 0.3, 0.0];
        let scale = cp.pole_mass * cp.gravity * 0.5 * cp.pole_length;
        let e0 = cp.energy(&s);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            s = cp.mean_next(&s, &[0.0], 0);
            worst = worst.max((cp.energy(&s) - e0).abs());
        }
        // relative to the potential energy range of the pole
        assert!(worst / (2.0 * scale) < 0.01, "drift {}", worst / (2.0 * scale));
    }

    #[test]
    fn pole_falls_from_tilt() {
        let cp = CartPole::default();
        let mut s = vec![0.0, 0.0, 0.1, 0.0];
        for _ in 0..25 {
            s = cp.mean_next(&s, &[0.0], 0);
        }
        assert!(s[2] > 1.0);
    }
}
