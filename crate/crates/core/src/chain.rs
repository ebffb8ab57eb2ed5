//! Stochastic-matrix algebra: validation, stationary distributions and the
//! stochastic-complement reduction used to distill spurious contexts.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SUM_TOL: f64 = 1e-12;
const POWER_TOL: f64 = 1e-12;
const POWER_MAX_ITER: usize = 100_000;

/// Initial distribution and row-stochastic transition matrix over K contexts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextChain {
    pub rho0: Vec<f64>,
    pub r: Vec<Vec<f64>>,
}

/// How the distilled transition matrix is laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    /// Spurious contexts are dropped: the result is |I1| x |I1|.
    #[default]
    Mpc,
    /// Dimensions are kept: spurious rows hold their escape distribution
    /// and every column into a spurious context is zero.
    Policy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillResult {
    pub chain: ContextChain,
    pub kept: Vec<usize>,
    pub removed: Vec<usize>,
    /// Stationary distribution of the original chain.
    pub stationary: Vec<f64>,
}

impl ContextChain {
    /// Builds and validates a chain.
    pub fn new(rho0: Vec<f64>, r: Vec<Vec<f64>>) -> Result<Self> {
        let chain = Self { rho0, r };
        chain.validate()?;
        Ok(chain)
    }

    pub fn k(&self) -> usize {
        self.rho0.len()
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            rho0: vec![1.0 / k as f64; k],
            r: vec![vec![1.0 / k as f64; k]; k],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.rho0.len();
        if k == 0 {
            return Err(Error::Invalid("chain with zero contexts".into()));
        }
        if self.r.len() != k || self.r.iter().any(|row| row.len() != k) {
            return Err(Error::Dimension(format!("transition matrix is not {k}x{k}")));
        }
        check_prob_vector(&self.rho0, "rho0")?;
        for (i, row) in self.r.iter().enumerate() {
            check_prob_vector(row, &format!("row {i}"))?;
        }
        Ok(())
    }

    /// Relabels contexts: new context `i` is old context `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            rho0: perm.iter().map(|&p| self.rho0[p]).collect(),
            r: perm
                .iter()
                .map(|&p| perm.iter().map(|&q| self.r[p][q]).collect())
                .collect(),
        }
    }

    /// CSV layout: first line `rho0`, then one line per row of `R`, all
    /// values with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in std::iter::once(&self.rho0).chain(self.r.iter()) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            let _ = writeln!(out, "{}", line.join(","));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|f| {
                    f.trim().parse::<f64>().map_err(|e| Error::Parse {
                        line: i + 1,
                        msg: e.to_string(),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Parse { line: 1, msg: "empty chain file".into() });
        }
        let rho0 = rows.remove(0);
        Self::new(rho0, rows)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

fn check_prob_vector(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::Invalid(format!("{what} has entries outside [0, 1]")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(Error::Invalid(format!("{what} sums to {s}")));
    }
    Ok(())
}

fn to_matrix(r: &[Vec<f64>]) -> DMatrix<f64> {
    let k = r.len();
    DMatrix::from_fn(k, k, |i, j| r[i][j])
}

fn left_residual(p: &[f64], r: &[Vec<f64>]) -> f64 {
    let k = p.len();
    (0..k)
        .map(|j| ((0..k).map(|i| p[i] * r[i][j]).sum::<f64>() - p[j]).abs())
        .fold(0.0, f64::max)
}

/// Stationary distribution `p = p R`.
///
/// Power iteration from the uniform vector (residual 1e-12, at most 100 000
/// sweeps), falling back to a direct solve of `(R^T - I) p = 0, sum p = 1`.
pub fn stationary_distribution(r: &[Vec<f64>]) -> Result<Vec<f64>> {
    let k = r.len();
    if k == 0 || r.iter().any(|row| row.len() != k) {
        return Err(Error::Dimension("stationary_distribution needs a square matrix".into()));
    }
    let mut p = vec![1.0 / k as f64; k];
    let mut next = vec![0.0; k];
    let mut residual = f64::INFINITY;
    for _ in 0..POWER_MAX_ITER {
        next.iter_mut().for_each(|x| *x = 0.0);
        for (i, row) in r.iter().enumerate() {
            let pi = p[i];
            if pi == 0.0 {
                continue;
            }
            for (n, &rij) in next.iter_mut().zip(row) {
                *n += pi * rij;
            }
        }
        let s: f64 = next.iter().sum();
        next.iter_mut().for_each(|x| *x /= s);
        residual = p.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        std::mem::swap(&mut p, &mut next);
        if residual < POWER_TOL {
            return Ok(p);
        }
    }
    log::debug!("power iteration stalled at residual {residual:e}; solving directly");
    let mut a = to_matrix(r).transpose() - DMatrix::identity(k, k);
    let mut rhs = nalgebra::DVector::zeros(k);
    for j in 0..k {
        a[(k - 1, j)] = 1.0;
    }
    rhs[k - 1] = 1.0;
    let sol = a.lu().solve(&rhs).ok_or(Error::NoConvergence { residual })?;
    let p: Vec<f64> = sol.iter().map(|&x| x.max(0.0)).collect();
    let s: f64 = p.iter().sum();
    let p: Vec<f64> = p.into_iter().map(|x| x / s).collect();
    let res = left_residual(&p, r);
    if !res.is_finite() || res > 1e-10 {
        return Err(Error::NoConvergence { residual: res });
    }
    Ok(p)
}

/// Splits `0..K` into indices with `score >= epsilon` and the rest. An empty
/// kept set falls back to the single highest-scoring index.
pub fn partition(scores: &[f64], epsilon: f64) -> (Vec<usize>, Vec<usize>) {
    let (mut kept, mut removed): (Vec<usize>, Vec<usize>) =
        (0..scores.len()).partition(|&i| scores[i] >= epsilon);
    if kept.is_empty() && !scores.is_empty() {
        let best = (0..scores.len())
            .fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
        log::warn!("distillation threshold {epsilon} removes every context; keeping context {best}");
        removed.retain(|&i| i != best);
        kept.push(best);
    }
    (kept, removed)
}

/// Escape block `(I - R22)^{-1} R21` computed with an LU solve.
pub(crate) fn escape_block(r: &[Vec<f64>], kept: &[usize], removed: &[usize]) -> Result<DMatrix<f64>> {
    let m = removed.len();
    let i_minus = DMatrix::from_fn(m, m, |a, b| {
        (if a == b { 1.0 } else { 0.0 }) - r[removed[a]][removed[b]]
    });
    let r21 = DMatrix::from_fn(m, kept.len(), |a, b| r[removed[a]][kept[b]]);
    let lu = i_minus.lu();
    let x = lu
        .solve(&r21)
        .ok_or_else(|| Error::Singular("I - R[removed, removed] is singular".into()))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("I - R[removed, removed] is singular".into()));
    }
    Ok(x)
}

/// Stochastic complement of `R` on `kept`.
pub fn complement(r: &[Vec<f64>], kept: &[usize], removed: &[usize]) -> Result<Vec<Vec<f64>>> {
    let n = kept.len();
    let mut out: Vec<Vec<f64>> = kept
        .iter()
        .map(|&i| kept.iter().map(|&j| r[i][j]).collect())
        .collect();
    if removed.is_empty() {
        return Ok(out);
    }
    let x = escape_block(r, kept, removed)?;
    for (a, &i) in kept.iter().enumerate() {
        for b in 0..n {
            out[a][b] += removed
                .iter()
                .enumerate()
                .map(|(c, &l)| r[i][l] * x[(c, b)])
                .sum::<f64>();
        }
    }
    for (a, row) in out.iter_mut().enumerate() {
        let s: f64 = row.iter().sum();
        if !s.is_finite() || (s - 1.0).abs() > 1e-6 {
            return Err(Error::Singular(format!(
                "reduced row {a} sums to {s}; spurious block has spectral radius 1"
            )));
        }
        // round-off can leave entries a few ulps outside [0, 1]
        row.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    Ok(out)
}

/// Distills a chain given an explicit kept/removed partition.
pub fn distill_partition(
    chain: &ContextChain,
    kept: &[usize],
    removed: &[usize],
    mode: DistillMode,
) -> Result<ContextChain> {
    let k = chain.k();
    let reduced = complement(&chain.r, kept, removed)?;
    let mass: f64 = kept.iter().map(|&i| chain.rho0[i]).sum();
    let rho_kept: Vec<f64> = if mass > 0.0 {
        kept.iter().map(|&i| chain.rho0[i] / mass).collect()
    } else {
        vec![1.0 / kept.len() as f64; kept.len()]
    };
    match mode {
        DistillMode::Mpc => Ok(ContextChain { rho0: rho_kept, r: reduced }),
        DistillMode::Policy => {
            let mut rho0 = vec![0.0; k];
            let mut r = vec![vec![0.0; k]; k];
            for (a, &i) in kept.iter().enumerate() {
                rho0[i] = rho_kept[a];
                for (b, &j) in kept.iter().enumerate() {
                    r[i][j] = reduced[a][b];
                }
            }
            if !removed.is_empty() {
                let x = escape_block(&chain.r, kept, removed)?;
                for (c, &l) in removed.iter().enumerate() {
                    for (b, &j) in kept.iter().enumerate() {
                        r[l][j] = x[(c, b)].clamp(0.0, 1.0);
                    }
                }
            }
            Ok(ContextChain { rho0, r })
        }
    }
}

/// Removes contexts whose stationary mass is below `epsilon`.
pub fn distill(chain: &ContextChain, epsilon: f64, mode: DistillMode) -> Result<DistillResult> {
    chain.validate()?;
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::Invalid(format!("distillation threshold {epsilon} not in [0, 1)")));
    }
    let stationary = stationary_distribution(&chain.r)?;
    distill_by(chain, &stationary, epsilon, mode).map(|mut res| {
        res.stationary = stationary;
        res
    })
}

/// Distills using caller-supplied scores (for example the top-level stick
/// weights) instead of the stationary distribution. The returned
/// `stationary` field still holds the stationary distribution of `chain`.
pub fn distill_by(
    chain: &ContextChain,
    scores: &[f64],
    epsilon: f64,
    mode: DistillMode,
) -> Result<DistillResult> {
    if scores.len() != chain.k() {
        return Err(Error::Dimension(format!(
            "{} scores for {} contexts",
            scores.len(),
            chain.k()
        )));
    }
    let (kept, removed) = partition(scores, epsilon);
    let reduced = distill_partition(chain, &kept, &removed, mode)?;
    let stationary = stationary_distribution(&chain.r)?;
    Ok(DistillResult { chain: reduced, kept, removed, stationary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn three_state() -> ContextChain {
        ContextChain::new(
            vec![0.5, 0.3, 0.2],
            vec![
                vec![0.8, 0.15, 0.05],
                vec![0.1, 0.85, 0.05],
                vec![0.45, 0.45, 0.1],
            ],
        )
        .unwrap()
    }

    #[test]
    fn stationary_two_state() {
        let p = stationary_distribution(&[vec![0.7, 0.3], vec![0.2, 0.8]]).unwrap();
        assert_abs_diff_eq!(p[0], 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.6, epsilon = 1e-12);
        let p = stationary_distribution(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn stationary_periodic_chain() {
        let p = stationary_distribution(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn stationary_slow_mixing_chain_uses_fallback() {
        let eps = 1e-9;
        let r = vec![vec![1.0 - eps, eps], vec![2.0 * eps, 1.0 - 2.0 * eps]];
        let p = stationary_distribution(&r).unwrap();
        assert_abs_diff_eq!(p[0], 2.0 / 3.0, epsilon = 1e-6);
        assert!(left_residual(&p, &r) < 1e-10);
    }

    #[test]
    fn distill_zero_threshold_is_identity() {
        let c = three_state();
        let res = distill(&c, 0.0, DistillMode::Mpc).unwrap();
        assert!(res.removed.is_empty());
        assert_eq!(res.chain, c);
    }

    #[test]
    fn distill_three_state_example() {
        let c = three_state();
        let res = distill_partition(&c, &[0, 1], &[2], DistillMode::Mpc).unwrap();
        let expected = [[0.825, 0.175], [0.125, 0.875]];
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(res.r[i][j], expected[i][j], epsilon = 1e-12);
            }
        }
        assert_abs_diff_eq!(res.rho0[0], 0.625, epsilon = 1e-12);

        let pol = distill_partition(&c, &[0, 1], &[2], DistillMode::Policy).unwrap();
        for row in &pol.r {
            assert_eq!(row[2], 0.0);
            assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(pol.r[2][0], 0.5, epsilon = 1e-12);
        assert_eq!(pol.rho0[2], 0.0);
    }

    #[test]
    fn distill_by_stationary_threshold() {
        let c = three_state();
        let p = stationary_distribution(&c.r).unwrap();
        assert!(p[2] < 0.06 && p[2] > 0.04);
        let res = distill(&c, 0.1, DistillMode::Mpc).unwrap();
        assert_eq!(res.kept, vec![0, 1]);
        assert_eq!(res.removed, vec![2]);
    }

    #[test]
    fn over_aggressive_threshold_keeps_argmax() {
        let c = three_state();
        let res = distill(&c, 0.99, DistillMode::Mpc).unwrap();
        assert_eq!(res.kept.len(), 1);
        assert_eq!(res.chain.r, vec![vec![1.0]]);
    }

    #[test]
    fn distilled_chains_validate_despite_round_off() {
        let r = vec![
            vec![0.1, 0.3, 0.6],
            vec![0.7, 0.2, 0.1],
            vec![0.3, 0.3, 0.4],
        ];
        let c = ContextChain::new(vec![0.2, 0.3, 0.5], r).unwrap();
        for kept in [vec![0], vec![1], vec![2], vec![0, 2]] {
            let removed: Vec<usize> = (0..3).filter(|i| !kept.contains(i)).collect();
            for mode in [DistillMode::Mpc, DistillMode::Policy] {
                distill_partition(&c, &kept, &removed, mode).unwrap().validate().unwrap();
            }
        }
    }

    #[test]
    fn singular_spurious_block() {
        // context 2 is absorbing, so I - R22 = 0
        let c = ContextChain::new(
            vec![0.5, 0.5, 0.0],
            vec![vec![0.5, 0.4, 0.1], vec![0.4, 0.5, 0.1], vec![0.0, 0.0, 1.0]],
        )
        .unwrap();
        assert!(matches!(
            distill_partition(&c, &[0, 1], &[2], DistillMode::Mpc),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn validation_errors() {
        assert!(ContextChain::new(vec![0.5, 0.6], vec![vec![1.0, 0.0], vec![0.0, 1.0]]).is_err());
        assert!(ContextChain::new(vec![0.5, 0.5], vec![vec![1.0, 0.0]]).is_err());
        assert!(ContextChain::new(vec![1.5, -0.5], vec![vec![1.0, 0.0], vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let c = three_state();
        let back = ContextChain::from_csv(&c.to_csv()).unwrap();
        assert_eq!(back, c);
        assert!(ContextChain::from_csv("0.5,0.5\n1.0,x\n0.0,1.0\n").is_err());
    }
}
