//! Online logistic regression with Adam, for measuring average regret when
//! moments are pruned mid-run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, LrSchedule};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretConfig {
    pub dim: usize,
    pub rounds: u64,
    pub seed: u64,
    pub adam: AdamConfig,
    /// L2 penalty added to every round's loss; must be >= 0 (convexity).
    pub l2: f64,
    /// Rounds `T` at which `R(T)/T` is reported.
    pub report_at: Vec<u64>,
    /// Gradient-norm tolerance for the hindsight solver.
    pub solver_tol: f64,
    pub solver_max_iters: usize,
}

impl Default for RegretConfig {
    fn default() -> Self {
        Self {
            dim: 10,
            rounds: 2000,
            seed: 17,
            adam: AdamConfig {
                lr: 0.1,
                schedule: LrSchedule::InvSqrt,
                ..AdamConfig::default()
            },
            l2: 0.0,
            report_at: vec![200, 500, 1000, 2000],
            solver_tol: 1e-10,
            solver_max_iters: 1_000_000,
        }
    }
}

impl RegretConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "l2 = {} would make the objective non-convex",
                self.l2
            )));
        }
        if self.dim == 0 || self.rounds == 0 {
            return Err(Error::InvalidConfig("dim and rounds must be positive".into()));
        }
        if let Some(t) = self.report_at.iter().find(|t| **t == 0 || **t > self.rounds) {
            return Err(Error::InvalidConfig(format!("report round {t} outside 1..={}", self.rounds)));
        }
        Ok(())
    }
}

/// Which moment entries are zeroed at the pruning round.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskRule {
    None,
    /// Prune entries whose `v` is below the mean of `v`.
    BelowMean,
    /// Prune everything.
    All,
    /// Keep only `v > beta * mean(v)`.
    Threshold { beta: f64 },
}

impl MaskRule {
    /// Keep-mask for second moments `v`.
    pub fn keep(&self, v: &[f32]) -> Vec<bool> {
        let mean = v.iter().map(|x| f64::from(*x)).sum::<f64>() / v.len().max(1) as f64;
        v.iter()
            .map(|x| {
                let x = f64::from(*x);
                match self {
                    MaskRule::None => true,
                    MaskRule::BelowMean => x >= mean,
                    MaskRule::All => false,
                    MaskRule::Threshold { beta } => x > beta * mean,
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretPoint {
    pub t: u64,
    pub regret: f64,
    pub average: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretReport {
    pub rule: MaskRule,
    pub prune_at: Option<u64>,
    /// Moment entries zeroed at the pruning round.
    pub pruned: usize,
    pub points: Vec<RegretPoint>,
}

impl RegretReport {
    pub fn average_at(&self, t: u64) -> Option<f64> {
        self.points.iter().find(|p| p.t == t).map(|p| p.average)
    }

    pub fn is_decreasing(&self) -> bool {
        self.points.windows(2).all(|w| w[1].average < w[0].average)
    }
}

/// The online stream: features and ±1 labels drawn from a logistic model.
pub struct LogisticStream {
    pub dim: usize,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl LogisticStream {
    pub fn generate(dim: usize, rounds: u64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = rounds as usize;
        let mut xs = Vec::with_capacity(n * dim);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let x: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let z: f64 = x.iter().zip(&truth).map(|(a, b)| a * b).sum();
            let p = 1.0 / (1.0 + (-z).exp());
            ys.push(if rng.random::<f64>() < p { 1.0 } else { -1.0 });
            xs.extend(x);
        }
        Self { dim, xs, ys }
    }

    fn x(&self, t: usize) -> &[f64] {
        &self.xs[t * self.dim..(t + 1) * self.dim]
    }

    /// `ln(1 + exp(-y θ·x)) + l2/2 |θ|²` for round `t` (0-based).
    pub fn loss(&self, t: usize, theta: &[f64], l2: f64) -> f64 {
        let margin = self.ys[t] * dot(self.x(t), theta);
        softplus(-margin) + 0.5 * l2 * dot(theta, theta)
    }

    /// Adds the round-`t` gradient scaled by `w` into `out`.
    fn add_grad(&self, t: usize, theta: &[f64], l2: f64, w: f64, out: &mut [f64]) {
        let y = self.ys[t];
        let x = self.x(t);
        let s = -y * sigmoid(-y * dot(x, theta));
        for i in 0..self.dim {
            out[i] += w * (s * x[i] + l2 * theta[i]);
        }
    }

    /// Minimizer of the mean loss over the first `rounds` rounds, by
    /// gradient descent with a fixed `1/L` step until `|grad| <= tol`.
    pub fn hindsight_optimum(&self, rounds: usize, l2: f64, tol: f64, max_iters: usize) -> Result<Vec<f64>> {
        let d = self.dim;
        // logistic curvature <= 1/4, so L <= mean |x|^2 / 4 + l2
        let lip = (0..rounds).map(|t| dot(self.x(t), self.x(t))).sum::<f64>() / (4.0 * rounds as f64) + l2;
        let step = 1.0 / lip;
        let mut theta = vec![0.0; d];
        let mut g = vec![0.0; d];
        for _ in 0..max_iters {
            g.fill(0.0);
            for t in 0..rounds {
                self.add_grad(t, &theta, l2, 1.0 / rounds as f64, &mut g);
            }
            if dot(&g, &g).sqrt() <= tol {
                return Ok(theta);
            }
            for i in 0..d {
                theta[i] -= step * g[i];
            }
        }
        Err(Error::InvalidConfig(format!(
            "hindsight solver did not reach tolerance {tol} in {max_iters} iterations"
        )))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Runs online Adam over the stream, optionally zeroing both moments per
/// `rule` right after round `prune_at`, and reports `R(T)/T` against the
/// best fixed point in hindsight for each `T` in `cfg.report_at`.
pub fn regret_experiment(cfg: &RegretConfig, prune_at: Option<u64>, rule: MaskRule) -> Result<RegretReport> {
    cfg.validate()?;
    let stream = LogisticStream::generate(cfg.dim, cfg.rounds, cfg.seed);
    let d = cfg.dim;
    let mut theta = vec![0f32; d];
    let mut m = vec![0f32; d];
    let mut v = vec![0f32; d];
    let mut g64 = vec![0f64; d];
    let mut online_loss = Vec::with_capacity(cfg.rounds as usize);
    let mut pruned = 0;
    for t in 1..=cfg.rounds {
        let i = (t - 1) as usize;
        let th: Vec<f64> = theta.iter().map(|x| f64::from(*x)).collect();
        online_loss.push(stream.loss(i, &th, cfg.l2));
        g64.fill(0.0);
        stream.add_grad(i, &th, cfg.l2, 1.0, &mut g64);
        let g: Vec<f32> = g64.iter().map(|x| *x as f32).collect();
        let lr = cfg.adam.lr_at(t, cfg.rounds);
        adam_step(&mut theta, &mut m, &mut v, &g, &cfg.adam, lr, t)?;
        if Some(t) == prune_at {
            for (k, keep) in rule.keep(&v).into_iter().enumerate() {
                if !keep {
                    m[k] = 0.0;
                    v[k] = 0.0;
                    pruned += 1;
                }
            }
        }
    }
    let mut report_at = cfg.report_at.clone();
    report_at.sort_unstable();
    report_at.dedup();
    let points = report_at
        .into_iter()
        .map(|t| {
            let n = t as usize;
            let star = stream.hindsight_optimum(n, cfg.l2, cfg.solver_tol, cfg.solver_max_iters)?;
            let best: f64 = (0..n).map(|i| stream.loss(i, &star, cfg.l2)).sum();
            let regret = online_loss[..n].iter().sum::<f64>() - best;
            Ok(RegretPoint {
                t,
                regret,
                average: regret / t as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RegretReport {
        rule,
        prune_at: prune_at.filter(|_| rule != MaskRule::None),
        pruned,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hindsight_optimum_has_zero_gradient_and_beats_neighbours() {
        let s = LogisticStream::generate(3, 300, 5);
        let star = s.hindsight_optimum(300, 0.0, 1e-10, 1_000_000).unwrap();
        let f = |th: &[f64]| (0..300).map(|t| s.loss(t, th, 0.0)).sum::<f64>();
        let base = f(&star);
        for i in 0..3 {
            for h in [-1e-3, 1e-3] {
                let mut p = star.clone();
                p[i] += h;
                assert!(f(&p) > base);
            }
        }
    }

    #[test]
    fn mask_rules() {
        let v = [1.0f32, 2.0, 3.0, 10.0];
        assert_eq!(MaskRule::BelowMean.keep(&v), [false, false, false, true]);
        assert_eq!(MaskRule::Threshold { beta: 2.0 }.keep(&v), [false, false, false, true]);
        assert_eq!(MaskRule::Threshold { beta: 0.5 }.keep(&v), [false, false, true, true]);
        assert!(MaskRule::All.keep(&v).iter().all(|k| !k));
        assert!(MaskRule::None.keep(&v).iter().all(|k| *k));
    }

    #[test]
    fn numerics_are_stable() {
        assert!((softplus(-800.0)).abs() < 1e-300);
        assert!((softplus(800.0) - 800.0).abs() < 1e-9);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn short_run_and_validation() {
        let cfg = RegretConfig {
            rounds: 400,
            report_at: vec![100, 400],
            ..RegretConfig::default()
        };
        let r = regret_experiment(&cfg, None, MaskRule::None).unwrap();
        assert_eq!(r.points.len(), 2);
        assert!(r.points.iter().all(|p| p.regret.is_finite()));
        let bad = RegretConfig { l2: -1.0, ..cfg.clone() };
        assert!(regret_experiment(&bad, None, MaskRule::None).is_err());
        let bad = RegretConfig { report_at: vec![500], ..cfg };
        assert!(regret_experiment(&bad, None, MaskRule::None).is_err());
    }
}
