//! Adam (Kingma convention, bias-corrected) over flat f32 slices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `lr / sqrt(t)`.
    InvSqrt,
    /// Linear from `lr` at step 1 to `lr * end_factor` at `total` steps.
    Linear { end_factor: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: LrSchedule::Constant,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.beta1 * self.beta1 / self.beta2.sqrt() >= 1.0 {
            return bad(format!(
                "beta1^2 / sqrt(beta2) must be < 1 (beta1 = {}, beta2 = {})",
                self.beta1, self.beta2
            ));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if let LrSchedule::Linear { end_factor } = self.schedule {
            if !(end_factor > 0.0 && end_factor <= 1.0) {
                return bad(format!("end_factor must lie in (0, 1], got {end_factor}"));
            }
        }
        Ok(())
    }

    /// Learning rate at step `t >= 1` of a `total`-step run.
    pub fn lr_at(&self, t: u64, total: u64) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::InvSqrt => self.lr / (t.max(1) as f64).sqrt(),
            LrSchedule::Linear { end_factor } => {
                let span = total.saturating_sub(1).max(1) as f64;
                let frac = (t.saturating_sub(1) as f64 / span).min(1.0);
                self.lr * (1.0 - frac * (1.0 - end_factor))
            }
        }
    }
}

/// One Adam update at step `t` (already incremented, so `t >= 1`).
///
/// `m <- b1 m + (1 - b1) g`, `v <- b2 v + (1 - b2) g^2`,
/// `theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step(
    theta: &mut [f32],
    m: &mut [f32],
    v: &mut [f32],
    g: &[f32],
    cfg: &AdamConfig,
    lr: f64,
    t: u64,
) -> Result<()> {
    let n = theta.len();
    if m.len() != n || v.len() != n || g.len() != n {
        return Err(Error::LengthMismatch {
            tensor: "adam state".into(),
            shape: vec![n],
            expected: n,
            found: g.len().min(m.len()).min(v.len()),
        });
    }
    if t == 0 {
        return Err(Error::InvalidConfig("adam step counter must be >= 1".into()));
    }
    if let Some(index) = g.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            tensor: "gradient".into(),
            index,
        });
    }
    let b1 = cfg.beta1 as f32;
    let b2 = cfg.beta2 as f32;
    let c1 = (1.0 - cfg.beta1) as f32;
    let c2 = (1.0 - cfg.beta2) as f32;
    let t = i32::try_from(t).unwrap_or(i32::MAX);
    let step = (lr / (1.0 - cfg.beta1.powi(t))) as f32;
    let inv_bc2 = (1.0 / (1.0 - cfg.beta2.powi(t))) as f32;
    let eps = cfg.eps as f32;
    for i in 0..n {
        let gi = g[i];
        let mi = b1 * m[i] + c1 * gi;
        let vi = b2 * v[i] + c2 * gi * gi;
        m[i] = mi;
        v[i] = vi;
        theta[i] -= step * mi / ((vi * inv_bc2).sqrt() + eps);
    }
    Ok(())
}
