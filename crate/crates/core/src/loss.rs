//! Training objective on supplied log-probabilities and value estimates.
//!
//! `total = dpo + alpha1 * mse + alpha2 * lm + alpha3 * reg`, where the
//! regularizer's value-gap target is held constant under differentiation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("invalid input: {0}")]
    OutOfRange(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossInputs {
    pub logp_chosen_policy: f64,
    pub logp_rejected_policy: f64,
    pub logp_chosen_ref: f64,
    pub logp_rejected_ref: f64,
    pub v_chosen: f64,
    pub v_rejected: f64,
    pub q_chosen: f64,
    pub q_rejected: f64,
}

impl LossInputs {
    fn named(&self) -> [(&'static str, f64); 8] {
        [
            ("logp_chosen_policy", self.logp_chosen_policy),
            ("logp_rejected_policy", self.logp_rejected_policy),
            ("logp_chosen_ref", self.logp_chosen_ref),
            ("logp_rejected_ref", self.logp_rejected_ref),
            ("v_chosen", self.v_chosen),
            ("v_rejected", self.v_rejected),
            ("q_chosen", self.q_chosen),
            ("q_rejected", self.q_rejected),
        ]
    }

    pub fn check_finite(&self) -> Result<(), LossError> {
        match self.named().into_iter().find(|(_, v)| !v.is_finite()) {
            Some((name, _)) => Err(LossError::NonFinite(name)),
            None => Ok(()),
        }
    }

    /// Log-probabilities must be non-positive, values and targets in [-1, 1].
    pub fn validate(&self) -> Result<(), LossError> {
        self.check_finite()?;
        let named = self.named();
        if let Some((name, _)) = named[..4].iter().find(|(_, v)| *v > 0.0) {
            return Err(LossError::OutOfRange(name));
        }
        if let Some((name, _)) = named[4..].iter().find(|(_, v)| v.abs() > 1.0) {
            return Err(LossError::OutOfRange(name));
        }
        Ok(())
    }

    /// The six differentiable inputs, in [`Gradient`] order.
    pub fn params(&self) -> [f64; 6] {
        [
            self.logp_chosen_policy,
            self.logp_rejected_policy,
            self.logp_chosen_ref,
            self.logp_rejected_ref,
            self.v_chosen,
            self.v_rejected,
        ]
    }

    pub fn with_params(&self, p: [f64; 6]) -> Self {
        LossInputs {
            logp_chosen_policy: p[0],
            logp_rejected_policy: p[1],
            logp_chosen_ref: p[2],
            logp_rejected_ref: p[3],
            v_chosen: p[4],
            v_rejected: p[5],
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { beta: 0.1, gamma: 0.1, alpha1: 0.25, alpha2: 5.0, alpha3: 0.001 }
    }
}

/// Partial derivatives with respect to [`LossInputs::params`].
pub type Gradient = [f64; 6];

pub fn pref_logit(x: &LossInputs, beta: f64) -> f64 {
    beta * ((x.logp_chosen_policy - x.logp_chosen_ref) - (x.logp_rejected_policy - x.logp_rejected_ref))
}

fn dlogit(beta: f64) -> Gradient {
    [beta, -beta, -beta, beta, 0.0, 0.0]
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-ln sigmoid(logit)`.
pub fn dpo_loss(logit: f64) -> f64 {
    softplus(-logit)
}

fn hinge(diff: f64, gamma: f64) -> f64 {
    (diff * diff - gamma).max(0.0)
}

pub fn mse_margin_loss(v_w: f64, v_l: f64, q_w: f64, q_l: f64, gamma: f64) -> f64 {
    0.5 * (hinge(v_w - q_w, gamma) + hinge(v_l - q_l, gamma))
}

pub fn lm_loss(logp_chosen_policy: f64) -> f64 {
    -logp_chosen_policy
}

pub fn reg_loss(logit: f64, v_w: f64, v_l: f64) -> f64 {
    let d = logit - (v_w - v_l);
    d * d
}

/// Gradient of the regularizer; the value rows are zero.
pub fn reg_gradient(x: &LossInputs, beta: f64) -> Gradient {
    let logit = pref_logit(x, beta);
    let outer = 2.0 * (logit - (x.v_chosen - x.v_rejected));
    dlogit(beta).map(|g| outer * g)
}

pub fn dpo_gradient(x: &LossInputs, beta: f64) -> Gradient {
    let outer = -sigmoid(-pref_logit(x, beta));
    dlogit(beta).map(|g| outer * g)
}

pub fn mse_gradient(x: &LossInputs, gamma: f64) -> Gradient {
    let side = |v: f64, q: f64| {
        let d = v - q;
        if d * d > gamma {
            d
        } else {
            0.0
        }
    };
    [0.0, 0.0, 0.0, 0.0, side(x.v_chosen, x.q_chosen), side(x.v_rejected, x.q_rejected)]
}

pub fn lm_gradient() -> Gradient {
    [-1.0, 0.0, 0.0, 0.0, 0.0, 0.0]
}

/// Individual terms and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub dpo: f64,
    pub mse: f64,
    pub lm: f64,
    pub reg: f64,
    pub total: f64,
}

pub fn loss_terms(x: &LossInputs, w: &LossWeights) -> Result<LossTerms, LossError> {
    x.check_finite()?;
    let logit = pref_logit(x, w.beta);
    let dpo = dpo_loss(logit);
    let mse = mse_margin_loss(x.v_chosen, x.v_rejected, x.q_chosen, x.q_rejected, w.gamma);
    let lm = lm_loss(x.logp_chosen_policy);
    let reg = reg_loss(logit, x.v_chosen, x.v_rejected);
    let total = dpo + w.alpha1 * mse + w.alpha2 * lm + w.alpha3 * reg;
    if !total.is_finite() {
        return Err(LossError::NonFinite("total"));
    }
    Ok(LossTerms { dpo, mse, lm, reg, total })
}

pub fn total_loss(x: &LossInputs, w: &LossWeights) -> Result<(f64, Gradient), LossError> {
    let terms = loss_terms(x, w)?;
    let parts = [
        (1.0, dpo_gradient(x, w.beta)),
        (w.alpha1, mse_gradient(x, w.gamma)),
        (w.alpha2, lm_gradient()),
        (w.alpha3, reg_gradient(x, w.beta)),
    ];
    let mut grad = [0.0; 6];
    for (scale, g) in parts {
        for (acc, gi) in grad.iter_mut().zip(g) {
            *acc += scale * gi;
        }
    }
    Ok((terms.total, grad))
}

/// One line of a batch loss report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossRecord {
    pub pair_id: String,
    pub dpo: f64,
    pub mse: f64,
    pub lm: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossRecord {
    pub fn new(pair_id: impl Into<String>, t: LossTerms) -> Self {
        LossRecord { pair_id: pair_id.into(), dpo: t.dpo, mse: t.mse, lm: t.lm, reg: t.reg, total: t.total }
    }
}
