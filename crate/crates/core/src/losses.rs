//! Multi-label losses on logits: binary cross-entropy and the asymmetric
//! loss (separate focusing exponents for positives and negatives plus a
//! probability shift on negatives).
//!
//! Both losses are summed over classes and return the per-logit gradient
//! alongside the value. With `gamma_pos = gamma_neg = 0` and `clip = 0` the
//! asymmetric loss evaluates the very same floating-point expressions as BCE,
//! so the two agree bit for bit.

use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Bce,
    Asl,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Bce => "bce",
            LossKind::Asl => "asl",
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bce" => Ok(LossKind::Bce),
            "asl" => Ok(LossKind::Asl),
            other => Err(Error::Config(format!("unknown loss kind '{other}'"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    /// Probability shift applied to negatives.
    pub clip: f64,
    /// Floor inside logarithms that cannot use the log-sigmoid form.
    pub eps_log: f64,
}

impl LossConfig {
    pub fn bce() -> Self {
        Self {
            kind: LossKind::Bce,
            gamma_pos: 0.0,
            gamma_neg: 0.0,
            clip: 0.0,
            eps_log: 1e-12,
        }
    }

    /// ASL with `gamma_pos = 0`, `gamma_neg = 4`, `clip = 0.05`.
    pub fn asl() -> Self {
        Self {
            kind: LossKind::Asl,
            gamma_pos: 0.0,
            gamma_neg: 4.0,
            clip: 0.05,
            eps_log: 1e-12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma_pos >= 0.0
            && self.gamma_neg >= 0.0
            && (0.0..1.0).contains(&self.clip)
            && self.eps_log > 0.0
            && [self.gamma_pos, self.gamma_neg, self.eps_log].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid loss settings {self:?}")))
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::asl()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn check(logits: &[f64], labels: &[u8]) -> Result<()> {
    if logits.len() != labels.len() {
        return shape_err(format!(
            "{} logits but {} labels",
            logits.len(),
            labels.len()
        ));
    }
    Ok(())
}

/// Value and gradient of a loss for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Vec<f64>,
}

pub fn bce_loss(logits: &[f64], labels: &[u8]) -> Result<LossOutput> {
    check(logits, labels)?;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(labels) {
        // -log sigma(z) = softplus(-z), -log(1 - sigma(z)) = softplus(z)
        value += if y != 0 { softplus(-z) } else { softplus(z) };
        grad.push(sigmoid(z) - f64::from(y.min(1)));
    }
    Ok(LossOutput { value, grad })
}

pub fn asl_loss(logits: &[f64], labels: &[u8], cfg: &LossConfig) -> Result<LossOutput> {
    check(logits, labels)?;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(labels) {
        let p = sigmoid(z);
        if y != 0 {
            let gp = cfg.gamma_pos;
            let focus = (1.0 - p).powf(gp);
            let log_p = -softplus(-z);
            value += focus * softplus(-z);
            // d/dz [-(1-p)^g log p] = g p (1-p)^g log p + (1-p)^g (p - 1)
            let focus_term = if gp == 0.0 { 0.0 } else { gp * p * focus * log_p };
            grad.push(focus_term + focus * (p - 1.0));
        } else {
            let gn = cfg.gamma_neg;
            let pm = if cfg.clip == 0.0 { p } else { (p - cfg.clip).max(0.0) };
            if cfg.clip > 0.0 && pm <= 0.0 {
                grad.push(0.0);
                continue;
            }
            let focus = pm.powf(gn);
            let neg_log = if cfg.clip == 0.0 {
                softplus(z)
            } else {
                -(1.0 - pm).max(cfg.eps_log).ln()
            };
            value += focus * neg_log;
            // dp/dz = p(1-p); d/dpm [-pm^g log(1-pm)] = -g pm^(g-1) log(1-pm) + pm^g / (1-pm)
            let ratio = if cfg.clip == 0.0 { 1.0 } else { (1.0 - p) / (1.0 - pm) };
            let focus_term = if gn == 0.0 {
                0.0
            } else {
                gn * pm.powf(gn - 1.0) * neg_log * p * (1.0 - p)
            };
            grad.push(focus_term + focus * p * ratio);
        }
    }
    Ok(LossOutput { value, grad })
}

/// Dispatches on `cfg.kind`.
pub fn loss(cfg: &LossConfig, logits: &[f64], labels: &[u8]) -> Result<LossOutput> {
    match cfg.kind {
        LossKind::Bce => bce_loss(logits, labels),
        LossKind::Asl => asl_loss(logits, labels, cfg),
    }
}

pub fn loss_gradient(cfg: &LossConfig, logits: &[f64], labels: &[u8]) -> Result<Vec<f64>> {
    Ok(loss(cfg, logits, labels)?.grad)
}
