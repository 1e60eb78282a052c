//! Training objective terms. Every term is a mean over all `N x D` token
//! elements; `delta` arguments are token matrices `Tok(v_hat)` stored
//! row-major, one row per token.

use serde::{Deserialize, Serialize};

use crate::error::{EvdError, Result};
use crate::flow::{time_weight, TimeWeightConfig};
use crate::latent::LatentVideo;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_real: f64,
    pub lambda_cons: f64,
    pub lambda_order: f64,
    pub time_weight: TimeWeightConfig,
    /// Half-width of the second-time jitter for the consistency term.
    pub delta_jitter: f64,
    pub p_event_dropout: f64,
    pub tau_on: f64,
    pub tau_off: f64,
    /// Use the spatially smoothed activity in the event terms; raw otherwise.
    pub use_smoothed_activity_in_losses: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_real: 0.12,
            lambda_cons: 0.08,
            lambda_order: 0.03,
            time_weight: TimeWeightConfig::default(),
            delta_jitter: 0.05,
            p_event_dropout: 0.25,
            tau_on: 0.62,
            tau_off: 0.38,
            use_smoothed_activity_in_losses: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("loss.lambda_real", self.lambda_real),
            ("loss.lambda_cons", self.lambda_cons),
            ("loss.lambda_order", self.lambda_order),
        ] {
            if !(v >= 0.0) {
                return Err(EvdError::config(name, "must be non-negative"));
            }
        }
        if !(self.delta_jitter > 0.0 && self.delta_jitter < 1.0) {
            return Err(EvdError::config("loss.delta_jitter", "must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.p_event_dropout) {
            return Err(EvdError::config(
                "loss.p_event_dropout",
                "must lie in [0, 1]",
            ));
        }
        if !(self.tau_on > self.tau_off) {
            return Err(EvdError::config(
                "loss.tau_on/tau_off",
                "tau_on must exceed tau_off",
            ));
        }
        let tw = self.time_weight;
        if !(tw.t_star_loss > 0.0 && tw.t_star_loss < 1.0) || !(tw.kappa > 0.0) {
            return Err(EvdError::config(
                "loss.time_weight",
                "t_star in (0,1), kappa > 0",
            ));
        }
        Ok(())
    }

    pub fn has_event_terms(&self) -> bool {
        self.lambda_real != 0.0 || self.lambda_cons != 0.0 || self.lambda_order != 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub base: f64,
    pub real: f64,
    pub cons: f64,
    pub order: f64,
    pub weight: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Elementwise mean of several breakdowns.
    pub fn mean(parts: &[LossBreakdown]) -> LossBreakdown {
        let n = parts.len().max(1) as f64;
        let mut m = LossBreakdown::default();
        for p in parts {
            m.base += p.base / n;
            m.real += p.real / n;
            m.cons += p.cons / n;
            m.order += p.order / n;
            m.weight += p.weight / n;
            m.total += p.total / n;
        }
        m
    }
}

fn check_tokens(activity: &[f64], delta: &[f64]) -> Result<usize> {
    if activity.is_empty() || delta.len() % activity.len() != 0 {
        return Err(EvdError::shape(
            "tokens",
            format!(
                "{} delta values for {} activities",
                delta.len(),
                activity.len()
            ),
        ));
    }
    Ok(delta.len() / activity.len())
}

pub fn loss_base(v_hat: &LatentVideo, z0: &LatentVideo, z1: &LatentVideo) -> Result<f64> {
    v_hat.check_same_shape(z0, "v_hat/z0")?;
    z0.check_same_shape(z1, "z0/z1")?;
    let n = v_hat.data.len() as f64;
    Ok(v_hat
        .data
        .iter()
        .zip(z0.data.iter().zip(&z1.data))
        .map(|(v, (a, b))| {
            let r = v - (b - a);
            r * r
        })
        .sum::<f64>()
        / n)
}

/// `mean(((1 - a) * delta)^2)`
pub fn loss_real(activity: &[f64], delta: &[f64]) -> Result<f64> {
    let d = check_tokens(activity, delta)?;
    let mut s = 0.0;
    for (row, &a) in delta.chunks_exact(d).zip(activity) {
        let m = 1.0 - a;
        s += row.iter().map(|x| (m * x) * (m * x)).sum::<f64>();
    }
    Ok(s / delta.len() as f64)
}

/// `mean((a * delta - a2 * delta2)^2)`
pub fn loss_cons(
    activity: &[f64],
    delta: &[f64],
    activity2: &[f64],
    delta2: &[f64],
) -> Result<f64> {
    let d = check_tokens(activity, delta)?;
    if activity2.len() != activity.len() || delta2.len() != delta.len() {
        return Err(EvdError::shape(
            "tokens",
            "consistency operands differ in shape",
        ));
    }
    let mut s = 0.0;
    for i in 0..activity.len() {
        for j in 0..d {
            let r = activity[i] * delta[i * d + j] - activity2[i] * delta2[i * d + j];
            s += r * r;
        }
    }
    Ok(s / delta.len() as f64)
}

/// `mean(1[a < tau_on] delta^2) + mean(1[a < tau_off] delta^2)`
pub fn loss_order(activity: &[f64], delta: &[f64], tau_on: f64, tau_off: f64) -> Result<f64> {
    let d = check_tokens(activity, delta)?;
    let mut s = 0.0;
    for (row, &a) in delta.chunks_exact(d).zip(activity) {
        let k = order_mult(a, tau_on, tau_off);
        if k != 0.0 {
            s += k * row.iter().map(|x| x * x).sum::<f64>();
        }
    }
    Ok(s / delta.len() as f64)
}

#[inline]
fn order_mult(a: f64, tau_on: f64, tau_off: f64) -> f64 {
    (a < tau_on) as u8 as f64 + (a < tau_off) as u8 as f64
}

/// Assembles the weighted total from its parts.
pub fn loss_total(
    base: f64,
    real: f64,
    cons: f64,
    order: f64,
    t: f64,
    cfg: &LossConfig,
) -> LossBreakdown {
    let weight = time_weight(t, &cfg.time_weight);
    let total = base
        + weight * (cfg.lambda_real * real + cfg.lambda_cons * cons + cfg.lambda_order * order);
    LossBreakdown {
        base,
        real,
        cons,
        order,
        weight,
        total,
    }
}

/// Gradients of one term with respect to its token and activity inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TermGrads {
    pub d_delta: Vec<f64>,
    pub d_activity: Vec<f64>,
}

pub fn loss_real_grad(activity: &[f64], delta: &[f64], scale: f64) -> TermGrads {
    let d = delta.len() / activity.len();
    let c = 2.0 * scale / delta.len() as f64;
    let mut d_delta = vec![0.0; delta.len()];
    let mut d_activity = vec![0.0; activity.len()];
    for (i, &a) in activity.iter().enumerate() {
        let m = 1.0 - a;
        let row = &delta[i * d..(i + 1) * d];
        for j in 0..d {
            d_delta[i * d + j] = c * m * m * row[j];
        }
        d_activity[i] = -c * m * row.iter().map(|x| x * x).sum::<f64>();
    }
    TermGrads {
        d_delta,
        d_activity,
    }
}

/// Returns gradients for `(activity, delta)` and `(activity2, delta2)`.
pub fn loss_cons_grad(
    activity: &[f64],
    delta: &[f64],
    activity2: &[f64],
    delta2: &[f64],
    scale: f64,
) -> (TermGrads, TermGrads) {
    let n = activity.len();
    let d = delta.len() / n;
    let c = 2.0 * scale / delta.len() as f64;
    let mut g1 = TermGrads {
        d_delta: vec![0.0; delta.len()],
        d_activity: vec![0.0; n],
    };
    let mut g2 = g1.clone();
    for i in 0..n {
        for j in 0..d {
            let k = i * d + j;
            let r = activity[i] * delta[k] - activity2[i] * delta2[k];
            g1.d_delta[k] = c * r * activity[i];
            g1.d_activity[i] += c * r * delta[k];
            g2.d_delta[k] = -c * r * activity2[i];
            g2.d_activity[i] -= c * r * delta2[k];
        }
    }
    (g1, g2)
}

/// Indicators are hard, so only `delta` receives gradient.
pub fn loss_order_grad(
    activity: &[f64],
    delta: &[f64],
    tau_on: f64,
    tau_off: f64,
    scale: f64,
) -> Vec<f64> {
    let d = delta.len() / activity.len();
    let c = 2.0 * scale / delta.len() as f64;
    let mut out = vec![0.0; delta.len()];
    for (i, &a) in activity.iter().enumerate() {
        let k = order_mult(a, tau_on, tau_off);
        if k != 0.0 {
            for j in 0..d {
                out[i * d + j] = c * k * delta[i * d + j];
            }
        }
    }
    out
}
