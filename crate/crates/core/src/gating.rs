//! Event gate pipeline: spatial smoothing, soft activation, hysteresis,
//! combination, time schedule and application to a velocity field.

use serde::{Deserialize, Serialize};

use crate::error::{EvdError, Result};
use crate::latent::{tokenize, untokenize, LatentVideo, PatchGrid, PatchSpec};
use crate::tensor::sigmoid;

/// How the soft gate and the hysteresis state are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateCombine {
    /// `g = soft * bin`
    #[default]
    Product,
    /// `g = bin`
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub beta: f64,
    pub tau_on: f64,
    pub tau_off: f64,
    pub t_star: f64,
    pub smoothing_enabled: bool,
    pub combine: GateCombine,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            beta: 12.0,
            tau_on: 0.62,
            tau_off: 0.38,
            t_star: 0.6,
            smoothing_enabled: true,
            combine: GateCombine::Product,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(EvdError::config("beta", "must be positive"));
        }
        if !(self.tau_off > 0.0 && self.tau_on < 1.0) {
            return Err(EvdError::config("tau_on/tau_off", "must lie in (0, 1)"));
        }
        if !(self.tau_on > self.tau_off) {
            return Err(EvdError::config(
                "tau_on/tau_off",
                format!(
                    "tau_on ({}) must exceed tau_off ({})",
                    self.tau_on, self.tau_off
                ),
            ));
        }
        if !(self.t_star > 0.0 && self.t_star < 1.0) {
            return Err(EvdError::config("t_star", "must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.tau_on + self.tau_off)
    }
}

/// Binary hysteresis memory for one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct GateState {
    pub bin: Vec<f64>,
}

impl GateState {
    pub fn new(n: usize) -> Self {
        GateState { bin: vec![0.0; n] }
    }
}

fn check_len(got: usize, want: usize, what: &str) -> Result<()> {
    if got != want {
        return Err(EvdError::shape(
            what,
            format!("expected {want} entries, got {got}"),
        ));
    }
    Ok(())
}

/// 3x3 spatial box filter on each temporal slice of the token grid. Border
/// cells average over their in-bounds neighbours only.
pub fn smooth_activity(a: &[f64], grid: PatchGrid) -> Result<Vec<f64>> {
    check_len(a.len(), grid.tokens(), "activity")?;
    let mut out = vec![0.0; a.len()];
    for tt in 0..grid.nt {
        for hh in 0..grid.nh {
            for ww in 0..grid.nw {
                let (sum, count) = neighbours(grid, hh, ww)
                    .map(|(h, w)| a[grid.token(tt, h, w)])
                    .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
                out[grid.token(tt, hh, ww)] = sum / count as f64;
            }
        }
    }
    Ok(out)
}

/// Transpose of [`smooth_activity`], used to backpropagate through it.
pub fn smooth_activity_transpose(d: &[f64], grid: PatchGrid) -> Vec<f64> {
    let mut out = vec![0.0; d.len()];
    for tt in 0..grid.nt {
        for hh in 0..grid.nh {
            for ww in 0..grid.nw {
                let cells: Vec<_> = neighbours(grid, hh, ww).collect();
                let share = d[grid.token(tt, hh, ww)] / cells.len() as f64;
                for (h, w) in cells {
                    out[grid.token(tt, h, w)] += share;
                }
            }
        }
    }
    out
}

fn neighbours(grid: PatchGrid, hh: usize, ww: usize) -> impl Iterator<Item = (usize, usize)> {
    let h_lo = hh.saturating_sub(1);
    let h_hi = (hh + 1).min(grid.nh - 1);
    let w_lo = ww.saturating_sub(1);
    let w_hi = (ww + 1).min(grid.nw - 1);
    (h_lo..=h_hi).flat_map(move |h| (w_lo..=w_hi).map(move |w| (h, w)))
}

/// Smoothing when enabled, identity otherwise.
pub fn maybe_smooth(a: &[f64], grid: PatchGrid, cfg: &GateConfig) -> Result<Vec<f64>> {
    if cfg.smoothing_enabled {
        smooth_activity(a, grid)
    } else {
        check_len(a.len(), grid.tokens(), "activity")?;
        Ok(a.to_vec())
    }
}

pub fn soft_gate(a_smoothed: &[f64], cfg: &GateConfig) -> Vec<f64> {
    let mid = cfg.midpoint();
    a_smoothed
        .iter()
        .map(|&a| sigmoid(cfg.beta * (a - mid)))
        .collect()
}

/// On at or above `tau_on`, off at or below `tau_off`, otherwise held.
pub fn hysteresis_step(
    a_smoothed: &[f64],
    state: &GateState,
    cfg: &GateConfig,
) -> Result<GateState> {
    check_len(a_smoothed.len(), state.bin.len(), "hysteresis state")?;
    let bin = a_smoothed
        .iter()
        .zip(&state.bin)
        .map(|(&a, &prev)| {
            if a >= cfg.tau_on {
                1.0
            } else if a <= cfg.tau_off {
                0.0
            } else {
                prev
            }
        })
        .collect();
    Ok(GateState { bin })
}

pub fn combine_gate(soft: &[f64], state: &GateState, mode: GateCombine) -> Result<Vec<f64>> {
    check_len(soft.len(), state.bin.len(), "gate")?;
    Ok(match mode {
        GateCombine::Product => soft.iter().zip(&state.bin).map(|(s, b)| s * b).collect(),
        GateCombine::Binary => state.bin.clone(),
    })
}

/// 1 up to `t_star`, then a linear ramp down to 0 at `t = 1`.
pub fn schedule_rho(t: f64, t_star: f64) -> f64 {
    if t <= t_star {
        1.0
    } else {
        1.0 - (t - t_star) / (1.0 - t_star)
    }
}

/// `rho * g + (1 - rho)`, blending toward the all-ones gate.
pub fn apply_schedule(gate: &[f64], rho: f64) -> Vec<f64> {
    gate.iter().map(|&g| rho * g + (1.0 - rho)).collect()
}

/// Scales each token of `v` by its gate entry.
pub fn gate_field(v: &LatentVideo, gate: &[f64], spec: PatchSpec) -> Result<LatentVideo> {
    let mut tok = tokenize(v, spec)?;
    check_len(gate.len(), tok.n, "gate")?;
    let d = tok.d;
    for (row, &g) in tok.data.chunks_exact_mut(d).zip(gate) {
        row.iter_mut().for_each(|x| *x *= g);
    }
    untokenize(&tok)
}
