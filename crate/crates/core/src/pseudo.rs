//! Event pseudo-targets from localized latent change.
//!
//! Magnitudes are computed per frame transition on spatial tokens (the
//! temporal patch extent is ignored here). A transition map holds
//! `frames = T - 1` slices of `nh * nw` values.

use serde::{Deserialize, Serialize};

use crate::error::{EvdError, Result};
use crate::latent::{LatentVideo, PatchSpec};
use crate::sampling::{ActivitySource, StepContext};
use crate::tensor::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    /// Per-frame median of the (suppressed) magnitudes.
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoTargetConfig {
    pub softness: f64,
    pub location: Location,
    /// Activity threshold selecting tokens for the confidence target.
    pub tau_a: f64,
    /// Normalized entropy above which a map is rejected as diffuse.
    pub diffuseness_threshold: f64,
    pub eps: f64,
    /// Use camera-suppressed magnitudes for the activity target.
    pub suppress_camera: bool,
}

impl Default for PseudoTargetConfig {
    fn default() -> Self {
        PseudoTargetConfig {
            softness: 0.1,
            location: Location::Median,
            tau_a: 0.3,
            diffuseness_threshold: 0.999,
            eps: 1e-6,
            suppress_camera: true,
        }
    }
}

impl PseudoTargetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.softness > 0.0) {
            return Err(EvdError::config("pseudo.softness", "must be positive"));
        }
        if !(self.eps > 0.0) {
            return Err(EvdError::config("pseudo.eps", "must be positive"));
        }
        if !(self.tau_a > 0.0 && self.tau_a < 1.0) {
            return Err(EvdError::config("pseudo.tau_a", "must lie in (0, 1)"));
        }
        if !(self.diffuseness_threshold > 0.0 && self.diffuseness_threshold <= 1.0) {
            return Err(EvdError::config(
                "pseudo.diffuseness_threshold",
                "must lie in (0, 1]",
            ));
        }
        if let Location::Fixed(m) = self.location {
            if !m.is_finite() {
                return Err(EvdError::config("pseudo.location", "must be finite"));
            }
        }
        Ok(())
    }
}

/// Per-transition, per-spatial-token values.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMap {
    pub frames: usize,
    pub nh: usize,
    pub nw: usize,
    pub data: Vec<f64>,
}

impl TransitionMap {
    pub fn tokens(&self) -> usize {
        self.nh * self.nw
    }

    pub fn frame(&self, tau: usize) -> &[f64] {
        let n = self.tokens();
        &self.data[tau * n..(tau + 1) * n]
    }

    fn map_frames(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> TransitionMap {
        let data = (0..self.frames)
            .flat_map(|tau| f(self.frame(tau)))
            .collect();
        TransitionMap { data, ..*self }
    }
}

/// `m[tau, i] = |Tok(z[tau+1])_i - Tok(z[tau])_i|_1 / width`, where `width`
/// is the number of elements in a spatial token.
pub fn latent_change_magnitude(z: &LatentVideo, spec: PatchSpec) -> Result<TransitionMap> {
    let s = z.shape;
    if s.t < 2 {
        return Err(EvdError::shape(
            "t",
            "change magnitude needs at least two frames",
        ));
    }
    if s.h % spec.ph != 0 {
        return Err(EvdError::shape(
            "h",
            format!("{} not divisible by {}", s.h, spec.ph),
        ));
    }
    if s.w % spec.pw != 0 {
        return Err(EvdError::shape(
            "w",
            format!("{} not divisible by {}", s.w, spec.pw),
        ));
    }
    let (nh, nw) = (s.h / spec.ph, s.w / spec.pw);
    let width = (spec.ph * spec.pw * s.c) as f64;
    let frames = s.t - 1;
    let mut data = vec![0.0; frames * nh * nw];
    for tau in 0..frames {
        for h in 0..s.h {
            for w in 0..s.w {
                let tok = tau * nh * nw + (h / spec.ph) * nw + w / spec.pw;
                for c in 0..s.c {
                    data[tok] += (z.at(tau + 1, h, w, c) - z.at(tau, h, w, c)).abs();
                }
            }
        }
    }
    data.iter_mut().for_each(|v| *v /= width);
    Ok(TransitionMap {
        frames,
        nh,
        nw,
        data,
    })
}

/// `max(0, m - frame mean)`, exactly zero on frame-constant maps.
pub fn suppress_camera(m: &TransitionMap) -> TransitionMap {
    m.map_frames(|f| {
        if f.iter().all(|&v| v == f[0]) {
            return vec![0.0; f.len()];
        }
        let mean = f.iter().sum::<f64>() / f.len() as f64;
        f.iter().map(|&v| (v - mean).max(0.0)).collect()
    })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `a* = sigmoid((m - mu) / s)` per frame.
pub fn activity_target(m: &TransitionMap, cfg: &PseudoTargetConfig) -> TransitionMap {
    m.map_frames(|f| {
        let mu = match cfg.location {
            Location::Median => median(f),
            Location::Fixed(mu) => mu,
        };
        f.iter()
            .map(|&v| sigmoid((v - mu) / cfg.softness))
            .collect()
    })
}

/// Cumulative activity mass over total mass plus `eps`.
pub fn phase_target(a: &TransitionMap, eps: f64) -> Vec<f64> {
    let mass: Vec<f64> = (0..a.frames).map(|tau| a.frame(tau).iter().sum()).collect();
    let total: f64 = mass.iter().sum();
    let mut acc = 0.0;
    mass.iter()
        .map(|m| {
            acc += m;
            acc / (total + eps)
        })
        .collect()
}

/// Mean activity over tokens with `a >= tau_a`; 0 when none qualify.
pub fn confidence_target(a: &[f64], tau_a: f64) -> f64 {
    let sel: Vec<f64> = a.iter().copied().filter(|&v| v >= tau_a).collect();
    if sel.is_empty() {
        0.0
    } else {
        (sel.iter().sum::<f64>() / sel.len() as f64).clamp(0.0, 1.0)
    }
}

/// Entropy of `a / sum(a)` divided by `ln N`. `None` for an all-zero map.
pub fn normalized_entropy(a: &[f64]) -> Option<f64> {
    let total: f64 = a.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    if a.len() == 1 {
        return Some(0.0);
    }
    let h: f64 = a
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| {
            let q = v / total;
            -q * q.ln()
        })
        .sum();
    Some(h / (a.len() as f64).ln())
}

/// `true` when the map is concentrated enough to keep.
pub fn diffuseness_filter(a: &[f64], threshold: f64) -> bool {
    normalized_entropy(a).is_some_and(|h| h <= threshold)
}

/// Mean of the top `ceil(0.2 * (T - 1))` per-frame mean magnitudes.
pub fn clip_activity_score(z: &LatentVideo, spec: PatchSpec) -> Result<f64> {
    let m = latent_change_magnitude(z, spec)?;
    let mut per_frame: Vec<f64> = (0..m.frames)
        .map(|tau| m.frame(tau).iter().sum::<f64>() / m.tokens() as f64)
        .collect();
    per_frame.sort_by(|a, b| b.total_cmp(a));
    let k = ((0.2 * m.frames as f64).ceil() as usize).max(1);
    Ok(per_frame[..k].iter().sum::<f64>() / k as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoTargets {
    pub activity: TransitionMap,
    pub phase: Vec<f64>,
    pub confidence: Vec<f64>,
}

pub fn pseudo_targets(
    z: &LatentVideo,
    spec: PatchSpec,
    cfg: &PseudoTargetConfig,
) -> Result<PseudoTargets> {
    cfg.validate()?;
    let m = latent_change_magnitude(z, spec)?;
    let m = if cfg.suppress_camera {
        suppress_camera(&m)
    } else {
        m
    };
    let activity = activity_target(&m, cfg);
    let phase = phase_target(&activity, cfg.eps);
    let confidence = (0..activity.frames)
        .map(|tau| confidence_target(activity.frame(tau), cfg.tau_a))
        .collect();
    Ok(PseudoTargets {
        activity,
        phase,
        confidence,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipAudit {
    pub score: f64,
    /// Mean of the per-transition confidences.
    pub confidence: f64,
    /// Normalized entropy of the whole activity map; `None` if all zero.
    pub entropy: Option<f64>,
    pub accepted: bool,
    pub phase: Vec<f64>,
}

pub fn audit_clip(z: &LatentVideo, spec: PatchSpec, cfg: &PseudoTargetConfig) -> Result<ClipAudit> {
    let targets = pseudo_targets(z, spec, cfg)?;
    let entropy = normalized_entropy(&targets.activity.data);
    Ok(ClipAudit {
        score: clip_activity_score(z, spec)?,
        confidence: targets.confidence.iter().sum::<f64>() / targets.confidence.len() as f64,
        entropy,
        accepted: entropy.is_some_and(|h| h <= cfg.diffuseness_threshold),
        phase: targets.phase,
    })
}

/// Spreads a transition map onto the `(nt, nh, nw)` token grid. Frame `tau`
/// takes transition `tau` (the last frame reuses the last transition) and
/// each token averages over its temporal patch.
pub fn transitions_to_tokens(a: &TransitionMap, t: usize, spec: PatchSpec) -> Vec<f64> {
    let nt = t / spec.pt;
    let n = a.tokens();
    let mut out = vec![0.0; nt * n];
    for tt in 0..nt {
        for dt in 0..spec.pt {
            let tau = (tt * spec.pt + dt).min(a.frames - 1);
            for (o, v) in out[tt * n..(tt + 1) * n].iter_mut().zip(a.frame(tau)) {
                *o += v / spec.pt as f64;
            }
        }
    }
    out
}

/// Which latent the motion signal is read from during sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionSignal {
    /// The current partially denoised latent `z_t`.
    Current,
    /// The one-step clean estimate `z_t + (1 - t) v`.
    Denoised,
}

/// Activity from pseudo-event targets of a latent seen during sampling,
/// replacing the learned head.
pub struct MotionMaskActivity {
    pub spec: PatchSpec,
    pub cfg: PseudoTargetConfig,
    pub signal: MotionSignal,
}

impl ActivitySource for MotionMaskActivity {
    fn activity(&self, ctx: &StepContext<'_>) -> Result<Vec<f64>> {
        let owned;
        let z = match self.signal {
            MotionSignal::Current => ctx.z,
            MotionSignal::Denoised => {
                owned = ctx.z.axpy(1.0 - ctx.t, ctx.v_cfg);
                &owned
            }
        };
        let m = latent_change_magnitude(z, self.spec)?;
        let m = if self.cfg.suppress_camera {
            suppress_camera(&m)
        } else {
            m
        };
        let a = activity_target(&m, &self.cfg);
        Ok(transitions_to_tokens(&a, z.shape.t, self.spec))
    }
}
