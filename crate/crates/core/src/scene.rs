//! Synthetic contact scenes: a constant-valued square blob that rests, moves
//! at constant integer velocity over the event window `[tau_e, tau_s)`, and
//! rests again. Ground truth is exact because the blob is axis aligned and
//! moves by whole cells.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{EvdError, Result};
use crate::latent::{token_of, LatentVideo, PatchSpec, Shape};
use crate::rng::{rng_from_seed, standard_normals};

pub const SCENE_FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub shape: Shape,
    pub spec: PatchSpec,
    /// Top-left corner `(h, w)` at frame 0.
    pub start: (i64, i64),
    /// Cells moved per frame inside the event window.
    pub velocity: (i64, i64),
    pub blob_size: usize,
    pub tau_e: usize,
    pub tau_s: usize,
    /// Per-channel background level.
    pub background: Vec<f64>,
    /// Per-channel blob level (replaces the background under the blob).
    pub blob_value: Vec<f64>,
    /// Optional per-frame offset added to every element of that frame.
    pub camera_drift: Option<Vec<f64>>,
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContactScene {
    pub params: SceneParams,
    pub clean_latent: LatentVideo,
    /// One entry per token, 1.0 where the token's patch overlaps the blob
    /// during a moving frame, else 0.0.
    pub truth_activity: Vec<f64>,
}

impl SceneParams {
    /// Blob corner at frame `tau`.
    pub fn position(&self, tau: usize) -> (i64, i64) {
        let dur = self.tau_s.saturating_sub(self.tau_e) as i64;
        let k = (tau as i64 - self.tau_e as i64).clamp(0, dur);
        (
            self.start.0 + self.velocity.0 * k,
            self.start.1 + self.velocity.1 * k,
        )
    }

    pub fn is_moving(&self) -> bool {
        self.tau_s > self.tau_e && self.velocity != (0, 0)
    }

    pub fn covers(&self, tau: usize, h: usize, w: usize) -> bool {
        let (ph, pw) = self.position(tau);
        let (h, w, s) = (h as i64, w as i64, self.blob_size as i64);
        h >= ph && h < ph + s && w >= pw && w < pw + s
    }

    fn validate(&self) -> Result<()> {
        let s = self.shape;
        if s.t == 0 || s.h == 0 || s.w == 0 || s.c == 0 {
            return Err(EvdError::shape("latent", "empty axis"));
        }
        if self.tau_e > self.tau_s || self.tau_s > s.t {
            return Err(EvdError::Geometry(format!(
                "event window [{}, {}) outside 0..={}",
                self.tau_e, self.tau_s, s.t
            )));
        }
        if self.background.len() != s.c || self.blob_value.len() != s.c {
            return Err(EvdError::shape(
                "channels",
                "level vectors must have C entries",
            ));
        }
        if let Some(d) = &self.camera_drift {
            if d.len() != s.t {
                return Err(EvdError::shape(
                    "t",
                    "camera_drift needs one entry per frame",
                ));
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(EvdError::config("noise_sigma", "must be non-negative"));
        }
        if self.blob_size == 0 {
            return Err(EvdError::Geometry("blob_size must be positive".into()));
        }
        let size = self.blob_size as i64;
        for tau in 0..s.t {
            let (h, w) = self.position(tau);
            if h < 0 || w < 0 || h + size > s.h as i64 || w + size > s.w as i64 {
                return Err(EvdError::Geometry(format!(
                    "blob at ({h}, {w}) leaves the {}x{} grid at frame {tau}",
                    s.h, s.w
                )));
            }
        }
        self.spec.grid(s)?;
        Ok(())
    }
}

pub fn make_contact_scene(params: &SceneParams) -> Result<ContactScene> {
    params.validate()?;
    let s = params.shape;
    let mut z = LatentVideo::zeros(s);
    for tau in 0..s.t {
        let drift = params.camera_drift.as_ref().map_or(0.0, |d| d[tau]);
        for h in 0..s.h {
            for w in 0..s.w {
                let levels = if params.covers(tau, h, w) {
                    &params.blob_value
                } else {
                    &params.background
                };
                for c in 0..s.c {
                    *z.at_mut(tau, h, w, c) = levels[c] + drift;
                }
            }
        }
    }
    if params.noise_sigma > 0.0 {
        let mut rng = rng_from_seed(params.noise_seed);
        let noise = standard_normals(&mut rng, z.data.len());
        for (v, e) in z.data.iter_mut().zip(noise) {
            *v += params.noise_sigma * e;
        }
    }

    let grid = params.spec.grid(s)?;
    let mut truth = vec![0.0; grid.tokens()];
    if params.is_moving() {
        for tau in params.tau_e..params.tau_s {
            for h in 0..s.h {
                for w in 0..s.w {
                    if params.covers(tau, h, w) {
                        truth[token_of(params.spec, grid, tau, h, w)] = 1.0;
                    }
                }
            }
        }
    }
    Ok(ContactScene {
        params: params.clone(),
        clean_latent: z,
        truth_activity: truth,
    })
}

/// Parameters of the random desk-scale scene distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneDistribution {
    pub shape: Shape,
    pub spec: PatchSpec,
    pub blob_size: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    /// Earliest allowed event start.
    pub min_tau_e: usize,
    /// Frames that must stay static after the event ends.
    pub tail_frames: usize,
    pub noise_sigma: f64,
}

impl Default for SceneDistribution {
    fn default() -> Self {
        SceneDistribution {
            shape: Shape::new(16, 8, 8, 4),
            spec: PatchSpec::new(2, 2, 2),
            blob_size: 2,
            min_duration: 3,
            max_duration: 6,
            min_tau_e: 2,
            tail_frames: 2,
            noise_sigma: 0.0,
        }
    }
}

impl SceneDistribution {
    /// Draws scene parameters. Every draw comes from `seed` alone.
    pub fn sample_params(&self, seed: u64) -> Result<SceneParams> {
        let s = self.shape;
        let latest_end = s.t.saturating_sub(self.tail_frames);
        if self.min_duration == 0
            || self.min_duration > self.max_duration
            || self.min_tau_e + self.min_duration > latest_end
        {
            return Err(EvdError::config("data", "event window cannot fit in clip"));
        }
        let mut rng = rng_from_seed(seed);
        let max_dur = self.max_duration.min(latest_end - self.min_tau_e);
        let dur = rng.random_range(self.min_duration..=max_dur);
        let tau_e = rng.random_range(self.min_tau_e..=latest_end - dur);
        let velocity = loop {
            let v = (rng.random_range(-1i64..=1), rng.random_range(-1i64..=1));
            if v != (0, 0) {
                break v;
            }
        };
        let size = self.blob_size as i64;
        let span = |extent: usize, v: i64| -> Result<(i64, i64)> {
            let travel = v * dur as i64;
            let lo = (-travel).max(0);
            let hi = extent as i64 - size - travel.max(0);
            if hi < lo {
                return Err(EvdError::Geometry("blob path longer than grid".into()));
            }
            Ok((lo, hi))
        };
        let (h_lo, h_hi) = span(s.h, velocity.0)?;
        let (w_lo, w_hi) = span(s.w, velocity.1)?;
        let start = (rng.random_range(h_lo..=h_hi), rng.random_range(w_lo..=w_hi));
        let background: Vec<f64> = (0..s.c).map(|_| rng.random_range(-0.5..0.5)).collect();
        let blob_value = background
            .iter()
            .map(|b| {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                b + sign * rng.random_range(1.0..2.0)
            })
            .collect();
        Ok(SceneParams {
            shape: s,
            spec: self.spec,
            start,
            velocity,
            blob_size: self.blob_size,
            tau_e,
            tau_s: tau_e + dur,
            background,
            blob_value,
            camera_drift: None,
            noise_sigma: self.noise_sigma,
            noise_seed: seed ^ 0x6e6f_6973_65,
        })
    }
}

/// Width of the conditioning embedding produced by [`scene_embedding`].
pub const SCENE_EMBED_DIM: usize = 8;

/// Scene description used as the conditioning vector: normalized start,
/// velocity, event window, and a constant bias entry.
pub fn scene_embedding(p: &SceneParams) -> Vec<f64> {
    let s = p.shape;
    vec![
        p.start.0 as f64 / s.h as f64,
        p.start.1 as f64 / s.w as f64,
        p.velocity.0 as f64,
        p.velocity.1 as f64,
        p.tau_e as f64 / s.t as f64,
        p.tau_s as f64 / s.t as f64,
        1.0,
        0.0,
    ]
}

/// Writes the binary tensor file and a JSON sidecar (`<path>.json`).
///
/// Layout: eight little-endian `u64` (version, T, H, W, C, tau_e, tau_s, N),
/// then `T*H*W*C` little-endian `f64` latent values in `[T, H, W, C]` order,
/// then `N` little-endian `f64` truth-activity values.
pub fn write_scene(scene: &ContactScene, path: &Path) -> Result<()> {
    let p = &scene.params;
    let s = p.shape;
    let header = [
        SCENE_FORMAT_VERSION,
        s.t as u64,
        s.h as u64,
        s.w as u64,
        s.c as u64,
        p.tau_e as u64,
        p.tau_s as u64,
        scene.truth_activity.len() as u64,
    ];
    let mut buf = Vec::with_capacity(64 + 8 * (s.numel() + scene.truth_activity.len()));
    for v in header {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in scene.clean_latent.data.iter().chain(&scene.truth_activity) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    let meta = serde_json::to_string_pretty(p).map_err(|e| EvdError::Format(e.to_string()))?;
    fs::write(sidecar_path(path), meta)?;
    Ok(())
}

pub fn read_scene(path: &Path) -> Result<ContactScene> {
    let bytes = fs::read(path)?;
    if bytes.len() < 64 {
        return Err(EvdError::Format("scene file shorter than header".into()));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[8 * i..8 * i + 8].try_into().unwrap());
    if word(0) != SCENE_FORMAT_VERSION {
        return Err(EvdError::Format(format!(
            "unsupported scene version {}",
            word(0)
        )));
    }
    let shape = Shape::new(
        word(1) as usize,
        word(2) as usize,
        word(3) as usize,
        word(4) as usize,
    );
    let n = word(7) as usize;
    let total = shape.numel() + n;
    if bytes.len() != 64 + 8 * total {
        return Err(EvdError::Format("scene payload length mismatch".into()));
    }
    let values: Vec<f64> = bytes[64..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let meta = fs::read_to_string(sidecar_path(path))?;
    let params: SceneParams =
        serde_json::from_str(&meta).map_err(|e| EvdError::Format(e.to_string()))?;
    if params.shape != shape || params.tau_e != word(5) as usize || params.tau_s != word(6) as usize
    {
        return Err(EvdError::Format("sidecar disagrees with header".into()));
    }
    let clean_latent = LatentVideo::from_vec(shape, values[..shape.numel()].to_vec())?;
    Ok(ContactScene {
        params,
        clean_latent,
        truth_activity: values[shape.numel()..].to_vec(),
    })
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}
