//! Event-gated sampling with classifier-free guidance.
//!
//! Per outer step: guided field, activity, smoothing and soft gate,
//! hysteresis, schedule, gate application, solver update. With Heun the
//! activity and soft gate are recomputed at the corrector point while the
//! hysteresis state advances once per step from the predictor activity.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Conditioning, EventHead, FieldOutput, VelocityField};
use crate::error::{EvdError, Result};
use crate::flow::{uniform_time_grid, TimeGrid};
use crate::gating::{
    apply_schedule, combine_gate, gate_field, hysteresis_step, maybe_smooth, schedule_rho,
    soft_gate, GateConfig, GateState,
};
use crate::latent::{LatentVideo, PatchSpec, Shape};
use crate::rng::{derive_seed, rng_from_seed, standard_normals, STREAM_TRAJECTORY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Euler,
    Heun,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// `rho(t)` ramp after `t_star`.
    Anneal,
    /// Fixed `rho = c` at every step.
    Const(f64),
    /// `rho = 0`: the gate never acts.
    Off,
}

/// Which CFG branch feeds the event head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EventBranch {
    #[default]
    Cond,
    Uncond,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Token layout the gate acts on; must match the backbone's.
    pub spec: PatchSpec,
    pub steps: usize,
    /// Explicit time grid; uniform with `steps` intervals when absent.
    pub grid: Option<Vec<f64>>,
    pub w_cfg: f64,
    pub gate: GateConfig,
    pub solver: Solver,
    pub gating_enabled: bool,
    pub schedule: ScheduleMode,
    pub event_branch: EventBranch,
    /// Fault injection for self-checks: never advance the hysteresis state.
    #[serde(skip)]
    #[doc(hidden)]
    pub fault_skip_hysteresis: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            spec: PatchSpec::new(2, 2, 2),
            steps: 50,
            grid: None,
            w_cfg: 4.0,
            gate: GateConfig::default(),
            solver: Solver::Euler,
            gating_enabled: true,
            schedule: ScheduleMode::Anneal,
            event_branch: EventBranch::Cond,
            fault_skip_hysteresis: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(EvdError::config("sampler.steps", "must be at least 1"));
        }
        if !(self.w_cfg >= 0.0) {
            return Err(EvdError::config("sampler.w_cfg", "must be non-negative"));
        }
        if let ScheduleMode::Const(c) = self.schedule {
            if !(0.0..=1.0).contains(&c) {
                return Err(EvdError::config(
                    "sampler.schedule",
                    "const value must be in [0, 1]",
                ));
            }
        }
        self.gate.validate()?;
        self.time_grid().map(|_| ())
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        match &self.grid {
            Some(points) => {
                let g = TimeGrid::from_points(points.clone())?;
                if g.steps() != self.steps {
                    return Err(EvdError::config("sampler.grid", "length must be steps + 1"));
                }
                Ok(g)
            }
            None => uniform_time_grid(self.steps),
        }
    }

    pub fn rho(&self, t: f64) -> f64 {
        match self.schedule {
            ScheduleMode::Anneal => schedule_rho(t, self.gate.t_star),
            ScheduleMode::Const(c) => c,
            ScheduleMode::Off => 0.0,
        }
    }
}

/// `(1 + w) v_cond - w v_uncond`
pub fn cfg_combine(v_cond: &LatentVideo, v_uncond: &LatentVideo, w: f64) -> Result<LatentVideo> {
    v_cond.check_same_shape(v_uncond, "cfg branches")?;
    let data = v_cond
        .data
        .iter()
        .zip(&v_uncond.data)
        .map(|(c, u)| (1.0 + w) * c - w * u)
        .collect();
    Ok(LatentVideo {
        shape: v_cond.shape,
        data,
    })
}

/// One solver step from `t0` to `t1`. `field` returns the direction field
/// to integrate at a requested point.
pub fn solver_step<F>(
    z: &LatentVideo,
    field: &mut F,
    t0: f64,
    t1: f64,
    solver: Solver,
) -> Result<LatentVideo>
where
    F: FnMut(&LatentVideo, f64) -> Result<LatentVideo>,
{
    if !(t1 > t0) {
        return Err(EvdError::config(
            "time grid",
            format!("non-increasing step {t0} -> {t1}"),
        ));
    }
    let dt = t1 - t0;
    let v0 = field(z, t0)?;
    match solver {
        Solver::Euler => Ok(z.axpy(dt, &v0)),
        Solver::Heun => {
            let zp = z.axpy(dt, &v0);
            let v1 = field(&zp, t1)?;
            let avg = LatentVideo {
                shape: z.shape,
                data: v0.data.iter().zip(&v1.data).map(|(a, b)| a + b).collect(),
            };
            Ok(z.axpy(0.5 * dt, &avg))
        }
    }
}

/// Everything available when the activity of a step is requested.
pub struct StepContext<'a> {
    pub z: &'a LatentVideo,
    pub t: f64,
    pub v_cfg: &'a LatentVideo,
    pub cond: &'a FieldOutput,
    pub uncond: &'a FieldOutput,
}

/// Source of per-token activity in `[0, 1]` during sampling.
pub trait ActivitySource: Sync {
    fn activity(&self, ctx: &StepContext<'_>) -> Result<Vec<f64>>;
}

/// The learned event head applied to one CFG branch's final tokens.
pub struct HeadActivity<'a> {
    pub head: &'a EventHead,
    pub branch: EventBranch,
}

impl ActivitySource for HeadActivity<'_> {
    fn activity(&self, ctx: &StepContext<'_>) -> Result<Vec<f64>> {
        let out = match self.branch {
            EventBranch::Cond => ctx.cond,
            EventBranch::Uncond => ctx.uncond,
        };
        self.head.activity(&out.final_tokens, ctx.t)
    }
}

/// Activity fixed for every step, for tests and controls.
pub struct ConstantActivity(pub Vec<f64>);

impl ActivitySource for ConstantActivity {
    fn activity(&self, _ctx: &StepContext<'_>) -> Result<Vec<f64>> {
        Ok(self.0.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `z` at every grid point, `K + 1` entries.
    pub latents: Vec<LatentVideo>,
    /// Scheduled gate used at the first evaluation of each step. All ones
    /// when gating is bypassed.
    pub gates: Vec<Vec<f64>>,
    /// Raw activity at the first evaluation of each step; empty when
    /// gating is bypassed.
    pub activities: Vec<Vec<f64>>,
    /// Hysteresis state after each step's update.
    pub states: Vec<Vec<f64>>,
    pub rho: Vec<f64>,
    pub times: Vec<f64>,
    /// Backbone evaluations performed.
    pub nfe: usize,
}

impl Trajectory {
    pub fn final_latent(&self) -> &LatentVideo {
        self.latents
            .last()
            .expect("trajectory has at least one latent")
    }
}

/// Draws `z_0 ~ N(0, I)` of the given shape from `seed` and samples.
pub fn sample<F: VelocityField + ?Sized>(
    field: &F,
    activity: Option<&dyn ActivitySource>,
    y: &Conditioning,
    shape: Shape,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Trajectory> {
    let mut rng = rng_from_seed(seed);
    let z0 = LatentVideo::from_vec(shape, standard_normals(&mut rng, shape.numel()))?;
    sample_from(field, activity, y, z0, cfg)
}

/// Trajectory `i` uses seed `derive_seed(seed, STREAM_TRAJECTORY, i)`.
pub fn sample_batch<F: VelocityField + ?Sized>(
    field: &F,
    activity: Option<&dyn ActivitySource>,
    ys: &[Conditioning],
    shape: Shape,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    ys.par_iter()
        .enumerate()
        .map(|(i, y)| {
            sample(
                field,
                activity,
                y,
                shape,
                cfg,
                derive_seed(seed, STREAM_TRAJECTORY, i as u64),
            )
        })
        .collect()
}

/// Samples from a given initial latent.
pub fn sample_from<F: VelocityField + ?Sized>(
    field: &F,
    activity: Option<&dyn ActivitySource>,
    y: &Conditioning,
    z0: LatentVideo,
    cfg: &SamplerConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    let gated = cfg.gating_enabled;
    let source = match (gated, activity) {
        (true, None) => {
            return Err(EvdError::config(
                "sampler.gating_enabled",
                "gating requires an activity source",
            ))
        }
        (true, Some(a)) => Some(a),
        (false, _) => None,
    };
    let grid = cfg.time_grid()?;
    let spec = cfg.spec;
    let n_tokens = spec.grid(z0.shape)?.tokens();
    let spec_grid = if gated {
        Some((spec, spec.grid(z0.shape)?))
    } else {
        None
    };
    let null = Conditioning::null(y.embedding.len());
    let k_steps = grid.steps();

    let mut traj = Trajectory {
        latents: Vec::with_capacity(k_steps + 1),
        gates: Vec::with_capacity(k_steps),
        activities: Vec::with_capacity(k_steps),
        states: Vec::with_capacity(k_steps),
        rho: Vec::with_capacity(k_steps),
        times: grid.points.clone(),
        nfe: 0,
    };
    let mut state = GateState::new(spec_grid.map_or(0, |(_, g)| g.tokens()));
    let mut z = z0;
    traj.latents.push(z.clone());

    for k in 0..k_steps {
        let (t0, t1) = (grid.points[k], grid.points[k + 1]);
        let mut evals = 0usize;
        let mut first_gate = None;
        let mut first_activity = None;
        let mut nfe = 0usize;
        let mut eval = |zq: &LatentVideo, t: f64| -> Result<LatentVideo> {
            let cond = field.forward(zq, y, t)?;
            let uncond = field.forward(zq, &null, t)?;
            nfe += 2;
            let v_cfg = cfg_combine(&cond.v_hat, &uncond.v_hat, cfg.w_cfg)?;
            let (Some(src), Some((spec, pgrid))) = (source, spec_grid) else {
                return Ok(v_cfg);
            };
            let ctx = StepContext {
                z: zq,
                t,
                v_cfg: &v_cfg,
                cond: &cond,
                uncond: &uncond,
            };
            let a_hat = src.activity(&ctx)?;
            let a_tilde = maybe_smooth(&a_hat, pgrid, &cfg.gate)?;
            let soft = soft_gate(&a_tilde, &cfg.gate);
            if evals == 0 && !cfg.fault_skip_hysteresis {
                state = hysteresis_step(&a_tilde, &state, &cfg.gate)?;
            }
            let g = combine_gate(&soft, &state, cfg.gate.combine)?;
            let g_sched = apply_schedule(&g, cfg.rho(t));
            let v_tilde = gate_field(&v_cfg, &g_sched, spec)?;
            if evals == 0 {
                first_gate = Some(g_sched);
                first_activity = Some(a_hat);
            }
            evals += 1;
            Ok(v_tilde)
        };
        z = solver_step(&z, &mut eval, t0, t1, cfg.solver)?;
        traj.nfe += nfe;
        traj.rho.push(cfg.rho(t0));
        if gated {
            traj.gates
                .push(first_gate.expect("gate recorded on first evaluation"));
            traj.activities
                .push(first_activity.expect("activity recorded on first evaluation"));
            traj.states.push(state.bin.clone());
        } else {
            traj.gates.push(vec![1.0; n_tokens]);
        }
        if !z.is_finite() {
            return Err(EvdError::NonFinite {
                term: "sample",
                step: k,
            });
        }
        traj.latents.push(z.clone());
    }
    Ok(traj)
}
