//! Joint training of the backbone and event head.
//!
//! Each step draws a minibatch, evaluates every sample against an immutable
//! parameter snapshot (in parallel), sums per-sample gradients in sample
//! order, clips the global norm, applies AdamW per parameter group and
//! updates the EMA copies.
//!
//! Per-sample random draws come from
//! `derive_seed(derive_seed(seed, STREAM_TRAIN_SAMPLE, step), 0, b)` in the
//! fixed order: example index, `z0`, `t`, conditioning-drop uniform,
//! consistency jitter, event-dropout uniform.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Conditioning, EventHead, MicroDiT};
use crate::error::{EvdError, Result};
use crate::flow::{interpolate, time_weight};
use crate::gating::{smooth_activity, smooth_activity_transpose};
use crate::latent::{tokenize, LatentVideo, PatchGrid};
use crate::losses::{
    loss_base, loss_cons, loss_cons_grad, loss_order, loss_order_grad, loss_real, loss_real_grad,
    loss_total, LossBreakdown, LossConfig,
};
use crate::params::{Grads, ParamStore};
use crate::rng::{derive_seed, rng_from_seed, standard_normals, STREAM_TRAIN_SAMPLE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_event: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrix-shaped parameters only.
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub ema_decay: f64,
    /// Probability of replacing the conditioning with the null embedding.
    pub p_uncond: f64,
    pub seed: u64,
    pub freeze_event_head: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 4,
            lr_backbone: 1e-3,
            lr_event: 1e-2,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.02,
            grad_clip: 0.5,
            ema_decay: 0.999,
            p_uncond: 0.1,
            seed: 0,
            freeze_event_head: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(EvdError::config("train.batch_size", "must be positive"));
        }
        for (name, v) in [
            ("train.lr_backbone", self.lr_backbone),
            ("train.lr_event", self.lr_event),
            ("train.eps", self.eps),
            ("train.grad_clip", self.grad_clip),
        ] {
            if !(v > 0.0) {
                return Err(EvdError::config(name, "must be positive"));
            }
        }
        for (name, v) in [
            ("train.beta1", self.beta1),
            ("train.beta2", self.beta2),
            ("train.ema_decay", self.ema_decay),
            ("train.p_uncond", self.p_uncond),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(EvdError::config(name, "must lie in [0, 1]"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(EvdError::config(
                "train.weight_decay",
                "must be non-negative",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub z1: LatentVideo,
    pub y: Conditioning,
}

/// The random quantities of one training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleDraws {
    pub example: usize,
    pub z0: LatentVideo,
    pub t: f64,
    pub drop_cond: bool,
    pub delta: f64,
    pub drop_event: bool,
}

impl SampleDraws {
    pub fn draw(
        seed: u64,
        step: usize,
        b: usize,
        n_examples: usize,
        z1: impl Fn(usize) -> crate::latent::Shape,
        train: &TrainConfig,
        loss: &LossConfig,
    ) -> SampleDraws {
        let s = derive_seed(
            derive_seed(seed, STREAM_TRAIN_SAMPLE, step as u64),
            0,
            b as u64,
        );
        let mut rng = rng_from_seed(s);
        let example = rng.random_range(0..n_examples);
        let shape = z1(example);
        let z0 = LatentVideo {
            shape,
            data: standard_normals(&mut rng, shape.numel()),
        };
        let t: f64 = rng.random();
        let drop_cond = rng.random::<f64>() < train.p_uncond;
        let delta = rng.random_range(-loss.delta_jitter..=loss.delta_jitter);
        let drop_event = rng.random::<f64>() < loss.p_event_dropout;
        SampleDraws {
            example,
            z0,
            t,
            drop_cond,
            delta,
            drop_event,
        }
    }
}

/// Loss and gradients of one sample.
pub struct SampleResult {
    pub loss: LossBreakdown,
    pub dit_grads: Grads,
    pub head_grads: Grads,
}

fn finite(v: f64, term: &'static str, step: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(EvdError::NonFinite { term, step })
    }
}

/// Evaluates the full objective for one sample and backpropagates it.
pub fn sample_loss_and_grads(
    dit: &MicroDiT,
    head: &EventHead,
    ex: &TrainExample,
    draws: &SampleDraws,
    loss_cfg: &LossConfig,
    step: usize,
) -> Result<SampleResult> {
    let spec = dit.cfg.spec;
    let grid = spec.grid(ex.z1.shape)?;
    let y = if draws.drop_cond {
        Conditioning::null(ex.y.embedding.len())
    } else {
        ex.y.clone()
    };
    let t = draws.t;
    let fs = interpolate(&draws.z0, &ex.z1, t)?;
    let (out, cache) = dit.forward_cached(&fs.z_t, &y, t)?;
    let delta = tokenize(&out.v_hat, spec)?.data;
    let target = tokenize(&fs.v_t, spec)?.data;
    let numel = delta.len() as f64;
    let base = finite(loss_base(&out.v_hat, &draws.z0, &ex.z1)?, "base", step)?;
    let mut d_tokens: Vec<f64> = delta
        .iter()
        .zip(&target)
        .map(|(v, g)| 2.0 * (v - g) / numel)
        .collect();

    let mut dit_grads = dit.params.zero_grads();
    let mut head_grads = head.params.zero_grads();

    if !loss_cfg.has_event_terms() {
        dit.backward(&cache, &d_tokens, None, &mut dit_grads);
        return Ok(SampleResult {
            loss: loss_total(base, 0.0, 0.0, 0.0, t, loss_cfg),
            dit_grads,
            head_grads,
        });
    }

    let w = time_weight(t, &loss_cfg.time_weight);
    let n = grid.tokens();
    let head_cache = head.forward_cached(&out.final_tokens, t)?;
    let a_used = used_activity(&head_cache.activity, draws.drop_event, grid, loss_cfg)?;

    let real = finite(loss_real(&a_used, &delta)?, "real", step)?;
    let order = finite(
        loss_order(&a_used, &delta, loss_cfg.tau_on, loss_cfg.tau_off)?,
        "order",
        step,
    )?;
    let mut d_a = vec![0.0; n];

    let gr = loss_real_grad(&a_used, &delta, w * loss_cfg.lambda_real);
    add_into(&mut d_tokens, &gr.d_delta);
    add_into(&mut d_a, &gr.d_activity);
    let go = loss_order_grad(
        &a_used,
        &delta,
        loss_cfg.tau_on,
        loss_cfg.tau_off,
        w * loss_cfg.lambda_order,
    );
    add_into(&mut d_tokens, &go);

    let mut cons = 0.0;
    let mut second = None;
    if loss_cfg.lambda_cons != 0.0 {
        let t2 = (t + draws.delta).clamp(0.0, 1.0);
        let fs2 = interpolate(&draws.z0, &ex.z1, t2)?;
        let (out2, cache2) = dit.forward_cached(&fs2.z_t, &y, t2)?;
        let delta2 = tokenize(&out2.v_hat, spec)?.data;
        let head_cache2 = head.forward_cached(&out2.final_tokens, t2)?;
        let a2_used = used_activity(&head_cache2.activity, draws.drop_event, grid, loss_cfg)?;
        cons = finite(loss_cons(&a_used, &delta, &a2_used, &delta2)?, "cons", step)?;
        let (g1, g2) = loss_cons_grad(&a_used, &delta, &a2_used, &delta2, w * loss_cfg.lambda_cons);
        add_into(&mut d_tokens, &g1.d_delta);
        add_into(&mut d_a, &g1.d_activity);
        second = Some((cache2, head_cache2, g2));
    }

    let d_final = if draws.drop_event {
        None
    } else {
        let d_raw = activity_grad_to_raw(&d_a, grid, loss_cfg);
        Some(head.backward(&head_cache, &d_raw, &mut head_grads))
    };
    dit.backward(&cache, &d_tokens, d_final.as_deref(), &mut dit_grads);

    if let Some((cache2, head_cache2, g2)) = second {
        let d_final2 = if draws.drop_event {
            None
        } else {
            let d_raw2 = activity_grad_to_raw(&g2.d_activity, grid, loss_cfg);
            Some(head.backward(&head_cache2, &d_raw2, &mut head_grads))
        };
        dit.backward(&cache2, &g2.d_delta, d_final2.as_deref(), &mut dit_grads);
    }

    let loss = loss_total(base, real, cons, order, t, loss_cfg);
    finite(loss.total, "total", step)?;
    Ok(SampleResult {
        loss,
        dit_grads,
        head_grads,
    })
}

fn used_activity(
    raw: &[f64],
    dropped: bool,
    grid: PatchGrid,
    cfg: &LossConfig,
) -> Result<Vec<f64>> {
    if dropped {
        Ok(vec![0.0; raw.len()])
    } else if cfg.use_smoothed_activity_in_losses {
        smooth_activity(raw, grid)
    } else {
        Ok(raw.to_vec())
    }
}

fn activity_grad_to_raw(d: &[f64], grid: PatchGrid, cfg: &LossConfig) -> Vec<f64> {
    if cfg.use_smoothed_activity_in_losses {
        smooth_activity_transpose(d, grid)
    } else {
        d.to_vec()
    }
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// Adam with decoupled weight decay over one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    decay_mask: Vec<bool>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, cfg: &TrainConfig) -> Self {
        let mut decay_mask = vec![false; store.len()];
        for e in &store.entries {
            if e.dims.len() >= 2 {
                decay_mask[e.offset..e.offset + e.len].fill(true);
            }
        }
        AdamW {
            lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            m: vec![0.0; store.len()],
            v: vec![0.0; store.len()],
            decay_mask,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            let decay = if self.decay_mask[i] {
                self.weight_decay * params[i]
            } else {
                0.0
            };
            params[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + decay);
        }
    }
}

/// Scales all buffers so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(buffers: &mut [&mut Grads], max_norm: f64) -> f64 {
    let norm = buffers.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in buffers.iter_mut() {
            g.scale(s);
        }
    }
    norm
}

/// `ema = decay * ema + (1 - decay) * params`
pub fn ema_update(ema: &mut ParamStore, params: &ParamStore, decay: f64) {
    for (e, p) in ema.data.iter_mut().zip(&params.data) {
        *e = decay * *e + (1.0 - decay) * p;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub loss: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub head_grad_norm: f64,
    pub weight_min: f64,
    pub weight_mean: f64,
    pub weight_max: f64,
    pub events_dropped: usize,
}

pub struct Trainer {
    pub dit: MicroDiT,
    pub head: EventHead,
    pub ema_dit: ParamStore,
    pub ema_head: ParamStore,
    pub cfg: TrainConfig,
    pub loss: LossConfig,
    pub step: usize,
    opt_dit: AdamW,
    opt_head: AdamW,
}

impl Trainer {
    pub fn new(dit: MicroDiT, head: EventHead, cfg: TrainConfig, loss: LossConfig) -> Result<Self> {
        cfg.validate()?;
        loss.validate()?;
        if head.width != dit.cfg.d_model {
            return Err(EvdError::shape("event head", "width must equal d_model"));
        }
        let opt_dit = AdamW::new(&dit.params, cfg.lr_backbone, &cfg);
        let opt_head = AdamW::new(&head.params, cfg.lr_event, &cfg);
        Ok(Trainer {
            ema_dit: dit.params.clone(),
            ema_head: head.params.clone(),
            dit,
            head,
            cfg,
            loss,
            step: 0,
            opt_dit,
            opt_head,
        })
    }

    pub fn draws(&self, data: &[TrainExample]) -> Vec<SampleDraws> {
        (0..self.cfg.batch_size)
            .map(|b| {
                SampleDraws::draw(
                    self.cfg.seed,
                    self.step,
                    b,
                    data.len(),
                    |i| data[i].z1.shape,
                    &self.cfg,
                    &self.loss,
                )
            })
            .collect()
    }

    pub fn train_step(&mut self, data: &[TrainExample]) -> Result<StepReport> {
        if data.is_empty() {
            return Err(EvdError::config("data", "training set is empty"));
        }
        let draws = self.draws(data);
        let (dit, head, loss_cfg, step) = (&self.dit, &self.head, &self.loss, self.step);
        let results: Vec<SampleResult> = draws
            .par_iter()
            .map(|d| sample_loss_and_grads(dit, head, &data[d.example], d, loss_cfg, step))
            .collect::<Result<_>>()?;

        let inv_b = 1.0 / results.len() as f64;
        let mut g_dit = self.dit.params.zero_grads();
        let mut g_head = self.head.params.zero_grads();
        for r in &results {
            g_dit.add_assign(&r.dit_grads);
            g_head.add_assign(&r.head_grads);
        }
        g_dit.scale(inv_b);
        g_head.scale(inv_b);
        let head_grad_norm = g_head.sq_norm().sqrt();

        let grad_norm = if self.cfg.freeze_event_head {
            let n = clip_global_norm(&mut [&mut g_dit], self.cfg.grad_clip);
            self.opt_dit.step(&mut self.dit.params.data, &g_dit.data);
            n
        } else {
            let n = clip_global_norm(&mut [&mut g_dit, &mut g_head], self.cfg.grad_clip);
            self.opt_dit.step(&mut self.dit.params.data, &g_dit.data);
            self.opt_head.step(&mut self.head.params.data, &g_head.data);
            n
        };
        ema_update(&mut self.ema_dit, &self.dit.params, self.cfg.ema_decay);
        ema_update(&mut self.ema_head, &self.head.params, self.cfg.ema_decay);

        let losses: Vec<_> = results.iter().map(|r| r.loss).collect();
        let weights: Vec<f64> = losses.iter().map(|l| l.weight).collect();
        let report = StepReport {
            step: self.step,
            loss: LossBreakdown::mean(&losses),
            grad_norm,
            head_grad_norm,
            weight_min: weights.iter().cloned().fold(f64::INFINITY, f64::min),
            weight_mean: weights.iter().sum::<f64>() * inv_b,
            weight_max: weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            events_dropped: draws.iter().filter(|d| d.drop_event).count(),
        };
        self.step += 1;
        Ok(report)
    }

    /// A plain flow-matching step on the backbone alone, sharing the random
    /// draws of [`Trainer::train_step`]. Used as a reference.
    pub fn fm_train_step(&mut self, data: &[TrainExample]) -> Result<f64> {
        let draws = self.draws(data);
        let spec = self.dit.cfg.spec;
        let mut g = self.dit.params.zero_grads();
        let mut total = 0.0;
        let mut per_sample = Vec::with_capacity(draws.len());
        for d in &draws {
            let ex = &data[d.example];
            let y = if d.drop_cond {
                Conditioning::null(ex.y.embedding.len())
            } else {
                ex.y.clone()
            };
            let fs = interpolate(&d.z0, &ex.z1, d.t)?;
            let (out, cache) = self.dit.forward_cached(&fs.z_t, &y, d.t)?;
            let pred = tokenize(&out.v_hat, spec)?.data;
            let target = tokenize(&fs.v_t, spec)?.data;
            let numel = pred.len() as f64;
            let dt: Vec<f64> = pred
                .iter()
                .zip(&target)
                .map(|(p, q)| 2.0 * (p - q) / numel)
                .collect();
            let mut gs = self.dit.params.zero_grads();
            self.dit.backward(&cache, &dt, None, &mut gs);
            per_sample.push(gs);
            total += loss_base(&out.v_hat, &d.z0, &ex.z1)?;
        }
        for gs in &per_sample {
            g.add_assign(gs);
        }
        g.scale(1.0 / draws.len() as f64);
        clip_global_norm(&mut [&mut g], self.cfg.grad_clip);
        self.opt_dit.step(&mut self.dit.params.data, &g.data);
        ema_update(&mut self.ema_dit, &self.dit.params, self.cfg.ema_decay);
        ema_update(&mut self.ema_head, &self.head.params, self.cfg.ema_decay);
        self.step += 1;
        Ok(total / draws.len() as f64)
    }

    /// Backbone and head carrying the EMA weights.
    pub fn ema_models(&self) -> (MicroDiT, EventHead) {
        let mut dit = self.dit.clone();
        dit.params.data.copy_from_slice(&self.ema_dit.data);
        let mut head = self.head.clone();
        head.params.data.copy_from_slice(&self.ema_head.data);
        (dit, head)
    }
}
