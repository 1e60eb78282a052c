//! Self-check suite run by `evd check`: config validation plus fast
//! invariant checks of every subsystem on small models.

use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use evd_core::backbone::{
    oracle_velocity_field, Conditioning, CountingField, DitConfig, EventHead, MicroDiT,
    VelocityField,
};
use evd_core::gating::{hysteresis_step, soft_gate, GateCombine, GateConfig, GateState};
use evd_core::latent::{tokenize, LatentVideo, PatchSpec, Shape};
use evd_core::losses::{loss_order, loss_real, LossConfig};
use evd_core::pseudo::{
    diffuseness_filter, latent_change_magnitude, pseudo_targets, suppress_camera,
};
use evd_core::rng::{rng_from_seed, standard_normals};
use evd_core::sampling::{
    cfg_combine, sample, sample_from, ConstantActivity, EventBranch, HeadActivity, SamplerConfig,
    ScheduleMode, Solver,
};
use evd_core::scene::{make_contact_scene, SceneDistribution};
use evd_core::train::{sample_loss_and_grads, SampleDraws, TrainConfig, TrainExample, Trainer};

use crate::config::RunConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn video(shape: Shape, seed: u64) -> LatentVideo {
    LatentVideo::from_vec(
        shape,
        standard_normals(&mut rng_from_seed(seed), shape.numel()),
    )
    .expect("shape matches")
}

fn small_dit() -> DitConfig {
    DitConfig {
        shape: Shape::new(4, 4, 4, 2),
        spec: PatchSpec::new(1, 2, 2),
        d_model: 16,
        layers: 2,
        heads: 2,
        d_cond: 4,
        mlp_ratio: 2,
    }
}

fn random_models(cfg: DitConfig, seed: u64) -> (MicroDiT, EventHead) {
    let mut dit = MicroDiT::new(cfg).expect("valid config");
    dit.init_random(seed);
    let mut head = EventHead::new(cfg.d_model, 8);
    head.init_random(seed);
    (dit, head)
}

fn cond(width: usize, seed: u64) -> Conditioning {
    Conditioning::new(standard_normals(&mut rng_from_seed(seed), width))
}

fn sampler_for(spec: PatchSpec, steps: usize, solver: Solver, fault: bool) -> SamplerConfig {
    SamplerConfig {
        spec,
        steps,
        solver,
        fault_skip_hysteresis: fault,
        ..SamplerConfig::default()
    }
}

fn check_config(cfg: &RunConfig) -> Outcome {
    cfg.validate().map_err(|e| format!("{e:#}"))?;
    Ok("all sections valid".into())
}

fn check_gate_arithmetic() -> Outcome {
    let g = soft_gate(&[0.5, 0.7], &GateConfig::default());
    ensure((g[0] - 0.5).abs() < 1e-12, || {
        format!("soft_gate(0.5) = {}", g[0])
    })?;
    let want = 1.0 / (1.0 + (-2.4f64).exp());
    ensure((g[1] - want).abs() < 1e-12, || {
        format!("soft_gate(0.7) = {}", g[1])
    })?;
    Ok("soft gate center and slope".into())
}

fn check_hysteresis() -> Outcome {
    let cfg = GateConfig::default();
    let mut rng = rng_from_seed(17);
    let n = 16;
    let mut state = GateState::new(n);
    for step in 0..5000 {
        let a: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let next = hysteresis_step(&a, &state, &cfg).map_err(|e| e.to_string())?;
        for i in 0..n {
            let want = if a[i] >= cfg.tau_on {
                1.0
            } else if a[i] <= cfg.tau_off {
                0.0
            } else {
                state.bin[i]
            };
            ensure(next.bin[i] == want, || {
                format!(
                    "step {step} token {i}: a={} prev={} got {}",
                    a[i], state.bin[i], next.bin[i]
                )
            })?;
        }
        state = next;
    }
    Ok("5000 random steps follow the two-threshold rule".into())
}

fn check_base_recovery(fault: bool) -> Outcome {
    let cfg = small_dit();
    let (dit, head) = random_models(cfg, 3);
    let act = HeadActivity {
        head: &head,
        branch: EventBranch::Cond,
    };
    for solver in [Solver::Euler, Solver::Heun] {
        for seed in 0..5 {
            let y = cond(cfg.d_cond, seed);
            let mut off = sampler_for(cfg.spec, 6, solver, fault);
            off.schedule = ScheduleMode::Off;
            let mut base = off.clone();
            base.gating_enabled = false;
            let a =
                sample(&dit, Some(&act), &y, cfg.shape, &off, seed).map_err(|e| e.to_string())?;
            let b = sample(&dit, None, &y, cfg.shape, &base, seed).map_err(|e| e.to_string())?;
            ensure(a.latents == b.latents, || {
                format!("{solver:?} seed {seed} differs")
            })?;
        }
    }
    Ok("rho = 0 matches ungated sampling bitwise".into())
}

fn check_forced_ones(fault: bool) -> Outcome {
    let cfg = small_dit();
    let (dit, _) = random_models(cfg, 4);
    let ones = ConstantActivity(vec![1.0; cfg.tokens()]);
    for solver in [Solver::Euler, Solver::Heun] {
        let mut gated = sampler_for(cfg.spec, 6, solver, fault);
        gated.gate.combine = GateCombine::Binary;
        let mut base = gated.clone();
        base.gating_enabled = false;
        let y = cond(cfg.d_cond, 1);
        let a = sample(&dit, Some(&ones), &y, cfg.shape, &gated, 2).map_err(|e| e.to_string())?;
        let b = sample(&dit, None, &y, cfg.shape, &base, 2).map_err(|e| e.to_string())?;
        ensure(a.latents == b.latents, || {
            format!("{solver:?}: forced all-ones gate differs from ungated sampling")
        })?;
    }
    Ok("saturated gate matches ungated sampling bitwise".into())
}

fn check_solver_exactness() -> Outcome {
    let cfg = small_dit();
    let z0 = video(cfg.shape, 5);
    let z1 = video(cfg.shape, 6);
    let oracle = oracle_velocity_field(&z0, &z1, cfg.spec).map_err(|e| e.to_string())?;
    let y = cond(cfg.d_cond, 0);
    let mut worst: f64 = 0.0;
    for solver in [Solver::Euler, Solver::Heun] {
        for k in [1, 4, 50] {
            let mut s = sampler_for(cfg.spec, k, solver, false);
            s.gating_enabled = false;
            let tr = sample_from(&oracle, None, &y, z0.clone(), &s).map_err(|e| e.to_string())?;
            worst = worst.max(tr.final_latent().max_abs_diff(&z1));
        }
    }
    ensure(worst < 1e-10, || format!("max error {worst:e}"))?;
    Ok(format!("oracle field lands on data, max error {worst:.1e}"))
}

fn check_cfg_identities() -> Outcome {
    let s = Shape::new(2, 2, 2, 2);
    let (c, u) = (video(s, 1), video(s, 2));
    let w0 = cfg_combine(&c, &u, 0.0).map_err(|e| e.to_string())?;
    ensure(w0.max_abs_diff(&c) <= 1e-12, || {
        "w = 0 is not the conditional field".into()
    })?;
    for w in [1.0, 4.0, 8.0] {
        let same = cfg_combine(&c, &c, w).map_err(|e| e.to_string())?;
        ensure(same.max_abs_diff(&c) <= 1e-12, || {
            format!("equal branches depend on w = {w}")
        })?;
    }
    Ok("w = 0 and equal-branch identities".into())
}

fn check_loss_identities() -> Outcome {
    let d = standard_normals(&mut rng_from_seed(8), 12);
    let ms = d.iter().map(|x| x * x).sum::<f64>() / 12.0;
    let e = |r: evd_core::Result<f64>| r.map_err(|e| e.to_string());
    ensure(e(loss_real(&[1.0; 4], &d))? == 0.0, || {
        "L_real(a = 1) != 0".into()
    })?;
    ensure((e(loss_real(&[0.0; 4], &d))? - ms).abs() < 1e-12, || {
        "L_real(a = 0)".into()
    })?;
    ensure(e(loss_order(&[0.9; 4], &d, 0.62, 0.38))? == 0.0, || {
        "L_order(a >= on)".into()
    })?;
    ensure(
        (e(loss_order(&[0.1; 4], &d, 0.62, 0.38))? - 2.0 * ms).abs() < 1e-12,
        || "L_order(a < off)".into(),
    )?;
    Ok("masking identities".into())
}

fn micro() -> DitConfig {
    DitConfig {
        shape: Shape::new(2, 4, 4, 1),
        spec: PatchSpec::new(1, 2, 2),
        d_model: 8,
        layers: 2,
        heads: 2,
        d_cond: 3,
        mlp_ratio: 2,
    }
}

fn check_gradients() -> Outcome {
    let cfg = micro();
    let loss = LossConfig::default();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for seed in 0..2u64 {
        let (dit, head) = random_models(cfg, seed);
        let ex = TrainExample {
            z1: video(cfg.shape, seed + 10),
            y: cond(cfg.d_cond, seed + 20),
        };
        let draws = SampleDraws {
            example: 0,
            z0: video(cfg.shape, seed + 30),
            t: 0.3 + 0.2 * seed as f64,
            drop_cond: false,
            delta: 0.03,
            drop_event: false,
        };
        let total = |d: &MicroDiT, hd: &EventHead| {
            sample_loss_and_grads(d, hd, &ex, &draws, &loss, 0).map(|r| r.loss.total)
        };
        let res =
            sample_loss_and_grads(&dit, &head, &ex, &draws, &loss, 0).map_err(|e| e.to_string())?;
        let n = dit.params.data.len();
        for i in (0..n).step_by(n / 40 + 1) {
            let (mut p, mut m) = (dit.clone(), dit.clone());
            p.params.data[i] += h;
            m.params.data[i] -= h;
            let fd = (total(&p, &head).map_err(|e| e.to_string())?
                - total(&m, &head).map_err(|e| e.to_string())?)
                / (2.0 * h);
            let an = res.dit_grads.data[i];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-5));
        }
        for i in 0..head.params.data.len() {
            let (mut p, mut m) = (head.clone(), head.clone());
            p.params.data[i] += h;
            m.params.data[i] -= h;
            let fd = (total(&dit, &p).map_err(|e| e.to_string())?
                - total(&dit, &m).map_err(|e| e.to_string())?)
                / (2.0 * h);
            let an = res.head_grads.data[i];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-5));
        }
    }
    ensure(worst < 1e-4, || format!("worst relative error {worst:e}"))?;
    Ok(format!("full objective, worst relative error {worst:.1e}"))
}

fn check_zero_impact(cfg: &RunConfig) -> Outcome {
    let mut small = cfg.clone();
    small.data.scenes.shape = Shape::new(4, 4, 4, 2);
    small.data.scenes.spec = PatchSpec::new(1, 2, 2);
    small.model.d_model = 8;
    small.model.heads = 2;
    small.model.head_hidden = 8;
    let m = crate::run::Models::init(&small).map_err(|e| format!("{e:#}"))?;
    let dc = small.dit_config();
    let z = video(dc.shape, 1);
    let y = cond(dc.d_cond, 2);
    let out = m.dit.forward(&z, &y, 0.4).map_err(|e| e.to_string())?;
    ensure(out.v_hat.data.iter().all(|&v| v == 0.0), || {
        "v_hat is not exactly 0".into()
    })?;
    let a = m
        .head
        .activity(&out.final_tokens, 0.4)
        .map_err(|e| e.to_string())?;
    let amax = a.iter().cloned().fold(0.0, f64::max);
    ensure(amax < 0.003, || format!("max activity {amax}"))?;

    let data = vec![TrainExample { z1: z, y }];
    let train = TrainConfig {
        freeze_event_head: true,
        ..TrainConfig::default()
    };
    let zero = LossConfig {
        lambda_real: 0.0,
        lambda_cons: 0.0,
        lambda_order: 0.0,
        ..LossConfig::default()
    };
    let mut a =
        Trainer::new(m.dit.clone(), m.head.clone(), train, zero).map_err(|e| e.to_string())?;
    let mut b = Trainer::new(m.dit, m.head, train, zero).map_err(|e| e.to_string())?;
    for _ in 0..3 {
        a.train_step(&data).map_err(|e| e.to_string())?;
        b.fm_train_step(&data).map_err(|e| e.to_string())?;
    }
    ensure(a.dit.params.data == b.dit.params.data, || {
        "lambda = 0 step differs from a plain flow-matching step".into()
    })?;
    Ok(format!(
        "v_hat = 0, max activity {amax:.2e}, FM steps bitwise equal"
    ))
}

fn check_pseudo_targets(cfg: &RunConfig) -> Outcome {
    let dist = SceneDistribution::default();
    let mut p = dist.sample_params(3).map_err(|e| e.to_string())?;
    p.velocity = (0, 0);
    p.tau_s = p.tau_e;
    p.camera_drift = Some((0..p.shape.t).map(|i| 0.25 * i as f64).collect());
    let scene = make_contact_scene(&p).map_err(|e| e.to_string())?;
    let spec = PatchSpec::new(1, p.spec.ph, p.spec.pw);
    let m = latent_change_magnitude(&scene.clean_latent, spec).map_err(|e| e.to_string())?;
    let s = suppress_camera(&m);
    ensure(s.data.iter().all(|&v| v == 0.0), || {
        "camera drift leaves residue".into()
    })?;
    let pt = cfg.pseudo;
    let t = pseudo_targets(&scene.clean_latent, p.spec, &pt).map_err(|e| e.to_string())?;
    ensure(
        !diffuseness_filter(&t.activity.data, pt.diffuseness_threshold),
        || "pure drift accepted by the diffuseness filter".into(),
    )?;
    for w in t.phase.windows(2) {
        ensure(w[1] >= w[0], || "phase decreases".into())?;
    }
    Ok("drift suppressed exactly and rejected".into())
}

fn check_evaluation_counts() -> Outcome {
    let cfg = small_dit();
    let (dit, head) = random_models(cfg, 9);
    let counted = CountingField::new(dit);
    let act = HeadActivity {
        head: &head,
        branch: EventBranch::Cond,
    };
    for (solver, per) in [(Solver::Euler, 2), (Solver::Heun, 4)] {
        counted.reset();
        let s = sampler_for(cfg.spec, 7, solver, false);
        sample(&counted, Some(&act), &cond(cfg.d_cond, 0), cfg.shape, &s, 1)
            .map_err(|e| e.to_string())?;
        ensure(counted.count() == per * 7, || {
            format!("{solver:?}: {} evaluations for 7 steps", counted.count())
        })?;
    }
    Ok("2 per Euler step, 4 per Heun step".into())
}

fn check_tokenizer() -> Outcome {
    let s = Shape::new(4, 4, 4, 2);
    let z = video(s, 3);
    let tok = tokenize(&z, PatchSpec::new(2, 2, 2)).map_err(|e| e.to_string())?;
    let back = evd_core::latent::untokenize(&tok).map_err(|e| e.to_string())?;
    ensure(back == z, || "tokenize round trip".into())?;
    Ok("round trip exact".into())
}

/// Runs every check. With `cfg.check.inject_fault` the gate's hysteresis
/// update is disabled, which the suite must detect.
pub fn run_checks(cfg: &RunConfig) -> Vec<CheckResult> {
    let fault = cfg.check.inject_fault;
    let checks: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("config", Box::new(|| check_config(cfg))),
        ("gate_arithmetic", Box::new(check_gate_arithmetic)),
        ("hysteresis", Box::new(check_hysteresis)),
        (
            "base_recovery",
            Box::new(move || check_base_recovery(fault)),
        ),
        (
            "forced_ones_equivalence",
            Box::new(move || check_forced_ones(fault)),
        ),
        ("solver_exactness", Box::new(check_solver_exactness)),
        ("cfg_identities", Box::new(check_cfg_identities)),
        ("loss_identities", Box::new(check_loss_identities)),
        ("gradients", Box::new(check_gradients)),
        ("zero_impact", Box::new(|| check_zero_impact(cfg))),
        ("pseudo_targets", Box::new(|| check_pseudo_targets(cfg))),
        ("evaluation_counts", Box::new(check_evaluation_counts)),
        ("tokenizer", Box::new(check_tokenizer)),
    ];
    checks
        .into_iter()
        .map(|(name, f)| {
            let start = Instant::now();
            let out = f();
            CheckResult {
                name: name.to_string(),
                passed: out.is_ok(),
                detail: out.unwrap_or_else(|e| e),
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect()
}
