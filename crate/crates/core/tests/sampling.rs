use std::sync::atomic::{AtomicUsize, Ordering};

use evd_core::backbone::{
    oracle_velocity_field, Conditioning, CountingField, DitConfig, EventHead, MicroDiT,
    VelocityField,
};
use evd_core::gating::{schedule_rho, GateCombine};
use evd_core::latent::{LatentVideo, PatchSpec, Shape};
use evd_core::rng::{derive_seed, rng_from_seed, standard_normals, STREAM_TRAJECTORY};
use evd_core::sampling::{
    cfg_combine, sample, sample_batch, sample_from, solver_step, ActivitySource, ConstantActivity,
    EventBranch, HeadActivity, SamplerConfig, ScheduleMode, Solver, StepContext,
};

fn dit_cfg() -> DitConfig {
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

fn random_model(seed: u64) -> (MicroDiT, EventHead) {
    let cfg = dit_cfg();
    let mut dit = MicroDiT::new(cfg).unwrap();
    dit.init_random(seed);
    let mut head = EventHead::new(cfg.d_model, 16);
    head.init_random(seed);
    (dit, head)
}

fn sampler(solver: Solver, steps: usize) -> SamplerConfig {
    SamplerConfig {
        spec: dit_cfg().spec,
        steps,
        solver,
        ..SamplerConfig::default()
    }
}

fn video(shape: Shape, seed: u64) -> LatentVideo {
    LatentVideo::from_vec(
        shape,
        standard_normals(&mut rng_from_seed(seed), shape.numel()),
    )
    .unwrap()
}

fn cond(seed: u64) -> Conditioning {
    Conditioning::new(standard_normals(&mut rng_from_seed(seed), dit_cfg().d_cond))
}

#[test]
fn cfg_identities() {
    let s = Shape::new(2, 2, 2, 1);
    let (c, u) = (video(s, 1), video(s, 2));
    assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), c);
    for w in [0.5, 4.0, 8.0] {
        let v = cfg_combine(&c, &c, w).unwrap();
        assert!(v.max_abs_diff(&c) < 1e-12);
    }
    let one = LatentVideo::from_vec(Shape::new(1, 1, 1, 1), vec![1.0]).unwrap();
    let zero = LatentVideo::zeros(Shape::new(1, 1, 1, 1));
    assert_eq!(cfg_combine(&one, &zero, 4.0).unwrap().data, vec![5.0]);
    assert!(cfg_combine(&c, &video(Shape::new(1, 2, 2, 1), 0), 1.0).is_err());
}

#[test]
fn constant_field_steps() {
    let s = Shape::new(1, 2, 2, 1);
    let z = video(s, 3);
    let c = video(s, 4);
    let mut field = |_: &LatentVideo, _: f64| Ok(c.clone());
    let e = solver_step(&z, &mut field, 0.25, 0.5, Solver::Euler).unwrap();
    let h = solver_step(&z, &mut field, 0.25, 0.5, Solver::Heun).unwrap();
    assert_eq!(e, z.axpy(0.25, &c));
    assert!(h.max_abs_diff(&e) < 1e-15);
    assert!(solver_step(&z, &mut field, 0.5, 0.5, Solver::Euler).is_err());
}

#[test]
fn oracle_field_lands_on_data() {
    let shape = dit_cfg().shape;
    for seed in 0..3 {
        let z0 = video(shape, seed);
        let z1 = video(shape, seed + 100);
        let oracle = oracle_velocity_field(&z0, &z1, dit_cfg().spec).unwrap();
        let y = cond(seed);
        for solver in [Solver::Euler, Solver::Heun] {
            for k in [1, 4, 50] {
                let mut cfg = sampler(solver, k);
                cfg.gating_enabled = false;
                let tr = sample_from(&oracle, None, &y, z0.clone(), &cfg).unwrap();
                assert!(tr.final_latent().max_abs_diff(&z1) < 1e-10);

                // Forced all-ones gate: binary combine of a saturated state.
                cfg.gating_enabled = true;
                cfg.gate.combine = GateCombine::Binary;
                let ones = ConstantActivity(vec![1.0; dit_cfg().tokens()]);
                let tr = sample_from(&oracle, Some(&ones), &y, z0.clone(), &cfg).unwrap();
                assert!(tr.final_latent().max_abs_diff(&z1) < 1e-10);
            }
        }
    }
}

#[test]
fn rho_zero_recovers_the_base_sampler_bitwise() {
    let (dit, head) = random_model(7);
    let act = HeadActivity {
        head: &head,
        branch: EventBranch::Cond,
    };
    for solver in [Solver::Euler, Solver::Heun] {
        for seed in 0..20 {
            let y = cond(seed);
            let mut off = sampler(solver, 8);
            off.schedule = ScheduleMode::Off;
            let mut base = sampler(solver, 8);
            base.gating_enabled = false;
            let a = sample(&dit, Some(&act), &y, dit_cfg().shape, &off, seed).unwrap();
            let b = sample(&dit, None, &y, dit_cfg().shape, &base, seed).unwrap();
            assert_eq!(a.latents, b.latents, "{solver:?} seed {seed}");
        }
    }
}

#[test]
fn evaluation_counts() {
    let (dit, head) = random_model(1);
    let counted = CountingField::new(dit);
    let act = HeadActivity {
        head: &head,
        branch: EventBranch::Cond,
    };
    for (solver, per_step) in [(Solver::Euler, 2), (Solver::Heun, 4)] {
        for k in [1, 5, 12] {
            for gating in [false, true] {
                counted.reset();
                let mut cfg = sampler(solver, k);
                cfg.gating_enabled = gating;
                let tr = sample(&counted, Some(&act), &cond(0), dit_cfg().shape, &cfg, 3).unwrap();
                assert_eq!(counted.count(), per_step * k);
                assert_eq!(tr.nfe, per_step * k);
                assert_eq!(tr.latents.len(), k + 1);
                assert_eq!(tr.gates.len(), k);
            }
        }
    }
}

#[test]
fn zero_gate_freezes_the_latent() {
    let (dit, _) = random_model(2);
    let zeros = ConstantActivity(vec![0.0; dit_cfg().tokens()]);
    let mut cfg = sampler(Solver::Heun, 6);
    cfg.schedule = ScheduleMode::Const(1.0);
    let tr = sample(&dit, Some(&zeros), &cond(1), dit_cfg().shape, &cfg, 5).unwrap();
    for z in &tr.latents {
        assert_eq!(z, &tr.latents[0]);
    }
}

#[test]
fn zero_impact_head_freezes_early_steps_then_follows_scaled_field() {
    let (dit, _) = random_model(3);
    let mut head = EventHead::new(dit_cfg().d_model, 16);
    head.init_zero_impact(3);
    let act = HeadActivity {
        head: &head,
        branch: EventBranch::Cond,
    };
    let cfg = sampler(Solver::Euler, 10);
    let y = cond(2);
    let tr = sample(&dit, Some(&act), &y, dit_cfg().shape, &cfg, 9).unwrap();
    let null = Conditioning::null(y.embedding.len());
    for k in 0..10 {
        let t = tr.times[k];
        let dt = tr.times[k + 1] - t;
        assert!(tr.activities[k].iter().all(|&a| a < 0.003));
        assert!(tr.states[k].iter().all(|&b| b == 0.0));
        if t <= cfg.gate.t_star {
            assert_eq!(tr.latents[k + 1], tr.latents[k], "step {k}");
        } else {
            let z = &tr.latents[k];
            let c = dit.forward(z, &y, t).unwrap().v_hat;
            let u = dit.forward(z, &null, t).unwrap().v_hat;
            let v = cfg_combine(&c, &u, cfg.w_cfg).unwrap();
            let want = z.axpy(dt * (1.0 - schedule_rho(t, cfg.gate.t_star)), &v);
            assert!(tr.latents[k + 1].max_abs_diff(&want) < 1e-12, "step {k}");
        }
    }
}

#[test]
fn sampling_is_deterministic_and_batch_seeds_are_derived() {
    let (dit, head) = random_model(4);
    let act = HeadActivity {
        head: &head,
        branch: EventBranch::Uncond,
    };
    let cfg = sampler(Solver::Heun, 5);
    let ys: Vec<_> = (0..4).map(cond).collect();
    let batch = sample_batch(&dit, Some(&act), &ys, dit_cfg().shape, &cfg, 11).unwrap();
    for (i, y) in ys.iter().enumerate() {
        let seed = derive_seed(11, STREAM_TRAJECTORY, i as u64);
        let a = sample(&dit, Some(&act), y, dit_cfg().shape, &cfg, seed).unwrap();
        let b = sample(&dit, Some(&act), y, dit_cfg().shape, &cfg, seed).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, batch[i]);
    }
}

/// High activity at predictor evaluations, low at correctors.
struct Alternating {
    calls: AtomicUsize,
    n: usize,
}

impl ActivitySource for Alternating {
    fn activity(&self, _ctx: &StepContext<'_>) -> evd_core::Result<Vec<f64>> {
        let i = self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(vec![if i % 2 == 0 { 0.9 } else { 0.1 }; self.n])
    }
}

#[test]
fn heun_advances_hysteresis_once_per_step_from_the_predictor() {
    let (dit, _) = random_model(5);
    let src = Alternating {
        calls: AtomicUsize::new(0),
        n: dit_cfg().tokens(),
    };
    let cfg = sampler(Solver::Heun, 4);
    let tr = sample(&dit, Some(&src), &cond(0), dit_cfg().shape, &cfg, 1).unwrap();
    assert_eq!(src.calls.load(Ordering::SeqCst), 8);
    for s in &tr.states {
        assert!(s.iter().all(|&b| b == 1.0));
    }
}

#[test]
fn skipped_hysteresis_breaks_forced_ones_equivalence() {
    let (dit, _) = random_model(6);
    let ones = ConstantActivity(vec![1.0; dit_cfg().tokens()]);
    let mut gated = sampler(Solver::Euler, 6);
    gated.gate.combine = GateCombine::Binary;
    let mut base = gated.clone();
    base.gating_enabled = false;
    let y = cond(3);
    let b = sample(&dit, None, &y, dit_cfg().shape, &base, 2).unwrap();
    let a = sample(&dit, Some(&ones), &y, dit_cfg().shape, &gated, 2).unwrap();
    assert_eq!(a.latents, b.latents);
    gated.fault_skip_hysteresis = true;
    let f = sample(&dit, Some(&ones), &y, dit_cfg().shape, &gated, 2).unwrap();
    assert_ne!(f.latents, b.latents);
}

#[test]
fn config_validation() {
    let ok = sampler(Solver::Euler, 4);
    assert!(ok.validate().is_ok());
    let mut c = ok.clone();
    c.steps = 0;
    assert!(c.validate().is_err());
    let mut c = ok.clone();
    c.w_cfg = -1.0;
    assert!(c.validate().is_err());
    let mut c = ok.clone();
    c.schedule = ScheduleMode::Const(1.5);
    assert!(c.validate().is_err());
    let mut c = ok.clone();
    c.grid = Some(vec![0.0, 0.5, 1.0]);
    assert!(c.validate().is_err());
    c.steps = 2;
    assert!(c.validate().is_ok());
    let (dit, _) = random_model(0);
    assert!(sample(&dit, None, &cond(0), dit_cfg().shape, &ok, 0).is_err());
}
