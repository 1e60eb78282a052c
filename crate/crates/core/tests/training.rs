use evd_core::backbone::{Conditioning, DitConfig, EventHead, MicroDiT, VelocityField};
use evd_core::error::EvdError;
use evd_core::flow::TimeWeightConfig;
use evd_core::latent::{LatentVideo, PatchSpec, Shape};
use evd_core::losses::{loss_base, loss_cons, loss_order, loss_real, loss_total, LossConfig};
use evd_core::rng::{rng_from_seed, standard_normals};
use evd_core::train::{sample_loss_and_grads, SampleDraws, TrainConfig, TrainExample, Trainer};
use proptest::prelude::*;

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

fn video(shape: Shape, seed: u64) -> LatentVideo {
    LatentVideo::from_vec(
        shape,
        standard_normals(&mut rng_from_seed(seed), shape.numel()),
    )
    .unwrap()
}

fn example(seed: u64) -> TrainExample {
    let cfg = micro();
    TrainExample {
        z1: video(cfg.shape, seed),
        y: Conditioning::new(standard_normals(
            &mut rng_from_seed(seed ^ 0xff),
            cfg.d_cond,
        )),
    }
}

fn draws(seed: u64, t: f64, delta: f64) -> SampleDraws {
    SampleDraws {
        example: 0,
        z0: video(micro().shape, seed + 1000),
        t,
        drop_cond: false,
        delta,
        drop_event: false,
    }
}

fn random_models(seed: u64) -> (MicroDiT, EventHead) {
    let mut dit = MicroDiT::new(micro()).unwrap();
    dit.init_random(seed);
    let mut head = EventHead::new(micro().d_model, 8);
    head.init_random(seed);
    (dit, head)
}

#[test]
fn base_loss_examples() {
    let s = Shape::new(2, 2, 2, 2);
    let (z0, z1) = (video(s, 1), video(s, 2));
    assert_eq!(loss_base(&z1.sub(&z0), &z0, &z1).unwrap(), 0.0);
    let zero = LatentVideo::zeros(s);
    let want = z1.data.iter().map(|x| x * x).sum::<f64>() / 16.0;
    assert!((loss_base(&zero, &zero, &z1).unwrap() - want).abs() < 1e-15);
    let v = video(s, 3);
    let mut brute = 0.0;
    for i in 0..16 {
        brute += (v.data[i] - (z1.data[i] - z0.data[i])).powi(2);
    }
    assert!((loss_base(&v, &z0, &z1).unwrap() - brute / 16.0).abs() < 1e-12);
    assert!(loss_base(&v, &video(Shape::new(1, 2, 2, 2), 0), &z1).is_err());
}

#[test]
fn event_term_examples() {
    let delta: Vec<f64> = standard_normals(&mut rng_from_seed(9), 12);
    let mean_sq = delta.iter().map(|x| x * x).sum::<f64>() / 12.0;
    assert_eq!(loss_real(&[1.0; 4], &delta).unwrap(), 0.0);
    assert!((loss_real(&[0.0; 4], &delta).unwrap() - mean_sq).abs() < 1e-15);
    assert!(
        (loss_real(&[0.5, 0.0, 0.0, 0.0], &[2.0, 0.0, 0.0, 0.0]).unwrap() - 0.25).abs() < 1e-15
    );
    assert!(loss_real(&[0.5; 5], &delta).is_err());

    assert_eq!(
        loss_cons(&[0.3; 4], &delta, &[0.3; 4], &delta).unwrap(),
        0.0
    );
    let other = standard_normals(&mut rng_from_seed(10), 12);
    assert_eq!(
        loss_cons(&[0.0; 4], &delta, &[0.0; 4], &other).unwrap(),
        0.0
    );
    assert_eq!(loss_cons(&[1.0], &[1.0], &[1.0], &[3.0]).unwrap(), 4.0);

    assert_eq!(loss_order(&[0.62; 4], &delta, 0.62, 0.38).unwrap(), 0.0);
    assert!((loss_order(&[0.1; 4], &delta, 0.62, 0.38).unwrap() - 2.0 * mean_sq).abs() < 1e-15);
    assert!((loss_order(&[0.5; 4], &delta, 0.62, 0.38).unwrap() - mean_sq).abs() < 1e-15);
}

#[test]
fn total_weighting() {
    let cfg = LossConfig::default();
    let zero = LossConfig {
        lambda_real: 0.0,
        lambda_cons: 0.0,
        lambda_order: 0.0,
        ..cfg
    };
    assert_eq!(loss_total(1.5, 2.0, 3.0, 4.0, 0.9, &zero).total, 1.5);
    let early = loss_total(1.0, 2.0, 3.0, 4.0, 0.4, &cfg);
    assert_eq!(early.weight, 1.0);
    assert!((early.total - (1.0 + 0.12 * 2.0 + 0.08 * 3.0 + 0.03 * 4.0)).abs() < 1e-15);
    let late = loss_total(1.0, 2.0, 3.0, 4.0, 1.0, &cfg);
    let aux = 0.12 * 2.0 + 0.08 * 3.0 + 0.03 * 4.0;
    assert!((late.total - (1.0 + (-2.4f64).exp() * aux)).abs() < 1e-12);
    let tw = TimeWeightConfig::default();
    assert_eq!((tw.t_star_loss, tw.kappa), (0.6, 6.0));
}

proptest! {
    #[test]
    fn terms_are_non_negative(
        a in prop::collection::vec(0.0f64..=1.0, 4),
        a2 in prop::collection::vec(0.0f64..=1.0, 4),
        seed in any::<u64>(),
        t in 0.0f64..=1.0,
    ) {
        let d = standard_normals(&mut rng_from_seed(seed), 8);
        let d2 = standard_normals(&mut rng_from_seed(seed ^ 3), 8);
        let r = loss_real(&a, &d).unwrap();
        let c = loss_cons(&a, &d, &a2, &d2).unwrap();
        let o = loss_order(&a, &d, 0.62, 0.38).unwrap();
        prop_assert!(r >= 0.0 && c >= 0.0 && o >= 0.0);
        let total = loss_total(0.7, r, c, o, t, &LossConfig::default());
        prop_assert!(total.total >= total.base);
    }
}

/// Relative error with a floor on the denominator: gradients below the
/// floor are compared in absolute terms.
fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-5)
}

#[test]
fn full_objective_gradients_match_finite_differences() {
    let h = 1e-5;
    let cfg = LossConfig::default();
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let (dit, head) = random_models(seed);
        let ex = example(seed);
        let t = if seed % 2 == 0 { 0.35 } else { 0.8 };
        let d = draws(seed, t, 0.04);
        let res = sample_loss_and_grads(&dit, &head, &ex, &d, &cfg, 0).unwrap();
        assert!(res.loss.real > 0.0 && res.loss.cons > 0.0);
        let total = |dit: &MicroDiT, head: &EventHead| {
            sample_loss_and_grads(dit, head, &ex, &d, &cfg, 0)
                .unwrap()
                .loss
                .total
        };
        let mut pd = dit.clone();
        for i in 0..dit.params.len() {
            let orig = pd.params.data[i];
            pd.params.data[i] = orig + h;
            let up = total(&pd, &head);
            pd.params.data[i] = orig - h;
            let dn = total(&pd, &head);
            pd.params.data[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            let e = rel_err(fd, res.dit_grads.data[i]);
            assert!(
                e < 1e-4,
                "seed {seed} backbone param {i}: fd {fd} an {}",
                res.dit_grads.data[i]
            );
            worst = worst.max(e);
        }
        let mut ph = head.clone();
        for i in 0..head.params.len() {
            let orig = ph.params.data[i];
            ph.params.data[i] = orig + h;
            let up = total(&dit, &ph);
            ph.params.data[i] = orig - h;
            let dn = total(&dit, &ph);
            ph.params.data[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            let e = rel_err(fd, res.head_grads.data[i]);
            assert!(
                e < 1e-4,
                "seed {seed} head param {i}: fd {fd} an {}",
                res.head_grads.data[i]
            );
            worst = worst.max(e);
        }
    }
    assert!(worst < 1e-4);
}

#[test]
fn consistency_time_is_clipped_at_the_ends() {
    let (dit, head) = random_models(1);
    let ex = example(1);
    let cfg = LossConfig::default();
    for (t, delta) in [(1.0, 0.05), (0.0, -0.05), (0.4, 0.0)] {
        let r = sample_loss_and_grads(&dit, &head, &ex, &draws(1, t, delta), &cfg, 0).unwrap();
        assert_eq!(r.loss.cons, 0.0, "t {t} delta {delta}");
    }
    let r = sample_loss_and_grads(&dit, &head, &ex, &draws(1, 0.4, 0.05), &cfg, 0).unwrap();
    assert!(r.loss.cons > 0.0);
}

#[test]
fn dropped_events_mask_both_activities() {
    let (dit, head) = random_models(2);
    let ex = example(2);
    let cfg = LossConfig::default();
    let mut d = draws(2, 0.3, 0.03);
    d.drop_event = true;
    let r = sample_loss_and_grads(&dit, &head, &ex, &d, &cfg, 0).unwrap();
    let out = dit
        .forward(&d.z0.axpy(0.3, &ex.z1.sub(&d.z0)), &ex.y, 0.3)
        .unwrap();
    let mean_sq = out.v_hat.data.iter().map(|x| x * x).sum::<f64>() / out.v_hat.data.len() as f64;
    assert!((r.loss.real - mean_sq).abs() < 1e-12);
    assert_eq!(r.loss.cons, 0.0);
    assert!((r.loss.order - 2.0 * mean_sq).abs() < 1e-12);
    assert!(r.head_grads.data.iter().all(|&g| g == 0.0));
}

fn train_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        steps: 5,
        batch_size: 3,
        seed,
        ..TrainConfig::default()
    }
}

fn zero_impact_models(seed: u64) -> (MicroDiT, EventHead) {
    let mut dit = MicroDiT::new(micro()).unwrap();
    dit.init_zero_impact(seed);
    let mut head = EventHead::new(micro().d_model, 8);
    head.init_zero_impact(seed);
    (dit, head)
}

#[test]
fn zero_impact_init() {
    let (dit, head) = zero_impact_models(4);
    for seed in 0..5 {
        let ex = example(seed);
        let out = dit
            .forward(&video(micro().shape, seed + 7), &ex.y, 0.3)
            .unwrap();
        assert!(out.v_hat.data.iter().all(|&v| v == 0.0));
        assert!(head
            .activity(&out.final_tokens, 0.3)
            .unwrap()
            .iter()
            .all(|&a| a < 0.003));
        // The event terms vanish with a zero field, so the objective is the
        // base loss of v_hat = 0.
        let d = draws(seed, 0.5, 0.02);
        let r = sample_loss_and_grads(&dit, &head, &ex, &d, &LossConfig::default(), 0).unwrap();
        let base = loss_base(&LatentVideo::zeros(micro().shape), &d.z0, &ex.z1).unwrap();
        assert!((r.loss.total - base).abs() < 1e-6);
        assert_eq!(r.loss.base, base);
    }
    let (again, head2) = zero_impact_models(4);
    assert_eq!(dit.params, again.params);
    assert_eq!(head.params, head2.params);
}

#[test]
fn zero_lambda_frozen_head_matches_plain_flow_matching_bitwise() {
    let data: Vec<_> = (0..6).map(example).collect();
    let loss = LossConfig {
        lambda_real: 0.0,
        lambda_cons: 0.0,
        lambda_order: 0.0,
        ..LossConfig::default()
    };
    for init in ["zero_impact", "random"] {
        let (dit, head) = if init == "random" {
            random_models(3)
        } else {
            zero_impact_models(3)
        };
        let mut cfg = train_cfg(21);
        cfg.freeze_event_head = true;
        let mut a = Trainer::new(dit.clone(), head.clone(), cfg, loss).unwrap();
        let mut b = Trainer::new(dit, head.clone(), cfg, loss).unwrap();
        for _ in 0..5 {
            let ra = a.train_step(&data).unwrap();
            let lb = b.fm_train_step(&data).unwrap();
            assert_eq!(ra.loss.total, ra.loss.base);
            assert!((ra.loss.base - lb).abs() < 1e-12);
            assert_eq!(a.dit.params.data, b.dit.params.data, "{init}");
            assert_eq!(a.ema_dit.data, b.ema_dit.data);
        }
        assert_eq!(a.head.params, head.params);
    }
}

#[test]
fn full_dropout_gives_the_head_no_gradient() {
    let data: Vec<_> = (0..4).map(example).collect();
    let (dit, head) = random_models(5);
    let loss = LossConfig {
        p_event_dropout: 1.0,
        ..LossConfig::default()
    };
    let mut tr = Trainer::new(dit, head.clone(), train_cfg(2), loss).unwrap();
    for _ in 0..4 {
        let r = tr.train_step(&data).unwrap();
        assert_eq!(r.head_grad_norm, 0.0);
        assert_eq!(r.events_dropped, 3);
        assert_eq!(r.loss.cons, 0.0);
    }
    // Only decoupled weight decay touches the head: vectors stay put and
    // matrices shrink.
    for e in &head.params.entries {
        let before = &head.params.data[e.offset..e.offset + e.len];
        let after = &tr.head.params.data[e.offset..e.offset + e.len];
        if e.dims.len() == 1 {
            assert_eq!(before, after, "{}", e.name);
        } else {
            for (b, a) in before.iter().zip(after) {
                assert!(a.abs() <= b.abs());
            }
        }
    }
}

#[test]
fn training_reduces_the_loss_and_is_reproducible() {
    let data: Vec<_> = (0..4).map(example).collect();
    let run = || {
        let (dit, head) = zero_impact_models(6);
        let cfg = TrainConfig {
            batch_size: 4,
            seed: 8,
            p_uncond: 0.0,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(dit, head, cfg, LossConfig::default()).unwrap();
        let losses: Vec<f64> = (0..150)
            .map(|_| tr.train_step(&data).unwrap().loss.base)
            .collect();
        (losses, tr.dit.params.data.clone())
    };
    let (l1, p1) = run();
    let (l2, p2) = run();
    assert_eq!(p1, p2);
    assert_eq!(l1, l2);
    let head: f64 = l1[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = l1[130..].iter().sum::<f64>() / 20.0;
    assert!(tail < head, "loss went from {head} to {tail}");
}

#[test]
fn non_finite_loss_names_the_term() {
    let (mut dit, head) = random_models(1);
    let last = dit.params.len() - 1;
    dit.params.data[last] = f64::NAN;
    let r = sample_loss_and_grads(
        &dit,
        &head,
        &example(0),
        &draws(0, 0.5, 0.0),
        &LossConfig::default(),
        17,
    );
    match r {
        Err(EvdError::NonFinite { term, step }) => {
            assert_eq!(term, "base");
            assert_eq!(step, 17);
        }
        other => panic!(
            "expected a non-finite error, got {:?}",
            other.map(|r| r.loss)
        ),
    }
}

#[test]
fn invalid_configs_rejected() {
    let (dit, head) = random_models(0);
    let bad_loss = LossConfig {
        tau_on: 0.3,
        tau_off: 0.6,
        ..LossConfig::default()
    };
    assert!(Trainer::new(dit.clone(), head.clone(), TrainConfig::default(), bad_loss).is_err());
    let bad_train = TrainConfig {
        batch_size: 0,
        ..TrainConfig::default()
    };
    assert!(Trainer::new(dit, head, bad_train, LossConfig::default()).is_err());
}
