use evd_core::gating::{
    apply_schedule, combine_gate, gate_field, hysteresis_step, maybe_smooth, schedule_rho,
    smooth_activity, soft_gate, GateCombine, GateConfig, GateState,
};
use evd_core::latent::{LatentVideo, PatchSpec, Shape};
use evd_core::rng::{rng_from_seed, standard_normals};
use evd_core::tensor::sigmoid;
use proptest::prelude::*;

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn soft_gate_values() {
    let cfg = GateConfig::default();
    let g = soft_gate(&[0.5, 0.7, 0.3], &cfg);
    assert!((g[0] - 0.5).abs() < 1e-12);
    assert!((g[1] - logistic(2.4)).abs() < 1e-12);
    assert!((g[2] - logistic(-2.4)).abs() < 1e-12);
    assert!((g[1] - 0.9168).abs() < 1e-4);
    assert!((g[2] - 0.0832).abs() < 1e-4);
}

#[test]
fn hysteresis_examples() {
    let cfg = GateConfig::default();
    for prev in [0.0, 1.0] {
        let s = GateState { bin: vec![prev; 3] };
        let next = hysteresis_step(&[0.9, 0.1, 0.5], &s, &cfg).unwrap();
        assert_eq!(next.bin, vec![1.0, 0.0, prev]);
        assert_eq!(s.bin, vec![prev; 3]);
    }
    let s = GateState::new(4);
    assert_eq!(s.bin, vec![0.0; 4]);
    let edge = hysteresis_step(
        &[0.62, 0.38, 0.62, 0.38],
        &GateState {
            bin: vec![0.0, 1.0, 1.0, 0.0],
        },
        &cfg,
    )
    .unwrap();
    assert_eq!(edge.bin, vec![1.0, 0.0, 1.0, 0.0]);
}

#[test]
fn combine_examples() {
    let soft = soft_gate(&[0.7, 0.2, 0.9], &GateConfig::default());
    let off = GateState::new(3);
    assert_eq!(
        combine_gate(&soft, &off, GateCombine::Product).unwrap(),
        vec![0.0; 3]
    );
    let on = GateState { bin: vec![1.0; 3] };
    assert_eq!(
        combine_gate(&soft, &on, GateCombine::Product).unwrap(),
        soft
    );
    assert!((combine_gate(&soft, &on, GateCombine::Product).unwrap()[0] - 0.9168).abs() < 1e-4);
    assert_eq!(
        combine_gate(&soft, &on, GateCombine::Binary).unwrap(),
        vec![1.0; 3]
    );
    assert!(combine_gate(&soft, &GateState::new(2), GateCombine::Product).is_err());
}

#[test]
fn schedule_examples() {
    assert_eq!(schedule_rho(0.5, 0.6), 1.0);
    assert!((schedule_rho(0.8, 0.6) - 0.5).abs() < 1e-12);
    assert_eq!(schedule_rho(1.0, 0.6), 0.0);
    let g = [0.4, 0.0, 1.0];
    assert_eq!(apply_schedule(&g, 1.0), g.to_vec());
    assert_eq!(apply_schedule(&g, 0.0), vec![1.0; 3]);
    assert!((apply_schedule(&[0.4], 0.5)[0] - 0.7).abs() < 1e-15);
}

#[test]
fn smoothing_examples() {
    let grid = PatchSpec::new(1, 1, 1)
        .grid(Shape::new(2, 4, 5, 1))
        .unwrap();
    let c = vec![0.37; grid.tokens()];
    for v in smooth_activity(&c, grid).unwrap() {
        assert!((v - 0.37).abs() < 1e-15);
    }
    // Impulse in slice 1 at (2, 2): each neighbor gets 1 / (its in-bounds
    // neighborhood size), slice 0 untouched.
    let mut a = vec![0.0; grid.tokens()];
    a[grid.token(1, 2, 2)] = 1.0;
    let s = smooth_activity(&a, grid).unwrap();
    for tt in 0..2 {
        for h in 0..4usize {
            for w in 0..5usize {
                let want = if tt == 1 && h.abs_diff(2) <= 1 && w.abs_diff(2) <= 1 {
                    let rows = (h.saturating_sub(1)..=(h + 1).min(3)).count();
                    let cols = (w.saturating_sub(1)..=(w + 1).min(4)).count();
                    1.0 / (rows * cols) as f64
                } else {
                    0.0
                };
                assert!((s[grid.token(tt, h, w)] - want).abs() < 1e-15);
            }
        }
    }
    // Corner cells average over their four in-bounds neighbors.
    let mut a = vec![0.0; grid.tokens()];
    a[grid.token(0, 0, 0)] = 1.0;
    let s = smooth_activity(&a, grid).unwrap();
    assert!((s[grid.token(0, 0, 0)] - 0.25).abs() < 1e-15);
    assert!((s[grid.token(0, 1, 1)] - 1.0 / 9.0).abs() < 1e-15);
    assert!((s[grid.token(0, 0, 1)] - 1.0 / 6.0).abs() < 1e-15);

    let cfg = GateConfig {
        smoothing_enabled: false,
        ..GateConfig::default()
    };
    assert_eq!(maybe_smooth(&a, grid, &cfg).unwrap(), a);
    assert!(smooth_activity(&a[1..], grid).is_err());
}

#[test]
fn gate_field_examples() {
    let shape = Shape::new(2, 4, 4, 2);
    let spec = PatchSpec::new(1, 2, 2);
    let v = LatentVideo::from_vec(
        shape,
        standard_normals(&mut rng_from_seed(4), shape.numel()),
    )
    .unwrap();
    assert_eq!(gate_field(&v, &[1.0; 8], spec).unwrap(), v);
    assert_eq!(
        gate_field(&v, &[0.0; 8], spec).unwrap(),
        LatentVideo::zeros(shape)
    );
    assert!(gate_field(&v, &[1.0; 7], spec).is_err());
}

#[test]
fn invalid_band_rejected() {
    let cfg = GateConfig {
        tau_on: 0.3,
        tau_off: 0.6,
        ..GateConfig::default()
    };
    assert!(cfg.validate().is_err());
    assert!(GateConfig::default().validate().is_ok());
}

fn band() -> impl Strategy<Value = GateConfig> {
    (0.05f64..0.45, 0.05f64..0.45).prop_map(|(off, width)| GateConfig {
        tau_off: off,
        tau_on: (off + width).min(0.95),
        ..GateConfig::default()
    })
}

proptest! {
    #[test]
    fn hysteresis_flips_only_on_crossings(
        cfg in band(),
        seq in prop::collection::vec(prop::collection::vec(0.0f64..=1.0, 6), 1..40),
    ) {
        let mut state = GateState::new(6);
        for a in &seq {
            let next = hysteresis_step(a, &state, &cfg).unwrap();
            for i in 0..6 {
                prop_assert!(next.bin[i] == 0.0 || next.bin[i] == 1.0);
                if next.bin[i] != state.bin[i] {
                    if next.bin[i] == 1.0 {
                        prop_assert!(a[i] >= cfg.tau_on);
                    } else {
                        prop_assert!(a[i] <= cfg.tau_off);
                    }
                }
                if a[i] > cfg.tau_off && a[i] < cfg.tau_on {
                    prop_assert_eq!(next.bin[i], state.bin[i]);
                }
            }
            state = next;
        }
    }

    #[test]
    fn constant_in_band_never_flips(cfg in band(), frac in 0.01f64..0.99, start in prop::bool::ANY) {
        let a = cfg.tau_off + frac * (cfg.tau_on - cfg.tau_off);
        let init = if start { 1.0 } else { 0.0 };
        let mut state = GateState { bin: vec![init; 3] };
        for _ in 0..20 {
            state = hysteresis_step(&[a; 3], &state, &cfg).unwrap();
        }
        prop_assert_eq!(state.bin, vec![init; 3]);
    }

    #[test]
    fn combined_gate_is_bounded_and_monotone(
        a in prop::collection::vec(0.0f64..=1.0, 8),
        bump in prop::collection::vec(0.0f64..0.5, 8),
        bits in prop::collection::vec(prop::bool::ANY, 8),
    ) {
        let cfg = GateConfig::default();
        let state = GateState { bin: bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect() };
        let hi: Vec<f64> = a.iter().zip(&bump).map(|(x, d)| (x + d).min(1.0)).collect();
        let g = combine_gate(&soft_gate(&a, &cfg), &state, GateCombine::Product).unwrap();
        let g_hi = combine_gate(&soft_gate(&hi, &cfg), &state, GateCombine::Product).unwrap();
        for i in 0..8 {
            prop_assert!((0.0..=1.0).contains(&g[i]));
            if state.bin[i] == 0.0 {
                prop_assert_eq!(g[i], 0.0);
            }
            prop_assert!(g_hi[i] >= g[i]);
        }
    }

    #[test]
    fn schedule_moves_toward_ones(g in prop::collection::vec(0.0f64..=1.0, 5), rho in 0.0f64..=1.0) {
        let s = apply_schedule(&g, rho);
        for i in 0..5 {
            prop_assert!((s[i] - g[i] - (1.0 - rho) * (1.0 - g[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn soft_gate_matches_logistic(a in 0.0f64..=1.0, beta in 0.5f64..30.0) {
        let cfg = GateConfig { beta, ..GateConfig::default() };
        let g = soft_gate(&[a], &cfg)[0];
        prop_assert!((g - sigmoid(beta * (a - 0.5))).abs() < 1e-15);
        prop_assert!((g - logistic(beta * (a - 0.5))).abs() < 1e-12);
    }
}
