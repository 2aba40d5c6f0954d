use std::collections::BTreeMap;

use proptest::prelude::*;
use stochmech_core::phase_core::*;
use stochmech_core::sde_engine::step_symplectic_deterministic;

fn params(kv: &[(&str, f64)]) -> BTreeMap<String, f64> {
    kv.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Every catalog model with parameters drawn from `(a, b)` in `[0.3, 3]`.
fn catalog(a: f64, b: f64) -> Vec<HamiltonianModel> {
    vec![
        builtin_model("free_particle", &params(&[("m", a)])).unwrap(),
        builtin_model("harmonic", &params(&[("m", a), ("omega", b)])).unwrap(),
        builtin_model("inverted", &params(&[("m", a), ("lambda", b)])).unwrap(),
        builtin_model("pendulum", &params(&[("m", a), ("gl", b)])).unwrap(),
        builtin_model("double_well", &params(&[("m", a), ("lambda", b), ("well", 1.0)])).unwrap(),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn gradient_matches_central_differences(
        a in 0.3f64..3.0,
        b in 0.3f64..3.0,
        x in -3.0f64..3.0,
        p in -3.0f64..3.0,
    ) {
        let h = 1e-5;
        for model in catalog(a, b) {
            let s = PhaseState::new_1d(x, p);
            let (dhdx, dhdp) = evaluate_derivatives(&model, &s).unwrap();
            let e = |x: f64, p: f64| evaluate_energy(&model, &PhaseState::new_1d(x, p)).unwrap();
            let fd_x = (e(x + h, p) - e(x - h, p)) / (2.0 * h);
            let fd_p = (e(x, p + h) - e(x, p - h)) / (2.0 * h);
            // relative to the energy scale, so near-zero gradients are judged fairly
            let scale_x = dhdx[0].abs().max(e(x, 0.0).abs()).max(1.0);
            let scale_p = dhdp[0].abs().max(1.0);
            prop_assert!((dhdx[0] - fd_x).abs() <= 1e-6 * scale_x, "{} x: {} vs {}", model.name(), dhdx[0], fd_x);
            prop_assert!((dhdp[0] - fd_p).abs() <= 1e-6 * scale_p, "{} p: {} vs {}", model.name(), dhdp[0], fd_p);
        }
    }

    #[test]
    fn dispersion_product_is_exact(
        m in 1e-3f64..1e3,
        rate in 1e-3f64..1e3,
        hbar in 1e-6f64..10.0,
    ) {
        for name in ["harmonic", "inverted"] {
            let key = if name == "harmonic" { "omega" } else { "lambda" };
            let model = builtin_model(name, &params(&[("m", m), (key, rate)])).unwrap();
            let d = minimal_uncertainty_dispersions(&model, hbar).unwrap()[0];
            let target = hbar * hbar / 4.0;
            prop_assert!((d.var_x * d.var_p - target).abs() <= 4.0 * f64::EPSILON * target);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hessian_is_symmetric_and_matches_gradient(
        a in 0.3f64..3.0,
        b in 0.3f64..3.0,
        x in -3.0f64..3.0,
        x2 in -3.0f64..3.0,
    ) {
        let h = 1e-5;
        for model in catalog(a, b) {
            let s = PhaseState::new_1d(x, 0.0);
            let hb = evaluate_hessian(&model, &s).unwrap();
            prop_assert_eq!(&hb.axx, &hb.axx.transpose());
            prop_assert_eq!(&hb.bpp, &hb.bpp.transpose());
            prop_assert!(hb.cxp.iter().all(|&c| c == 0.0));
            let g = |x: f64| evaluate_derivatives(&model, &PhaseState::new_1d(x, 0.0)).unwrap().0[0];
            let fd = (g(x + h) - g(x - h)) / (2.0 * h);
            prop_assert!((hb.axx[(0, 0)] - fd).abs() <= 1e-5 * fd.abs().max(1.0));
            if model.is_linear() {
                let other = evaluate_hessian(&model, &PhaseState::new_1d(x2, 1.0)).unwrap();
                prop_assert_eq!(other, hb);
            }
        }
    }
}

fn windowed_mean_energy(model: &HamiltonianModel, start: &PhaseState, dt: f64, steps: usize, window: usize) -> (f64, f64) {
    let mut s = start.clone();
    let (mut first, mut last) = (0.0, 0.0);
    for k in 0..steps {
        let e = evaluate_energy(model, &s).unwrap();
        if k < window {
            first += e;
        }
        if k >= steps - window {
            last += e;
        }
        s = step_symplectic_deterministic(model, &s, dt).unwrap();
    }
    (first / window as f64, last / window as f64)
}

#[test]
fn quadratic_energy_does_not_drift_over_a_million_steps() {
    // ω = 2π makes one period exactly 1000 steps, so window means cancel the
    // bounded O(dt²) energy oscillation and leave only secular drift.
    let harmonic = builtin_model("harmonic", &params(&[("m", 1.0), ("omega", 2.0 * std::f64::consts::PI)])).unwrap();
    let (first, last) = windowed_mean_energy(&harmonic, &PhaseState::new_1d(1.0, 0.3), 1e-3, 1_000_000, 1000);
    assert!(((last - first) / first).abs() < 1e-8, "harmonic drift {}", (last - first) / first);

    let free = builtin_model("free_particle", &params(&[("m", 2.0)])).unwrap();
    let (first, last) = windowed_mean_energy(&free, &PhaseState::new_1d(0.0, 0.7), 1e-3, 1_000_000, 1);
    assert!(((last - first) / first).abs() < 1e-8);
}

#[test]
fn dof_replicates_modes() {
    let m = builtin_model("inverted", &params(&[("m", 2.0), ("lambda", 0.5), ("dof", 3.0)])).unwrap();
    assert_eq!(m.n(), 3);
    let s = PhaseState::new(vec![1.0, 2.0, 3.0], vec![0.0; 3], 0.0).unwrap();
    let e = evaluate_energy(&m, &s).unwrap();
    assert!((e + 0.5 * 2.0 * 0.25 * 14.0).abs() < 1e-12);
}
