use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use proptest::prelude::*;
use stochmech_core::phase_core::{builtin_model, HamiltonianModel, PhaseState};
use stochmech_core::sde_engine::{integrate_path, NoiseSpec, Scheme};
use stochmech_core::stability::*;

fn params(kv: &[(&str, f64)]) -> BTreeMap<String, f64> {
    kv.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn trajectory(model: &HamiltonianModel, start: PhaseState, horizon: f64, dt: f64) -> Vec<PhaseState> {
    integrate_path(model, &start, horizon, dt, &NoiseSpec::noiseless(0), Scheme::SplitStep, 0)
        .unwrap()
        .states
}

#[test]
fn inverted_tangent_matches_cosh_sinh() {
    let (m, lambda) = (1.5, 1.3);
    let inv = builtin_model("inverted", &params(&[("m", m), ("lambda", lambda)])).unwrap();
    let traj = trajectory(&inv, PhaseState::new_1d(0.2, -0.1), 1.0, 1e-4);
    let frame = propagate_tangent(&inv, &traj, &DMatrix::identity(2, 2)).unwrap();
    let (c, s) = (lambda.cosh(), lambda.sinh());
    let exact = DMatrix::from_row_slice(2, 2, &[c, s / (m * lambda), m * lambda * s, c]);
    for (got, want) in frame.iter().zip(exact.iter()) {
        assert!(((got - want) / want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn harmonic_tangent_returns_after_one_period() {
    let h = builtin_model("harmonic", &params(&[("m", 1.0), ("omega", 1.0)])).unwrap();
    let dt = 2.0 * PI / 20_000.0;
    let traj = trajectory(&h, PhaseState::new_1d(1.0, 0.0), 2.0 * PI, dt);
    let frame = propagate_tangent(&h, &traj, &DMatrix::identity(2, 2)).unwrap();
    assert!((frame - DMatrix::<f64>::identity(2, 2)).amax() < 1e-6);
}

#[test]
fn propagate_tangent_rejects_bad_input() {
    let h = builtin_model("harmonic", &params(&[("m", 1.0), ("omega", 1.0)])).unwrap();
    let traj = trajectory(&h, PhaseState::new_1d(1.0, 0.0), 1.0, 0.1);
    assert!(propagate_tangent(&h, &traj, &DMatrix::identity(3, 3)).is_err());
    assert!(propagate_tangent(&h, &traj[..1], &DMatrix::identity(2, 2)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn classification_scales_with_time_units(
        m in 0.1f64..10.0,
        k in 0.01f64..10.0,
        s in 0.05f64..20.0,
        kind in 0usize..3,
    ) {
        let a = match kind { 0 => 0.0, 1 => -k, _ => k };
        let base = VariationalMatrix::from_blocks(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, 1.0 / m),
        ).unwrap();
        // time → time/s multiplies the generator, hence both blocks, by s
        let scaled = VariationalMatrix::from_blocks(
            DMatrix::from_element(1, 1, s * a),
            DMatrix::from_element(1, 1, s / m),
        ).unwrap();
        let r0 = classify_modes(&base, DEFAULT_RATE_TOLERANCE).unwrap().modes[0];
        let r1 = classify_modes(&scaled, DEFAULT_RATE_TOLERANCE).unwrap().modes[0];
        prop_assert_eq!(r0.case, r1.case);
        prop_assert!((r1.rate - s * r0.rate).abs() <= 1e-12 * r1.rate.max(1.0));
    }

    #[test]
    fn coupled_classification_scales_with_time_units(
        k1 in 0.1f64..5.0,
        k2 in 0.1f64..5.0,
        c in -2.0f64..2.0,
        s in 0.1f64..10.0,
    ) {
        let a = DMatrix::from_row_slice(2, 2, &[-k1, c, c, k2]);
        let b = DMatrix::identity(2, 2);
        let base = classify_modes(&VariationalMatrix::from_blocks(a.clone(), b.clone()).unwrap(), 1e-10).unwrap();
        let scaled = classify_modes(&VariationalMatrix::from_blocks(a * s, b * s).unwrap(), 1e-10).unwrap();
        for (x, y) in base.modes.iter().zip(&scaled.modes) {
            prop_assert_eq!(x.case, y.case);
            prop_assert!((y.rate - s * x.rate).abs() <= 1e-9 * y.rate.max(1.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn lyapunov_spectrum_is_symmetric(
        which in 0usize..5,
        a in 0.5f64..2.0,
        b in 0.5f64..1.5,
        x in -1.0f64..1.0,
        p in -1.0f64..1.0,
    ) {
        let model = match which {
            0 => builtin_model("free_particle", &params(&[("m", a)])),
            1 => builtin_model("harmonic", &params(&[("m", a), ("omega", b)])),
            2 => builtin_model("inverted", &params(&[("m", a), ("lambda", b)])),
            3 => builtin_model("pendulum", &params(&[("m", a), ("gl", b)])),
            _ => builtin_model("double_well", &params(&[("m", a), ("lambda", b), ("well", 1.0)])),
        }.unwrap();
        let report = lyapunov_spectrum(&model, &PhaseState::new_1d(x, p), 100.0, 1e-3, 0.1).unwrap();
        prop_assert!(report.symmetry_defect() < 5e-3, "{}: {:?}", model.name(), report.spectrum);
        prop_assert_eq!(report.ks_entropy, ks_entropy(&report.spectrum));
    }
}

#[test]
fn lyapunov_rates_for_linear_models() {
    let inv = builtin_model("inverted", &params(&[("m", 1.0), ("lambda", 1.0)])).unwrap();
    let r = lyapunov_spectrum(&inv, &PhaseState::new_1d(0.0, 0.0), 20.0, 1e-3, 0.1).unwrap();
    assert!((r.spectrum[0] - 1.0).abs() < 0.01 && (r.spectrum[1] + 1.0).abs() < 0.01, "{:?}", r.spectrum);
    assert!((r.ks_entropy - r.spectrum[0]).abs() < 1e-15);

    for (name, kv) in [
        ("harmonic", vec![("m", 1.0), ("omega", 1.0)]),
        ("free_particle", vec![("m", 1.0)]),
    ] {
        let model = builtin_model(name, &params(&kv)).unwrap();
        let r = lyapunov_spectrum(&model, &PhaseState::new_1d(1.0, 0.5), 100.0, 1e-3, 0.1).unwrap();
        assert!(r.spectrum.iter().all(|l| l.abs() < 1e-3), "{name}: {:?}", r.spectrum);
        assert!(r.ks_entropy.abs() < 1e-3);
    }
}
