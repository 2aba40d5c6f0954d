use std::collections::BTreeMap;

use proptest::prelude::*;
use stochmech_core::ensemble_stats::{run_ensemble, EnsembleConfig, InitialDistribution};
use stochmech_core::phase_core::{builtin_model, HamiltonianModel, PhaseState};
use stochmech_core::sde_engine::*;

fn params(kv: &[(&str, f64)]) -> BTreeMap<String, f64> {
    kv.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn catalog() -> Vec<HamiltonianModel> {
    vec![
        builtin_model("free_particle", &params(&[("m", 1.3)])).unwrap(),
        builtin_model("harmonic", &params(&[("m", 0.7), ("omega", 2.0)])).unwrap(),
        builtin_model("inverted", &params(&[("m", 1.0), ("lambda", 0.8)])).unwrap(),
        builtin_model("pendulum", &params(&[("m", 1.0), ("gl", 1.0)])).unwrap(),
        builtin_model("double_well", &params(&[("m", 1.0), ("lambda", 1.0), ("well", 1.5)])).unwrap(),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gating_off_is_bit_identical_to_leapfrog(
        x in -2.0f64..2.0,
        p in -2.0f64..2.0,
        seed in any::<u64>(),
        scheme in prop_oneof![Just(Scheme::SplitStep), Just(Scheme::EulerMaruyama), Just(Scheme::Heun)],
    ) {
        for model in catalog() {
            let spec = NoiseSpec::new(1.0, Gating::Off, seed).unwrap();
            let start = PhaseState::new_1d(x, p);
            let traj = integrate_path(&model, &start, 2.0, 0.01, &spec, scheme, 3).unwrap();
            let mut s = start.clone();
            model.normalize(&mut s);
            for (k, got) in traj.states.iter().enumerate().skip(1) {
                s = step_symplectic_deterministic(&model, &s, 0.01).unwrap();
                model.normalize(&mut s);
                prop_assert_eq!(&got.x, &s.x, "{} step {}", model.name(), k);
                prop_assert_eq!(&got.p, &s.p);
            }
        }
    }
}

#[test]
fn wiener_increment_moments() {
    let dt = 0.01;
    let mut stream = WienerIncrementStream::new(11, 0, 1, dt).unwrap();
    let n = 1_000_000;
    let (mut sum, mut sum2) = (0.0, 0.0);
    for _ in 0..n / 2 {
        let inc = stream.next_increments();
        for v in [inc.dw_x[0], inc.dw_p[0]] {
            sum += v;
            sum2 += v * v;
        }
    }
    let mean = sum / n as f64;
    let var = sum2 / n as f64 - mean * mean;
    assert!(mean.abs() < 4.0 * dt.sqrt() / (n as f64).sqrt(), "mean {mean}");
    assert!((var / dt - 1.0).abs() < 0.01, "var/dt {}", var / dt);
}

#[test]
fn paths_depend_only_on_seed_and_index() {
    let inv = builtin_model("inverted", &params(&[("m", 1.0), ("lambda", 1.0)])).unwrap();
    let spec = NoiseSpec::new(1.0, Gating::UnstableOnly, 99).unwrap();
    let start = PhaseState::new_1d(0.0, 0.0);
    let run = |i: u64| integrate_path(&inv, &start, 1.0, 1e-3, &spec, Scheme::SplitStep, i).unwrap().states;
    let forward: Vec<_> = (0..8).map(run).collect();
    let mut backward: Vec<_> = (0..8).rev().map(|i| (i, run(i))).collect();
    backward.sort_by_key(|(i, _)| *i);
    for (a, (_, b)) in forward.iter().zip(&backward) {
        assert_eq!(a, b);
    }
    assert_ne!(forward[0], forward[1]);

    let other_seed = NoiseSpec { master_seed: 100, ..spec };
    let moved = integrate_path(&inv, &start, 1.0, 1e-3, &other_seed, Scheme::SplitStep, 0).unwrap();
    assert_ne!(moved.states, forward[0]);
}

#[test]
fn ensembles_are_identical_across_thread_counts() {
    let inv = builtin_model("inverted", &params(&[("m", 1.0), ("lambda", 1.0)])).unwrap();
    let init = InitialDistribution::gaussian(PhaseState::new_1d(0.0, 0.0), vec![0.1], vec![0.1]).unwrap();
    let spec = NoiseSpec::new(1.0, Gating::UnstableOnly, 5).unwrap();
    let config = EnsembleConfig::new(1000, 1.0, 1e-2);
    let with = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_ensemble(&inv, &init, &config, &spec).unwrap())
    };
    assert_eq!(with(1), with(4));
}

#[test]
fn euler_maruyama_and_heun_agree_on_variance() {
    let config = |scheme| EnsembleConfig::new(10_000, 1.0, 1e-3).with_scheme(scheme);
    let init = InitialDistribution::point(PhaseState::new_1d(0.0, 0.0));
    let spec = NoiseSpec::new(1.0, Gating::AllOn, 21).unwrap();
    for (name, kv) in [
        ("free_particle", vec![("m", 1.0)]),
        ("harmonic", vec![("m", 1.0), ("omega", 1.0)]),
    ] {
        let model = builtin_model(name, &params(&kv)).unwrap();
        let em = run_ensemble(&model, &init, &config(Scheme::EulerMaruyama), &spec).unwrap();
        let heun = run_ensemble(&model, &init, &config(Scheme::Heun), &spec).unwrap();
        let k = em.times.len() - 1;
        let (a, b) = (em.modes[0].var_x[k], heun.modes[0].var_x[k]);
        // same increments, so the difference is not two independent errors;
        // the combined SE is still the conservative yardstick
        let se = (a.se * a.se + b.se * b.se).sqrt();
        assert!((a.value - b.value).abs() < 2.0 * se, "{name}: {} vs {}", a.value, b.value);
    }
}
