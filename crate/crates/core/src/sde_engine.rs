//! Stochastic Hamilton equations
//!
//! ```text
//! dxᵢ =  ∂H/∂pᵢ dt + σxᵢ dw_x
//! dpᵢ = −∂H/∂xᵢ dt + σpᵢ dw_p,   σx = √(ħ/2m),  σp = √(ħ m λ² / 2)
//! ```
//!
//! with the noise switched on per mode by a [`Gating`] policy. The noise is
//! additive for linear models, so Itô and Stratonovich readings coincide and
//! no Milstein correction is needed.
//!
//! Each path draws from its own ChaCha stream selected by
//! `(master_seed, path_index)`, so ensembles are reproducible regardless of
//! scheduling.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::phase_core::{HamiltonianModel, PhaseState};
use crate::stability::{classify_block, StabilityCase, DEFAULT_RATE_TOLERANCE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Gating {
    /// Noise only on locally unstable modes.
    #[default]
    UnstableOnly,
    /// Coordinate noise on every mode, momentum noise on unstable modes.
    AllOn,
    Off,
}

impl Gating {
    pub fn as_str(&self) -> &'static str {
        match self {
            Gating::UnstableOnly => "unstable_only",
            Gating::AllOn => "all_on",
            Gating::Off => "off",
        }
    }
}

impl fmt::Display for Gating {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Gating {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unstable_only" => Ok(Gating::UnstableOnly),
            "all_on" => Ok(Gating::AllOn),
            "off" => Ok(Gating::Off),
            other => Err(Error::InvalidArgument(format!("unknown gating `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub hbar_eff: f64,
    pub gating: Gating,
    pub master_seed: u64,
    pub rate_tolerance: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            hbar_eff: 1.0,
            gating: Gating::UnstableOnly,
            master_seed: 42,
            rate_tolerance: DEFAULT_RATE_TOLERANCE,
        }
    }
}

impl NoiseSpec {
    pub fn new(hbar_eff: f64, gating: Gating, master_seed: u64) -> Result<Self> {
        let spec = Self {
            hbar_eff,
            gating,
            master_seed,
            ..Self::default()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn noiseless(master_seed: u64) -> Self {
        Self {
            hbar_eff: 0.0,
            gating: Gating::Off,
            master_seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.hbar_eff >= 0.0 && self.hbar_eff.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "hbar_eff must be finite and non-negative, got {}",
                self.hbar_eff
            )));
        }
        if !(self.rate_tolerance > 0.0) {
            return Err(Error::InvalidArgument("rate_tolerance must be positive".into()));
        }
        Ok(())
    }

    pub fn is_noiseless(&self) -> bool {
        self.gating == Gating::Off || self.hbar_eff == 0.0
    }
}

/// Per-mode `(σx, σp)` at `state`.
pub fn noise_amplitudes(
    model: &HamiltonianModel,
    state: &PhaseState,
    spec: &NoiseSpec,
) -> Result<Vec<(f64, f64)>> {
    model.check_dim(state)?;
    spec.validate()?;
    let mut out = vec![(0.0, 0.0); model.n()];
    fill_amplitudes(model, &state.x, spec, &mut out);
    Ok(out)
}

pub(crate) fn fill_amplitudes(
    model: &HamiltonianModel,
    x: &[f64],
    spec: &NoiseSpec,
    out: &mut [(f64, f64)],
) {
    if spec.is_noiseless() {
        out.fill((0.0, 0.0));
        return;
    }
    let hbar = spec.hbar_eff;
    for (i, (mode, slot)) in model.modes().iter().zip(out.iter_mut()).enumerate() {
        let m = mode.mass;
        let (case, lambda) =
            classify_block(-model.curvature(i, x[i]), 1.0 / m, spec.rate_tolerance);
        let unstable = case == StabilityCase::Unstable;
        let sigma_x = if unstable || spec.gating == Gating::AllOn {
            (hbar / (2.0 * m)).sqrt()
        } else {
            0.0
        };
        let sigma_p = if unstable {
            (0.5 * hbar * m * lambda * lambda).sqrt()
        } else {
            0.0
        };
        *slot = (sigma_x, sigma_p);
    }
}

/// Wiener increments for one step: one x-channel and one p-channel per mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Increments {
    pub dw_x: Vec<f64>,
    pub dw_p: Vec<f64>,
}

impl Increments {
    pub fn zeros(n: usize) -> Self {
        Self {
            dw_x: vec![0.0; n],
            dw_p: vec![0.0; n],
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.dw_x.len() != n || self.dw_p.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: self.dw_x.len().min(self.dw_p.len()),
            });
        }
        Ok(())
    }
}

/// Stream purposes; each gets an independent key so initial-condition draws
/// never shift the increment sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamPurpose {
    Increments,
    InitialCondition,
    Sampling,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based stream selection: key from `(master_seed, purpose)`, ChaCha
/// stream id from the path index.
pub fn path_rng(master_seed: u64, path_index: u64, purpose: StreamPurpose) -> ChaCha8Rng {
    let tag = match purpose {
        StreamPurpose::Increments => 0x1u64,
        StreamPurpose::InitialCondition => 0x2,
        StreamPurpose::Sampling => 0x3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(master_seed ^ splitmix64(tag)));
    rng.set_stream(path_index);
    rng
}

/// Gaussian increments with `⟨dw⟩ = 0`, `⟨dw²⟩ = dt` for one path.
///
/// Draw order is step-major, then x-channels, then p-channels, so a given
/// `(seed, path, step, channel)` always yields the same value.
pub struct WienerIncrementStream {
    rng: ChaCha8Rng,
    channels: usize,
    sqrt_dt: f64,
    step: u64,
}

impl WienerIncrementStream {
    pub fn new(master_seed: u64, path_index: u64, modes: usize, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        Ok(Self {
            rng: path_rng(master_seed, path_index, StreamPurpose::Increments),
            channels: 2 * modes,
            sqrt_dt: dt.sqrt(),
            step: 0,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn fill(&mut self, inc: &mut Increments) {
        for v in inc.dw_x.iter_mut().chain(inc.dw_p.iter_mut()) {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            *v = self.sqrt_dt * z;
        }
        self.step += 1;
    }

    pub fn next_increments(&mut self) -> Increments {
        let mut inc = Increments::zeros(self.channels / 2);
        self.fill(&mut inc);
        inc
    }
}

fn check_step(model: &HamiltonianModel, state: &PhaseState, dt: f64) -> Result<()> {
    model.check_dim(state)?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    Ok(())
}

fn finite_or_err(state: PhaseState) -> Result<PhaseState> {
    if state.is_finite() {
        Ok(state)
    } else {
        Err(Error::NonFiniteState { t: state.t })
    }
}

/// Kick-drift-kick leapfrog, in place.
pub(crate) fn leapfrog_in_place(model: &HamiltonianModel, x: &mut [f64], p: &mut [f64], dt: f64) {
    let half = 0.5 * dt;
    for (i, mode) in model.modes().iter().enumerate() {
        p[i] += half * model.force(i, x[i]);
        x[i] += dt * p[i] / mode.mass;
        p[i] += half * model.force(i, x[i]);
    }
}

fn add_noise(x: &mut [f64], p: &mut [f64], sigma: &[(f64, f64)], inc: &Increments) {
    for i in 0..x.len() {
        let (sx, sp) = sigma[i];
        if sx != 0.0 {
            x[i] += sx * inc.dw_x[i];
        }
        if sp != 0.0 {
            p[i] += sp * inc.dw_p[i];
        }
    }
}

pub fn step_symplectic_deterministic(
    model: &HamiltonianModel,
    state: &PhaseState,
    dt: f64,
) -> Result<PhaseState> {
    check_step(model, state, dt)?;
    let mut next = state.clone();
    leapfrog_in_place(model, &mut next.x, &mut next.p, dt);
    next.t += dt;
    finite_or_err(next)
}

pub fn step_euler_maruyama(
    model: &HamiltonianModel,
    state: &PhaseState,
    dt: f64,
    increments: &Increments,
    spec: &NoiseSpec,
) -> Result<PhaseState> {
    check_step(model, state, dt)?;
    increments.check(model.n())?;
    let mut sigma = vec![(0.0, 0.0); model.n()];
    fill_amplitudes(model, &state.x, spec, &mut sigma);
    let mut next = state.clone();
    euler_maruyama_in_place(model, &mut next.x, &mut next.p, dt);
    add_noise(&mut next.x, &mut next.p, &sigma, increments);
    next.t += dt;
    finite_or_err(next)
}

fn euler_maruyama_in_place(model: &HamiltonianModel, x: &mut [f64], p: &mut [f64], dt: f64) {
    for (i, mode) in model.modes().iter().enumerate() {
        let vx = p[i] / mode.mass;
        let fp = model.force(i, x[i]);
        x[i] += vx * dt;
        p[i] += fp * dt;
    }
}

/// Predictor-corrector on the drift; the diffusion term, evaluated at the
/// start of the step, enters both stages once.
pub fn step_stochastic_heun(
    model: &HamiltonianModel,
    state: &PhaseState,
    dt: f64,
    increments: &Increments,
    spec: &NoiseSpec,
) -> Result<PhaseState> {
    check_step(model, state, dt)?;
    increments.check(model.n())?;
    let mut sigma = vec![(0.0, 0.0); model.n()];
    fill_amplitudes(model, &state.x, spec, &mut sigma);
    let mut next = state.clone();
    heun_in_place(model, &mut next.x, &mut next.p, dt, &sigma, increments);
    next.t += dt;
    finite_or_err(next)
}

fn heun_in_place(
    model: &HamiltonianModel,
    x: &mut [f64],
    p: &mut [f64],
    dt: f64,
    sigma: &[(f64, f64)],
    inc: &Increments,
) {
    for (i, mode) in model.modes().iter().enumerate() {
        let (sx, sp) = sigma[i];
        let noise_x = if sx != 0.0 { sx * inc.dw_x[i] } else { 0.0 };
        let noise_p = if sp != 0.0 { sp * inc.dw_p[i] } else { 0.0 };
        let vx0 = p[i] / mode.mass;
        let fp0 = model.force(i, x[i]);
        let x_pred = x[i] + vx0 * dt + noise_x;
        let p_pred = p[i] + fp0 * dt + noise_p;
        let vx1 = p_pred / mode.mass;
        let fp1 = model.force(i, x_pred);
        x[i] += 0.5 * (vx0 + vx1) * dt;
        p[i] += 0.5 * (fp0 + fp1) * dt;
        if sx != 0.0 {
            x[i] += noise_x;
        }
        if sp != 0.0 {
            p[i] += noise_p;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Scheme {
    /// Leapfrog drift followed by the additive noise kick.
    #[default]
    SplitStep,
    EulerMaruyama,
    Heun,
}

impl Scheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::SplitStep => "split_step",
            Scheme::EulerMaruyama => "euler_maruyama",
            Scheme::Heun => "heun",
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "split_step" => Ok(Scheme::SplitStep),
            "euler_maruyama" => Ok(Scheme::EulerMaruyama),
            "heun" => Ok(Scheme::Heun),
            other => Err(Error::InvalidArgument(format!("unknown scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<PhaseState>,
    pub dt: f64,
    pub model_name: String,
    pub spec: NoiseSpec,
    pub scheme: Scheme,
    pub path_index: u64,
    /// Set when the path overflowed; `states` then ends at the last finite state.
    pub truncated: bool,
}

pub(crate) fn step_count(horizon: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0 && dt.is_finite()) || !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "need dt > 0 and horizon ≥ 0, got dt = {dt}, horizon = {horizon}"
        )));
    }
    let k = (horizon / dt).round();
    if (k * dt - horizon).abs() > 1e-9 * horizon.max(dt) {
        return Err(Error::InvalidArgument(format!(
            "horizon {horizon} is not an integer multiple of dt {dt}"
        )));
    }
    Ok(k as usize)
}

/// Runs one path, calling `observe(step, state)` at step 0 and after every
/// step. Returns the index of the first non-finite step, if any.
///
/// A noiseless spec reduces every scheme to the deterministic leapfrog.
pub(crate) fn run_path<F>(
    model: &HamiltonianModel,
    initial: &PhaseState,
    steps: usize,
    dt: f64,
    spec: &NoiseSpec,
    scheme: Scheme,
    path_index: u64,
    mut observe: F,
) -> Result<Option<usize>>
where
    F: FnMut(usize, &PhaseState),
{
    model.check_dim(initial)?;
    spec.validate()?;
    let n = model.n();
    let mut state = initial.clone();
    model.normalize(&mut state);
    observe(0, &state);

    let t0 = initial.t;
    if spec.is_noiseless() {
        for k in 1..=steps {
            leapfrog_in_place(model, &mut state.x, &mut state.p, dt);
            model.normalize(&mut state);
            state.t = t0 + k as f64 * dt;
            if !state.is_finite() {
                return Ok(Some(k));
            }
            observe(k, &state);
        }
        return Ok(None);
    }

    let mut stream = WienerIncrementStream::new(spec.master_seed, path_index, n, dt)?;
    let mut inc = Increments::zeros(n);
    let mut sigma = vec![(0.0, 0.0); n];
    for k in 1..=steps {
        stream.fill(&mut inc);
        fill_amplitudes(model, &state.x, spec, &mut sigma);
        match scheme {
            Scheme::SplitStep => {
                leapfrog_in_place(model, &mut state.x, &mut state.p, dt);
                add_noise(&mut state.x, &mut state.p, &sigma, &inc);
            }
            Scheme::EulerMaruyama => {
                euler_maruyama_in_place(model, &mut state.x, &mut state.p, dt);
                add_noise(&mut state.x, &mut state.p, &sigma, &inc);
            }
            Scheme::Heun => heun_in_place(model, &mut state.x, &mut state.p, dt, &sigma, &inc),
        }
        model.normalize(&mut state);
        state.t = t0 + k as f64 * dt;
        if !state.is_finite() {
            return Ok(Some(k));
        }
        observe(k, &state);
    }
    Ok(None)
}

pub fn integrate_path(
    model: &HamiltonianModel,
    initial: &PhaseState,
    horizon: f64,
    dt: f64,
    spec: &NoiseSpec,
    scheme: Scheme,
    path_index: u64,
) -> Result<Trajectory> {
    let steps = step_count(horizon, dt)?;
    let mut states = Vec::with_capacity(steps + 1);
    let truncated = run_path(model, initial, steps, dt, spec, scheme, path_index, |_, s| {
        states.push(s.clone())
    })?;
    Ok(Trajectory {
        states,
        dt,
        model_name: model.name().to_string(),
        spec: *spec,
        scheme,
        path_index,
        truncated: truncated.is_some(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase_core::builtin_model;
    use std::collections::BTreeMap;

    fn model(name: &str, kv: &[(&str, f64)]) -> HamiltonianModel {
        let params: BTreeMap<String, f64> = kv.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        builtin_model(name, &params).unwrap()
    }

    fn spec(hbar: f64, gating: Gating) -> NoiseSpec {
        NoiseSpec::new(hbar, gating, 7).unwrap()
    }

    #[test]
    fn amplitude_examples() {
        let inv = model("inverted", &[("m", 1.0), ("lambda", 2.0)]);
        let s = PhaseState::new_1d(0.0, 0.0);
        let a = noise_amplitudes(&inv, &s, &spec(1.0, Gating::UnstableOnly)).unwrap();
        assert!((a[0].0 - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((a[0].1 - 2f64.sqrt()).abs() < 1e-15);

        let h = model("harmonic", &[("m", 1.0), ("omega", 1.0)]);
        assert_eq!(
            noise_amplitudes(&h, &s, &spec(1.0, Gating::UnstableOnly)).unwrap(),
            vec![(0.0, 0.0)]
        );
        let all = noise_amplitudes(&h, &s, &spec(1.0, Gating::AllOn)).unwrap();
        assert!(all[0].0 > 0.0 && all[0].1 == 0.0);

        for gating in [Gating::UnstableOnly, Gating::AllOn, Gating::Off] {
            assert_eq!(
                noise_amplitudes(&inv, &s, &spec(0.0, gating)).unwrap(),
                vec![(0.0, 0.0)]
            );
        }
        assert_eq!(
            noise_amplitudes(&inv, &s, &spec(1.0, Gating::Off)).unwrap(),
            vec![(0.0, 0.0)]
        );
    }

    #[test]
    fn pendulum_noise_is_local() {
        let pend = model("pendulum", &[("m", 1.0), ("gl", 1.0)]);
        let sp = spec(1.0, Gating::UnstableOnly);
        let bottom = noise_amplitudes(&pend, &PhaseState::new_1d(0.0, 0.0), &sp).unwrap();
        assert_eq!(bottom, vec![(0.0, 0.0)]);
        let top = noise_amplitudes(&pend, &PhaseState::new_1d(std::f64::consts::PI, 0.0), &sp)
            .unwrap();
        assert!((top[0].1 - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn euler_maruyama_examples() {
        let free = model("free_particle", &[("m", 1.0)]);
        let zero = Increments::zeros(1);
        let s = step_euler_maruyama(
            &free,
            &PhaseState::new_1d(0.0, 1.0),
            0.1,
            &zero,
            &spec(0.0, Gating::UnstableOnly),
        )
        .unwrap();
        assert_eq!((s.x[0], s.p[0]), (0.1, 1.0));

        let inc = Increments {
            dw_x: vec![0.2],
            dw_p: vec![0.0],
        };
        let s = step_euler_maruyama(
            &free,
            &PhaseState::new_1d(0.0, 0.0),
            0.1,
            &inc,
            &spec(2.0, Gating::AllOn),
        )
        .unwrap();
        assert!((s.x[0] - 0.2).abs() < 1e-15);

        let inv = model("inverted", &[("m", 1.0), ("lambda", 1.0)]);
        let s = step_euler_maruyama(
            &inv,
            &PhaseState::new_1d(1.0, 0.0),
            0.01,
            &zero,
            &spec(1.0, Gating::UnstableOnly),
        )
        .unwrap();
        assert_eq!(s.x[0], 1.0);
        assert!((s.p[0] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn heun_rejects_zero_dt() {
        let free = model("free_particle", &[("m", 1.0)]);
        let r = step_stochastic_heun(
            &free,
            &PhaseState::new_1d(0.0, 1.0),
            0.0,
            &Increments::zeros(1),
            &NoiseSpec::default(),
        );
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn heun_matches_euler_for_free_particle() {
        let free = model("free_particle", &[("m", 1.3)]);
        let sp = NoiseSpec::default();
        let zero = Increments::zeros(1);
        let mut a = PhaseState::new_1d(0.3, -0.7);
        let mut b = a.clone();
        for dt in [0.1, 0.37, 1e-3, 2.5] {
            a = step_euler_maruyama(&free, &a, dt, &zero, &sp).unwrap();
            b = step_stochastic_heun(&free, &b, dt, &zero, &sp).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn heun_one_period_rotation() {
        // RK2 phase error per step is dt³/6, so one period accumulates
        // 2π·dt²/6 ≈ 1.05e-6 in p; x is second order smaller.
        let h = model("harmonic", &[("m", 1.0), ("omega", 1.0)]);
        let steps = 6283;
        let dt = 2.0 * std::f64::consts::PI / steps as f64;
        let off = NoiseSpec::noiseless(0);
        let zero = Increments::zeros(1);
        let mut s = PhaseState::new_1d(1.0, 0.0);
        for _ in 0..steps {
            s = step_stochastic_heun(&h, &s, dt, &zero, &off).unwrap();
        }
        assert!((s.x[0] - 1.0).abs() < 1e-6);
        let phase_bound = 2.0 * std::f64::consts::PI * dt * dt / 6.0;
        assert!(s.p[0].abs() < 1.01 * phase_bound, "p = {}", s.p[0]);
    }

    #[test]
    fn leapfrog_examples() {
        let free = model("free_particle", &[("m", 1.0)]);
        let s = step_symplectic_deterministic(&free, &PhaseState::new_1d(0.0, 1.0), 0.5).unwrap();
        assert_eq!((s.x[0], s.p[0]), (0.5, 1.0));
        assert!(step_symplectic_deterministic(&free, &s, -1.0).is_err());
    }

    #[test]
    fn pendulum_near_separatrix_stays_finite() {
        let pend = model("pendulum", &[("m", 1.0), ("gl", 1.0)]);
        let mut s = PhaseState::new_1d(std::f64::consts::PI - 1e-9, 0.0);
        let e0 = crate::phase_core::evaluate_energy(&pend, &s).unwrap();
        for _ in 0..10_000 {
            s = step_symplectic_deterministic(&pend, &s, 1e-3).unwrap();
            pend.normalize(&mut s);
            assert!(s.is_finite());
        }
        let e1 = crate::phase_core::evaluate_energy(&pend, &s).unwrap();
        assert!((e1 - e0).abs() < 1e-6);
    }

    #[test]
    fn wiener_stream_is_addressable() {
        let mut a = WienerIncrementStream::new(9, 3, 2, 0.01).unwrap();
        let mut b = WienerIncrementStream::new(9, 3, 2, 0.01).unwrap();
        let mut c = WienerIncrementStream::new(9, 4, 2, 0.01).unwrap();
        for _ in 0..5 {
            let ia = a.next_increments();
            assert_eq!(ia, b.next_increments());
            assert_ne!(ia, c.next_increments());
        }
        assert_eq!(a.step_index(), 5);
        assert_eq!(a.channels(), 4);
    }

    #[test]
    fn overflow_truncates() {
        let inv = model("inverted", &[("m", 1.0), ("lambda", 50.0)]);
        let traj = integrate_path(
            &inv,
            &PhaseState::new_1d(1.0, 0.0),
            20.0,
            1e-3,
            &NoiseSpec::default(),
            Scheme::SplitStep,
            0,
        )
        .unwrap();
        assert!(traj.truncated);
        assert!(traj.states.iter().all(PhaseState::is_finite));
        assert!(traj.states.len() < 20_001);
    }

    #[test]
    fn horizon_must_be_whole_steps() {
        let free = model("free_particle", &[("m", 1.0)]);
        let r = integrate_path(
            &free,
            &PhaseState::new_1d(0.0, 0.0),
            1.0005,
            1e-3,
            &NoiseSpec::default(),
            Scheme::SplitStep,
            0,
        );
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }
}
