//! Linear stability: variational matrices, the free/oscillatory/unstable mode
//! split, tangent-space propagation and Lyapunov spectra.
//!
//! Tangent vectors and frames use `(δx, δp)` row ordering: rows `0..n` are
//! coordinate variations, rows `n..2n` momentum variations. The
//! [`VariationalMatrix`] itself keeps the `(δp, δx)` block layout
//! `[[0, A], [B, 0]]`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::phase_core::{evaluate_hessian, HamiltonianModel, PhaseState};
use crate::sde_engine::leapfrog_in_place;

pub const DEFAULT_RATE_TOLERANCE: f64 = 1e-10;

/// Running estimates closer than this (relative to `max(|λ|, 1)`) count as converged.
pub const CONVERGENCE_TOLERANCE: f64 = 1e-3;

/// `[[0, A], [B, 0]]` acting on `(δp, δx)` with `A = −∂²H/∂x²`, `B = ∂²H/∂p²`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalMatrix {
    n: usize,
    matrix: DMatrix<f64>,
}

impl VariationalMatrix {
    pub fn from_blocks(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        for m in [&a, &b] {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: m.ncols(),
                });
            }
        }
        let mut matrix = DMatrix::zeros(2 * n, 2 * n);
        matrix.view_mut((0, n), (n, n)).copy_from(&a);
        matrix.view_mut((n, 0), (n, n)).copy_from(&b);
        Ok(Self { n, matrix })
    }

    /// Wraps a full `2n × 2n` matrix; diagonal blocks are checked by the classifier.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        let dim = matrix.nrows();
        if dim == 0 || dim % 2 != 0 || matrix.ncols() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim.max(2),
                got: matrix.ncols(),
            });
        }
        Ok(Self { n: dim / 2, matrix })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn a(&self) -> DMatrix<f64> {
        self.matrix.view((0, self.n), (self.n, self.n)).into_owned()
    }

    pub fn b(&self) -> DMatrix<f64> {
        self.matrix.view((self.n, 0), (self.n, self.n)).into_owned()
    }

    /// Generator of the tangent flow in `(δx, δp)` ordering: `[[0, B], [A, 0]]`.
    pub fn generator_xp(&self) -> DMatrix<f64> {
        let n = self.n;
        let mut g = DMatrix::zeros(2 * n, 2 * n);
        g.view_mut((0, n), (n, n)).copy_from(&self.b());
        g.view_mut((n, 0), (n, n)).copy_from(&self.a());
        g
    }

    fn diagonal_blocks_vanish(&self) -> bool {
        let n = self.n;
        self.matrix.view((0, 0), (n, n)).iter().all(|&v| v == 0.0)
            && self.matrix.view((n, n), (n, n)).iter().all(|&v| v == 0.0)
    }
}

pub fn linearize(model: &HamiltonianModel, state: &PhaseState) -> Result<VariationalMatrix> {
    let hess = evaluate_hessian(model, state)?;
    if hess.cxp.iter().any(|&v| v != 0.0) {
        return Err(Error::NonSeparableModel);
    }
    VariationalMatrix::from_blocks(-hess.axx, hess.bpp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StabilityCase {
    /// Case (a): no restoring force, zero Lyapunov exponent.
    FreeDrift,
    /// Case (b): bounded oscillation.
    Oscillatory,
    /// Case (c): exponential instability.
    Unstable,
}

impl StabilityCase {
    pub fn label(&self) -> &'static str {
        match self {
            StabilityCase::FreeDrift => "a",
            StabilityCase::Oscillatory => "b",
            StabilityCase::Unstable => "c",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeRecord {
    pub index: usize,
    pub case: StabilityCase,
    /// ω for oscillatory modes, λ for unstable ones, 0 for free drift.
    pub rate: f64,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeClassification {
    pub modes: Vec<ModeRecord>,
}

impl ModeClassification {
    pub fn unstable(&self) -> impl Iterator<Item = &ModeRecord> {
        self.modes.iter().filter(|m| m.case == StabilityCase::Unstable)
    }
}

/// Classifies one normal-form block `[[0, c], [b, 0]]`, i.e. `ẍ = c·b·x`.
pub fn classify_block(c: f64, b: f64, rate_tolerance: f64) -> (StabilityCase, f64) {
    if c.abs() <= rate_tolerance {
        (StabilityCase::FreeDrift, 0.0)
    } else if c < 0.0 {
        (StabilityCase::Oscillatory, (-c * b).sqrt())
    } else {
        (StabilityCase::Unstable, (c * b).sqrt())
    }
}

/// Splits the variational matrix into independent 2×2 blocks and labels each.
///
/// Diagonal `A`, `B` are read off directly. Coupled blocks are reduced to
/// normal form through the symmetric matrix `B^½ A B^½`, whose eigenvectors
/// are mass-weighted normal coordinates (unit effective mass).
pub fn classify_modes(vm: &VariationalMatrix, rate_tolerance: f64) -> Result<ModeClassification> {
    if !(rate_tolerance > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "rate_tolerance must be positive, got {rate_tolerance}"
        )));
    }
    if !vm.diagonal_blocks_vanish() {
        return Err(Error::NonSeparableModel);
    }
    let a = vm.a();
    let b = vm.b();
    let n = vm.n();
    let off_diagonal = |m: &DMatrix<f64>| {
        (0..n).any(|i| (0..n).any(|j| i != j && m[(i, j)] != 0.0))
    };

    if !off_diagonal(&a) && !off_diagonal(&b) {
        let modes = (0..n)
            .map(|i| {
                let bi = b[(i, i)];
                if !(bi > 0.0) {
                    return Err(Error::NonPositiveParameter {
                        param: format!("inverse mass of mode {i}"),
                        value: bi,
                    });
                }
                let (case, rate) = classify_block(a[(i, i)], bi, rate_tolerance);
                Ok(ModeRecord {
                    index: i,
                    case,
                    rate,
                    mass: 1.0 / bi,
                })
            })
            .collect::<Result<_>>()?;
        return Ok(ModeClassification { modes });
    }

    let b_eig = b.clone().symmetric_eigen();
    if b_eig.eigenvalues.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidArgument(
            "kinetic block must be positive definite".into(),
        ));
    }
    let sqrt_b = &b_eig.eigenvectors
        * DMatrix::from_diagonal(&b_eig.eigenvalues.map(f64::sqrt))
        * b_eig.eigenvectors.transpose();
    let mut k = &sqrt_b * a * &sqrt_b;
    k = 0.5 * (&k + k.transpose());
    let mut mu: Vec<f64> = k.symmetric_eigen().eigenvalues.iter().copied().collect();
    mu.sort_by(|x, y| y.total_cmp(x));
    let modes = mu
        .into_iter()
        .enumerate()
        .map(|(index, c)| {
            let (case, rate) = classify_block(c, 1.0, rate_tolerance);
            ModeRecord {
                index,
                case,
                rate,
                mass: 1.0,
            }
        })
        .collect();
    Ok(ModeClassification { modes })
}

fn uniform_step(trajectory: &[PhaseState]) -> Result<f64> {
    if trajectory.len() < 2 {
        return Err(Error::InvalidArgument(
            "trajectory needs at least two states".into(),
        ));
    }
    let dt = trajectory[1].t - trajectory[0].t;
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument("trajectory is not time-ordered".into()));
    }
    for pair in trajectory.windows(2) {
        let step = pair[1].t - pair[0].t;
        if (step - dt).abs() > 1e-6 * dt {
            return Err(Error::InvalidArgument("trajectory step is not uniform".into()));
        }
    }
    Ok(dt)
}

/// Advances tangent columns over one leapfrog step from `x0` to `x1`.
///
/// This is the exact linearization of the kick-drift-kick map, so it carries the
/// same order and symplecticity as the base integrator.
fn tangent_leapfrog(
    model: &HamiltonianModel,
    x0: &[f64],
    x1: &[f64],
    dt: f64,
    frame: &mut DMatrix<f64>,
) {
    let n = model.n();
    let half = 0.5 * dt;
    for i in 0..n {
        let k0 = model.curvature(i, x0[i]);
        let k1 = model.curvature(i, x1[i]);
        let inv_m = 1.0 / model.modes()[i].mass;
        for col in 0..frame.ncols() {
            let mut dx = frame[(i, col)];
            let mut dp = frame[(n + i, col)];
            dp -= half * k0 * dx;
            dx += dt * dp * inv_m;
            dp -= half * k1 * dx;
            frame[(i, col)] = dx;
            frame[(n + i, col)] = dp;
        }
    }
}

/// Evolves the columns of `frame` along a uniformly sampled leapfrog trajectory.
pub fn propagate_tangent(
    model: &HamiltonianModel,
    trajectory: &[PhaseState],
    frame: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = model.n();
    if frame.nrows() != 2 * n {
        return Err(Error::DimensionMismatch {
            expected: 2 * n,
            got: frame.nrows(),
        });
    }
    for s in trajectory {
        model.check_dim(s)?;
    }
    let dt = uniform_step(trajectory)?;
    let mut out = frame.clone();
    for pair in trajectory.windows(2) {
        tangent_leapfrog(model, &pair[0].x, &pair[1].x, dt, &mut out);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovSettings {
    pub horizon: f64,
    pub dt: f64,
    pub renorm_interval: f64,
    /// Initial stretch discarded before accumulating, so the frame can align
    /// with the dominant directions.
    pub transient: f64,
}

impl LyapunovSettings {
    /// Transient defaults to a tenth of the horizon.
    pub fn new(horizon: f64, dt: f64, renorm_interval: f64) -> Self {
        Self {
            horizon,
            dt,
            renorm_interval,
            transient: 0.1 * horizon,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovReport {
    /// Sorted descending.
    pub spectrum: Vec<f64>,
    pub ks_entropy: f64,
    /// Time actually reached (equals the requested horizon unless truncated).
    pub horizon: f64,
    pub renorm_interval: f64,
    /// `(time, running estimates in column order)` after each renormalization.
    pub history: Vec<(f64, Vec<f64>)>,
    pub converged: bool,
    pub valid: bool,
}

impl LyapunovReport {
    /// `max_i |λᵢ + λ_{2n+1−i}|`.
    pub fn symmetry_defect(&self) -> f64 {
        let k = self.spectrum.len();
        (0..k / 2)
            .map(|i| (self.spectrum[i] + self.spectrum[k - 1 - i]).abs())
            .fold(0.0, f64::max)
    }
}

pub fn ks_entropy(spectrum: &[f64]) -> f64 {
    spectrum.iter().map(|&l| l.max(0.0)).sum()
}

fn whole_steps(span: f64, dt: f64, what: &str) -> Result<usize> {
    let k = (span / dt).round();
    if !(k >= 0.0) || (k * dt - span).abs() > 1e-9 * span.abs().max(dt) {
        return Err(Error::InvalidArgument(format!(
            "{what} {span} is not a whole number of steps of {dt}"
        )));
    }
    Ok(k as usize)
}

pub fn lyapunov_spectrum(
    model: &HamiltonianModel,
    initial: &PhaseState,
    horizon: f64,
    dt: f64,
    renorm_interval: f64,
) -> Result<LyapunovReport> {
    lyapunov_spectrum_with(model, initial, &LyapunovSettings::new(horizon, dt, renorm_interval))
}

/// Benettin-style estimate: tangent frame propagated with the base leapfrog
/// trajectory and re-orthonormalized by QR every `renorm_interval`.
pub fn lyapunov_spectrum_with(
    model: &HamiltonianModel,
    initial: &PhaseState,
    settings: &LyapunovSettings,
) -> Result<LyapunovReport> {
    model.check_dim(initial)?;
    let LyapunovSettings {
        horizon,
        dt,
        renorm_interval,
        transient,
    } = *settings;
    if !(dt > 0.0) || !(renorm_interval >= dt) || !(horizon > transient) || transient < 0.0 {
        return Err(Error::InvalidArgument(
            "need horizon > transient ≥ 0 and renorm_interval ≥ dt > 0".into(),
        ));
    }
    let total = whole_steps(horizon, dt, "horizon")?;
    let per_renorm = whole_steps(renorm_interval, dt, "renorm_interval")?.max(1);
    let transient_steps = ((transient / dt).round() as usize / per_renorm) * per_renorm;
    if transient_steps >= total {
        return Err(Error::InvalidArgument("transient covers the whole horizon".into()));
    }

    let n = model.n();
    let dim = 2 * n;
    let mut state = initial.clone();
    model.normalize(&mut state);
    let mut frame = DMatrix::<f64>::identity(dim, dim);
    let mut log_sums = DVector::<f64>::zeros(dim);
    let mut history = Vec::new();
    let mut x_prev = state.x.clone();

    let make_report = |log_sums: &DVector<f64>,
                       history: Vec<(f64, Vec<f64>)>,
                       reached: f64,
                       valid: bool| {
        let span = reached - transient_steps as f64 * dt;
        let mut spectrum: Vec<f64> = if span > 0.0 {
            log_sums.iter().map(|s| s / span).collect()
        } else {
            vec![0.0; dim]
        };
        spectrum.sort_by(|a, b| b.total_cmp(a));
        let converged = valid
            && history.len() >= 2
            && history[history.len() - 1]
                .1
                .iter()
                .zip(&history[history.len() - 2].1)
                .all(|(a, b): (&f64, &f64)| {
                    (a - b).abs() < CONVERGENCE_TOLERANCE * a.abs().max(1.0)
                });
        LyapunovReport {
            ks_entropy: ks_entropy(&spectrum),
            spectrum,
            horizon: reached,
            renorm_interval,
            history,
            converged,
            valid,
        }
    };

    for step in 1..=total {
        x_prev.copy_from_slice(&state.x);
        leapfrog_in_place(model, &mut state.x, &mut state.p, dt);
        tangent_leapfrog(model, &x_prev, &state.x, dt, &mut frame);
        model.normalize(&mut state);

        if step % per_renorm == 0 || step == total {
            let t = step as f64 * dt;
            if !state.is_finite() || frame.iter().any(|v| !v.is_finite()) {
                let partial = make_report(&log_sums, history, t - per_renorm as f64 * dt, false);
                return Err(Error::NonFiniteTrajectory {
                    partial: Box::new(partial),
                });
            }
            let qr = frame.clone().qr();
            let r = qr.r();
            if step > transient_steps {
                for i in 0..dim {
                    log_sums[i] += r[(i, i)].abs().ln();
                }
                let span = t - transient_steps as f64 * dt;
                history.push((t, log_sums.iter().map(|s| s / span).collect()));
            }
            frame = qr.q();
        }
    }
    Ok(make_report(&log_sums, history, horizon, true))
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

    #[test]
    fn linearize_catalog_matrices() {
        let s = PhaseState::new_1d(0.7, -0.2);
        let vm = linearize(&model("harmonic", &[("m", 1.0), ("omega", 1.0)]), &s).unwrap();
        assert_eq!(vm.matrix(), &DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]));
        let vm = linearize(&model("inverted", &[("m", 1.0), ("lambda", 1.0)]), &s).unwrap();
        assert_eq!(vm.matrix(), &DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        let vm = linearize(&model("free_particle", &[("m", 2.0)]), &s).unwrap();
        assert_eq!(vm.matrix(), &DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.5, 0.0]));
    }

    #[test]
    fn classify_catalog() {
        let s = PhaseState::new_1d(0.0, 0.0);
        let cases = [
            ("harmonic", vec![("m", 1.0), ("omega", 3.0)], StabilityCase::Oscillatory, 3.0),
            ("inverted", vec![("m", 1.0), ("lambda", 2.0)], StabilityCase::Unstable, 2.0),
            ("free_particle", vec![("m", 1.0)], StabilityCase::FreeDrift, 0.0),
        ];
        for (name, params, case, rate) in cases {
            let vm = linearize(&model(name, &params), &s).unwrap();
            let c = classify_modes(&vm, DEFAULT_RATE_TOLERANCE).unwrap();
            assert_eq!(c.modes[0].case, case);
            assert_eq!(c.modes[0].rate, rate);
        }
    }

    #[test]
    fn classify_rejects_diagonal_blocks() {
        let m = DMatrix::from_row_slice(2, 2, &[0.1, 1.0, 1.0, 0.0]);
        let vm = VariationalMatrix::from_matrix(m).unwrap();
        assert!(matches!(
            classify_modes(&vm, DEFAULT_RATE_TOLERANCE),
            Err(Error::NonSeparableModel)
        ));
    }

    #[test]
    fn classify_coupled_normal_modes() {
        // two unit masses, springs to the wall (k=1) and between them (k=1):
        // normal frequencies 1 and √3
        let a = DMatrix::from_row_slice(2, 2, &[-2.0, 1.0, 1.0, -2.0]);
        let b = DMatrix::identity(2, 2);
        let vm = VariationalMatrix::from_blocks(a, b).unwrap();
        let c = classify_modes(&vm, DEFAULT_RATE_TOLERANCE).unwrap();
        let mut rates: Vec<f64> = c.modes.iter().map(|m| m.rate).collect();
        rates.sort_by(f64::total_cmp);
        assert!((rates[0] - 1.0).abs() < 1e-12);
        assert!((rates[1] - 3f64.sqrt()).abs() < 1e-12);
        assert!(c.modes.iter().all(|m| m.case == StabilityCase::Oscillatory));
    }

    #[test]
    fn tangent_propagation_examples() {
        let free = model("free_particle", &[("m", 2.0)]);
        let traj: Vec<PhaseState> = (0..=100)
            .map(|k| PhaseState {
                x: vec![0.0],
                p: vec![0.0],
                t: k as f64 * 0.01,
            })
            .collect();
        let frame = DMatrix::from_row_slice(2, 2, &[0.6, -0.8, 0.8, 0.6]);
        let out = propagate_tangent(&free, &traj, &frame).unwrap();
        for col in 0..2 {
            let expect = frame[(0, col)] + 1.0 * frame[(1, col)] / 2.0;
            assert!((out[(0, col)] - expect).abs() < 1e-12);
            assert_eq!(out[(1, col)], frame[(1, col)]);
        }
    }

    #[test]
    fn ks_entropy_is_positive_part_sum() {
        assert_eq!(ks_entropy(&[1.5, 0.25, -0.25, -1.5]), 1.75);
        assert_eq!(ks_entropy(&[0.0, -0.0]), 0.0);
    }
}
