//! Monte Carlo ensembles of stochastic paths and the variance laws they obey.
//!
//! Paths are grouped into fixed chunks of [`CHUNK_PATHS`]; each chunk is
//! reduced in path order and chunks are merged in chunk order, so every
//! estimate is bit-identical for any worker count.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::phase_core::{
    evaluate_energy, minimal_uncertainty_dispersions, HamiltonianModel, PhaseState, Potential,
};
use crate::sde_engine::{
    fill_amplitudes, path_rng, run_path, step_count, NoiseSpec, Scheme, StreamPurpose,
};
use crate::stability::linearize;

pub const CHUNK_PATHS: usize = 256;

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialKind {
    Point,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialDistribution {
    pub kind: InitialKind,
    pub center: PhaseState,
    pub var_x: Vec<f64>,
    pub var_p: Vec<f64>,
}

impl InitialDistribution {
    pub fn point(center: PhaseState) -> Self {
        let n = center.dim();
        Self {
            kind: InitialKind::Point,
            center,
            var_x: vec![0.0; n],
            var_p: vec![0.0; n],
        }
    }

    pub fn gaussian(center: PhaseState, var_x: Vec<f64>, var_p: Vec<f64>) -> Result<Self> {
        let n = center.dim();
        if var_x.len() != n || var_p.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: var_x.len().min(var_p.len()),
            });
        }
        if var_x.iter().chain(&var_p).any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("gaussian variances must be ≥ 0".into()));
        }
        Ok(Self {
            kind: InitialKind::Gaussian,
            center,
            var_x,
            var_p,
        })
    }

    /// Covariance in `(x, p)` ordering.
    pub fn covariance(&self) -> DMatrix<f64> {
        let n = self.center.dim();
        let mut c = DMatrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            c[(i, i)] = self.var_x[i];
            c[(n + i, n + i)] = self.var_p[i];
        }
        c
    }

    pub fn sample(&self, master_seed: u64, path_index: u64) -> PhaseState {
        let mut state = self.center.clone();
        if self.kind == InitialKind::Gaussian {
            let mut rng = path_rng(master_seed, path_index, StreamPurpose::InitialCondition);
            for (x, v) in state.x.iter_mut().zip(&self.var_x) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x += v.sqrt() * z;
            }
            for (p, v) in state.p.iter_mut().zip(&self.var_p) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *p += v.sqrt() * z;
            }
        }
        state
    }
}

/// Online central moments up to fourth order (Terriberry / Pébay updates).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        let n1 = self.n;
        self.n += 1.0;
        let n = self.n;
        let delta = x - self.mean;
        let delta_n = delta / n;
        let delta_n2 = delta_n * delta_n;
        let term1 = delta * delta_n * n1;
        self.mean += delta_n;
        self.m4 += term1 * delta_n2 * (n * n - 3.0 * n + 3.0) + 6.0 * delta_n2 * self.m2
            - 4.0 * delta_n * self.m3;
        self.m3 += term1 * delta_n * (n - 2.0) - 3.0 * delta_n * self.m2;
        self.m2 += term1;
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.n == 0.0 {
            return;
        }
        if self.n == 0.0 {
            *self = *other;
            return;
        }
        let (na, nb) = (self.n, other.n);
        let n = na + nb;
        let delta = other.mean - self.mean;
        let d2 = delta * delta;
        let d3 = d2 * delta;
        let d4 = d2 * d2;
        let m4 = self.m4
            + other.m4
            + d4 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
            + 6.0 * d2 * (na * na * other.m2 + nb * nb * self.m2) / (n * n)
            + 4.0 * delta * (na * other.m3 - nb * self.m3) / n;
        let m3 = self.m3
            + other.m3
            + d3 * na * nb * (na - nb) / (n * n)
            + 3.0 * delta * (na * other.m2 - nb * self.m2) / n;
        let m2 = self.m2 + other.m2 + d2 * na * nb / n;
        self.mean += delta * nb / n;
        self.n = n;
        self.m2 = m2;
        self.m3 = m3;
        self.m4 = m4;
    }

    pub fn count(&self) -> f64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased (N−1) variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2.0 {
            0.0
        } else {
            (self.m2 / (self.n - 1.0)).max(0.0)
        }
    }

    pub fn mean_se(&self) -> f64 {
        if self.n < 2.0 {
            0.0
        } else {
            (self.variance() / self.n).sqrt()
        }
    }

    /// Standard error of the unbiased variance from the fourth central moment:
    /// `Var(s²) ≈ (μ₄ − (N−3)/(N−1)·σ⁴) / N`.
    pub fn variance_se(&self) -> f64 {
        if self.n < 4.0 {
            return 0.0;
        }
        let n = self.n;
        let mu4 = self.m4 / n;
        let s2 = self.variance();
        ((mu4 - (n - 3.0) / (n - 1.0) * s2 * s2) / n).max(0.0).sqrt()
    }
}

/// Sample covariance of a vector across paths, by co-moment accumulation.
#[derive(Debug, Clone, PartialEq)]
struct CoMoments {
    n: f64,
    mean: Vec<f64>,
    c: DMatrix<f64>,
}

impl CoMoments {
    fn new(dim: usize) -> Self {
        Self {
            n: 0.0,
            mean: vec![0.0; dim],
            c: DMatrix::zeros(dim, dim),
        }
    }

    fn push(&mut self, v: &[f64], scratch: &mut [f64]) {
        self.n += 1.0;
        let n = self.n;
        for (d, (x, m)) in scratch.iter_mut().zip(v.iter().zip(&self.mean)) {
            *d = x - m;
        }
        for (m, d) in self.mean.iter_mut().zip(scratch.iter()) {
            *m += d / n;
        }
        let w = (n - 1.0) / n;
        let dim = v.len();
        for j in 0..dim {
            let dj = w * scratch[j];
            if dj == 0.0 {
                continue;
            }
            for i in 0..=j {
                self.c[(i, j)] += scratch[i] * dj;
            }
        }
    }

    fn merge(&mut self, other: &CoMoments) {
        if other.n == 0.0 {
            return;
        }
        if self.n == 0.0 {
            *self = other.clone();
            return;
        }
        let n = self.n + other.n;
        let w = self.n * other.n / n;
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        let dim = delta.len();
        for j in 0..dim {
            for i in 0..=j {
                self.c[(i, j)] += other.c[(i, j)] + w * delta[i] * delta[j];
            }
        }
        for (m, d) in self.mean.iter_mut().zip(&delta) {
            *m += d * other.n / n;
        }
        self.n = n;
    }

    fn covariance(&self) -> DMatrix<f64> {
        let dim = self.mean.len();
        let scale = if self.n > 1.0 { 1.0 / (self.n - 1.0) } else { 0.0 };
        DMatrix::from_fn(dim, dim, |i, j| {
            let (a, b) = if i <= j { (i, j) } else { (j, i) };
            self.c[(a, b)] * scale
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeSeries {
    pub mean_x: Vec<Estimate>,
    pub var_x: Vec<Estimate>,
    pub mean_p: Vec<Estimate>,
    pub var_p: Vec<Estimate>,
    /// Sample covariance of `x` between sample times (paths as observations).
    pub x_time_covariance: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleResult {
    pub times: Vec<f64>,
    pub modes: Vec<ModeSeries>,
    pub mean_energy: Vec<Estimate>,
    pub paths: usize,
    pub excluded: usize,
    pub spec: NoiseSpec,
}

impl EnsembleResult {
    pub fn time_index(&self, t: f64) -> Option<usize> {
        self.times
            .iter()
            .position(|&s| (s - t).abs() <= 1e-9 * t.abs().max(1.0))
    }

    /// Fraction of paths excluded as truncated.
    pub fn excluded_fraction(&self) -> f64 {
        self.excluded as f64 / self.paths as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    pub paths: usize,
    pub horizon: f64,
    pub dt: f64,
    /// Steps between recorded sample times.
    pub sample_stride: usize,
    pub scheme: Scheme,
}

impl EnsembleConfig {
    /// About twenty sample intervals over the horizon.
    pub fn new(paths: usize, horizon: f64, dt: f64) -> Self {
        let steps = (horizon / dt).round().max(1.0) as usize;
        Self {
            paths,
            horizon,
            dt,
            sample_stride: (steps / 20).max(1),
            scheme: Scheme::SplitStep,
        }
    }

    /// Records a sample every `interval` time units (rounded to whole steps).
    pub fn sample_every(mut self, interval: f64) -> Self {
        self.sample_stride = ((interval / self.dt).round() as usize).max(1);
        self
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    fn sample_steps(&self, steps: usize) -> Vec<usize> {
        let mut out: Vec<usize> = (0..=steps).step_by(self.sample_stride).collect();
        if *out.last().unwrap() != steps {
            out.push(steps);
        }
        out
    }
}

#[derive(Clone)]
struct Accumulator {
    x: Vec<Moments>,
    p: Vec<Moments>,
    energy: Vec<Moments>,
    x_time: Vec<CoMoments>,
    excluded: usize,
}

impl Accumulator {
    fn new(samples: usize, n: usize) -> Self {
        Self {
            x: vec![Moments::default(); samples * n],
            p: vec![Moments::default(); samples * n],
            energy: vec![Moments::default(); samples],
            x_time: (0..n).map(|_| CoMoments::new(samples)).collect(),
            excluded: 0,
        }
    }

    fn merge(&mut self, other: &Accumulator) {
        for (a, b) in self.x.iter_mut().zip(&other.x) {
            a.merge(b);
        }
        for (a, b) in self.p.iter_mut().zip(&other.p) {
            a.merge(b);
        }
        for (a, b) in self.energy.iter_mut().zip(&other.energy) {
            a.merge(b);
        }
        for (a, b) in self.x_time.iter_mut().zip(&other.x_time) {
            a.merge(b);
        }
        self.excluded += other.excluded;
    }
}

pub fn run_ensemble(
    model: &HamiltonianModel,
    init: &InitialDistribution,
    config: &EnsembleConfig,
    spec: &NoiseSpec,
) -> Result<EnsembleResult> {
    model.check_dim(&init.center)?;
    spec.validate()?;
    if config.paths < 2 {
        return Err(Error::InsufficientSamples(format!(
            "an ensemble needs N ≥ 2 paths, got {}",
            config.paths
        )));
    }
    let steps = step_count(config.horizon, config.dt)?;
    let sample_steps = config.sample_steps(steps);
    let samples = sample_steps.len();
    let n = model.n();
    let t0 = init.center.t;

    let chunks = config.paths.div_ceil(CHUNK_PATHS);
    let partials: Vec<Result<Accumulator>> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut acc = Accumulator::new(samples, n);
            let mut xs = vec![0.0; samples * n];
            let mut ps = vec![0.0; samples * n];
            let mut es = vec![0.0; samples];
            let mut series = vec![0.0; samples];
            let mut scratch = vec![0.0; samples];
            let start = chunk * CHUNK_PATHS;
            let end = (start + CHUNK_PATHS).min(config.paths);
            for path in start..end {
                let initial = init.sample(spec.master_seed, path as u64);
                let mut next = 0;
                let truncated = run_path(
                    model,
                    &initial,
                    steps,
                    config.dt,
                    spec,
                    config.scheme,
                    path as u64,
                    |k, s| {
                        if next < samples && sample_steps[next] == k {
                            for i in 0..n {
                                xs[next * n + i] = s.x[i];
                                ps[next * n + i] = s.p[i];
                            }
                            es[next] = evaluate_energy(model, s).unwrap_or(f64::NAN);
                            next += 1;
                        }
                    },
                )?;
                if truncated.is_some() {
                    acc.excluded += 1;
                    continue;
                }
                for j in 0..samples * n {
                    acc.x[j].push(xs[j]);
                    acc.p[j].push(ps[j]);
                }
                for j in 0..samples {
                    acc.energy[j].push(es[j]);
                }
                for i in 0..n {
                    for j in 0..samples {
                        series[j] = xs[j * n + i];
                    }
                    acc.x_time[i].push(&series, &mut scratch);
                }
            }
            Ok(acc)
        })
        .collect();

    let mut total = Accumulator::new(samples, n);
    for part in partials {
        total.merge(&part?);
    }
    let kept = config.paths - total.excluded;
    if kept == 0 {
        return Err(Error::AllPathsExcluded(config.paths));
    }
    if kept < 2 {
        return Err(Error::InsufficientSamples(format!(
            "only {kept} path survived truncation"
        )));
    }

    let times = sample_steps
        .iter()
        .map(|&k| t0 + k as f64 * config.dt)
        .collect();
    let modes = (0..n)
        .map(|i| {
            let col = |m: &[Moments], f: fn(&Moments) -> Estimate| -> Vec<Estimate> {
                (0..samples).map(|j| f(&m[j * n + i])).collect()
            };
            ModeSeries {
                mean_x: col(&total.x, mean_estimate),
                var_x: col(&total.x, var_estimate),
                mean_p: col(&total.p, mean_estimate),
                var_p: col(&total.p, var_estimate),
                x_time_covariance: total.x_time[i].covariance(),
            }
        })
        .collect();
    Ok(EnsembleResult {
        times,
        modes,
        mean_energy: total.energy.iter().map(mean_estimate).collect(),
        paths: config.paths,
        excluded: total.excluded,
        spec: *spec,
    })
}

/// End-of-horizon states of every surviving path, in path order.
pub fn final_states(
    model: &HamiltonianModel,
    init: &InitialDistribution,
    config: &EnsembleConfig,
    spec: &NoiseSpec,
) -> Result<Vec<PhaseState>> {
    model.check_dim(&init.center)?;
    spec.validate()?;
    let steps = step_count(config.horizon, config.dt)?;
    let chunks = config.paths.div_ceil(CHUNK_PATHS);
    let parts: Vec<Result<Vec<PhaseState>>> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let start = chunk * CHUNK_PATHS;
            let end = (start + CHUNK_PATHS).min(config.paths);
            let mut out = Vec::with_capacity(end - start);
            for path in start..end {
                let initial = init.sample(spec.master_seed, path as u64);
                let mut last = None;
                let truncated = run_path(
                    model,
                    &initial,
                    steps,
                    config.dt,
                    spec,
                    config.scheme,
                    path as u64,
                    |k, s| {
                        if k == steps {
                            last = Some(s.clone());
                        }
                    },
                )?;
                if truncated.is_none() {
                    out.extend(last);
                }
            }
            Ok(out)
        })
        .collect();
    let mut states = Vec::with_capacity(config.paths);
    for part in parts {
        states.extend(part?);
    }
    if states.is_empty() {
        return Err(Error::AllPathsExcluded(config.paths));
    }
    Ok(states)
}

fn mean_estimate(m: &Moments) -> Estimate {
    Estimate {
        value: m.mean(),
        se: m.mean_se(),
    }
}

fn var_estimate(m: &Moments) -> Estimate {
    Estimate {
        value: m.variance(),
        se: m.variance_se(),
    }
}

/// Minimal-uncertainty Gaussian kicks at the origin, propagated without noise.
pub fn kick_ensemble(
    model: &HamiltonianModel,
    hbar_eff: f64,
    config: &EnsembleConfig,
    master_seed: u64,
) -> Result<EnsembleResult> {
    if !model
        .modes()
        .iter()
        .all(|m| matches!(m.potential, Potential::Inverted { .. }))
    {
        return Err(Error::UnsupportedModel(model.name().to_string()));
    }
    let disp = minimal_uncertainty_dispersions(model, hbar_eff)?;
    let init = InitialDistribution::gaussian(
        PhaseState::origin(model.n()),
        disp.iter().map(|d| d.var_x).collect(),
        disp.iter().map(|d| d.var_p).collect(),
    )?;
    let spec = NoiseSpec {
        hbar_eff,
        ..NoiseSpec::noiseless(master_seed)
    };
    run_ensemble(model, &init, config, &spec)
}

/// Covariance between the variance estimates at sample times `i` and `j`.
///
/// Per-time standard errors carry the fourth-moment information; the
/// correlation between times is taken from the Gaussian identity
/// `Cov(s²ᵢ, s²ⱼ) = 2C²ᵢⱼ/(N−1)`, i.e. `ρᵢⱼ = C²ᵢⱼ / (Cᵢᵢ Cⱼⱼ)`.
fn variance_estimate_covariance(series: &ModeSeries, idx: &[usize]) -> DMatrix<f64> {
    let c = &series.x_time_covariance;
    DMatrix::from_fn(idx.len(), idx.len(), |a, b| {
        let (i, j) = (idx[a], idx[b]);
        let denom = c[(i, i)] * c[(j, j)];
        let rho = if denom > 0.0 {
            (c[(i, j)] * c[(i, j)] / denom).min(1.0)
        } else {
            0.0
        };
        series.var_x[i].se * series.var_x[j].se * rho
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub intercept_se: f64,
}

/// Ordinary least squares, with parameter errors propagated through the
/// supplied covariance of the observations.
fn ols(t: &[f64], y: &[f64], cov: &DMatrix<f64>) -> LineFit {
    let k = t.len() as f64;
    let t_bar = t.iter().sum::<f64>() / k;
    let y_bar = y.iter().sum::<f64>() / k;
    let sxx: f64 = t.iter().map(|ti| (ti - t_bar).powi(2)).sum();
    let w: Vec<f64> = t.iter().map(|ti| (ti - t_bar) / sxx).collect();
    let slope: f64 = w.iter().zip(y).map(|(wi, yi)| wi * yi).sum();
    let intercept = y_bar - slope * t_bar;
    let a: Vec<f64> = w.iter().map(|wi| 1.0 / k - t_bar * wi).collect();
    let quad = |v: &[f64]| {
        let mut s = 0.0;
        for i in 0..v.len() {
            for j in 0..v.len() {
                s += v[i] * cov[(i, j)] * v[j];
            }
        }
        s.max(0.0).sqrt()
    };
    LineFit {
        slope,
        intercept,
        slope_se: quad(&w),
        intercept_se: quad(&a),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub se: f64,
    /// 95% confidence interval.
    pub ci: (f64, f64),
}

impl SlopeFit {
    pub fn contains(&self, value: f64) -> bool {
        self.ci.0 <= value && value <= self.ci.1
    }
}

/// Least-squares slope of `var_x(t)` over all sample times.
pub fn variance_slope(result: &EnsembleResult, mode: usize) -> Result<SlopeFit> {
    let series = result.modes.get(mode).ok_or(Error::DimensionMismatch {
        expected: result.modes.len(),
        got: mode,
    })?;
    if result.times.len() < 3 {
        return Err(Error::InsufficientSamples(format!(
            "need ≥ 3 sample times, got {}",
            result.times.len()
        )));
    }
    let idx: Vec<usize> = (0..result.times.len()).collect();
    let y: Vec<f64> = series.var_x.iter().map(|e| e.value).collect();
    let fit = ols(&result.times, &y, &variance_estimate_covariance(series, &idx));
    Ok(SlopeFit {
        slope: fit.slope,
        se: fit.slope_se,
        ci: (fit.slope - Z95 * fit.slope_se, fit.slope + Z95 * fit.slope_se),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    pub rate: f64,
    pub rate_se: f64,
    pub rate_ci: (f64, f64),
    pub prefactor: f64,
    pub prefactor_ci: (f64, f64),
    /// Coefficient of determination of the log-linear fit.
    pub r_squared: f64,
    /// Growth is significant (lower CI bound above zero) and log-linear (R² ≥ 0.99).
    pub exponential: bool,
}

/// Fits `ln var_x = ln(prefactor) + rate·t` over sample times in `window`.
pub fn exponential_rate_fit(
    result: &EnsembleResult,
    mode: usize,
    window: (f64, f64),
) -> Result<RateFit> {
    let series = result.modes.get(mode).ok_or(Error::DimensionMismatch {
        expected: result.modes.len(),
        got: mode,
    })?;
    let eps = 1e-9 * window.1.abs().max(1.0);
    let idx: Vec<usize> = (0..result.times.len())
        .filter(|&i| result.times[i] >= window.0 - eps && result.times[i] <= window.1 + eps)
        .collect();
    if idx.len() < 3 {
        return Err(Error::InsufficientSamples(format!(
            "window {window:?} holds {} sample times, need ≥ 3",
            idx.len()
        )));
    }
    for &i in &idx {
        if !(series.var_x[i].value > 0.0) {
            return Err(Error::NonPositiveVariance {
                t: result.times[i],
            });
        }
    }
    let t: Vec<f64> = idx.iter().map(|&i| result.times[i]).collect();
    let y: Vec<f64> = idx.iter().map(|&i| series.var_x[i].value.ln()).collect();
    let var_cov = variance_estimate_covariance(series, &idx);
    let log_cov = DMatrix::from_fn(idx.len(), idx.len(), |a, b| {
        var_cov[(a, b)] / (series.var_x[idx[a]].value * series.var_x[idx[b]].value)
    });
    let fit = ols(&t, &y, &log_cov);

    let y_bar = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - y_bar).powi(2)).sum();
    let ss_res: f64 = t
        .iter()
        .zip(&y)
        .map(|(ti, yi)| (yi - fit.intercept - fit.slope * ti).powi(2))
        .sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 0.0 };
    let rate_ci = (fit.slope - Z95 * fit.slope_se, fit.slope + Z95 * fit.slope_se);
    Ok(RateFit {
        rate: fit.slope,
        rate_se: fit.slope_se,
        rate_ci,
        prefactor: fit.intercept.exp(),
        prefactor_ci: (
            (fit.intercept - Z95 * fit.intercept_se).exp(),
            (fit.intercept + Z95 * fit.intercept_se).exp(),
        ),
        r_squared,
        exponential: rate_ci.0 > 0.0 && r_squared >= 0.99,
    })
}

/// Covariance trajectory of a linear SDE, `(x, p)` ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceTrajectory {
    pub times: Vec<f64>,
    pub covariances: Vec<DMatrix<f64>>,
    n: usize,
}

impl CovarianceTrajectory {
    pub fn index_at(&self, t: f64) -> Option<usize> {
        let dt = self.times.get(1).map(|t1| t1 - self.times[0])?;
        let k = ((t - self.times[0]) / dt).round();
        if k < 0.0 || k as usize >= self.times.len() || (self.times[k as usize] - t).abs() > 1e-6 * dt
        {
            return None;
        }
        Some(k as usize)
    }

    pub fn var_x(&self, k: usize, mode: usize) -> f64 {
        self.covariances[k][(mode, mode)]
    }

    pub fn var_p(&self, k: usize, mode: usize) -> f64 {
        self.covariances[k][(self.n + mode, self.n + mode)]
    }

    pub fn cov_xp(&self, k: usize, mode: usize) -> f64 {
        self.covariances[k][(mode, self.n + mode)]
    }
}

/// RK4 integration of `dΣ/dt = MΣ + ΣMᵀ + Q` for a linear model.
pub fn covariance_ode_oracle(
    model: &HamiltonianModel,
    initial_covariance: &DMatrix<f64>,
    spec: &NoiseSpec,
    horizon: f64,
    dt: f64,
) -> Result<CovarianceTrajectory> {
    if !model.is_linear() {
        return Err(Error::NonLinearModel(model.name().to_string()));
    }
    spec.validate()?;
    let n = model.n();
    if initial_covariance.nrows() != 2 * n || initial_covariance.ncols() != 2 * n {
        return Err(Error::DimensionMismatch {
            expected: 2 * n,
            got: initial_covariance.nrows(),
        });
    }
    let steps = step_count(horizon, dt)?;
    let origin = PhaseState::origin(n);
    let m = linearize(model, &origin)?.generator_xp();
    let mut sigma = vec![(0.0, 0.0); n];
    fill_amplitudes(model, &origin.x, spec, &mut sigma);
    let mut q = DMatrix::zeros(2 * n, 2 * n);
    for (i, (sx, sp)) in sigma.iter().enumerate() {
        q[(i, i)] = sx * sx;
        q[(n + i, n + i)] = sp * sp;
    }
    let rhs = |s: &DMatrix<f64>| -> DMatrix<f64> {
        let ms = &m * s;
        &ms + ms.transpose() + &q
    };

    let mut times = Vec::with_capacity(steps + 1);
    let mut covariances = Vec::with_capacity(steps + 1);
    let mut s = initial_covariance.clone();
    times.push(0.0);
    covariances.push(s.clone());
    for k in 1..=steps {
        let k1 = rhs(&s);
        let k2 = rhs(&(&s + &k1 * (0.5 * dt)));
        let k3 = rhs(&(&s + &k2 * (0.5 * dt)));
        let k4 = rhs(&(&s + &k3 * dt));
        s += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        s = 0.5 * (&s + s.transpose());
        times.push(k as f64 * dt);
        covariances.push(s.clone());
    }
    Ok(CovarianceTrajectory {
        times,
        covariances,
        n,
    })
}
