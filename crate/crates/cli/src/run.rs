//! Scenario execution: dispatches on the scenario kind, collects headline
//! numbers with verdicts, and writes the result files.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value as Json};
use stochmech_core::ensemble_stats::{
    covariance_ode_oracle, exponential_rate_fit, kick_ensemble, run_ensemble, variance_slope, EnsembleConfig,
    EnsembleResult, InitialDistribution,
};
use stochmech_core::fokker_planck::{
    build_grid, evolve_master_equation, gibbs_entropy, DiffusionCoefficients, DistributionGrid, EvolutionOutcome,
    GridSpec, MasterEqConfig,
};
use stochmech_core::phase_core::{minimal_uncertainty_dispersions, Potential};
use stochmech_core::sde_engine::{integrate_path, step_symplectic_deterministic};
use stochmech_core::stability::{
    classify_modes, linearize, lyapunov_spectrum_with, LyapunovReport, LyapunovSettings, DEFAULT_RATE_TOLERANCE,
};
use stochmech_core::{Error as CoreError, HamiltonianModel, NoiseSpec, PhaseState, Scheme};
use thiserror::Error;

use crate::config::{AnalyticQuantity, GridSettings, InitialSettings, ScenarioConfig, ScenarioKind, Units};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{module}: {source}")]
    Core {
        module: &'static str,
        #[source]
        source: CoreError,
    },
    #[error("writing results: {0}")]
    Io(#[from] io::Error),
    #[error("could not build a thread pool: {0}")]
    Threads(String),
}

fn ctx(module: &'static str) -> impl FnOnce(CoreError) -> RunError {
    move |source| RunError::Core { module, source }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Uncertainty {
    Exact,
    Se(f64),
}

impl Serialize for Uncertainty {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Uncertainty::Exact => s.serialize_str("exact"),
            Uncertainty::Se(v) => s.serialize_f64(*v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Headline {
    pub name: String,
    pub value: f64,
    pub uncertainty: Uncertainty,
    /// What the value is compared against, including the tolerance.
    pub reference: String,
    /// `None` for reported numbers without an analytic reference.
    #[serde(serialize_with = "ser_verdict")]
    pub verdict: Option<bool>,
}

fn ser_verdict<S: serde::Serializer>(v: &Option<bool>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(true) => s.serialize_str("PASS"),
        Some(false) => s.serialize_str("FAIL"),
        None => s.serialize_none(),
    }
}

impl Headline {
    fn new(name: impl Into<String>, value: f64, uncertainty: Uncertainty) -> Self {
        Self {
            name: name.into(),
            value,
            uncertainty,
            reference: String::new(),
            verdict: None,
        }
    }

    fn check(mut self, reference: impl Into<String>, pass: bool) -> Self {
        self.reference = reference.into();
        self.verdict = Some(pass);
        self
    }

    fn note(mut self, reference: impl Into<String>) -> Self {
        self.reference = reference.into();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub scenario: String,
    pub kind: ScenarioKind,
    pub model: Option<String>,
    pub params: BTreeMap<String, f64>,
    pub headline: Vec<Headline>,
    pub excluded_paths: usize,
    pub seed: u64,
    pub version: String,
    pub config: ScenarioConfig,
    pub details: Json,
}

impl RunSummary {
    pub fn passed(&self) -> bool {
        self.headline.iter().all(|h| h.verdict != Some(false))
    }

    pub fn failures(&self) -> impl Iterator<Item = &Headline> {
        self.headline.iter().filter(|h| h.verdict == Some(false))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }
}

/// Columns of `timeseries.csv`; `time` is always first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Timeseries {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Timeseries {
    fn new(times: &[f64]) -> Self {
        Self {
            columns: vec!["time".into()],
            rows: times.iter().map(|&t| vec![t]).collect(),
        }
    }

    fn push(&mut self, name: impl Into<String>, values: impl IntoIterator<Item = f64>) {
        self.columns.push(name.into());
        let mut it = values.into_iter();
        for row in &mut self.rows {
            row.push(it.next().unwrap_or(f64::NAN));
        }
    }

    /// Missing values are written as empty fields.
    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row
                .iter()
                .map(|v| if v.is_nan() { String::new() } else { format!("{v:.16e}") })
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub timeseries: Timeseries,
    pub density: Option<DistributionGrid>,
    pub wall_clock_seconds: f64,
}

/// Runs on a dedicated pool of `threads` workers, or on the global pool.
pub fn run_with_threads(config: &ScenarioConfig, threads: Option<usize>) -> Result<RunOutput, RunError> {
    match threads {
        None => run_scenario(config),
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| RunError::Threads(e.to_string()))?
            .install(|| run_scenario(config)),
    }
}

pub fn run_scenario(config: &ScenarioConfig) -> Result<RunOutput, RunError> {
    let start = Instant::now();
    let mut body = match config.kind {
        ScenarioKind::Analytic => run_analytic(config)?,
        ScenarioKind::Ensemble => run_plain_ensemble(config)?,
        ScenarioKind::KickEnsemble => run_kick(config)?,
        ScenarioKind::Lyapunov => run_lyapunov(config)?,
        ScenarioKind::MasterEquation => run_master(config)?,
    };
    let (model, params) = match &config.model {
        Some(spec) => (Some(spec.name.clone()), spec.params.clone()),
        None => (None, BTreeMap::new()),
    };
    if let Some(m) = &config.model {
        let classification = classification_labels(&m.build(), &initial_center(config, &m.build()));
        if let Json::Object(map) = &mut body.details {
            map.insert("classification".into(), classification);
        }
    }
    let summary = RunSummary {
        scenario: config.name.clone(),
        kind: config.kind,
        model,
        params,
        headline: body.headline,
        excluded_paths: body.excluded,
        seed: config.seed,
        version: VERSION.to_string(),
        config: config.clone(),
        details: body.details,
    };
    Ok(RunOutput {
        summary,
        timeseries: body.timeseries,
        density: body.density,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

struct Body {
    headline: Vec<Headline>,
    timeseries: Timeseries,
    density: Option<DistributionGrid>,
    excluded: usize,
    details: Json,
}

impl Body {
    fn new(headline: Vec<Headline>, timeseries: Timeseries, details: Json) -> Self {
        Self {
            headline,
            timeseries,
            density: None,
            excluded: 0,
            details,
        }
    }
}

fn rel_err(value: f64, reference: f64) -> f64 {
    (value / reference - 1.0).abs()
}

/// Per-mode vectors from the config, with length-1 entries broadcast.
fn initial_distribution(init: Option<&InitialSettings>, n: usize) -> InitialDistribution {
    let Some(init) = init else {
        return InitialDistribution::point(PhaseState::origin(n));
    };
    let widen = |v: &[f64]| if v.len() == n { v.to_vec() } else { vec![v[0]; n] };
    let center = PhaseState::new(widen(&init.x), widen(&init.p), 0.0).expect("finite initial state");
    let (var_x, var_p) = (widen(&init.var_x), widen(&init.var_p));
    if var_x.iter().chain(&var_p).all(|&v| v == 0.0) {
        InitialDistribution::point(center)
    } else {
        InitialDistribution::gaussian(center, var_x, var_p).expect("validated variances")
    }
}

fn initial_center(config: &ScenarioConfig, model: &HamiltonianModel) -> PhaseState {
    initial_distribution(config.initial.as_ref(), model.n()).center
}

fn classification_labels(model: &HamiltonianModel, at: &PhaseState) -> Json {
    match linearize(model, at).and_then(|vm| classify_modes(&vm, DEFAULT_RATE_TOLERANCE)) {
        Ok(c) => Json::Array(
            c.modes
                .iter()
                .map(|m| json!({ "mode": m.index, "case": m.case.label(), "rate": m.rate }))
                .collect(),
        ),
        Err(e) => Json::String(e.to_string()),
    }
}

fn run_analytic(c: &ScenarioConfig) -> Result<Body, RunError> {
    let model = c.model.as_ref().unwrap().build();
    let m = model.modes()[0].mass;
    let hbar = c.hbar_eff;
    let unit = |cgs: &'static str| if c.units == Units::Cgs { cgs } else { "model units" };
    let mut headline = Vec::new();
    let timeseries;
    let mut details = json!({ "hbar": hbar, "units": c.units });
    match c.quantity.unwrap() {
        AnalyticQuantity::FreeDriftRms => {
            let tau = c.horizon;
            let rms = (hbar * tau / (2.0 * m)).sqrt();
            let mut h = Headline::new("rms_drift", rms, Uncertainty::Exact)
                .note(format!("free-particle diffusion law sqrt(hbar*t/2m), in {}", unit("cm")));
            if let Some(expect) = c.expect {
                let tol = c.expect_rel_tol;
                h = h.check(
                    format!(
                        "free-particle diffusion law sqrt(hbar*t/2m) = {expect:e} {}; relative tolerance {tol}",
                        unit("cm")
                    ),
                    rel_err(rms, expect) <= tol,
                );
            }
            headline.push(h);
            if let Some(order) = c.expect_order {
                let decades = (rms / order).log10();
                headline.push(
                    Headline::new("rms_drift_order_of_magnitude", decades, Uncertainty::Exact).check(
                        format!("log10(rms drift / {order:e}) within ±0.5 (same order of magnitude)"),
                        decades.abs() <= 0.5,
                    ),
                );
            }
            let times: Vec<f64> = (0..=10).map(|k| tau * k as f64 / 10.0).collect();
            let mut ts = Timeseries::new(&times);
            ts.push("rms_x", times.iter().map(|t| (hbar * t / (2.0 * m)).sqrt()));
            timeseries = ts;
            details["duration"] = json!(tau);
        }
        AnalyticQuantity::ZeroPointEnergy => {
            let d = minimal_uncertainty_dispersions(&model, hbar).map_err(ctx("phase_core"))?[0];
            let Potential::Harmonic { omega } = model.modes()[0].potential else {
                unreachable!("validated as harmonic")
            };
            let energy = d.mean_energy.unwrap();
            let exact = 0.5 * hbar * omega;
            let tight = 4.0 * f64::EPSILON;
            headline.push(
                Headline::new("mean_energy", energy, Uncertainty::Exact).check(
                    format!("zero-point energy hbar*omega/2 = {exact:e} {}; relative tolerance 4 ulp", unit("erg")),
                    rel_err(energy, exact) <= tight,
                ),
            );
            let product = d.var_x * d.var_p;
            headline.push(
                Headline::new("uncertainty_product", product, Uncertainty::Exact).check(
                    "minimal uncertainty product hbar^2/4; relative tolerance 4 ulp",
                    rel_err(product, 0.25 * hbar * hbar) <= tight,
                ),
            );
            if let Some(expect) = c.expect {
                let tol = c.expect_rel_tol;
                headline.push(
                    Headline::new("mean_energy_vs_quoted", energy, Uncertainty::Exact).check(
                        format!("quoted value {expect:e} {}; relative tolerance {tol}", unit("erg")),
                        rel_err(energy, expect) <= tol,
                    ),
                );
            }
            let mut ts = Timeseries::new(&[0.0]);
            ts.push("var_x", [d.var_x]);
            ts.push("var_p", [d.var_p]);
            ts.push("mean_energy", [energy]);
            timeseries = ts;
        }
    }
    Ok(Body::new(headline, timeseries, details))
}

fn ensemble_config(c: &ScenarioConfig) -> EnsembleConfig {
    let base = EnsembleConfig::new(c.paths, c.horizon, c.dt).with_scheme(c.scheme);
    match c.sample_every {
        Some(every) => base.sample_every(every),
        None => base,
    }
}

fn suffix(mode: usize, n: usize) -> String {
    if n == 1 {
        String::new()
    } else {
        format!("_{mode}")
    }
}

fn push_ensemble_columns(ts: &mut Timeseries, result: &EnsembleResult, prefix: &str) {
    let n = result.modes.len();
    for (i, mode) in result.modes.iter().enumerate() {
        let s = suffix(i, n);
        for (name, series) in [
            ("mean_x", &mode.mean_x),
            ("var_x", &mode.var_x),
            ("mean_p", &mode.mean_p),
            ("var_p", &mode.var_p),
        ] {
            ts.push(format!("{prefix}{name}{s}"), series.iter().map(|e| e.value));
            ts.push(format!("{prefix}{name}{s}_se"), series.iter().map(|e| e.se));
        }
    }
    ts.push(format!("{prefix}mean_energy"), result.mean_energy.iter().map(|e| e.value));
    ts.push(format!("{prefix}mean_energy_se"), result.mean_energy.iter().map(|e| e.se));
}

fn exclusion_headline(result: &EnsembleResult) -> Headline {
    let frac = result.excluded_fraction();
    Headline::new("excluded_fraction", frac, Uncertainty::Exact)
        .check("fraction of truncated paths; at most 0.1%", frac <= 1e-3)
}

/// Oracle comparison for linear models: per-column worst deviation in SE
/// units, plus oracle columns for the timeseries.
fn oracle_check(
    model: &HamiltonianModel,
    init: &InitialDistribution,
    spec: &NoiseSpec,
    c: &ScenarioConfig,
    result: &EnsembleResult,
    ts: &mut Timeseries,
    prefix: &str,
    headline: &mut Vec<Headline>,
) -> Result<(), RunError> {
    let oracle =
        covariance_ode_oracle(model, &init.covariance(), spec, c.horizon, c.dt).map_err(ctx("ensemble_stats"))?;
    let n = model.n();
    let mut worst: f64 = 0.0;
    for (i, mode) in result.modes.iter().enumerate() {
        let s = suffix(i, n);
        let mut ox = Vec::new();
        let mut op = Vec::new();
        for (j, &t) in result.times.iter().enumerate() {
            let k = oracle.index_at(t).expect("sample times lie on the oracle grid");
            let (vx, vp) = (oracle.var_x(k, i), oracle.var_p(k, i));
            ox.push(vx);
            op.push(vp);
            for (est, exact) in [(mode.var_x[j], vx), (mode.var_p[j], vp)] {
                let diff = (est.value - exact).abs();
                if est.se > 0.0 {
                    worst = worst.max(diff / est.se);
                } else if diff > 1e-9 * exact.abs().max(1e-300) {
                    worst = f64::INFINITY;
                }
            }
        }
        ts.push(format!("{prefix}var_x{s}_oracle"), ox);
        ts.push(format!("{prefix}var_p{s}_oracle"), op);
    }
    headline.push(Headline::new(format!("{prefix}oracle_max_deviation_se"), worst, Uncertainty::Exact).check(
        "covariance moment equations dSigma/dt = M Sigma + Sigma M^T + Q; every sampled var_x, var_p within 3 SE",
        worst < 3.0,
    ));
    Ok(())
}

fn run_plain_ensemble(c: &ScenarioConfig) -> Result<Body, RunError> {
    let model = c.model.as_ref().unwrap().build();
    let init = initial_distribution(c.initial.as_ref(), model.n());
    let spec = NoiseSpec::new(c.hbar_eff, c.gating, c.seed).map_err(ctx("sde_engine"))?;
    let config = ensemble_config(c);
    let result = run_ensemble(&model, &init, &config, &spec).map_err(ctx("ensemble_stats"))?;
    let mut ts = Timeseries::new(&result.times);
    push_ensemble_columns(&mut ts, &result, "");
    let mut headline = vec![exclusion_headline(&result)];

    let last = result.times.len() - 1;
    for (i, mode) in result.modes.iter().enumerate() {
        let s = suffix(i, model.n());
        let v = mode.var_x[last];
        headline.push(Headline::new(format!("var_x{s}_final"), v.value, Uncertainty::Se(v.se)).note(format!(
            "ensemble variance at t = {}",
            result.times[last]
        )));
    }
    if model.is_linear() {
        oracle_check(&model, &init, &spec, c, &result, &mut ts, "", &mut headline)?;
    }

    let mode0 = model.modes()[0];
    let noisy_free = matches!(mode0.potential, Potential::Flat)
        && c.gating == stochmech_core::Gating::AllOn
        && c.hbar_eff > 0.0;
    if noisy_free && init.var_p[0] == 0.0 && init.center.p[0] == 0.0 {
        let fit = variance_slope(&result, 0).map_err(ctx("ensemble_stats"))?;
        let expected = c.hbar_eff / (2.0 * mode0.mass);
        headline.push(Headline::new("var_x_slope", fit.slope, Uncertainty::Se(fit.se)).check(
            format!(
                "free-particle diffusion law d var_x/dt = hbar/2m = {expected}; within 5% and inside the 95% CI [{:.6}, {:.6}]",
                fit.ci.0, fit.ci.1
            ),
            rel_err(fit.slope, expected) <= 0.05 && fit.contains(expected),
        ));
    }
    if let (Potential::Inverted { lambda }, Some(window)) = (mode0.potential, c.fit_window) {
        let fit = exponential_rate_fit(&result, 0, window).map_err(ctx("ensemble_stats"))?;
        headline.push(rate_headline(fit.rate, fit.rate_se, lambda, window, ""));
    }
    let mut body = Body::new(headline, ts, json!({ "paths": result.paths, "times": result.times.len() }));
    body.excluded = result.excluded;
    Ok(body)
}

fn rate_headline(rate: f64, se: f64, lambda: f64, window: (f64, f64), prefix: &str) -> Headline {
    Headline::new(format!("{prefix}growth_rate"), rate, Uncertainty::Se(se)).check(
        format!(
            "exponential growth of var_x at rate 2*lambda = {}; log-linear fit on t in [{}, {}], within 2%",
            2.0 * lambda,
            window.0,
            window.1
        ),
        rel_err(rate, 2.0 * lambda) <= 0.02,
    )
}

fn run_kick(c: &ScenarioConfig) -> Result<Body, RunError> {
    let model = c.model.as_ref().unwrap().build();
    let mode0 = model.modes()[0];
    let Potential::Inverted { lambda } = mode0.potential else {
        unreachable!("validated as inverted")
    };
    let m = mode0.mass;
    let hbar = c.hbar_eff;
    let config = ensemble_config(c);
    let result = kick_ensemble(&model, hbar, &config, c.seed).map_err(ctx("ensemble_stats"))?;
    let mut ts = Timeseries::new(&result.times);
    push_ensemble_columns(&mut ts, &result, "");
    let exact = |t: f64| hbar / (2.0 * m * lambda) * (2.0 * lambda * t).cosh();
    ts.push("var_x_exact", result.times.iter().map(|&t| exact(t)));
    let mut headline = vec![exclusion_headline(&result)];

    let (vx, vp) = (result.modes[0].var_x[0], result.modes[0].var_p[0]);
    let product = vx.value * vp.value;
    let product_se = ((vx.se * vp.value).powi(2) + (vp.se * vx.value).powi(2)).sqrt();
    headline.push(
        Headline::new("initial_uncertainty_product", product, Uncertainty::Se(product_se)).check(
            format!("minimal uncertainty product hbar^2/4 = {}; within 3 SE", 0.25 * hbar * hbar),
            (product - 0.25 * hbar * hbar).abs() <= 3.0 * product_se,
        ),
    );

    let check_time = c.check_time.unwrap_or(c.horizon);
    let k = result.time_index(check_time).ok_or_else(|| RunError::Core {
        module: "ensemble_stats",
        source: CoreError::InvalidArgument(format!("check_time {check_time} is not a sample time")),
    })?;
    let v = result.modes[0].var_x[k];
    let reference = exact(check_time);
    headline.push(
        Headline::new(format!("var_x_at_{check_time}"), v.value, Uncertainty::Se(v.se)).check(
            format!(
                "propagated minimal-uncertainty kick var_x = (hbar/2m lambda) cosh(2 lambda t) = {reference:.6}; within 5%"
            ),
            rel_err(v.value, reference) <= 0.05,
        ),
    );
    let window = c.fit_window.unwrap_or((0.5 * c.horizon, c.horizon));
    let fit = exponential_rate_fit(&result, 0, window).map_err(ctx("ensemble_stats"))?;
    headline.push(rate_headline(fit.rate, fit.rate_se, lambda, window, ""));

    let mut excluded = result.excluded;
    if c.continuous_noise {
        let init = InitialDistribution::point(PhaseState::origin(model.n()));
        let spec = NoiseSpec::new(hbar, c.gating, c.seed).map_err(ctx("sde_engine"))?;
        let noisy = run_ensemble(&model, &init, &config, &spec).map_err(ctx("ensemble_stats"))?;
        excluded += noisy.excluded;
        push_ensemble_columns(&mut ts, &noisy, "noise_");
        headline.push(exclusion_headline(&noisy));
        headline.last_mut().unwrap().name = "noise_excluded_fraction".into();
        oracle_check(&model, &init, &spec, c, &noisy, &mut ts, "noise_", &mut headline)?;
        let fit = exponential_rate_fit(&noisy, 0, window).map_err(ctx("ensemble_stats"))?;
        headline.push(rate_headline(fit.rate, fit.rate_se, lambda, window, "noise_"));
        let prefactor = hbar / (8.0 * m * lambda);
        let ci = fit.prefactor_ci;
        headline.push(
            Headline::new("noise_prefactor", fit.prefactor, Uncertainty::Se(0.5 * (ci.1 - ci.0) / 1.959_963_984_540_054))
                .check(
                    format!(
                        "continuous-noise asymptote var_x ~ (hbar/8m lambda) e^(2 lambda t) = {prefactor:.6} e^(2 lambda t); inside the 95% CI [{:.6}, {:.6}]",
                        ci.0, ci.1
                    ),
                    ci.0 <= prefactor && prefactor <= ci.1,
                ),
        );
    }
    let mut body = Body::new(headline, ts, json!({ "paths": result.paths, "check_time": check_time }));
    body.excluded = excluded;
    Ok(body)
}

/// Spread of the leading running estimate over the second half of the run.
fn history_spread(report: &LyapunovReport) -> f64 {
    let half = report.history.len() / 2;
    let tail = &report.history[half..];
    let lead = |v: &Vec<f64>| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = tail
        .iter()
        .map(|(_, v)| lead(v))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    if hi >= lo {
        hi - lo
    } else {
        0.0
    }
}

fn run_lyapunov(c: &ScenarioConfig) -> Result<Body, RunError> {
    let targets: Vec<_> = match &c.model {
        Some(m) => vec![m.clone()],
        None => c.targets.clone(),
    };
    let settings = LyapunovSettings {
        transient: c.transient.unwrap_or(0.1 * c.horizon),
        ..LyapunovSettings::new(c.horizon, c.dt, c.renorm_interval)
    };
    let reports: Vec<Result<LyapunovReport, CoreError>> = targets
        .par_iter()
        .map(|t| {
            let model = t.build();
            let start = initial_center(c, &model);
            match lyapunov_spectrum_with(&model, &start, &settings) {
                Err(CoreError::NonFiniteTrajectory { partial }) => Ok(*partial),
                other => other,
            }
        })
        .collect();

    let mut headline = Vec::new();
    let mut details = Vec::new();
    let mut ts: Option<Timeseries> = None;
    for (target, report) in targets.iter().zip(reports) {
        let report = report.map_err(ctx("stability"))?;
        let model = target.build();
        let label = &target.label;
        let spread = history_spread(&report);
        let lead = report.spectrum[0];
        let mut h = Headline::new(format!("{label}_lambda_max"), lead, Uncertainty::Se(spread));
        let mut ks = Headline::new(format!("{label}_ks_entropy"), report.ks_entropy, Uncertainty::Se(spread));
        match model.modes()[0].potential {
            Potential::Inverted { lambda } => {
                h = h.check(
                    format!("leading exponent of the inverted oscillator = lambda = {lambda}; within 1%"),
                    report.valid && rel_err(lead, lambda) <= 0.01,
                );
                ks = ks.note("sum of positive exponents");
            }
            Potential::Flat | Potential::Harmonic { .. } => {
                h = h.check("integrable linear flow: |lambda_i| < 1e-3", report.valid && lead.abs() < 1e-3);
                ks = ks.check(
                    "integrable linear flow: KS entropy h = 0 (|h| < 1e-3)",
                    report.valid && report.ks_entropy.abs() < 1e-3,
                );
            }
            _ => {
                h = h.note("leading Lyapunov exponent");
                ks = ks.note("sum of positive exponents");
            }
        }
        let sym = report.symmetry_defect();
        headline.push(h);
        headline.push(ks);
        headline.push(Headline::new(format!("{label}_symmetry_defect"), sym, Uncertainty::Exact).check(
            "symplectic pairing lambda_i + lambda_(2n+1-i) = 0; defect below 5e-3",
            report.valid && sym < 5e-3,
        ));
        details.push(json!({
            "label": label,
            "model": target.name,
            "params": target.params,
            "spectrum": report.spectrum,
            "converged": report.converged,
            "valid": report.valid,
            "horizon_reached": report.horizon,
            "classification": classification_labels(&model, &initial_center(c, &model)),
        }));
        let times: Vec<f64> = report.history.iter().map(|(t, _)| *t).collect();
        let series = ts.get_or_insert_with(|| Timeseries::new(&times));
        if series.rows.len() == times.len() {
            let k = report.history.first().map_or(0, |(_, v)| v.len());
            for i in 0..k {
                series.push(format!("{label}_lambda_{i}"), report.history.iter().map(|(_, v)| v[i]));
            }
        }
    }
    Ok(Body::new(
        headline,
        ts.unwrap_or_default(),
        json!({ "transient": settings.transient, "targets": details }),
    ))
}

fn grid_spec(g: &GridSettings, scale: usize) -> GridSpec {
    GridSpec {
        x_bounds: g.x_bounds,
        p_bounds: g.p_bounds,
        n_x: g.n_x * scale,
        n_p: g.n_p * scale,
        x_boundary: g.x_boundary,
        p_boundary: g.p_boundary,
    }
}

/// Largest stable step (with 10% margin) that divides the sampling interval
/// when that interval divides the horizon, else the horizon itself.
fn auto_dt(max_dt: f64, interval: f64, horizon: f64) -> f64 {
    let ratio = horizon / interval;
    let span = if (ratio - ratio.round()).abs() < 1e-9 * ratio.max(1.0) && interval <= horizon {
        interval
    } else {
        horizon
    };
    span / (span / max_dt).ceil()
}

struct MasterRun {
    outcome: EvolutionOutcome,
    dt: f64,
    diffusing: bool,
}

fn master_run(
    c: &ScenarioConfig,
    g: &GridSettings,
    model: &HamiltonianModel,
    init: &InitialDistribution,
    scale: usize,
) -> Result<(DistributionGrid, MasterRun), RunError> {
    let grid = build_grid(&grid_spec(g, scale), init).map_err(ctx("fokker_planck"))?;
    let dt = match g.dt {
        Some(dt) => dt / scale as f64,
        None => {
            let max_dt = MasterEqConfig::stable_dt(model, &grid, c.hbar_eff, c.gating, 0.9);
            auto_dt(max_dt.min(c.horizon), g.entropy_interval, c.horizon)
        }
    };
    let mut mc = MasterEqConfig::new(model, &grid, c.hbar_eff, c.gating, dt, g.entropy_interval.max(dt))
        .map_err(ctx("fokker_planck"))?;
    mc.limiter = g.limiter;
    mc.strang = g.strang;
    mc.stop_when_stationary = g.stop_when_stationary;
    let diffusing = !DiffusionCoefficients::new(model, &grid, c.hbar_eff, c.gating, mc.rate_tolerance).is_zero();
    let outcome = evolve_master_equation(model, &grid, c.horizon, &mc).map_err(ctx("fokker_planck"))?;
    Ok((grid, MasterRun { outcome, dt, diffusing }))
}

fn entropy_floor(outcome: &EvolutionOutcome) -> f64 {
    let s0 = outcome.entropy[0].1;
    outcome.entropy.iter().map(|(_, s)| (s - s0).abs()).fold(0.0, f64::max)
}

/// Noiseless stochastic paths from the initial distribution against plain
/// leapfrog; returns the number of (path, scheme) pairs that differ in any bit.
fn noiseless_mismatches(c: &ScenarioConfig, model: &HamiltonianModel, init: &InitialDistribution) -> Result<usize, RunError> {
    let spec = NoiseSpec::new(0.0, c.gating, c.seed).map_err(ctx("sde_engine"))?;
    let steps = 200;
    let dt = c.horizon / steps as f64;
    let mut mismatches = 0;
    for path in 0..16u64 {
        let start = init.sample(c.seed, path);
        let mut reference = vec![start.clone()];
        let mut s = start.clone();
        model.normalize(&mut s);
        reference[0] = s.clone();
        for _ in 0..steps {
            s = step_symplectic_deterministic(model, &s, dt).map_err(ctx("sde_engine"))?;
            model.normalize(&mut s);
            reference.push(s.clone());
        }
        for scheme in [Scheme::SplitStep, Scheme::EulerMaruyama, Scheme::Heun] {
            let traj = integrate_path(model, &start, c.horizon, dt, &spec, scheme, path).map_err(ctx("sde_engine"))?;
            let same = traj.states.len() == reference.len()
                && traj.states.iter().zip(&reference).all(|(a, b)| a.x == b.x && a.p == b.p);
            if !same {
                mismatches += 1;
            }
        }
    }
    Ok(mismatches)
}

fn run_master(c: &ScenarioConfig) -> Result<Body, RunError> {
    let model = c.model.as_ref().unwrap().build();
    let g = c.grid.as_ref().unwrap();
    let init = initial_distribution(c.initial.as_ref(), 1);
    let (grid, run) = master_run(c, g, &model, &init, 1)?;
    let out = &run.outcome;

    let times: Vec<f64> = out.entropy.iter().map(|(t, _)| *t).collect();
    let mut ts = Timeseries::new(&times);
    ts.push("entropy", out.entropy.iter().map(|(_, s)| *s));
    ts.push("l1_rate", std::iter::once(f64::NAN).chain(out.l1_rate.iter().copied()));

    let mut headline = vec![
        Headline::new("max_mass_defect", out.max_mass_defect, Uncertainty::Exact)
            .check("conservative fluxes: |mass - 1| below 1e-12 after every sample", out.max_mass_defect < 1e-12),
        Headline::new("min_density", out.min_density, Uncertainty::Exact)
            .check("positivity: density never negative", out.min_density >= 0.0),
        Headline::new("initial_entropy", out.entropy[0].1, Uncertainty::Exact).note("Gibbs entropy -sum rho ln rho dA"),
        Headline::new("final_entropy", out.entropy.last().unwrap().1, Uncertainty::Exact)
            .note("Gibbs entropy -sum rho ln rho dA"),
    ];
    if run.diffusing {
        let worst = out.worst_entropy_decrease();
        headline.push(Headline::new("worst_entropy_step", worst, Uncertainty::Exact).check(
            "H-theorem: Gibbs entropy non-decreasing between samples, tolerance -1e-9",
            worst >= -1e-9,
        ));
    }
    if g.require_stationarity || g.stop_when_stationary {
        let rate = out.l1_rate.last().copied().unwrap_or(f64::INFINITY);
        let h = Headline::new("final_l1_rate", rate, Uncertainty::Exact);
        headline.push(if g.require_stationarity {
            h.check("operational stationarity: L1 change per unit time below 1e-6", out.stationary)
        } else {
            h.note("L1 change per unit time at the last sample")
        });
    }
    let mut details = json!({
        "dt": run.dt,
        "steps": out.steps,
        "stationary_at": out.stationary_at,
        "grid": { "n_x": grid.n_x, "n_p": grid.n_p, "regularized": grid.regularized },
        "uniform_entropy": (grid.n_x as f64 * grid.n_p as f64 * grid.cell_area()).ln(),
    });

    if c.hbar_eff == 0.0 {
        let floor = entropy_floor(out);
        headline.push(
            Headline::new("entropy_floor", floor, Uncertainty::Exact).note("max |S(t) - S(0)| over samples"),
        );
        let mismatches = noiseless_mismatches(c, &model, &init)?;
        headline.push(Headline::new("noiseless_sde_mismatches", mismatches as f64, Uncertainty::Exact).check(
            "zero-noise limit: every stochastic scheme bit-identical to leapfrog on 16 paths",
            mismatches == 0,
        ));
        if g.refinement_check {
            let (_, fine) = master_run(c, g, &model, &init, 2)?;
            let fine_floor = entropy_floor(&fine.outcome);
            headline.push(Headline::new("entropy_floor_refined", fine_floor, Uncertainty::Exact).check(
                format!("Liouville limit: entropy floor shrinks under 2x refinement (coarse {floor:.6e})"),
                fine_floor < floor,
            ));
            let fine_times: Vec<f64> = fine.outcome.entropy.iter().map(|(t, _)| *t).collect();
            if fine_times.len() == times.len() {
                ts.push("entropy_refined", fine.outcome.entropy.iter().map(|(_, s)| *s));
            }
            details["refined_dt"] = json!(fine.dt);
        }
    }
    debug_assert!((gibbs_entropy(&out.grid) - out.entropy.last().unwrap().1).abs() < 1e-12);
    let mut body = Body::new(headline, ts, details);
    body.density = Some(out.grid.clone());
    Ok(body)
}

const PLOT_SCRIPT: &str = r#"# Plots every estimate column of timeseries.csv against time.
# Usage: python plot.py [timeseries.csv]
import csv
import sys

import matplotlib.pyplot as plt

path = sys.argv[1] if len(sys.argv) > 1 else "timeseries.csv"
with open(path) as f:
    rows = list(csv.DictReader(f))
cols = [c for c in rows[0] if c != "time" and not c.endswith("_se")]
t = [float(r["time"]) for r in rows]
fig, axes = plt.subplots(len(cols), 1, sharex=True, figsize=(7, 2.2 * len(cols)), squeeze=False)
for ax, c in zip(axes[:, 0], cols):
    y = [float(r[c]) if r[c] else float("nan") for r in rows]
    se = c + "_se"
    if se in rows[0]:
        e = [float(r[se]) if r[se] else 0.0 for r in rows]
        ax.errorbar(t, y, yerr=e, fmt=".-", capsize=2)
    else:
        ax.plot(t, y, ".-")
    ax.set_ylabel(c)
axes[-1, 0].set_xlabel("time")
fig.tight_layout()
fig.savefig(path.rsplit(".", 1)[0] + ".png", dpi=120)
"#;

/// Writes `timeseries.csv`, `summary.json`, `timing.json`, density snapshots
/// for grid runs, and `plot.py` when requested.
pub fn write_outputs(output: &RunOutput, dir: &Path, emit_plots: bool) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("timeseries.csv"), output.timeseries.to_csv())?;
    fs::write(dir.join("summary.json"), output.summary.to_json())?;
    fs::write(
        dir.join("timing.json"),
        format!("{}\n", json!({ "wall_clock_seconds": output.wall_clock_seconds })),
    )?;
    if let Some(grid) = &output.density {
        let mut csv = BufWriter::new(fs::File::create(dir.join("density.csv"))?);
        grid.write_csv(&mut csv)?;
        csv.flush()?;
        let mut bin = BufWriter::new(fs::File::create(dir.join("density.shfp"))?);
        grid.write_binary(&mut bin)?;
        bin.flush()?;
    }
    if emit_plots {
        fs::write(dir.join("plot.py"), PLOT_SCRIPT)?;
    }
    Ok(())
}
