//! Scenario files: flat TOML with a `scenario` kind, a catalog model and its
//! parameters, plus kind-specific settings. Every key must be consumed by the
//! kind it appears in.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::Serialize;
use stochmech_core::fokker_planck::{Boundary, Limiter};
use stochmech_core::{builtin_model, Error as CoreError, Gating, HamiltonianModel, Scheme};
use thiserror::Error;
use toml::{Table, Value};

/// Physical ħ in erg·s, used when `units = "cgs"`.
pub const HBAR_CGS: f64 = 1.054_571_817e-27;

pub const DEFAULT_DT: f64 = 1e-3;
pub const DEFAULT_PATHS: usize = 10_000;
pub const DEFAULT_HBAR: f64 = 1.0;
pub const DEFAULT_SEED: u64 = 42;
/// Ensembles without an explicit horizon run to t = 1.
pub const DEFAULT_ENSEMBLE_HORIZON: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown key `{key}`{context}")]
    UnknownKey { key: String, context: String },
    #[error("invalid value for `{key}`: {reason}")]
    InvalidValue { key: String, reason: String },
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Ensemble,
    KickEnsemble,
    Lyapunov,
    MasterEquation,
    Analytic,
}

impl ScenarioKind {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "ensemble" => Self::Ensemble,
            "kick_ensemble" => Self::KickEnsemble,
            "lyapunov" => Self::Lyapunov,
            "master_equation" => Self::MasterEquation,
            "analytic" => Self::Analytic,
            _ => return None,
        })
    }

    /// Keys this kind consumes besides the common ones and model parameters.
    fn keys(self) -> &'static [&'static str] {
        match self {
            Self::Analytic => &["quantity", "horizon", "hbar_eff", "expect", "expect_rel_tol", "expect_order"],
            Self::Ensemble => &[
                "hbar_eff", "gating", "scheme", "dt", "horizon", "N", "sample_every", "initial", "fit_window",
            ],
            Self::KickEnsemble => &[
                "hbar_eff", "gating", "scheme", "dt", "horizon", "N", "sample_every", "fit_window", "check_time",
                "continuous_noise",
            ],
            Self::Lyapunov => &["dt", "horizon", "renorm_interval", "transient", "initial", "targets"],
            Self::MasterEquation => &["hbar_eff", "gating", "horizon", "grid", "initial"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    Model,
    Cgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalyticQuantity {
    /// rms coordinate drift √(ħt/2m) of a free mass.
    FreeDriftRms,
    /// Mean energy of the minimal-uncertainty state, ħω/2.
    ZeroPointEnergy,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSpec {
    pub name: String,
    pub params: BTreeMap<String, f64>,
    pub label: String,
}

impl ModelSpec {
    pub fn build(&self) -> HamiltonianModel {
        builtin_model(&self.name, &self.params).expect("validated at parse time")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InitialSettings {
    pub x: Vec<f64>,
    pub p: Vec<f64>,
    pub var_x: Vec<f64>,
    pub var_p: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSettings {
    pub x_bounds: (f64, f64),
    pub p_bounds: (f64, f64),
    pub n_x: usize,
    pub n_p: usize,
    #[serde(serialize_with = "ser_boundary")]
    pub x_boundary: Boundary,
    #[serde(serialize_with = "ser_boundary")]
    pub p_boundary: Boundary,
    /// `None` picks 90% of the largest stable step.
    pub dt: Option<f64>,
    pub entropy_interval: f64,
    #[serde(serialize_with = "ser_limiter")]
    pub limiter: Limiter,
    pub strang: bool,
    pub stop_when_stationary: bool,
    pub require_stationarity: bool,
    /// Repeat the run at twice the resolution and compare entropy drift.
    pub refinement_check: bool,
}

fn ser_boundary<S: serde::Serializer>(b: &Boundary, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(boundary_name(*b))
}

fn ser_limiter<S: serde::Serializer>(l: &Limiter, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(limiter_name(*l))
}

pub fn boundary_name(b: Boundary) -> &'static str {
    match b {
        Boundary::Periodic => "periodic",
        Boundary::ZeroFlux => "zero_flux",
    }
}

pub fn limiter_name(l: Limiter) -> &'static str {
    match l {
        Limiter::Upwind => "upwind",
        Limiter::Minmod => "minmod",
        Limiter::VanLeer => "van_leer",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub kind: ScenarioKind,
    pub units: Units,
    pub model: Option<ModelSpec>,
    /// Lyapunov runs over several models.
    pub targets: Vec<ModelSpec>,
    pub hbar_eff: f64,
    #[serde(serialize_with = "ser_gating")]
    pub gating: Gating,
    #[serde(serialize_with = "ser_scheme")]
    pub scheme: Scheme,
    pub dt: f64,
    pub horizon: f64,
    pub paths: usize,
    pub seed: u64,
    pub sample_every: Option<f64>,
    pub fit_window: Option<(f64, f64)>,
    pub check_time: Option<f64>,
    pub continuous_noise: bool,
    pub renorm_interval: f64,
    pub transient: Option<f64>,
    pub initial: Option<InitialSettings>,
    pub grid: Option<GridSettings>,
    pub quantity: Option<AnalyticQuantity>,
    pub expect: Option<f64>,
    pub expect_rel_tol: f64,
    pub expect_order: Option<f64>,
    /// Not echoed into summaries, so output location cannot change their bytes.
    #[serde(skip)]
    pub out_dir: Option<PathBuf>,
    pub emit_plots: bool,
}

fn ser_gating<S: serde::Serializer>(g: &Gating, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(g.as_str())
}

fn ser_scheme<S: serde::Serializer>(g: &Scheme, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(g.as_str())
}

const COMMON_KEYS: &[&str] = &["name", "scenario", "model", "units", "seed", "out_dir", "emit_plots"];

/// Every parameter name any catalog model accepts.
const PARAM_KEYS: &[&str] = &["m", "omega", "ω", "lambda", "λ", "gl", "g·l", "well", "dof"];

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

pub fn parse_config(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let table: Table = text.parse().map_err(|e: toml::de::Error| {
        let (line, column) = e.span().map_or((1, 1), |s| line_col(text, s.start));
        ConfigError::Syntax {
            line,
            column,
            message: e.message().to_string(),
        }
    })?;
    let mut r = Reader::new(table, "");

    let kind_name = r.req_str("scenario")?;
    let kind = ScenarioKind::parse(&kind_name).ok_or_else(|| {
        invalid(
            "scenario",
            format!("`{kind_name}` is not one of ensemble, kick_ensemble, lyapunov, master_equation, analytic"),
        )
    })?;

    // strictness first, so a typo is reported as such rather than as a
    // missing parameter further down
    for key in r.table.keys() {
        if !COMMON_KEYS.contains(&key.as_str())
            && !PARAM_KEYS.contains(&key.as_str())
            && !kind.keys().contains(&key.as_str())
        {
            return Err(ConfigError::UnknownKey {
                key: key.clone(),
                context: format!(" for scenario kind `{kind_name}`"),
            });
        }
    }

    let units = match r.opt_str("units")?.as_deref() {
        None | Some("model") => Units::Model,
        Some("cgs") => Units::Cgs,
        Some(other) => return Err(invalid("units", format!("`{other}` is not `model` or `cgs`"))),
    };
    let hbar_eff = match (units, r.opt_f64("hbar_eff")?) {
        (Units::Cgs, Some(_)) => {
            return Err(invalid("hbar_eff", "cgs units fix ħ to its physical value; remove hbar_eff"))
        }
        (Units::Cgs, None) => HBAR_CGS,
        (Units::Model, Some(h)) if !(h >= 0.0 && h.is_finite()) => {
            return Err(invalid("hbar_eff", "must be finite and ≥ 0"))
        }
        (Units::Model, Some(h)) => h,
        (Units::Model, None) => DEFAULT_HBAR,
    };

    let mut params = BTreeMap::new();
    for key in PARAM_KEYS {
        if let Some(v) = r.opt_f64(key)? {
            params.insert(key.to_string(), v);
        }
    }
    let model = match r.opt_str("model")? {
        Some(name) => Some(model_spec(&name, params, "")?),
        None if !params.is_empty() => {
            let key = params.keys().next().unwrap().clone();
            return Err(invalid(&key, "model parameters given without a `model`"));
        }
        None => None,
    };

    let targets = match r.take("targets") {
        Some(Value::Array(items)) => items
            .into_iter()
            .enumerate()
            .map(|(i, item)| target_spec(item, i))
            .collect::<Result<Vec<_>, _>>()?,
        Some(_) => return Err(invalid("targets", "expected an array of tables")),
        None => Vec::new(),
    };
    if model.is_none() && !(kind == ScenarioKind::Lyapunov && !targets.is_empty()) {
        return Err(invalid("model", "required"));
    }

    let gating = match r.opt_str("gating")? {
        Some(g) => g.parse().map_err(|_| invalid("gating", format!("`{g}` is not unstable_only, all_on or off")))?,
        None => Gating::UnstableOnly,
    };
    let scheme = match r.opt_str("scheme")? {
        Some(s) => s.parse().map_err(|_| invalid("scheme", format!("`{s}` is not split_step, euler_maruyama or heun")))?,
        None => Scheme::SplitStep,
    };
    let dt = r.opt_positive("dt")?.unwrap_or(DEFAULT_DT);
    let horizon = r.opt_positive("horizon")?;
    let paths = match r.opt_i64("N")? {
        Some(n) if n >= 2 => n as usize,
        Some(n) => return Err(invalid("N", format!("need at least 2 paths, got {n}"))),
        None => DEFAULT_PATHS,
    };
    let seed = match r.take("seed") {
        None => DEFAULT_SEED,
        Some(Value::Integer(s)) if s >= 0 => s as u64,
        // TOML integers are signed 64-bit; larger seeds go in as strings
        Some(Value::String(s)) => s.parse().map_err(|_| invalid("seed", "not an unsigned 64-bit integer"))?,
        Some(_) => return Err(invalid("seed", "expected a non-negative integer")),
    };
    let sample_every = r.opt_positive("sample_every")?;
    let fit_window = match r.opt_f64_array("fit_window")? {
        Some(v) if v.len() == 2 && v[0] < v[1] => Some((v[0], v[1])),
        Some(_) => return Err(invalid("fit_window", "expected [start, end] with start < end")),
        None => None,
    };
    let check_time = r.opt_positive("check_time")?;
    let continuous_noise = r.opt_bool("continuous_noise")?.unwrap_or(false);
    let renorm_interval = r.opt_positive("renorm_interval")?.unwrap_or(0.1);
    let transient = match r.opt_f64("transient")? {
        Some(t) if t < 0.0 => return Err(invalid("transient", "must be ≥ 0")),
        t => t,
    };
    let quantity = match r.opt_str("quantity")?.as_deref() {
        Some("free_drift_rms") => Some(AnalyticQuantity::FreeDriftRms),
        Some("zero_point_energy") => Some(AnalyticQuantity::ZeroPointEnergy),
        Some(other) => {
            return Err(invalid("quantity", format!("`{other}` is not free_drift_rms or zero_point_energy")))
        }
        None => None,
    };
    let expect = r.opt_f64("expect")?;
    let expect_rel_tol = r.opt_positive("expect_rel_tol")?.unwrap_or(0.01);
    let expect_order = r.opt_positive("expect_order")?;
    let initial = match r.take("initial") {
        Some(Value::Table(t)) => Some(initial_settings(t)?),
        Some(_) => return Err(invalid("initial", "expected a table")),
        None => None,
    };
    let grid = match r.take("grid") {
        Some(Value::Table(t)) => Some(grid_settings(t)?),
        Some(_) => return Err(invalid("grid", "expected a table")),
        None => None,
    };
    let name = r.opt_str("name")?.unwrap_or_else(|| kind_name.clone());
    let out_dir = r.opt_str("out_dir")?.map(PathBuf::from);
    let emit_plots = r.opt_bool("emit_plots")?.unwrap_or(false);
    r.finish()?;

    let config = ScenarioConfig {
        name,
        kind,
        units,
        model,
        targets,
        hbar_eff,
        gating,
        scheme,
        dt,
        horizon: horizon.unwrap_or(match kind {
            ScenarioKind::Ensemble | ScenarioKind::KickEnsemble => DEFAULT_ENSEMBLE_HORIZON,
            _ => 0.0,
        }),
        paths,
        seed,
        sample_every,
        fit_window,
        check_time,
        continuous_noise,
        renorm_interval,
        transient,
        initial,
        grid,
        quantity,
        expect,
        expect_rel_tol,
        expect_order,
        out_dir,
        emit_plots,
    };
    validate_kind(&config, horizon.is_some())?;
    Ok(config)
}

fn validate_kind(c: &ScenarioConfig, has_horizon: bool) -> Result<(), ConfigError> {
    let model = c.model.as_ref().map(ModelSpec::build);
    let dims = |m: &HamiltonianModel, init: &InitialSettings| -> Result<(), ConfigError> {
        let n = m.n();
        let lens = [init.x.len(), init.p.len(), init.var_x.len(), init.var_p.len()];
        if lens.iter().any(|&l| l != n && l != 1) {
            return Err(invalid("initial", format!("expected {n} entries per field for `{}`", m.name())));
        }
        Ok(())
    };
    match c.kind {
        ScenarioKind::Analytic => {
            let q = c.quantity.ok_or_else(|| invalid("quantity", "required for analytic scenarios"))?;
            let m = model.unwrap();
            match q {
                AnalyticQuantity::FreeDriftRms => {
                    if m.name() != "free_particle" {
                        return Err(invalid("model", "free_drift_rms needs free_particle"));
                    }
                    if !has_horizon {
                        return Err(invalid("horizon", "required for free_drift_rms"));
                    }
                }
                AnalyticQuantity::ZeroPointEnergy => {
                    if m.name() != "harmonic" {
                        return Err(invalid("model", "zero_point_energy needs harmonic"));
                    }
                    if has_horizon {
                        return Err(ConfigError::UnknownKey {
                            key: "horizon".into(),
                            context: " (unused by zero_point_energy)".into(),
                        });
                    }
                }
            }
        }
        ScenarioKind::Ensemble | ScenarioKind::KickEnsemble => {
            let m = model.unwrap();
            if let Some(init) = &c.initial {
                dims(&m, init)?;
            }
            if c.kind == ScenarioKind::KickEnsemble {
                if m.name() != "inverted" {
                    return Err(invalid("model", "kick ensembles need the inverted oscillator"));
                }
                if !c.continuous_noise && c.gating != Gating::UnstableOnly {
                    return Err(invalid("gating", "only used together with continuous_noise = true"));
                }
            }
            if let Some(t) = c.check_time {
                if t > c.horizon {
                    return Err(invalid("check_time", "beyond the horizon"));
                }
            }
        }
        ScenarioKind::Lyapunov => {
            if !has_horizon {
                return Err(invalid("horizon", "required"));
            }
            if c.model.is_some() && !c.targets.is_empty() {
                return Err(invalid("targets", "give either `model` or `targets`, not both"));
            }
            if let Some(init) = &c.initial {
                if init.var_x.iter().chain(&init.var_p).any(|&v| v != 0.0) {
                    return Err(invalid("initial", "Lyapunov runs start from a point; drop var_x/var_p"));
                }
            }
        }
        ScenarioKind::MasterEquation => {
            if !has_horizon {
                return Err(invalid("horizon", "required"));
            }
            let m = model.unwrap();
            if m.n() != 1 {
                return Err(invalid("dof", "the master equation is solved for one degree of freedom"));
            }
            if c.grid.is_none() {
                return Err(invalid("grid", "required"));
            }
            match &c.initial {
                Some(init) => dims(&m, init)?,
                None => return Err(invalid("initial", "required")),
            }
        }
    }
    Ok(())
}

fn model_spec(name: &str, params: BTreeMap<String, f64>, context: &str) -> Result<ModelSpec, ConfigError> {
    match builtin_model(name, &params) {
        Ok(_) => Ok(ModelSpec {
            name: name.to_string(),
            params,
            label: name.to_string(),
        }),
        Err(CoreError::UnknownModel(m)) => Err(invalid(&format!("{context}model"), format!("unknown model `{m}`"))),
        Err(CoreError::UnknownParameter { param, .. }) => Err(ConfigError::UnknownKey {
            key: format!("{context}{param}"),
            context: format!(" (not a parameter of `{name}`)"),
        }),
        Err(CoreError::MissingParameter { param, .. }) => {
            Err(invalid(&format!("{context}{param}"), format!("required by `{name}`")))
        }
        Err(e) => Err(invalid(&format!("{context}model"), e.to_string())),
    }
}

fn target_spec(item: Value, index: usize) -> Result<ModelSpec, ConfigError> {
    let ctx = format!("targets[{index}].");
    let Value::Table(t) = item else {
        return Err(invalid(&format!("targets[{index}]"), "expected a table"));
    };
    let mut r = Reader::new(t, &ctx);
    let name = r.req_str("model")?;
    let label = r.opt_str("label")?;
    let mut params = BTreeMap::new();
    for key in PARAM_KEYS {
        if let Some(v) = r.opt_f64(key)? {
            params.insert(key.to_string(), v);
        }
    }
    r.finish()?;
    let mut spec = model_spec(&name, params, &ctx)?;
    if let Some(label) = label {
        spec.label = label;
    }
    Ok(spec)
}

fn initial_settings(t: Table) -> Result<InitialSettings, ConfigError> {
    let mut r = Reader::new(t, "initial.");
    let mut field = |key: &str, default: f64| -> Result<Vec<f64>, ConfigError> {
        Ok(r.opt_f64_or_array(key)?.unwrap_or_else(|| vec![default]))
    };
    let x = field("x", 0.0)?;
    let p = field("p", 0.0)?;
    let var_x = field("var_x", 0.0)?;
    let var_p = field("var_p", 0.0)?;
    r.finish()?;
    let n = x.len();
    let broadcast = |v: Vec<f64>| if v.len() == 1 && n > 1 { vec![v[0]; n] } else { v };
    let init = InitialSettings {
        p: broadcast(p),
        var_x: broadcast(var_x),
        var_p: broadcast(var_p),
        x,
    };
    if init.var_x.iter().chain(&init.var_p).any(|&v| !(v >= 0.0)) {
        return Err(invalid("initial", "variances must be ≥ 0"));
    }
    Ok(init)
}

fn grid_settings(t: Table) -> Result<GridSettings, ConfigError> {
    let mut r = Reader::new(t, "grid.");
    let bounds = |r: &mut Reader, key: &str| -> Result<(f64, f64), ConfigError> {
        match r.opt_f64_array(key)? {
            Some(v) if v.len() == 2 && v[0] < v[1] => Ok((v[0], v[1])),
            Some(_) => Err(invalid(&format!("grid.{key}"), "expected [min, max] with min < max")),
            None => Err(invalid(&format!("grid.{key}"), "required")),
        }
    };
    let x_bounds = bounds(&mut r, "x_bounds")?;
    let p_bounds = bounds(&mut r, "p_bounds")?;
    let n = r.opt_i64("n")?;
    let n_x = r.opt_i64("n_x")?.or(n);
    let n_p = r.opt_i64("n_p")?.or(n);
    let (n_x, n_p) = match (n_x, n_p) {
        (Some(a), Some(b)) if a >= 16 && b >= 16 => (a as usize, b as usize),
        (Some(_), Some(_)) => return Err(invalid("grid.n", "at least 16 cells per axis")),
        _ => return Err(invalid("grid.n", "give `n` or both `n_x` and `n_p`")),
    };
    let boundary = |r: &mut Reader, key: &str| -> Result<Boundary, ConfigError> {
        match r.opt_str(key)?.as_deref() {
            None | Some("zero_flux") => Ok(Boundary::ZeroFlux),
            Some("periodic") => Ok(Boundary::Periodic),
            Some(other) => Err(invalid(&format!("grid.{key}"), format!("`{other}` is not periodic or zero_flux"))),
        }
    };
    let x_boundary = boundary(&mut r, "x_boundary")?;
    let p_boundary = boundary(&mut r, "p_boundary")?;
    let dt = r.opt_positive("dt")?;
    let entropy_interval = r.opt_positive("entropy_interval")?.unwrap_or(1.0);
    let limiter = match r.opt_str("limiter")?.as_deref() {
        None | Some("van_leer") => Limiter::VanLeer,
        Some("minmod") => Limiter::Minmod,
        Some("upwind") => Limiter::Upwind,
        Some(other) => {
            return Err(invalid("grid.limiter", format!("`{other}` is not upwind, minmod or van_leer")))
        }
    };
    let strang = r.opt_bool("strang")?.unwrap_or(true);
    let stop_when_stationary = r.opt_bool("stop_when_stationary")?.unwrap_or(false);
    let require_stationarity = r.opt_bool("require_stationarity")?.unwrap_or(false);
    let refinement_check = r.opt_bool("refinement_check")?.unwrap_or(false);
    r.finish()?;
    Ok(GridSettings {
        x_bounds,
        p_bounds,
        n_x,
        n_p,
        x_boundary,
        p_boundary,
        dt,
        entropy_interval,
        limiter,
        strang,
        stop_when_stationary,
        require_stationarity,
        refinement_check,
    })
}

/// Takes typed values out of a table; [`finish`](Reader::finish) rejects leftovers.
struct Reader {
    table: Table,
    prefix: String,
}

impl Reader {
    fn new(table: Table, prefix: &str) -> Self {
        Self {
            table,
            prefix: prefix.to_string(),
        }
    }

    fn key(&self, key: &str) -> String {
        format!("{}{key}", self.prefix)
    }

    fn take(&mut self, key: &str) -> Option<Value> {
        self.table.remove(key)
    }

    fn finish(self) -> Result<(), ConfigError> {
        match self.table.keys().next() {
            Some(k) => Err(ConfigError::UnknownKey {
                key: format!("{}{k}", self.prefix),
                context: String::new(),
            }),
            None => Ok(()),
        }
    }

    fn opt_str(&mut self, key: &str) -> Result<Option<String>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(_) => Err(invalid(&self.key(key), "expected a string")),
        }
    }

    fn req_str(&mut self, key: &str) -> Result<String, ConfigError> {
        self.opt_str(key)?.ok_or_else(|| invalid(&self.key(key), "required"))
    }

    fn opt_bool(&mut self, key: &str) -> Result<Option<bool>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Boolean(b)) => Ok(Some(b)),
            Some(_) => Err(invalid(&self.key(key), "expected true or false")),
        }
    }

    fn opt_i64(&mut self, key: &str) -> Result<Option<i64>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Integer(i)) => Ok(Some(i)),
            Some(Value::Float(f)) if f.fract() == 0.0 && f.abs() < 9e15 => Ok(Some(f as i64)),
            Some(_) => Err(invalid(&self.key(key), "expected an integer")),
        }
    }

    fn opt_f64(&mut self, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => number(&v).map(Some).ok_or_else(|| invalid(&self.key(key), "expected a number")),
        }
    }

    fn opt_positive(&mut self, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.opt_f64(key)? {
            Some(v) if !(v > 0.0 && v.is_finite()) => {
                Err(invalid(&self.key(key), format!("must be positive, got {v}")))
            }
            v => Ok(v),
        }
    }

    fn opt_f64_array(&mut self, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Array(items)) => items
                .iter()
                .map(number)
                .collect::<Option<Vec<_>>>()
                .map(Some)
                .ok_or_else(|| invalid(&self.key(key), "expected an array of numbers")),
            Some(_) => Err(invalid(&self.key(key), "expected an array of numbers")),
        }
    }

    fn opt_f64_or_array(&mut self, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        match self.table.get(key) {
            Some(Value::Array(_)) => self.opt_f64_array(key),
            _ => Ok(self.opt_f64(key)?.map(|v| vec![v])),
        }
    }
}

fn number(v: &Value) -> Option<f64> {
    match v {
        Value::Float(f) => Some(*f),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config("scenario = \"ensemble\"\nmodel = \"free_particle\"\nm = 1\n").unwrap();
        assert_eq!(c.kind, ScenarioKind::Ensemble);
        assert_eq!(c.dt, 1e-3);
        assert_eq!(c.paths, 10_000);
        assert_eq!(c.gating, Gating::UnstableOnly);
        assert_eq!(c.hbar_eff, 1.0);
        assert_eq!(c.seed, 42);
        assert_eq!(c.model.unwrap().params["m"], 1.0);
    }

    #[test]
    fn typos_are_unknown_keys() {
        let err = parse_config("scenario = \"ensemble\"\nmodel = \"free_particle\"\nm = 1\nhbar_efff = 1\n").unwrap_err();
        assert_eq!(
            err,
            ConfigError::UnknownKey {
                key: "hbar_efff".into(),
                context: " for scenario kind `ensemble`".into()
            }
        );
        let err = parse_config("scenario = \"ensemble\"\nmodel = \"free_particle\"\nm = 1\nomega = 2\nhorizon = 1\n")
            .unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { key, .. } if key == "omega"));
    }

    #[test]
    fn keys_of_other_kinds_are_rejected() {
        let err = parse_config("scenario = \"analytic\"\nmodel = \"harmonic\"\nm = 1\nomega = 1\nquantity = \"zero_point_energy\"\nN = 5\n")
            .unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { key, .. } if key == "N"));
    }

    #[test]
    fn bad_values() {
        let err = parse_config("scenario = \"ensemble\"\nmodel = \"free_particle\"\nm = 1\ndt = -1\nhorizon = 1\n")
            .unwrap_err();
        assert!(matches!(err, ConfigError::InvalidValue { key, .. } if key == "dt"));
        let err = parse_config("scenario = \"analytic\"\nunits = \"cgs\"\nhbar_eff = 1\nmodel = \"harmonic\"\nm = 1\nomega = 1\nquantity = \"zero_point_energy\"\n")
            .unwrap_err();
        assert!(matches!(err, ConfigError::InvalidValue { key, .. } if key == "hbar_eff"));
    }

    #[test]
    fn syntax_errors_carry_a_position() {
        let err = parse_config("scenario = \"ensemble\"\nmodel = = 3\n").unwrap_err();
        match err {
            ConfigError::Syntax { line, .. } => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn nested_tables_are_strict_too() {
        let text = r#"
scenario = "master_equation"
model = "harmonic"
m = 1
omega = 1
horizon = 1
initial = { x = 0.5, var_x = 0.1, var_p = 0.1 }
[grid]
x_bounds = [-3, 3]
p_bounds = [-3, 3]
n = 32
limitr = "upwind"
"#;
        let err = parse_config(text).unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { key, .. } if key == "grid.limitr"));
    }
}
