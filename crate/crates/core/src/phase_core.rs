//! Hamiltonian models and phase-space states.
//!
//! Every catalog Hamiltonian is separable and uncoupled across modes:
//!
//! ```text
//! H(x, p) = Σᵢ pᵢ² / 2mᵢ + Vᵢ(xᵢ)
//! ```
//!
//! so the Hessian blocks are diagonal and the mixed block vanishes. The mixed
//! block is still carried in [`HessianBlocks`] so that consumers can reject
//! non-separable input explicitly.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// A point `(x, p, t)` in phase space.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    pub x: Vec<f64>,
    pub p: Vec<f64>,
    pub t: f64,
}

impl PhaseState {
    pub fn new(x: Vec<f64>, p: Vec<f64>, t: f64) -> Result<Self> {
        if x.is_empty() || x.len() != p.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len().max(1),
                got: p.len(),
            });
        }
        let state = Self { x, p, t };
        if !state.is_finite() {
            return Err(Error::NonFiniteState { t });
        }
        Ok(state)
    }

    /// One-degree-of-freedom shorthand.
    pub fn new_1d(x: f64, p: f64) -> Self {
        Self {
            x: vec![x],
            p: vec![p],
            t: 0.0,
        }
    }

    pub fn origin(n: usize) -> Self {
        Self {
            x: vec![0.0; n],
            p: vec![0.0; n],
            t: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite() && self.x.iter().chain(&self.p).all(|v| v.is_finite())
    }
}

/// Single-mode potential energy `V(x)`; all forms scale with the mode mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Potential {
    /// `V = 0`
    Flat,
    /// `V = ½ m ω² x²`
    Harmonic { omega: f64 },
    /// `V = −½ m λ² x²`
    Inverted { lambda: f64 },
    /// `V = −m g·l cos x`, coordinate periodic on `[−π, π)`
    Pendulum { gl: f64 },
    /// `V = (m λ² / 4w²)(x² − w²)²`: barrier curvature `−mλ²` at the origin,
    /// minima at `±w`.
    DoubleWell { lambda: f64, well: f64 },
}

impl Potential {
    pub fn value(&self, m: f64, x: f64) -> f64 {
        match *self {
            Potential::Flat => 0.0,
            Potential::Harmonic { omega } => 0.5 * m * omega * omega * x * x,
            Potential::Inverted { lambda } => -0.5 * m * lambda * lambda * x * x,
            Potential::Pendulum { gl } => -m * gl * x.cos(),
            Potential::DoubleWell { lambda, well } => {
                let d = x * x - well * well;
                m * lambda * lambda / (4.0 * well * well) * d * d
            }
        }
    }

    pub fn gradient(&self, m: f64, x: f64) -> f64 {
        match *self {
            Potential::Flat => 0.0,
            Potential::Harmonic { omega } => m * omega * omega * x,
            Potential::Inverted { lambda } => -m * lambda * lambda * x,
            Potential::Pendulum { gl } => m * gl * x.sin(),
            Potential::DoubleWell { lambda, well } => {
                m * lambda * lambda / (well * well) * x * (x * x - well * well)
            }
        }
    }

    pub fn curvature(&self, m: f64, x: f64) -> f64 {
        match *self {
            Potential::Flat => 0.0,
            Potential::Harmonic { omega } => m * omega * omega,
            Potential::Inverted { lambda } => -m * lambda * lambda,
            Potential::Pendulum { gl } => m * gl * x.cos(),
            Potential::DoubleWell { lambda, well } => {
                m * lambda * lambda / (well * well) * (3.0 * x * x - well * well)
            }
        }
    }

    /// Quadratic potentials give linear equations of motion.
    pub fn is_quadratic(&self) -> bool {
        matches!(
            self,
            Potential::Flat | Potential::Harmonic { .. } | Potential::Inverted { .. }
        )
    }

    pub fn is_periodic(&self) -> bool {
        matches!(self, Potential::Pendulum { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mode {
    pub mass: f64,
    pub potential: Potential,
}

/// A separable Hamiltonian built from independent modes.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianModel {
    name: String,
    modes: Vec<Mode>,
    params: BTreeMap<String, f64>,
}

/// Raw second derivatives of `H` at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianBlocks {
    /// ∂²H/∂x∂x
    pub axx: DMatrix<f64>,
    /// ∂²H/∂p∂p
    pub bpp: DMatrix<f64>,
    /// ∂²H/∂x∂p
    pub cxp: DMatrix<f64>,
}

/// Minimal-uncertainty dispersions for one quadratic mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dispersion {
    pub var_x: f64,
    pub var_p: f64,
    /// `None` where the mean energy is not bounded below (inverted mode).
    pub mean_energy: Option<f64>,
}

pub const CATALOG: [&str; 5] = ["free_particle", "harmonic", "inverted", "pendulum", "double_well"];

fn canonical_param(key: &str) -> &str {
    match key {
        "ω" => "omega",
        "λ" => "lambda",
        "g·l" | "g_l" | "g*l" => "gl",
        other => other,
    }
}

fn required_params(name: &str) -> Option<&'static [&'static str]> {
    Some(match name {
        "free_particle" => &["m"],
        "harmonic" => &["m", "omega"],
        "inverted" => &["m", "lambda"],
        "pendulum" => &["m", "gl"],
        "double_well" => &["m", "lambda", "well"],
        _ => return None,
    })
}

/// Instantiates a catalog model.
///
/// Besides the physical parameters every model accepts an optional `dof`
/// (default 1) which replicates the mode into that many uncoupled copies.
/// Greek keys (`ω`, `λ`, `g·l`) are accepted as aliases.
pub fn builtin_model(name: &str, params: &BTreeMap<String, f64>) -> Result<HamiltonianModel> {
    let required = required_params(name).ok_or_else(|| Error::UnknownModel(name.to_string()))?;

    let mut canon = BTreeMap::new();
    for (key, &value) in params {
        let key = canonical_param(key);
        if key != "dof" && !required.contains(&key) {
            return Err(Error::UnknownParameter {
                model: name.to_string(),
                param: key.to_string(),
            });
        }
        canon.insert(key.to_string(), value);
    }
    for &key in required {
        let value = *canon.get(key).ok_or_else(|| Error::MissingParameter {
            model: name.to_string(),
            param: key.to_string(),
        })?;
        if !(value > 0.0 && value.is_finite()) {
            return Err(Error::NonPositiveParameter {
                param: key.to_string(),
                value,
            });
        }
    }
    let dof = match canon.get("dof") {
        None => 1,
        Some(&d) if d >= 1.0 && d.fract() == 0.0 && d <= 1024.0 => d as usize,
        Some(&d) => {
            return Err(Error::NonPositiveParameter {
                param: "dof".into(),
                value: d,
            })
        }
    };

    let m = canon["m"];
    let potential = match name {
        "free_particle" => Potential::Flat,
        "harmonic" => Potential::Harmonic {
            omega: canon["omega"],
        },
        "inverted" => Potential::Inverted {
            lambda: canon["lambda"],
        },
        "pendulum" => Potential::Pendulum { gl: canon["gl"] },
        "double_well" => Potential::DoubleWell {
            lambda: canon["lambda"],
            well: canon["well"],
        },
        _ => unreachable!(),
    };
    let modes = vec![Mode { mass: m, potential }; dof];
    Ok(HamiltonianModel {
        name: name.to_string(),
        modes,
        params: canon,
    })
}

impl HamiltonianModel {
    /// Builds a custom model from explicit modes.
    pub fn from_modes(name: impl Into<String>, modes: Vec<Mode>) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one mode".into()));
        }
        for mode in &modes {
            if !(mode.mass > 0.0 && mode.mass.is_finite()) {
                return Err(Error::NonPositiveParameter {
                    param: "m".into(),
                    value: mode.mass,
                });
            }
        }
        Ok(Self {
            name: name.into(),
            modes,
            params: BTreeMap::new(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n(&self) -> usize {
        self.modes.len()
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn masses(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.mass).collect()
    }

    pub fn params(&self) -> &BTreeMap<String, f64> {
        &self.params
    }

    pub fn is_linear(&self) -> bool {
        self.modes.iter().all(|m| m.potential.is_quadratic())
    }

    pub fn is_periodic(&self, mode: usize) -> bool {
        self.modes[mode].potential.is_periodic()
    }

    pub fn check_dim(&self, state: &PhaseState) -> Result<()> {
        if state.dim() != self.n() || state.p.len() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                got: state.dim(),
            });
        }
        Ok(())
    }

    /// Wraps periodic coordinates into `[−π, π)`.
    pub fn normalize(&self, state: &mut PhaseState) {
        for (mode, x) in self.modes.iter().zip(state.x.iter_mut()) {
            if mode.potential.is_periodic() {
                *x = wrap_angle(*x);
            }
        }
    }

    pub fn velocity(&self, mode: usize, p: f64) -> f64 {
        p / self.modes[mode].mass
    }

    pub fn force(&self, mode: usize, x: f64) -> f64 {
        let m = &self.modes[mode];
        -m.potential.gradient(m.mass, x)
    }

    pub fn curvature(&self, mode: usize, x: f64) -> f64 {
        let m = &self.modes[mode];
        m.potential.curvature(m.mass, x)
    }
}

pub fn wrap_angle(x: f64) -> f64 {
    if (-PI..PI).contains(&x) {
        return x;
    }
    let wrapped = (x + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can round up to exactly 2π
    if wrapped >= PI {
        wrapped - 2.0 * PI
    } else {
        wrapped
    }
}

pub fn evaluate_energy(model: &HamiltonianModel, state: &PhaseState) -> Result<f64> {
    model.check_dim(state)?;
    Ok(model
        .modes
        .iter()
        .zip(state.x.iter().zip(&state.p))
        .map(|(mode, (&x, &p))| 0.5 * p * p / mode.mass + mode.potential.value(mode.mass, x))
        .sum())
}

/// Returns `(∂H/∂x, ∂H/∂p)`.
pub fn evaluate_derivatives(
    model: &HamiltonianModel,
    state: &PhaseState,
) -> Result<(Vec<f64>, Vec<f64>)> {
    model.check_dim(state)?;
    let dx = model
        .modes
        .iter()
        .zip(&state.x)
        .map(|(mode, &x)| mode.potential.gradient(mode.mass, x))
        .collect();
    let dp = model
        .modes
        .iter()
        .zip(&state.p)
        .map(|(mode, &p)| p / mode.mass)
        .collect();
    Ok((dx, dp))
}

pub fn evaluate_hessian(model: &HamiltonianModel, state: &PhaseState) -> Result<HessianBlocks> {
    model.check_dim(state)?;
    let n = model.n();
    let axx = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            model.curvature(i, state.x[i])
        } else {
            0.0
        }
    });
    let bpp = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0 / model.modes[i].mass
        } else {
            0.0
        }
    });
    Ok(HessianBlocks {
        axx,
        bpp,
        cxp: DMatrix::zeros(n, n),
    })
}

/// Dispersions minimizing the mean energy under `⟨δx²⟩⟨δp²⟩ = ħ²/4`, per mode.
///
/// For an inverted mode the same construction is used with `λ` in place of `ω`;
/// its mean energy is unbounded and reported as `None`.
pub fn minimal_uncertainty_dispersions(
    model: &HamiltonianModel,
    hbar_eff: f64,
) -> Result<Vec<Dispersion>> {
    if !(hbar_eff >= 0.0 && hbar_eff.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "hbar_eff must be non-negative, got {hbar_eff}"
        )));
    }
    model
        .modes
        .iter()
        .map(|mode| {
            let m = mode.mass;
            let (rate, mean_energy) = match mode.potential {
                Potential::Harmonic { omega } => (omega, Some(0.5 * hbar_eff * omega)),
                Potential::Inverted { lambda } => (lambda, None),
                _ => return Err(Error::UnsupportedModel(model.name.clone())),
            };
            Ok(Dispersion {
                var_x: hbar_eff / (2.0 * m * rate),
                var_p: 0.5 * hbar_eff * m * rate,
                mean_energy,
            })
        })
        .collect()
}
