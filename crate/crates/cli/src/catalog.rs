//! Built-in scenarios, stored as the same TOML a user would write.

use crate::config::{parse_config, ScenarioConfig};

#[derive(Debug, Clone, Copy)]
pub struct CatalogEntry {
    pub name: &'static str,
    pub summary: &'static str,
    pub toml: &'static str,
}

impl CatalogEntry {
    pub fn config(&self) -> ScenarioConfig {
        parse_config(self.toml).expect("catalog entries are valid")
    }
}

const ENTRIES: &[CatalogEntry] = &[
    CatalogEntry {
        name: "free_mass_universe_age",
        summary: "rms drift of a 1 g free mass over the age of the Universe (closed form, CGS)",
        toml: r#"
name = "free_mass_universe_age"
scenario = "analytic"
units = "cgs"
quantity = "free_drift_rms"
model = "free_particle"
m = 1.0
horizon = 4.10e17
expect = 1.47e-5
expect_rel_tol = 0.01
expect_order = 1e-5
"#,
    },
    CatalogEntry {
        name: "zero_point",
        summary: "minimal-uncertainty mean energy of a 1 g, 1 rad/s oscillator (CGS)",
        toml: r#"
name = "zero_point"
scenario = "analytic"
units = "cgs"
quantity = "zero_point_energy"
model = "harmonic"
m = 1.0
omega = 1.0
expect = 5.27e-28
expect_rel_tol = 1e-3
"#,
    },
    CatalogEntry {
        name: "free_diffusion",
        summary: "free-particle ensemble with noise on every mode; var_x grows as ħt/2m",
        toml: r#"
name = "free_diffusion"
scenario = "ensemble"
model = "free_particle"
m = 1.0
hbar_eff = 1.0
gating = "all_on"
dt = 1e-3
horizon = 2.0
N = 10000
sample_every = 0.1
"#,
    },
    CatalogEntry {
        name: "inverted_trigger",
        summary: "inverted oscillator: minimal-uncertainty kicks and continuous noise both grow as e^(2λt)",
        toml: r#"
name = "inverted_trigger"
scenario = "kick_ensemble"
model = "inverted"
m = 1.0
lambda = 1.0
hbar_eff = 1.0
dt = 1e-3
horizon = 6.0
N = 100000
sample_every = 0.25
fit_window = [3.0, 6.0]
check_time = 5.0
continuous_noise = true
"#,
    },
    CatalogEntry {
        name: "lyapunov_zoo",
        summary: "Lyapunov spectra and KS entropy across the model catalog",
        toml: r#"
name = "lyapunov_zoo"
scenario = "lyapunov"
dt = 1e-3
horizon = 100.0
renorm_interval = 0.1
initial = { x = 0.5, p = 0.0 }
targets = [
    { model = "free_particle", m = 1.0 },
    { model = "harmonic", m = 1.0, omega = 1.0 },
    { model = "inverted", m = 1.0, lambda = 1.0 },
    { model = "pendulum", m = 1.0, gl = 1.0 },
    { model = "double_well", m = 1.0, lambda = 1.0, well = 1.0 },
]
"#,
    },
    CatalogEntry {
        name: "pendulum_relaxation",
        summary: "pendulum master equation on the phase-space torus relaxing to stationarity",
        toml: r#"
name = "pendulum_relaxation"
scenario = "master_equation"
model = "pendulum"
m = 1.0
gl = 1.0
hbar_eff = 0.05
gating = "unstable_only"
horizon = 3000.0
initial = { x = 0.0, p = 2.5, var_x = 0.05, var_p = 0.05 }

[grid]
x_bounds = [-3.141592653589793, 3.141592653589793]
p_bounds = [-3.5, 3.5]
n = 256
x_boundary = "periodic"
p_boundary = "periodic"
limiter = "upwind"
entropy_interval = 1.0
stop_when_stationary = true
require_stationarity = true
"#,
    },
    CatalogEntry {
        name: "liouville_limit",
        summary: "harmonic oscillator at ħ = 0: entropy conserved up to a floor that shrinks with resolution",
        toml: r#"
name = "liouville_limit"
scenario = "master_equation"
model = "harmonic"
m = 1.0
omega = 1.0
hbar_eff = 0.0
horizon = 6.283185307179586
initial = { x = 1.0, p = 0.0, var_x = 0.1, var_p = 0.1 }

[grid]
x_bounds = [-3.0, 3.0]
p_bounds = [-3.0, 3.0]
n = 128
limiter = "van_leer"
entropy_interval = 0.7853981633974483
refinement_check = true
"#,
    },
];

pub fn scenario_catalog() -> &'static [CatalogEntry] {
    ENTRIES
}

pub fn lookup(name: &str) -> Option<&'static CatalogEntry> {
    ENTRIES.iter().find(|e| e.name == name)
}
