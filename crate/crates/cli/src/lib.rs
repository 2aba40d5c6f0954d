//! Configuration-driven front end: scenario files, the built-in catalog, and
//! the runner that turns a scenario into CSV/JSON results with verdicts.

pub mod catalog;
pub mod config;
pub mod run;

pub use catalog::{lookup, scenario_catalog, CatalogEntry};
pub use config::{parse_config, ConfigError, ScenarioConfig, ScenarioKind};
pub use run::{run_scenario, run_with_threads, write_outputs, Headline, RunError, RunOutput, RunSummary};
