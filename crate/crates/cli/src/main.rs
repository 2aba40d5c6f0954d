use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stochmech::{lookup, parse_config, run_with_threads, scenario_catalog, write_outputs};

#[derive(Parser)]
#[command(name = "stochmech", version, about = "Stochastic Hamiltonian mechanics scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file or a built-in scenario.
    Run(RunArgs),
    /// List the built-in scenarios.
    Catalog {
        /// Print the TOML of one entry instead of the list.
        #[arg(long)]
        show: Option<String>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file (TOML).
    #[arg(required_unless_present = "builtin", conflicts_with = "builtin")]
    config: Option<PathBuf>,
    /// Name of a catalog scenario.
    #[arg(long)]
    builtin: Option<String>,
    /// Output directory (default: out/<scenario name>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for ensembles.
    #[arg(long)]
    threads: Option<usize>,
    /// Also write a plotting script next to the CSV.
    #[arg(long)]
    emit_plots: bool,
}

const EXIT_FAIL: u8 = 1;
const EXIT_USAGE: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Catalog { show: None } => {
            for entry in scenario_catalog() {
                println!("{:<24} {}", entry.name, entry.summary);
            }
            ExitCode::SUCCESS
        }
        Command::Catalog { show: Some(name) } => match lookup(&name) {
            Some(entry) => {
                print!("{}", entry.toml.trim_start());
                ExitCode::SUCCESS
            }
            None => {
                eprintln!("error: no built-in scenario named `{name}`");
                ExitCode::from(EXIT_USAGE)
            }
        },
        Command::Run(args) => run(args),
    }
}

fn run(args: RunArgs) -> ExitCode {
    let text = match (&args.config, &args.builtin) {
        (Some(path), _) => match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("error: cannot read {}: {e}", path.display());
                return ExitCode::from(EXIT_USAGE);
            }
        },
        (None, Some(name)) => match lookup(name) {
            Some(entry) => entry.toml.to_string(),
            None => {
                eprintln!("error: no built-in scenario named `{name}` (see `stochmech catalog`)");
                return ExitCode::from(EXIT_USAGE);
            }
        },
        (None, None) => unreachable!("clap requires one of them"),
    };
    let mut config = match parse_config(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if args.threads == Some(0) {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(EXIT_USAGE);
    }
    let emit_plots = args.emit_plots || config.emit_plots;
    let dir = args
        .out
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(&config.name));

    let output = match run_with_threads(&config, args.threads) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_FAIL);
        }
    };
    if let Err(e) = write_outputs(&output, &dir, emit_plots) {
        eprintln!("error: writing to {}: {e}", dir.display());
        return ExitCode::from(EXIT_FAIL);
    }
    for h in &output.summary.headline {
        let verdict = match h.verdict {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "    ",
        };
        println!("{verdict}  {:<32} {:>14.6e}", h.name, h.value);
    }
    println!("results in {} ({:.2} s)", dir.display(), output.wall_clock_seconds);
    if output.summary.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_FAIL)
    }
}
