use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gridstorm::attacker::Strategy;
use gridstorm::conic::SolveOptions;
use gridstorm::grid::{parse_case, GridCase};
use gridstorm::market::MarketOptions;
use gridstorm::scenario::{self, Baseline, RunOptions, Scenario, ScenarioConfig};

#[derive(Parser)]
#[command(name = "gridstorm", version, about = "Market clearing, IoT load attacks and breaker cascades")]
struct Cli {
    /// Write every conic program handed to the solver as an LP-format file.
    #[arg(long, global = true)]
    dump_programs: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a sweep of attack scenarios and write CSV/JSON reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Scenarios solved concurrently (defaults to the number of cores).
        #[arg(long)]
        jobs: Option<usize>,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a case file and list every violation.
    Validate { case: PathBuf },
    /// Compute an attack plan without running the cascade.
    Attack {
        #[arg(long)]
        strategy: Strategy,
        #[arg(long)]
        rho: f64,
        #[arg(long, default_value_t = 0.0)]
        gamma: f64,
        /// Branch to overload (insidious only).
        #[arg(long)]
        target: Option<String>,
        case: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GRIDSTORM_LOG", "warn")).init();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { config, jobs, out } => run(&config, jobs, out, cli.dump_programs),
        Command::Validate { case } => validate(&case),
        Command::Attack {
            strategy,
            rho,
            gamma,
            target,
            case,
        } => attack(strategy, rho, gamma, target, &case, cli.dump_programs),
    };
    ExitCode::from(code)
}

fn run(config: &Path, jobs: Option<usize>, out: Option<PathBuf>, dump: bool) -> u8 {
    let cfg = match ScenarioConfig::load(config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let opts = RunOptions {
        jobs,
        out_dir: out,
        dump_programs: dump,
    };
    match scenario::run(&cfg, &opts) {
        Ok(report) if report.failures.is_empty() => {
            println!(
                "{} scenario(s) written to {}",
                report.results.len(),
                report.out_dir.display()
            );
            0
        }
        Ok(report) => {
            for f in &report.failures {
                eprintln!("error: scenario {}: {}", f.scenario.tag(), f.error);
            }
            eprintln!(
                "{} of {} scenario(s) failed; see {}",
                report.failures.len(),
                report.failures.len() + report.results.len(),
                report.out_dir.join("errors.json").display()
            );
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code() as u8
        }
    }
}

fn validate(path: &Path) -> u8 {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", path.display());
            return 1;
        }
    };
    let (_, diags) = parse_case(&text);
    if diags.is_empty() {
        println!("{}: ok", path.display());
        return 0;
    }
    for d in &diags {
        println!("{:?}: {}", d.kind, d.message);
    }
    eprintln!("{}: {} violation(s)", path.display(), diags.len());
    2
}

fn load(path: &Path) -> Result<GridCase, u8> {
    gridstorm::grid::load_case_file(path).map_err(|e| {
        eprintln!("error: {e}");
        2
    })
}

fn attack(
    strategy: Strategy,
    rho: f64,
    gamma: f64,
    target: Option<String>,
    path: &Path,
    dump: bool,
) -> u8 {
    if !(0.0..=1.0).contains(&rho) || !(0.0..=1.0).contains(&gamma) {
        eprintln!("error: rho and gamma must lie in [0, 1]");
        return 2;
    }
    let case = match load(path) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let solve = SolveOptions {
        dump_dir: dump.then(|| PathBuf::from("programs")),
        ..SolveOptions::default()
    };
    let mopts = MarketOptions {
        solve: solve.clone(),
        ..MarketOptions::default()
    };
    let sc = Scenario {
        strategy,
        penetration: rho,
        gamma,
    };
    let plan = Baseline::new(case, mopts).and_then(|b| b.plan(&sc, target, None, &solve));
    match plan {
        Ok(p) => {
            println!("{}", serde_json::to_string_pretty(&p).expect("plan serialises"));
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
