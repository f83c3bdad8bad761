//! Batch sweeps over attack strategies, penetrations and Γ.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{error, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacker::{plan_insidious, plan_naive, AttackBudget, AttackPlan, InsidiousOptions, Strategy};
use crate::cascade::{run_cascade, CascadeOptions, CascadeOutcome};
use crate::conic::{SolveOptions, Tolerances};
use crate::error::ModelError;
use crate::grid::{compute_ptdf, load_case_file, load_bundled_case, BusId, GridCase, PtdfMatrix};
use crate::market::{solve_market, MarketOptions, MarketOutcome};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error(transparent)]
    Case(#[from] crate::error::CaseError),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToleranceOverrides {
    pub feas_tol: Option<f64>,
    pub gap_tol: Option<f64>,
    pub max_iter: Option<u32>,
}

impl ToleranceOverrides {
    pub fn apply(&self) -> Tolerances {
        let mut t = Tolerances::default();
        if let Some(v) = self.feas_tol {
            t.feas_tol = v;
        }
        if let Some(v) = self.gap_tol {
            t.gap_tol = v;
        }
        if let Some(v) = self.max_iter {
            t.max_iter = v;
        }
        t
    }
}

fn default_strategies() -> Vec<Strategy> {
    vec![Strategy::Naive, Strategy::Insidious]
}

fn default_penetrations() -> Vec<f64> {
    vec![0.1, 0.25, 0.5]
}

fn default_gammas() -> Vec<f64> {
    vec![0.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Case file; relative paths resolve against the config file. The
    /// bundled case is used when absent.
    #[serde(default)]
    pub case: Option<PathBuf>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_penetrations")]
    pub penetrations: Vec<f64>,
    #[serde(default = "default_gammas")]
    pub gammas: Vec<f64>,
    /// Branch the insidious attacker overloads (root branch by default).
    #[serde(default)]
    pub target: Option<String>,
    /// Breakers the insidious attacker keeps closed.
    #[serde(default)]
    pub protected: Option<Vec<String>>,
    #[serde(default)]
    pub slack: Option<BusId>,
    #[serde(default)]
    pub tolerances: ToleranceOverrides,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Seed for randomised sweeps; echoed in `run.json`.
    #[serde(default)]
    pub seed: u64,
    /// Restrict `margins.csv` to lines touching this transmission bus.
    #[serde(default)]
    pub margins_bus: Option<BusId>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            case: None,
            strategies: default_strategies(),
            penetrations: default_penetrations(),
            gammas: default_gammas(),
            target: None,
            protected: None,
            slack: None,
            tolerances: ToleranceOverrides::default(),
            out_dir: None,
            seed: 0,
            margins_bus: None,
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if let (Some(case), Some(dir)) = (&cfg.case, path.parent()) {
            if case.is_relative() {
                cfg.case = Some(dir.join(case));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut issues = Vec::new();
        if self.strategies.is_empty() {
            issues.push("strategies is empty".to_string());
        }
        if self.penetrations.is_empty() {
            issues.push("penetrations is empty".to_string());
        }
        if self.gammas.is_empty() {
            issues.push("gammas is empty".to_string());
        }
        for r in &self.penetrations {
            if !(0.0..=1.0).contains(r) {
                issues.push(format!("penetration {r} outside [0, 1]"));
            }
        }
        for g in &self.gammas {
            if !(0.0..=1.0).contains(g) {
                issues.push(format!("gamma {g} outside [0, 1]"));
            }
        }
        let t = self.tolerances.apply();
        if !(t.feas_tol > 0.0 && t.gap_tol > 0.0 && t.max_iter > 0) {
            issues.push("tolerances must be positive".to_string());
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(issues))
        }
    }

    pub fn load_case(&self) -> Result<GridCase, ConfigError> {
        Ok(match &self.case {
            Some(p) => load_case_file(p)?,
            None => load_bundled_case()?,
        })
    }

    /// Every (strategy, penetration, Γ) combination in config order.
    pub fn scenarios(&self) -> Vec<Scenario> {
        let mut out = Vec::new();
        for &strategy in &self.strategies {
            for &penetration in &self.penetrations {
                for &gamma in &self.gammas {
                    out.push(Scenario {
                        strategy,
                        penetration,
                        gamma,
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub strategy: Strategy,
    pub penetration: f64,
    pub gamma: f64,
}

impl Scenario {
    pub fn tag(&self) -> String {
        format!("{}_rho{}_gamma{}", self.strategy, self.penetration, self.gamma)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub jobs: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub dump_programs: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario: Scenario,
    pub plan: AttackPlan,
    pub cascade: CascadeOutcome,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioFailure {
    pub scenario: Scenario,
    pub error: String,
}

#[derive(Debug)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub results: Vec<ScenarioResult>,
    pub failures: Vec<ScenarioFailure>,
}

/// Shared inputs of every scenario in a sweep.
pub struct Baseline {
    pub case: GridCase,
    pub ptdf: PtdfMatrix,
    pub market: MarketOutcome,
    pub market_options: MarketOptions,
}

impl Baseline {
    pub fn new(case: GridCase, market_options: MarketOptions) -> Result<Self, ModelError> {
        let slack = market_options.slack.unwrap_or_else(|| case.default_slack());
        let ptdf = compute_ptdf(&case.transmission, slack)?;
        let market = solve_market(&case, None, &market_options)?;
        Ok(Self {
            case,
            ptdf,
            market,
            market_options,
        })
    }

    pub fn plan(
        &self,
        scenario: &Scenario,
        target: Option<String>,
        protected: Option<Vec<String>>,
        solve: &SolveOptions,
    ) -> Result<AttackPlan, ModelError> {
        let feeder = self
            .case
            .feeders
            .first()
            .ok_or_else(|| ModelError::Invalid("case has no feeder to attack".into()))?;
        let budget = AttackBudget::new(feeder, scenario.penetration, scenario.gamma)?;
        match scenario.strategy {
            Strategy::Naive => plan_naive(feeder, Some(&self.ptdf), &budget),
            Strategy::Insidious => {
                let base = self
                    .market
                    .distribution()
                    .ok_or_else(|| ModelError::Invalid("market has no feeder outcome".into()))?;
                let opts = InsidiousOptions {
                    protected,
                    target,
                    check_base_mva: Some(self.case.bases.distribution_mva),
                    solve: solve.clone(),
                };
                plan_insidious(feeder, Some(&self.ptdf), &budget, base, &opts)
            }
        }
    }
}

fn market_options(cfg: &ScenarioConfig, dump: Option<PathBuf>) -> MarketOptions {
    MarketOptions {
        slack: cfg.slack,
        solve: SolveOptions {
            tolerances: cfg.tolerances.apply(),
            dump_dir: dump,
        },
        ..MarketOptions::default()
    }
}

/// Writes `contents` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("report types serialise");
    v.push(b'\n');
    v
}

/// Fixed-precision number with negative zero folded to zero.
fn fixed(v: f64, decimals: usize) -> String {
    let s = format!("{v:.decimals$}");
    if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        s.trim_start_matches('-').to_string()
    } else {
        s
    }
}

pub const SUMMARY_HEADER: &str =
    "strategy,penetration,gamma,ens_mw,ens_cost_usd,grid_separated,iterations";
pub const MARGINS_HEADER: &str = "strategy,penetration,gamma,line,pre_mw,post_mw";

pub fn summary_csv(results: &[ScenarioResult]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in results {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.scenario.strategy,
            r.scenario.penetration,
            r.scenario.gamma,
            fixed(r.cascade.ens, 3),
            fixed(r.cascade.ens_cost, 0),
            r.cascade.separated,
            r.cascade.iterations()
        );
    }
    s
}

pub fn margins_csv(case: &GridCase, results: &[ScenarioResult], bus: Option<BusId>) -> String {
    let mut s = format!("{MARGINS_HEADER}\n");
    let lines: Vec<&str> = case
        .transmission
        .lines
        .iter()
        .filter(|l| bus.is_none_or(|b| l.from_bus == b || l.to_bus == b))
        .map(|l| l.id.as_str())
        .collect();
    for r in results {
        for id in &lines {
            let pre = r.cascade.margins_before.get(*id).copied().unwrap_or(f64::NAN);
            let post = r
                .cascade
                .post_market
                .as_ref()
                .and_then(|p| p.margins.get(*id).copied())
                .unwrap_or(pre);
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.scenario.strategy,
                r.scenario.penetration,
                r.scenario.gamma,
                id,
                fixed(pre, 3),
                fixed(post, 3)
            );
        }
    }
    s
}

/// Runs the sweep described by `cfg` and writes every report into the
/// output directory. Scenario failures are collected, not fatal.
pub fn run(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<RunReport, RunError> {
    let out_dir = opts
        .out_dir
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("gridstorm-out"));
    std::fs::create_dir_all(&out_dir)?;
    let case = cfg.load_case()?;
    let dump = |sub: &str| opts.dump_programs.then(|| out_dir.join("programs").join(sub));
    let baseline = Baseline::new(case, market_options(cfg, dump("baseline")))?;
    info!(
        "baseline market: interface price {:?}, exchange {:?}",
        baseline.market.interface_price(),
        baseline.market.interface_exchange()
    );

    let scenarios = cfg.scenarios();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.unwrap_or(0))
        .build()
        .map_err(|e| RunError::Io(std::io::Error::other(e)))?;
    let outcomes: Vec<Result<ScenarioResult, ScenarioFailure>> = pool.install(|| {
        scenarios
            .par_iter()
            .map(|sc| {
                run_one(cfg, &baseline, sc, dump(&sc.tag()), &out_dir).map_err(|e| {
                    error!("scenario {} failed: {e}", sc.tag());
                    ScenarioFailure {
                        scenario: *sc,
                        error: e.to_string(),
                    }
                })
            })
            .collect()
    });
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => results.push(r),
            Err(f) => failures.push(f),
        }
    }
    write_atomic(&out_dir.join("summary.csv"), summary_csv(&results).as_bytes())?;
    write_atomic(
        &out_dir.join("margins.csv"),
        margins_csv(&baseline.case, &results, cfg.margins_bus).as_bytes(),
    )?;
    let manifest = serde_json::json!({
        "config": cfg,
        "scenarios": scenarios,
        "failures": failures,
    });
    write_atomic(&out_dir.join("run.json"), &json(&manifest))?;
    if !failures.is_empty() {
        write_atomic(&out_dir.join("errors.json"), &json(&failures))?;
    }
    Ok(RunReport {
        out_dir,
        results,
        failures,
    })
}

fn run_one(
    cfg: &ScenarioConfig,
    baseline: &Baseline,
    sc: &Scenario,
    dump: Option<PathBuf>,
    out_dir: &Path,
) -> Result<ScenarioResult, RunError> {
    let mopts = market_options(cfg, dump);
    let plan = baseline.plan(sc, cfg.target.clone(), cfg.protected.clone(), &mopts.solve)?;
    let copts = CascadeOptions {
        market: mopts,
        ..CascadeOptions::default()
    };
    let cascade = run_cascade(&baseline.case, &baseline.market, &plan.load_delta(), &copts)?;
    let tag = sc.tag();
    write_atomic(&out_dir.join(format!("plan_{tag}.json")), &json(&plan))?;
    write_atomic(&out_dir.join(format!("cascade_{tag}.json")), &json(&cascade))?;
    Ok(ScenarioResult {
        scenario: *sc,
        plan,
        cascade,
    })
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    /// Process exit code: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            _ => 1,
        }
    }
}
