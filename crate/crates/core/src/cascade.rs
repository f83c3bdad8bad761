//! Breaker cascade after a load perturbation.
//!
//! Feeder generators hold their market setpoints and the root imports
//! whatever the perturbed loads require. Each stage solves the physical
//! flows of the island still connected to the root, then opens the
//! overloaded breakers nearest the leaves. Islands cut off from the root
//! serve what their own generation allows.

use std::collections::{BTreeMap, BTreeSet};

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::distribution::{solve_dso, DistributionSolution, DsoMode, DsoOptions, LoadDelta};
use crate::error::{ModelError, Result};
use crate::grid::{BusId, Feeder, GridCase, DEFAULT_TRIP_RATIO};
use crate::market::{security_margins, solve_market, MarketOptions, MarketOutcome};

/// Absolute slack (MVA) before a breaker counts as overloaded.
pub const TRIP_TOL: f64 = 1e-6;

/// Rating given to unprotected lines in the relaxed post-attack market,
/// relative to what they carry after the cascade.
const RELAXED_HEADROOM: f64 = 1.05;

#[derive(Debug, Clone)]
pub struct CascadeOptions {
    pub market: MarketOptions,
    pub max_stages: usize,
    /// Clear the market again on the surviving network to get margins.
    pub post_market: bool,
}

impl Default for CascadeOptions {
    fn default() -> Self {
        Self {
            market: MarketOptions::default(),
            max_stages: 64,
            post_market: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeStage {
    pub stage: usize,
    /// Apparent flow (MVA) on every closed breakered line of the root island.
    pub apparent: BTreeMap<String, f64>,
    pub tripped: Vec<String>,
    /// Bus sets after this stage's trips, root island first.
    pub partition: Vec<Vec<BusId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Island {
    pub buses: Vec<BusId>,
    pub contains_root: bool,
    /// Generator output (MW) inside the island.
    pub dispatch: BTreeMap<String, f64>,
    pub generation_capacity: f64,
    pub contracted_load: f64,
    pub served: f64,
    pub ens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostAttackMarket {
    pub interface_price: Option<f64>,
    pub interface_exchange: Option<f64>,
    /// Feeder ratings were relaxed to the breaker trip points to clear.
    pub relaxed_limits: bool,
    pub margins: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeOutcome {
    pub stages: Vec<CascadeStage>,
    pub tripped: Vec<String>,
    /// Final islands, the one holding the root first.
    pub islands: Vec<Island>,
    /// The feeder lost its connection to the transmission grid.
    pub separated: bool,
    /// Energy not served (MW over the hour).
    pub ens: f64,
    /// `ens * voll` ($/h).
    pub ens_cost: f64,
    /// Final flows on the root island, absent when it holds no line.
    pub final_flows: Option<DistributionSolution>,
    pub margins_before: BTreeMap<String, f64>,
    pub post_market: Option<PostAttackMarket>,
}

impl CascadeOutcome {
    /// Stages that opened at least one breaker.
    pub fn iterations(&self) -> usize {
        self.stages.iter().filter(|s| !s.tripped.is_empty()).count()
    }

    pub fn max_margin_change(&self) -> f64 {
        let Some(post) = &self.post_market else {
            return 0.0;
        };
        self.margins_before
            .iter()
            .map(|(id, m)| (post.margins.get(id).copied().unwrap_or(*m) - m).abs())
            .fold(0.0, f64::max)
    }
}

/// Feeder with `delta` folded into its loads.
fn perturbed(feeder: &Feeder, delta: &LoadDelta) -> Result<Feeder> {
    let mut f = feeder.clone();
    for id in delta.p.keys().chain(delta.q.keys()) {
        if f.bus(*id).is_none() {
            return Err(ModelError::Invalid(format!(
                "load delta references bus {id} outside feeder `{}`",
                f.id
            )));
        }
    }
    for b in &mut f.buses {
        b.load_p += delta.p.get(&b.id).copied().unwrap_or(0.0);
        b.load_q += delta.q.get(&b.id).copied().unwrap_or(0.0);
    }
    Ok(f)
}

/// Connected components of the feeder with `open` lines removed; the root's
/// component comes first.
fn components(feeder: &Feeder, open: &BTreeSet<String>) -> Vec<BTreeSet<BusId>> {
    let mut adj: BTreeMap<BusId, Vec<BusId>> = BTreeMap::new();
    for l in feeder.lines.iter().filter(|l| !open.contains(&l.id)) {
        adj.entry(l.from_bus).or_default().push(l.to_bus);
        adj.entry(l.to_bus).or_default().push(l.from_bus);
    }
    let root = feeder.root().map(|b| b.id);
    let mut ids: Vec<BusId> = feeder.buses.iter().map(|b| b.id).collect();
    ids.sort_by_key(|&b| (Some(b) != root, b));
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for start in ids {
        if !seen.insert(start) {
            continue;
        }
        let mut comp = BTreeSet::from([start]);
        let mut stack = vec![start];
        while let Some(b) = stack.pop() {
            for &n in adj.get(&b).map(Vec::as_slice).unwrap_or(&[]) {
                if seen.insert(n) {
                    comp.insert(n);
                    stack.push(n);
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Overloaded breakers with no overloaded breaker further from the root.
fn frontier(feeder: &Feeder, overloaded: &BTreeSet<String>) -> Result<Vec<String>> {
    let topo = feeder.topology()?;
    let mut out = Vec::new();
    for id in overloaded {
        let line = feeder.line(id).expect("overloaded line exists");
        let below: BTreeSet<BusId> = topo.downstream(feeder, line.to_bus)?.into_iter().collect();
        let shadowed = overloaded.iter().any(|other| {
            other != id && below.contains(&feeder.line(other).expect("line exists").from_bus)
        });
        if !shadowed {
            out.push(id.clone());
        }
    }
    Ok(out)
}

/// Physical flows of the island around the root with generators at the
/// given setpoints.
pub fn island_power_flow(
    case: &GridCase,
    island: &Feeder,
    dispatch: &BTreeMap<String, f64>,
    opts: &MarketOptions,
) -> Result<DistributionSolution> {
    let dopts = DsoOptions {
        base_mva: case.bases.distribution_mva,
        exchange_cap: None,
        mode: DsoMode::PowerFlow {
            dispatch: dispatch.clone(),
        },
        solve: opts.solve.clone(),
    };
    solve_dso(island, 0.0, None, &dopts)
}

/// Runs the cascade triggered by `delta` on the first feeder, starting from
/// the pre-attack market outcome `pre`.
pub fn run_cascade(
    case: &GridCase,
    pre: &MarketOutcome,
    delta: &LoadDelta,
    opts: &CascadeOptions,
) -> Result<CascadeOutcome> {
    let feeder = case
        .feeders
        .first()
        .ok_or_else(|| ModelError::Invalid("case has no feeder to attack".into()))?;
    let dispatch = pre
        .distribution()
        .map(|d| d.g_p.clone())
        .unwrap_or_default();
    let attacked = perturbed(feeder, delta)?;

    let mut open: BTreeSet<String> = BTreeSet::new();
    let mut stages = Vec::new();
    let mut final_flows = None;
    for stage in 1..=opts.max_stages {
        let comps = components(&attacked, &open);
        let island = attacked.restricted(&comps[0]);
        if island.lines.is_empty() {
            final_flows = None;
            break;
        }
        let flows = island_power_flow(case, &island, &dispatch, &opts.market)?;
        if flows.relaxation_inexact {
            warn!(
                "cascade stage {stage}: relaxation not tight (residual {:.2e})",
                flows.max_cone_residual
            );
        }
        let mut apparent = BTreeMap::new();
        let mut overloaded = BTreeSet::new();
        for l in &island.lines {
            if let Some(th) = l.trip_threshold() {
                let s = flows.apparent[&l.id];
                apparent.insert(l.id.clone(), s);
                if s > th + TRIP_TOL {
                    overloaded.insert(l.id.clone());
                }
            }
        }
        let tripped = frontier(&island, &overloaded)?;
        debug!("cascade stage {stage}: tripping {tripped:?}");
        let done = tripped.is_empty();
        open.extend(tripped.iter().cloned());
        let partition = components(&attacked, &open)
            .into_iter()
            .map(|c| c.into_iter().collect())
            .collect();
        stages.push(CascadeStage {
            stage,
            apparent,
            tripped,
            partition,
        });
        final_flows = Some(flows);
        if done {
            break;
        }
        if stage == opts.max_stages {
            warn!("cascade stopped after {stage} stages");
        }
    }

    let comps = components(&attacked, &open);
    let separated = comps[0].len() == 1 && feeder.buses.len() > 1;
    let mut islands = Vec::new();
    for (k, comp) in comps.iter().enumerate() {
        let contracted: f64 = feeder
            .buses
            .iter()
            .filter(|b| comp.contains(&b.id))
            .map(|b| b.load_p)
            .sum();
        let gens: Vec<_> = feeder
            .generators
            .iter()
            .filter(|g| comp.contains(&g.bus))
            .collect();
        let capacity: f64 = gens.iter().map(|g| g.p_max).sum();
        let (served, dispatch) = if k == 0 {
            let dispatch = match &final_flows {
                Some(f) => f.g_p.clone(),
                None => gens.iter().map(|g| (g.id.clone(), 0.0)).collect(),
            };
            (contracted, dispatch)
        } else {
            // shedding is priced at VOLL, so local units run up to the load
            let served = capacity.min(contracted);
            let share = if capacity > 0.0 { served / capacity } else { 0.0 };
            let dispatch = gens.iter().map(|g| (g.id.clone(), g.p_max * share)).collect();
            (served, dispatch)
        };
        islands.push(Island {
            buses: comp.iter().copied().collect(),
            contains_root: k == 0,
            dispatch,
            generation_capacity: capacity,
            contracted_load: contracted,
            served,
            ens: contracted - served,
        });
    }
    let ens: f64 = islands.iter().map(|i| i.ens).sum();
    let tripped: Vec<String> = stages.iter().flat_map(|s| s.tripped.clone()).collect();
    info!(
        "cascade: {} breaker(s) open, ens {ens:.3} MW{}",
        tripped.len(),
        if separated { ", feeder separated" } else { "" }
    );

    let margins_before = security_margins(case, &pre.transmission);
    let post_market = if opts.post_market {
        let keep: BTreeSet<BusId> = comps[0].clone();
        Some(post_attack_market(case, &attacked, &keep, final_flows.as_ref(), &opts.market)?)
    } else {
        None
    };

    Ok(CascadeOutcome {
        stages,
        tripped,
        islands,
        separated,
        ens,
        ens_cost: ens * case.economics.voll,
        final_flows,
        margins_before,
        post_market,
    })
}

fn post_attack_market(
    case: &GridCase,
    attacked: &Feeder,
    keep: &BTreeSet<BusId>,
    flows: Option<&DistributionSolution>,
    opts: &MarketOptions,
) -> Result<PostAttackMarket> {
    let separated = flows.is_none();
    let mut post = case.clone();
    let interface = attacked.interface_bus;
    if separated {
        post.feeders.remove(0);
        if let Some(b) = post.transmission.buses.iter_mut().find(|b| b.id == interface) {
            b.interface_capacity = Some(0.0);
        }
    } else {
        post.feeders[0] = attacked.restricted(keep);
    }
    let (outcome, relaxed) = match solve_market(&post, None, opts) {
        Ok(o) => (o, false),
        Err(e) if e.is_infeasible() && !separated => {
            info!("post-attack market infeasible at nominal ratings; relaxing to trip points");
            let flows = flows.expect("connected feeder has flows");
            for l in &mut post.feeders[0].lines {
                let carried = flows.apparent.get(&l.id).copied().unwrap_or(0.0);
                l.apparent_limit = l
                    .trip_threshold()
                    .unwrap_or(l.apparent_limit * DEFAULT_TRIP_RATIO)
                    .max(carried * RELAXED_HEADROOM);
            }
            (solve_market(&post, None, opts)?, true)
        }
        Err(e) => return Err(e),
    };
    Ok(PostAttackMarket {
        interface_price: outcome
            .transmission
            .lmp
            .get(&interface)
            .copied(),
        interface_exchange: outcome.interface_exchange(),
        relaxed_limits: relaxed,
        margins: security_margins(&post, &outcome.transmission),
    })
}
