//! Coordinated DSO/TSO market.
//!
//! The TSO clears interface offers and bids against the quantities each
//! feeder declares. For fixed declarations the bilevel problem is recast as
//! one conic program: the DSO block, the TSO primal and dual LPs and a
//! strong-duality constraint, with the DSO's bilinear trade revenue replaced
//! by its complementary-slackness linearisation. An outer loop updates the
//! declarations to the DSO's best response at the resulting interface price
//! until they stop moving.

use std::collections::BTreeMap;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::conic::{
    dualize_lp, solve_with, ConicProgram, LinExpr, ProgramSolution, Relation, Sense, SolveOptions,
    SolveStatus, VarId,
};
use crate::distribution::{
    add_dso_block, extract, solve_dso, DistributionSolution, DsoOptions, DsoVars, LoadDelta,
};
use crate::error::{ModelError, Result};
use crate::grid::{BusId, Feeder, GridCase};
use crate::transmission::{
    assemble, build_tso_program, solve_tso, InterfaceBid, TransmissionSolution, TsoOptions,
};

/// Weight ($/h per MW) of the flow tie-break among equally good TSO dispatches.
const FLOW_TIE_BREAK: f64 = 1e-6;
/// Penalty ($ per $) on the duality gap when the hard constraint fails.
const DUALITY_PENALTY: f64 = 1e4;
/// Strong-duality bands relative to `gap_tol`, tried tightest first. The
/// welfare reference dwarfs a single feeder's trade, so a band at the solver
/// gap leaves the interface complementarity loose; tight bands occasionally
/// stall the solver, hence the ladder.
const GAP_BANDS: [f64; 4] = [1e-3, 1e-2, 1e-1, 1.0];
/// A band is accepted once the trade-revenue identity holds to this.
const LINEARIZATION_TARGET: f64 = 1e-5;
/// Declared quantities are considered settled below this change (MW).
const DECLARATION_TOL: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct MarketOptions {
    pub slack: Option<BusId>,
    pub solve: SolveOptions,
    pub max_rounds: usize,
}

impl Default for MarketOptions {
    fn default() -> Self {
        Self {
            slack: None,
            solve: SolveOptions::default(),
            max_rounds: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FeederOutcome {
    pub interface_bus: BusId,
    pub distribution: DistributionSolution,
    pub interface_price: f64,
    /// Net import into the feeder (MW).
    pub interface_exchange: f64,
    pub declared: InterfaceBid,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MarketOutcome {
    pub feeders: Vec<FeederOutcome>,
    pub transmission: TransmissionSolution,
    /// |o^T - o^TD| ($/h).
    pub coordination_residual: f64,
    /// Largest scaled mismatch of the trade-revenue linearisation.
    pub linearization_residual: f64,
    pub duality_penalized: bool,
    pub rounds: usize,
    pub converged: bool,
}

impl MarketOutcome {
    pub fn distribution(&self) -> Option<&DistributionSolution> {
        self.feeders.first().map(|f| &f.distribution)
    }

    pub fn interface_price(&self) -> Option<f64> {
        self.feeders.first().map(|f| f.interface_price)
    }

    pub fn interface_exchange(&self) -> Option<f64> {
        self.feeders.first().map(|f| f.interface_exchange)
    }

    pub fn relaxation_inexact(&self) -> bool {
        self.feeders.iter().any(|f| f.distribution.relaxation_inexact)
    }

    pub fn complementarity_degenerate(&self) -> bool {
        self.feeders
            .iter()
            .any(|f| f.distribution.complementarity_degenerate)
    }

    /// Coordination residual relative to the welfare magnitude.
    pub fn scaled_coordination_residual(&self) -> f64 {
        self.coordination_residual / self.transmission.objective.abs().max(1.0)
    }
}

fn tso_options(case: &GridCase, opts: &MarketOptions) -> TsoOptions {
    TsoOptions {
        base_mva: case.bases.transmission_mva,
        slack: opts.slack.unwrap_or_else(|| case.default_slack()),
        solve: opts.solve.clone(),
    }
}

fn dso_options(case: &GridCase, feeder: &Feeder, opts: &MarketOptions) -> DsoOptions {
    DsoOptions {
        base_mva: case.bases.distribution_mva,
        exchange_cap: case
            .transmission
            .bus(feeder.interface_bus)
            .and_then(|b| b.interface_capacity),
        mode: crate::distribution::DsoMode::Market,
        solve: opts.solve.clone(),
    }
}

/// Interface bids: idle at interface buses without a feeder, and the given
/// per-feeder declarations elsewhere.
fn interface_bids(case: &GridCase, declared: &[InterfaceBid]) -> Vec<InterfaceBid> {
    case.transmission
        .buses
        .iter()
        .filter(|b| b.is_interface)
        .map(|b| {
            declared
                .iter()
                .find(|d| d.bus == b.id)
                .copied()
                .unwrap_or_else(|| InterfaceBid::idle(b.id))
        })
        .collect()
}

fn declaration(feeder: &Feeder, exchange: f64) -> InterfaceBid {
    InterfaceBid {
        bus: feeder.interface_bus,
        offer_qty: (-exchange).max(0.0),
        offer_price: feeder.declared_offer_price(),
        bid_qty: exchange.max(0.0),
        bid_price: feeder.declared_bid_price(),
    }
}

fn deltas_for<'a>(case: &GridCase, delta: Option<&'a LoadDelta>) -> Vec<Option<&'a LoadDelta>> {
    (0..case.feeders.len())
        .map(|i| if i == 0 { delta } else { None })
        .collect()
}

pub(crate) struct SingleLevel {
    pub program: ConicProgram,
    dso: Vec<(DsoVars, LinExpr)>,
    tso_objective: LinExpr,
    dual_objective: LinExpr,
    trade_expr: Vec<LinExpr>,
    sd_scale: f64,
}

fn build(
    case: &GridCase,
    deltas: &[Option<&LoadDelta>],
    declared: &[InterfaceBid],
    opts: &MarketOptions,
    band: Option<f64>,
) -> Result<SingleLevel> {
    let topts = tso_options(case, opts);
    let bids = interface_bids(case, declared);
    let tso = build_tso_program(&case.transmission, &bids, &topts)?;
    let dual = dualize_lp(&tso)?;
    let mut prog = ConicProgram::new("market", Sense::Maximize);
    let map_p = prog.embed(&tso, "tso.")?;
    let map_d = prog.embed(&dual, "tsod.")?;
    let tso_objective = tso.objective().remap(&map_p);
    let dual_objective = dual.objective().remap(&map_d);
    let base_t = case.bases.transmission_mva;
    let base_d = case.bases.distribution_mva;

    // Duality gap rows are scaled by the welfare of the standalone clearing.
    let reference = solve_tso(&case.transmission, &bids, &topts)
        .map(|s| s.objective.abs())
        .unwrap_or(1.0);
    let sd_scale = reference.max(1.0);

    let p = |name: &str| -> VarId { map_p[tso.var(name).expect("tso variable").index()] };
    let d = |name: &str| -> VarId { map_d[dual.var(name).expect("tso dual variable").index()] };

    let mut objective = LinExpr::new();
    let mut dso = Vec::with_capacity(case.feeders.len());
    let mut trade_expr = Vec::with_capacity(case.feeders.len());
    for (k, feeder) in case.feeders.iter().enumerate() {
        let topo = feeder.topology()?;
        let dopts = dso_options(case, feeder, opts);
        let (vars, obj) = add_dso_block(
            &mut prog,
            &format!("dso{k}."),
            feeder,
            &topo,
            deltas.get(k).copied().flatten(),
            &dopts,
        )?;
        let b = feeder.interface_bus;
        let bid = bids.iter().find(|x| x.bus == b).expect("interface bid");
        let (po_t, pb_t) = (p(&format!("pO[{b}]")), p(&format!("pB[{b}]")));
        prog.add_linear(
            format!("link_pO[{b}]"),
            LinExpr::from_terms(&[(vars.p_offer, base_d / base_t), (po_t, -1.0)]),
            Relation::Eq,
            0.0,
        )?;
        prog.add_linear(
            format!("link_pB[{b}]"),
            LinExpr::from_terms(&[(vars.p_bid, base_d / base_t), (pb_t, -1.0)]),
            Relation::Eq,
            0.0,
        )?;
        // lambda (pO - pB) = C^O pO + psi_O Q^O - C^B pB + psi_B Q^B
        let trade = LinExpr::from_terms(&[
            (po_t, bid.offer_price * base_t),
            (d(&format!("pO_cap[{b}]")), bid.offer_qty / base_t),
            (pb_t, -bid.bid_price * base_t),
            (d(&format!("pB_cap[{b}]")), bid.bid_qty / base_t),
        ]);
        objective.add_expr(&obj, 1.0);
        objective.add_expr(&trade, 1.0);
        trade_expr.push(trade);
        dso.push((vars, obj));
    }

    let mut gap = tso_objective.clone();
    gap.add_expr(&dual_objective, -1.0);
    let gap = gap.scaled(1.0 / sd_scale);
    if let Some(band) = band {
        let tol = opts.solve.tolerances.gap_tol * band;
        prog.add_linear("strong_duality_lo", gap.clone(), Relation::Ge, -tol)?;
        prog.add_linear("strong_duality_hi", gap, Relation::Le, tol)?;
    } else {
        // dual - primal >= 0 for every feasible pair, so the gap itself is the penalty
        objective.add_expr(&gap, DUALITY_PENALTY * sd_scale);
    }

    for l in &case.transmission.lines {
        let f = p(&format!("f[{}]", l.id));
        let t = prog.nonneg_var(format!("absf[{}]", l.id))?;
        prog.add_linear(
            format!("absf_hi[{}]", l.id),
            LinExpr::from_terms(&[(t, 1.0), (f, -1.0)]),
            Relation::Ge,
            0.0,
        )?;
        prog.add_linear(
            format!("absf_lo[{}]", l.id),
            LinExpr::from_terms(&[(t, 1.0), (f, 1.0)]),
            Relation::Ge,
            0.0,
        )?;
        objective.add_term(t, -FLOW_TIE_BREAK * base_t);
    }
    prog.set_objective(objective);
    Ok(SingleLevel {
        program: prog,
        dso,
        tso_objective,
        dual_objective,
        trade_expr,
        sd_scale,
    })
}

/// The single-level program for the given declarations (hard strong-duality
/// constraint). Exposed for inspection and debug dumps.
pub fn build_single_level(
    case: &GridCase,
    delta: Option<&LoadDelta>,
    declared: &[InterfaceBid],
    opts: &MarketOptions,
) -> Result<ConicProgram> {
    build(case, &deltas_for(case, delta), declared, opts, Some(GAP_BANDS[0])).map(|s| s.program)
}

fn outcome(
    case: &GridCase,
    sl: &SingleLevel,
    sol: &ProgramSolution,
    declared: &[InterfaceBid],
) -> Result<MarketOutcome> {
    let bids = interface_bids(case, declared);
    let base_t = case.bases.transmission_mva;
    let mut tso = assemble(
        &case.transmission,
        &bids,
        base_t,
        |n| sol.value_by_name(&format!("tso.{n}")).unwrap_or(0.0),
        |n| sol.value_by_name(&format!("tsod.{n}")).unwrap_or(0.0),
    );
    tso.objective = sl.tso_objective.eval(&sol.primal);
    tso.dual_objective = sl.dual_objective.eval(&sol.primal);
    let mut feeders = Vec::with_capacity(case.feeders.len());
    let mut lin_res: f64 = 0.0;
    for (k, feeder) in case.feeders.iter().enumerate() {
        let (vars, obj) = &sl.dso[k];
        let mut dist = extract(
            feeder,
            &sl.program,
            sol,
            vars,
            case.bases.distribution_mva,
        )?;
        let b = feeder.interface_bus;
        let price = tso.lmp[&b];
        let trade = price * (dist.p_offer - dist.p_bid);
        dist.objective = obj.eval(&sol.primal) + trade;
        let linear = sl.trade_expr[k].eval(&sol.primal);
        let scale = 1.0f64.max(trade.abs()).max(linear.abs());
        lin_res = lin_res.max((trade - linear).abs() / scale);
        feeders.push(FeederOutcome {
            interface_bus: b,
            interface_price: price,
            interface_exchange: dist.p_bid - dist.p_offer,
            declared: *declared.get(k).unwrap_or(&InterfaceBid::idle(b)),
            distribution: dist,
        });
    }
    Ok(MarketOutcome {
        feeders,
        coordination_residual: (tso.objective - tso.dual_objective).abs(),
        transmission: tso,
        linearization_residual: lin_res,
        duality_penalized: false,
        rounds: 0,
        converged: true,
    })
}

fn solve_single_level(
    case: &GridCase,
    deltas: &[Option<&LoadDelta>],
    declared: &[InterfaceBid],
    opts: &MarketOptions,
) -> Result<MarketOutcome> {
    let mut best: Option<MarketOutcome> = None;
    for band in GAP_BANDS {
        let sl = build(case, deltas, declared, opts, Some(band))?;
        let sol = solve_with(&sl.program, &opts.solve)?;
        if sol.status != SolveStatus::Optimal {
            debug!("single-level solve with gap band {band} returned {:?}", sol.status);
            continue;
        }
        let out = outcome(case, &sl, &sol, declared)?;
        if out.linearization_residual <= LINEARIZATION_TARGET {
            return Ok(out);
        }
        debug!(
            "gap band {band}: trade identity residual {:.2e}",
            out.linearization_residual
        );
        if best
            .as_ref()
            .is_none_or(|b| out.linearization_residual < b.linearization_residual)
        {
            best = Some(out);
        }
    }
    if let Some(out) = best {
        return Ok(out);
    }
    debug!("retrying the single-level market with a duality-gap penalty");
    let sl = build(case, deltas, declared, opts, None)?;
    let sol = solve_with(&sl.program, &opts.solve)?;
    sol.require_optimal("market")?;
    let mut out = outcome(case, &sl, &sol, declared)?;
    out.duality_penalized = true;
    let scaled = out.coordination_residual / sl.sd_scale;
    if scaled > 1e-5 {
        return Err(ModelError::Numeric {
            program: "market".into(),
            primal: sol.residuals.primal,
            dual: sol.residuals.dual,
            gap: scaled,
        });
    }
    Ok(out)
}

fn best_response(
    case: &GridCase,
    k: usize,
    price: f64,
    delta: Option<&LoadDelta>,
    opts: &MarketOptions,
) -> Result<InterfaceBid> {
    let feeder = &case.feeders[k];
    let dso = solve_dso(feeder, price, delta, &dso_options(case, feeder, opts))?;
    Ok(declaration(feeder, dso.net_import()))
}

/// Clears the coordinated market, optionally with a load perturbation on the
/// first feeder.
pub fn solve_market(
    case: &GridCase,
    delta: Option<&LoadDelta>,
    opts: &MarketOptions,
) -> Result<MarketOutcome> {
    let deltas = deltas_for(case, delta);
    let topts = tso_options(case, opts);
    if case.feeders.is_empty() {
        let bids = interface_bids(case, &[]);
        let tso = solve_tso(&case.transmission, &bids, &topts)?;
        return Ok(MarketOutcome {
            feeders: Vec::new(),
            coordination_residual: (tso.objective - tso.dual_objective).abs(),
            transmission: tso,
            linearization_residual: 0.0,
            duality_penalized: false,
            rounds: 0,
            converged: true,
        });
    }

    // start from the best response to the price seen without the feeders
    let idle = solve_tso(&case.transmission, &interface_bids(case, &[]), &topts)?;
    let mut declared: Vec<InterfaceBid> = case
        .feeders
        .iter()
        .enumerate()
        .map(|(k, f)| best_response(case, k, idle.lmp[&f.interface_bus], deltas[k], opts))
        .collect::<Result<_>>()?;

    let mut last: Option<MarketOutcome> = None;
    for round in 1..=opts.max_rounds {
        let mut out = solve_single_level(case, &deltas, &declared, opts)?;
        out.rounds = round;
        let next: Vec<InterfaceBid> = out
            .feeders
            .iter()
            .enumerate()
            .map(|(k, f)| best_response(case, k, f.interface_price, deltas[k], opts))
            .collect::<Result<_>>()?;
        let moved = declared
            .iter()
            .zip(&next)
            .map(|(a, b)| (a.offer_qty - b.offer_qty).abs().max((a.bid_qty - b.bid_qty).abs()))
            .fold(0.0, f64::max);
        debug!("market round {round}: declarations moved {moved:.3e} MW");
        if moved <= DECLARATION_TOL {
            return Ok(out);
        }
        declared = next;
        last = Some(out);
    }
    warn!("market declarations did not settle in {} rounds", opts.max_rounds);
    let mut out = last.expect("at least one round");
    out.converged = false;
    Ok(out)
}

/// Alternating standalone solves: TSO clearing of the declarations, then the
/// DSO's best response at the resulting price, until the declarations settle.
/// Returns the final interface exchange (MW) and price per feeder.
pub fn diagonalize(
    case: &GridCase,
    delta: Option<&LoadDelta>,
    opts: &MarketOptions,
) -> Result<Vec<(f64, f64)>> {
    let deltas = deltas_for(case, delta);
    let topts = tso_options(case, opts);
    let mut declared: Vec<InterfaceBid> = case
        .feeders
        .iter()
        .map(|f| InterfaceBid::idle(f.interface_bus))
        .collect();
    let mut result = Vec::new();
    for _ in 0..opts.max_rounds.max(1) * 2 {
        let tso = solve_tso(&case.transmission, &interface_bids(case, &declared), &topts)?;
        let mut next = Vec::with_capacity(declared.len());
        result.clear();
        for (k, f) in case.feeders.iter().enumerate() {
            let price = tso.lmp[&f.interface_bus];
            let dopts = dso_options(case, f, opts);
            let dso = solve_dso(f, price, deltas[k], &dopts)?;
            next.push(declaration(f, dso.net_import()));
            result.push((dso.net_import(), price));
        }
        let settled = declared.iter().zip(&next).all(|(a, b)| {
            (a.bid_qty - b.bid_qty).abs() <= DECLARATION_TOL
                && (a.offer_qty - b.offer_qty).abs() <= DECLARATION_TOL
        });
        declared = next;
        if settled {
            break;
        }
    }
    Ok(result)
}

/// Security margins `F - |f|` (MW) of every transmission line.
pub fn security_margins(case: &GridCase, tso: &TransmissionSolution) -> BTreeMap<String, f64> {
    case.transmission
        .lines
        .iter()
        .map(|l| {
            let f = tso.f_p.get(&l.id).copied().unwrap_or(0.0);
            (l.id.clone(), l.flow_limit - f.abs())
        })
        .collect()
}
