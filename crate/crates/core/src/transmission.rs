//! TSO welfare maximisation on the DC network, its duals and its dual LP.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::conic::{
    dualize_lp, solve_with, ConicProgram, LinExpr, ProgramSolution, Relation, Sense, SolveOptions,
};
use crate::error::{CaseError, ModelError, Result};
use crate::grid::{BusId, TransmissionNetwork};

/// Quantity (MW) and price ($/MWh) a feeder declares at its interface bus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterfaceBid {
    pub bus: BusId,
    pub offer_qty: f64,
    pub offer_price: f64,
    pub bid_qty: f64,
    pub bid_price: f64,
}

impl InterfaceBid {
    pub fn idle(bus: BusId) -> Self {
        Self {
            bus,
            offer_qty: 0.0,
            offer_price: 0.0,
            bid_qty: 0.0,
            bid_price: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TsoOptions {
    pub base_mva: f64,
    pub slack: BusId,
    pub solve: SolveOptions,
}

impl TsoOptions {
    pub fn new(base_mva: f64, slack: BusId) -> Self {
        Self {
            base_mva,
            slack,
            solve: SolveOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct TransmissionSolution {
    pub g_p: BTreeMap<String, f64>,
    pub f_p: BTreeMap<String, f64>,
    pub theta: BTreeMap<BusId, f64>,
    pub p_offer: BTreeMap<BusId, f64>,
    pub p_bid: BTreeMap<BusId, f64>,
    pub lmp: BTreeMap<BusId, f64>,
    pub alpha_max: BTreeMap<String, f64>,
    pub alpha_min: BTreeMap<String, f64>,
    pub psi_offer: BTreeMap<BusId, f64>,
    pub psi_bid: BTreeMap<BusId, f64>,
    pub xi: BTreeMap<String, f64>,
    pub delta_max: BTreeMap<String, f64>,
    pub delta_min: BTreeMap<String, f64>,
    /// Welfare ($/h).
    pub objective: f64,
    pub dual_objective: f64,
}

impl TransmissionSolution {
    pub fn total_generation(&self) -> f64 {
        self.g_p.values().sum()
    }

    /// Net power delivered into feeders (MW).
    pub fn net_interface_export(&self) -> f64 {
        self.p_bid.values().sum::<f64>() - self.p_offer.values().sum::<f64>()
    }
}

pub(crate) fn names_gen(id: &str) -> [String; 3] {
    [format!("g[{id}]"), format!("gmax[{id}]"), format!("gmin[{id}]")]
}

/// Builds the TSO welfare-maximisation LP.
///
/// Variables are in p.u. on `opts.base_mva`; the objective is in $/h. The
/// balance row of bus `b` is named `bal[b]` and its dual divided by the base
/// is the LMP.
pub fn build_tso_program(
    net: &TransmissionNetwork,
    bids: &[InterfaceBid],
    opts: &TsoOptions,
) -> Result<ConicProgram> {
    let base = opts.base_mva;
    let index = net.bus_index();
    if !index.contains_key(&opts.slack) {
        return Err(CaseError::UnknownBus(opts.slack).into());
    }
    let mut prog = ConicProgram::new("tso", Sense::Maximize);
    let mut obj = LinExpr::constant(net.buses.iter().map(|b| b.bid_price * b.load_p).sum());
    let mut bal: Vec<LinExpr> = vec![LinExpr::new(); net.buses.len()];

    for g in &net.generators {
        let [gv, gmax, gmin] = names_gen(&g.id);
        let v = prog.free_var(gv)?;
        let bi = *index.get(&g.bus).ok_or(CaseError::UnknownBus(g.bus))?;
        bal[bi].add_term(v, -1.0);
        obj.add_term(v, -g.offer_price * base);
        prog.add_linear(gmax, v.into(), Relation::Le, g.p_max / base)?;
        prog.add_linear(gmin, v.into(), Relation::Ge, g.p_min / base)?;
    }
    for bid in bids {
        let bi = *index.get(&bid.bus).ok_or(CaseError::UnknownBus(bid.bus))?;
        let po = prog.nonneg_var(format!("pO[{}]", bid.bus))?;
        let pb = prog.nonneg_var(format!("pB[{}]", bid.bus))?;
        bal[bi].add_term(po, -1.0);
        bal[bi].add_term(pb, 1.0);
        obj.add_term(po, -bid.offer_price * base);
        obj.add_term(pb, bid.bid_price * base);
        prog.add_linear(
            format!("pO_cap[{}]", bid.bus),
            po.into(),
            Relation::Le,
            bid.offer_qty.max(0.0) / base,
        )?;
        prog.add_linear(
            format!("pB_cap[{}]", bid.bus),
            pb.into(),
            Relation::Le,
            bid.bid_qty.max(0.0) / base,
        )?;
    }
    let theta: Vec<_> = net
        .buses
        .iter()
        .map(|b| prog.free_var(format!("theta[{}]", b.id)))
        .collect::<std::result::Result<_, _>>()?;
    for l in &net.lines {
        let f = prog.free_var(format!("f[{}]", l.id))?;
        let o = index[&l.from_bus];
        let r = index[&l.to_bus];
        bal[o].add_term(f, 1.0);
        bal[r].add_term(f, -1.0);
        prog.add_linear(
            format!("flow[{}]", l.id),
            LinExpr::from_terms(&[
                (f, 1.0),
                (theta[o], -1.0 / l.reactance),
                (theta[r], 1.0 / l.reactance),
            ]),
            Relation::Eq,
            0.0,
        )?;
        prog.add_linear(format!("fmax[{}]", l.id), f.into(), Relation::Le, l.flow_limit / base)?;
        prog.add_linear(format!("fmin[{}]", l.id), f.into(), Relation::Ge, -l.flow_limit / base)?;
    }
    // outflow - generation - offers + bids = -load
    for (b, e) in net.buses.iter().zip(bal) {
        prog.add_linear(format!("bal[{}]", b.id), e, Relation::Eq, -b.load_p / base)?;
    }
    prog.add_linear("theta_ref", theta[index[&opts.slack]].into(), Relation::Eq, 0.0)?;
    prog.set_objective(obj);
    Ok(prog)
}

/// The LP dual of [`build_tso_program`]; dual variables carry the names of
/// the primal rows and its optimum equals the primal welfare.
pub fn build_tso_dual(
    net: &TransmissionNetwork,
    bids: &[InterfaceBid],
    opts: &TsoOptions,
) -> Result<ConicProgram> {
    let mut d = dualize_lp(&build_tso_program(net, bids, opts)?)?;
    d.name = "tso_dual".into();
    Ok(d)
}

/// Assembles a [`TransmissionSolution`] from name lookups of primal values
/// (by primal variable name) and dual values (by primal row name, in $/h per
/// p.u.).
pub(crate) fn assemble(
    net: &TransmissionNetwork,
    bids: &[InterfaceBid],
    base: f64,
    primal: impl Fn(&str) -> f64,
    dual: impl Fn(&str) -> f64,
) -> TransmissionSolution {
    let mut s = TransmissionSolution::default();
    for g in &net.generators {
        let [gv, gmax, gmin] = names_gen(&g.id);
        s.g_p.insert(g.id.clone(), primal(&gv) * base);
        s.alpha_max.insert(g.id.clone(), dual(&gmax) / base);
        s.alpha_min.insert(g.id.clone(), dual(&gmin) / base);
    }
    for b in bids {
        s.p_offer.insert(b.bus, primal(&format!("pO[{}]", b.bus)) * base);
        s.p_bid.insert(b.bus, primal(&format!("pB[{}]", b.bus)) * base);
        s.psi_offer.insert(b.bus, dual(&format!("pO_cap[{}]", b.bus)) / base);
        s.psi_bid.insert(b.bus, dual(&format!("pB_cap[{}]", b.bus)) / base);
    }
    for b in &net.buses {
        s.theta.insert(b.id, primal(&format!("theta[{}]", b.id)));
        s.lmp.insert(b.id, dual(&format!("bal[{}]", b.id)) / base);
    }
    for l in &net.lines {
        s.f_p.insert(l.id.clone(), primal(&format!("f[{}]", l.id)) * base);
        s.xi.insert(l.id.clone(), dual(&format!("flow[{}]", l.id)) / base);
        s.delta_max.insert(l.id.clone(), dual(&format!("fmax[{}]", l.id)) / base);
        s.delta_min.insert(l.id.clone(), dual(&format!("fmin[{}]", l.id)) / base);
    }
    s
}

fn lookup(sol: &ProgramSolution, name: &str) -> f64 {
    sol.value_by_name(name).unwrap_or(0.0)
}

/// Solves the TSO LP and evaluates its dual objective at the reported duals.
pub fn solve_tso(
    net: &TransmissionNetwork,
    bids: &[InterfaceBid],
    opts: &TsoOptions,
) -> Result<TransmissionSolution> {
    let prog = build_tso_program(net, bids, opts)?;
    let sol = solve_with(&prog, &opts.solve)?;
    sol.require_optimal("tso")?;
    let dual_prog = dualize_lp(&prog)?;
    let mut s = assemble(
        net,
        bids,
        opts.base_mva,
        |n| lookup(&sol, n),
        |n| sol.dual(n).unwrap_or(0.0),
    );
    let duals: Vec<f64> = dual_prog
        .variables()
        .iter()
        .map(|v| sol.dual(&v.name).unwrap_or(0.0))
        .collect();
    s.objective = sol.objective;
    s.dual_objective = dual_prog.objective().eval(&duals);
    Ok(s)
}

/// One-sided marginal costs of serving extra load at `bus`:
/// `(o(L - eps) - o(L)) / eps` and `(o(L) - o(L + eps)) / eps`, with the
/// bid-price welfare term of the extra load removed. The LMP of a
/// non-degenerate instance lies between the two.
pub fn marginal_cost(
    net: &TransmissionNetwork,
    bids: &[InterfaceBid],
    bus: BusId,
    eps: f64,
    opts: &TsoOptions,
) -> Result<(f64, f64)> {
    let at = |shift: f64| -> Result<f64> {
        let mut n = net.clone();
        let b = n
            .buses
            .iter_mut()
            .find(|b| b.id == bus)
            .ok_or(CaseError::UnknownBus(bus))?;
        b.load_p += shift;
        let bid_price = b.bid_price;
        let prog = build_tso_program(&n, bids, opts)?;
        let sol = solve_with(&prog, &opts.solve)?;
        sol.require_optimal("tso")?;
        Ok(sol.objective - bid_price * shift)
    };
    let mid = at(0.0)?;
    let left = match at(-eps) {
        Ok(v) => (v - mid) / eps,
        Err(ModelError::Infeasible { .. }) => f64::NEG_INFINITY,
        Err(e) => return Err(e),
    };
    let right = match at(eps) {
        Ok(v) => (mid - v) / eps,
        Err(ModelError::Infeasible { .. }) => f64::INFINITY,
        Err(e) => return Err(e),
    };
    Ok((left, right))
}
