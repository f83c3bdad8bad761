//! DSO profit maximisation over a radial feeder, using the conic relaxation
//! of the branch-flow (DistFlow) equations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::conic::{
    check_cone_tightness, solve_with, ConicProgram, LinExpr, ProgramSolution, Relation, Sense,
    SolveOptions, VarId,
};
use crate::error::{ModelError, Result};
use crate::grid::{BusId, Feeder, FeederTopology};

/// Relative cone residual above which a relaxed solution is flagged.
pub const RELAXATION_TOL: f64 = 1e-4;

/// Exchange values below this (MW) count as zero.
pub const EXCHANGE_EPS: f64 = 1e-6;

/// Cost per p.u. squared current that breaks ties towards the physical
/// (lossless-minimal) point of the relaxation.
const LOSS_REGULARIZER: f64 = 1e-3;

/// Load perturbation per feeder bus (MW / MVAr).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadDelta {
    pub p: BTreeMap<BusId, f64>,
    pub q: BTreeMap<BusId, f64>,
}

impl LoadDelta {
    pub fn is_zero(&self) -> bool {
        self.p.values().chain(self.q.values()).all(|&v| v == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DsoMode {
    /// Profit maximisation at the interface price.
    Market,
    /// Generators held at the given setpoints (MW, by id), no apparent-power
    /// limits, widened voltage bounds, exchange unrestricted; solves for the
    /// physical flows that the perturbed loads produce.
    PowerFlow { dispatch: BTreeMap<String, f64> },
}

#[derive(Debug, Clone)]
pub struct DsoOptions {
    pub base_mva: f64,
    /// Limit on import and export (MW), normally the interface capacity.
    pub exchange_cap: Option<f64>,
    pub mode: DsoMode,
    pub solve: SolveOptions,
}

impl DsoOptions {
    pub fn market(base_mva: f64, exchange_cap: Option<f64>) -> Self {
        Self {
            base_mva,
            exchange_cap,
            mode: DsoMode::Market,
            solve: SolveOptions::default(),
        }
    }
}

/// Handles to the decision variables of a DSO program.
#[derive(Debug, Clone)]
pub struct DsoVars {
    pub g_p: Vec<VarId>,
    pub g_q: Vec<VarId>,
    pub f_p: Vec<VarId>,
    pub f_q: Vec<VarId>,
    pub a: Vec<VarId>,
    /// Indexed like `feeder.buses`.
    pub v: Vec<VarId>,
    pub p_offer: VarId,
    pub p_bid: VarId,
    pub q_root: Option<VarId>,
    pub distflow_cones: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DistributionSolution {
    pub g_p: BTreeMap<String, f64>,
    pub g_q: BTreeMap<String, f64>,
    pub f_p: BTreeMap<String, f64>,
    pub f_q: BTreeMap<String, f64>,
    /// Squared current (p.u.).
    pub a: BTreeMap<String, f64>,
    /// Squared voltage (p.u.).
    pub v: BTreeMap<BusId, f64>,
    /// Larger of the sending- and receiving-end apparent flows (MVA).
    pub apparent: BTreeMap<String, f64>,
    pub p_offer: f64,
    pub p_bid: f64,
    /// Reactive power drawn from the root slack (MVAr).
    pub q_root: f64,
    /// DSO profit ($/h).
    pub objective: f64,
    pub losses: f64,
    pub root_apparent_flow: f64,
    pub max_cone_residual: f64,
    pub relaxation_inexact: bool,
    pub complementarity_degenerate: bool,
}

impl DistributionSolution {
    /// Net import from the transmission grid (MW).
    pub fn net_import(&self) -> f64 {
        self.p_bid - self.p_offer
    }

    pub fn total_generation(&self) -> f64 {
        self.g_p.values().sum()
    }
}

fn perturbed_loads(feeder: &Feeder, delta: Option<&LoadDelta>) -> Result<Vec<(f64, f64)>> {
    let zero = LoadDelta::default();
    let delta = delta.unwrap_or(&zero);
    for bus in delta.p.keys().chain(delta.q.keys()) {
        if feeder.bus(*bus).is_none() {
            return Err(ModelError::Invalid(format!(
                "load delta references bus {bus} outside feeder `{}`",
                feeder.id
            )));
        }
    }
    feeder
        .buses
        .iter()
        .map(|b| {
            let p = b.load_p + delta.p.get(&b.id).copied().unwrap_or(0.0);
            let q = b.load_q + delta.q.get(&b.id).copied().unwrap_or(0.0);
            if p < -1e-9 {
                return Err(ModelError::Invalid(format!(
                    "perturbed active load at bus {} is negative ({p:.6} MW)",
                    b.id
                )));
            }
            Ok((p.max(0.0), q))
        })
        .collect()
}

/// Adds the DSO variables and constraints to `prog` (names prefixed by
/// `prefix`) and returns the variable handles together with the objective
/// expression without the interface trade term.
pub(crate) fn add_dso_block(
    prog: &mut ConicProgram,
    prefix: &str,
    feeder: &Feeder,
    topo: &FeederTopology,
    delta: Option<&LoadDelta>,
    opts: &DsoOptions,
) -> Result<(DsoVars, LinExpr)> {
    let base = opts.base_mva;
    let loads = perturbed_loads(feeder, delta)?;
    let n = |s: &str| format!("{prefix}{s}");
    let power_flow = matches!(opts.mode, DsoMode::PowerFlow { .. });

    let mut g_p = Vec::with_capacity(feeder.generators.len());
    let mut g_q = Vec::with_capacity(feeder.generators.len());
    for g in &feeder.generators {
        let (lo, hi) = match &opts.mode {
            DsoMode::PowerFlow { dispatch } => {
                let set = dispatch.get(&g.id).copied().unwrap_or(g.p_min);
                (set, set)
            }
            DsoMode::Market => (g.p_min, g.p_max),
        };
        g_p.push(prog.add_var(n(&format!("g_p[{}]", g.id)), lo / base, hi / base)?);
        // absent reactive limits mean no reactive capability
        let qlo = g.q_min.unwrap_or(0.0);
        let qhi = g.q_max.unwrap_or(0.0);
        g_q.push(prog.add_var(n(&format!("g_q[{}]", g.id)), qlo / base, qhi / base)?);
    }
    let mut f_p = Vec::with_capacity(feeder.lines.len());
    let mut f_q = Vec::with_capacity(feeder.lines.len());
    let mut a = Vec::with_capacity(feeder.lines.len());
    for l in &feeder.lines {
        f_p.push(prog.free_var(n(&format!("f_p[{}]", l.id)))?);
        f_q.push(prog.free_var(n(&format!("f_q[{}]", l.id)))?);
        a.push(prog.nonneg_var(n(&format!("a[{}]", l.id)))?);
    }
    let mut v = Vec::with_capacity(feeder.buses.len());
    for b in &feeder.buses {
        let (lo, hi) = if power_flow && !b.is_root {
            (b.v_min.min(0.25), b.v_max.max(4.0))
        } else {
            (b.v_min, b.v_max)
        };
        v.push(prog.add_var(n(&format!("v[{}]", b.id)), lo, hi)?);
    }
    let cap = opts.exchange_cap.map_or(f64::INFINITY, |c| c / base);
    let (p_offer, p_bid) = if power_flow {
        (
            prog.add_var(n("p_offer"), 0.0, 0.0)?,
            prog.free_var(n("p_bid"))?,
        )
    } else {
        (
            prog.add_var(n("p_offer"), 0.0, cap)?,
            prog.add_var(n("p_bid"), 0.0, cap)?,
        )
    };
    let q_root = if feeder.root_reactive_slack {
        Some(prog.free_var(n("q_root"))?)
    } else {
        None
    };

    let bus_pos: BTreeMap<BusId, usize> = feeder
        .buses
        .iter()
        .enumerate()
        .map(|(i, b)| (b.id, i))
        .collect();
    let mut gens_at: BTreeMap<BusId, Vec<usize>> = BTreeMap::new();
    for (i, g) in feeder.generators.iter().enumerate() {
        gens_at.entry(g.bus).or_default().push(i);
    }

    for (bi, b) in feeder.buses.iter().enumerate() {
        let (lp, lq) = loads[bi];
        let children = topo.child_lines(b.id);
        let mut bp = LinExpr::new();
        let mut bq = LinExpr::new();
        for &li in children {
            bp.add_term(f_p[li], 1.0);
            bq.add_term(f_q[li], 1.0);
        }
        for &gi in gens_at.get(&b.id).map(Vec::as_slice).unwrap_or(&[]) {
            bp.add_term(g_p[gi], -1.0);
            bq.add_term(g_q[gi], -1.0);
        }
        if b.is_root {
            let (gsh, bsh): (f64, f64) = children.iter().fold((0.0, 0.0), |acc, &li| {
                let l = &feeder.lines[li];
                (acc.0 + l.shunt_conductance, acc.1 + l.shunt_susceptance)
            });
            // The reactive root balance uses the susceptance, like every
            // other bus; the literal conductance variant is kept selectable.
            let qsh = if feeder.root_shunt_uses_susceptance { bsh } else { gsh };
            bp.add_term(v[bi], gsh);
            bp.add_term(p_bid, -1.0);
            bp.add_term(p_offer, 1.0);
            bq.add_term(v[bi], -qsh);
            if let Some(q) = q_root {
                bq.add_term(q, -1.0);
            }
        } else {
            let li = topo
                .parent_line(b.id)
                .expect("non-root bus has a parent line");
            let l = &feeder.lines[li];
            bp.add_term(f_p[li], -1.0);
            bp.add_term(a[li], l.resistance);
            bp.add_term(v[bi], l.shunt_conductance);
            bq.add_term(f_q[li], -1.0);
            bq.add_term(a[li], l.reactance);
            bq.add_term(v[bi], -l.shunt_susceptance);
        }
        prog.add_linear(n(&format!("bal_p[{}]", b.id)), bp, Relation::Eq, -lp / base)?;
        prog.add_linear(n(&format!("bal_q[{}]", b.id)), bq, Relation::Eq, -lq / base)?;
    }

    let mut distflow_cones = Vec::with_capacity(feeder.lines.len());
    for (li, l) in feeder.lines.iter().enumerate() {
        let (r, x) = (l.resistance, l.reactance);
        let vo = v[bus_pos[&l.from_bus]];
        let vr = v[bus_pos[&l.to_bus]];
        // v_r = v_o - 2 (R f_p + X f_q) + (R^2 + X^2) a
        prog.add_linear(
            n(&format!("vdrop[{}]", l.id)),
            LinExpr::from_terms(&[
                (vr, 1.0),
                (vo, -1.0),
                (f_p[li], 2.0 * r),
                (f_q[li], 2.0 * x),
                (a[li], -(r * r + x * x)),
            ]),
            Relation::Eq,
            0.0,
        )?;
        if !power_flow {
            let s = l.apparent_limit / base;
            prog.add_soc(
                n(&format!("s_send[{}]", l.id)),
                LinExpr::constant(s),
                vec![f_p[li].into(), f_q[li].into()],
            )?;
            prog.add_soc(
                n(&format!("s_recv[{}]", l.id)),
                LinExpr::constant(s),
                vec![
                    LinExpr::from_terms(&[(f_p[li], 1.0), (a[li], -r)]),
                    LinExpr::from_terms(&[(f_q[li], 1.0), (a[li], -x)]),
                ],
            )?;
        }
        let name = n(&format!("distflow[{}]", l.id));
        prog.add_rotated_cone(
            name.clone(),
            a[li].into(),
            vo.into(),
            vec![f_p[li].into(), f_q[li].into()],
        )?;
        distflow_cones.push(name);
    }

    let mut obj = LinExpr::new();
    match &opts.mode {
        DsoMode::Market => {
            // revenue is billed on contracted (pre-attack) demand
            obj.add_constant(feeder.tariff * feeder.total_load());
            for (gi, g) in feeder.generators.iter().enumerate() {
                obj.add_term(g_p[gi], -g.offer_price * base);
            }
        }
        DsoMode::PowerFlow { .. } => {
            obj.add_term(p_bid, -base);
        }
    }
    for &ai in &a {
        obj.add_term(ai, -LOSS_REGULARIZER);
    }

    Ok((
        DsoVars {
            g_p,
            g_q,
            f_p,
            f_q,
            a,
            v,
            p_offer,
            p_bid,
            q_root,
            distflow_cones,
        },
        obj,
    ))
}

fn build(
    feeder: &Feeder,
    price: f64,
    delta: Option<&LoadDelta>,
    opts: &DsoOptions,
) -> Result<(ConicProgram, DsoVars)> {
    if !price.is_finite() {
        return Err(ModelError::Invalid("interface price is not finite".into()));
    }
    let topo = feeder.topology()?;
    let mut prog = ConicProgram::new(format!("dso_{}", feeder.id), Sense::Maximize);
    let (vars, mut obj) = add_dso_block(&mut prog, "", feeder, &topo, delta, opts)?;
    if opts.mode == DsoMode::Market {
        obj.add_term(vars.p_offer, price * opts.base_mva);
        obj.add_term(vars.p_bid, -price * opts.base_mva);
    }
    prog.set_objective(obj);
    Ok((prog, vars))
}

/// DSO program for interface price `price` ($/MWh), in market mode.
pub fn build_dso_program(
    feeder: &Feeder,
    price: f64,
    delta: Option<&LoadDelta>,
    opts: &DsoOptions,
) -> Result<ConicProgram> {
    build(feeder, price, delta, opts).map(|(p, _)| p)
}

pub(crate) fn extract(
    feeder: &Feeder,
    prog: &ConicProgram,
    sol: &ProgramSolution,
    vars: &DsoVars,
    base: f64,
) -> Result<DistributionSolution> {
    let val = |v: VarId| sol.value(v);
    let mut out = DistributionSolution {
        g_p: BTreeMap::new(),
        g_q: BTreeMap::new(),
        f_p: BTreeMap::new(),
        f_q: BTreeMap::new(),
        a: BTreeMap::new(),
        v: BTreeMap::new(),
        apparent: BTreeMap::new(),
        p_offer: val(vars.p_offer) * base,
        p_bid: val(vars.p_bid) * base,
        q_root: vars.q_root.map_or(0.0, |q| val(q) * base),
        objective: 0.0,
        losses: 0.0,
        root_apparent_flow: 0.0,
        max_cone_residual: 0.0,
        relaxation_inexact: false,
        complementarity_degenerate: false,
    };
    for (gi, g) in feeder.generators.iter().enumerate() {
        out.g_p.insert(g.id.clone(), val(vars.g_p[gi]) * base);
        out.g_q.insert(g.id.clone(), val(vars.g_q[gi]) * base);
    }
    let root = feeder.root().map(|b| b.id);
    let mut losses = 0.0;
    for (li, l) in feeder.lines.iter().enumerate() {
        let (fp, fq, a) = (val(vars.f_p[li]), val(vars.f_q[li]), val(vars.a[li]));
        out.f_p.insert(l.id.clone(), fp * base);
        out.f_q.insert(l.id.clone(), fq * base);
        out.a.insert(l.id.clone(), a);
        let send = fp.hypot(fq) * base;
        let recv = (fp - a * l.resistance).hypot(fq - a * l.reactance) * base;
        out.apparent.insert(l.id.clone(), send.max(recv));
        if Some(l.from_bus) == root {
            out.root_apparent_flow += send;
        }
        losses += a * l.resistance;
    }
    for (bi, b) in feeder.buses.iter().enumerate() {
        let vb = val(vars.v[bi]);
        out.v.insert(b.id, vb);
        let parent_g = if b.is_root {
            feeder
                .lines
                .iter()
                .filter(|l| Some(l.from_bus) == root)
                .map(|l| l.shunt_conductance)
                .sum()
        } else {
            feeder
                .lines
                .iter()
                .find(|l| l.to_bus == b.id)
                .map_or(0.0, |l| l.shunt_conductance)
        };
        losses += vb * parent_g;
    }
    out.losses = losses * base;
    let res = check_cone_tightness(prog, sol, &vars.distflow_cones)?;
    // Measure tightness relative to the cone's scale, a*v.
    out.max_cone_residual = res
        .iter()
        .map(|r| r.residual.abs() / r.rhs.abs().max(1e-6))
        .fold(0.0, f64::max);
    out.relaxation_inexact = out.max_cone_residual > RELAXATION_TOL;
    out.objective = sol.objective;
    Ok(out)
}

/// Solves the DSO program and certifies relaxation tightness.
pub fn solve_dso(
    feeder: &Feeder,
    price: f64,
    delta: Option<&LoadDelta>,
    opts: &DsoOptions,
) -> Result<DistributionSolution> {
    let (prog, vars) = build(feeder, price, delta, opts)?;
    let sol = solve_with(&prog, &opts.solve)?;
    sol.require_optimal(&prog.name)?;
    let out = extract(feeder, &prog, &sol, &vars, opts.base_mva)?;
    if out.p_offer.min(out.p_bid) <= EXCHANGE_EPS {
        return Ok(out);
    }
    // Buying and selling at one price node is degenerate; pick a side.
    let mut best: Option<DistributionSolution> = None;
    for fix in [vars.p_offer, vars.p_bid] {
        let mut p = prog.clone();
        p.set_bounds(fix, 0.0, 0.0)?;
        let s = solve_with(&p, &opts.solve)?;
        if !s.is_optimal() {
            continue;
        }
        let cand = extract(feeder, &p, &s, &vars, opts.base_mva)?;
        if best.as_ref().is_none_or(|b| cand.objective > b.objective + 1e-9) {
            best = Some(cand);
        }
    }
    let mut best = best.ok_or_else(|| ModelError::Numeric {
        program: prog.name.clone(),
        primal: sol.residuals.primal,
        dual: sol.residuals.dual,
        gap: sol.residuals.gap,
    })?;
    best.complementarity_degenerate = true;
    Ok(best)
}

/// Closed-form DistFlow solution of a single branch feeding a constant load
/// `(p, q)` (p.u.) from a root held at squared voltage `v0`; returns the
/// squared current on the branch.
pub fn single_branch_current(r: f64, x: f64, p: f64, q: f64, v0: f64) -> Option<f64> {
    // Receiving-end balance: f_p = p + r a, f_q = q + x a, and a v0 = f_p^2 + f_q^2
    // gives (r^2 + x^2) a^2 + (2 p r + 2 q x - v0) a + (p^2 + q^2) = 0.
    let qa = r * r + x * x;
    let qb = 2.0 * p * r + 2.0 * q * x - v0;
    let qc = p * p + q * q;
    let disc = qb * qb - 4.0 * qa * qc;
    if disc < 0.0 {
        return None;
    }
    // smaller root is the physical (high-voltage) solution
    Some((-qb - disc.sqrt()) / (2.0 * qa))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{BreakerSetting, DistributionBus, DistributionLine, Generator};

    fn bus(id: BusId, p: f64, q: f64, root: bool) -> DistributionBus {
        DistributionBus {
            id,
            load_p: p,
            load_q: q,
            v_max: if root { 1.0001 } else { 1.1025 },
            v_min: if root { 0.9999 } else { 0.9025 },
            is_root: root,
            iot_share: 1.0,
        }
    }

    fn line(id: &str, f: BusId, t: BusId, r: f64, x: f64, s: f64) -> DistributionLine {
        DistributionLine {
            id: id.into(),
            from_bus: f,
            to_bus: t,
            resistance: r,
            reactance: x,
            shunt_conductance: 0.0,
            shunt_susceptance: 0.0,
            apparent_limit: s,
            breaker: BreakerSetting::default(),
        }
    }

    fn two_bus(p: f64, q: f64) -> Feeder {
        Feeder {
            id: "f".into(),
            buses: vec![bus(0, 0.0, 0.0, true), bus(1, p, q, false)],
            lines: vec![line("01", 0, 1, 0.02, 0.016, 100.0)],
            generators: vec![],
            interface_bus: 1,
            tariff: 100.0,
            offer_price: None,
            bid_price: None,
            root_reactive_slack: true,
            root_shunt_uses_susceptance: true,
        }
    }

    #[test]
    fn zero_load_feeder_is_idle() {
        let f = two_bus(0.0, 0.0);
        let s = solve_dso(&f, 0.0, None, &DsoOptions::market(10.0, None)).unwrap();
        assert!(s.f_p["01"].abs() < 1e-7);
        assert!(s.a["01"].abs() < 1e-7);
        assert!(s.objective.abs() < 1e-6);
    }

    #[test]
    fn single_branch_matches_closed_form() {
        let f = two_bus(8.0, 3.0);
        let s = solve_dso(&f, 30.0, None, &DsoOptions::market(10.0, None)).unwrap();
        let v0 = s.v[&0];
        let a = single_branch_current(0.02, 0.016, 0.8, 0.3, v0).unwrap();
        assert!((s.a["01"] - a).abs() < 1e-6, "{} vs {a}", s.a["01"]);
        assert!((s.p_bid - (8.0 + a * 0.02 * 10.0)).abs() < 1e-5);
        assert!(!s.relaxation_inexact);
    }

    #[test]
    fn cheap_import_beats_local_generation() {
        let mut f = two_bus(8.0, 3.0);
        f.generators.push(Generator {
            id: "g".into(),
            bus: 1,
            side: None,
            offer_price: 10.0,
            p_max: 5.0,
            p_min: 0.0,
            q_max: None,
            q_min: None,
        });
        let s = solve_dso(&f, 5.0, None, &DsoOptions::market(10.0, None)).unwrap();
        assert!(s.g_p["g"] < 1e-5);
        let s = solve_dso(&f, 50.0, None, &DsoOptions::market(10.0, None)).unwrap();
        assert!((s.g_p["g"] - 5.0).abs() < 1e-5);
        assert!(s.p_offer.min(s.p_bid) <= EXCHANGE_EPS);
    }

    #[test]
    fn negative_perturbed_load_rejected() {
        let f = two_bus(8.0, 3.0);
        let mut d = LoadDelta::default();
        d.p.insert(1, -9.0);
        assert!(matches!(
            build_dso_program(&f, 1.0, Some(&d), &DsoOptions::market(10.0, None)),
            Err(ModelError::Invalid(_))
        ));
    }

    #[test]
    fn import_cap_makes_attack_infeasible() {
        let f = two_bus(8.0, 3.0);
        let mut d = LoadDelta::default();
        d.p.insert(1, 4.0);
        let r = solve_dso(&f, 30.0, Some(&d), &DsoOptions::market(10.0, Some(10.0)));
        assert!(r.unwrap_err().is_infeasible());
    }
}
