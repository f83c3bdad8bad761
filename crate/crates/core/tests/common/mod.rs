#![allow(dead_code)]

use std::collections::BTreeMap;

use gridstorm::attacker::AttackBudget;
use gridstorm::grid::*;
use rand::Rng;

pub fn tbus(id: BusId, load: f64) -> TransmissionBus {
    TransmissionBus {
        id,
        load_p: load,
        bid_price: 0.0,
        is_interface: false,
        interface_capacity: None,
    }
}

pub fn tline(id: &str, from: BusId, to: BusId, x: f64, limit: f64) -> TransmissionLine {
    TransmissionLine {
        id: id.into(),
        from_bus: from,
        to_bus: to,
        reactance: x,
        flow_limit: limit,
    }
}

pub fn generator(id: &str, bus: BusId, price: f64, p_max: f64) -> Generator {
    Generator {
        id: id.into(),
        bus,
        side: None,
        offer_price: price,
        p_max,
        p_min: 0.0,
        q_max: None,
        q_min: None,
    }
}

pub fn dbus(id: BusId, p: f64, q: f64, root: bool) -> DistributionBus {
    DistributionBus {
        id,
        load_p: p,
        load_q: q,
        v_max: if root { 1.0001 } else { 1.21 },
        v_min: if root { 0.9999 } else { 0.81 },
        is_root: root,
        iot_share: 1.0,
    }
}

pub fn dline(id: &str, from: BusId, to: BusId, r: f64, x: f64, limit: f64) -> DistributionLine {
    DistributionLine {
        id: id.into(),
        from_bus: from,
        to_bus: to,
        resistance: r,
        reactance: x,
        shunt_conductance: 0.0,
        shunt_susceptance: 0.0,
        apparent_limit: limit,
        breaker: BreakerSetting::default(),
    }
}

pub fn feeder(
    buses: Vec<DistributionBus>,
    lines: Vec<DistributionLine>,
    generators: Vec<Generator>,
    interface_bus: BusId,
) -> Feeder {
    Feeder {
        id: "f".into(),
        buses,
        lines,
        generators,
        interface_bus,
        tariff: 100.0,
        offer_price: None,
        bid_price: None,
        root_reactive_slack: true,
        root_shunt_uses_susceptance: true,
    }
}

/// Cheap unit behind a 40 MW line, expensive unit at the 100 MW load.
pub fn two_bus_congested() -> TransmissionNetwork {
    TransmissionNetwork {
        buses: vec![tbus(1, 0.0), tbus(2, 100.0)],
        lines: vec![tline("l", 1, 2, 0.1, 40.0)],
        generators: vec![generator("a", 1, 10.0, 200.0), generator("b", 2, 50.0, 200.0)],
    }
}

/// Random radial feeder on buses `0..n` (0 is the root) with a load on
/// every other bus.
pub fn random_feeder(rng: &mut impl Rng, n: usize) -> Feeder {
    let mut buses = vec![dbus(0, 0.0, 0.0, true)];
    let mut lines = Vec::new();
    for b in 1..n as BusId {
        let p = rng.gen_range(0.2..2.0);
        buses.push(dbus(b, p, p * rng.gen_range(0.1..0.5), false));
        let parent = rng.gen_range(0..b);
        let r = rng.gen_range(0.001..0.01);
        lines.push(dline(&format!("{parent}-{b}"), parent, b, r, 0.8 * r, 100.0));
    }
    feeder(buses, lines, vec![], 1)
}

/// Triangle transmission grid with a feeder behind interface bus 3; no line
/// binds at the market optimum.
pub fn small_market_case() -> GridCase {
    let mut b3 = tbus(3, 40.0);
    b3.is_interface = true;
    b3.interface_capacity = Some(30.0);
    let transmission = TransmissionNetwork {
        buses: vec![tbus(1, 20.0), tbus(2, 30.0), b3],
        lines: vec![
            tline("1-2", 1, 2, 0.1, 500.0),
            tline("1-3", 1, 3, 0.1, 500.0),
            tline("2-3", 2, 3, 0.1, 500.0),
        ],
        generators: vec![generator("cheap", 1, 20.0, 150.0), generator("peak", 2, 45.0, 150.0)],
    };
    let mut f = feeder(
        vec![
            dbus(0, 0.0, 0.0, true),
            dbus(1, 3.0, 1.0, false),
            dbus(2, 2.0, 0.8, false),
            dbus(3, 2.5, 1.0, false),
        ],
        vec![
            dline("0-1", 0, 1, 0.004, 0.003, 20.0),
            dline("1-2", 1, 2, 0.003, 0.002, 20.0),
            dline("1-3", 1, 3, 0.003, 0.002, 20.0),
        ],
        vec![generator("dg", 2, 30.0, 2.0)],
        3,
    );
    f.generators[0].side = Some(Side::Distribution);
    GridCase {
        transmission,
        feeders: vec![f],
        economics: Economics { voll: 10_000.0 },
        bases: Bases::default(),
    }
}

/// Lines on the path from `bus` to the root, found by walking parent links
/// of the line list (independent of the library's tree view).
pub fn root_path_lines(f: &Feeder, bus: BusId) -> Vec<String> {
    let mut out = Vec::new();
    let mut at = bus;
    while let Some(l) = f.lines.iter().find(|l| l.to_bus == at) {
        out.push(l.id.clone());
        at = l.from_bus;
    }
    out
}

/// PTDF of the triangle grid of `small_market_case`, slack at bus 2.
pub fn triangle_ptdf() -> PtdfMatrix {
    compute_ptdf(&small_market_case().transmission, 2).unwrap()
}

/// Blended objective of a candidate, computed from root paths walked over
/// the raw line list.
pub fn oracle_objective(
    f: &Feeder,
    ptdf: &PtdfMatrix,
    gamma: f64,
    dp: &BTreeMap<BusId, f64>,
    dq: &BTreeMap<BusId, f64>,
) -> f64 {
    let mut fp: BTreeMap<String, f64> = BTreeMap::new();
    let mut fq: BTreeMap<String, f64> = BTreeMap::new();
    for (b, v) in dp {
        for l in root_path_lines(f, *b) {
            *fp.entry(l).or_default() += v;
        }
    }
    for (b, v) in dq {
        for l in root_path_lines(f, *b) {
            *fq.entry(l).or_default() += v;
        }
    }
    let od: f64 = fp.values().chain(fq.values()).map(|v| v * v).sum();
    let total: f64 = dp.values().sum();
    let ot: f64 = ptdf.column(f.interface_bus).unwrap().iter().map(|w| (w * total).powi(2)).sum();
    (1.0 - gamma) * od + gamma * ot
}

/// Best blended objective over every joint (p, q) vertex of the box.
pub fn brute_force(f: &Feeder, ptdf: &PtdfMatrix, budget: &AttackBudget) -> f64 {
    let buses: Vec<BusId> = budget.bounds.keys().copied().collect();
    let n = buses.len();
    let mut best = f64::NEG_INFINITY;
    for mask in 0u32..(1 << (2 * n)) {
        let mut dp = BTreeMap::new();
        let mut dq = BTreeMap::new();
        for (i, b) in buses.iter().enumerate() {
            let bb = budget.bounds[b];
            dp.insert(*b, if mask >> i & 1 == 1 { bb.p_max } else { bb.p_min });
            dq.insert(*b, if mask >> (n + i) & 1 == 1 { bb.q_max } else { bb.q_min });
        }
        best = best.max(oracle_objective(f, ptdf, budget.gamma, &dp, &dq));
    }
    best
}
