//! Regenerates `data/rts3_13bus.json`: a three-area reliability test system
//! with a 13-bus radial feeder attached at bus 102.
//!
//! Run with `cargo run --release --example build_bundled_case`.
//!
//! Calibration steps, in order:
//! 1. feeder impedances are scaled so pre-attack losses are 1.3 MW;
//! 2. feeder ratings are set to 1.1x the resulting apparent flows (breakers
//!    then trip at 1.2x);
//! 3. one combustion turbine at bus 102 is repriced just above the system's
//!    marginal unit, which is derated so the turbine runs at 12 MW.

use std::collections::BTreeSet;

use gridstorm::grid::{
    BreakerSetting, Bases, DistributionBus, DistributionLine, Economics, Feeder, Generator,
    GridCase, TransmissionBus, TransmissionLine, TransmissionNetwork,
};
use gridstorm::market::{solve_market, MarketOptions};

const AREA_BRANCHES: [(u32, u32, f64, f64); 38] = [
    (1, 2, 0.0139, 175.0),
    (1, 3, 0.2112, 175.0),
    (1, 5, 0.0845, 175.0),
    (2, 4, 0.1267, 175.0),
    (2, 6, 0.1920, 175.0),
    (3, 9, 0.1190, 175.0),
    (3, 24, 0.0839, 400.0),
    (4, 9, 0.1037, 175.0),
    (5, 10, 0.0883, 175.0),
    (6, 10, 0.0605, 175.0),
    (7, 8, 0.0614, 175.0),
    (8, 9, 0.1651, 175.0),
    (8, 10, 0.1651, 175.0),
    (9, 11, 0.0839, 400.0),
    (9, 12, 0.0839, 400.0),
    (10, 11, 0.0839, 400.0),
    (10, 12, 0.0839, 400.0),
    (11, 13, 0.0476, 500.0),
    (11, 14, 0.0418, 500.0),
    (12, 13, 0.0476, 500.0),
    (12, 23, 0.0966, 500.0),
    (13, 23, 0.0865, 500.0),
    (14, 16, 0.0389, 500.0),
    (15, 16, 0.0173, 500.0),
    (15, 21, 0.0490, 500.0),
    (15, 21, 0.0490, 500.0),
    (15, 24, 0.0519, 500.0),
    (16, 17, 0.0259, 500.0),
    (16, 19, 0.0231, 500.0),
    (17, 18, 0.0144, 500.0),
    (17, 22, 0.1053, 500.0),
    (18, 21, 0.0259, 500.0),
    (18, 21, 0.0259, 500.0),
    (19, 20, 0.0396, 500.0),
    (19, 20, 0.0396, 500.0),
    (20, 23, 0.0216, 500.0),
    (20, 23, 0.0216, 500.0),
    (21, 22, 0.0678, 500.0),
];

const TIES: [(u32, u32, f64, f64); 6] = [
    (107, 203, 0.1610, 175.0),
    (113, 215, 0.0652, 500.0),
    (123, 217, 0.1619, 500.0),
    (121, 325, 0.0970, 500.0),
    (325, 323, 0.0970, 500.0),
    (318, 223, 0.0652, 500.0),
];

const LOADS: [(u32, f64); 17] = [
    (1, 108.0),
    (2, 97.0),
    (3, 180.0),
    (4, 74.0),
    (5, 71.0),
    (6, 136.0),
    (7, 125.0),
    (8, 171.0),
    (9, 175.0),
    (10, 195.0),
    (13, 265.0),
    (14, 194.0),
    (15, 317.0),
    (16, 100.0),
    (18, 333.0),
    (19, 181.0),
    (20, 128.0),
];

/// (bus, unit type, count)
const UNITS: [(u32, &str, usize); 14] = [
    (1, "U20", 2),
    (1, "U76", 2),
    (2, "U20", 2),
    (2, "U76", 2),
    (7, "U100", 3),
    (13, "U197", 3),
    (15, "U12", 5),
    (15, "U155", 1),
    (16, "U155", 1),
    (18, "U400", 1),
    (21, "U400", 1),
    (22, "U50", 6),
    (23, "U155", 2),
    (23, "U350", 1),
];

fn unit_data(kind: &str) -> (f64, f64) {
    // (capacity MW, offer $/MWh)
    match kind {
        "U12" => (12.0, 58.0),
        "U20" => (20.0, 130.0),
        "U50" => (50.0, 0.5),
        "U76" => (76.0, 17.3),
        "U100" => (100.0, 43.5),
        "U155" => (155.0, 14.5),
        "U197" => (197.0, 48.0),
        "U350" => (350.0, 12.6),
        "U400" => (400.0, 6.0),
        other => panic!("unknown unit type {other}"),
    }
}

const WIND_BUSES: [u32; 19] = [
    103, 104, 108, 110, 114, 119, 203, 204, 208, 210, 214, 219, 303, 304, 308, 310, 314, 319, 324,
];

const TOTAL_LOAD: f64 = 8900.0;
const TOTAL_WIND: f64 = 890.0;
const RATING_FACTOR: f64 = 0.8;
const INTERFACE_BUS: u32 = 102;
const TARGET_LOSSES: f64 = 1.3;
const TURBINE_OUTPUT: f64 = 12.0;
const TURBINE: &str = "102_U20_1";

fn transmission() -> TransmissionNetwork {
    let raw_total: f64 = LOADS.iter().map(|l| l.1).sum::<f64>() * 3.0;
    let scale = TOTAL_LOAD / raw_total;
    let mut buses = Vec::new();
    for area in 1..=3u32 {
        for local in 1..=24u32 {
            let id = area * 100 + local;
            let load = LOADS
                .iter()
                .find(|l| l.0 == local)
                .map_or(0.0, |l| l.1 * scale);
            buses.push(TransmissionBus {
                id,
                load_p: load,
                bid_price: 0.0,
                is_interface: id == INTERFACE_BUS,
                interface_capacity: (id == INTERFACE_BUS).then_some(60.0),
            });
        }
    }
    buses.push(TransmissionBus {
        id: 325,
        load_p: 0.0,
        bid_price: 0.0,
        is_interface: false,
        interface_capacity: None,
    });
    // absorb rounding so the total is exact
    let total: f64 = buses.iter().map(|b| b.load_p).sum();
    buses
        .iter_mut()
        .find(|b| b.id == 318)
        .unwrap()
        .load_p += TOTAL_LOAD - total;

    let mut lines = Vec::new();
    for area in 1..=3u32 {
        let mut seen = BTreeSet::new();
        for &(f, t, x, rating) in &AREA_BRANCHES {
            let (f, t) = (area * 100 + f, area * 100 + t);
            let circuit = if seen.insert((f, t)) { 1 } else { 2 };
            lines.push(TransmissionLine {
                id: format!("{f}-{t}-{circuit}"),
                from_bus: f,
                to_bus: t,
                reactance: x,
                flow_limit: rating * RATING_FACTOR,
            });
        }
    }
    for &(f, t, x, rating) in &TIES {
        lines.push(TransmissionLine {
            id: format!("{f}-{t}-1"),
            from_bus: f,
            to_bus: t,
            reactance: x,
            flow_limit: rating * RATING_FACTOR,
        });
    }

    let mut generators = Vec::new();
    let mut ordinal = 0usize;
    for area in 1..=3u32 {
        for &(local, kind, count) in &UNITS {
            let (cap, price) = unit_data(kind);
            for k in 1..=count {
                ordinal += 1;
                let bus = area * 100 + local;
                generators.push(Generator {
                    id: format!("{bus}_{kind}_{k}"),
                    bus,
                    side: None,
                    // small offsets keep the merit order strict
                    offer_price: price + 0.001 * ordinal as f64,
                    p_max: cap,
                    p_min: 0.0,
                    q_max: None,
                    q_min: None,
                });
            }
        }
    }
    for &bus in &WIND_BUSES {
        let out = TOTAL_WIND / WIND_BUSES.len() as f64;
        generators.push(Generator {
            id: format!("W{bus}"),
            bus,
            side: None,
            offer_price: 0.0,
            p_max: out,
            p_min: out,
            q_max: None,
            q_min: None,
        });
    }
    TransmissionNetwork {
        buses,
        lines,
        generators,
    }
}

/// (from, to, relative length, breaker)
const FEEDER_LINES: [(u32, u32, f64, bool); 12] = [
    (0, 3, 2.0, true),
    (3, 2, 0.5, true),
    (2, 1, 0.5, false),
    (3, 4, 0.5, false),
    (4, 5, 0.3, false),
    (3, 7, 2.0, false),
    (7, 6, 1.0, false),
    (7, 8, 0.3, true),
    (8, 9, 0.8, true),
    (9, 10, 0.3, false),
    (9, 11, 0.5, false),
    (8, 12, 0.5, false),
];
const LOAD_BUSES: [u32; 7] = [2, 3, 4, 5, 9, 11, 12];
const GEN_BUSES: [u32; 3] = [1, 6, 10];

fn feeder(impedance_scale: f64) -> Feeder {
    let tan_phi = 0.9f64.acos().tan();
    let per_bus = 36.0 / LOAD_BUSES.len() as f64;
    let buses = (0..13u32)
        .map(|id| {
            let root = id == 0;
            let p = if LOAD_BUSES.contains(&id) { per_bus } else { 0.0 };
            DistributionBus {
                id,
                load_p: p,
                load_q: p * tan_phi,
                v_max: if root { 1.0001 } else { 1.21 },
                v_min: if root { 0.9999 } else { 0.81 },
                is_root: root,
                iot_share: 1.0,
            }
        })
        .collect();
    let lines = FEEDER_LINES
        .iter()
        .map(|&(f, t, len, breaker)| DistributionLine {
            id: format!("{f}-{t}"),
            from_bus: f,
            to_bus: t,
            resistance: impedance_scale * len,
            reactance: 0.8 * impedance_scale * len,
            shunt_conductance: 0.0,
            shunt_susceptance: 0.0,
            apparent_limit: 100.0,
            breaker: BreakerSetting {
                present: breaker,
                trip_apparent_threshold: None,
            },
        })
        .collect();
    let generators = GEN_BUSES
        .iter()
        .map(|&b| Generator {
            id: format!("G{b}"),
            bus: b,
            side: None,
            offer_price: 10.0,
            p_max: 5.0,
            p_min: 0.0,
            q_max: Some(0.0),
            q_min: Some(0.0),
        })
        .collect();
    Feeder {
        id: "f13".into(),
        buses,
        lines,
        generators,
        interface_bus: INTERFACE_BUS,
        tariff: 150.0,
        offer_price: None,
        bid_price: None,
        root_reactive_slack: true,
        root_shunt_uses_susceptance: true,
    }
}

fn main() -> anyhow::Result<()> {
    let opts = MarketOptions::default();
    let mut case = GridCase {
        transmission: transmission(),
        feeders: vec![feeder(0.01)],
        economics: Economics { voll: 10_000.0 },
        bases: Bases::default(),
    };

    // 1. impedance scale for the target losses
    let losses_at = |case: &mut GridCase, k: f64| -> anyhow::Result<f64> {
        case.feeders[0] = feeder(k);
        // an infeasible feeder counts as too lossy
        Ok(solve_market(case, None, &opts)
            .map_or(f64::INFINITY, |m| m.distribution().unwrap().losses))
    };
    let (mut lo, mut hi) = (1e-4f64, 0.1f64);
    for _ in 0..60 {
        let mid = (lo * hi).sqrt();
        if losses_at(&mut case, mid)? < TARGET_LOSSES {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let k = (lo * hi).sqrt();
    let losses = losses_at(&mut case, k)?;
    eprintln!("impedance scale {k:.6} gives losses {losses:.6} MW");

    // 2. ratings from the calibrated flows
    for l in &mut case.feeders[0].lines {
        l.resistance = round9(l.resistance);
        l.reactance = round9(l.reactance);
    }
    let m = solve_market(&case, None, &opts)?;
    let dist = m.distribution().unwrap().clone();
    for l in &mut case.feeders[0].lines {
        let s = dist.apparent[&l.id];
        l.apparent_limit = round6((1.1 * s).max(0.5));
    }

    // 3. a local marginal unit at the interface bus
    let m = solve_market(&case, None, &opts)?;
    let marginal = case
        .transmission
        .generators
        .iter()
        .filter(|g| {
            let d = m.transmission.g_p[&g.id];
            d > 1e-3 && d < g.p_max - 1e-3 && g.p_min < g.p_max
        })
        .max_by(|a, b| a.offer_price.total_cmp(&b.offer_price))
        .map(|g| (g.id.clone(), g.offer_price, m.transmission.g_p[&g.id]))
        .ok_or_else(|| anyhow::anyhow!("no marginal unit"))?;
    eprintln!("marginal unit {} at {:.3} $/MWh, {:.3} MW", marginal.0, marginal.1, marginal.2);
    anyhow::ensure!(marginal.2 > TURBINE_OUTPUT, "marginal unit too small to derate");
    {
        let t = case.transmission.generators.iter_mut().find(|g| g.id == TURBINE).unwrap();
        t.offer_price = marginal.1 + 0.0005;
    }
    let mut cap = marginal.2 - TURBINE_OUTPUT;
    for _ in 0..20 {
        case.transmission
            .generators
            .iter_mut()
            .find(|g| g.id == marginal.0)
            .unwrap()
            .p_max = round6(cap);
        let m = solve_market(&case, None, &opts)?;
        let out = m.transmission.g_p[TURBINE];
        eprintln!("derated {} to {cap:.6} MW, turbine at {out:.6} MW", marginal.0);
        if (out - TURBINE_OUTPUT).abs() < 1e-4 {
            break;
        }
        cap += out - TURBINE_OUTPUT;
    }

    let m = solve_market(&case, None, &opts)?;
    let d = m.distribution().unwrap();
    eprintln!(
        "import {:.4} MW, losses {:.4} MW, root flow {:.4} MVA, price {:.4} $/MWh",
        d.net_import(),
        d.losses,
        d.root_apparent_flow,
        m.interface_price().unwrap()
    );
    let path = gridstorm::grid::bundled_case_path();
    std::fs::write(&path, case.to_json() + "\n")?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn round9(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}
