mod common;

use common::*;
use gridstorm::conic::{solve_with, SolveOptions};
use gridstorm::grid::*;
use gridstorm::transmission::*;
use gridstorm::ModelError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn two_bus_dispatch_matches_brute_force_search() {
    let net = two_bus_congested();
    let s = solve_tso(&net, &[], &TsoOptions::new(100.0, 1)).unwrap();
    // 0.1 MW grid over the cheap unit; the expensive one covers the rest
    let mut best = f64::INFINITY;
    for k in 0..=2000 {
        let ga = k as f64 * 0.1;
        let gb = 100.0 - ga;
        if gb < 0.0 || ga > 40.0 + 1e-9 {
            continue;
        }
        best = best.min(10.0 * ga + 50.0 * gb);
    }
    // welfare = bid value of served load (zero here) minus production cost
    assert!((-s.objective - best).abs() <= 1e-4 * best);
    assert!((s.g_p["a"] - 40.0).abs() < 1e-4);
}

/// Random connected network: a spanning path plus a few chords.
fn random_network(rng: &mut impl Rng) -> TransmissionNetwork {
    let n = rng.gen_range(3..7u32);
    let mut net = TransmissionNetwork::default();
    for b in 1..=n {
        net.buses.push(tbus(b, rng.gen_range(0.0..80.0)));
    }
    for b in 2..=n {
        let from = rng.gen_range(1..b);
        net.lines.push(tline(&format!("{from}-{b}"), from, b, rng.gen_range(0.05..0.3), rng.gen_range(20.0..150.0)));
    }
    for k in 0..rng.gen_range(0..3) {
        let a = rng.gen_range(1..=n);
        let b = rng.gen_range(1..=n);
        if a != b {
            net.lines.push(tline(&format!("c{k}"), a, b, rng.gen_range(0.05..0.3), rng.gen_range(20.0..150.0)));
        }
    }
    for k in 0..rng.gen_range(2..5) {
        let bus = rng.gen_range(1..=n);
        let mut g = generator(&format!("g{k}"), bus, rng.gen_range(5.0..80.0), rng.gen_range(50.0..250.0));
        g.p_min = if k == 0 { 0.0 } else { rng.gen_range(0.0..10.0) };
        net.generators.push(g);
    }
    net
}

#[test]
fn hundred_random_instances_close_the_duality_gap() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut solved = 0;
    let mut drawn = 0;
    while solved < 100 {
        drawn += 1;
        assert!(drawn < 1000, "too few feasible instances");
        let net = random_network(&mut rng);
        let opts = TsoOptions::new(100.0, 1);
        let s = match solve_tso(&net, &[], &opts) {
            Ok(s) => s,
            Err(ModelError::Infeasible { .. }) => continue,
            Err(e) => panic!("{e}"),
        };
        let scale = s.objective.abs().max(1.0);
        assert!((s.objective - s.dual_objective).abs() <= 1e-5 * scale);
        let d = solve_with(&build_tso_dual(&net, &[], &opts).unwrap(), &SolveOptions::default()).unwrap();
        assert!(d.is_optimal(), "instance {drawn}: {:?} {:?} obj {} vs {}", d.status, d.residuals, d.objective, s.objective);
        assert!((d.objective - s.objective).abs() <= 1e-5 * scale);
        // power balance and flow limits
        let gen: f64 = s.g_p.values().sum();
        assert!((gen - net.total_load()).abs() < 1e-4);
        for l in &net.lines {
            assert!(s.f_p[&l.id].abs() <= l.flow_limit + 1e-4);
        }
        solved += 1;
    }
}

#[test]
fn lmps_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    while checked < 20 {
        let net = random_network(&mut rng);
        let opts = TsoOptions::new(100.0, 1);
        let Ok(s) = solve_tso(&net, &[], &opts) else {
            continue;
        };
        for b in &net.buses {
            let lmp = s.lmp[&b.id];
            let (left, right) = marginal_cost(&net, &[], b.id, 1e-3, &opts).unwrap();
            let tol = 1e-2 * lmp.abs().max(1.0);
            // at a breakpoint the price may sit anywhere between the one-sided slopes
            let lo = left.min(right) - tol;
            let hi = left.max(right) + tol;
            assert!(lo <= lmp && lmp <= hi, "bus {}: lmp {lmp} not in [{left}, {right}]", b.id);
        }
        checked += 1;
    }
}

#[test]
fn bundled_prices_are_finite_and_margins_positive() {
    let case = load_bundled_case().unwrap();
    let s = solve_tso(&case.transmission, &[], &TsoOptions::new(100.0, case.default_slack())).unwrap();
    assert!(s.lmp.values().all(|p| p.is_finite()));
    for l in &case.transmission.lines {
        if l.from_bus == 102 || l.to_bus == 102 {
            assert!(l.flow_limit - s.f_p[&l.id].abs() > 0.0);
        }
    }
    let (left, right) = marginal_cost(&case.transmission, &[], 102, 1e-2, &TsoOptions::new(100.0, case.default_slack())).unwrap();
    assert!((left - s.lmp[&102]).abs() < 1e-2 * s.lmp[&102]);
    assert!((right - s.lmp[&102]).abs() < 1e-2 * s.lmp[&102]);
}
