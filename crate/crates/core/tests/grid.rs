mod common;

use std::collections::BTreeSet;

use common::*;
use gridstorm::grid::*;
use gridstorm::CaseError;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Flows from a direct solve of the full Laplacian with the slack row and
/// column replaced by the reference condition.
fn laplacian_flows(net: &TransmissionNetwork, inj: &[f64], slack: BusId) -> Vec<f64> {
    let idx = net.bus_index();
    let n = net.buses.len();
    let mut b = DMatrix::<f64>::zeros(n, n);
    for l in &net.lines {
        let (i, j) = (idx[&l.from_bus], idx[&l.to_bus]);
        let y = 1.0 / l.reactance;
        b[(i, i)] += y;
        b[(j, j)] += y;
        b[(i, j)] -= y;
        b[(j, i)] -= y;
    }
    let s = idx[&slack];
    let mut rhs = DVector::from_column_slice(inj);
    for k in 0..n {
        b[(s, k)] = 0.0;
    }
    b[(s, s)] = 1.0;
    rhs[s] = 0.0;
    let theta = b.lu().solve(&rhs).unwrap();
    net.lines
        .iter()
        .map(|l| (theta[idx[&l.from_bus]] - theta[idx[&l.to_bus]]) / l.reactance)
        .collect()
}

#[test]
fn bundled_case_is_clean() {
    let case = load_bundled_case().unwrap();
    assert!(validate_case(&case).is_empty());
    assert_eq!(case.feeders.len(), 1);
    assert_eq!(case.feeders[0].buses.len(), 13);
    assert_eq!(case.transmission.buses.len(), 73);
}

#[test]
fn ptdf_matches_laplacian_solve_on_bundled_grid() {
    let case = load_bundled_case().unwrap();
    let net = &case.transmission;
    let slack = case.default_slack();
    let ptdf = compute_ptdf(net, slack).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5 {
        let mut inj: Vec<f64> = (0..net.buses.len()).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let s: f64 = inj.iter().sum();
        inj[net.bus_index()[&slack]] -= s;
        let a = ptdf.flows(&inj);
        let b = laplacian_flows(net, &inj, slack);
        let c = dc_power_flow(net, &inj, slack).unwrap();
        for k in 0..a.len() {
            assert!((a[k] - b[k]).abs() < 1e-8 * b[k].abs().max(1.0));
            assert!((c[k] - b[k]).abs() < 1e-8 * b[k].abs().max(1.0));
        }
    }
}

#[test]
fn ptdf_flows_conserve_power() {
    let case = load_bundled_case().unwrap();
    let net = &case.transmission;
    let ptdf = compute_ptdf(net, case.default_slack()).unwrap();
    let idx = net.bus_index();
    let j = idx[&102];
    let mut inj = vec![0.0; net.buses.len()];
    inj[j] = 1.0;
    inj[idx[&case.default_slack()]] = -1.0;
    let f = ptdf.flows(&inj);
    let mut net_out = vec![0.0; net.buses.len()];
    for (k, l) in net.lines.iter().enumerate() {
        net_out[idx[&l.from_bus]] += f[k];
        net_out[idx[&l.to_bus]] -= f[k];
    }
    for (i, v) in net_out.iter().enumerate() {
        assert!((v - inj[i]).abs() < 1e-9, "bus {i}: {v} vs {}", inj[i]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ptdf_is_linear(
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        x in prop::collection::vec(-100.0f64..100.0, 73),
        y in prop::collection::vec(-100.0f64..100.0, 73),
    ) {
        let case = load_bundled_case().unwrap();
        let ptdf = compute_ptdf(&case.transmission, case.default_slack()).unwrap();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let fx = ptdf.flows(&x);
        let fy = ptdf.flows(&y);
        let fm = ptdf.flows(&mix);
        for k in 0..fm.len() {
            let expect = a * fx[k] + b * fy[k];
            prop_assert!((fm[k] - expect).abs() <= 1e-8 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn downstream_sets_match_dfs(seed in 0u64..10_000, n in 2usize..25) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_feeder(&mut rng, n);
        let topo = f.topology().unwrap();
        prop_assert_eq!(topo.order.len(), n);
        prop_assert_eq!(topo.order[0], 0);
        for b in &f.buses {
            // independent oracle: every bus whose root path passes through b
            let expect: BTreeSet<BusId> = f
                .buses
                .iter()
                .filter(|o| o.id == b.id || {
                    let path = root_path_lines(&f, o.id);
                    path.iter().any(|l| f.line(l).unwrap().from_bus == b.id)
                })
                .map(|o| o.id)
                .collect();
            let got: BTreeSet<BusId> = downstream_set(&f, b.id).unwrap().into_iter().collect();
            prop_assert_eq!(got, expect);
        }
        // breadth-first order puts every parent before its children
        for l in &f.lines {
            let pf = topo.order.iter().position(|&x| x == l.from_bus).unwrap();
            let pt = topo.order.iter().position(|&x| x == l.to_bus).unwrap();
            prop_assert!(pf < pt);
        }
    }
}

#[test]
fn islanded_grid_is_rejected() {
    let net = TransmissionNetwork {
        buses: vec![tbus(1, 0.0), tbus(2, 0.0), tbus(3, 0.0)],
        lines: vec![tline("a", 1, 2, 0.1, 10.0)],
        generators: vec![],
    };
    assert!(matches!(compute_ptdf(&net, 1), Err(CaseError::Disconnected(_))));
}

fn bundled_document() -> serde_json::Value {
    let text = std::fs::read_to_string(bundled_case_path()).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn breaker_below_rating_gives_one_diagnostic() {
    let mut doc = bundled_document();
    let line = &mut doc["feeders"][0]["lines"][0];
    let rating = line["apparent_limit"].as_f64().unwrap();
    line["breaker"]["trip_apparent_threshold"] = serde_json::json!(rating * 0.5);
    let (_, diags) = parse_case(&doc.to_string());
    assert_eq!(diags.len(), 1, "{diags:?}");
}

#[test]
fn extra_feeder_line_is_not_radial() {
    let mut doc = bundled_document();
    let lines = doc["feeders"][0]["lines"].as_array_mut().unwrap();
    let mut extra = lines[1].clone();
    extra["id"] = serde_json::json!("5-12");
    extra["from_bus"] = serde_json::json!(5);
    extra["to_bus"] = serde_json::json!(12);
    lines.push(extra);
    assert_eq!(lines.len(), 13);
    let (_, diags) = parse_case(&doc.to_string());
    assert!(
        diags.iter().any(|d| d.kind == DiagnosticKind::Topology && d.message.contains("radial")),
        "{diags:?}"
    );
}

#[test]
fn every_violation_is_reported() {
    let mut doc = bundled_document();
    doc["economics"]["voll"] = serde_json::json!(-1.0);
    doc["feeders"][0]["buses"][3]["load_p"] = serde_json::json!(-2.0);
    doc["transmission"]["lines"][0]["reactance"] = serde_json::json!(0.0);
    let (_, diags) = parse_case(&doc.to_string());
    assert!(diags.len() >= 3, "{diags:?}");
    assert!(load_case(&doc.to_string()).is_err());
}

#[test]
fn malformed_document_is_a_schema_error() {
    let (case, diags) = parse_case("{\"transmission\": 3}");
    assert!(case.is_none());
    assert_eq!(diags.len(), 1);
    assert_eq!(diags[0].kind, DiagnosticKind::Schema);
}
