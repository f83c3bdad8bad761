mod common;

use common::*;
use gridstorm::distribution::LoadDelta;
use gridstorm::grid::*;
use gridstorm::market::*;
use gridstorm::transmission::{solve_tso, TsoOptions};

fn opts() -> MarketOptions {
    MarketOptions::default()
}

#[test]
fn single_level_matches_diagonalization_on_uncongested_case() {
    let case = small_market_case();
    let out = solve_market(&case, None, &opts()).unwrap();
    let diag = diagonalize(&case, None, &opts()).unwrap();
    assert!(out.converged);
    assert!((out.interface_exchange().unwrap() - diag[0].0).abs() < 1e-3);
    assert!((out.interface_price().unwrap() - diag[0].1).abs() < 1e-3 * diag[0].1.abs().max(1.0));
}

#[test]
fn diagonalization_agrees_under_a_load_perturbation() {
    let case = small_market_case();
    let mut d = LoadDelta::default();
    d.p.insert(2, 1.5);
    d.q.insert(2, 0.5);
    let out = solve_market(&case, Some(&d), &opts()).unwrap();
    let diag = diagonalize(&case, Some(&d), &opts()).unwrap();
    assert!((out.interface_exchange().unwrap() - diag[0].0).abs() < 1e-3);
    let base = solve_market(&case, None, &opts()).unwrap();
    assert!(out.interface_exchange().unwrap() > base.interface_exchange().unwrap() + 1.5);
}

#[test]
fn duality_and_linearization_residuals_are_small() {
    for case in [small_market_case(), load_bundled_case().unwrap()] {
        let out = solve_market(&case, None, &opts()).unwrap();
        assert!(!out.duality_penalized);
        assert!(out.scaled_coordination_residual() <= 1e-5, "{}", out.scaled_coordination_residual());
        assert!(out.linearization_residual <= 1e-5, "{}", out.linearization_residual);
        assert!(!out.relaxation_inexact());
    }
}

#[test]
fn repeated_solves_are_identical() {
    let case = load_bundled_case().unwrap();
    let a = solve_market(&case, None, &opts()).unwrap();
    let b = solve_market(&case, None, &opts()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn bundled_normal_operation() {
    let case = load_bundled_case().unwrap();
    let out = solve_market(&case, None, &opts()).unwrap();
    let d = out.distribution().unwrap();
    for g in &case.feeders[0].generators {
        assert!((d.g_p[&g.id] - 5.0).abs() <= 0.01);
    }
    assert!((out.interface_exchange().unwrap() - 22.3).abs() <= 0.05 * 22.3);
    assert!((d.root_apparent_flow - 28.7).abs() <= 0.05 * 28.7);
    let margins = security_margins(&case, &out.transmission);
    for l in &case.transmission.lines {
        if l.from_bus == 102 || l.to_bus == 102 {
            assert!(margins[&l.id] > 0.0);
        }
    }
}

#[test]
fn margin_is_zero_on_a_binding_line() {
    let case = GridCase {
        transmission: two_bus_congested(),
        feeders: vec![],
        economics: Economics { voll: 10_000.0 },
        bases: Bases::default(),
    };
    let tso = solve_tso(&case.transmission, &[], &TsoOptions::new(100.0, 1)).unwrap();
    let m = security_margins(&case, &tso);
    assert!(m["l"].abs() < 1e-5);
}

#[test]
fn interface_price_equals_the_transmission_lmp() {
    let case = load_bundled_case().unwrap();
    let out = solve_market(&case, None, &opts()).unwrap();
    let price = out.interface_price().unwrap();
    assert!((price - out.transmission.lmp[&102]).abs() < 1e-9);
    assert!((out.transmission.p_bid[&102] - out.interface_exchange().unwrap()).abs() < 1e-4);
}
