use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::{compute_ptdf, GridCase, Side};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DiagnosticKind {
    Schema,
    Topology,
    Unit,
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub message: String,
}

struct Report(Vec<Diagnostic>);

impl Report {
    fn push(&mut self, kind: DiagnosticKind, message: String) {
        self.0.push(Diagnostic { kind, message });
    }
    fn unit(&mut self, ok: bool, message: impl FnOnce() -> String) {
        if !ok {
            self.push(DiagnosticKind::Unit, message());
        }
    }
}

fn finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

/// Checks every case invariant and returns one diagnostic per violation.
pub fn validate_case(case: &GridCase) -> Vec<Diagnostic> {
    use DiagnosticKind::*;
    let mut r = Report(Vec::new());
    let t = &case.transmission;

    r.unit(case.bases.transmission_mva > 0.0, || {
        "transmission base must be positive".into()
    });
    r.unit(case.bases.distribution_mva > 0.0, || {
        "distribution base must be positive".into()
    });
    r.unit(case.economics.voll >= 0.0, || "voll must be nonnegative".into());

    let mut bus_ids = BTreeSet::new();
    if t.buses.is_empty() {
        r.push(Schema, "transmission network has no buses".into());
    }
    for b in &t.buses {
        if !bus_ids.insert(b.id) {
            r.push(Reference, format!("duplicate transmission bus id {}", b.id));
        }
        r.unit(finite(&[b.load_p, b.bid_price]), || {
            format!("transmission bus {} has a non-finite value", b.id)
        });
        r.unit(b.load_p >= 0.0, || {
            format!("transmission bus {} has negative load {}", b.id, b.load_p)
        });
        match (b.is_interface, b.interface_capacity) {
            (true, None) => r.push(
                Schema,
                format!("interface bus {} has no interface_capacity", b.id),
            ),
            (true, Some(c)) => r.unit(c > 0.0, || {
                format!("interface bus {} has non-positive capacity {c}", b.id)
            }),
            (false, Some(_)) => r.push(
                Schema,
                format!("bus {} has interface_capacity but is not an interface", b.id),
            ),
            (false, None) => {}
        }
    }
    let mut line_ids = BTreeSet::new();
    for l in &t.lines {
        if !line_ids.insert(l.id.as_str()) {
            r.push(Reference, format!("duplicate transmission line id `{}`", l.id));
        }
        for end in [l.from_bus, l.to_bus] {
            if !bus_ids.contains(&end) {
                r.push(
                    Reference,
                    format!("transmission line `{}` references unknown bus {end}", l.id),
                );
            }
        }
        if l.from_bus == l.to_bus {
            r.push(Topology, format!("transmission line `{}` is a self-loop", l.id));
        }
        r.unit(l.reactance > 0.0, || {
            format!("transmission line `{}` has non-positive reactance", l.id)
        });
        r.unit(l.flow_limit > 0.0, || {
            format!("transmission line `{}` has non-positive flow limit", l.id)
        });
    }
    let mut gen_ids = BTreeSet::new();
    let mut check_gen = |r: &mut Report, g: &super::Generator, side: Side, known: &dyn Fn(u32) -> bool| {
        if !gen_ids.insert(g.id.clone()) {
            r.push(Reference, format!("duplicate generator id `{}`", g.id));
        }
        if !known(g.bus) {
            r.push(
                Reference,
                format!("generator `{}` references unknown bus {}", g.id, g.bus),
            );
        }
        if g.side.is_some_and(|s| s != side) {
            r.push(
                Schema,
                format!("generator `{}` is listed on the wrong side", g.id),
            );
        }
        r.unit(
            finite(&[g.offer_price, g.p_min, g.p_max]) && g.p_min <= g.p_max,
            || format!("generator `{}` has p_min > p_max", g.id),
        );
        r.unit(g.offer_price >= 0.0, || {
            format!("generator `{}` has a negative offer price", g.id)
        });
        if let (Some(lo), Some(hi)) = (g.q_min, g.q_max) {
            r.unit(lo <= hi, || format!("generator `{}` has q_min > q_max", g.id));
        }
    };
    for g in &t.generators {
        check_gen(&mut r, g, Side::Transmission, &|b| bus_ids.contains(&b));
    }

    let slack = case.default_slack();
    let structurally_ok = !r.0.iter().any(|d| d.kind == Reference) && !t.buses.is_empty();
    if structurally_ok && t.lines.iter().all(|l| l.reactance > 0.0) {
        if let Err(e) = compute_ptdf(t, slack) {
            r.push(Topology, format!("transmission network: {e}"));
        }
    }

    let mut interfaces: BTreeMap<u32, usize> = BTreeMap::new();
    for (fi, f) in case.feeders.iter().enumerate() {
        let name = if f.id.is_empty() { format!("#{fi}") } else { f.id.clone() };
        match t.bus(f.interface_bus) {
            None => r.push(
                Reference,
                format!("feeder `{name}` attaches to unknown bus {}", f.interface_bus),
            ),
            Some(b) if !b.is_interface => r.push(
                Reference,
                format!(
                    "feeder `{name}` attaches to bus {} which is not an interface bus",
                    f.interface_bus
                ),
            ),
            _ => {}
        }
        if let Some(prev) = interfaces.insert(f.interface_bus, fi) {
            r.push(
                Topology,
                format!(
                    "feeders #{prev} and `{name}` share interface bus {}",
                    f.interface_bus
                ),
            );
        }
        r.unit(f.tariff.is_finite() && f.tariff >= 0.0, || {
            format!("feeder `{name}` has an invalid tariff")
        });

        let mut ids = BTreeSet::new();
        for b in &f.buses {
            if !ids.insert(b.id) {
                r.push(Reference, format!("feeder `{name}`: duplicate bus id {}", b.id));
            }
            r.unit(finite(&[b.load_p, b.load_q, b.v_min, b.v_max, b.iot_share]), || {
                format!("feeder `{name}` bus {} has a non-finite value", b.id)
            });
            r.unit(b.load_p >= 0.0, || {
                format!("feeder `{name}` bus {} has negative load", b.id)
            });
            r.unit(b.v_min > 0.0 && b.v_min < b.v_max, || {
                format!(
                    "feeder `{name}` bus {} needs 0 < v_min < v_max (got {} / {})",
                    b.id, b.v_min, b.v_max
                )
            });
            r.unit((0.0..=1.0).contains(&b.iot_share), || {
                format!("feeder `{name}` bus {} has iot_share outside [0, 1]", b.id)
            });
        }
        let roots: Vec<_> = f.buses.iter().filter(|b| b.is_root).collect();
        if roots.len() != 1 {
            r.push(
                Topology,
                format!("feeder `{name}` has {} root buses, expected 1", roots.len()),
            );
        } else {
            let root = roots[0];
            if root.load_p != 0.0 || root.load_q != 0.0 {
                r.push(Topology, format!("feeder `{name}` root bus {} carries load", root.id));
            }
            if f.generators.iter().any(|g| g.bus == root.id) {
                r.push(
                    Topology,
                    format!("feeder `{name}` root bus {} carries generation", root.id),
                );
            }
        }
        let mut lids = BTreeSet::new();
        let mut dangling = false;
        for l in &f.lines {
            if !lids.insert(l.id.as_str()) {
                r.push(Reference, format!("feeder `{name}`: duplicate line id `{}`", l.id));
            }
            for end in [l.from_bus, l.to_bus] {
                if !ids.contains(&end) {
                    dangling = true;
                    r.push(
                        Reference,
                        format!("feeder `{name}` line `{}` references unknown bus {end}", l.id),
                    );
                }
            }
            r.unit(l.resistance >= 0.0, || {
                format!("feeder `{name}` line `{}` has negative resistance", l.id)
            });
            r.unit(l.reactance > 0.0, || {
                format!("feeder `{name}` line `{}` has non-positive reactance", l.id)
            });
            r.unit(l.apparent_limit > 0.0, || {
                format!("feeder `{name}` line `{}` has non-positive apparent limit", l.id)
            });
            if let Some(th) = l.breaker.trip_apparent_threshold {
                if l.breaker.present {
                    r.unit(th >= l.apparent_limit, || {
                        format!(
                            "feeder `{name}` line `{}` trips at {th} MVA, below its {} MVA rating",
                            l.id, l.apparent_limit
                        )
                    });
                }
            }
        }
        if roots.len() == 1 && !dangling {
            if let Err(e) = f.topology() {
                r.push(Topology, e.to_string().trim_start_matches("topology error: ").to_string());
            }
        }
        for g in &f.generators {
            check_gen(&mut r, g, Side::Distribution, &|b| ids.contains(&b));
        }
    }
    r.0
}
