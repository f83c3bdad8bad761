//! Case data: the transmission network, radial feeders and their interface.

mod ptdf;
mod topology;
mod validate;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CaseError;

pub use ptdf::{compute_ptdf, dc_power_flow, PtdfMatrix};
pub use topology::{downstream_set, FeederTopology};
pub use validate::{validate_case, Diagnostic, DiagnosticKind};

pub type BusId = u32;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TransmissionBus {
    pub id: BusId,
    #[serde(default)]
    pub load_p: f64,
    #[serde(default)]
    pub bid_price: f64,
    #[serde(default)]
    pub is_interface: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interface_capacity: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TransmissionLine {
    pub id: String,
    pub from_bus: BusId,
    pub to_bus: BusId,
    pub reactance: f64,
    pub flow_limit: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Transmission,
    Distribution,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Generator {
    pub id: String,
    pub bus: BusId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side: Option<Side>,
    pub offer_price: f64,
    pub p_max: f64,
    #[serde(default)]
    pub p_min: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_min: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct TransmissionNetwork {
    pub buses: Vec<TransmissionBus>,
    pub lines: Vec<TransmissionLine>,
    #[serde(default)]
    pub generators: Vec<Generator>,
}

impl TransmissionNetwork {
    pub fn bus(&self, id: BusId) -> Option<&TransmissionBus> {
        self.buses.iter().find(|b| b.id == id)
    }

    pub fn bus_index(&self) -> BTreeMap<BusId, usize> {
        self.buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect()
    }

    pub fn total_load(&self) -> f64 {
        self.buses.iter().map(|b| b.load_p).sum()
    }

    pub fn default_slack(&self) -> Option<BusId> {
        self.buses.iter().map(|b| b.id).min()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DistributionBus {
    pub id: BusId,
    #[serde(default)]
    pub load_p: f64,
    #[serde(default)]
    pub load_q: f64,
    pub v_max: f64,
    pub v_min: f64,
    #[serde(default)]
    pub is_root: bool,
    #[serde(default = "one")]
    pub iot_share: f64,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct BreakerSetting {
    #[serde(default)]
    pub present: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trip_apparent_threshold: Option<f64>,
}

/// Default trip point relative to the apparent-power rating.
pub const DEFAULT_TRIP_RATIO: f64 = 1.2 / 1.1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DistributionLine {
    pub id: String,
    pub from_bus: BusId,
    pub to_bus: BusId,
    pub resistance: f64,
    pub reactance: f64,
    #[serde(default)]
    pub shunt_conductance: f64,
    #[serde(default)]
    pub shunt_susceptance: f64,
    pub apparent_limit: f64,
    #[serde(default)]
    pub breaker: BreakerSetting,
}

impl DistributionLine {
    /// Apparent flow (MVA) above which the breaker opens, if one is fitted.
    pub fn trip_threshold(&self) -> Option<f64> {
        self.breaker.present.then(|| {
            self.breaker
                .trip_apparent_threshold
                .unwrap_or(self.apparent_limit * DEFAULT_TRIP_RATIO)
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Feeder {
    #[serde(default)]
    pub id: String,
    pub buses: Vec<DistributionBus>,
    pub lines: Vec<DistributionLine>,
    #[serde(default)]
    pub generators: Vec<Generator>,
    pub interface_bus: BusId,
    /// Retail tariff ($/MWh) billed on contracted demand.
    pub tariff: f64,
    /// Price at which the feeder offers surplus to the transmission market.
    /// Defaults to the most expensive feeder generator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offer_price: Option<f64>,
    /// Price at which the feeder bids for imports. Defaults to the tariff.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bid_price: Option<f64>,
    /// Unlimited reactive supply at the root bus.
    #[serde(default = "yes")]
    pub root_reactive_slack: bool,
    /// Reactive root balance uses the shunt susceptance of the root branches
    /// (false uses the shunt conductance instead).
    #[serde(default = "yes")]
    pub root_shunt_uses_susceptance: bool,
}

impl Feeder {
    pub fn root(&self) -> Option<&DistributionBus> {
        self.buses.iter().find(|b| b.is_root)
    }

    pub fn bus(&self, id: BusId) -> Option<&DistributionBus> {
        self.buses.iter().find(|b| b.id == id)
    }

    pub fn line(&self, id: &str) -> Option<&DistributionLine> {
        self.lines.iter().find(|l| l.id == id)
    }

    pub fn total_load(&self) -> f64 {
        self.buses.iter().map(|b| b.load_p).sum()
    }

    pub fn declared_offer_price(&self) -> f64 {
        self.offer_price.unwrap_or_else(|| {
            self.generators
                .iter()
                .map(|g| g.offer_price)
                .fold(0.0, f64::max)
        })
    }

    pub fn declared_bid_price(&self) -> f64 {
        self.bid_price.unwrap_or(self.tariff)
    }

    pub fn topology(&self) -> Result<FeederTopology, CaseError> {
        FeederTopology::new(self)
    }

    /// Orients every line away from the root. Lines that do not touch the
    /// root's tree are left as they are (validation reports them).
    pub fn normalize_orientation(&mut self) {
        let Some(root) = self.root().map(|b| b.id) else {
            return;
        };
        let mut seen = std::collections::BTreeSet::from([root]);
        let mut queue = std::collections::VecDeque::from([root]);
        let mut done = vec![false; self.lines.len()];
        while let Some(b) = queue.pop_front() {
            for (i, l) in self.lines.iter_mut().enumerate() {
                if done[i] {
                    continue;
                }
                if l.to_bus == b {
                    std::mem::swap(&mut l.from_bus, &mut l.to_bus);
                }
                if l.from_bus == b {
                    done[i] = true;
                    if seen.insert(l.to_bus) {
                        queue.push_back(l.to_bus);
                    }
                }
            }
        }
    }

    /// The sub-feeder spanned by `keep` (must contain the root); lines with
    /// an endpoint outside `keep` are dropped.
    pub fn restricted(&self, keep: &std::collections::BTreeSet<BusId>) -> Feeder {
        let mut f = self.clone();
        f.buses.retain(|b| keep.contains(&b.id));
        f.lines
            .retain(|l| keep.contains(&l.from_bus) && keep.contains(&l.to_bus));
        f.generators.retain(|g| keep.contains(&g.bus));
        f
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Economics {
    pub voll: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Bases {
    pub transmission_mva: f64,
    pub distribution_mva: f64,
}

impl Default for Bases {
    fn default() -> Self {
        Self {
            transmission_mva: 100.0,
            distribution_mva: 10.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GridCase {
    pub transmission: TransmissionNetwork,
    #[serde(default)]
    pub feeders: Vec<Feeder>,
    pub economics: Economics,
    #[serde(default)]
    pub bases: Bases,
}

impl GridCase {
    pub fn feeder_at(&self, interface_bus: BusId) -> Option<&Feeder> {
        self.feeders.iter().find(|f| f.interface_bus == interface_bus)
    }

    pub fn default_slack(&self) -> BusId {
        self.transmission.default_slack().unwrap_or(0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("case serialises")
    }
}

/// Parses and normalises a case document and lists every violation found.
pub fn parse_case(document: &str) -> (Option<GridCase>, Vec<Diagnostic>) {
    let mut case: GridCase = match serde_json::from_str(document) {
        Ok(c) => c,
        Err(e) => {
            return (
                None,
                vec![Diagnostic {
                    kind: DiagnosticKind::Schema,
                    message: e.to_string(),
                }],
            )
        }
    };
    for f in &mut case.feeders {
        f.normalize_orientation();
    }
    let diags = validate_case(&case);
    (Some(case), diags)
}

/// Parses a case document, normalises feeder orientation and validates it.
pub fn load_case(document: &str) -> Result<GridCase, CaseError> {
    let (case, diags) = parse_case(document);
    if let (Some(case), true) = (case, diags.is_empty()) {
        return Ok(case);
    }
    let kind = diags[0].kind;
    let messages: Vec<String> = diags.iter().map(|d| d.message.clone()).collect();
    if diags.iter().all(|d| d.kind == kind) && diags.len() == 1 {
        let msg = messages.into_iter().next().unwrap();
        return Err(match kind {
            DiagnosticKind::Topology => CaseError::Topology(msg),
            DiagnosticKind::Unit => CaseError::Unit(msg),
            DiagnosticKind::Reference => CaseError::Topology(msg),
            DiagnosticKind::Schema => CaseError::Schema(msg),
        });
    }
    Err(CaseError::Invalid(messages))
}

pub fn load_case_file(path: &Path) -> Result<GridCase, CaseError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CaseError::Schema(format!("{}: {e}", path.display())))?;
    load_case(&text)
}

/// Path of the bundled three-area transmission / 13-bus feeder case.
pub fn bundled_case_path() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/rts3_13bus.json")
}

pub fn load_bundled_case() -> Result<GridCase, CaseError> {
    load_case_file(&bundled_case_path())
}
