use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{BusId, TransmissionNetwork};
use crate::error::CaseError;

/// Flow sensitivities `omega[l][b]` of each line to an injection at each bus,
/// balanced by a withdrawal at the slack bus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PtdfMatrix {
    pub slack_bus: BusId,
    pub buses: Vec<BusId>,
    pub lines: Vec<String>,
    /// Row-major, `lines.len() x buses.len()`.
    pub entries: Vec<Vec<f64>>,
}

impl PtdfMatrix {
    pub fn bus_position(&self, bus: BusId) -> Option<usize> {
        self.buses.iter().position(|&b| b == bus)
    }

    pub fn column(&self, bus: BusId) -> Option<Vec<f64>> {
        let j = self.bus_position(bus)?;
        Some(self.entries.iter().map(|row| row[j]).collect())
    }

    pub fn get(&self, line: usize, bus: BusId) -> Option<f64> {
        let j = self.bus_position(bus)?;
        self.entries.get(line).map(|row| row[j])
    }

    /// Line flows for a nodal injection vector ordered like `buses`.
    pub fn flows(&self, injection: &[f64]) -> Vec<f64> {
        self.entries
            .iter()
            .map(|row| row.iter().zip(injection).map(|(w, p)| w * p).sum())
            .collect()
    }
}

/// Bus ids, each bus's row in the reduced matrix (`None` for the slack), and
/// the susceptance matrix with the slack row and column removed.
type Reduced = (Vec<BusId>, Vec<Option<usize>>, DMatrix<f64>);

fn reduced_susceptance(net: &TransmissionNetwork, slack: BusId) -> Result<Reduced, CaseError> {
    let buses: Vec<BusId> = net.buses.iter().map(|b| b.id).collect();
    let slack_pos = buses
        .iter()
        .position(|&b| b == slack)
        .ok_or(CaseError::UnknownBus(slack))?;
    // reduced index of each bus, None for the slack
    let mut red = Vec::with_capacity(buses.len());
    let mut k = 0;
    for i in 0..buses.len() {
        if i == slack_pos {
            red.push(None);
        } else {
            red.push(Some(k));
            k += 1;
        }
    }
    let index = net.bus_index();
    let mut b = DMatrix::<f64>::zeros(k, k);
    for l in &net.lines {
        let o = *index
            .get(&l.from_bus)
            .ok_or(CaseError::UnknownBus(l.from_bus))?;
        let r = *index.get(&l.to_bus).ok_or(CaseError::UnknownBus(l.to_bus))?;
        if l.reactance <= 0.0 {
            return Err(CaseError::Unit(format!(
                "line `{}` has non-positive reactance",
                l.id
            )));
        }
        let y = 1.0 / l.reactance;
        if let Some(i) = red[o] {
            b[(i, i)] += y;
        }
        if let Some(j) = red[r] {
            b[(j, j)] += y;
        }
        if let (Some(i), Some(j)) = (red[o], red[r]) {
            b[(i, j)] -= y;
            b[(j, i)] -= y;
        }
    }
    Ok((buses, red, b))
}

/// PTDF of every line with respect to every bus, using `slack` as the
/// balancing bus.
pub fn compute_ptdf(net: &TransmissionNetwork, slack: BusId) -> Result<PtdfMatrix, CaseError> {
    let (buses, red, b) = reduced_susceptance(net, slack)?;
    let n = buses.len();
    let k = n - 1;
    let inv = if k == 0 {
        DMatrix::zeros(0, 0)
    } else {
        let lu = b.lu();
        let inv = lu.try_inverse().ok_or_else(|| {
            CaseError::Disconnected("reduced susceptance matrix is singular".into())
        })?;
        if inv.iter().any(|v| !v.is_finite()) {
            return Err(CaseError::Disconnected(
                "reduced susceptance matrix is singular".into(),
            ));
        }
        inv
    };
    let index = net.bus_index();
    let mut entries = Vec::with_capacity(net.lines.len());
    for l in &net.lines {
        let o = red[index[&l.from_bus]];
        let r = red[index[&l.to_bus]];
        let mut row = vec![0.0; n];
        for (j, rj) in red.iter().enumerate() {
            let Some(c) = *rj else { continue };
            let to = o.map_or(0.0, |i| inv[(i, c)]);
            let tr = r.map_or(0.0, |i| inv[(i, c)]);
            row[j] = (to - tr) / l.reactance;
        }
        entries.push(row);
    }
    Ok(PtdfMatrix {
        slack_bus: slack,
        buses,
        lines: net.lines.iter().map(|l| l.id.clone()).collect(),
        entries,
    })
}

/// DC power flow: line flows for a balanced injection vector (ordered like
/// `net.buses`), with the angle of `slack` fixed at zero.
pub fn dc_power_flow(
    net: &TransmissionNetwork,
    injection: &[f64],
    slack: BusId,
) -> Result<Vec<f64>, CaseError> {
    let (_, red, b) = reduced_susceptance(net, slack)?;
    let rhs = DVector::from_iterator(
        b.nrows(),
        red.iter()
            .zip(injection)
            .filter_map(|(r, p)| r.map(|_| *p)),
    );
    let theta_red = b
        .lu()
        .solve(&rhs)
        .ok_or_else(|| CaseError::Disconnected("reduced susceptance matrix is singular".into()))?;
    let theta: Vec<f64> = red
        .iter()
        .map(|r| r.map_or(0.0, |i| theta_red[i]))
        .collect();
    let index = net.bus_index();
    Ok(net
        .lines
        .iter()
        .map(|l| (theta[index[&l.from_bus]] - theta[index[&l.to_bus]]) / l.reactance)
        .collect())
}
