use std::collections::{BTreeMap, VecDeque};

use super::{BusId, Feeder};
use crate::error::CaseError;

/// Rooted-tree view of a radial feeder.
#[derive(Debug, Clone)]
pub struct FeederTopology {
    pub root: BusId,
    /// Buses in breadth-first order from the root.
    pub order: Vec<BusId>,
    index: BTreeMap<BusId, usize>,
    /// Index (into `feeder.lines`) of the line feeding each bus, by bus position.
    parent_line: Vec<Option<usize>>,
    parent_bus: Vec<Option<BusId>>,
    child_lines: Vec<Vec<usize>>,
    line_child: Vec<BusId>,
}

impl FeederTopology {
    pub fn new(feeder: &Feeder) -> Result<Self, CaseError> {
        let roots: Vec<_> = feeder.buses.iter().filter(|b| b.is_root).collect();
        if roots.len() != 1 {
            return Err(CaseError::Topology(format!(
                "feeder `{}` has {} root buses, expected 1",
                feeder.id,
                roots.len()
            )));
        }
        let root = roots[0].id;
        if feeder.lines.len() + 1 != feeder.buses.len() {
            return Err(CaseError::Topology(format!(
                "feeder `{}` is not radial: {} lines for {} buses",
                feeder.id,
                feeder.lines.len(),
                feeder.buses.len()
            )));
        }
        let pos: BTreeMap<BusId, usize> = feeder
            .buses
            .iter()
            .enumerate()
            .map(|(i, b)| (b.id, i))
            .collect();
        let mut adj: Vec<Vec<(usize, BusId)>> = vec![Vec::new(); feeder.buses.len()];
        for (li, l) in feeder.lines.iter().enumerate() {
            let (Some(&a), Some(&b)) = (pos.get(&l.from_bus), pos.get(&l.to_bus)) else {
                return Err(CaseError::Topology(format!(
                    "line `{}` references a bus outside feeder `{}`",
                    l.id, feeder.id
                )));
            };
            adj[a].push((li, l.to_bus));
            adj[b].push((li, l.from_bus));
        }

        let mut order = Vec::with_capacity(feeder.buses.len());
        let mut parent_line_by_id: BTreeMap<BusId, Option<usize>> = BTreeMap::new();
        parent_line_by_id.insert(root, None);
        let mut queue = VecDeque::from([root]);
        while let Some(b) = queue.pop_front() {
            order.push(b);
            let mut next: Vec<(usize, BusId)> = adj[pos[&b]]
                .iter()
                .copied()
                .filter(|&(li, _)| parent_line_by_id[&b] != Some(li))
                .collect();
            next.sort_by_key(|&(_, n)| n);
            for (li, n) in next {
                if parent_line_by_id.contains_key(&n) {
                    return Err(CaseError::Topology(format!(
                        "feeder `{}` contains a cycle through bus {n}",
                        feeder.id
                    )));
                }
                parent_line_by_id.insert(n, Some(li));
                queue.push_back(n);
            }
        }
        if order.len() != feeder.buses.len() {
            return Err(CaseError::Topology(format!(
                "feeder `{}` is not connected: {} of {} buses reachable from the root",
                feeder.id,
                order.len(),
                feeder.buses.len()
            )));
        }

        let index: BTreeMap<BusId, usize> =
            order.iter().enumerate().map(|(i, &b)| (b, i)).collect();
        let mut parent_line = vec![None; order.len()];
        let mut parent_bus = vec![None; order.len()];
        let mut child_lines = vec![Vec::new(); order.len()];
        let mut line_child = vec![0; feeder.lines.len()];
        for (&b, &pl) in &parent_line_by_id {
            parent_line[index[&b]] = pl;
            if let Some(li) = pl {
                let l = &feeder.lines[li];
                let parent = if l.to_bus == b { l.from_bus } else { l.to_bus };
                child_lines[index[&parent]].push(li);
                parent_bus[index[&b]] = Some(parent);
                line_child[li] = b;
            }
        }
        Ok(Self {
            root,
            order,
            index,
            parent_line,
            parent_bus,
            child_lines,
            line_child,
        })
    }

    pub fn position(&self, bus: BusId) -> Option<usize> {
        self.index.get(&bus).copied()
    }

    pub fn parent_line(&self, bus: BusId) -> Option<usize> {
        self.position(bus).and_then(|i| self.parent_line[i])
    }

    pub fn child_lines(&self, bus: BusId) -> &[usize] {
        self.position(bus)
            .map(|i| self.child_lines[i].as_slice())
            .unwrap_or(&[])
    }

    /// Bus at the far (downstream) end of line `li`.
    pub fn line_child(&self, li: usize) -> BusId {
        self.line_child[li]
    }

    /// Downstream set of `bus`, inclusive, sorted by id.
    pub fn downstream(&self, feeder: &Feeder, bus: BusId) -> Result<Vec<BusId>, CaseError> {
        if !self.index.contains_key(&bus) {
            return Err(CaseError::UnknownBus(bus));
        }
        let mut out = vec![bus];
        let mut stack = vec![bus];
        while let Some(b) = stack.pop() {
            for &li in self.child_lines(b) {
                let c = feeder.lines[li].to_bus;
                let c = if c == b { feeder.lines[li].from_bus } else { c };
                out.push(c);
                stack.push(c);
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    /// Lines on the path from the root to `bus`.
    pub fn root_path(&self, bus: BusId) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = bus;
        while let Some(li) = self.parent_line(cur) {
            out.push(li);
            cur = self.parent_of(cur).expect("parent exists when a parent line does");
        }
        out
    }

    pub fn parent_of(&self, bus: BusId) -> Option<BusId> {
        self.position(bus).and_then(|i| self.parent_bus[i])
    }
}

pub fn downstream_set(feeder: &Feeder, bus: BusId) -> Result<Vec<BusId>, CaseError> {
    feeder.topology()?.downstream(feeder, bus)
}
