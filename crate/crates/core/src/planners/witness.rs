//! SST witness set: each witness keeps at most one active representative,
//! the cheapest node ever offered within the witness radius.

use super::nn::{NnIndex, NnMode};
use crate::systems::{State, SystemModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Offer {
    /// Insert the node; `displaced` was the previous representative.
    Accept { witness: usize, displaced: Option<usize> },
    Reject,
}

#[derive(Debug, Clone)]
pub(crate) struct Witnesses {
    index: NnIndex,
    radius: f64,
    rep: Vec<Option<usize>>,
    best_offered: Vec<f64>,
    /// Witness assigned to each tree node id, if any.
    node_witness: Vec<Option<usize>>,
}

impl Witnesses {
    pub fn new(system: &SystemModel, radius: f64) -> Self {
        Witnesses {
            index: NnIndex::new(system, NnMode::Auto),
            radius,
            rep: Vec::new(),
            best_offered: Vec::new(),
            node_witness: Vec::new(),
        }
    }

    /// Decides whether a node at `x` with `cost` may enter the tree.
    pub fn offer(&mut self, x: &State, cost: f64, cost_of: impl Fn(usize) -> f64) -> Offer {
        let w = match self.index.nearest(x) {
            Some((w, d)) if d <= self.radius => w,
            _ => {
                let w = self.index.insert(x);
                self.rep.push(None);
                self.best_offered.push(f64::INFINITY);
                w
            }
        };
        let incumbent = self.rep[w];
        self.best_offered[w] = self.best_offered[w].min(cost);
        match incumbent {
            Some(r) if cost_of(r) <= cost => Offer::Reject,
            displaced => Offer::Accept { witness: w, displaced },
        }
    }

    pub fn assign(&mut self, witness: usize, node: usize) {
        if self.node_witness.len() <= node {
            self.node_witness.resize(node + 1, None);
        }
        self.rep[witness] = Some(node);
        self.node_witness[node] = Some(witness);
    }

    /// Counts violations of the dominance invariant: every representative
    /// is active, assigned to its witness and carries the lowest cost ever
    /// offered; every active node represents its witness.
    pub fn violations(&self, active: &[usize], is_active: impl Fn(usize) -> bool, cost_of: impl Fn(usize) -> f64) -> usize {
        let mut bad = 0;
        for (w, rep) in self.rep.iter().enumerate() {
            if let Some(r) = *rep {
                let ok = is_active(r)
                    && self.node_witness.get(r).copied().flatten() == Some(w)
                    && cost_of(r) == self.best_offered[w];
                bad += usize::from(!ok);
            }
        }
        for &n in active {
            let owner = self.node_witness.get(n).copied().flatten();
            bad += usize::from(owner.is_none_or(|w| self.rep[w] != Some(n)));
        }
        bad
    }
}
