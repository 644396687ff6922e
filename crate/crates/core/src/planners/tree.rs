//! Search tree with parent links, per-edge trajectories and an index over
//! active nodes.

use super::nn::{NnIndex, NnMode};
use crate::error::{KinoError, Result};
use crate::systems::{State, Step, SystemModel, Trajectory};

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub state: State,
    pub parent: Option<usize>,
    /// Segments from the parent's state to this node's state.
    pub edge: Vec<Step>,
    pub cost: f64,
    pub active: bool,
    /// Removed nodes keep their slot so that ids stay stable.
    pub removed: bool,
    pub children: usize,
}

#[derive(Debug, Clone)]
pub struct SearchTree {
    pub nodes: Vec<Node>,
    index: NnIndex,
    live: usize,
}

impl SearchTree {
    pub fn new(system: &SystemModel, root: State) -> Self {
        Self::with_mode(system, root, NnMode::Auto)
    }

    pub fn with_mode(system: &SystemModel, root: State, mode: NnMode) -> Self {
        let mut index = NnIndex::new(system, mode);
        index.insert(&root);
        SearchTree {
            nodes: vec![Node {
                state: root,
                parent: None,
                edge: Vec::new(),
                cost: 0.0,
                active: true,
                removed: false,
                children: 0,
            }],
            index,
            live: 1,
        }
    }

    pub const ROOT: usize = 0;

    /// Nodes not removed by pruning.
    pub fn len(&self) -> usize {
        self.live
    }

    pub fn is_empty(&self) -> bool {
        self.live == 0
    }

    pub fn node(&self, id: usize) -> &Node {
        &self.nodes[id]
    }

    /// Appends a child reached from `parent` by `traj`, which must start at
    /// the parent's state.
    pub fn add(&mut self, parent: usize, traj: Trajectory) -> usize {
        debug_assert!(!self.nodes[parent].removed);
        let cost = self.nodes[parent].cost + traj.total_duration();
        let id = self.index.insert(&traj.terminal_state);
        debug_assert_eq!(id, self.nodes.len());
        self.nodes[parent].children += 1;
        self.nodes.push(Node {
            state: traj.terminal_state,
            parent: Some(parent),
            edge: traj.steps,
            cost,
            active: true,
            removed: false,
            children: 0,
        });
        self.live += 1;
        id
    }

    pub fn deactivate(&mut self, id: usize) {
        self.nodes[id].active = false;
        self.index.deactivate(id);
    }

    /// Removes `id` if it is an inactive leaf, then walks up removing
    /// ancestors that became inactive leaves. Returns how many were removed.
    pub fn prune_from(&mut self, mut id: usize) -> usize {
        let mut removed = 0;
        loop {
            let n = &self.nodes[id];
            if n.active || n.children > 0 || n.removed || n.parent.is_none() {
                return removed;
            }
            let parent = n.parent.expect("checked");
            self.nodes[id].removed = true;
            self.nodes[id].edge = Vec::new();
            self.nodes[parent].children -= 1;
            self.live -= 1;
            removed += 1;
            id = parent;
        }
    }

    pub fn nearest_active(&mut self, x: &[f64]) -> Option<(usize, f64)> {
        self.index.nearest(x)
    }

    pub fn active_within(&mut self, x: &[f64], radius: f64) -> Vec<(usize, f64)> {
        self.index.within(x, radius)
    }

    pub fn active_ids(&self) -> &[usize] {
        self.index.active_ids()
    }

    pub fn active_len(&self) -> usize {
        self.index.active_len()
    }

    /// Root-to-node trajectory; its duration is the node's cost.
    pub fn extract_path(&self, id: usize) -> Result<Trajectory> {
        let mut chain = Vec::new();
        let mut cur = id;
        loop {
            let n = self.nodes.get(cur).ok_or(KinoError::DetachedNode(id))?;
            if n.removed {
                return Err(KinoError::DetachedNode(id));
            }
            chain.push(cur);
            match n.parent {
                Some(p) => cur = p,
                None => break,
            }
        }
        let steps = chain
            .iter()
            .rev()
            .flat_map(|&i| self.nodes[i].edge.iter().cloned())
            .collect();
        Ok(Trajectory {
            steps,
            terminal_state: self.nodes[id].state.clone(),
        })
    }

    /// Largest deviation between stored states and a replay of the edges,
    /// and between stored and recomputed costs, over live nodes.
    pub fn audit(&self, system: &SystemModel) -> (f64, f64) {
        let mut state_err = 0.0f64;
        let mut cost_err = 0.0f64;
        for n in self.nodes.iter().filter(|n| !n.removed) {
            let Some(p) = n.parent else { continue };
            let parent = &self.nodes[p];
            let mut x = parent.state.clone();
            let mut cost = parent.cost;
            for s in &n.edge {
                state_err = state_err.max(
                    s.state.iter().zip(x.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
                );
                x = system.propagate(&x, &s.control, s.duration);
                cost += s.duration;
            }
            state_err = state_err.max(
                n.state.iter().zip(x.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
            );
            cost_err = cost_err.max((cost - n.cost).abs());
        }
        (state_err, cost_err)
    }
}

/// Minimum-cost active node within `radius` of `goal`, ties to lowest id.
pub fn reached(tree: &mut SearchTree, goal: &State, radius: f64) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (id, _) in tree.active_within(goal, radius) {
        if best.is_none_or(|b| tree.nodes[id].cost < tree.nodes[b].cost) {
            best = Some(id);
        }
    }
    best
}
