//! Exact nearest-neighbor queries under the system metric.
//!
//! States are embedded so that Euclidean distance in the embedding never
//! exceeds the true distance: angles map to `w·(cos θ, sin θ)` (chord ≤ arc)
//! and quaternion blocks are dropped. The embedding only prunes; candidates
//! are always ranked by the true metric.

use crate::systems::{Component, State, SystemModel};

/// Below this many active points queries scan linearly.
pub const LINEAR_SCAN_LIMIT: usize = 2000;
const LEAF_SIZE: usize = 16;

/// Query strategy; `Auto` switches on [`LINEAR_SCAN_LIMIT`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NnMode {
    Auto,
    Linear,
    KdTree,
}

#[derive(Debug, Clone)]
struct KdNode {
    lo: Vec<f64>,
    hi: Vec<f64>,
    kind: KdKind,
}

#[derive(Debug, Clone)]
enum KdKind {
    Leaf(Vec<usize>),
    Split(usize, usize),
}

#[derive(Debug, Clone, Default)]
struct KdTree {
    nodes: Vec<KdNode>,
}

impl KdTree {
    fn build(ids: Vec<usize>, points: &[Vec<f64>]) -> KdTree {
        let mut t = KdTree::default();
        if !ids.is_empty() {
            t.build_node(ids, points);
        }
        t
    }

    fn build_node(&mut self, mut ids: Vec<usize>, points: &[Vec<f64>]) -> usize {
        let dim = points[ids[0]].len();
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for &i in &ids {
            for k in 0..dim {
                lo[k] = lo[k].min(points[i][k]);
                hi[k] = hi[k].max(points[i][k]);
            }
        }
        let slot = self.nodes.len();
        self.nodes.push(KdNode {
            lo: lo.clone(),
            hi: hi.clone(),
            kind: KdKind::Leaf(Vec::new()),
        });
        let axis = (0..dim)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        if ids.len() <= LEAF_SIZE || hi[axis] - lo[axis] <= 0.0 {
            self.nodes[slot].kind = KdKind::Leaf(ids);
            return slot;
        }
        ids.sort_by(|&a, &b| points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b)));
        let right_ids = ids.split_off(ids.len() / 2);
        let left = self.build_node(ids, points);
        let right = self.build_node(right_ids, points);
        self.nodes[slot].kind = KdKind::Split(left, right);
        slot
    }
}

fn box_lower_bound(q: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..q.len() {
        let d = if q[k] < lo[k] {
            lo[k] - q[k]
        } else if q[k] > hi[k] {
            q[k] - hi[k]
        } else {
            0.0
        };
        s += d * d;
    }
    s.sqrt()
}

/// Whether a lower bound `lb` rules out beating `bound`, with slack for
/// rounding in the embedded coordinates.
fn excludes(lb: f64, bound: f64) -> bool {
    lb > bound * (1.0 + 1e-12) + 1e-12
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Nearest-neighbor index over points with stable integer ids.
#[derive(Debug, Clone)]
pub struct NnIndex {
    system: SystemModel,
    mode: NnMode,
    states: Vec<State>,
    points: Vec<Vec<f64>>,
    active: Vec<bool>,
    /// Active ids with their positions, for O(1) removal.
    active_list: Vec<usize>,
    position: Vec<usize>,
    kd: Option<KdTree>,
    pending: Vec<usize>,
}

impl NnIndex {
    pub fn new(system: &SystemModel, mode: NnMode) -> Self {
        NnIndex {
            system: system.clone(),
            mode,
            states: Vec::new(),
            points: Vec::new(),
            active: Vec::new(),
            active_list: Vec::new(),
            position: Vec::new(),
            kd: None,
            pending: Vec::new(),
        }
    }

    pub fn embed(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len() + 2);
        for (i, c) in self.system.components.iter().enumerate() {
            let w = self.system.distance_weights[i];
            match c {
                Component::Angle => {
                    out.push(w * x[i].cos());
                    out.push(w * x[i].sin());
                }
                Component::Quaternion => {}
                _ => out.push(w * x[i]),
            }
        }
        out
    }

    /// Adds a point; ids are assigned densely from zero.
    pub fn insert(&mut self, x: &State) -> usize {
        let id = self.states.len();
        self.points.push(self.embed(x));
        self.states.push(x.clone());
        self.active.push(true);
        self.position.push(self.active_list.len());
        self.active_list.push(id);
        if self.kd.is_some() {
            self.pending.push(id);
        }
        id
    }

    pub fn deactivate(&mut self, id: usize) {
        if !self.active[id] {
            return;
        }
        self.active[id] = false;
        let pos = self.position[id];
        self.active_list.swap_remove(pos);
        if let Some(&moved) = self.active_list.get(pos) {
            self.position[moved] = pos;
        }
    }

    pub fn is_active(&self, id: usize) -> bool {
        self.active[id]
    }

    pub fn active_len(&self) -> usize {
        self.active_list.len()
    }

    /// Active ids in unspecified but deterministic order.
    pub fn active_ids(&self) -> &[usize] {
        &self.active_list
    }

    pub fn state(&self, id: usize) -> &State {
        &self.states[id]
    }

    fn use_kd(&self) -> bool {
        match self.mode {
            NnMode::Linear => false,
            NnMode::KdTree => true,
            NnMode::Auto => self.active_list.len() >= LINEAR_SCAN_LIMIT,
        }
    }

    fn refresh(&mut self) {
        let stale = match &self.kd {
            None => true,
            Some(_) => self.pending.len() > LEAF_SIZE.max(self.active_list.len() / 4),
        };
        if stale {
            let mut ids = self.active_list.clone();
            ids.sort_unstable();
            self.kd = Some(KdTree::build(ids, &self.points));
            self.pending.clear();
        }
    }

    /// Closest active point, ties broken by lowest id.
    pub fn nearest(&mut self, x: &[f64]) -> Option<(usize, f64)> {
        let mut best: Option<(f64, usize)> = None;
        let consider = |id: usize, best: &mut Option<(f64, usize)>, me: &NnIndex| {
            let d = me.system.distance(x, &me.states[id]);
            if best.is_none_or(|(bd, bi)| d < bd || (d == bd && id < bi)) {
                *best = Some((d, id));
            }
        };
        if !self.use_kd() {
            for &id in &self.active_list {
                consider(id, &mut best, self);
            }
            return best.map(|(d, i)| (i, d));
        }
        self.refresh();
        let q = self.embed(x);
        for &id in &self.pending {
            if self.active[id] {
                consider(id, &mut best, self);
            }
        }
        let kd = self.kd.as_ref().expect("refreshed");
        if kd.nodes.is_empty() {
            return best.map(|(d, i)| (i, d));
        }
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &kd.nodes[n];
            let lb = box_lower_bound(&q, &node.lo, &node.hi);
            if best.is_some_and(|(bd, _)| excludes(lb, bd)) {
                continue;
            }
            match &node.kind {
                KdKind::Leaf(ids) => {
                    for &id in ids {
                        if !self.active[id] {
                            continue;
                        }
                        if best.is_some_and(|(bd, _)| excludes(euclid(&q, &self.points[id]), bd)) {
                            continue;
                        }
                        consider(id, &mut best, self);
                    }
                }
                KdKind::Split(l, r) => {
                    let dl = box_lower_bound(&q, &kd.nodes[*l].lo, &kd.nodes[*l].hi);
                    let dr = box_lower_bound(&q, &kd.nodes[*r].lo, &kd.nodes[*r].hi);
                    // Pop the closer child first.
                    if dl <= dr {
                        stack.push(*r);
                        stack.push(*l);
                    } else {
                        stack.push(*l);
                        stack.push(*r);
                    }
                }
            }
        }
        best.map(|(d, i)| (i, d))
    }

    /// All active points within `radius`, sorted by id.
    pub fn within(&mut self, x: &[f64], radius: f64) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        if !self.use_kd() {
            for &id in &self.active_list {
                let d = self.system.distance(x, &self.states[id]);
                if d <= radius {
                    out.push((id, d));
                }
            }
        } else {
            self.refresh();
            let q = self.embed(x);
            for &id in &self.pending {
                if self.active[id] {
                    let d = self.system.distance(x, &self.states[id]);
                    if d <= radius {
                        out.push((id, d));
                    }
                }
            }
            let kd = self.kd.as_ref().expect("refreshed");
            let mut stack = if kd.nodes.is_empty() { vec![] } else { vec![0usize] };
            while let Some(n) = stack.pop() {
                let node = &kd.nodes[n];
                if excludes(box_lower_bound(&q, &node.lo, &node.hi), radius) {
                    continue;
                }
                match &node.kind {
                    KdKind::Leaf(ids) => {
                        for &id in ids {
                            if self.active[id] && !excludes(euclid(&q, &self.points[id]), radius) {
                                let d = self.system.distance(x, &self.states[id]);
                                if d <= radius {
                                    out.push((id, d));
                                }
                            }
                        }
                    }
                    KdKind::Split(l, r) => {
                        stack.push(*l);
                        stack.push(*r);
                    }
                }
            }
        }
        out.sort_by_key(|p| p.0);
        out
    }
}
