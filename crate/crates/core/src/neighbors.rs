//! Exact nearest-neighbour retrieval in the scaled state-action space.
//!
//! Every dataset transition contributes the point `(beta * s) ++ a`. The
//! point-to-set distance of a query `(s, a)` is the Euclidean distance from
//! `(beta * s) ++ a` to the closest stored point. Scaling happens once at build
//! time, so queries are plain Euclidean searches; changing `beta` means
//! building a new index.
//!
//! Ties are broken by the smaller dataset index, which makes results
//! independent of build order.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{OfflineDataset, Transition};
use crate::error::{Error, Result};

/// Points per leaf bucket.
const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborResult {
    /// Point-to-set distance in the scaled space.
    pub distance: f64,
    pub neighbor_state: Vec<f64>,
    pub neighbor_action: Vec<f64>,
    pub source_index: usize,
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f64, left: usize, right: usize },
}

/// Balanced KD-tree over the scaled points of one dataset.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    beta: f64,
    state_dim: usize,
    action_dim: usize,
    /// Row-major `(n, state_dim + action_dim)` scaled points.
    points: Vec<f64>,
    states: Vec<f64>,
    actions: Vec<f64>,
    /// Dataset indices, permuted so every leaf owns a contiguous range.
    order: Vec<usize>,
    nodes: Vec<Node>,
}

/// Max-heap entry; the worst candidate sits on top.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl Candidate {
    fn key_cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.key_cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key_cmp(other)
    }
}

struct Search<'q> {
    query: &'q [f64],
    k: usize,
    heap: BinaryHeap<Candidate>,
}

impl Search<'_> {
    fn worst(&self) -> Option<f64> {
        if self.heap.len() < self.k {
            None
        } else {
            self.heap.peek().map(|c| c.dist2)
        }
    }

    fn offer(&mut self, c: Candidate) {
        if self.heap.len() < self.k {
            self.heap.push(c);
        } else if let Some(top) = self.heap.peek() {
            if c.key_cmp(top) == Ordering::Less {
                self.heap.pop();
                self.heap.push(c);
            }
        }
    }
}

/// Squared Euclidean distance, summed in coordinate order.
#[inline]
fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

fn scaled_query(beta: f64, state: &[f64], action: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.extend(state.iter().map(|s| beta * s));
    out.extend_from_slice(action);
}

impl NeighborIndex {
    pub fn build(ds: &OfflineDataset, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive and finite, got {beta}")));
        }
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (sd, ad) = (ds.state_dim(), ds.action_dim());
        let n = ds.len();
        let mut points = Vec::with_capacity(n * (sd + ad));
        let mut states = Vec::with_capacity(n * sd);
        let mut actions = Vec::with_capacity(n * ad);
        let mut buf = Vec::with_capacity(sd + ad);
        for t in ds.transitions() {
            scaled_query(beta, &t.state, &t.action, &mut buf);
            points.extend_from_slice(&buf);
            states.extend_from_slice(&t.state);
            actions.extend_from_slice(&t.action);
        }
        let mut index = Self {
            beta,
            state_dim: sd,
            action_dim: ad,
            points,
            states,
            actions,
            order: (0..n).collect(),
            nodes: Vec::new(),
        };
        index.build_node(0, n, 0);
        Ok(index)
    }

    fn point(&self, i: usize) -> &[f64] {
        let d = self.dims();
        &self.points[i * d..(i + 1) * d]
    }

    /// Recursively splits `order[start..end]` at the median of the depth's
    /// cycling dimension and returns the node id.
    fn build_node(&mut self, start: usize, end: usize, depth: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let dims = self.dims();
        let dim = depth % dims;
        let mid = (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid, |&a, &b| {
            points[a * dims + dim]
                .total_cmp(&points[b * dims + dim])
                .then(a.cmp(&b))
        });
        let value = points[self.order[start + mid] * dims + dim];
        self.nodes.push(Node::Split {
            dim,
            value,
            left: 0,
            right: 0,
        });
        let left = self.build_node(start, start + mid, depth + 1);
        let right = self.build_node(start + mid, end, depth + 1);
        if let Node::Split { left: l, right: r, .. } = &mut self.nodes[id] {
            *l = left;
            *r = right;
        }
        id
    }

    fn search(&self, node: usize, s: &mut Search<'_>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let dist2 = squared_distance(s.query, self.point(i));
                    s.offer(Candidate { dist2, index: i });
                }
            }
            Node::Split { dim, value, left, right } => {
                // Left holds coordinates <= value, right holds >= value.
                let diff = s.query[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, s);
                let plane = diff * diff;
                if s.worst().is_none_or(|w| plane <= w) {
                    self.search(far, s);
                }
            }
        }
    }

    fn check_query(&self, state: &[f64], action: &[f64]) -> Result<()> {
        if state.len() != self.state_dim {
            return Err(Error::shape("neighbor query state", self.state_dim, state.len()));
        }
        if action.len() != self.action_dim {
            return Err(Error::shape("neighbor query action", self.action_dim, action.len()));
        }
        Ok(())
    }

    /// The `k` closest points as `(squared distance, dataset index)`, ascending.
    pub fn k_nearest_raw(&self, state: &[f64], action: &[f64], k: usize) -> Result<Vec<(f64, usize)>> {
        self.check_query(state, action)?;
        if k == 0 || k > self.len() {
            return Err(Error::Config(format!("k must lie in [1, {}], got {k}", self.len())));
        }
        let mut q = Vec::with_capacity(self.dims());
        scaled_query(self.beta, state, action, &mut q);
        let mut search = Search {
            query: &q,
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        };
        self.search(0, &mut search);
        Ok(search
            .heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| (c.dist2, c.index))
            .collect())
    }

    pub fn nearest(&self, state: &[f64], action: &[f64]) -> Result<NeighborResult> {
        let (d2, i) = self.k_nearest_raw(state, action, 1)?[0];
        Ok(self.result(d2, i, state, action))
    }

    pub fn k_nearest(&self, state: &[f64], action: &[f64], k: usize) -> Result<Vec<NeighborResult>> {
        Ok(self
            .k_nearest_raw(state, action, k)?
            .into_iter()
            .map(|(d2, i)| self.result(d2, i, state, action))
            .collect())
    }

    fn result(&self, dist2: f64, i: usize, state: &[f64], action: &[f64]) -> NeighborResult {
        let r = NeighborResult {
            distance: dist2.sqrt(),
            neighbor_state: self.state_of(i).to_vec(),
            neighbor_action: self.action_of(i).to_vec(),
            source_index: i,
        };
        if cfg!(debug_assertions) {
            let (state_gap, action_gap) = self.component_gaps(state, action, i);
            debug_assert!(
                state_gap <= r.distance && action_gap <= r.distance,
                "component bound violated: {state_gap} / {action_gap} > {}",
                r.distance
            );
        }
        r
    }

    /// `(|beta s - beta s_hat|, |a - a_hat|)` computed in the scaled space with
    /// the same summation order as the full distance, so each is bounded by
    /// the full distance without rounding slack.
    pub fn component_gaps(&self, state: &[f64], action: &[f64], i: usize) -> (f64, f64) {
        let p = self.point(i);
        let mut s2 = 0.0;
        for (x, y) in state.iter().zip(&p[..self.state_dim]) {
            let d = self.beta * x - y;
            s2 += d * d;
        }
        (s2.sqrt(), squared_distance(action, &p[self.state_dim..]).sqrt())
    }

    pub fn state_of(&self, i: usize) -> &[f64] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn action_of(&self, i: usize) -> &[f64] {
        &self.actions[i * self.action_dim..(i + 1) * self.action_dim]
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn dims(&self) -> usize {
        self.state_dim + self.action_dim
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Number of edges on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], id: usize) -> usize {
            match nodes[id] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    /// Number of points stored across all leaves.
    pub fn stored_points(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match n {
                Node::Leaf { start, end } => end - start,
                Node::Split { .. } => 0,
            })
            .sum()
    }
}

/// Linear-scan reference with the same contract and tie rule as
/// [`NeighborIndex::k_nearest`].
pub fn brute_force_nearest(
    ds: &OfflineDataset,
    beta: f64,
    state: &[f64],
    action: &[f64],
    k: usize,
) -> Result<Vec<NeighborResult>> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Config(format!("beta must be positive and finite, got {beta}")));
    }
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if state.len() != ds.state_dim() || action.len() != ds.action_dim() {
        return Err(Error::shape(
            "brute force query",
            format!("({}, {})", ds.state_dim(), ds.action_dim()),
            format!("({}, {})", state.len(), action.len()),
        ));
    }
    if k == 0 || k > ds.len() {
        return Err(Error::Config(format!("k must lie in [1, {}], got {k}", ds.len())));
    }
    let mut all: Vec<(f64, usize)> = ds
        .transitions()
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut d2 = 0.0;
            for (x, y) in state.iter().zip(&t.state) {
                let d = beta * x - beta * y;
                d2 += d * d;
            }
            for (x, y) in action.iter().zip(&t.action) {
                let d = x - y;
                d2 += d * d;
            }
            (d2, i)
        })
        .collect();
    let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, order);
        all.truncate(k);
    }
    all.sort_by(order);
    Ok(all
        .into_iter()
        .map(|(d2, i)| {
            let t = &ds.transitions()[i];
            NeighborResult {
                distance: d2.sqrt(),
                neighbor_state: t.state.clone(),
                neighbor_action: t.action.clone(),
                source_index: i,
            }
        })
        .collect())
}

/// Average point-to-set distance of `visited` state-action pairs.
pub fn mean_point_to_set_distance(index: &NeighborIndex, visited: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if visited.is_empty() {
        return Err(Error::Config("no visited state-action pairs".into()));
    }
    let mut total = 0.0;
    for (s, a) in visited {
        let (d2, _) = index.k_nearest_raw(s, a, 1)?[0];
        total += d2.sqrt();
    }
    Ok(total / visited.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub size: usize,
    pub dims: usize,
    pub queries: usize,
    pub build_seconds: f64,
    pub kd_query_seconds: f64,
    pub brute_query_seconds: f64,
    /// Every query returned the same `(distance, index)` from both backends.
    pub identical: bool,
}

/// Times KD-tree and linear-scan nearest-neighbour queries on random data.
///
/// Each dataset has `dims - 1` state dimensions in `[0, 1]` and one action
/// dimension in `[-1, 1]`; queries are drawn from the same box.
pub fn bench_index(sizes: &[usize], dims: usize, queries: usize, beta: f64, seed: u64) -> Result<Vec<BenchRow>> {
    if dims < 2 {
        return Err(Error::Config(format!("bench needs at least 2 dimensions, got {dims}")));
    }
    if queries == 0 {
        return Err(Error::Config("bench needs at least one query".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = dims - 1;
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        if size == 0 {
            return Err(Error::Config("bench sizes must be positive".into()));
        }
        let transitions = (0..size)
            .map(|_| {
                let state: Vec<f64> = (0..sd).map(|_| rng.random::<f64>()).collect();
                Transition {
                    next_state: state.clone(),
                    state,
                    action: vec![rng.random_range(-1.0..=1.0)],
                    reward: 0.0,
                    done: false,
                }
            })
            .collect();
        let ds = OfflineDataset::new("bench", sd, 1, transitions)?;
        let qs: Vec<(Vec<f64>, f64)> = (0..queries)
            .map(|_| ((0..sd).map(|_| rng.random::<f64>()).collect(), rng.random_range(-1.0..=1.0)))
            .collect();
        let start = Instant::now();
        let index = NeighborIndex::build(&ds, beta)?;
        let build_seconds = start.elapsed().as_secs_f64();

        let start = Instant::now();
        let kd: Vec<(f64, usize)> = qs
            .iter()
            .map(|(s, a)| index.k_nearest_raw(s, &[*a], 1).map(|r| r[0]))
            .collect::<Result<_>>()?;
        let kd_query_seconds = start.elapsed().as_secs_f64() / queries as f64;

        let start = Instant::now();
        let brute: Vec<(f64, usize)> = qs
            .iter()
            .map(|(s, a)| brute_force_nearest(&ds, beta, s, &[*a], 1).map(|r| (r[0].distance, r[0].source_index)))
            .collect::<Result<_>>()?;
        let brute_query_seconds = start.elapsed().as_secs_f64() / queries as f64;

        let identical = kd
            .iter()
            .zip(&brute)
            .all(|(&(d2, i), &(d, j))| i == j && d2.sqrt() == d);
        rows.push(BenchRow {
            size,
            dims,
            queries,
            build_seconds,
            kd_query_seconds,
            brute_query_seconds,
            identical,
        });
    }
    Ok(rows)
}
