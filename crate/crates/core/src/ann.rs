//! Forest of random-projection trees with an unindexed overflow table.
//!
//! Each tree recursively splits its items by the perpendicular bisector of
//! two centroids (seeded from two sampled points, refined by a short online
//! 2-means pass) until a node holds at most `leaf_capacity` items.
//! Searches pop nodes from one priority queue shared by all trees, ordered
//! by the smallest signed margin seen on the way down, and stop after
//! `max_nodes` pops. Every candidate reached this way, plus every overflow
//! entry, is then ranked by its exact distance to the query.
//!
//! Items added after the build live in the overflow table and are scanned
//! exhaustively, so they are visible immediately. A rebuild folds them into
//! a fresh forest.

use crate::codec::{DecodeError, Decoder, Encoder};
use crate::vector::{self, dot, Descriptor, Metric, VectorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

pub type PrototypeId = u64;

pub const DEFAULT_TREES: usize = 100;
pub const DEFAULT_MAX_NODES: usize = 1000;

const SNAPSHOT_MAGIC: &[u8; 4] = b"ANNF";
const SNAPSHOT_VERSION: u32 = 1;
const TWO_MEANS_STEPS: usize = 200;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("cannot build an index from zero items")]
    EmptyIndex,
    #[error("items do not share one dimension and metric")]
    HeterogeneousItems,
    #[error("prototype {0} is already present")]
    DuplicateId(PrototypeId),
    #[error("dimension mismatch: index holds {expected}-d vectors, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("metric mismatch: index uses {expected}, got {actual}")]
    MetricMismatch { expected: Metric, actual: Metric },
    #[error("the store holds no items")]
    EmptyStore,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(#[from] DecodeError),
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Forest construction parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Maximum items per leaf; `None` uses `dim + 2`.
    pub leaf_capacity: Option<usize>,
    pub seed: u64,
}

impl ForestParams {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn leaf_capacity_for(&self, dim: usize) -> usize {
        self.leaf_capacity.unwrap_or(dim + 2).max(1)
    }
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: DEFAULT_TREES,
            leaf_capacity: None,
            seed: 0,
        }
    }
}

/// How many tree nodes a search may pop from its priority queue, summed
/// over all trees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchBudget {
    Nodes(usize),
    Unbounded,
}

impl SearchBudget {
    fn limit(self) -> usize {
        match self {
            SearchBudget::Nodes(n) => n,
            SearchBudget::Unbounded => usize::MAX,
        }
    }
}

impl Default for SearchBudget {
    fn default() -> Self {
        SearchBudget::Nodes(DEFAULT_MAX_NODES)
    }
}

impl fmt::Display for SearchBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SearchBudget::Nodes(n) => write!(f, "{n}"),
            SearchBudget::Unbounded => f.write_str("inf"),
        }
    }
}

impl FromStr for SearchBudget {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inf" | "unbounded" | "∞" => Ok(SearchBudget::Unbounded),
            n => n
                .parse()
                .map(SearchBudget::Nodes)
                .map_err(|e| format!("bad budget `{n}`: {e}")),
        }
    }
}

impl Serialize for SearchBudget {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            SearchBudget::Nodes(n) => s.serialize_u64(*n as u64),
            SearchBudget::Unbounded => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for SearchBudget {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(usize),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(SearchBudget::Nodes(n)),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// A search result. Lists are sorted by distance, then by ascending id.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedHit {
    pub prototype_id: PrototypeId,
    pub distance: f64,
}

impl RankedHit {
    pub fn cmp_rank(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.prototype_id.cmp(&other.prototype_id))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf(Vec<u32>),
    /// Hyperplane `normal . q = offset` with unit `normal`; positive margins
    /// go `right`.
    Split {
        normal: Vec<f64>,
        offset: f64,
        left: u32,
        right: u32,
    },
    /// Arbitrary halving used when no separating plane exists (duplicates).
    Fork { left: u32, right: u32 },
}

#[derive(Debug, Clone, PartialEq)]
struct Tree {
    root: u32,
    nodes: Vec<Node>,
}

/// Row-major storage of the indexed vectors.
#[derive(Debug, Clone, PartialEq, Default)]
struct ItemTable {
    ids: Vec<PrototypeId>,
    normalized: Vec<bool>,
    data: Vec<f64>,
}

impl ItemTable {
    fn len(&self) -> usize {
        self.ids.len()
    }

    fn row(&self, i: usize, dim: usize) -> &[f64] {
        &self.data[i * dim..(i + 1) * dim]
    }

    fn push(&mut self, id: PrototypeId, d: &Descriptor) {
        self.ids.push(id);
        self.normalized.push(d.is_normalized());
        self.data.extend_from_slice(d.values());
    }
}

/// Unindexed prototypes added since the last build, in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OverflowTable {
    entries: Vec<(PrototypeId, Descriptor)>,
}

impl OverflowTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(PrototypeId, Descriptor)> {
        self.entries.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Indexed(u32),
    Overflow(u32),
}

/// Random-projection forest plus overflow table.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnForest {
    dim: usize,
    metric: Metric,
    params: ForestParams,
    items: ItemTable,
    trees: Vec<Tree>,
    overflow: OverflowTable,
    slots: HashMap<PrototypeId, Slot>,
}

struct QueueEntry {
    priority: f64,
    tree: u32,
    node: u32,
}

impl PartialEq for QueueEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for QueueEntry {}
impl PartialOrd for QueueEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QueueEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.priority
            .total_cmp(&other.priority)
            .then_with(|| other.tree.cmp(&self.tree))
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl AnnForest {
    /// An index with no items; everything added goes to the overflow table.
    pub fn empty(dim: usize, metric: Metric, params: ForestParams) -> Self {
        Self {
            dim,
            metric,
            params,
            items: ItemTable::default(),
            trees: Vec::new(),
            overflow: OverflowTable::default(),
            slots: HashMap::new(),
        }
    }

    pub fn build(items: &[(PrototypeId, Descriptor)], params: ForestParams) -> Result<Self, IndexError> {
        let first = items.first().ok_or(IndexError::EmptyIndex)?;
        let (dim, metric) = (first.1.dim(), first.1.metric());
        if items.iter().any(|(_, d)| d.dim() != dim || d.metric() != metric) {
            return Err(IndexError::HeterogeneousItems);
        }
        let mut forest = Self::empty(dim, metric, params);
        for (id, d) in items {
            if forest.slots.insert(*id, Slot::Indexed(forest.items.len() as u32)).is_some() {
                return Err(IndexError::DuplicateId(*id));
            }
            forest.items.push(*id, d);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        forest.trees = (0..params.n_trees.max(1))
            .map(|_| forest.build_tree(&mut rng))
            .collect();
        Ok(forest)
    }

    fn build_tree(&self, rng: &mut ChaCha8Rng) -> Tree {
        let leaf_capacity = self.params.leaf_capacity_for(self.dim);
        let mut nodes: Vec<Node> = vec![Node::Leaf(Vec::new())];
        let all: Vec<u32> = (0..self.items.len() as u32).collect();
        // (node slot, items to place there)
        let mut stack = vec![(0u32, all)];
        while let Some((slot, members)) = stack.pop() {
            if members.len() <= leaf_capacity {
                nodes[slot as usize] = Node::Leaf(members);
                continue;
            }
            let left = nodes.len() as u32;
            let right = left + 1;
            nodes.push(Node::Leaf(Vec::new()));
            nodes.push(Node::Leaf(Vec::new()));
            let split = self.pick_split(&members, rng).and_then(|(normal, offset)| {
                let (lo, hi) = self.partition(&members, &normal, offset);
                (!lo.is_empty() && !hi.is_empty()).then_some((normal, offset, lo, hi))
            });
            match split {
                Some((normal, offset, lo, hi)) => {
                    nodes[slot as usize] = Node::Split {
                        normal,
                        offset,
                        left,
                        right,
                    };
                    stack.push((left, lo));
                    stack.push((right, hi));
                }
                None => {
                    let (l, r) = halve(members);
                    nodes[slot as usize] = Node::Fork { left, right };
                    stack.push((left, l));
                    stack.push((right, r));
                }
            }
        }
        Tree { root: 0, nodes }
    }

    /// Splits members by the sign of their margin; points on the plane join
    /// the smaller side.
    fn partition(&self, members: &[u32], normal: &[f64], offset: f64) -> (Vec<u32>, Vec<u32>) {
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        let mut on_plane = Vec::new();
        for &m in members {
            let margin = dot(self.items.row(m as usize, self.dim), normal) - offset;
            if margin > 0.0 {
                hi.push(m);
            } else if margin < 0.0 {
                lo.push(m);
            } else {
                on_plane.push(m);
            }
        }
        if lo.len() <= hi.len() {
            lo.extend(on_plane);
        } else {
            hi.extend(on_plane);
        }
        (lo, hi)
    }

    /// Two sampled members seed two centroids refined by a short run of
    /// online 2-means; the split is their perpendicular bisector. Returns a
    /// unit normal and offset, or `None` if no two distinct points were hit.
    fn pick_split(&self, members: &[u32], rng: &mut ChaCha8Rng) -> Option<(Vec<f64>, f64)> {
        let dim = self.dim;
        let row = |m: u32| self.items.row(m as usize, dim);
        let (mut p, mut q) = (Vec::new(), Vec::new());
        let mut found = false;
        for _ in 0..8 {
            let i = rng.random_range(0..members.len());
            let mut j = rng.random_range(0..members.len() - 1);
            if j >= i {
                j += 1;
            }
            if row(members[i]) != row(members[j]) {
                p = row(members[i]).to_vec();
                q = row(members[j]).to_vec();
                found = true;
                break;
            }
        }
        if !found {
            return None;
        }
        let (mut pc, mut qc) = (1.0f64, 1.0f64);
        for _ in 0..TWO_MEANS_STEPS {
            let x = row(members[rng.random_range(0..members.len())]);
            let dp = pc * vector::squared_euclidean(&p, x);
            let dq = qc * vector::squared_euclidean(&q, x);
            if dp < dq {
                p.iter_mut().zip(x).for_each(|(c, v)| *c = (*c * pc + v) / (pc + 1.0));
                pc += 1.0;
            } else if dq < dp {
                q.iter_mut().zip(x).for_each(|(c, v)| *c = (*c * qc + v) / (qc + 1.0));
                qc += 1.0;
            }
        }
        let mut normal: Vec<f64> = p.iter().zip(&q).map(|(a, b)| a - b).collect();
        let norm = dot(&normal, &normal).sqrt();
        if !(norm > 0.0) {
            return None;
        }
        normal.iter_mut().for_each(|n| *n /= norm);
        let offset = 0.5 * (dot(&normal, &p) + dot(&normal, &q));
        Some((normal, offset))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn params(&self) -> ForestParams {
        self.params
    }

    pub fn indexed_len(&self) -> usize {
        self.items.len()
    }

    pub fn overflow(&self) -> &OverflowTable {
        &self.overflow
    }

    pub fn len(&self) -> usize {
        self.items.len() + self.overflow.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, id: PrototypeId) -> bool {
        self.slots.contains_key(&id)
    }

    pub fn indexed_ids(&self) -> &[PrototypeId] {
        &self.items.ids
    }

    /// Every stored id, indexed ones first, then overflow in insertion order.
    pub fn ids(&self) -> impl Iterator<Item = PrototypeId> + '_ {
        self.items
            .ids
            .iter()
            .copied()
            .chain(self.overflow.entries.iter().map(|(id, _)| *id))
    }

    pub fn descriptor(&self, id: PrototypeId) -> Option<Descriptor> {
        match *self.slots.get(&id)? {
            Slot::Indexed(i) => {
                let i = i as usize;
                Descriptor::restore(self.items.row(i, self.dim).to_vec(), self.metric, self.items.normalized[i]).ok()
            }
            Slot::Overflow(i) => Some(self.overflow.entries[i as usize].1.clone()),
        }
    }

    /// All (id, descriptor) pairs currently stored.
    pub fn items(&self) -> Vec<(PrototypeId, Descriptor)> {
        self.ids()
            .map(|id| (id, self.descriptor(id).expect("stored id resolves")))
            .collect()
    }

    fn check_query(&self, d: &Descriptor) -> Result<(), IndexError> {
        if d.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                actual: d.dim(),
            });
        }
        if d.metric() != self.metric {
            return Err(IndexError::MetricMismatch {
                expected: self.metric,
                actual: d.metric(),
            });
        }
        Ok(())
    }

    /// Appends to the overflow table; the item is searchable right away.
    pub fn add(&mut self, id: PrototypeId, d: Descriptor) -> Result<(), IndexError> {
        self.check_query(&d)?;
        if self.slots.contains_key(&id) {
            return Err(IndexError::DuplicateId(id));
        }
        self.slots.insert(id, Slot::Overflow(self.overflow.len() as u32));
        self.overflow.entries.push((id, d));
        Ok(())
    }

    pub fn search(&self, q: &Descriptor, k: usize, budget: SearchBudget) -> Result<Vec<RankedHit>, IndexError> {
        self.search_filtered(q, k, budget, |_| true)
    }

    /// Like [`search`](Self::search) but only ids accepted by `keep` are ranked.
    pub fn search_filtered<F>(&self, q: &Descriptor, k: usize, budget: SearchBudget, keep: F) -> Result<Vec<RankedHit>, IndexError>
    where
        F: Fn(PrototypeId) -> bool,
    {
        self.check_query(q)?;
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if self.is_empty() {
            return Err(IndexError::EmptyStore);
        }
        let qv = q.values();
        let mut hits: Vec<RankedHit> = Vec::new();
        if !self.trees.is_empty() {
            let candidates = self.collect_candidates(qv, budget.limit());
            hits.extend(candidates.into_iter().filter_map(|i| {
                let id = self.items.ids[i as usize];
                keep(id).then(|| RankedHit {
                    prototype_id: id,
                    distance: vector::distance_unchecked(self.metric, qv, self.items.row(i as usize, self.dim)),
                })
            }));
        }
        hits.extend(self.overflow.entries.iter().filter(|(id, _)| keep(*id)).map(|(id, d)| RankedHit {
            prototype_id: *id,
            distance: vector::distance_unchecked(self.metric, qv, d.values()),
        }));
        Ok(top_k(hits, k))
    }

    /// Exact ranking restricted to the given ids; unknown ids are skipped.
    pub fn rank_among(&self, q: &Descriptor, k: usize, ids: &[PrototypeId]) -> Result<Vec<RankedHit>, IndexError> {
        self.check_query(q)?;
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        let qv = q.values();
        let hits = ids
            .iter()
            .filter_map(|&id| {
                let row = match *self.slots.get(&id)? {
                    Slot::Indexed(i) => self.items.row(i as usize, self.dim),
                    Slot::Overflow(i) => self.overflow.entries[i as usize].1.values(),
                };
                Some(RankedHit {
                    prototype_id: id,
                    distance: vector::distance_unchecked(self.metric, qv, row),
                })
            })
            .collect();
        Ok(top_k(hits, k))
    }

    /// Indices of indexed items found within the node budget, deduplicated.
    fn collect_candidates(&self, q: &[f64], limit: usize) -> Vec<u32> {
        let mut heap = BinaryHeap::with_capacity(self.trees.len() * 4);
        for (t, tree) in self.trees.iter().enumerate() {
            heap.push(QueueEntry {
                priority: f64::INFINITY,
                tree: t as u32,
                node: tree.root,
            });
        }
        let mut seen = vec![false; self.items.len()];
        let mut out = Vec::new();
        let mut popped = 0usize;
        while popped < limit {
            let Some(QueueEntry { priority, tree, node }) = heap.pop() else {
                break;
            };
            popped += 1;
            match &self.trees[tree as usize].nodes[node as usize] {
                Node::Leaf(members) => {
                    for &m in members {
                        if !seen[m as usize] {
                            seen[m as usize] = true;
                            out.push(m);
                        }
                    }
                }
                Node::Split {
                    normal,
                    offset,
                    left,
                    right,
                } => {
                    let margin = dot(q, normal) - offset;
                    heap.push(QueueEntry {
                        priority: priority.min(margin),
                        tree,
                        node: *right,
                    });
                    heap.push(QueueEntry {
                        priority: priority.min(-margin),
                        tree,
                        node: *left,
                    });
                }
                Node::Fork { left, right } => {
                    for child in [*left, *right] {
                        heap.push(QueueEntry { priority, tree, node: child });
                    }
                }
            }
        }
        out
    }

    /// New forest over indexed and overflow items; the overflow ends up empty.
    pub fn rebuild(&self, seed: u64) -> Result<Self, IndexError> {
        if self.is_empty() {
            return Err(IndexError::EmptyStore);
        }
        let params = ForestParams { seed, ..self.params };
        Self::build(&self.items(), params)
    }

    pub fn to_snapshot_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.bytes(SNAPSHOT_MAGIC);
        e.u32(SNAPSHOT_VERSION);
        e.u32(self.dim as u32);
        e.u8(self.metric.code());
        e.u32(self.params.n_trees as u32);
        e.u32(self.params.leaf_capacity.unwrap_or(0) as u32);
        e.u64(self.params.seed);
        e.u64(self.items.len() as u64);
        e.u64(self.overflow.len() as u64);
        for i in 0..self.items.len() {
            e.u64(self.items.ids[i]);
            e.u8(self.items.normalized[i] as u8);
            e.f64s(self.items.row(i, self.dim));
        }
        for (id, d) in &self.overflow.entries {
            e.u64(*id);
            e.u8(d.is_normalized() as u8);
            e.f64s(d.values());
        }
        e.u32(self.trees.len() as u32);
        for tree in &self.trees {
            e.u32(tree.root);
            e.u32(tree.nodes.len() as u32);
            for node in &tree.nodes {
                match node {
                    Node::Leaf(members) => {
                        e.u8(0);
                        e.u32(members.len() as u32);
                        members.iter().for_each(|m| e.u32(*m));
                    }
                    Node::Split {
                        normal,
                        offset,
                        left,
                        right,
                    } => {
                        e.u8(1);
                        e.f64s(normal);
                        e.f64(*offset);
                        e.u32(*left);
                        e.u32(*right);
                    }
                    Node::Fork { left, right } => {
                        e.u8(2);
                        e.u32(*left);
                        e.u32(*right);
                    }
                }
            }
        }
        e.finish_with_crc()
    }

    pub fn from_snapshot_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        let mut d = Decoder::with_crc(bytes)?;
        d.expect_magic(SNAPSHOT_MAGIC)?;
        let version = d.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(DecodeError::UnsupportedVersion(version).into());
        }
        let dim = d.u32()? as usize;
        let metric = Metric::from_code(d.u8()?).ok_or_else(|| DecodeError::Invalid("metric".into()))?;
        let n_trees = d.u32()? as usize;
        let leaf_capacity = match d.u32()? {
            0 => None,
            n => Some(n as usize),
        };
        let seed = d.u64()?;
        let n_items = d.u64()? as usize;
        let n_overflow = d.u64()? as usize;
        if dim == 0 {
            return Err(DecodeError::Invalid("zero dimension".into()).into());
        }
        let params = ForestParams {
            n_trees,
            leaf_capacity,
            seed,
        };
        let mut forest = Self::empty(dim, metric, params);
        let corrupt = |what: &str| IndexError::CorruptSnapshot(DecodeError::Invalid(what.to_string()));
        for i in 0..n_items {
            let id = d.u64()?;
            let normalized = d.u8()? != 0;
            let values = d.f64s(dim)?;
            if forest.slots.insert(id, Slot::Indexed(i as u32)).is_some() {
                return Err(corrupt("duplicate id"));
            }
            forest.items.ids.push(id);
            forest.items.normalized.push(normalized);
            forest.items.data.extend_from_slice(&values);
        }
        for _ in 0..n_overflow {
            let id = d.u64()?;
            let normalized = d.u8()? != 0;
            let values = d.f64s(dim)?;
            let desc = Descriptor::restore(values, metric, normalized).map_err(|_| corrupt("overflow vector"))?;
            if forest.slots.contains_key(&id) {
                return Err(corrupt("duplicate id"));
            }
            forest.slots.insert(id, Slot::Overflow(forest.overflow.len() as u32));
            forest.overflow.entries.push((id, desc));
        }
        let tree_count = d.u32()? as usize;
        for _ in 0..tree_count {
            let root = d.u32()?;
            let node_count = d.u32()? as usize;
            let mut nodes = Vec::with_capacity(node_count.min(1 << 20));
            for _ in 0..node_count {
                let node = match d.u8()? {
                    0 => {
                        let n = d.u32()? as usize;
                        let mut members = Vec::with_capacity(n.min(1 << 16));
                        for _ in 0..n {
                            members.push(d.u32()?);
                        }
                        Node::Leaf(members)
                    }
                    1 => Node::Split {
                        normal: d.f64s(dim)?,
                        offset: d.f64()?,
                        left: d.u32()?,
                        right: d.u32()?,
                    },
                    2 => Node::Fork {
                        left: d.u32()?,
                        right: d.u32()?,
                    },
                    _ => return Err(corrupt("node tag")),
                };
                nodes.push(node);
            }
            let tree = Tree { root, nodes };
            if !tree_is_consistent(&tree, n_items) {
                return Err(corrupt("tree structure"));
            }
            forest.trees.push(tree);
        }
        d.finish()?;
        Ok(forest)
    }

    pub fn save_snapshot(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        std::fs::write(path, self.to_snapshot_bytes())?;
        Ok(())
    }

    pub fn load_snapshot(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        Self::from_snapshot_bytes(&std::fs::read(path)?)
    }

    /// Checks that every indexed item sits in exactly one leaf of every tree.
    pub fn check_invariants(&self) -> bool {
        self.trees.iter().all(|t| tree_is_consistent(t, self.items.len()))
    }
}

fn tree_is_consistent(tree: &Tree, n_items: usize) -> bool {
    let n = tree.nodes.len();
    if tree.root as usize >= n {
        return false;
    }
    let mut seen = vec![0u32; n_items];
    let mut visited = vec![false; n];
    let mut stack = vec![tree.root];
    while let Some(i) = stack.pop() {
        let i = i as usize;
        if i >= n || visited[i] {
            return false;
        }
        visited[i] = true;
        match &tree.nodes[i] {
            Node::Leaf(members) => {
                for &m in members {
                    match seen.get_mut(m as usize) {
                        Some(c) => *c += 1,
                        None => return false,
                    }
                }
            }
            Node::Split { left, right, .. } => {
                stack.push(*left);
                stack.push(*right);
            }
            Node::Fork { left, right } => {
                stack.push(*left);
                stack.push(*right);
            }
        }
    }
    seen.iter().all(|&c| c == 1)
}

fn halve(mut members: Vec<u32>) -> (Vec<u32>, Vec<u32>) {
    let right = members.split_off(members.len() / 2);
    (members, right)
}

/// Sorts by (distance, id) and keeps the first `k`.
pub(crate) fn top_k(mut hits: Vec<RankedHit>, k: usize) -> Vec<RankedHit> {
    if hits.len() > k {
        hits.select_nth_unstable_by(k - 1, RankedHit::cmp_rank);
        hits.truncate(k);
    }
    hits.sort_by(RankedHit::cmp_rank);
    hits
}

/// Exhaustive kNN over a slice of items.
pub fn brute_force(items: &[(PrototypeId, Descriptor)], q: &Descriptor, k: usize) -> Result<Vec<RankedHit>, VectorError> {
    let mut hits = Vec::with_capacity(items.len());
    for (id, d) in items {
        hits.push(RankedHit {
            prototype_id: *id,
            distance: vector::distance(q, d)?,
        });
    }
    Ok(top_k(hits, k.max(1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_items(n: usize, dim: usize, seed: u64) -> Vec<(PrototypeId, Descriptor)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                (i as PrototypeId, Descriptor::euclidean(v).unwrap())
            })
            .collect()
    }

    fn query(dim: usize, rng: &mut ChaCha8Rng) -> Descriptor {
        Descriptor::euclidean((0..dim).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
    }

    fn small_params(seed: u64) -> ForestParams {
        ForestParams {
            n_trees: 10,
            leaf_capacity: Some(4),
            seed,
        }
    }

    #[test]
    fn single_item_is_always_found() {
        let items = gaussian_items(1, 5, 1);
        let f = AnnForest::build(&items, ForestParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for budget in [SearchBudget::Nodes(1), SearchBudget::Unbounded] {
            let hits = f.search(&query(5, &mut rng), 3, budget).unwrap();
            assert_eq!(hits.len(), 1);
            assert_eq!(hits[0].prototype_id, 0);
        }
    }

    #[test]
    fn build_is_deterministic() {
        let items = gaussian_items(300, 8, 3);
        let a = AnnForest::build(&items, small_params(9)).unwrap();
        let b = AnnForest::build(&items, small_params(9)).unwrap();
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let q = query(8, &mut rng);
            assert_eq!(
                a.search(&q, 5, SearchBudget::Nodes(20)).unwrap(),
                b.search(&q, 5, SearchBudget::Nodes(20)).unwrap()
            );
        }
    }

    #[test]
    fn every_item_in_exactly_one_leaf_per_tree() {
        let mut items = gaussian_items(500, 6, 5);
        // duplicates force the fork fallback
        for i in 0..40 {
            items.push((1000 + i, items[0].1.clone()));
        }
        let f = AnnForest::build(&items, small_params(1)).unwrap();
        assert!(f.check_invariants());
    }

    #[test]
    fn build_errors() {
        assert!(matches!(AnnForest::build(&[], ForestParams::default()), Err(IndexError::EmptyIndex)));
        let mixed = vec![
            (1, Descriptor::euclidean(vec![1.0, 2.0]).unwrap()),
            (2, Descriptor::euclidean(vec![1.0]).unwrap()),
        ];
        assert!(matches!(
            AnnForest::build(&mixed, ForestParams::default()),
            Err(IndexError::HeterogeneousItems)
        ));
    }

    #[test]
    fn recall_on_gaussian_data() {
        let items = gaussian_items(1000, 32, 10);
        let f = AnnForest::build(&items, ForestParams::with_seed(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n_queries = 200;
        let mut found = 0;
        for _ in 0..n_queries {
            let q = query(32, &mut rng);
            let truth = brute_force(&items, &q, 1).unwrap();
            let got = f.search(&q, 1, SearchBudget::Nodes(DEFAULT_MAX_NODES)).unwrap();
            found += (got[0].prototype_id == truth[0].prototype_id) as usize;
        }
        let recall = found as f64 / n_queries as f64;
        assert!(recall >= 0.95, "recall@1 = {recall}");
    }

    #[test]
    fn add_makes_item_visible() {
        let items = gaussian_items(100, 4, 12);
        let mut f = AnnForest::build(&items, small_params(2)).unwrap();
        let v = Descriptor::euclidean(vec![9.0, 9.0, 9.0, 9.0]).unwrap();
        f.add(500, v.clone()).unwrap();
        let hits = f.search(&v, 1, SearchBudget::Nodes(1)).unwrap();
        assert_eq!(hits[0], RankedHit { prototype_id: 500, distance: 0.0 });
        assert!(matches!(f.add(500, v.clone()), Err(IndexError::DuplicateId(500))));
        assert!(matches!(f.add(3, v), Err(IndexError::DuplicateId(3))));
        let short = Descriptor::euclidean(vec![1.0]).unwrap();
        assert!(matches!(f.add(501, short), Err(IndexError::DimensionMismatch { .. })));
    }

    #[test]
    fn overflow_only_store_is_exact() {
        let items = gaussian_items(50, 6, 13);
        let mut f = AnnForest::empty(6, Metric::Euclidean, ForestParams::default());
        for (id, d) in &items {
            f.add(*id, d.clone()).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..50 {
            let q = query(6, &mut rng);
            assert_eq!(f.search(&q, 7, SearchBudget::Nodes(1)).unwrap(), brute_force(&items, &q, 7).unwrap());
        }
    }

    #[test]
    fn search_edge_cases() {
        let items = gaussian_items(10, 3, 15);
        let f = AnnForest::build(&items, small_params(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let q = query(3, &mut rng);
        assert_eq!(f.search(&q, 4, SearchBudget::Unbounded).unwrap(), brute_force(&items, &q, 4).unwrap());
        let all = f.search(&q, 50, SearchBudget::Unbounded).unwrap();
        assert_eq!(all.len(), 10);
        assert!(all.windows(2).all(|w| w[0].cmp_rank(&w[1]) == Ordering::Less));
        let own = f.search(&items[4].1, 1, SearchBudget::Nodes(1000)).unwrap();
        assert_eq!(own[0].distance, 0.0);
        assert!(matches!(f.search(&q, 0, SearchBudget::Unbounded), Err(IndexError::InvalidK)));
        let empty = AnnForest::empty(3, Metric::Euclidean, ForestParams::default());
        assert!(matches!(empty.search(&q, 1, SearchBudget::Unbounded), Err(IndexError::EmptyStore)));
        let wrong = Descriptor::new(vec![0.1, 0.2, 0.7], Metric::JensenShannon).unwrap();
        assert!(matches!(f.search(&wrong, 1, SearchBudget::Unbounded), Err(IndexError::MetricMismatch { .. })));
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let v = Descriptor::euclidean(vec![1.0, 1.0]).unwrap();
        let items: Vec<_> = [7u64, 3, 5].iter().map(|&id| (id, v.clone())).collect();
        let f = AnnForest::build(&items, ForestParams::default()).unwrap();
        let ids: Vec<_> = f.search(&v, 3, SearchBudget::Unbounded).unwrap().iter().map(|h| h.prototype_id).collect();
        assert_eq!(ids, vec![3, 5, 7]);
    }

    #[test]
    fn rebuild_drains_overflow_and_preserves_exact_results() {
        let items = gaussian_items(200, 5, 17);
        let mut f = AnnForest::build(&items[..150], small_params(4)).unwrap();
        for (id, d) in &items[150..] {
            f.add(*id, d.clone()).unwrap();
        }
        let g = f.rebuild(99).unwrap();
        assert_eq!(g.overflow().len(), 0);
        assert_eq!(g.indexed_len(), 200);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for _ in 0..30 {
            let q = query(5, &mut rng);
            assert_eq!(
                f.search(&q, 10, SearchBudget::Unbounded).unwrap(),
                g.search(&q, 10, SearchBudget::Unbounded).unwrap()
            );
        }
        let empty = AnnForest::empty(5, Metric::Euclidean, ForestParams::default());
        assert!(matches!(empty.rebuild(1), Err(IndexError::EmptyStore)));
    }

    #[test]
    fn snapshot_round_trip() {
        let items = gaussian_items(1000, 6, 19);
        let mut f = AnnForest::build(&items, small_params(5)).unwrap();
        let bytes = f.to_snapshot_bytes();
        let g = AnnForest::from_snapshot_bytes(&bytes).unwrap();
        assert_eq!(g.indexed_len(), 1000);
        assert_eq!(g.overflow().len(), 0);
        assert_eq!(g.to_snapshot_bytes(), bytes);
        f.add(5000, Descriptor::euclidean(vec![0.5; 6]).unwrap()).unwrap();
        let g = AnnForest::from_snapshot_bytes(&f.to_snapshot_bytes()).unwrap();
        assert_eq!(g, f);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..100 {
            let q = query(6, &mut rng);
            assert_eq!(
                f.search(&q, 5, SearchBudget::Nodes(30)).unwrap(),
                g.search(&q, 5, SearchBudget::Nodes(30)).unwrap()
            );
        }
    }

    #[test]
    fn truncated_or_flipped_snapshot_is_corrupt() {
        let items = gaussian_items(50, 3, 21);
        let bytes = AnnForest::build(&items, small_params(6)).unwrap().to_snapshot_bytes();
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                AnnForest::from_snapshot_bytes(&bytes[..cut]),
                Err(IndexError::CorruptSnapshot(_))
            ));
        }
        let mut flipped = bytes.clone();
        flipped[40] ^= 0x10;
        assert!(matches!(
            AnnForest::from_snapshot_bytes(&flipped),
            Err(IndexError::CorruptSnapshot(DecodeError::Checksum { .. }))
        ));
    }

    #[test]
    fn budget_parsing() {
        assert_eq!("inf".parse::<SearchBudget>().unwrap(), SearchBudget::Unbounded);
        assert_eq!("250".parse::<SearchBudget>().unwrap(), SearchBudget::Nodes(250));
        assert!("x".parse::<SearchBudget>().is_err());
    }
}
