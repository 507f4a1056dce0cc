//! Location sets, orderings and nearest-neighbor conditioning sets.
//!
//! Every neighbor search in the crate resolves ties by ascending distance
//! first and then by an integer key (the ordered position when building
//! conditioning sets, the stable location id when querying), so results are
//! a total order independent of storage layout.

use std::cmp::Ordering as CmpOrdering;
use std::collections::{BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reference sets at or above this size use a k-d tree instead of a linear scan.
pub const BRUTE_FORCE_LIMIT: usize = 10_000;

const LEAF_SIZE: usize = 16;

/// Rounds `x` to 12 significant digits.
pub fn canonicalize(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { 0.0 } else { x };
    }
    format!("{x:.11e}").parse().unwrap_or(x)
}

fn point_key(p: &[f64]) -> Vec<u64> {
    p.iter()
        .map(|&v| if v == 0.0 { 0.0f64.to_bits() } else { v.to_bits() })
        .collect()
}

/// A set of distinct `dim`-dimensional locations with stable integer ids.
#[derive(Debug, Clone)]
pub struct LocationSet {
    dim: usize,
    coords: Vec<f64>,
    ids: Vec<u64>,
    lookup: HashMap<Vec<u64>, usize>,
}

impl PartialEq for LocationSet {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.coords == other.coords && self.ids == other.ids
    }
}

impl LocationSet {
    /// Builds a set from flat row-major coordinates, labelling points `0..n`.
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("dimension must be >= 1".into()));
        }
        let n = coords.len() / dim;
        Self::with_ids(dim, coords, (0..n as u64).collect())
    }

    pub fn with_ids(dim: usize, coords: Vec<f64>, ids: Vec<u64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("dimension must be >= 1".into()));
        }
        if coords.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "{} coordinates do not split into points of dimension {dim}",
                coords.len()
            )));
        }
        let n = coords.len() / dim;
        if ids.len() != n {
            return Err(Error::Shape(format!("{} ids for {n} points", ids.len())));
        }
        let mut lookup = HashMap::with_capacity(n);
        for (row, p) in coords.chunks_exact(dim).enumerate() {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteCoordinate { row });
            }
            if let Some(first) = lookup.insert(point_key(p), row) {
                return Err(Error::DuplicateLocation { first, second: row });
            }
        }
        Ok(Self { dim, coords, ids, lookup })
    }

    /// Builds a set from a slice of points; all must share one dimension.
    pub fn from_points<P: AsRef<[f64]>>(points: &[P]) -> Result<Self> {
        let dim = points.first().map(|p| p.as_ref().len()).unwrap_or(2);
        let mut coords = Vec::with_capacity(points.len() * dim);
        for p in points {
            let p = p.as_ref();
            if p.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: p.len() });
            }
            coords.extend_from_slice(p);
        }
        Self::new(dim, coords)
    }

    pub fn empty(dim: usize) -> Self {
        Self { dim, coords: Vec::new(), ids: Vec::new(), lookup: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn id(&self, i: usize) -> u64 {
        self.ids[i]
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.coords.chunks_exact(self.dim)
    }

    /// Storage index of the point with exactly these coordinates.
    pub fn index_of(&self, p: &[f64]) -> Option<usize> {
        if p.len() != self.dim {
            return None;
        }
        self.lookup.get(&point_key(p)).copied()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        self.index_of(p).is_some()
    }

    /// Subset in the given storage order; ids are carried over.
    pub fn select(&self, idx: &[usize]) -> LocationSet {
        let mut coords = Vec::with_capacity(idx.len() * self.dim);
        let mut ids = Vec::with_capacity(idx.len());
        let mut lookup = HashMap::with_capacity(idx.len());
        for (row, &i) in idx.iter().enumerate() {
            let p = self.point(i);
            coords.extend_from_slice(p);
            ids.push(self.ids[i]);
            lookup.insert(point_key(p), row);
        }
        LocationSet { dim: self.dim, coords, ids, lookup }
    }

    pub fn permuted(&self, ord: &LocationOrder) -> LocationSet {
        self.select(ord.as_slice())
    }
}

/// Ordering strategies for the reference set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderingStrategy {
    /// Lexicographic on coordinates.
    #[default]
    CoordSort,
    /// Greedy farthest-point ordering seeded at the point nearest the centroid.
    MaxMin,
}

/// A permutation of storage indices: `perm[k]` is the storage index of the
/// `k`-th ordered point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocationOrder {
    perm: Vec<usize>,
}

impl LocationOrder {
    pub fn from_permutation(perm: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::InvalidParameter("not a permutation".into()));
            }
        }
        Ok(Self { perm })
    }

    pub fn identity(n: usize) -> Self {
        Self { perm: (0..n).collect() }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.perm
    }

    /// `inverse()[storage] = ordered position`.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (k, &p) in self.perm.iter().enumerate() {
            inv[p] = k;
        }
        inv
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn lex_cmp(a: &[f64], b: &[f64]) -> CmpOrdering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            CmpOrdering::Equal => continue,
            o => return o,
        }
    }
    CmpOrdering::Equal
}

pub fn order_locations(locs: &LocationSet, strategy: OrderingStrategy) -> Result<LocationOrder> {
    let n = locs.len();
    if n == 0 {
        return Err(Error::EmptyReferenceSet);
    }
    let perm = match strategy {
        OrderingStrategy::CoordSort => {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.sort_by(|&a, &b| {
                lex_cmp(locs.point(a), locs.point(b)).then(locs.id(a).cmp(&locs.id(b)))
            });
            perm
        }
        OrderingStrategy::MaxMin => max_min_order(locs),
    };
    Ok(LocationOrder { perm })
}

fn max_min_order(locs: &LocationSet) -> Vec<usize> {
    let n = locs.len();
    let dim = locs.dim();
    let mut centroid = vec![0.0; dim];
    for p in locs.points() {
        for (c, v) in centroid.iter_mut().zip(p) {
            *c += v / n as f64;
        }
    }
    let better = |d: f64, i: usize, best_d: f64, best: usize, closer: bool| -> bool {
        let ord = if closer { d.total_cmp(&best_d) } else { best_d.total_cmp(&d) };
        ord == CmpOrdering::Less || (ord == CmpOrdering::Equal && locs.id(i) < locs.id(best))
    };
    let mut first = 0;
    let mut first_d = dist2(locs.point(0), &centroid);
    for i in 1..n {
        let d = dist2(locs.point(i), &centroid);
        if better(d, i, first_d, first, true) {
            first = i;
            first_d = d;
        }
    }
    let mut perm = Vec::with_capacity(n);
    let mut taken = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut cur = first;
    for _ in 0..n {
        perm.push(cur);
        taken[cur] = true;
        let pc = locs.point(cur);
        let mut next = usize::MAX;
        let mut next_d = f64::NEG_INFINITY;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let d = dist2(locs.point(i), pc);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if next == usize::MAX || better(min_d[i], i, next_d, next, false) {
                next = i;
                next_d = min_d[i];
            }
        }
        if next == usize::MAX {
            break;
        }
        cur = next;
    }
    perm
}

/// Conditioning sets over ordered positions. `neighbors(i)` lists ordered
/// positions `< i`, nearest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborIndex {
    m: usize,
    offsets: Vec<usize>,
    flat: Vec<usize>,
}

impl NeighborIndex {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.flat[self.offsets[i]..self.offsets[i + 1]]
    }

    pub(crate) fn offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    pub(crate) fn total(&self) -> usize {
        self.flat.len()
    }
}

/// Builds the conditioning sets of `locs` under `ord`. Distances are
/// Euclidean; ties go to the smaller ordered position.
pub fn build_neighbor_index(locs: &LocationSet, ord: &LocationOrder, m: usize) -> NeighborIndex {
    let ordered = locs.permuted(ord);
    let n = ordered.len();
    let mut offsets = Vec::with_capacity(n + 1);
    let mut flat = Vec::with_capacity(n * m);
    offsets.push(0);
    if n >= BRUTE_FORCE_LIMIT && m > 0 {
        let keys: Vec<u64> = (0..n as u64).collect();
        let tree = KdTree::build(ordered.dim(), ordered.coords(), &keys);
        for i in 0..n {
            let found = tree.nearest(ordered.point(i), m, Some(i as u64), false);
            flat.extend(found.into_iter().map(|c| c.index));
            offsets.push(flat.len());
        }
    } else {
        let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
        for i in 0..n {
            let k = m.min(i);
            if k > 0 {
                let pi = ordered.point(i);
                cand.clear();
                cand.extend((0..i).map(|j| (dist2(pi, ordered.point(j)), j)));
                let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
                if k < cand.len() {
                    cand.select_nth_unstable_by(k - 1, cmp);
                    cand.truncate(k);
                }
                cand.sort_unstable_by(cmp);
                flat.extend(cand.iter().map(|c| c.1));
            }
            offsets.push(flat.len());
        }
    }
    NeighborIndex { m, offsets, flat }
}

/// One reference point returned by a neighbor query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    /// Storage index in the reference set.
    pub index: usize,
    pub dist: f64,
}

/// Prediction-time neighbor queries against a fixed reference set.
#[derive(Debug, Clone)]
pub struct NeighborSearcher {
    dim: usize,
    coords: Vec<f64>,
    ids: Vec<u64>,
    tree: Option<KdTree>,
}

impl NeighborSearcher {
    pub fn new(locs: &LocationSet) -> Self {
        let tree = (locs.len() >= BRUTE_FORCE_LIMIT)
            .then(|| KdTree::build(locs.dim(), locs.coords(), locs.ids()));
        Self { dim: locs.dim(), coords: locs.coords().to_vec(), ids: locs.ids().to_vec(), tree }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The `min(m, n)` nearest reference points, ordered by distance then id.
    /// With `exclude_self`, reference points at distance zero are skipped.
    pub fn query(&self, target: &[f64], m: usize, exclude_self: bool) -> Result<Vec<Neighbor>> {
        if target.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: target.len() });
        }
        if m == 0 || self.ids.is_empty() {
            return Ok(Vec::new());
        }
        let found = match &self.tree {
            Some(tree) => tree.nearest(target, m, None, exclude_self),
            None => {
                let mut cand: Vec<Candidate> = self
                    .coords
                    .chunks_exact(self.dim)
                    .enumerate()
                    .map(|(i, p)| Candidate { d2: dist2(p, target), key: self.ids[i], index: i })
                    .filter(|c| !(exclude_self && c.d2 == 0.0))
                    .collect();
                let k = m.min(cand.len());
                if k > 0 && k < cand.len() {
                    cand.select_nth_unstable(k - 1);
                    cand.truncate(k);
                }
                cand.sort_unstable();
                cand
            }
        };
        Ok(found
            .into_iter()
            .map(|c| Neighbor { index: c.index, dist: c.d2.sqrt() })
            .collect())
    }
}

/// Convenience wrapper building a one-off searcher.
pub fn query_neighbors(
    locs: &LocationSet,
    target: &[f64],
    m: usize,
    exclude_self: bool,
) -> Result<Vec<Neighbor>> {
    if locs.is_empty() {
        return Err(Error::EmptyReferenceSet);
    }
    NeighborSearcher::new(locs).query(target, m, exclude_self)
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    d2: f64,
    key: u64,
    index: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == CmpOrdering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> CmpOrdering {
        self.d2.total_cmp(&other.d2).then(self.key.cmp(&other.key))
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize, min_key: u64 },
    Split { axis: usize, value: f64, left: usize, right: usize, min_key: u64 },
}

impl Node {
    fn min_key(&self) -> u64 {
        match *self {
            Node::Leaf { min_key, .. } | Node::Split { min_key, .. } => min_key,
        }
    }
}

/// k-d tree whose nodes remember the smallest key below them, so queries
/// restricted to `key < limit` can skip whole subtrees.
#[derive(Debug, Clone)]
struct KdTree {
    dim: usize,
    coords: Vec<f64>,
    keys: Vec<u64>,
    index: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    fn build(dim: usize, coords: &[f64], keys: &[u64]) -> Self {
        let n = keys.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut tree = KdTree {
            dim,
            coords: Vec::with_capacity(coords.len()),
            keys: Vec::with_capacity(n),
            index: Vec::with_capacity(n),
            nodes: Vec::new(),
        };
        tree.split(coords, keys, &mut order, 0);
        for &i in &order {
            tree.coords.extend_from_slice(&coords[i * dim..(i + 1) * dim]);
            tree.keys.push(keys[i]);
            tree.index.push(i);
        }
        tree
    }

    fn split(&mut self, coords: &[f64], keys: &[u64], order: &mut [usize], start: usize) -> usize {
        let dim = self.dim;
        let id = self.nodes.len();
        let min_key = order.iter().map(|&i| keys[i]).min().unwrap_or(u64::MAX);
        if order.len() <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end: start + order.len(), min_key });
            return id;
        }
        let mut axis = 0;
        let mut widest = f64::NEG_INFINITY;
        for a in 0..dim {
            let (lo, hi) = order.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                let v = coords[i * dim + a];
                (lo.min(v), hi.max(v))
            });
            if hi - lo > widest {
                widest = hi - lo;
                axis = a;
            }
        }
        let mid = order.len() / 2;
        order.select_nth_unstable_by(mid, |&a, &b| {
            coords[a * dim + axis].total_cmp(&coords[b * dim + axis]).then(a.cmp(&b))
        });
        let value = coords[order[mid] * dim + axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0, min_key });
        let (lo, hi) = order.split_at_mut(mid);
        let left = self.split(coords, keys, lo, start);
        let right = self.split(coords, keys, hi, start + mid);
        self.nodes[id] = Node::Split { axis, value, left, right, min_key };
        id
    }

    fn nearest(&self, target: &[f64], k: usize, limit: Option<u64>, exclude_zero: bool) -> Vec<Candidate> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if k > 0 && !self.nodes.is_empty() {
            self.visit(0, target, k, limit, exclude_zero, &mut heap);
        }
        heap.into_sorted_vec()
    }

    fn visit(
        &self,
        node: usize,
        target: &[f64],
        k: usize,
        limit: Option<u64>,
        exclude_zero: bool,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        let n = &self.nodes[node];
        if limit.is_some_and(|l| n.min_key() >= l) {
            return;
        }
        match *n {
            Node::Leaf { start, end, .. } => {
                for s in start..end {
                    let key = self.keys[s];
                    if limit.is_some_and(|l| key >= l) {
                        continue;
                    }
                    let d2 = dist2(&self.coords[s * self.dim..(s + 1) * self.dim], target);
                    if exclude_zero && d2 == 0.0 {
                        continue;
                    }
                    let c = Candidate { d2, key, index: self.index[s] };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("non-empty heap") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split { axis, value, left, right, .. } => {
                let diff = target[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.visit(near, target, k, limit, exclude_zero, heap);
                let bound = diff * diff;
                if heap.len() < k || bound <= heap.peek().expect("non-empty heap").d2 {
                    self.visit(far, target, k, limit, exclude_zero, heap);
                }
            }
        }
    }
}
