//! Interconnection graphs.
//!
//! Orientation: `adjacency[i][j] = 1` means subsystem `j` influences
//! subsystem `i`, so that row `i` of the shift `A·X` aggregates node `i`'s
//! own row together with the rows of its neighbours `N_i`. Self-loops are
//! always present.

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A static directed graph with self-loops and dense binary adjacency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterconnectionGraph {
    n_nodes: usize,
    adjacency: Vec<bool>,
    /// In-neighbours of each node (nodes that influence it), ascending, self excluded.
    neighbors: Vec<Vec<usize>>,
    /// Out-neighbours of each node (nodes it influences), ascending, self excluded.
    reverse: Vec<Vec<usize>>,
}

impl InterconnectionGraph {
    /// Builds a graph from `(i, j)` pairs meaning "`j` influences `i`".
    ///
    /// Self-loops are implied; listing one explicitly, or listing a pair
    /// twice, is rejected.
    pub fn from_edges(n_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::InvalidTopology("graph needs at least one node".into()));
        }
        let mut adjacency = vec![false; n_nodes * n_nodes];
        for i in 0..n_nodes {
            adjacency[i * n_nodes + i] = true;
        }
        for &(i, j) in edges {
            if i >= n_nodes || j >= n_nodes {
                return Err(Error::InvalidTopology(format!(
                    "edge ({i}, {j}) out of range for {n_nodes} nodes"
                )));
            }
            if i == j {
                return Err(Error::InvalidTopology(format!(
                    "edge ({i}, {i}) is a self-loop; self-loops are implicit"
                )));
            }
            let slot = &mut adjacency[i * n_nodes + j];
            if *slot {
                return Err(Error::InvalidTopology(format!("duplicate edge ({i}, {j})")));
            }
            *slot = true;
        }
        Ok(Self::from_dense(n_nodes, adjacency))
    }

    fn from_dense(n_nodes: usize, adjacency: Vec<bool>) -> Self {
        let mut neighbors = vec![Vec::new(); n_nodes];
        let mut reverse = vec![Vec::new(); n_nodes];
        for i in 0..n_nodes {
            for j in 0..n_nodes {
                if i != j && adjacency[i * n_nodes + j] {
                    neighbors[i].push(j);
                    reverse[j].push(i);
                }
            }
        }
        Self {
            n_nodes,
            adjacency,
            neighbors,
            reverse,
        }
    }

    /// Circular graph where each node is influenced by its predecessor and successor.
    pub fn ring_bidirectional(n_nodes: usize) -> Result<Self> {
        if n_nodes < 3 {
            return Err(Error::InvalidTopology(format!(
                "bidirectional ring needs at least 3 nodes, got {n_nodes}"
            )));
        }
        let mut edges = Vec::with_capacity(2 * n_nodes);
        for i in 0..n_nodes {
            edges.push((i, (i + 1) % n_nodes));
            edges.push((i, (i + n_nodes - 1) % n_nodes));
        }
        Self::from_edges(n_nodes, &edges)
    }

    /// One-directional ring: node `i` is influenced by node `i + 1 (mod N)`.
    pub fn ring_directed(n_nodes: usize) -> Result<Self> {
        if n_nodes < 2 {
            return Err(Error::InvalidTopology(format!(
                "directed ring needs at least 2 nodes, got {n_nodes}"
            )));
        }
        let edges: Vec<_> = (0..n_nodes).map(|i| (i, (i + 1) % n_nodes)).collect();
        Self::from_edges(n_nodes, &edges)
    }

    /// Undirected path `0 - 1 - ... - (N-1)`.
    pub fn path(n_nodes: usize) -> Result<Self> {
        let mut edges = Vec::new();
        for i in 1..n_nodes {
            edges.push((i - 1, i));
            edges.push((i, i - 1));
        }
        Self::from_edges(n_nodes, &edges)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.n_nodes + j]
    }

    /// In-neighbours `N_i` (self excluded, ascending).
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Nodes whose local state contains node `j` (self excluded, ascending).
    pub fn influenced_by(&self, j: usize) -> &[usize] {
        &self.reverse[j]
    }

    /// Largest in-neighbourhood size `d`.
    pub fn max_degree(&self) -> usize {
        self.neighbors.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Largest number of local states a single node appears in (column sums of `A`).
    pub fn max_multiplicity(&self) -> usize {
        self.reverse.iter().map(|r| r.len() + 1).max().unwrap_or(1)
    }

    pub fn adjacency_matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.n_nodes, self.n_nodes), |(i, j)| {
            if self.has_edge(i, j) {
                1.0
            } else {
                0.0
            }
        })
    }

    /// `A · states` for an `N × d` matrix.
    pub fn shift(&self, states: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if states.nrows() != self.n_nodes {
            return Err(Error::Shape(format!(
                "shift expects {} rows, got {}",
                self.n_nodes,
                states.nrows()
            )));
        }
        Ok(self.shift_batched(states))
    }

    /// `A · X` applied independently to each consecutive block of `N` rows.
    pub(crate) fn shift_batched(&self, states: ArrayView2<'_, f64>) -> Array2<f64> {
        debug_assert_eq!(states.nrows() % self.n_nodes, 0);
        let mut out = states.to_owned();
        let n = self.n_nodes;
        for block in 0..states.nrows() / n {
            let base = block * n;
            for i in 0..n {
                let mut row = out.row_mut(base + i);
                for &j in &self.neighbors[i] {
                    row += &states.row(base + j);
                }
            }
        }
        out
    }

    /// `Aᵀ · X` per block; the adjoint of [`Self::shift_batched`].
    pub(crate) fn shift_transpose_batched(&self, states: ArrayView2<'_, f64>) -> Array2<f64> {
        debug_assert_eq!(states.nrows() % self.n_nodes, 0);
        let mut out = states.to_owned();
        let n = self.n_nodes;
        for block in 0..states.nrows() / n {
            let base = block * n;
            for j in 0..n {
                let mut row = out.row_mut(base + j);
                for &i in &self.reverse[j] {
                    row += &states.row(base + i);
                }
            }
        }
        out
    }

    /// Nodes within `depth` in-hops of `center`, ordered by hop distance and
    /// ascending within each distance. `closure(i, 1)` is `[i, N_i...]`.
    pub fn closure(&self, center: usize, depth: usize) -> Closure {
        let mut nodes = vec![center];
        let mut layer_sizes = vec![1];
        let mut seen = vec![false; self.n_nodes];
        seen[center] = true;
        let mut frontier = vec![center];
        for _ in 0..depth {
            let mut next: Vec<usize> = frontier
                .iter()
                .flat_map(|&v| self.neighbors[v].iter().copied())
                .filter(|&u| !seen[u])
                .collect();
            next.sort_unstable();
            next.dedup();
            if next.is_empty() {
                break;
            }
            for &u in &next {
                seen[u] = true;
            }
            layer_sizes.push(next.len());
            nodes.extend_from_slice(&next);
            frontier = next;
        }
        Closure {
            center,
            nodes,
            layer_sizes,
        }
    }

    /// Graph induced on `nodes`, relabelled `0..nodes.len()` in the given order.
    pub fn induced(&self, nodes: &[usize]) -> Self {
        let k = nodes.len();
        let mut adjacency = vec![false; k * k];
        for (a, &u) in nodes.iter().enumerate() {
            for (b, &v) in nodes.iter().enumerate() {
                adjacency[a * k + b] = self.has_edge(u, v);
            }
        }
        Self::from_dense(k, adjacency)
    }

    /// Relabels node `i` as `perm[i]`: `A'[perm[i]][perm[j]] = A[i][j]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        validate_permutation(perm, self.n_nodes)?;
        let n = self.n_nodes;
        let mut adjacency = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                adjacency[perm[i] * n + perm[j]] = self.has_edge(i, j);
            }
        }
        Ok(Self::from_dense(n, adjacency))
    }

    /// Partitions nodes by the canonical encoding of their rooted `depth`-hop
    /// induced subgraph. Nodes whose neighbourhood is too symmetric to
    /// canonicalise within the labelling budget get a class of their own.
    pub fn node_equivalence_classes(&self, depth: usize) -> Result<NodeClassPartition> {
        if depth == 0 {
            return Err(Error::InvalidTopology("equivalence depth must be ≥ 1".into()));
        }
        let mut class_of = Vec::with_capacity(self.n_nodes);
        let mut representatives = Vec::new();
        let mut keys: Vec<Option<Vec<u8>>> = Vec::new();
        let mut index: HashMap<Vec<u8>, usize> = HashMap::new();
        for v in 0..self.n_nodes {
            match self.canonical_encoding(v, depth) {
                Some(key) => {
                    let next = representatives.len();
                    let class = *index.entry(key.clone()).or_insert(next);
                    if class == next {
                        representatives.push(v);
                        keys.push(Some(key));
                    }
                    class_of.push(class);
                }
                None => {
                    class_of.push(representatives.len());
                    representatives.push(v);
                    keys.push(None);
                }
            }
        }
        Ok(NodeClassPartition {
            class_of,
            representatives,
            keys,
            depth,
        })
    }

    /// Canonical byte encoding of the rooted `depth`-hop neighbourhood of
    /// `root`: the ball's layer structure and every arc into a node closer
    /// than `depth` hops.
    pub fn canonical_encoding(&self, root: usize, depth: usize) -> Option<Vec<u8>> {
        const LABELLING_BUDGET: u64 = 40_320;

        let closure = self.closure(root, depth);
        let full = self.induced(&closure.nodes);
        let k = closure.nodes.len();
        // In-arcs of the outermost layer are never read by anything inside
        // the ball, so they are left out of the encoding.
        let inner = closure.prefix_len(depth - 1);
        let sub = |a: usize, b: usize| a < inner && full.has_edge(a, b);

        // Group layer members by an isomorphism-invariant signature; only
        // members sharing a signature need to be permuted against each other.
        let signature = |a: usize| -> (usize, usize) {
            let ins = (0..k).filter(|&b| b != a && sub(a, b)).count();
            let outs = (0..k).filter(|&b| b != a && sub(b, a)).count();
            (ins, outs)
        };
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut header = Vec::new();
        let mut offset = 0;
        for &size in &closure.layer_sizes {
            let mut by_sig: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
            for a in offset..offset + size {
                by_sig.entry(signature(a)).or_default().push(a);
            }
            header.push(size as u8);
            for (sig, members) in by_sig {
                header.extend_from_slice(&[members.len() as u8, sig.0 as u8, sig.1 as u8]);
                groups.push(members);
            }
            header.push(0xff);
            offset += size;
        }
        let count: u64 = groups
            .iter()
            .try_fold(1u64, |acc, g| acc.checked_mul(factorial(g.len())?))?;
        if count > LABELLING_BUDGET || k > 255 {
            return None;
        }

        let mut best: Option<Vec<u8>> = None;
        let mut order: Vec<Vec<usize>> = groups.clone();
        enumerate_orders(&mut order, 0, &mut |order| {
            let labels: Vec<usize> = order.iter().flatten().copied().collect();
            let mut bits = Vec::with_capacity(k * k);
            for &a in &labels {
                for &b in &labels {
                    bits.push(sub(a, b) as u8);
                }
            }
            if best.as_ref().is_none_or(|cur| bits < *cur) {
                best = Some(bits);
            }
        });
        let mut key = header;
        key.extend(best.unwrap_or_default());
        Some(key)
    }
}

fn factorial(n: usize) -> Option<u64> {
    (1..=n as u64).try_fold(1u64, |acc, x| acc.checked_mul(x))
}

/// Visits every combination of within-group orderings.
fn enumerate_orders(groups: &mut [Vec<usize>], at: usize, visit: &mut dyn FnMut(&[Vec<usize>])) {
    if at == groups.len() {
        visit(groups);
        return;
    }
    let len = groups[at].len();
    heap_permute(groups, at, len, visit);
}

fn heap_permute(
    groups: &mut [Vec<usize>],
    at: usize,
    k: usize,
    visit: &mut dyn FnMut(&[Vec<usize>]),
) {
    if k <= 1 {
        enumerate_orders(groups, at + 1, visit);
        return;
    }
    for i in 0..k {
        heap_permute(groups, at, k - 1, visit);
        let swap = if k.is_multiple_of(2) { i } else { 0 };
        groups[at].swap(swap, k - 1);
    }
}

pub fn validate_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::InvalidPermutation(format!(
            "expected {n} entries, got {}",
            perm.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::InvalidPermutation(format!("{perm:?} is not a bijection")));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Nodes within a fixed hop distance of a center, ordered by distance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Closure {
    pub center: usize,
    pub nodes: Vec<usize>,
    /// Number of nodes at hop distance 0, 1, 2, ...
    pub layer_sizes: Vec<usize>,
}

impl Closure {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes within `hops` of the center (a prefix of `nodes`).
    pub fn prefix_len(&self, hops: usize) -> usize {
        self.layer_sizes.iter().take(hops + 1).sum()
    }
}

/// Node classes with isomorphic local neighbourhoods.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeClassPartition {
    pub class_of: Vec<usize>,
    pub representatives: Vec<usize>,
    /// Canonical neighbourhood encoding per class; `None` for fallback singletons.
    pub keys: Vec<Option<Vec<u8>>>,
    pub depth: usize,
}

impl NodeClassPartition {
    pub fn num_classes(&self) -> usize {
        self.representatives.len()
    }

    /// One class per node; always sound, never exploits symmetry.
    pub fn singletons(n_nodes: usize) -> Self {
        Self {
            class_of: (0..n_nodes).collect(),
            representatives: (0..n_nodes).collect(),
            keys: vec![None; n_nodes],
            depth: 0,
        }
    }

    /// True when every class of `other` has a canonical encoding also present here.
    pub fn covers(&self, other: &NodeClassPartition) -> bool {
        other
            .keys
            .iter()
            .all(|k| k.is_some() && self.keys.iter().any(|mine| mine == k))
    }
}
