//! Sensor network topology: random graphs, per-iteration spanning trees and
//! the edge-list file format.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Consecutive disconnected draws tolerated by [`er_graph`].
pub const MAX_GRAPH_DRAWS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkGraph {
    adjacency: Vec<Vec<bool>>,
    channels: Vec<usize>,
    /// Disconnected draws rejected before this graph was accepted.
    resamples: usize,
}

impl NetworkGraph {
    /// Builds a graph from an undirected edge list. The graph must be connected.
    pub fn from_edges(channels: Vec<usize>, edges: &[(usize, usize)]) -> Result<Self> {
        let k = channels.len();
        if k == 0 {
            return Err(Error::invalid("graph needs at least one node"));
        }
        if channels.contains(&0) {
            return Err(Error::invalid("every node needs at least one channel"));
        }
        let mut adjacency = vec![vec![false; k]; k];
        for &(u, v) in edges {
            if u >= k || v >= k {
                return Err(Error::invalid(format!("edge ({u}, {v}) out of range for {k} nodes")));
            }
            if u == v {
                return Err(Error::invalid(format!("self-loop at node {u}")));
            }
            adjacency[u][v] = true;
            adjacency[v][u] = true;
        }
        let g = Self {
            adjacency,
            channels,
            resamples: 0,
        };
        if !g.is_connected() {
            return Err(Error::Disconnected);
        }
        Ok(g)
    }

    pub fn complete(channels: Vec<usize>) -> Result<Self> {
        let k = channels.len();
        let edges: Vec<_> = (0..k)
            .flat_map(|u| (u + 1..k).map(move |v| (u, v)))
            .collect();
        Self::from_edges(channels, &edges)
    }

    pub fn node_count(&self) -> usize {
        self.channels.len()
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    pub fn total_channels(&self) -> usize {
        self.channels.iter().sum()
    }

    /// Row offset of each node's block in the stacked network-wide filter.
    pub fn channel_offsets(&self) -> Vec<usize> {
        self.channels
            .iter()
            .scan(0, |acc, &m| {
                let o = *acc;
                *acc += m;
                Some(o)
            })
            .collect()
    }

    pub fn resamples(&self) -> usize {
        self.resamples
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adjacency[u][v]
    }

    /// Neighbours of `k` in ascending order.
    pub fn neighbors(&self, k: usize) -> Vec<usize> {
        (0..self.node_count()).filter(|&j| self.adjacency[k][j]).collect()
    }

    /// Edges `(u, v)` with `u < v`, lexicographic.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let k = self.node_count();
        (0..k)
            .flat_map(|u| (u + 1..k).map(move |v| (u, v)))
            .filter(|&(u, v)| self.adjacency[u][v])
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.edges().len()
    }

    pub fn is_connected(&self) -> bool {
        let k = self.node_count();
        let mut seen = vec![false; k];
        let mut stack = vec![0];
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for v in 0..k {
                if self.adjacency[u][v] && !seen[v] {
                    seen[v] = true;
                    count += 1;
                    stack.push(v);
                }
            }
        }
        count == k
    }

    /// `K M_1 ... M_K` header followed by one `u v` line per edge.
    pub fn to_edge_list(&self) -> String {
        let mut out = self.node_count().to_string();
        for m in &self.channels {
            let _ = write!(out, " {m}");
        }
        out.push('\n');
        for (u, v) in self.edges() {
            let _ = writeln!(out, "{u} {v}");
        }
        out
    }

    pub fn from_edge_list(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines
            .next()
            .ok_or_else(|| Error::invalid("empty edge list"))?;
        let fields = parse_numbers(header)?;
        let (&k, channels) = fields
            .split_first()
            .ok_or_else(|| Error::invalid("missing node count"))?;
        if channels.len() != k {
            return Err(Error::invalid(format!(
                "header declares {k} nodes but lists {} channel counts",
                channels.len()
            )));
        }
        let mut edges = Vec::new();
        for line in lines {
            match parse_numbers(line)?.as_slice() {
                &[u, v] => edges.push((u, v)),
                _ => return Err(Error::invalid(format!("bad edge line '{line}'"))),
            }
        }
        Self::from_edges(channels.to_vec(), &edges)
    }

    pub fn write_edge_list(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_edge_list()).map_err(|e| Error::io(path, e))
    }

    pub fn read_edge_list(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_edge_list(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

fn parse_numbers(line: &str) -> Result<Vec<usize>> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| Error::invalid(format!("'{t}' is not a node id or count")))
        })
        .collect()
}

/// Erdős–Rényi graph; disconnected draws are discarded and redrawn with
/// `rng_seed + 1`, `rng_seed + 2`, ...
pub fn er_graph(k: usize, p: f64, channels: Vec<usize>, rng_seed: u64) -> Result<NetworkGraph> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least two nodes, got {k}")));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(format!("edge probability {p} outside (0, 1]")));
    }
    if channels.len() != k {
        return Err(Error::invalid(format!(
            "{} channel counts for {k} nodes",
            channels.len()
        )));
    }
    if channels.contains(&0) {
        return Err(Error::invalid("every node needs at least one channel"));
    }
    for attempt in 0..MAX_GRAPH_DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed.wrapping_add(attempt as u64));
        let mut adjacency = vec![vec![false; k]; k];
        for u in 0..k {
            for v in u + 1..k {
                if rng.random_bool(p) {
                    adjacency[u][v] = true;
                    adjacency[v][u] = true;
                }
            }
        }
        let g = NetworkGraph {
            adjacency,
            channels: channels.clone(),
            resamples: attempt,
        };
        if g.is_connected() {
            return Ok(g);
        }
    }
    Err(Error::GraphGeneration {
        attempts: MAX_GRAPH_DRAWS,
    })
}

/// Spanning tree of the network rooted at the updating node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeTopology {
    root: usize,
    parent: Vec<usize>,
    neighbors: Vec<Vec<usize>>,
    branches: BTreeMap<usize, Vec<usize>>,
    branch_of: Vec<Option<usize>>,
    order: Vec<usize>,
}

impl TreeTopology {
    pub fn root(&self) -> usize {
        self.root
    }

    pub fn node_count(&self) -> usize {
        self.parent.len()
    }

    /// Parent of `k`; the root is its own parent.
    pub fn parent(&self, k: usize) -> usize {
        self.parent[k]
    }

    /// Tree neighbours of `k` in ascending order.
    pub fn neighbors(&self, k: usize) -> &[usize] {
        &self.neighbors[k]
    }

    pub fn root_neighbors(&self) -> &[usize] {
        &self.neighbors[self.root]
    }

    /// `B_nq` for every root neighbour `n`, each sorted ascending.
    pub fn branches(&self) -> &BTreeMap<usize, Vec<usize>> {
        &self.branches
    }

    /// Root neighbour through which `k` reaches the root; `None` for the root.
    pub fn branch_of(&self, k: usize) -> Option<usize> {
        self.branch_of[k]
    }

    /// Nodes in breadth-first order starting at the root.
    pub fn bfs_order(&self) -> &[usize] {
        &self.order
    }

    /// Children of `k`, ascending.
    pub fn children(&self, k: usize) -> Vec<usize> {
        self.neighbors[k]
            .iter()
            .copied()
            .filter(|&c| c != self.root && self.parent[c] == k && c != k)
            .collect()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<_> = (0..self.node_count())
            .filter(|&k| k != self.root)
            .map(|k| (k.min(self.parent[k]), k.max(self.parent[k])))
            .collect();
        e.sort_unstable();
        e
    }
}

/// Breadth-first shortest-path tree rooted at `q`, visiting lower ids first.
pub fn prune_to_tree(graph: &NetworkGraph, q: usize) -> Result<TreeTopology> {
    let k = graph.node_count();
    if q >= k {
        return Err(Error::invalid(format!("root {q} out of range for {k} nodes")));
    }
    let mut parent = vec![usize::MAX; k];
    let mut order = Vec::with_capacity(k);
    let mut queue = VecDeque::from([q]);
    parent[q] = q;
    while let Some(u) = queue.pop_front() {
        order.push(u);
        for v in graph.neighbors(u) {
            if parent[v] == usize::MAX {
                parent[v] = u;
                queue.push_back(v);
            }
        }
    }
    if order.len() != k {
        return Err(Error::invalid("cannot build a spanning tree of a disconnected graph"));
    }

    let mut neighbors = vec![Vec::new(); k];
    for v in 0..k {
        if v != q {
            neighbors[v].push(parent[v]);
            neighbors[parent[v]].push(v);
        }
    }
    for n in &mut neighbors {
        n.sort_unstable();
    }

    // BFS order guarantees the parent is resolved before its children.
    let mut branch_of = vec![None; k];
    for &v in &order[1..] {
        branch_of[v] = Some(if parent[v] == q { v } else { branch_of[parent[v]].unwrap() });
    }
    let mut branches: BTreeMap<usize, Vec<usize>> =
        neighbors[q].iter().map(|&n| (n, Vec::new())).collect();
    for v in 0..k {
        if let Some(b) = branch_of[v] {
            branches.get_mut(&b).unwrap().push(v);
        }
    }

    Ok(TreeTopology {
        root: q,
        parent,
        neighbors,
        branches,
        branch_of,
        order,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn full_probability_gives_complete_graph() {
        let g = er_graph(6, 1.0, vec![2; 6], 3).unwrap();
        assert_eq!(g.edge_count(), 15);
        assert_eq!(g.resamples(), 0);
    }

    #[test]
    fn two_nodes_always_single_edge() {
        for seed in 0..20 {
            let g = er_graph(2, 0.3, vec![1, 1], seed).unwrap();
            assert_eq!(g.edges(), vec![(0, 1)]);
        }
    }

    #[test]
    fn er_graph_is_deterministic_and_symmetric() {
        let a = er_graph(8, 0.5, vec![5; 8], 11).unwrap();
        let b = er_graph(8, 0.5, vec![5; 8], 11).unwrap();
        assert_eq!(a, b);
        for u in 0..8 {
            assert!(!a.has_edge(u, u));
            for v in 0..8 {
                assert_eq!(a.has_edge(u, v), a.has_edge(v, u));
            }
        }
    }

    #[test]
    fn edge_density_matches_probability() {
        let mut total = 0;
        for seed in 0..200 {
            total += er_graph(8, 0.8, vec![5; 8], seed * 7919).unwrap().edge_count();
        }
        let density = total as f64 / (200.0 * 28.0);
        assert!((density - 0.8).abs() < 0.05, "density {density}");
    }

    #[test]
    fn er_graph_rejects_bad_input() {
        assert!(er_graph(1, 0.5, vec![1], 0).is_err());
        assert!(er_graph(3, 0.0, vec![1; 3], 0).is_err());
        assert!(er_graph(3, 0.5, vec![1; 2], 0).is_err());
        assert!(er_graph(3, 0.5, vec![1, 0, 1], 0).is_err());
    }

    #[test]
    fn star_graph_is_its_own_tree() {
        let g = NetworkGraph::from_edges(vec![1; 5], &[(2, 0), (2, 1), (2, 3), (2, 4)]).unwrap();
        let t = prune_to_tree(&g, 2).unwrap();
        assert_eq!(t.edges(), g.edges());
        for (&n, b) in t.branches() {
            assert_eq!(b, &vec![n]);
        }
    }

    #[test]
    fn complete_graph_prunes_to_depth_one() {
        let g = NetworkGraph::complete(vec![1; 4]).unwrap();
        let t = prune_to_tree(&g, 1).unwrap();
        assert_eq!(t.root_neighbors(), &[0, 2, 3]);
        assert!(t.branches().iter().all(|(&n, b)| b == &vec![n]));
        assert!((0..4).all(|k| t.parent(k) == 1));
    }

    #[test]
    fn line_graph_has_one_branch() {
        let g = NetworkGraph::from_edges(vec![1; 4], &[(0, 1), (1, 2), (2, 3)]).unwrap();
        let t = prune_to_tree(&g, 0).unwrap();
        assert_eq!(t.branches().len(), 1);
        assert_eq!(t.branches()[&1], vec![1, 2, 3]);
        assert_eq!(t.bfs_order(), &[0, 1, 2, 3]);
        assert_eq!(t.children(1), vec![2]);
    }

    fn walk_to_root(t: &TreeTopology, mut k: usize) -> Vec<usize> {
        let mut path = vec![k];
        while k != t.root() {
            k = t.parent(k);
            path.push(k);
        }
        path
    }

    #[test]
    fn random_trees_satisfy_invariants() {
        for seed in 0..50 {
            let g = er_graph(8, 0.5, vec![3; 8], seed).unwrap();
            for q in 0..8 {
                let t = prune_to_tree(&g, q).unwrap();
                let edges = t.edges();
                assert_eq!(edges.len(), 7);
                assert!(edges.iter().all(|&(u, v)| g.has_edge(u, v)));
                for n in g.neighbors(q) {
                    assert_eq!(t.parent(n), q);
                }
                let mut covered = BTreeSet::from([q]);
                for (&n, branch) in t.branches() {
                    for &k in branch {
                        assert!(covered.insert(k));
                        let path = walk_to_root(&t, k);
                        assert_eq!(path[path.len() - 2], n);
                        assert_eq!(t.branch_of(k), Some(n));
                    }
                }
                assert_eq!(covered.len(), 8);
            }
        }
    }

    #[test]
    fn disconnected_graph_is_rejected() {
        assert!(matches!(
            NetworkGraph::from_edges(vec![1; 3], &[(0, 1)]),
            Err(Error::Disconnected)
        ));
    }

    #[test]
    fn edge_list_round_trip() {
        let g = er_graph(6, 0.6, vec![5, 4, 3, 5, 2, 1], 9).unwrap();
        let text = g.to_edge_list();
        assert!(text.starts_with("6 5 4 3 5 2 1\n"));
        let h = NetworkGraph::from_edge_list(&text).unwrap();
        assert_eq!(h.edges(), g.edges());
        assert_eq!(h.channels(), g.channels());
    }

    #[test]
    fn edge_list_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.txt");
        let g = NetworkGraph::complete(vec![2, 3]).unwrap();
        g.write_edge_list(&path).unwrap();
        assert_eq!(NetworkGraph::read_edge_list(&path).unwrap(), g);
        assert!(matches!(
            NetworkGraph::read_edge_list(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn malformed_edge_list_is_rejected() {
        assert!(NetworkGraph::from_edge_list("3 1 1\n0 1 2\n").is_err());
        assert!(NetworkGraph::from_edge_list("3 1 1 1\n0 x\n").is_err());
        assert!(NetworkGraph::from_edge_list("").is_err());
    }
}
