//! One DistrICA iteration: compress at every node, fuse towards the
//! updating node along a spanning tree, solve the compressed ICA problem
//! there, and push the resulting update blocks back out.

use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fastica::{run_fastica_from, ContrastFunction, IcaResult, SolverOptions};
use crate::network::{prune_to_tree, NetworkGraph, TreeTopology};
use crate::stats::{center_columns, ChannelBlock, SampleBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeState {
    pub node_id: usize,
    /// `M_k x Q` block of the network-wide filter.
    pub filter: Array2<f64>,
}

impl NodeState {
    pub fn channels(&self) -> usize {
        self.filter.nrows()
    }
}

/// Independent standard normal blocks for every node.
pub fn init_states(graph: &NetworkGraph, q: usize, seed: u64) -> Vec<NodeState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    graph
        .channels()
        .iter()
        .enumerate()
        .map(|(node_id, &m)| NodeState {
            node_id,
            filter: Array2::from_shape_fn((m, q), |_| StandardNormal.sample(&mut rng)),
        })
        .collect()
}

/// Vertical stack of the node blocks in node-id order.
pub fn global_filter(states: &[NodeState]) -> Array2<f64> {
    let views: Vec<_> = states.iter().map(|s| s.filter.view()).collect();
    concatenate(Axis(0), &views).expect("node blocks share the column count")
}

/// Splits a network-wide filter back into node blocks.
pub fn states_from_filter(graph: &NetworkGraph, x: ArrayView2<'_, f64>) -> Result<Vec<NodeState>> {
    if x.nrows() != graph.total_channels() {
        return Err(Error::invalid(format!(
            "filter has {} rows, network has {} channels",
            x.nrows(),
            graph.total_channels()
        )));
    }
    Ok(graph
        .channel_offsets()
        .into_iter()
        .zip(graph.channels())
        .enumerate()
        .map(|(node_id, (o, &m))| NodeState {
            node_id,
            filter: x.slice(s![o..o + m, ..]).to_owned(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeTraffic {
    pub fused: u64,
    pub disseminated: u64,
}

/// Scalars put on the air during one iteration.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommTally {
    pub scalars_fused: u64,
    pub scalars_disseminated: u64,
    /// Indexed by sending node.
    pub per_node: Vec<NodeTraffic>,
}

impl CommTally {
    pub fn new(nodes: usize) -> Self {
        Self {
            scalars_fused: 0,
            scalars_disseminated: 0,
            per_node: vec![NodeTraffic::default(); nodes],
        }
    }

    fn charge_fusion(&mut self, sender: usize, scalars: u64) {
        self.scalars_fused += scalars;
        self.per_node[sender].fused += scalars;
    }

    fn charge_dissemination(&mut self, sender: usize, scalars: u64) {
        self.scalars_disseminated += scalars;
        self.per_node[sender].disseminated += scalars;
    }
}

/// A `Q`-channel signal travelling one tree edge towards the root.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionMessage {
    pub from: usize,
    pub to: usize,
    pub payload: Array2<f64>,
}

/// `X_k^T y_k(t)` for every sample.
pub fn compress(state: &NodeState, local: &SampleBatch) -> Result<SampleBatch> {
    if local.channels() != state.channels() {
        return Err(Error::invalid(format!(
            "node {} has {} filter rows but {} channels of data",
            state.node_id,
            state.channels(),
            local.channels()
        )));
    }
    SampleBatch::from_matrix(local.data().dot(&state.filter))
}

/// Leaf-first summation of compressed signals along the tree. Returns the
/// aggregated branch signal received from every root neighbour.
pub fn fuse_forward(
    tree: &TreeTopology,
    compressed: &BTreeMap<usize, SampleBatch>,
    tally: &mut CommTally,
) -> Result<BTreeMap<usize, SampleBatch>> {
    let k = tree.node_count();
    let mut shape = None;
    for node in 0..k {
        let b = compressed
            .get(&node)
            .ok_or_else(|| Error::invalid(format!("no compressed signal for node {node}")))?;
        let dim = (b.samples(), b.channels());
        if *shape.get_or_insert(dim) != dim {
            return Err(Error::invalid("compressed signals differ in shape"));
        }
    }
    let root = tree.root();
    let mut inbox: Vec<Vec<FusionMessage>> = vec![Vec::new(); k];
    // Reverse BFS order: every child has sent before its parent is visited.
    for &node in tree.bfs_order().iter().rev() {
        if node == root {
            continue;
        }
        let mut payload = compressed[&node].data().clone();
        for msg in inbox[node].drain(..) {
            payload += &msg.payload;
        }
        let to = tree.parent(node);
        tally.charge_fusion(node, payload.len() as u64);
        inbox[to].push(FusionMessage {
            from: node,
            to,
            payload,
        });
    }
    inbox[root]
        .drain(..)
        .map(|m| Ok((m.from, SampleBatch::from_matrix(m.payload)?)))
        .collect()
}

/// The updating node's own channels followed by one fused block per
/// neighbour, neighbours in ascending id order.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedLocalBatch {
    pub batch: SampleBatch,
    pub root: usize,
    pub own_channels: usize,
    pub neighbors: Vec<usize>,
}

impl StackedLocalBatch {
    pub fn channels(&self) -> usize {
        self.batch.channels()
    }
}

pub fn stack_local(
    root: usize,
    own: &SampleBatch,
    fused: &BTreeMap<usize, SampleBatch>,
) -> Result<StackedLocalBatch> {
    let n = own.samples();
    let mut views = vec![own.data().view()];
    let mut layout = vec![ChannelBlock {
        node: root,
        channels: own.channels(),
    }];
    for (&nb, b) in fused {
        if b.samples() != n {
            return Err(Error::invalid(format!(
                "neighbour {nb} sent {} samples, node {root} has {n}",
                b.samples()
            )));
        }
        views.push(b.data().view());
        layout.push(ChannelBlock {
            node: nb,
            channels: b.channels(),
        });
    }
    // Row-major so the solver sees the same memory order as an unstacked batch.
    let data = concatenate(Axis(1), &views)
        .expect("row counts checked")
        .as_standard_layout()
        .into_owned();
    Ok(StackedLocalBatch {
        batch: SampleBatch::new(data, layout)?,
        root,
        own_channels: own.channels(),
        neighbors: fused.keys().copied().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionPartition {
    pub own: Array2<f64>,
    pub g_blocks: BTreeMap<usize, Array2<f64>>,
}

/// Splits a stacked filter into the root block and one `G_n` per neighbour.
pub fn partition_solution(
    stacked: &StackedLocalBatch,
    x_tilde: ArrayView2<'_, f64>,
) -> Result<SolutionPartition> {
    if x_tilde.nrows() != stacked.channels() {
        return Err(Error::invalid(format!(
            "stacked filter has {} rows, stacked data {} channels",
            x_tilde.nrows(),
            stacked.channels()
        )));
    }
    let mut offset = 0;
    let mut own = None;
    let mut g_blocks = BTreeMap::new();
    for block in stacked.batch.layout() {
        let rows = x_tilde.slice(s![offset..offset + block.channels, ..]).to_owned();
        offset += block.channels;
        if own.is_none() {
            own = Some(rows);
        } else {
            g_blocks.insert(block.node, rows);
        }
    }
    Ok(SolutionPartition {
        own: own.expect("layout starts with the root block"),
        g_blocks,
    })
}

/// How the sign of each locally extracted component is chosen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignPolicy {
    /// Keep the solver's largest-magnitude-entry convention.
    LargestMagnitude,
    /// Flip a component if its output is negatively correlated with the
    /// output of the current network-wide filter.
    #[default]
    AlignWithCurrent,
}

#[derive(Debug, Clone)]
pub struct LocalSolution {
    pub stacked_filter: Array2<f64>,
    pub partition: SolutionPartition,
    pub ica: IcaResult,
}

/// Local FastICA on the stacked data. `current` is the stacked filter that
/// reproduces the present network-wide output (`[X_q; I; ...; I]`); it is
/// the warm start when given and the sign reference under
/// [`SignPolicy::AlignWithCurrent`].
#[allow(clippy::too_many_arguments)]
pub fn solve_local(
    stacked: &StackedLocalBatch,
    q: usize,
    contrast: ContrastFunction,
    opts: &SolverOptions,
    current: Option<ArrayView2<'_, f64>>,
    warm_start: bool,
    signs: SignPolicy,
    iteration: usize,
) -> Result<LocalSolution> {
    let init = if warm_start { current } else { None };
    let ica = run_fastica_from(stacked.batch.data().view(), q, contrast, opts, init).map_err(
        |e| match e {
            Error::RankDeficient { .. } => Error::SingularCompressedCovariance {
                iteration,
                node: stacked.root,
                source: Box::new(e),
            },
            other => Error::LocalSolve {
                iteration,
                node: stacked.root,
                source: Box::new(other),
            },
        },
    )?;
    let mut x = ica.demixing_raw.clone();
    if let (SignPolicy::AlignWithCurrent, Some(cur)) = (signs, current) {
        // R = T^{-1} T^{-1}, so x^T R c = (T^{-1} x)^T (T^{-1} c).
        let a = ica.whitening.inverse().dot(&x);
        let b = ica.whitening.inverse().dot(&cur);
        for (m, mut col) in x.columns_mut().into_iter().enumerate() {
            if a.column(m).dot(&b.column(m)) < 0.0 {
                col.mapv_inplace(|v| -v);
            }
        }
    }
    let partition = partition_solution(stacked, x.view())?;
    Ok(LocalSolution {
        stacked_filter: x,
        partition,
        ica,
    })
}

/// Root takes its new block, every branch node right-multiplies by its
/// branch's `G_n`. Dissemination is charged one `Q x Q` message per tree edge.
pub fn apply_update(
    states: &mut [NodeState],
    partition: &SolutionPartition,
    tree: &TreeTopology,
    tally: &mut CommTally,
) -> Result<()> {
    let root = tree.root();
    if states.len() != tree.node_count() {
        return Err(Error::invalid("state count differs from tree size"));
    }
    if partition.own.dim() != states[root].filter.dim() {
        return Err(Error::invalid(format!(
            "root block is {:?}, node {root} holds {:?}",
            partition.own.dim(),
            states[root].filter.dim()
        )));
    }
    if partition.g_blocks.keys().ne(tree.branches().keys()) {
        return Err(Error::invalid("update blocks do not match the root's neighbours"));
    }
    let q = states[root].filter.ncols();
    if partition.g_blocks.values().any(|g| g.dim() != (q, q)) {
        return Err(Error::invalid(format!("update blocks must be {q}x{q}")));
    }
    for (n, branch) in tree.branches() {
        let g = partition
            .g_blocks
            .get(n)
            .ok_or_else(|| Error::invalid(format!("no update block for neighbour {n}")))?;
        for &k in branch {
            states[k].filter = states[k].filter.dot(g);
            tally.charge_dissemination(tree.parent(k), g.len() as u64);
        }
    }
    states[root].filter = partition.own.clone();
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineOptions {
    pub components: usize,
    pub contrast: ContrastFunction,
    pub solver: SolverOptions,
    /// Iterations that share one sample batch.
    pub reuse: usize,
    pub warm_start: bool,
    pub sign_policy: SignPolicy,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            components: 2,
            contrast: ContrastFunction::LogCosh,
            solver: SolverOptions::default(),
            reuse: 1,
            warm_start: true,
            sign_policy: SignPolicy::default(),
        }
    }
}

impl EngineOptions {
    pub fn validate(&self) -> Result<()> {
        if self.components == 0 {
            return Err(Error::invalid("need at least one component"));
        }
        if self.reuse == 0 {
            return Err(Error::invalid("batch reuse count must be at least 1"));
        }
        self.solver.validate()
    }
}

#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub iteration: usize,
    pub updating_node: usize,
    /// Network-wide filter after the update.
    pub filter: Array2<f64>,
    pub stacked_filter: Array2<f64>,
    /// `sum_m mean_t F(x_m^T (y(t) - mean))` on the stacked data.
    pub objective: f64,
    pub tally: CommTally,
    /// `N x Q` source estimates extracted at the updating node.
    pub source_estimates: Array2<f64>,
    pub converged: Vec<bool>,
    pub inner_iterations: Vec<usize>,
    pub fresh_batch: bool,
}

/// Splits a network-wide batch into per-node batches.
pub fn split_batch(graph: &NetworkGraph, batch: &SampleBatch) -> Result<Vec<SampleBatch>> {
    if batch.channels() != graph.total_channels() {
        return Err(Error::invalid(format!(
            "batch has {} channels, network has {}",
            batch.channels(),
            graph.total_channels()
        )));
    }
    graph
        .channel_offsets()
        .into_iter()
        .zip(graph.channels())
        .map(|(o, &m)| SampleBatch::from_matrix(batch.data().slice(s![.., o..o + m]).to_owned()))
        .collect()
}

/// Updating node for iteration `i` (zero-based ids).
pub fn updating_node(i: usize, k: usize) -> usize {
    i % k
}

/// One full iteration on a given network-wide batch.
pub fn districa_iteration(
    graph: &NetworkGraph,
    states: &[NodeState],
    batch: &SampleBatch,
    i: usize,
    opts: &EngineOptions,
) -> Result<(Vec<NodeState>, IterationRecord)> {
    opts.validate()?;
    let k = graph.node_count();
    if states.len() != k {
        return Err(Error::invalid(format!("{} node states for {k} nodes", states.len())));
    }
    let q = opts.components;
    let root = updating_node(i, k);
    let tree = prune_to_tree(graph, root)?;
    let local = split_batch(graph, batch)?;

    let mut tally = CommTally::new(k);
    let compressed = states
        .iter()
        .zip(&local)
        .map(|(s, y)| Ok((s.node_id, compress(s, y)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let fused = fuse_forward(&tree, &compressed, &mut tally)?;
    let stacked = stack_local(root, &local[root], &fused)?;

    let mut current = states[root].filter.clone();
    for _ in &stacked.neighbors {
        current.append(Axis(0), Array2::<f64>::eye(q).view()).expect("Q columns");
    }
    let solver = SolverOptions {
        rng_seed: opts.solver.rng_seed.wrapping_add(i as u64),
        ..opts.solver
    };
    let sol = solve_local(
        &stacked,
        q,
        opts.contrast,
        &solver,
        Some(current.view()),
        opts.warm_start,
        opts.sign_policy,
        i,
    )?;

    let mut next = states.to_vec();
    apply_update(&mut next, &sol.partition, &tree, &mut tally)?;

    let source_estimates = stacked.batch.data().dot(&sol.stacked_filter);
    let objective = objective_value(stacked.batch.data().view(), sol.stacked_filter.view(), opts.contrast);
    let record = IterationRecord {
        iteration: i,
        updating_node: root,
        filter: global_filter(&next),
        stacked_filter: sol.stacked_filter,
        objective,
        tally,
        source_estimates,
        converged: sol.ica.converged,
        inner_iterations: sol.ica.inner_iterations,
        fresh_batch: true,
    };
    Ok((next, record))
}

/// `sum_m mean_t F(x_m^T (y(t) - mean))`.
pub fn objective_value(data: ArrayView2<'_, f64>, x: ArrayView2<'_, f64>, contrast: ContrastFunction) -> f64 {
    let out = center_columns(data).0.dot(&x);
    let n = out.nrows() as f64;
    out.columns()
        .into_iter()
        .map(|c| c.iter().map(|&v| contrast.value(v)).sum::<f64>() / n)
        .sum()
}

/// Source of network-wide batches for consecutive sampling epochs.
pub trait BatchProvider {
    fn next_batch(&mut self, epoch: usize) -> Result<SampleBatch>;
}

impl<F: FnMut(usize) -> Result<SampleBatch>> BatchProvider for F {
    fn next_batch(&mut self, epoch: usize) -> Result<SampleBatch> {
        self(epoch)
    }
}

/// Iterates DistrICA, drawing a new batch every `reuse` iterations.
#[derive(Debug, Clone)]
pub struct Engine {
    graph: NetworkGraph,
    states: Vec<NodeState>,
    opts: EngineOptions,
    batch: Option<SampleBatch>,
    iteration: usize,
}

impl Engine {
    pub fn new(graph: NetworkGraph, states: Vec<NodeState>, opts: EngineOptions) -> Result<Self> {
        opts.validate()?;
        if states.len() != graph.node_count() {
            return Err(Error::invalid("one state per node required"));
        }
        for (k, s) in states.iter().enumerate() {
            if s.node_id != k || s.filter.dim() != (graph.channels()[k], opts.components) {
                return Err(Error::invalid(format!("state of node {k} has the wrong shape")));
            }
            if s.filter.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("state of node {k} is not finite")));
            }
        }
        Ok(Self {
            graph,
            states,
            opts,
            batch: None,
            iteration: 0,
        })
    }

    /// Random initial filters drawn from `seed`.
    pub fn with_random_init(graph: NetworkGraph, opts: EngineOptions, seed: u64) -> Result<Self> {
        let states = init_states(&graph, opts.components, seed);
        Self::new(graph, states, opts)
    }

    pub fn graph(&self) -> &NetworkGraph {
        &self.graph
    }

    pub fn states(&self) -> &[NodeState] {
        &self.states
    }

    pub fn filter(&self) -> Array2<f64> {
        global_filter(&self.states)
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn options(&self) -> &EngineOptions {
        &self.opts
    }

    pub fn step(&mut self, provider: &mut impl BatchProvider) -> Result<IterationRecord> {
        let i = self.iteration;
        let fresh = i.is_multiple_of(self.opts.reuse) || self.batch.is_none();
        if fresh {
            self.batch = Some(provider.next_batch(i / self.opts.reuse)?);
        }
        let batch = self.batch.as_ref().expect("batch drawn above");
        let (states, mut record) = districa_iteration(&self.graph, &self.states, batch, i, &self.opts)?;
        record.fresh_batch = fresh;
        self.states = states;
        self.iteration += 1;
        Ok(record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fastica::run_fastica;
    use crate::network::er_graph;
    use crate::signal::{MixingModel, SourceSpec};
    use crate::stats::covariance_of;
    use ndarray::array;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
    }

    fn batch(rows: usize, cols: usize, seed: u64) -> SampleBatch {
        SampleBatch::from_matrix(random_matrix(rows, cols, seed)).unwrap()
    }

    fn max_abs(a: &Array2<f64>) -> f64 {
        a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    #[test]
    fn compress_selector_and_null_filter() {
        let y = batch(10, 4, 1);
        let sel = NodeState {
            node_id: 0,
            filter: array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]],
        };
        assert_eq!(compress(&sel, &y).unwrap().data(), &y.data().slice(s![.., ..2]));
        let zero = NodeState {
            node_id: 0,
            filter: Array2::zeros((4, 2)),
        };
        assert!(compress(&zero, &y).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(compress(&zero, &batch(10, 3, 1)).is_err());
    }

    #[test]
    fn compress_matches_per_sample_product() {
        let y = batch(10, 5, 2);
        let state = NodeState {
            node_id: 3,
            filter: random_matrix(5, 2, 3),
        };
        let out = compress(&state, &y).unwrap();
        for t in 0..10 {
            for m in 0..2 {
                let mut acc = 0.0;
                for c in 0..5 {
                    acc += state.filter[[c, m]] * y.data()[[t, c]];
                }
                assert!((out.data()[[t, m]] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fuse_forward_single_hop() {
        let g = NetworkGraph::complete(vec![1, 1]).unwrap();
        let tree = prune_to_tree(&g, 0).unwrap();
        let leaf = batch(7, 2, 4);
        let compressed = BTreeMap::from([(0, batch(7, 2, 5)), (1, leaf.clone())]);
        let mut tally = CommTally::new(2);
        let fused = fuse_forward(&tree, &compressed, &mut tally).unwrap();
        assert_eq!(fused.len(), 1);
        assert_eq!(fused[&1], leaf);
        assert_eq!(tally.scalars_fused, 14);
        assert_eq!(tally.per_node[1].fused, 14);
    }

    #[test]
    fn fuse_forward_of_zeros_is_zero() {
        let g = er_graph(5, 0.5, vec![1; 5], 1).unwrap();
        let tree = prune_to_tree(&g, 2).unwrap();
        let compressed = (0..5)
            .map(|k| (k, SampleBatch::from_matrix(Array2::zeros((4, 2))).unwrap()))
            .collect();
        let fused = fuse_forward(&tree, &compressed, &mut CommTally::new(5)).unwrap();
        assert!(fused.values().all(|b| b.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn fuse_forward_matches_branch_sums() {
        for seed in 0..10 {
            let g = er_graph(5, 0.4, vec![1; 5], seed).unwrap();
            let q = seed as usize % 5;
            let tree = prune_to_tree(&g, q).unwrap();
            let compressed: BTreeMap<_, _> =
                (0..5).map(|k| (k, batch(6, 2, 100 + k as u64))).collect();
            let mut tally = CommTally::new(5);
            let fused = fuse_forward(&tree, &compressed, &mut tally).unwrap();
            assert_eq!(tally.scalars_fused, 4 * 2 * 6);
            for (&n, out) in &fused {
                // Membership by walking parent pointers.
                let mut expected = Array2::zeros((6, 2));
                for k in 0..5 {
                    let mut v = k;
                    while v != q && tree.parent(v) != q {
                        v = tree.parent(v);
                    }
                    if k != q && v == n {
                        expected += compressed[&k].data();
                    }
                }
                assert!(max_abs(&(out.data() - &expected)) < 1e-12);
            }
        }
    }

    #[test]
    fn fuse_forward_requires_every_node() {
        let g = NetworkGraph::complete(vec![1; 3]).unwrap();
        let tree = prune_to_tree(&g, 0).unwrap();
        let compressed = BTreeMap::from([(0, batch(3, 1, 0)), (1, batch(3, 1, 1))]);
        assert!(fuse_forward(&tree, &compressed, &mut CommTally::new(3)).is_err());
    }

    #[test]
    fn stack_local_layouts() {
        let own = batch(20, 5, 0);
        let alone = stack_local(0, &own, &BTreeMap::new()).unwrap();
        assert_eq!(alone.batch.data(), own.data());

        let fused: BTreeMap<_, _> = [4, 1, 7].iter().map(|&n| (n, batch(20, 2, n as u64))).collect();
        let st = stack_local(3, &own, &fused).unwrap();
        assert_eq!(st.channels(), 11);
        assert_eq!(st.neighbors, vec![1, 4, 7]);
        assert_eq!(st.batch.data().slice(s![.., 5..7]), fused[&1].data());

        let bad = BTreeMap::from([(1, batch(19, 2, 0))]);
        assert!(stack_local(0, &own, &bad).is_err());
    }

    fn line_graph() -> NetworkGraph {
        NetworkGraph::from_edges(vec![2, 3, 2], &[(0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn identity_update_is_fixed_point() {
        let g = line_graph();
        let tree = prune_to_tree(&g, 1).unwrap();
        let states = init_states(&g, 2, 4);
        let part = SolutionPartition {
            own: states[1].filter.clone(),
            g_blocks: BTreeMap::from([(0, Array2::eye(2)), (2, Array2::eye(2))]),
        };
        let mut next = states.clone();
        let mut tally = CommTally::new(3);
        apply_update(&mut next, &part, &tree, &mut tally).unwrap();
        assert_eq!(next, states);
        assert_eq!(tally.scalars_disseminated, 2 * 4);
        assert_eq!(tally.per_node[1].disseminated, 8);
    }

    #[test]
    fn zero_update_block_annihilates_branch() {
        let g = line_graph();
        let tree = prune_to_tree(&g, 0).unwrap();
        let mut states = init_states(&g, 2, 5);
        let part = SolutionPartition {
            own: states[0].filter.clone(),
            g_blocks: BTreeMap::from([(1, Array2::zeros((2, 2)))]),
        };
        let mut tally = CommTally::new(3);
        apply_update(&mut states, &part, &tree, &mut tally).unwrap();
        assert!(states[1].filter.iter().chain(states[2].filter.iter()).all(|&v| v == 0.0));
        // Relayed once by the root and once by node 1.
        assert_eq!(tally.per_node[0].disseminated, 4);
        assert_eq!(tally.per_node[1].disseminated, 4);
    }

    #[test]
    fn apply_update_rejects_mismatched_partition() {
        let g = line_graph();
        let tree = prune_to_tree(&g, 0).unwrap();
        let mut states = init_states(&g, 2, 5);
        let part = SolutionPartition {
            own: states[0].filter.clone(),
            g_blocks: BTreeMap::from([(2, Array2::eye(2))]),
        };
        let before = states.clone();
        assert!(apply_update(&mut states, &part, &tree, &mut CommTally::new(3)).is_err());
        assert_eq!(states, before);
    }

    #[test]
    fn global_filter_stacks_blocks() {
        let g = line_graph();
        let states = init_states(&g, 2, 6);
        let x = global_filter(&states);
        assert_eq!(x.nrows(), 7);
        assert_eq!(x.slice(s![2..5, ..]), states[1].filter);
        assert_eq!(states_from_filter(&g, x.view()).unwrap(), states);
        let zero = vec![NodeState {
            node_id: 0,
            filter: Array2::zeros((3, 2)),
        }];
        assert_eq!(global_filter(&zero), Array2::<f64>::zeros((3, 2)));
    }

    fn opts(q: usize) -> EngineOptions {
        EngineOptions {
            components: q,
            ..EngineOptions::default()
        }
    }

    #[test]
    fn stacked_output_equals_network_output() {
        for q in 0..3 {
            let g = NetworkGraph::complete(vec![2, 2, 2]).unwrap();
            let states = init_states(&g, 1, 7);
            let y = batch(50, 6, 8);
            let (next, rec) = districa_iteration(&g, &states, &y, q, &opts(1)).unwrap();
            assert_eq!(rec.updating_node, q);
            let network = y.data().dot(&global_filter(&next));
            assert!(max_abs(&(&network - &rec.source_estimates)) < 1e-10);
        }
    }

    #[test]
    fn local_constraint_and_comm_counts() {
        let g = er_graph(5, 0.6, vec![5; 5], 3).unwrap();
        let states = init_states(&g, 2, 1);
        let y = batch(2000, 25, 9);
        for i in 0..5 {
            let (_, rec) = districa_iteration(&g, &states, &y, i, &opts(2)).unwrap();
            assert_eq!(rec.tally.scalars_fused, 4 * 2 * 2000);
            assert_eq!(rec.tally.scalars_disseminated, 4 * 4);
            let tree = prune_to_tree(&g, i).unwrap();
            let local = split_batch(&g, &y).unwrap();
            let compressed = states
                .iter()
                .zip(&local)
                .map(|(s, b)| (s.node_id, compress(s, b).unwrap()))
                .collect();
            let fused = fuse_forward(&tree, &compressed, &mut CommTally::new(5)).unwrap();
            let st = stack_local(i, &local[i], &fused).unwrap();
            let r = covariance_of(st.batch.data().view(), true).unwrap();
            let c = rec.stacked_filter.t().dot(r.values()).dot(&rec.stacked_filter);
            assert!(max_abs(&(c - Array2::<f64>::eye(2))) < 1e-6);
        }
    }

    #[test]
    fn single_node_reduces_to_fastica() {
        let g = NetworkGraph::from_edges(vec![4], &[]).unwrap();
        let y = batch(3000, 4, 10);
        let o = EngineOptions {
            warm_start: false,
            sign_policy: SignPolicy::LargestMagnitude,
            ..opts(2)
        };
        let states = init_states(&g, 2, 0);
        let (next, rec) = districa_iteration(&g, &states, &y, 0, &o).unwrap();
        let central = run_fastica(&y, 2, o.contrast, &o.solver).unwrap();
        assert_eq!(global_filter(&next), central.demixing_raw);
        assert_eq!(rec.tally, CommTally::new(1));
    }

    #[test]
    fn reuse_draws_new_batch_every_r_iterations() {
        let g = line_graph();
        let o = EngineOptions { reuse: 3, ..opts(2) };
        let mut engine = Engine::with_random_init(g, o, 0).unwrap();
        let mut epochs = Vec::new();
        let mut provider = |epoch: usize| {
            epochs.push(epoch);
            Ok(batch(500, 7, epoch as u64))
        };
        let fresh: Vec<bool> = (0..7).map(|_| engine.step(&mut provider).unwrap().fresh_batch).collect();
        assert_eq!(fresh, [true, false, false, true, false, false, true]);
        assert_eq!(epochs, [0, 1, 2]);
    }

    #[test]
    fn line_network_recovers_targets() {
        let specs = vec![
            SourceSpec::Sinusoid { frequency: 0.007, phase: 0.0 },
            SourceSpec::Square { frequency: 0.013, phase: 0.0 },
            SourceSpec::MixedNoise { alpha: 0.3 },
            SourceSpec::MixedNoise { alpha: 0.5 },
            SourceSpec::MixedNoise { alpha: 0.7 },
            SourceSpec::MixedNoise { alpha: 0.4 },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut model = MixingModel::random(specs, 5, &mut rng).unwrap();
        let g = NetworkGraph::from_edges(vec![2, 2, 2], &[(0, 1), (1, 2)]).unwrap();
        let mut engine = Engine::with_random_init(g, opts(2), 3).unwrap();
        let n = 5000;
        let mut provider = |epoch: usize| model.sample(n, (epoch * n) as u64);
        let mut rec = None;
        for _ in 0..9 {
            rec = Some(engine.step(&mut provider).unwrap());
        }
        let rec = rec.unwrap();
        let s = model.source_batch(n, 8 * n as u64).unwrap();
        let corr = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
            let a = &a - a.mean().unwrap();
            let b = &b - b.mean().unwrap();
            (a.dot(&b) / (a.dot(&a) * b.dot(&b)).sqrt()).abs()
        };
        for target in 0..2 {
            let best = (0..2)
                .map(|m| corr(rec.source_estimates.column(m), s.data().column(target)))
                .fold(0.0, f64::max);
            assert!(best > 0.9, "source {target}: {best}");
        }
    }

    #[test]
    fn constraint_count_is_below_parameter_count() {
        for q in 1..=6usize {
            let constraints = q * (q + 1) / 2;
            if q == 1 {
                assert_eq!(constraints, q * q);
            } else {
                assert!(constraints < q * q);
            }
        }
    }
}
