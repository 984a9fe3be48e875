//! Invariant checks shared by the property suite and the acceptance run.
#![allow(dead_code)]

use std::collections::BTreeSet;

use districa::engine::{
    compress, districa_iteration, fuse_forward, init_states, split_batch, stack_local, CommTally,
    EngineOptions,
};
use districa::fastica::{fix_signs, run_fastica, ContrastFunction, SolverOptions};
use districa::network::{er_graph, prune_to_tree};
use districa::stats::{covariance_of, sample_covariance, whitening_transform, SampleBatch};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
}

/// Uniform sources through a random square mixing.
pub fn mixed_uniform(rows: usize, cols: usize, seed: u64) -> SampleBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = Array2::from_shape_fn((rows, cols), |_| rng.random::<f64>() - 0.5);
    let a = gaussian(cols, cols, seed ^ 0x9e37_79b9);
    SampleBatch::from_matrix(s.dot(&a.t())).unwrap()
}

pub fn max_dev_from_identity(m: &Array2<f64>) -> f64 {
    let n = m.nrows();
    (m - &Array2::<f64>::eye(n)).iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

pub fn check_whitening(c: usize, n: usize, seed: u64) -> Result<(), TestCaseError> {
    let data = gaussian(n, c, seed).dot(&gaussian(c, c, seed + 1));
    let cov = covariance_of(data.view(), true).unwrap();
    let t = match whitening_transform(&cov, 1e-10) {
        Ok(t) => t,
        Err(_) => return Err(TestCaseError::reject("rank deficient draw")),
    };
    let white = t.matrix().t().dot(cov.values()).dot(t.matrix());
    let dev = max_dev_from_identity(&white);
    prop_assert!(dev < 1e-8, "T^T R T deviates from I by {dev:e}");
    Ok(())
}

pub fn check_orthonormal_demixing(c: usize, q: usize, seed: u64) -> Result<(), TestCaseError> {
    let batch = mixed_uniform(40 * c, c, seed);
    let opts = SolverOptions {
        rng_seed: seed,
        max_inner_iters: 200,
        ..SolverOptions::default()
    };
    let r = run_fastica(&batch, q.min(c), ContrastFunction::LogCosh, &opts).unwrap();
    let w = &r.demixing_orthogonal;
    let dev = max_dev_from_identity(&w.t().dot(w));
    prop_assert!(dev < 1e-8, "W^T W deviates from I by {dev:e}");
    Ok(())
}

pub fn check_local_constraint(k: usize, m: usize, seed: u64, i: usize) -> Result<(), TestCaseError> {
    let q = 2usize.min(m);
    let graph = er_graph(k, 0.6, vec![m; k], seed).unwrap();
    let states = init_states(&graph, q, seed + 1);
    let batch = mixed_uniform(400, k * m, seed + 2);
    let opts = EngineOptions {
        components: q,
        solver: SolverOptions {
            max_inner_iters: 100,
            ..SolverOptions::default()
        },
        ..EngineOptions::default()
    };
    let (_, rec) = districa_iteration(&graph, &states, &batch, i, &opts).unwrap();

    let root = rec.updating_node;
    let tree = prune_to_tree(&graph, root).unwrap();
    let local = split_batch(&graph, &batch).unwrap();
    let compressed = states
        .iter()
        .zip(&local)
        .map(|(s, y)| (s.node_id, compress(s, y).unwrap()))
        .collect();
    let fused = fuse_forward(&tree, &compressed, &mut CommTally::new(k)).unwrap();
    let stacked = stack_local(root, &local[root], &fused).unwrap();
    let r = sample_covariance(&stacked.batch, true).unwrap();
    let x = &rec.stacked_filter;
    let dev = max_dev_from_identity(&x.t().dot(r.values()).dot(x));
    prop_assert!(dev < 1e-6, "local constraint off by {dev:e}");
    Ok(())
}

pub fn check_second_derivative(x: f64) -> Result<(), TestCaseError> {
    let h = 1e-5;
    for f in [ContrastFunction::LogCosh, ContrastFunction::NegExp] {
        let fd = (f.first_derivative(x + h) - f.first_derivative(x - h)) / (2.0 * h);
        let err = (fd - f.second_derivative(x)).abs();
        prop_assert!(err < 1e-6, "{f:?} at {x}: finite difference off by {err:e}");
    }
    Ok(())
}

pub fn check_tree(k: usize, p: f64, seed: u64, root: usize) -> Result<(), TestCaseError> {
    let g = er_graph(k, p, vec![1; k], seed).unwrap();
    let q = root % k;
    let t = prune_to_tree(&g, q).unwrap();
    let edges = t.edges();
    prop_assert_eq!(edges.len(), k - 1);
    for &(u, v) in &edges {
        prop_assert!(g.has_edge(u, v));
    }
    for n in g.neighbors(q) {
        prop_assert!(edges.contains(&(q.min(n), q.max(n))));
    }
    let mut seen = BTreeSet::from([q]);
    for (&n, branch) in t.branches() {
        for &v in branch {
            prop_assert!(seen.insert(v), "node {} in two branches", v);
            let mut w = v;
            while t.parent(w) != q {
                w = t.parent(w);
            }
            prop_assert_eq!(w, n);
        }
    }
    prop_assert_eq!(seen.len(), k);
    prop_assert_eq!(&prune_to_tree(&g, q).unwrap(), &t);
    Ok(())
}

pub fn check_fix_signs(rows: usize, cols: usize, seed: u64) -> Result<(), TestCaseError> {
    let x = gaussian(rows, cols, seed);
    let once = fix_signs(&x);
    prop_assert_eq!(&fix_signs(&once), &once);
    for col in once.columns() {
        let top = col.iter().fold(0.0f64, |m, v| if v.abs() > m.abs() { *v } else { m });
        prop_assert!(top > 0.0);
    }
    Ok(())
}
