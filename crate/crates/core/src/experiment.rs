//! Monte-Carlo harness: builds a random network and signal model per run,
//! iterates DistrICA against a centralized reference and collects the
//! normalized filter error.

use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Mode};
use crate::engine::{Engine, EngineOptions};
use crate::error::{Error, Result};
use crate::fastica::{run_fastica, ContrastFunction, SolverOptions};
use crate::network::{er_graph, NetworkGraph};
use crate::signal::{
    default_drift_profile, drift_mixing, DriftSchedule, MixingModel, SourceSpec,
};
use crate::stats::SampleBatch;

/// Largest component count for which the aligned error is searched
/// exhaustively.
pub const MAX_ALIGNED_COMPONENTS: usize = 8;

/// `||X - X*||_F^2 / ||X*||_F^2`.
pub fn normalized_error(x: ArrayView2<'_, f64>, x_star: ArrayView2<'_, f64>) -> Result<f64> {
    if x.dim() != x_star.dim() {
        return Err(Error::invalid(format!(
            "filter is {:?}, reference {:?}",
            x.dim(),
            x_star.dim()
        )));
    }
    let den: f64 = x_star.iter().map(|v| v * v).sum();
    if den == 0.0 {
        return Err(Error::InvalidReference);
    }
    let num: f64 = x.iter().zip(x_star).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(num / den)
}

/// Normalized error after the best column permutation and per-column signs.
pub fn aligned_error(x: ArrayView2<'_, f64>, x_star: ArrayView2<'_, f64>) -> Result<f64> {
    let q = x.ncols();
    if q > MAX_ALIGNED_COMPONENTS {
        return Err(Error::invalid(format!(
            "aligned error searches at most {MAX_ALIGNED_COMPONENTS} components, got {q}"
        )));
    }
    let raw = normalized_error(x, x_star)?;
    let den: f64 = x_star.iter().map(|v| v * v).sum();
    // cost[i][j] of matching column i of x with column j of x*, best sign.
    let cost: Vec<Vec<f64>> = (0..q)
        .map(|i| {
            (0..q)
                .map(|j| {
                    let a = x.column(i);
                    let b = x_star.column(j);
                    a.dot(&a) + b.dot(&b) - 2.0 * a.dot(&b).abs()
                })
                .collect()
        })
        .collect();
    let mut best = f64::INFINITY;
    permute(&mut (0..q).collect::<Vec<_>>(), 0, &mut |p| {
        let c: f64 = p.iter().enumerate().map(|(j, &i)| cost[i][j]).sum();
        best = best.min(c);
    });
    Ok((best.max(0.0) / den).min(raw))
}

fn permute(items: &mut [usize], k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, visit);
        items.swap(k, i);
    }
}

/// Centralized FastICA on the full network-wide batch.
pub fn centralized_reference(
    batch: &SampleBatch,
    q: usize,
    contrast: ContrastFunction,
    opts: &SolverOptions,
) -> Result<Array2<f64>> {
    Ok(run_fastica(batch, q, contrast, opts)?.demixing_raw)
}

/// Median; the mean of the two central values for even lengths.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Seeds derived from one run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub run: u64,
    pub graph: u64,
    pub noise: u64,
    pub init: u64,
    pub solver: u64,
    pub reference: u64,
}

impl RunSeeds {
    pub fn derive(run_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
        Self {
            run: run_seed,
            graph: rng.next_u64(),
            noise: rng.next_u64(),
            init: rng.next_u64(),
            solver: rng.next_u64(),
            reference: rng.next_u64(),
        }
    }
}

/// Everything drawn at the start of one Monte-Carlo run.
#[derive(Debug, Clone)]
pub struct RunSetup {
    pub seeds: RunSeeds,
    pub graph: NetworkGraph,
    /// Base model; the sensor normalization is already calibrated.
    pub model: MixingModel,
    pub drift: Option<DriftSchedule>,
    pub calibration: SampleBatch,
}

/// The two targets (sinusoid, square wave) followed by mixed-noise
/// distractors with random weights and random phases for the targets.
pub fn draw_sources<R: Rng + ?Sized>(config: &ExperimentConfig, rng: &mut R) -> Vec<SourceSpec> {
    let s = &config.sources;
    let tau = 2.0 * std::f64::consts::PI;
    let mut specs = vec![
        SourceSpec::Sinusoid {
            frequency: s.sinusoid_frequency,
            phase: rng.random::<f64>() * tau,
        },
        SourceSpec::Square {
            frequency: s.square_frequency,
            phase: rng.random::<f64>() * tau,
        },
    ];
    let [lo, hi] = s.alpha_range;
    for _ in 2..config.total_channels() {
        specs.push(SourceSpec::MixedNoise {
            alpha: lo + (hi - lo) * rng.random::<f64>(),
        });
    }
    specs
}

pub fn setup_run(config: &ExperimentConfig, run: usize) -> Result<RunSetup> {
    config.validate()?;
    let seeds = RunSeeds::derive(config.seed.wrapping_add(run as u64));
    let channels = config.channel_counts();
    let graph = if config.nodes == 1 {
        NetworkGraph::from_edges(channels, &[])?
    } else {
        er_graph(config.nodes, config.er_probability, channels, seeds.graph)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.run);
    let specs = draw_sources(config, &mut rng);
    let mut model = MixingModel::random(specs, seeds.noise, &mut rng)?;
    let calibration = model.sample(config.calibration_samples, 0)?;
    let drift = match config.mode {
        Mode::Adaptive => {
            let profile = config
                .drift
                .profile
                .clone()
                .unwrap_or_else(|| default_drift_profile(config.iterations));
            Some(DriftSchedule::random(
                model.mixing().view(),
                config.drift.ratio,
                profile,
                &mut rng,
            )?)
        }
        _ => None,
    };
    Ok(RunSetup {
        seeds,
        graph,
        model,
        drift,
        calibration,
    })
}

/// Per-iteration values of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub run: usize,
    pub seeds: RunSeeds,
    pub graph_resamples: usize,
    pub epsilon: Vec<f64>,
    pub epsilon_aligned: Vec<f64>,
    pub objective: Vec<f64>,
    pub scalars_fused: Vec<u64>,
    pub scalars_disseminated: Vec<u64>,
    pub wall_time_s: f64,
}

pub fn engine_options(config: &ExperimentConfig, solver_seed: u64) -> EngineOptions {
    EngineOptions {
        components: config.components,
        contrast: config.contrast,
        solver: config.local_solver(solver_seed),
        reuse: config.reuse,
        warm_start: config.warm_start,
        sign_policy: config.sign_policy,
    }
}

/// Runs one Monte-Carlo realization.
pub fn run_single(config: &ExperimentConfig, run: usize) -> Result<RunTrace> {
    let start = Instant::now();
    let setup = setup_run(config, run)?;
    let ref_opts = config.solver.options(setup.seeds.reference);
    let q = config.components;
    let fixed_reference = match config.mode {
        Mode::Adaptive => None,
        _ => Some(centralized_reference(&setup.calibration, q, config.contrast, &ref_opts)?),
    };

    let mut engine = Engine::with_random_init(
        setup.graph.clone(),
        engine_options(config, setup.seeds.solver),
        setup.seeds.init,
    )?;
    let n = config.samples;
    let stream_start = config.calibration_samples as u64;
    let mut trace = RunTrace {
        run,
        seeds: setup.seeds,
        graph_resamples: setup.graph.resamples(),
        epsilon: Vec::with_capacity(config.iterations),
        epsilon_aligned: Vec::with_capacity(config.iterations),
        objective: Vec::with_capacity(config.iterations),
        scalars_fused: Vec::with_capacity(config.iterations),
        scalars_disseminated: Vec::with_capacity(config.iterations),
        wall_time_s: 0.0,
    };

    let mut tracking: Option<(Array2<f64>, Array2<f64>)> = None;
    for i in 0..config.iterations {
        let current = match &setup.drift {
            Some(d) => drift_mixing(&setup.model, d, i)?,
            None => setup.model.clone(),
        };
        let mut provider = |epoch: usize| {
            let mut m = current.clone();
            m.sample(n, stream_start + (epoch * n) as u64)
        };
        let record = engine.step(&mut provider)?;
        let reference = match &fixed_reference {
            Some(r) => r.clone(),
            None => {
                // The profile is flat outside the ramp, so A often repeats.
                match &tracking {
                    Some((a, r)) if a == current.mixing() => r.clone(),
                    _ => {
                        let mut m = current.clone();
                        let cal = m.sample(config.tracking_reference_samples, 0)?;
                        let r = centralized_reference(&cal, q, config.contrast, &ref_opts)?;
                        tracking = Some((current.mixing().clone(), r.clone()));
                        r
                    }
                }
            }
        };
        trace.epsilon.push(normalized_error(record.filter.view(), reference.view())?);
        trace
            .epsilon_aligned
            .push(aligned_error(record.filter.view(), reference.view())?);
        trace.objective.push(record.objective);
        trace.scalars_fused.push(record.tally.scalars_fused);
        trace.scalars_disseminated.push(record.tally.scalars_disseminated);
    }
    trace.wall_time_s = start.elapsed().as_secs_f64();
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedRun {
    pub run: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMetadata {
    pub config: ExperimentConfig,
    pub run_seeds: Vec<RunSeeds>,
    pub graph_resamples: Vec<usize>,
    pub failed_runs: Vec<FailedRun>,
    pub run_wall_time_s: Vec<f64>,
    pub total_wall_time_s: f64,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub epsilon_median: f64,
    pub epsilon_aligned_median: f64,
    pub epsilon_runs: Vec<f64>,
    pub epsilon_aligned_runs: Vec<f64>,
    pub objective: f64,
    pub scalars_fused: u64,
    pub scalars_disseminated: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorTrace {
    /// Indices of the runs that completed, in column order.
    pub runs: Vec<usize>,
    pub rows: Vec<TraceRow>,
    pub metadata: TraceMetadata,
}

impl ErrorTrace {
    pub fn epsilon_median(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.epsilon_median).collect()
    }

    pub fn epsilon_aligned_median(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.epsilon_aligned_median).collect()
    }

    /// First iteration whose median aligned error is below `threshold`.
    pub fn iterations_to(&self, threshold: f64) -> Option<usize> {
        self.rows
            .iter()
            .position(|r| r.epsilon_aligned_median < threshold)
    }
}

/// Combines per-run traces (all of equal length) into median rows.
pub fn aggregate(config: &ExperimentConfig, runs: &[RunTrace], failed: Vec<FailedRun>, total_s: f64) -> ErrorTrace {
    let rows = (0..config.iterations)
        .map(|i| {
            let eps: Vec<f64> = runs.iter().map(|r| r.epsilon[i]).collect();
            let aligned: Vec<f64> = runs.iter().map(|r| r.epsilon_aligned[i]).collect();
            let obj: Vec<f64> = runs.iter().map(|r| r.objective[i]).collect();
            TraceRow {
                iter: i,
                epsilon_median: median(&eps),
                epsilon_aligned_median: median(&aligned),
                epsilon_runs: eps,
                epsilon_aligned_runs: aligned,
                objective: median(&obj),
                scalars_fused: runs[0].scalars_fused[i],
                scalars_disseminated: runs[0].scalars_disseminated[i],
            }
        })
        .collect();
    ErrorTrace {
        runs: runs.iter().map(|r| r.run).collect(),
        rows,
        metadata: TraceMetadata {
            config: config.clone(),
            run_seeds: runs.iter().map(|r| r.seeds).collect(),
            graph_resamples: runs.iter().map(|r| r.graph_resamples).collect(),
            failed_runs: failed,
            run_wall_time_s: runs.iter().map(|r| r.wall_time_s).collect(),
            total_wall_time_s: total_s,
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
    }
}

/// Runs every Monte-Carlo realization on a pool of `jobs` threads
/// (`0` = rayon default). Failed runs are logged and left out of the
/// medians; the call fails only if no run completes.
pub fn run_experiment(config: &ExperimentConfig, jobs: usize) -> Result<ErrorTrace> {
    config.validate()?;
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::NumericalFailure(format!("thread pool: {e}")))?;
    let results: Vec<(usize, Result<RunTrace>)> = pool.install(|| {
        (0..config.monte_carlo_runs)
            .into_par_iter()
            .map(|r| (r, run_single(config, r)))
            .collect()
    });
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    let mut last_err = None;
    for (r, res) in results {
        match res {
            Ok(t) => ok.push(t),
            Err(e) => {
                log::warn!("run {r} failed and is excluded: {e}");
                failed.push(FailedRun {
                    run: r,
                    seed: config.seed.wrapping_add(r as u64),
                    error: e.to_string(),
                });
                last_err = Some(e);
            }
        }
    }
    if ok.is_empty() {
        return Err(last_err.expect("at least one run was attempted"));
    }
    Ok(aggregate(config, &ok, failed, start.elapsed().as_secs_f64()))
}

/// Exact-solve and early-stopped traces of the same runs.
#[derive(Debug, Clone)]
pub struct PartialComparison {
    pub exact: ErrorTrace,
    pub partial: ErrorTrace,
}

impl PartialComparison {
    /// Final median aligned error, partial over exact.
    pub fn final_ratio(&self) -> f64 {
        let last = |t: &ErrorTrace| t.rows.last().map_or(f64::NAN, |r| r.epsilon_aligned_median);
        last(&self.partial) / last(&self.exact)
    }

    pub fn tallies_equal(&self) -> bool {
        self.exact.rows.len() == self.partial.rows.len()
            && self.exact.rows.iter().zip(&self.partial.rows).all(|(a, b)| {
                a.scalars_fused == b.scalars_fused && a.scalars_disseminated == b.scalars_disseminated
            })
    }
}

pub fn compare_partial(config: &ExperimentConfig, jobs: usize) -> Result<PartialComparison> {
    let exact = run_experiment(
        &ExperimentConfig {
            mode: Mode::Stationary,
            ..config.clone()
        },
        jobs,
    )?;
    let partial = run_experiment(
        &ExperimentConfig {
            mode: Mode::PartialSolve,
            ..config.clone()
        },
        jobs,
    )?;
    Ok(PartialComparison { exact, partial })
}
