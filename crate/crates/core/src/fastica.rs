//! Deflation-based FastICA on whitened data.
//!
//! `run_fastica` whitens its input, extracts components one at a time with
//! the fixed-point rule, and returns them sign-normalized and ordered from
//! least to most Gaussian. Filters are reported both in the whitened domain
//! (`W`, orthonormal columns) and in the raw domain (`X = T W`).

use std::sync::OnceLock;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{
    center_columns, covariance_of, dominant_sign, sym_eig, whitening_transform, SampleBatch,
    WhiteningTransform, DEFAULT_COND_LIMIT,
};

/// Norm under which an update or deflated direction counts as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-14;

/// Degenerate restarts tolerated per component before giving up.
pub const MAX_RESTARTS: usize = 5;

/// Gauss-Hermite nodes used for the Gaussian baselines.
pub const BASELINE_QUADRATURE_NODES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ContrastFunction {
    /// `F(x) = log cosh x`
    #[default]
    LogCosh,
    /// `F(x) = -exp(-x^2 / 2)`
    NegExp,
}

impl ContrastFunction {
    pub fn value(self, x: f64) -> f64 {
        match self {
            Self::LogCosh => {
                let a = x.abs();
                a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
            }
            Self::NegExp => -(-0.5 * x * x).exp(),
        }
    }

    pub fn first_derivative(self, x: f64) -> f64 {
        match self {
            Self::LogCosh => x.tanh(),
            Self::NegExp => x * (-0.5 * x * x).exp(),
        }
    }

    pub fn second_derivative(self, x: f64) -> f64 {
        match self {
            Self::LogCosh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Self::NegExp => (1.0 - x * x) * (-0.5 * x * x).exp(),
        }
    }

    /// `E[F(nu)]` for a standard normal `nu`.
    pub fn gaussian_baseline(self) -> f64 {
        static BASELINES: OnceLock<[f64; 2]> = OnceLock::new();
        let table = BASELINES.get_or_init(|| {
            let rule = gauss_hermite(BASELINE_QUADRATURE_NODES);
            [
                rule.expectation(|x| Self::LogCosh.value(x)),
                rule.expectation(|x| Self::NegExp.value(x)),
            ]
        });
        match self {
            Self::LogCosh => table[0],
            Self::NegExp => table[1],
        }
    }
}

/// Gauss-Hermite rule for the weight `exp(-x^2)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Expectation of `f` under a standard normal.
    pub fn expectation(&self, f: impl Fn(f64) -> f64) -> f64 {
        let sum: f64 = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(std::f64::consts::SQRT_2 * x))
            .sum();
        sum / std::f64::consts::PI.sqrt()
    }
}

/// Nodes from the eigenvalues of the symmetric Jacobi matrix of the
/// Hermite recurrence, each polished by Newton steps on the orthonormal
/// recurrence, which also yields the weights.
pub fn gauss_hermite(n: usize) -> GaussHermite {
    const PIM4: f64 = 0.751_125_544_464_942_5; // pi^(-1/4)
    let jacobi = Array2::from_shape_fn((n, n), |(i, j)| {
        if i.abs_diff(j) == 1 {
            (i.max(j) as f64 / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let guesses = sym_eig(jacobi.view())
        .expect("Jacobi matrix of the Hermite recurrence is well conditioned")
        .values;
    let nf = n as f64;
    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for &guess in guesses.iter() {
        let mut z = guess;
        let mut pp = 1.0;
        for _ in 0..20 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let step = p1 / pp;
            z -= step;
            if step.abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        nodes.push(z);
        weights.push(2.0 / (pp * pp));
    }
    GaussHermite { nodes, weights }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Stop when `|1 - |w_new . w_old|| < tol`.
    pub tol: f64,
    pub max_inner_iters: usize,
    pub rng_seed: u64,
    /// Components extracted beyond `Q`; the `Q` least Gaussian of all
    /// candidates are kept.
    pub extra_candidates: usize,
    pub center: bool,
    pub cond_limit: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_inner_iters: 1000,
            rng_seed: 0,
            extra_candidates: 2,
            center: true,
            cond_limit: DEFAULT_COND_LIMIT,
        }
    }
}

impl SolverOptions {
    /// Early-stopped local solves: `tol = 1e-3`, at most 10 steps.
    pub fn partial() -> Self {
        Self {
            tol: 1e-3,
            max_inner_iters: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::invalid(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_inner_iters == 0 {
            return Err(Error::invalid("max_inner_iters must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct IcaResult {
    /// `C x Q`, orthonormal columns, acts on whitened data.
    pub demixing_orthogonal: Array2<f64>,
    /// `C x Q`, `X = T W`, acts on (centered) raw data.
    pub demixing_raw: Array2<f64>,
    /// Non-increasing.
    pub negentropy_scores: Array1<f64>,
    pub converged: Vec<bool>,
    /// Every extracted direction in extraction order (whitened domain,
    /// before sign normalization).
    pub candidates: Array2<f64>,
    /// Column of `candidates` behind each returned component.
    pub selected: Vec<usize>,
    pub whitening: WhiteningTransform,
    /// Inner iterations spent per candidate.
    pub inner_iterations: Vec<usize>,
}

/// The raw fixed-point update `E[z F'(w^T z)] - E[F''(w^T z)] w`, without
/// normalization.
pub fn fixed_point_update(
    w: ArrayView1<'_, f64>,
    whitened: ArrayView2<'_, f64>,
    contrast: ContrastFunction,
) -> Array1<f64> {
    let n = whitened.nrows() as f64;
    let proj = whitened.dot(&w);
    let mut mean_second = 0.0;
    let g = proj.mapv(|x| {
        mean_second += contrast.second_derivative(x);
        contrast.first_derivative(x)
    });
    mean_second /= n;
    whitened.t().dot(&g) / n - &w * mean_second
}

/// One fixed-point step followed by renormalization.
pub fn fixed_point_step(
    w: ArrayView1<'_, f64>,
    whitened: ArrayView2<'_, f64>,
    contrast: ContrastFunction,
) -> Result<Array1<f64>> {
    if w.len() != whitened.ncols() {
        return Err(Error::invalid(format!(
            "direction has {} entries, data has {} channels",
            w.len(),
            whitened.ncols()
        )));
    }
    normalize(fixed_point_update(w, whitened, contrast))
}

fn normalize(v: Array1<f64>) -> Result<Array1<f64>> {
    let norm = v.dot(&v).sqrt();
    if !(norm >= DEGENERATE_NORM) {
        return Err(Error::DegenerateDirection { norm });
    }
    Ok(v / norm)
}

/// Gram-Schmidt step `w - W W^T w`. The caller renormalizes; a result
/// shorter than [`DEGENERATE_NORM`] is reported as degenerate.
pub fn deflate(w: ArrayView1<'_, f64>, extracted: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    if extracted.ncols() == 0 {
        return Ok(w.to_owned());
    }
    let coeffs = extracted.t().dot(&w);
    let out = &w - &extracted.dot(&coeffs);
    let norm = out.dot(&out).sqrt();
    if norm < DEGENERATE_NORM {
        return Err(Error::DegenerateDirection { norm });
    }
    Ok(out)
}

/// `|mean_t F(w^T z(t)) - E[F(nu)]|`.
pub fn negentropy_score(
    w: ArrayView1<'_, f64>,
    whitened: ArrayView2<'_, f64>,
    contrast: ContrastFunction,
) -> f64 {
    let proj = whitened.dot(&w);
    let mean = proj.iter().map(|&x| contrast.value(x)).sum::<f64>() / proj.len() as f64;
    (mean - contrast.gaussian_baseline()).abs()
}

/// Flips each column so its largest-magnitude entry is positive.
pub fn fix_signs(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut col in out.columns_mut() {
        if dominant_sign(col.view()) < 0.0 {
            col.mapv_inplace(|v| -v);
        }
    }
    out
}

/// Centralized FastICA: whitening, deflation, candidate selection, sign
/// normalization and least-Gaussian-first ordering.
pub fn run_fastica(
    batch: &SampleBatch,
    q: usize,
    contrast: ContrastFunction,
    opts: &SolverOptions,
) -> Result<IcaResult> {
    run_fastica_from(batch.data().view(), q, contrast, opts, None)
}

/// Same as [`run_fastica`], optionally seeding the first `Q` directions from
/// raw-domain filters `init` (`C x Q`) instead of random draws.
pub fn run_fastica_from(
    data: ArrayView2<'_, f64>,
    q: usize,
    contrast: ContrastFunction,
    opts: &SolverOptions,
    init: Option<ArrayView2<'_, f64>>,
) -> Result<IcaResult> {
    opts.validate()?;
    let c = data.ncols();
    if q == 0 || q > c {
        return Err(Error::invalid(format!(
            "component count {q} must lie in 1..={c}"
        )));
    }
    if let Some(init) = &init {
        if init.dim() != (c, q) {
            return Err(Error::invalid(format!(
                "initial filter is {:?}, expected ({c}, {q})",
                init.dim()
            )));
        }
    }

    let cov = covariance_of(data, opts.center)?;
    let whitening = whitening_transform(&cov, opts.cond_limit)?;
    let z = if opts.center {
        whitening.apply(center_columns(data).0.view())
    } else {
        whitening.apply(data)
    };

    let init_whitened = init.map(|x| whitening.inverse().dot(&x));
    let total = (q + opts.extra_candidates).min(c);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.rng_seed);
    let mut candidates = Array2::<f64>::zeros((c, 0));
    let mut converged = Vec::with_capacity(total);
    let mut inner_iterations = Vec::with_capacity(total);

    for m in 0..total {
        let mut restarts = 0;
        let mut start = match &init_whitened {
            Some(w0) if m < q => w0.column(m).to_owned(),
            _ => random_direction(c, &mut rng),
        };
        let (w, ok, iters) = loop {
            match extract_one(start.view(), z.view(), candidates.view(), contrast, opts) {
                Ok(found) => break found,
                Err(Error::DegenerateDirection { .. }) if restarts < MAX_RESTARTS => {
                    restarts += 1;
                    start = random_direction(c, &mut rng);
                }
                Err(Error::DegenerateDirection { .. }) => {
                    return Err(Error::ExtractionFailed {
                        component: m,
                        restarts,
                    })
                }
                Err(e) => return Err(e),
            }
        };
        candidates.push_column(w.view()).expect("column length matches");
        converged.push(ok);
        inner_iterations.push(iters);
    }

    let scores: Vec<f64> = candidates
        .columns()
        .into_iter()
        .map(|w| negentropy_score(w, z.view(), contrast))
        .collect();
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(q);

    let mut w_sel = Array2::zeros((c, q));
    for (dst, &src) in order.iter().enumerate() {
        w_sel.column_mut(dst).assign(&candidates.column(src));
    }
    let mut x = whitening.matrix().dot(&w_sel);
    for (mut xc, mut wc) in x.columns_mut().into_iter().zip(w_sel.columns_mut()) {
        if dominant_sign(xc.view()) < 0.0 {
            xc.mapv_inplace(|v| -v);
            wc.mapv_inplace(|v| -v);
        }
    }

    Ok(IcaResult {
        demixing_orthogonal: w_sel,
        demixing_raw: x,
        negentropy_scores: order.iter().map(|&i| scores[i]).collect(),
        converged: order.iter().map(|&i| converged[i]).collect(),
        candidates,
        selected: order,
        whitening,
        inner_iterations,
    })
}

fn random_direction(c: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    Array1::from_iter((0..c).map(|_| StandardNormal.sample(rng)))
}

/// Inner fixed-point loop for one component. Returns the direction, whether
/// the tolerance was met, and the number of steps taken.
fn extract_one(
    start: ArrayView1<'_, f64>,
    z: ArrayView2<'_, f64>,
    extracted: ArrayView2<'_, f64>,
    contrast: ContrastFunction,
    opts: &SolverOptions,
) -> Result<(Array1<f64>, bool, usize)> {
    let mut w = normalize(deflate(start, extracted)?)?;
    for step in 1..=opts.max_inner_iters {
        let update = fixed_point_update(w.view(), z, contrast);
        let next = normalize(deflate(update.view(), extracted)?)?;
        let change = (1.0 - next.dot(&w).abs()).abs();
        w = next;
        if change < opts.tol {
            return Ok((w, true, step));
        }
    }
    Ok((w, false, opts.max_inner_iters))
}
