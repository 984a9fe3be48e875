//! Ground-truth sources, the linear mixing model and its slow drift.
//!
//! Every source sample is a pure function of `(noise_seed, source index, t)`,
//! so consecutive batches line up exactly and any window can be
//! regenerated on demand.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::SampleBatch;

/// `||Delta||_F / ||A||_F` of the drift direction.
pub const DRIFT_RATIO: f64 = 0.005;

/// RNG words consumed per noise sample (three `u64` draws).
const WORDS_PER_SAMPLE: u128 = 6;

const TWO_POW_M53: f64 = 1.0 / (1u64 << 53) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceSpec {
    /// `sin(2 pi f t + phase)`, `f` in cycles per sample.
    Sinusoid { frequency: f64, phase: f64 },
    /// `sign(sin(2 pi f t + phase))`.
    Square { frequency: f64, phase: f64 },
    /// `alpha u(t) + (1 - alpha) n(t)`, `u ~ U[-0.5, 0.5]`, `n ~ N(0, 1)`.
    MixedNoise { alpha: f64 },
}

impl SourceSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Sinusoid { frequency, .. } | Self::Square { frequency, .. } => {
                if !(frequency > 0.0 && frequency < 0.5) {
                    return Err(Error::invalid(format!(
                        "frequency {frequency} outside (0, 0.5)"
                    )));
                }
            }
            Self::MixedNoise { alpha } => {
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }

    /// Factor that brings the source to unit variance.
    pub fn unit_variance_scale(&self) -> f64 {
        match *self {
            Self::Sinusoid { .. } => std::f64::consts::SQRT_2,
            Self::Square { .. } => 1.0,
            Self::MixedNoise { alpha } => {
                1.0 / (alpha * alpha / 12.0 + (1.0 - alpha) * (1.0 - alpha)).sqrt()
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Raw (unscaled) source samples for `t0 .. t0 + n`, one column per spec.
pub fn generate_sources(
    specs: &[SourceSpec],
    n: usize,
    t0: u64,
    rng_seed: u64,
) -> Result<SampleBatch> {
    if n == 0 {
        return Err(Error::invalid("source batch needs at least one sample"));
    }
    if specs.is_empty() {
        return Err(Error::invalid("no sources specified"));
    }
    for s in specs {
        s.validate()?;
    }
    let mut out = Array2::zeros((n, specs.len()));
    let tau = 2.0 * std::f64::consts::PI;
    for (m, spec) in specs.iter().enumerate() {
        let mut col = out.column_mut(m);
        match *spec {
            SourceSpec::Sinusoid { frequency, phase } => {
                for (k, v) in col.iter_mut().enumerate() {
                    let t = (t0 + k as u64) as f64;
                    *v = (tau * frequency * t + phase).sin();
                }
            }
            SourceSpec::Square { frequency, phase } => {
                for (k, v) in col.iter_mut().enumerate() {
                    let t = (t0 + k as u64) as f64;
                    *v = sign((tau * frequency * t + phase).sin());
                }
            }
            SourceSpec::MixedNoise { alpha } => {
                let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
                rng.set_stream(m as u64);
                rng.set_word_pos(t0 as u128 * WORDS_PER_SAMPLE);
                for v in col.iter_mut() {
                    let u = (rng.next_u64() >> 11) as f64 * TWO_POW_M53 - 0.5;
                    // Box-Muller with u1 in (0, 1].
                    let u1 = ((rng.next_u64() >> 11) + 1) as f64 * TWO_POW_M53;
                    let u2 = (rng.next_u64() >> 11) as f64 * TWO_POW_M53;
                    let g = (-2.0 * u1.ln()).sqrt() * (tau * u2).cos();
                    *v = alpha * u + (1.0 - alpha) * g;
                }
            }
        }
    }
    SampleBatch::from_matrix(out)
}

/// Scales each source column to unit variance.
pub fn standardize_sources(specs: &[SourceSpec], batch: SampleBatch) -> Result<SampleBatch> {
    if specs.len() != batch.channels() {
        return Err(Error::invalid(format!(
            "{} specs for {} source channels",
            specs.len(),
            batch.channels()
        )));
    }
    let scales = Array1::from_iter(specs.iter().map(SourceSpec::unit_variance_scale));
    let data = batch.into_data() * scales.view().insert_axis(Axis(0));
    SampleBatch::from_matrix(data)
}

/// `y(t) = diag(normalization) A s(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingModel {
    mixing: Array2<f64>,
    sources: Vec<SourceSpec>,
    /// Frozen after the first call to [`MixingModel::mix_and_normalize`].
    normalization: Option<Array1<f64>>,
    noise_seed: u64,
}

impl MixingModel {
    pub fn new(mixing: Array2<f64>, sources: Vec<SourceSpec>, noise_seed: u64) -> Result<Self> {
        if !mixing.is_square() {
            return Err(Error::invalid("mixing matrix must be square"));
        }
        if mixing.nrows() != sources.len() {
            return Err(Error::invalid(format!(
                "{}x{} mixing matrix for {} sources",
                mixing.nrows(),
                mixing.ncols(),
                sources.len()
            )));
        }
        if mixing.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("mixing matrix has non-finite entries"));
        }
        for s in &sources {
            s.validate()?;
        }
        Ok(Self {
            mixing,
            sources,
            normalization: None,
            noise_seed,
        })
    }

    /// Mixing matrix with i.i.d. standard normal entries.
    pub fn random<R: Rng + ?Sized>(
        sources: Vec<SourceSpec>,
        noise_seed: u64,
        rng: &mut R,
    ) -> Result<Self> {
        let m = sources.len();
        let a = Array2::from_shape_fn((m, m), |_| StandardNormal.sample(rng));
        Self::new(a, sources, noise_seed)
    }

    pub fn mixing(&self) -> &Array2<f64> {
        &self.mixing
    }

    pub fn sources(&self) -> &[SourceSpec] {
        &self.sources
    }

    pub fn normalization(&self) -> Option<&Array1<f64>> {
        self.normalization.as_ref()
    }

    pub fn channels(&self) -> usize {
        self.sources.len()
    }

    /// Unit-variance source samples for `t0 .. t0 + n`.
    pub fn source_batch(&self, n: usize, t0: u64) -> Result<SampleBatch> {
        let raw = generate_sources(&self.sources, n, t0, self.noise_seed)?;
        standardize_sources(&self.sources, raw)
    }

    /// Mixes a source batch. The first call calibrates per-sensor scales so
    /// each output channel has unit sample variance on that batch; later
    /// calls (including on drifted copies) reuse those scales.
    pub fn mix_and_normalize(&mut self, sources: &SampleBatch) -> Result<SampleBatch> {
        if sources.channels() != self.channels() {
            return Err(Error::invalid(format!(
                "model has {} sources, batch has {} channels",
                self.channels(),
                sources.channels()
            )));
        }
        let mixed = sources.data().dot(&self.mixing.t());
        let scale = match &self.normalization {
            Some(s) => s.clone(),
            None => {
                let s = mixed.std_axis(Axis(0), 0.0).mapv(|sd| if sd > 0.0 { 1.0 / sd } else { 1.0 });
                self.normalization = Some(s.clone());
                s
            }
        };
        SampleBatch::from_matrix(mixed * scale.view().insert_axis(Axis(0)))
    }

    /// Sensor observations for `t0 .. t0 + n`.
    pub fn sample(&mut self, n: usize, t0: u64) -> Result<SampleBatch> {
        let s = self.source_batch(n, t0)?;
        self.mix_and_normalize(&s)
    }

    /// Copy with a different mixing matrix, keeping sources, seed and scales.
    pub fn with_mixing(&self, mixing: Array2<f64>) -> Result<Self> {
        if mixing.dim() != self.mixing.dim() {
            return Err(Error::invalid("replacement mixing matrix has the wrong shape"));
        }
        Ok(Self {
            mixing,
            ..self.clone()
        })
    }
}

/// Drift direction `Delta` and the per-iteration profile `p(i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSchedule {
    delta: Array2<f64>,
    profile: Vec<f64>,
}

impl DriftSchedule {
    /// Draws `Delta` with standard normal entries and rescales it so that
    /// `||Delta||_F = ratio * ||A||_F`.
    pub fn random<R: Rng + ?Sized>(
        base: ArrayView2<'_, f64>,
        ratio: f64,
        profile: Vec<f64>,
        rng: &mut R,
    ) -> Result<Self> {
        let raw = Array2::from_shape_fn(base.dim(), |_| StandardNormal.sample(rng));
        Self::scaled(base, raw, ratio, profile)
    }

    /// Rescales an explicit direction to the requested norm ratio.
    pub fn scaled(
        base: ArrayView2<'_, f64>,
        direction: Array2<f64>,
        ratio: f64,
        profile: Vec<f64>,
    ) -> Result<Self> {
        if direction.dim() != base.dim() {
            return Err(Error::invalid("drift direction shape differs from A"));
        }
        let dn = frobenius(direction.view());
        if dn == 0.0 {
            return Err(Error::invalid("drift direction is zero"));
        }
        let delta = direction * (ratio * frobenius(base) / dn);
        Ok(Self { delta, profile })
    }

    pub fn delta(&self) -> &Array2<f64> {
        &self.delta
    }

    pub fn profile(&self) -> &[f64] {
        &self.profile
    }

    pub fn len(&self) -> usize {
        self.profile.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profile.is_empty()
    }
}

/// Zero for the first third, a linear ramp to one over the middle third,
/// one afterwards.
pub fn default_drift_profile(iterations: usize) -> Vec<f64> {
    let third = iterations as f64 / 3.0;
    (0..iterations)
        .map(|i| {
            let i = i as f64;
            if i < third {
                0.0
            } else if i < 2.0 * third {
                (i - third) / third
            } else {
                1.0
            }
        })
        .collect()
}

/// `A + Delta p(i)` applied to the base model (not cumulative).
pub fn drift_mixing(model: &MixingModel, schedule: &DriftSchedule, i: usize) -> Result<MixingModel> {
    let p = *schedule.profile.get(i).ok_or_else(|| {
        Error::invalid(format!(
            "iteration {i} beyond drift profile of length {}",
            schedule.len()
        ))
    })?;
    model.with_mixing(model.mixing() + &(&schedule.delta * p))
}

pub(crate) fn frobenius(m: ArrayView2<'_, f64>) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}
