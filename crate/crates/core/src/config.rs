//! Experiment configuration (TOML).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::SignPolicy;
use crate::error::{Error, Result};
use crate::fastica::{ContrastFunction, SolverOptions};
use crate::signal::DRIFT_RATIO;
use crate::stats::DEFAULT_COND_LIMIT;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Mode {
    /// Fixed mixing matrix, fixed reference.
    #[default]
    Stationary,
    /// Drifting mixing matrix, reference recomputed every iteration.
    Adaptive,
    /// Stationary with early-stopped local solves.
    PartialSolve,
}

/// Sensors per node: one count for every node, or an explicit list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Channels {
    Uniform(usize),
    PerNode(Vec<usize>),
}

impl Default for Channels {
    fn default() -> Self {
        Self::Uniform(5)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_inner_iters: usize,
    pub extra_candidates: usize,
    pub cond_limit: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let d = SolverOptions::default();
        Self {
            tol: d.tol,
            max_inner_iters: d.max_inner_iters,
            extra_candidates: d.extra_candidates,
            cond_limit: DEFAULT_COND_LIMIT,
        }
    }
}

impl SolverConfig {
    pub fn options(&self, rng_seed: u64) -> SolverOptions {
        SolverOptions {
            tol: self.tol,
            max_inner_iters: self.max_inner_iters,
            rng_seed,
            extra_candidates: self.extra_candidates,
            center: true,
            cond_limit: self.cond_limit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftConfig {
    /// `||Delta||_F / ||A||_F`.
    pub ratio: f64,
    /// Explicit `p(i)`; the three-phase default when absent.
    pub profile: Option<Vec<f64>>,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            ratio: DRIFT_RATIO,
            profile: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceConfig {
    /// Cycles per sample.
    pub sinusoid_frequency: f64,
    pub square_frequency: f64,
    /// Range of the uniform weight of the noise sources.
    pub alpha_range: [f64; 2],
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            sinusoid_frequency: 0.007,
            square_frequency: 0.013,
            alpha_range: [0.2, 0.8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub nodes: usize,
    pub channels: Channels,
    pub components: usize,
    pub samples: usize,
    pub er_probability: f64,
    pub contrast: ContrastFunction,
    pub solver: SolverConfig,
    /// Iterations sharing one sample batch.
    pub reuse: usize,
    pub monte_carlo_runs: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Samples behind the fixed reference and the sensor normalization.
    pub calibration_samples: usize,
    /// Samples behind each per-iteration reference in adaptive mode.
    pub tracking_reference_samples: usize,
    pub drift: DriftConfig,
    pub sources: SourceConfig,
    pub warm_start: bool,
    pub sign_policy: SignPolicy,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Stationary,
            nodes: 5,
            channels: Channels::default(),
            components: 2,
            samples: 10_000,
            er_probability: 0.8,
            contrast: ContrastFunction::LogCosh,
            solver: SolverConfig::default(),
            reuse: 1,
            monte_carlo_runs: 30,
            iterations: 100,
            seed: 0,
            calibration_samples: 100_000,
            tracking_reference_samples: 10_000,
            drift: DriftConfig::default(),
            sources: SourceConfig::default(),
            warm_start: true,
            sign_policy: SignPolicy::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable")
    }

    pub fn channel_counts(&self) -> Vec<usize> {
        match &self.channels {
            Channels::Uniform(m) => vec![*m; self.nodes],
            Channels::PerNode(v) => v.clone(),
        }
    }

    pub fn total_channels(&self) -> usize {
        self.channel_counts().iter().sum()
    }

    /// Largest stacked dimension any node can see (all other nodes adjacent).
    pub fn max_stacked_channels(&self) -> usize {
        let max_m = self.channel_counts().into_iter().max().unwrap_or(0);
        max_m + self.nodes.saturating_sub(1) * self.components
    }

    /// Solver options for the local solves, honouring the mode.
    pub fn local_solver(&self, rng_seed: u64) -> SolverOptions {
        let opts = self.solver.options(rng_seed);
        match self.mode {
            Mode::PartialSolve => SolverOptions {
                tol: SolverOptions::partial().tol,
                max_inner_iters: SolverOptions::partial().max_inner_iters,
                ..opts
            },
            _ => opts,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 {
            return Err(config_err("nodes must be at least 1"));
        }
        let channels = self.channel_counts();
        if channels.len() != self.nodes {
            return Err(config_err(format!(
                "{} channel counts for {} nodes",
                channels.len(),
                self.nodes
            )));
        }
        if channels.contains(&0) {
            return Err(config_err("every node needs at least one sensor"));
        }
        let total: usize = channels.iter().sum();
        if total < 2 {
            return Err(config_err("need at least two sensors for the two target sources"));
        }
        if self.components == 0 || self.components > total {
            return Err(config_err(format!(
                "components must lie in 1..={total}, got {}",
                self.components
            )));
        }
        if self.nodes == 1 && self.components > channels[0] {
            return Err(config_err("components exceed the single node's sensors"));
        }
        let need = 10 * self.max_stacked_channels();
        if self.samples < need {
            return Err(config_err(format!(
                "samples = {} but at least {need} (10 x largest stacked dimension) are required",
                self.samples
            )));
        }
        for (name, n) in [
            ("calibration_samples", self.calibration_samples),
            ("tracking_reference_samples", self.tracking_reference_samples),
        ] {
            if n < 10 * total {
                return Err(config_err(format!("{name} = {n} but at least {} are required", 10 * total)));
            }
        }
        if !(self.er_probability > 0.0 && self.er_probability <= 1.0) {
            return Err(config_err(format!(
                "er_probability {} outside (0, 1]",
                self.er_probability
            )));
        }
        if self.monte_carlo_runs == 0 {
            return Err(config_err("monte_carlo_runs must be at least 1"));
        }
        if self.reuse == 0 {
            return Err(config_err("reuse must be at least 1"));
        }
        if !(self.solver.tol > 0.0) || self.solver.max_inner_iters == 0 {
            return Err(config_err("solver needs tol > 0 and max_inner_iters >= 1"));
        }
        if !(self.drift.ratio >= 0.0 && self.drift.ratio.is_finite()) {
            return Err(config_err("drift ratio must be finite and non-negative"));
        }
        if let Some(p) = &self.drift.profile {
            if self.mode == Mode::Adaptive && p.len() < self.iterations {
                return Err(config_err(format!(
                    "drift profile has {} entries for {} iterations",
                    p.len(),
                    self.iterations
                )));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(config_err("drift profile must be finite"));
            }
        }
        let s = &self.sources;
        for f in [s.sinusoid_frequency, s.square_frequency] {
            if !(f > 0.0 && f < 0.5) {
                return Err(config_err(format!("source frequency {f} outside (0, 0.5)")));
            }
        }
        let [lo, hi] = s.alpha_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(config_err(format!("alpha_range [{lo}, {hi}] not within [0, 1]")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(c.total_channels(), 25);
        assert_eq!(c.max_stacked_channels(), 13);
    }

    #[test]
    fn toml_round_trip() {
        let c = ExperimentConfig {
            mode: Mode::Adaptive,
            channels: Channels::PerNode(vec![5, 4, 3, 5, 5]),
            ..Default::default()
        };
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_text_uses_defaults() {
        let c = ExperimentConfig::from_toml("nodes = 8\nmode = \"partial_solve\"\n").unwrap();
        assert_eq!(c.nodes, 8);
        assert_eq!(c.samples, 10_000);
        let o = c.local_solver(3);
        assert_eq!((o.tol, o.max_inner_iters, o.rng_seed), (1e-3, 10, 3));
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let e = ExperimentConfig::from_toml("nodes = 5\nnode_count = 3\n").unwrap_err();
        assert!(e.is_config_error());
        let e = ExperimentConfig::from_toml("[solver]\ntolerance = 1.0\n").unwrap_err();
        assert!(e.is_config_error());
    }

    #[test]
    fn validation_catches_bad_values() {
        let bad = [
            ExperimentConfig { samples: 100, ..Default::default() },
            ExperimentConfig { monte_carlo_runs: 0, ..Default::default() },
            ExperimentConfig { components: 26, ..Default::default() },
            ExperimentConfig { er_probability: 0.0, ..Default::default() },
            ExperimentConfig { channels: Channels::PerNode(vec![5; 4]), ..Default::default() },
            ExperimentConfig { reuse: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().unwrap_err().is_config_error(), "{c:?}");
        }
    }
}
