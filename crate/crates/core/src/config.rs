//! Single run configuration covering every stage of the pipeline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bnn::BnnTrainConfig;
use crate::harness::ClosedLoopConfig;
use crate::meta::MetaConfig;
use crate::plant::CollectSpec;

/// Environment variable that overrides every seed in the config.
pub const SEED_ENV: &str = "ASMPC_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot parse config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{SEED_ENV} must be an unsigned integer, got {0:?}")]
    BadSeedEnv(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train_fraction: 0.75, seed: 2 }
    }
}

/// Pass/fail thresholds used by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalThresholds {
    /// Minimum one-step BFR per state, percent.
    pub min_bfr: f64,
    /// Adapted mean error may exceed the global one by at most this factor.
    pub max_adapted_ratio: f64,
    pub min_containment: f64,
    pub max_violation_fraction: f64,
    /// `‖x(k)‖∞` must stay below `settle_norm` for all `k ≥ settle_from`.
    pub settle_norm: f64,
    pub settle_from: usize,
}

impl Default for EvalThresholds {
    fn default() -> Self {
        Self {
            min_bfr: 85.0,
            max_adapted_ratio: 1.05,
            min_containment: 0.9,
            max_violation_fraction: 0.0,
            settle_norm: 0.2,
            settle_from: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub collect: CollectSpec,
    /// Seed of the second trajectory used only for evaluating adaptation.
    pub heldout_seed: u64,
    pub split: SplitConfig,
    /// Ridge term of the nominal least-squares fit.
    pub ridge: f64,
    pub bnn: BnnTrainConfig,
    pub meta: MetaConfig,
    pub closed_loop: ClosedLoopConfig,
    pub eval: EvalThresholds,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            collect: CollectSpec::default(),
            heldout_seed: 9,
            split: SplitConfig::default(),
            ridge: 1e-8,
            bnn: BnnTrainConfig::default(),
            meta: MetaConfig::default(),
            closed_loop: ClosedLoopConfig::default(),
            eval: EvalThresholds::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Full-length training (30 000 BNN epochs instead of 3 000).
    pub fn paper_scale(mut self) -> Self {
        self.bnn.epochs = 30_000;
        self
    }

    /// Replaces every seed. The held-out trajectory uses `seed + 1`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.collect.seed = seed;
        self.heldout_seed = seed.wrapping_add(1);
        self.split.seed = seed;
        self.bnn.seed = seed;
        self.meta.seed = seed;
        self.closed_loop.seed = seed;
        self
    }

    /// Applies `ASMPC_SEED` when it is set.
    pub fn with_seed_env(self) -> Result<Self, ConfigError> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                let seed = v.trim().parse().map_err(|_| ConfigError::BadSeedEnv(v.clone()))?;
                Ok(self.with_seed(seed))
            }
            Err(_) => Ok(self),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if self.collect.n == 0 || !(self.collect.dt > 0.0) {
            return bad("collect.n must be positive and collect.dt > 0");
        }
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return bad("split.train_fraction must lie in (0, 1)");
        }
        if !(self.ridge >= 0.0) {
            return bad("ridge must be nonnegative");
        }
        if self.bnn.batch_size == 0 || !(self.bnn.lr > 0.0) || !(self.bnn.sigma_obs > 0.0) {
            return bad("bnn.batch_size, bnn.lr and bnn.sigma_obs must be positive");
        }
        if self.meta.window == 0 || self.meta.horizon == 0 {
            return bad("meta.window and meta.horizon must be positive");
        }
        let cl = &self.closed_loop;
        if cl.n_mc < 2 || !(cl.dt > 0.0) || cl.ocp.horizon == 0 {
            return bad("closed_loop.n_mc ≥ 2, closed_loop.dt > 0 and ocp.horizon ≥ 1 required");
        }
        if cl.dt != self.collect.dt {
            return bad("closed_loop.dt must equal collect.dt");
        }
        if cl.ocp.penalty_weights.is_empty() {
            return bad("ocp.penalty_weights must not be empty");
        }
        if cl.bounds.0.iter().any(|b| !(*b > 0.0)) {
            return bad("closed_loop.bounds must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
        // A partial file fills in defaults.
        let partial = RunConfig::from_json(r#"{"bnn": {"epochs": 5}}"#).unwrap();
        assert_eq!(partial.bnn.epochs, 5);
        assert_eq!(partial.meta, MetaConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"meta": {"lr": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"closed_loop": {"ocp": {"Q": 1}}}"#).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_json(r#"{"split": {"train_fraction": 1.5}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"closed_loop": {"n_mc": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"closed_loop": {"dt": 0.2}}"#).is_err());
    }

    #[test]
    fn seed_override_and_scale() {
        let cfg = RunConfig::default().with_seed(42).paper_scale();
        assert_eq!(cfg.collect.seed, 42);
        assert_eq!(cfg.heldout_seed, 43);
        assert_eq!(cfg.closed_loop.seed, 42);
        assert_eq!(cfg.bnn.epochs, 30_000);
    }
}
