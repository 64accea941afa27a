use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::odeint::SolverConfig;

/// Layer widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Dims {
    pub d_t: usize,
    pub d_v: usize,
    pub d_z: usize,
    pub d_e: usize,
    pub d_env: usize,
    pub d_g: usize,
    pub d_h: usize,
    /// Rank of the expert discriminators.
    pub r: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims {
            d_t: 8,
            d_v: 8,
            d_z: 8,
            d_e: 8,
            d_env: 8,
            d_g: 2,
            d_h: 16,
            r: 4,
        }
    }
}

/// Which specific expert serves evaluation batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertSelection {
    Latest,
    /// The expert with the best label-free responsibility (count share plus
    /// reconstruction) for the batch.
    MaxResponsibility,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the contrastive loss.
    pub alpha: f64,
    /// Weight of the reconstruction loss.
    pub beta: f64,
    /// Weight of the dynamics loss.
    pub gamma: f64,
    /// `-log λ` of the expansion prior.
    pub neg_log_lambda: f64,
    /// EMA smoothing of the shared expert.
    pub epsilon: f64,
    /// Contrastive temperature.
    pub xi: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub val_fraction: f64,
    pub use_dpm: bool,
    pub use_shared_expert: bool,
    pub use_env_feature: bool,
    pub expert_selection: ExpertSelection,
    pub max_expansions_per_event: usize,
    /// Roster size when expansion is disabled.
    pub fixed_experts: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Time label used for the future split; `K + 1` when absent.
    pub future_tau: Option<f64>,
    pub solver: SolverConfig,
    pub seed: u64,
    pub dims: Dims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.1,
            beta: 0.1,
            gamma: 1.0,
            neg_log_lambda: 1.0,
            epsilon: 0.99,
            xi: 0.1,
            batch_size: 32,
            learning_rate: 1e-3,
            patience: 5,
            max_epochs: 30,
            val_fraction: 0.1,
            use_dpm: true,
            use_shared_expert: true,
            use_env_feature: true,
            expert_selection: ExpertSelection::Latest,
            max_expansions_per_event: 1,
            fixed_experts: 4,
            grad_clip: 5.0,
            future_tau: None,
            solver: SolverConfig::default(),
            seed: 1,
            dims: Dims::default(),
        }
    }
}

/// Keys accepted by [`TrainConfig::set_param`].
pub const SWEEPABLE: [&str; 9] = [
    "alpha",
    "beta",
    "gamma",
    "neg_log_lambda",
    "epsilon",
    "xi",
    "learning_rate",
    "batch_size",
    "max_epochs",
];

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("{field}: {why}")));
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(name, "must be a finite nonnegative weight");
            }
        }
        if !self.neg_log_lambda.is_finite() {
            return bad("neg_log_lambda", "must be finite");
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad("epsilon", "must be in [0, 1]");
        }
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return bad("xi", "must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size", "must be at least 2");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if self.patience < 1 {
            return bad("patience", "must be at least 1");
        }
        if self.max_epochs < 1 {
            return bad("max_epochs", "must be at least 1");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction", "must be in (0, 1)");
        }
        if self.fixed_experts < 1 {
            return bad("fixed_experts", "must be at least 1");
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip", "must be nonnegative");
        }
        if matches!(self.future_tau, Some(t) if !(t >= crate::dynamics::T0)) {
            return bad("future_tau", "must be at least 1");
        }
        self.solver.validate()?;
        let d = &self.dims;
        if [d.d_t, d.d_v, d.d_z, d.d_e, d.d_env, d.d_g, d.d_h, d.r].contains(&0) {
            return bad("dims", "every width must be positive");
        }
        if d.r >= d.d_z.min(d.d_e) {
            return bad("dims.r", "must be below min(d_z, d_e)");
        }
        if d.d_h < d.d_env {
            return bad("dims.d_h", "must be at least d_env");
        }
        Ok(())
    }

    /// Sets a numeric hyperparameter by name.
    pub fn set_param(&mut self, key: &str, value: f64) -> Result<()> {
        let as_count = |v: f64| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Config(format!(
                    "{key} needs a whole number, got {v}"
                )))
            }
        };
        match key {
            "alpha" => self.alpha = value,
            "beta" => self.beta = value,
            "gamma" => self.gamma = value,
            "neg_log_lambda" => self.neg_log_lambda = value,
            "epsilon" => self.epsilon = value,
            "xi" => self.xi = value,
            "learning_rate" => self.learning_rate = value,
            "batch_size" => self.batch_size = as_count(value)?,
            "max_epochs" => self.max_epochs = as_count(value)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown parameter {key}; expected one of {}",
                    SWEEPABLE.join(", ")
                )))
            }
        }
        self.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        let back = TrainConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_toml_and_unknown_keys() {
        let c = TrainConfig::from_toml("gamma = 2.0\n[dims]\nd_t = 4\n").unwrap();
        assert_eq!(c.gamma, 2.0);
        assert_eq!(c.dims.d_t, 4);
        assert_eq!(c.dims.d_v, 8);
        assert!(TrainConfig::from_toml("gama = 2.0").is_err());
    }

    #[test]
    fn set_param_checks() {
        let mut c = TrainConfig::default();
        c.set_param("gamma", 10.0).unwrap();
        assert_eq!(c.gamma, 10.0);
        assert!(c.set_param("nope", 1.0).is_err());
        assert!(c.set_param("batch_size", 2.5).is_err());
        assert!(c.set_param("alpha", -1.0).is_err());
    }
}
