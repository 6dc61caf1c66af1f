//! Experiment configuration: a TOML document validated field by field,
//! from which every component of a run is built.

use crate::cost::{ConstraintMap, CostSpec, PenaltySpec, SaturationSpec};
use crate::dynamics::{CartPole, CartPoleParams, CARTPOLE_DIM};
use crate::matrix::Mat;
use crate::net::{NetConfig, NetParams};
use crate::rollout::{FbsdeProblem, RolloutConfig};
use crate::scheduler::SchedulerConfig;
use crate::trainer::{AdamConfig, LrSchedule, TrainConfig, TrainSession};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config field `{field}`: {message}")]
    Field { field: String, message: String },
}

fn field_err(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsSection {
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub pole_length: f64,
    #[serde(default = "default_gravity")]
    pub gravity: f64,
    #[serde(default = "default_one")]
    pub noise_scale: f64,
}

fn default_gravity() -> f64 {
    9.81
}

fn default_one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub q_diag: Vec<f64>,
    /// Control cost matrix, row-major nested arrays.
    pub r: Vec<Vec<f64>>,
    pub target: Vec<f64>,
    pub terminal_q_diag: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSection {
    /// "states" (box on selected components) or "energy".
    pub kind: String,
    #[serde(default)]
    pub indices: Vec<usize>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Penalty ceiling L; zero disables the penalty.
    pub limit: f64,
    pub initial_steepness: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaturationSection {
    pub u_max: Vec<f64>,
    #[serde(default)]
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutSection {
    /// Horizon T in seconds; dt = horizon / steps.
    pub horizon: f64,
    pub steps: usize,
    pub batch: usize,
    #[serde(default = "default_eval_trials")]
    pub eval_trials: usize,
    pub initial_state: Vec<f64>,
}

fn default_eval_trials() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub hidden: usize,
    #[serde(default)]
    pub input_scale: Vec<f64>,
    #[serde(default)]
    pub forget_bias: f64,
    #[serde(default = "default_one")]
    pub value_scale: f64,
    #[serde(default = "default_one")]
    pub output_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSection {
    pub iterations: u64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_clip")]
    pub clip_threshold: f64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    pub seed: u64,
    /// Piecewise-constant schedule: `[[starting iteration, rate], ...]`.
    pub learning_rate: Vec<(u64, f64)>,
    #[serde(default = "default_adam_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_adam_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_epsilon")]
    pub adam_epsilon: f64,
    #[serde(default = "default_max_divergences")]
    pub max_consecutive_divergences: u32,
}

fn default_clip() -> f64 {
    10.0
}

fn default_checkpoint_every() -> u64 {
    500
}

fn default_adam_beta1() -> f64 {
    0.9
}

fn default_adam_beta2() -> f64 {
    0.999
}

fn default_adam_epsilon() -> f64 {
    1e-8
}

fn default_max_divergences() -> u32 {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerSection {
    pub delta: f64,
    pub beta: Option<f64>,
    pub gamma: f64,
    pub gamma_accel: f64,
    pub delta_accel: f64,
    pub check_interval: u64,
    pub max_interval: u64,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        let d = SchedulerConfig::default();
        SchedulerSection {
            delta: d.delta,
            beta: d.beta,
            gamma: d.gamma,
            gamma_accel: d.gamma_accel,
            delta_accel: d.delta_accel,
            check_interval: d.check_interval,
            max_interval: d.max_interval,
        }
    }
}

/// The whole experiment document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dynamics: DynamicsSection,
    pub cost: CostSection,
    pub constraint: ConstraintSection,
    pub saturation: SaturationSection,
    pub rollout: RolloutSection,
    pub network: NetworkSection,
    pub trainer: TrainerSection,
    #[serde(default)]
    pub scheduler: SchedulerSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Validate every field and build the experiment components.
    pub fn build(&self) -> Result<Experiment, ConfigError> {
        let n = CARTPOLE_DIM;

        let cart = CartPoleParams {
            cart_mass: self.dynamics.cart_mass,
            pole_mass: self.dynamics.pole_mass,
            pole_length: self.dynamics.pole_length,
            gravity: self.dynamics.gravity,
            noise_scale: self.dynamics.noise_scale,
        };
        cart.validate().map_err(|m| field_err("dynamics", m))?;
        let model = CartPole::new(cart.clone());

        if self.cost.q_diag.len() != n {
            return Err(field_err("cost.q_diag", format!("must have {n} entries")));
        }
        if self.cost.target.len() != n {
            return Err(field_err("cost.target", format!("must have {n} entries")));
        }
        if self.cost.terminal_q_diag.len() != n {
            return Err(field_err(
                "cost.terminal_q_diag",
                format!("must have {n} entries"),
            ));
        }
        let m_dim = self.cost.r.len();
        if m_dim == 0 || self.cost.r.iter().any(|row| row.len() != m_dim) {
            return Err(field_err("cost.r", "must be a square non-empty matrix"));
        }
        let mut r_flat = Vec::with_capacity(m_dim * m_dim);
        for row in &self.cost.r {
            r_flat.extend_from_slice(row);
        }
        if self.cost.q_diag.iter().any(|&v| v < 0.0)
            || self.cost.terminal_q_diag.iter().any(|&v| v < 0.0)
        {
            return Err(field_err(
                "cost.q_diag",
                "state cost diagonals must be non-negative",
            ));
        }
        let cost = CostSpec::new(
            Mat::diag(&self.cost.q_diag),
            Mat::new(m_dim, m_dim, r_flat),
            self.cost.target.clone(),
            Mat::diag(&self.cost.terminal_q_diag),
        )
        .map_err(|e| field_err("cost.r", e.to_string()))?;

        let map = match self.constraint.kind.as_str() {
            "states" => {
                if self.constraint.indices.is_empty() {
                    return Err(field_err(
                        "constraint.indices",
                        "state constraints need at least one index",
                    ));
                }
                if self.constraint.indices.iter().any(|&i| i >= n) {
                    return Err(field_err(
                        "constraint.indices",
                        format!("indices must be below {n}"),
                    ));
                }
                ConstraintMap::States {
                    indices: self.constraint.indices.clone(),
                }
            }
            "energy" => ConstraintMap::Energy { cart: cart.clone() },
            other => {
                return Err(field_err(
                    "constraint.kind",
                    format!("unknown kind {other:?} (expected \"states\" or \"energy\")"),
                ))
            }
        };
        let penalty = PenaltySpec {
            limit: self.constraint.limit,
            steepness: self.constraint.initial_steepness,
            lower: self.constraint.lower.clone(),
            upper: self.constraint.upper.clone(),
            map,
        };
        penalty
            .validate()
            .map_err(|e| field_err("constraint", e.to_string()))?;

        let weights = if self.saturation.weights.is_empty() {
            vec![1.0; self.saturation.u_max.len()]
        } else {
            self.saturation.weights.clone()
        };
        let saturation = SaturationSpec {
            limits: self.saturation.u_max.clone(),
            weights,
        };
        saturation
            .validate()
            .map_err(|e| field_err("saturation", e.to_string()))?;
        if saturation.dim() != m_dim {
            return Err(field_err(
                "saturation.u_max",
                format!("must match the control dimension {m_dim}"),
            ));
        }

        if self.rollout.steps == 0 {
            return Err(field_err("rollout.steps", "must be at least 1"));
        }
        if !(self.rollout.horizon > 0.0) {
            return Err(field_err("rollout.horizon", "must be positive"));
        }
        let rollout_cfg = RolloutConfig {
            steps: self.rollout.steps,
            dt: self.rollout.horizon / self.rollout.steps as f64,
            batch: self.rollout.batch,
            initial_state: self.rollout.initial_state.clone(),
        };
        rollout_cfg
            .validate()
            .map_err(|m| field_err("rollout", m))?;
        if rollout_cfg.initial_state.len() != n {
            return Err(field_err(
                "rollout.initial_state",
                format!("must have {n} entries"),
            ));
        }
        if self.rollout.eval_trials == 0 {
            return Err(field_err("rollout.eval_trials", "must be at least 1"));
        }

        let input_scale = if self.network.input_scale.is_empty() {
            vec![1.0; n]
        } else {
            self.network.input_scale.clone()
        };
        let net_cfg = NetConfig {
            hidden: self.network.hidden,
            input_scale,
            forget_bias: self.network.forget_bias,
            value_scale: self.network.value_scale,
            output_scale: self.network.output_scale,
        };
        net_cfg.validate(n).map_err(|m| field_err("network", m))?;

        let train_cfg = TrainConfig {
            iterations: self.trainer.iterations,
            weight_decay: self.trainer.weight_decay,
            clip_threshold: self.trainer.clip_threshold,
            checkpoint_every: self.trainer.checkpoint_every,
            seed: self.trainer.seed,
            adam: AdamConfig {
                beta1: self.trainer.adam_beta1,
                beta2: self.trainer.adam_beta2,
                epsilon: self.trainer.adam_epsilon,
            },
            learning_rate: LrSchedule(self.trainer.learning_rate.clone()),
            max_consecutive_divergences: self.trainer.max_consecutive_divergences,
            fixed_k: None,
        };
        train_cfg.validate().map_err(|m| field_err("trainer", m))?;

        let sched_cfg = SchedulerConfig {
            delta: self.scheduler.delta,
            beta: self.scheduler.beta,
            gamma: self.scheduler.gamma,
            gamma_accel: self.scheduler.gamma_accel,
            delta_accel: self.scheduler.delta_accel,
            check_interval: self.scheduler.check_interval,
            max_interval: self.scheduler.max_interval,
        };
        sched_cfg.validate().map_err(|m| field_err("scheduler", m))?;

        Ok(Experiment {
            model,
            cost,
            penalty,
            saturation,
            net_cfg,
            rollout_cfg,
            train_cfg,
            sched_cfg,
            eval_trials: self.rollout.eval_trials,
        })
    }
}

/// Validated, ready-to-run experiment components.
pub struct Experiment {
    pub model: CartPole,
    pub cost: CostSpec,
    pub penalty: PenaltySpec,
    pub saturation: SaturationSpec,
    pub net_cfg: NetConfig,
    pub rollout_cfg: RolloutConfig,
    pub train_cfg: TrainConfig,
    pub sched_cfg: SchedulerConfig,
    pub eval_trials: usize,
}

impl Experiment {
    pub fn session(&self) -> TrainSession<'_> {
        TrainSession {
            model: &self.model,
            cost: &self.cost,
            penalty: self.penalty.clone(),
            saturation: &self.saturation,
            net_cfg: &self.net_cfg,
            rollout_cfg: &self.rollout_cfg,
            train_cfg: &self.train_cfg,
            sched_cfg: &self.sched_cfg,
        }
    }

    /// Problem bundle for a given parameter set, with the penalty steepness
    /// taken from `steepness` (for evaluation at a trained k).
    pub fn problem_at<'a>(
        &'a self,
        params: &'a NetParams,
        steepness: f64,
        penalty_storage: &'a mut PenaltySpec,
    ) -> FbsdeProblem<'a> {
        *penalty_storage = self.penalty.clone();
        penalty_storage.steepness = steepness;
        FbsdeProblem {
            model: &self.model,
            cost: &self.cost,
            penalty: penalty_storage,
            saturation: &self.saturation,
            net_cfg: &self.net_cfg,
            params,
            cfg: &self.rollout_cfg,
        }
    }
}
