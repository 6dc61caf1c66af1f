//! Outer training loop: Adam with a piecewise-constant learning rate,
//! global-norm gradient clipping, divergence recovery, checkpointing, and
//! orchestration of the rollout and the steepness scheduler.

use crate::checkpoint::Checkpoint;
use crate::cost::{count_violations, CostSpec, PenaltySpec, SaturationSpec};
use crate::dynamics::Dynamics;
use crate::matrix::Mat;
use crate::net::{NetConfig, NetParams};
use crate::rollout::{FbsdeProblem, GradSet, RolloutConfig, RolloutError, RunOptions};
use crate::scheduler::{SchedulerConfig, SchedulerState};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training aborted after {count} consecutive divergent iterations (iteration {iteration})")]
    DivergenceAbort { iteration: u64, count: u32 },
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment buffers per parameter block plus the step count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &NetParams) -> Self {
        let zeros: Vec<Mat> = params
            .blocks()
            .iter()
            .map(|b| Mat::zeros(b.rows(), b.cols()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update at the given learning rate.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut NetParams,
    grads: &GradSet,
    rate: f64,
    cfg: &AdamConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (idx, block) in params.blocks_mut().into_iter().enumerate() {
        let g = grads.blocks[idx].data();
        let m = state.m[idx].data_mut();
        let v = state.v[idx].data_mut();
        let p = block.data_mut();
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

/// Global-norm clipping: when `||g|| > threshold`, every block is scaled by
/// `threshold / ||g||`. Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut GradSet, threshold: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > threshold {
        grads.scale(threshold / norm);
    }
    norm
}

/// Piecewise-constant schedule: `(starting iteration, rate)` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule(pub Vec<(u64, f64)>);

impl LrSchedule {
    pub fn constant(rate: f64) -> Self {
        LrSchedule(vec![(0, rate)])
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.0.is_empty() {
            return Err("learning-rate schedule must have at least one entry".into());
        }
        let mut last = None;
        for &(iter, rate) in &self.0 {
            if rate <= 0.0 {
                return Err("learning rates must be positive".into());
            }
            if let Some(prev) = last {
                if iter <= prev {
                    return Err("learning-rate milestones must be strictly increasing".into());
                }
            }
            last = Some(iter);
        }
        Ok(())
    }

    pub fn rate_at(&self, iteration: u64) -> f64 {
        let mut rate = self.0[0].1;
        for &(start, r) in &self.0 {
            if iteration >= start {
                rate = r;
            }
        }
        rate
    }
}

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: u64,
    pub weight_decay: f64,
    pub clip_threshold: f64,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub learning_rate: LrSchedule,
    pub max_consecutive_divergences: u32,
    /// When set, disables the adaptive scheduler and holds k fixed.
    pub fixed_k: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.iterations == 0 {
            return Err("trainer.iterations must be at least 1".into());
        }
        if self.weight_decay < 0.0 {
            return Err("trainer.weight_decay must be non-negative".into());
        }
        if !(self.clip_threshold > 0.0) {
            return Err("trainer.clip_threshold must be positive".into());
        }
        if self.checkpoint_every == 0 {
            return Err("trainer.checkpoint_every must be at least 1".into());
        }
        if self.max_consecutive_divergences == 0 {
            return Err("trainer.max_consecutive_divergences must be at least 1".into());
        }
        self.learning_rate.validate()
    }
}

/// Newline-delimited JSON records written to the training log.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogRecord {
    Iteration {
        iteration: u64,
        loss: f64,
        mean_state_cost: f64,
        violation_fraction: f64,
        steepness: f64,
        grad_norm: f64,
        learning_rate: f64,
    },
    SchedulerUpdate {
        iteration: u64,
        sigma_c: f64,
        beta: f64,
        old_k: f64,
        new_k: f64,
        forced: bool,
    },
    Divergence {
        iteration: u64,
        member: usize,
        step: usize,
        kind: String,
    },
    Checkpoint {
        iteration: u64,
        path: String,
    },
}

/// Everything a training run produces besides files.
pub struct TrainOutcome {
    pub params: NetParams,
    pub optimizer: AdamState,
    pub scheduler: SchedulerState,
    pub iterations_run: u64,
    pub divergence_events: u32,
    pub records: Vec<LogRecord>,
    pub final_checkpoint: Option<PathBuf>,
}

/// Owns the mutable training state and drives Algorithm-style iterations:
/// rollout, loss, backward, clip, Adam, scheduler.
pub struct TrainSession<'a> {
    pub model: &'a dyn Dynamics,
    pub cost: &'a CostSpec,
    pub penalty: PenaltySpec,
    pub saturation: &'a SaturationSpec,
    pub net_cfg: &'a NetConfig,
    pub rollout_cfg: &'a RolloutConfig,
    pub train_cfg: &'a TrainConfig,
    pub sched_cfg: &'a SchedulerConfig,
}

struct Snapshot {
    params: NetParams,
    optimizer: AdamState,
    scheduler: SchedulerState,
}

impl<'a> TrainSession<'a> {
    /// Run from a fresh initialization.
    pub fn train(
        &self,
        checkpoint_dir: Option<&Path>,
        mut log_sink: Option<&mut dyn Write>,
    ) -> Result<TrainOutcome, TrainError> {
        let params = NetParams::init(self.net_cfg, self.model.state_dim(), self.train_cfg.seed);
        let optimizer = AdamState::new(&params);
        let scheduler = match self.train_cfg.fixed_k {
            Some(k) => SchedulerState::fixed(k),
            None => SchedulerState::new(self.penalty.steepness, self.sched_cfg),
        };
        self.train_from(params, optimizer, scheduler, 0, checkpoint_dir, log_sink.as_deref_mut())
    }

    /// Resume from checkpointed state at `start_iteration`.
    pub fn train_from(
        &self,
        mut params: NetParams,
        mut optimizer: AdamState,
        mut scheduler: SchedulerState,
        start_iteration: u64,
        checkpoint_dir: Option<&Path>,
        mut log_sink: Option<&mut dyn Write>,
    ) -> Result<TrainOutcome, TrainError> {
        let mut penalty = self.penalty.clone();
        let mut records = Vec::new();
        let mut last_good = Snapshot {
            params: params.clone(),
            optimizer: optimizer.clone(),
            scheduler: scheduler.clone(),
        };
        let mut consecutive_divergences = 0u32;
        let mut divergence_events = 0u32;
        let mut final_checkpoint = None;

        let mut emit = |rec: LogRecord, records: &mut Vec<LogRecord>| -> Result<(), TrainError> {
            if let Some(w) = log_sink.as_deref_mut() {
                serde_json::to_writer(&mut *w, &rec)
                    .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
                writeln!(w)?;
            }
            records.push(rec);
            Ok(())
        };

        for iteration in (start_iteration + 1)..=self.train_cfg.iterations {
            penalty.steepness = scheduler.steepness();
            let problem = FbsdeProblem {
                model: self.model,
                cost: self.cost,
                penalty: &penalty,
                saturation: self.saturation,
                net_cfg: self.net_cfg,
                params: &params,
                cfg: self.rollout_cfg,
            };
            let opts = RunOptions {
                record_gradients: true,
                diagnostics: false,
                weight_decay: self.train_cfg.weight_decay,
            };
            let rolled = problem.rollout(self.train_cfg.seed, iteration, opts);

            let diverged = match rolled {
                Err(RolloutError::Diverged { member, step }) => Some((member, step, "state")),
                Err(other) => return Err(other.into()),
                Ok(out) => {
                    let mut grads = out.grads.expect("gradients requested");
                    if !out.result.loss.is_finite() {
                        Some((0, 0, "loss"))
                    } else if !grads.is_finite() {
                        Some((0, 0, "gradient"))
                    } else {
                        let grad_norm =
                            clip_gradients(&mut grads, self.train_cfg.clip_threshold);
                        let rate = self.train_cfg.learning_rate.rate_at(iteration);
                        adam_step(&mut optimizer, &mut params, &grads, rate, &self.train_cfg.adam);

                        let (violating, total) = count_violations(
                            &out.result.states,
                            out.result.batch,
                            out.result.steps + 1,
                            out.result.state_dim,
                            &penalty,
                        );
                        let violation_fraction = violating as f64 / total as f64;
                        if let Some(update) =
                            scheduler.observe(iteration, out.result.mean_state_cost, violating == 0)
                        {
                            emit(
                                LogRecord::SchedulerUpdate {
                                    iteration,
                                    sigma_c: update.sigma_c,
                                    beta: update.beta,
                                    old_k: update.old_k,
                                    new_k: update.new_k,
                                    forced: update.forced,
                                },
                                &mut records,
                            )?;
                        }
                        emit(
                            LogRecord::Iteration {
                                iteration,
                                loss: out.result.loss,
                                mean_state_cost: out.result.mean_state_cost,
                                violation_fraction,
                                steepness: penalty.steepness,
                                grad_norm,
                                learning_rate: rate,
                            },
                            &mut records,
                        )?;

                        consecutive_divergences = 0;
                        last_good = Snapshot {
                            params: params.clone(),
                            optimizer: optimizer.clone(),
                            scheduler: scheduler.clone(),
                        };
                        if iteration % self.train_cfg.checkpoint_every == 0 {
                            if let Some(dir) = checkpoint_dir {
                                let path = dir.join(format!("checkpoint_{iteration:06}.json"));
                                self.save_checkpoint(&path, iteration, &params, &optimizer, &scheduler)?;
                                emit(
                                    LogRecord::Checkpoint {
                                        iteration,
                                        path: path.display().to_string(),
                                    },
                                    &mut records,
                                )?;
                            }
                        }
                        if iteration % 50 == 0 {
                            log::info!(
                                "iteration {iteration}: loss {:.4}, k {:.3}",
                                out.result.loss,
                                penalty.steepness
                            );
                        }
                        None
                    }
                }
            };

            if let Some((member, step, kind)) = diverged {
                divergence_events += 1;
                consecutive_divergences += 1;
                emit(
                    LogRecord::Divergence {
                        iteration,
                        member,
                        step,
                        kind: kind.into(),
                    },
                    &mut records,
                )?;
                params = last_good.params.clone();
                optimizer = last_good.optimizer.clone();
                scheduler = last_good.scheduler.clone();
                if consecutive_divergences >= self.train_cfg.max_consecutive_divergences {
                    if let Some(dir) = checkpoint_dir {
                        let path = dir.join("checkpoint_final.json");
                        self.save_checkpoint(&path, iteration, &params, &optimizer, &scheduler)?;
                    }
                    return Err(TrainError::DivergenceAbort {
                        iteration,
                        count: consecutive_divergences,
                    });
                }
            }
        }

        if let Some(dir) = checkpoint_dir {
            let path = dir.join("checkpoint_final.json");
            self.save_checkpoint(
                &path,
                self.train_cfg.iterations,
                &params,
                &optimizer,
                &scheduler,
            )?;
            final_checkpoint = Some(path);
        }

        Ok(TrainOutcome {
            params,
            optimizer,
            scheduler,
            iterations_run: self.train_cfg.iterations - start_iteration,
            divergence_events,
            records,
            final_checkpoint,
        })
    }

    fn save_checkpoint(
        &self,
        path: &Path,
        iteration: u64,
        params: &NetParams,
        optimizer: &AdamState,
        scheduler: &SchedulerState,
    ) -> Result<(), TrainError> {
        let ck = Checkpoint::capture(iteration, params, optimizer, scheduler);
        ck.save(path).map_err(|e| TrainError::Checkpoint(e.to_string()))
    }
}
