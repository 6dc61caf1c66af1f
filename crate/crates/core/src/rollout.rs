//! Unrolls the coupled forward-backward system for a mini-batch.
//!
//! Per batch member and step n:
//!   u_n   = -R^-1 G^T V_x
//!   u*_n  = U_max . sig(u_n)
//!   dw    ~ N(0, dt)
//!   y_n+1 = y_n - h(x_n, V_x) dt + V_x^T (G u* dt + Sigma dw)
//!   x_n+1 = x_n + f dt + G u* dt + Sigma dw
//!   V_x(x_n+1) = f_LSTM(x_n+1; theta)
//! with the penalized saturated Hamiltonian h. The whole computation is
//! recorded on a per-member gradient tape; gradients flow through both the
//! value chain and the state chain.
//!
//! Batch members run in parallel on independent tapes with counter-derived
//! noise streams; gradient blocks are reduced in member order, so results
//! are bit-identical to a sequential run.

use crate::cost::{CostSpec, PenaltySpec, SaturationSpec};
use crate::dynamics::{sample_noise, Dynamics};
use crate::matrix::Mat;
use crate::net::{NetConfig, NetParams, TapedNet, BLOCK_COUNT};
use crate::streams::{stream, DOMAIN_EVAL, DOMAIN_TRAIN};
use crate::tape::{Tape, TapeError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("trajectory diverged: non-finite value at member {member}, step {step}")]
    Diverged { member: usize, step: usize },
    #[error("invalid rollout setup: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Discretization and batching of the unroll.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    /// Number of Euler steps N.
    pub steps: usize,
    /// Step length in seconds.
    pub dt: f64,
    /// Training batch size M.
    pub batch: usize,
    /// Fixed initial state xi.
    pub initial_state: Vec<f64>,
}

impl RolloutConfig {
    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.steps == 0 {
            return Err("rollout.steps must be at least 1".into());
        }
        if !(self.dt > 0.0) {
            return Err("rollout.dt must be positive".into());
        }
        if self.batch == 0 {
            return Err("rollout.batch must be at least 1".into());
        }
        Ok(())
    }
}

/// Trajectories and scalars produced by one batched unroll.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RolloutResult {
    pub batch: usize,
    pub steps: usize,
    pub state_dim: usize,
    pub control_dim: usize,
    /// `batch x (steps+1) x state_dim`, row-major.
    pub states: Vec<f64>,
    /// `batch x (steps+1)` value-function estimates.
    pub values: Vec<f64>,
    /// `batch x steps x control_dim` saturated controls.
    pub controls: Vec<f64>,
    /// Mini-batch loss: mean squared terminal mismatch plus the theta
    /// regularizer.
    pub loss: f64,
    /// Mean running state cost `c(x)` over members and steps, the signal
    /// consumed by the steepness scheduler.
    pub mean_state_cost: f64,
}

impl RolloutResult {
    pub fn state(&self, member: usize, step: usize) -> &[f64] {
        let base = (member * (self.steps + 1) + step) * self.state_dim;
        &self.states[base..base + self.state_dim]
    }

    pub fn value(&self, member: usize, step: usize) -> f64 {
        self.values[member * (self.steps + 1) + step]
    }

    pub fn control(&self, member: usize, step: usize) -> &[f64] {
        let base = (member * self.steps + step) * self.control_dim;
        &self.controls[base..base + self.control_dim]
    }

    pub fn terminal_state(&self, member: usize) -> &[f64] {
        self.state(member, self.steps)
    }

    pub fn terminal_value(&self, member: usize) -> f64 {
        self.value(member, self.steps)
    }
}

/// Per-step Hamiltonian pieces captured when diagnostics are requested.
#[derive(Clone, Debug)]
pub struct StepDiagnostics {
    pub member: usize,
    pub step: usize,
    pub hamiltonian: f64,
    pub cross_term: f64,
    pub state_cost: f64,
    pub saturation_cost: f64,
}

/// Gradient blocks in [`NetParams::block_names`] order.
#[derive(Clone, Debug)]
pub struct GradSet {
    pub blocks: Vec<Mat>,
}

impl GradSet {
    pub fn zeros_like(params: &NetParams) -> GradSet {
        GradSet {
            blocks: params
                .blocks()
                .iter()
                .map(|b| Mat::zeros(b.rows(), b.cols()))
                .collect(),
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.sq_sum())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        for b in &mut self.blocks {
            b.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub record_gradients: bool,
    pub diagnostics: bool,
    /// Weight decay lambda of the training loss (applies to theta only).
    pub weight_decay: f64,
}

pub struct RolloutOutput {
    pub result: RolloutResult,
    /// Complete loss gradient (member mean plus `2 lambda theta`) when
    /// gradients were recorded.
    pub grads: Option<GradSet>,
    pub diagnostics: Option<Vec<StepDiagnostics>>,
}

/// Everything needed to unroll the controlled system.
pub struct FbsdeProblem<'a> {
    pub model: &'a dyn Dynamics,
    pub cost: &'a CostSpec,
    pub penalty: &'a PenaltySpec,
    pub saturation: &'a SaturationSpec,
    pub net_cfg: &'a NetConfig,
    pub params: &'a NetParams,
    pub cfg: &'a RolloutConfig,
}

struct MemberRun {
    states: Vec<f64>,
    values: Vec<f64>,
    controls: Vec<f64>,
    terminal_mismatch_sq: f64,
    state_cost_sum: f64,
    grads: Option<Vec<Mat>>,
    diags: Vec<StepDiagnostics>,
}

impl<'a> FbsdeProblem<'a> {
    fn check_dims(&self) -> Result<(), RolloutError> {
        let n = self.model.state_dim();
        let m = self.model.control_dim();
        if self.cfg.initial_state.len() != n {
            return Err(RolloutError::BadConfig(format!(
                "initial state has {} components, model expects {n}",
                self.cfg.initial_state.len()
            )));
        }
        if self.cost.state_dim() != n || self.cost.control_dim() != m {
            return Err(RolloutError::BadConfig(
                "cost dimensions do not match the model".into(),
            ));
        }
        if self.saturation.dim() != m {
            return Err(RolloutError::BadConfig(
                "saturation dimensions do not match the model".into(),
            ));
        }
        if self.params.state_dim() != n || self.net_cfg.hidden != self.params.hidden() {
            return Err(RolloutError::BadConfig(
                "network dimensions do not match the model".into(),
            ));
        }
        Ok(())
    }

    /// Unroll all batch members at the given training iteration.
    pub fn rollout(
        &self,
        seed: u64,
        iteration: u64,
        opts: RunOptions,
    ) -> Result<RolloutOutput, RolloutError> {
        self.run_batch(seed, DOMAIN_TRAIN, iteration, self.cfg.batch, opts)
    }

    /// Independent evaluation trials, without tape gradients.
    pub fn evaluate(&self, trials: usize, seed: u64) -> Result<(EvalSummary, EvalData), RolloutError> {
        let opts = RunOptions::default();
        let out = self.run_batch(seed, DOMAIN_EVAL, 0, trials, opts)?;
        Ok(summarize(self, out.result))
    }

    fn run_batch(
        &self,
        seed: u64,
        domain: u64,
        tag: u64,
        members: usize,
        opts: RunOptions,
    ) -> Result<RolloutOutput, RolloutError> {
        self.check_dims()?;
        let n = self.model.state_dim();
        let m = self.model.control_dim();
        let steps = self.cfg.steps;

        let node_hint = steps * 96 + 64;
        let val_hint = steps * (24 * self.net_cfg.hidden + 64) + 512;

        let runs: Vec<Result<MemberRun, RolloutError>> = (0..members)
            .into_par_iter()
            .map_init(
                || Tape::with_capacity(node_hint, val_hint),
                |tape, member| self.run_member(tape, seed, domain, tag, member, opts),
            )
            .collect();

        let mut states = Vec::with_capacity(members * (steps + 1) * n);
        let mut values = Vec::with_capacity(members * (steps + 1));
        let mut controls = Vec::with_capacity(members * steps * m);
        let mut grads = opts.record_gradients.then(|| GradSet::zeros_like(self.params));
        let mut diagnostics = opts.diagnostics.then(Vec::new);
        let mut mismatch_sum = 0.0;
        let mut cost_sum = 0.0;

        for run in runs {
            let run = run?;
            states.extend_from_slice(&run.states);
            values.extend_from_slice(&run.values);
            controls.extend_from_slice(&run.controls);
            mismatch_sum += run.terminal_mismatch_sq;
            cost_sum += run.state_cost_sum;
            if let (Some(acc), Some(g)) = (grads.as_mut(), run.grads.as_ref()) {
                for (dst, src) in acc.blocks.iter_mut().zip(g) {
                    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                        *d += s;
                    }
                }
            }
            if let Some(d) = diagnostics.as_mut() {
                d.extend(run.diags);
            }
        }

        let m_f = members as f64;
        let theta_sq = self.params.theta_sq_norm();
        let loss = mismatch_sum / m_f + opts.weight_decay * theta_sq;
        if let Some(g) = grads.as_mut() {
            g.scale(1.0 / m_f);
            if opts.weight_decay != 0.0 {
                for (idx, (dst, src)) in
                    g.blocks.iter_mut().zip(self.params.blocks()).enumerate()
                {
                    if NetParams::is_theta(idx) {
                        for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                            *d += 2.0 * opts.weight_decay * s;
                        }
                    }
                }
            }
        }

        Ok(RolloutOutput {
            result: RolloutResult {
                batch: members,
                steps,
                state_dim: n,
                control_dim: m,
                states,
                values,
                controls,
                loss,
                mean_state_cost: cost_sum / (m_f * steps as f64),
            },
            grads,
            diagnostics,
        })
    }

    fn run_member(
        &self,
        tape: &mut Tape,
        seed: u64,
        domain: u64,
        tag: u64,
        member: usize,
        opts: RunOptions,
    ) -> Result<MemberRun, RolloutError> {
        tape.clear();
        let n = self.model.state_dim();
        let m = self.model.control_dim();
        let nu = self.model.noise_dim();
        let steps = self.cfg.steps;
        let dt = self.cfg.dt;

        let net = TapedNet::upload(self.params, self.net_cfg, tape);
        let taped_cost = self.cost.upload(tape);
        let taped_pen = self.penalty.upload(tape, n);
        let taped_sat = self.saturation.upload(tape);
        let umax = tape.leaf(&self.saturation.limits, m, 1, false);

        let mut rng = stream(seed, domain, tag, member as u64);
        let mut x = tape.leaf(&self.cfg.initial_state, n, 1, false);
        let (mut y, mut vx, mut h_state, mut c_state) = net.initial_values(tape)?;

        let mut states = Vec::with_capacity((steps + 1) * n);
        let mut values = Vec::with_capacity(steps + 1);
        let mut controls = Vec::with_capacity(steps * m);
        let mut diags = Vec::new();
        let mut state_cost_sum = 0.0;
        states.extend_from_slice(tape.value(x));
        values.push(tape.value_scalar(y));

        let mut t = 0.0;
        for step in 0..steps {
            // control from the current value gradient
            let g_mat = self.model.control_matrix_taped(tape, x, t)?;
            let g_t = tape.transpose(g_mat)?;
            let gtv = tape.matmul(g_t, vx)?;
            let ra = tape.matmul(taped_cost.r_inv(), gtv)?;
            let presat = tape.neg(ra)?;
            let z = tape.sig(presat)?;
            let u_star = tape.mul(umax, z)?;
            controls.extend_from_slice(tape.value(u_star));

            // Brownian increment and its constant push through Sigma
            let dw = sample_noise(&mut rng, nu, dt);
            let sdw = self.model.diffusion(tape.value(x), t).matvec(&dw);
            let sdw = tape.leaf(&sdw, n, 1, false);

            // penalized saturated Hamiltonian h = c(x) + V_x^T G u* + sum S_i
            let q_x = taped_cost.quadratic(tape, x)?;
            let pen = taped_pen.eval(tape, x)?;
            let c_x = tape.add(q_x, pen)?;
            let gu = tape.matmul(g_mat, u_star)?;
            let cross_h = tape.dot(vx, gu)?;
            let partial = tape.add(c_x, cross_h)?;
            let sat = taped_sat.eval(tape, presat)?;
            let h_val = tape.add(partial, sat)?;

            // value update
            let gu_dt = tape.scale(gu, dt)?;
            let flow = tape.add(gu_dt, sdw)?;
            let cross = tape.dot(vx, flow)?;
            let h_dt = tape.scale(h_val, dt)?;
            let y_drift = tape.sub(y, h_dt)?;
            y = tape.add(y_drift, cross)?;

            // state update
            let f_t = self.model.drift_taped(tape, x, t)?;
            let f_dt = tape.scale(f_t, dt)?;
            let x_drift = tape.add(x, f_dt)?;
            let x_flow = tape.add(x_drift, gu_dt)?;
            x = tape.add(x_flow, sdw)?;

            let x_val = tape.value(x);
            let y_val = tape.value_scalar(y);
            if !y_val.is_finite() || x_val.iter().any(|v| !v.is_finite()) {
                return Err(RolloutError::Diverged { member, step });
            }
            states.extend_from_slice(x_val);
            values.push(y_val);
            state_cost_sum += tape.value_scalar(c_x);
            if opts.diagnostics {
                diags.push(StepDiagnostics {
                    member,
                    step,
                    hamiltonian: tape.value_scalar(h_val),
                    cross_term: tape.value_scalar(cross_h),
                    state_cost: tape.value_scalar(c_x),
                    saturation_cost: tape.value_scalar(sat),
                });
            }

            // predict the value gradient at the new state
            let (vx_next, h_next, c_next) = net.lstm_step(tape, x, h_state, c_state)?;
            vx = vx_next;
            h_state = h_next;
            c_state = c_next;
            t += dt;
        }

        let g_term = taped_cost.terminal(tape, x)?;
        let diff = tape.sub(y, g_term)?;
        let mismatch = tape.square(diff)?;
        let terminal_mismatch_sq = tape.value_scalar(mismatch);

        let grads = if opts.record_gradients {
            tape.backward(mismatch)?;
            let mut blocks = Vec::with_capacity(BLOCK_COUNT);
            for t in &net.blocks {
                blocks.push(tape.gradient_mat(*t)?);
            }
            Some(blocks)
        } else {
            None
        };

        Ok(MemberRun {
            states,
            values,
            controls,
            terminal_mismatch_sq,
            state_cost_sum,
            grads,
            diags,
        })
    }
}

/// The training objective of the unroll, recomputed from trajectories:
/// `(1/M) sum_m (y_N^m - g(x_N^m))^2 + lambda ||theta||^2`. Serves as an
/// independent cross-check of [`RolloutResult::loss`].
pub fn training_loss(
    result: &RolloutResult,
    cost: &CostSpec,
    params: &NetParams,
    weight_decay: f64,
) -> f64 {
    let mut sum = 0.0;
    for m in 0..result.batch {
        let y = result.terminal_value(m);
        let g = cost.terminal(result.terminal_state(m));
        sum += (y - g) * (y - g);
    }
    sum / result.batch as f64 + weight_decay * params.theta_sq_norm()
}

/// Summary statistics of an evaluation run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalSummary {
    pub trials: usize,
    pub steps: usize,
    pub state_dim: usize,
    pub dt: f64,
    /// Share of (trial, step) pairs with any constraint component outside
    /// its bounds.
    pub violation_fraction: f64,
    pub violating_pairs: usize,
    pub total_pairs: usize,
    pub terminal_mean: Vec<f64>,
    pub terminal_std: Vec<f64>,
    pub max_abs_control: f64,
    /// Present when the energy constraint is active.
    pub energy: Option<EnergySummary>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnergySummary {
    pub max_energy: f64,
    pub terminal_mean_energy: f64,
}

/// Raw per-trial data backing the summary.
#[derive(Clone, Debug)]
pub struct EvalData {
    pub trials: usize,
    pub steps: usize,
    pub state_dim: usize,
    /// `trials x (steps+1) x state_dim`.
    pub states: Vec<f64>,
    /// Per-(step, dim) envelopes, `(steps+1) x state_dim` each.
    pub envelope_min: Vec<f64>,
    pub envelope_max: Vec<f64>,
    pub envelope_mean: Vec<f64>,
    /// Per-step energy envelope when the energy constraint is active.
    pub energy_envelope: Option<EnergyEnvelope>,
}

#[derive(Clone, Debug)]
pub struct EnergyEnvelope {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub mean: Vec<f64>,
}

impl EvalData {
    pub fn state(&self, trial: usize, step: usize) -> &[f64] {
        let base = (trial * (self.steps + 1) + step) * self.state_dim;
        &self.states[base..base + self.state_dim]
    }

    pub fn terminal_states(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trials * self.state_dim);
        for trial in 0..self.trials {
            out.extend_from_slice(self.state(trial, self.steps));
        }
        out
    }
}

fn summarize(problem: &FbsdeProblem<'_>, result: RolloutResult) -> (EvalSummary, EvalData) {
    let trials = result.batch;
    let steps = result.steps;
    let n = result.state_dim;
    let rows = steps + 1;

    let mut env_min = vec![f64::INFINITY; rows * n];
    let mut env_max = vec![f64::NEG_INFINITY; rows * n];
    let mut env_mean = vec![0.0; rows * n];
    let mut violating = 0;
    for trial in 0..trials {
        for step in 0..rows {
            let s = result.state(trial, step);
            if problem.penalty.violations(s) > 0 {
                violating += 1;
            }
            for d in 0..n {
                let idx = step * n + d;
                env_min[idx] = env_min[idx].min(s[d]);
                env_max[idx] = env_max[idx].max(s[d]);
                env_mean[idx] += s[d];
            }
        }
    }
    env_mean.iter_mut().for_each(|v| *v /= trials as f64);

    let mut terminal_mean = vec![0.0; n];
    let mut terminal_sq = vec![0.0; n];
    for trial in 0..trials {
        let s = result.terminal_state(trial);
        for d in 0..n {
            terminal_mean[d] += s[d];
            terminal_sq[d] += s[d] * s[d];
        }
    }
    let terminal_std: Vec<f64> = (0..n)
        .map(|d| {
            let mean = terminal_mean[d] / trials as f64;
            (terminal_sq[d] / trials as f64 - mean * mean).max(0.0).sqrt()
        })
        .collect();
    terminal_mean.iter_mut().for_each(|v| *v /= trials as f64);

    let max_abs_control = result
        .controls
        .iter()
        .fold(0.0f64, |acc, &u| acc.max(u.abs()));

    let energy_cart = match &problem.penalty.map {
        crate::cost::ConstraintMap::Energy { cart } => Some(cart.clone()),
        _ => None,
    };
    let (energy, energy_envelope) = if let Some(cart) = energy_cart {
        let mut e_min = vec![f64::INFINITY; rows];
        let mut e_max = vec![f64::NEG_INFINITY; rows];
        let mut e_mean = vec![0.0; rows];
        let mut max_energy = f64::NEG_INFINITY;
        let mut terminal_energy = 0.0;
        for trial in 0..trials {
            for step in 0..rows {
                let e = crate::dynamics::cartpole_energy(result.state(trial, step), &cart);
                e_min[step] = e_min[step].min(e);
                e_max[step] = e_max[step].max(e);
                e_mean[step] += e;
                max_energy = max_energy.max(e);
                if step == steps {
                    terminal_energy += e;
                }
            }
        }
        e_mean.iter_mut().for_each(|v| *v /= trials as f64);
        (
            Some(EnergySummary {
                max_energy,
                terminal_mean_energy: terminal_energy / trials as f64,
            }),
            Some(EnergyEnvelope {
                min: e_min,
                max: e_max,
                mean: e_mean,
            }),
        )
    } else {
        (None, None)
    };

    let total_pairs = trials * rows;
    let summary = EvalSummary {
        trials,
        steps,
        state_dim: n,
        dt: problem.cfg.dt,
        violation_fraction: violating as f64 / total_pairs as f64,
        violating_pairs: violating,
        total_pairs,
        terminal_mean,
        terminal_std,
        max_abs_control,
        energy,
    };
    let data = EvalData {
        trials,
        steps,
        state_dim: n,
        states: result.states,
        envelope_min: env_min,
        envelope_max: env_max,
        envelope_mean: env_mean,
        energy_envelope,
    };
    (summary, data)
}
