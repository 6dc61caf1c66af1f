//! Adaptive update of the penalty steepness `k`.
//!
//! Every `check_interval` iterations the windowed standard deviation of the
//! mean state cost is compared against the threshold `beta`; when training
//! has settled (`sigma_c < beta`) or the patience timer fires, the scheme
//! applies the simultaneous update
//!   k, delta, beta, gamma = k + delta, delta - delta_accel, gamma*beta, gamma + gamma_accel
//! followed by clamping `delta >= 0` and `gamma <= 1`. Once a training
//! batch keeps every trajectory inside the constraint boundary the
//! scheduler ends and `k` is frozen.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("cost history is empty")]
    EmptyHistory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    /// Initial steepness increment delta.
    pub delta: f64,
    /// Update threshold beta; `None` adopts the first window's sigma_c.
    pub beta: Option<f64>,
    /// Threshold change ratio gamma, in (0, 1].
    pub gamma: f64,
    /// Added to gamma at each update (the ratio acceleration Delta).
    pub gamma_accel: f64,
    /// Subtracted from delta at each update (the increment acceleration
    /// Delta_delta).
    pub delta_accel: f64,
    /// Check interval eta in iterations.
    pub check_interval: u64,
    /// Patience eta': force an update at multiples of this many iterations.
    pub max_interval: u64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            delta: 0.5,
            beta: None,
            gamma: 0.9,
            gamma_accel: 0.01,
            delta_accel: 0.05,
            check_interval: 50,
            max_interval: 500,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.delta < 0.0 {
            return Err("scheduler.delta must be non-negative".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err("scheduler.gamma must be in (0, 1]".into());
        }
        if self.check_interval == 0 || self.max_interval == 0 {
            return Err("scheduler intervals must be positive".into());
        }
        if let Some(b) = self.beta {
            if b <= 0.0 {
                return Err("scheduler.beta must be positive when given".into());
            }
        }
        Ok(())
    }
}

/// Details of one applied steepness update.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SchedulerUpdate {
    pub iteration: u64,
    pub sigma_c: f64,
    pub beta: f64,
    pub old_k: f64,
    pub new_k: f64,
    pub forced: bool,
}

/// Mutable scheduler state; serialized into checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub k: f64,
    pub delta: f64,
    pub beta: Option<f64>,
    pub gamma: f64,
    pub gamma_accel: f64,
    pub delta_accel: f64,
    pub check_interval: u64,
    pub max_interval: u64,
    /// Ring buffer of the last `check_interval` per-iteration mean state
    /// costs; reset after each applied update.
    pub history: Vec<f64>,
    /// Set once a training batch stays fully inside the boundary; no field
    /// changes afterwards.
    pub done: bool,
    /// When set, the scheduler never updates (the fixed-k experiment).
    pub frozen: bool,
}

impl SchedulerState {
    pub fn new(initial_k: f64, cfg: &SchedulerConfig) -> Self {
        SchedulerState {
            k: initial_k,
            delta: cfg.delta,
            beta: cfg.beta,
            gamma: cfg.gamma,
            gamma_accel: cfg.gamma_accel,
            delta_accel: cfg.delta_accel,
            check_interval: cfg.check_interval,
            max_interval: cfg.max_interval,
            history: Vec::new(),
            done: false,
            frozen: false,
        }
    }

    /// A scheduler that holds `k` fixed forever.
    pub fn fixed(k: f64) -> Self {
        let mut s = Self::new(k, &SchedulerConfig::default());
        s.frozen = true;
        s
    }

    pub fn steepness(&self) -> f64 {
        self.k
    }

    /// Feed one iteration's signals. Returns the update when `k` changed.
    pub fn observe(
        &mut self,
        iteration: u64,
        mean_state_cost: f64,
        all_inside: bool,
    ) -> Option<SchedulerUpdate> {
        if self.frozen || self.done {
            return None;
        }
        if all_inside {
            self.done = true;
            return None;
        }
        if self.history.len() == self.check_interval as usize {
            self.history.remove(0);
        }
        self.history.push(mean_state_cost);

        if iteration % self.check_interval != 0 {
            return None;
        }
        let (_, sigma_c) = cost_variance(&self.history).ok()?;
        let beta = match self.beta {
            Some(b) => b,
            None => {
                // first full window sets the convergence threshold
                self.beta = Some(sigma_c);
                return None;
            }
        };
        let forced = iteration % self.max_interval == 0;
        if sigma_c < beta || forced {
            let old_k = self.k;
            let (k, delta, new_beta, gamma) = (
                self.k + self.delta,
                self.delta - self.delta_accel,
                self.gamma * beta,
                self.gamma + self.gamma_accel,
            );
            self.k = k;
            self.delta = delta.max(0.0);
            self.beta = Some(new_beta);
            self.gamma = gamma.min(1.0);
            self.history.clear();
            return Some(SchedulerUpdate {
                iteration,
                sigma_c,
                beta: new_beta,
                old_k,
                new_k: self.k,
                forced,
            });
        }
        None
    }
}

/// Population mean and standard deviation of the buffered window.
pub fn cost_variance(history: &[f64]) -> Result<(f64, f64), SchedulerError> {
    if history.is_empty() {
        return Err(SchedulerError::EmptyHistory);
    }
    let n = history.len() as f64;
    let mean = history.iter().sum::<f64>() / n;
    let var = history.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cfg() -> SchedulerConfig {
        SchedulerConfig {
            delta: 0.5,
            beta: Some(10.0),
            gamma: 0.5,
            gamma_accel: 0.1,
            delta_accel: 0.05,
            check_interval: 4,
            max_interval: 400,
        }
    }

    fn feed(s: &mut SchedulerState, from: u64, count: u64, cost: f64) -> Vec<SchedulerUpdate> {
        (from..from + count)
            .filter_map(|l| s.observe(l, cost, false))
            .collect()
    }

    #[test]
    fn hand_executed_update() {
        // k=1.5, delta=0.5, beta=10, gamma=0.5, Delta=0.1, Delta_delta=0.05,
        // sigma_c = 5 < beta at a check instant
        // -> k=2.0, delta=0.45, beta=5.0, gamma=0.6
        let mut s = SchedulerState::new(1.5, &cfg());
        // constant window gives sigma_c = 0 < 10; use a window with std 5:
        // values alternating 0 and 10 have mean 5 and population std 5.
        let costs = [0.0, 10.0, 0.0, 10.0];
        let mut update = None;
        for (i, &c) in costs.iter().enumerate() {
            update = s.observe(i as u64 + 1, c, false);
        }
        let u = update.expect("update fires at l = 4");
        assert_eq!(u.sigma_c, 5.0);
        assert_eq!(u.old_k, 1.5);
        assert_eq!(s.k, 2.0);
        assert_eq!(s.delta, 0.5 - 0.05);
        assert_eq!(s.beta, Some(5.0));
        assert_eq!(s.gamma, 0.5 + 0.1);
        assert!(s.history.is_empty());
    }

    #[test]
    fn no_change_when_variance_is_high_and_no_patience() {
        let mut s = SchedulerState::new(1.5, &cfg());
        // std of {0, 30} window is 15 >= beta = 10
        let costs = [0.0, 30.0, 0.0, 30.0];
        for (i, &c) in costs.iter().enumerate() {
            assert!(s.observe(i as u64 + 1, c, false).is_none());
        }
        assert_eq!(s.k, 1.5);
        assert_eq!(s.beta, Some(10.0));
    }

    #[test]
    fn inside_boundary_ends_the_scheduler_permanently() {
        let mut s = SchedulerState::new(1.5, &cfg());
        assert!(s.observe(1, 3.0, true).is_none());
        assert!(s.done);
        let before = s.clone();
        for l in 2..200 {
            assert!(s.observe(l, 100.0, false).is_none());
        }
        assert_eq!(s, before);
    }

    #[test]
    fn patience_forces_an_update() {
        let mut c = cfg();
        c.max_interval = 8;
        let mut s = SchedulerState::new(1.5, &c);
        // high-variance costs never satisfy sigma_c < beta
        let updates: Vec<_> = (1..=8)
            .filter_map(|l| s.observe(l, if l % 2 == 0 { 0.0 } else { 40.0 }, false))
            .collect();
        assert_eq!(updates.len(), 1);
        assert!(updates[0].forced);
        assert_eq!(updates[0].iteration, 8);
        assert_eq!(s.k, 2.0);
    }

    #[test]
    fn k_is_monotone_and_delta_clamps_at_zero() {
        let mut c = cfg();
        c.delta = 0.08;
        c.delta_accel = 0.05;
        let mut s = SchedulerState::new(1.0, &c);
        let mut last_k = s.k;
        let mut l = 0;
        for _ in 0..6 {
            let ups = feed(&mut s, l + 1, 4, 1.0); // sigma_c = 0 < beta
            l += 4;
            for u in ups {
                assert!(u.new_k >= last_k);
                last_k = u.new_k;
            }
            assert!(s.delta >= 0.0);
            assert!(s.gamma <= 1.0);
        }
        // delta: 0.08 -> 0.03 -> clamp 0; k gains 0.08 + 0.03 then freezes
        assert_relative_eq!(s.k, 1.0 + 0.08 + 0.03, epsilon = 1e-12);
    }

    #[test]
    fn beta_initializes_from_first_window_when_unset() {
        let mut c = cfg();
        c.beta = None;
        let mut s = SchedulerState::new(1.5, &c);
        let costs = [2.0, 4.0, 2.0, 4.0]; // std = 1
        for (i, &v) in costs.iter().enumerate() {
            assert!(s.observe(i as u64 + 1, v, false).is_none());
        }
        assert_eq!(s.beta, Some(1.0));
        assert_eq!(s.k, 1.5, "initialization consumes the first check");
        // a quieter second window now triggers the update
        let ups = feed(&mut s, 5, 4, 3.0); // std = 0 < 1
        assert_eq!(ups.len(), 1);
        assert_eq!(s.k, 2.0);
    }

    #[test]
    fn updates_only_at_check_instants() {
        let mut s = SchedulerState::new(1.5, &cfg());
        for l in 1..=3 {
            assert!(s.observe(l, 1.0, false).is_none());
        }
        assert!(s.observe(4, 1.0, false).is_some());
    }

    #[test]
    fn frozen_scheduler_never_moves() {
        let mut s = SchedulerState::fixed(6.0);
        for l in 1..=1000 {
            assert!(s.observe(l, 0.0, false).is_none());
        }
        assert_eq!(s.k, 6.0);
    }

    #[test]
    fn cost_variance_examples() {
        assert_eq!(cost_variance(&[7.0, 7.0, 7.0]).unwrap(), (7.0, 0.0));
        let (mean, std) = cost_variance(&[1.0, 3.0]).unwrap();
        assert_eq!((mean, std), (2.0, 1.0));
        assert!(matches!(
            cost_variance(&[]),
            Err(SchedulerError::EmptyHistory)
        ));
    }

    #[test]
    fn cost_variance_matches_two_pass_oracle() {
        let vals: Vec<f64> = (0..37).map(|i| ((i * 31 % 17) as f64).sin() * 4.0 + 2.0).collect();
        let (mean, std) = cost_variance(&vals).unwrap();
        // independent two-pass computation
        let m2 = vals.iter().sum::<f64>() / vals.len() as f64;
        let v2 = vals.iter().map(|v| (v - m2).powi(2)).sum::<f64>() / vals.len() as f64;
        assert_relative_eq!(mean, m2, epsilon = 1e-12);
        assert_relative_eq!(std, v2.sqrt(), epsilon = 1e-12);
    }
}
