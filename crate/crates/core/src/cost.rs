//! Cost machinery: quadratic state cost, the paired-logistic soft state
//! constraint, the inverse-sigmoid saturation cost, and the penalized
//! Hamiltonian.
//!
//! The penalty is evaluated in its algebraically equivalent tanh form
//!   p(c)/L = (tanh(k(c - c_max)/2) - tanh(k(c - c_min)/2))/2 + tanh(k h/2)
//! with `h` the half-width of the constraint interval. `tanh` is odd to the
//! bit, so the value at the midpoint is exactly zero, the curve is exactly
//! symmetric, and no exponent can overflow at any steepness.

use crate::dynamics::{
    cartpole_energy, cartpole_energy_gradient, cartpole_energy_taped, CartPoleParams,
};
use crate::matrix::Mat;
use crate::tape::{Tape, TapeError, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("control component {index} = {value} is at or beyond the saturation limit {limit}")]
    ControlAtLimit {
        index: usize,
        value: f64,
        limit: f64,
    },
    #[error("invalid specification: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Which function of the state is constrained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ConstraintMap {
    /// Selected state components, `c_s(x) = x[indices]`.
    States { indices: Vec<usize> },
    /// Total cart-pole energy, a scalar nonlinear function of the state.
    Energy { cart: CartPoleParams },
}

impl ConstraintMap {
    pub fn output_dim(&self) -> usize {
        match self {
            ConstraintMap::States { indices } => indices.len(),
            ConstraintMap::Energy { .. } => 1,
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        match self {
            ConstraintMap::States { indices } => indices.iter().map(|&i| x[i]).collect(),
            ConstraintMap::Energy { cart } => vec![cartpole_energy(x, cart)],
        }
    }

    /// Jacobian `d c_s / d x`, `r x n`.
    pub fn jacobian(&self, x: &[f64]) -> Mat {
        match self {
            ConstraintMap::States { indices } => {
                let mut j = Mat::zeros(indices.len(), x.len());
                for (r, &i) in indices.iter().enumerate() {
                    j.set(r, i, 1.0);
                }
                j
            }
            ConstraintMap::Energy { cart } => {
                Mat::new(1, x.len(), cartpole_energy_gradient(x, cart))
            }
        }
    }

    /// Constant selector leaf for the `States` variant; uploaded once per
    /// tape and reused across steps.
    fn upload_selector(&self, tape: &mut Tape, state_dim: usize) -> Option<Tensor> {
        match self {
            ConstraintMap::States { indices } => {
                let r = indices.len();
                let mut sel = vec![0.0; r * state_dim];
                for (row, &i) in indices.iter().enumerate() {
                    sel[row * state_dim + i] = 1.0;
                }
                Some(tape.leaf(&sel, r, state_dim, false))
            }
            ConstraintMap::Energy { .. } => None,
        }
    }

    fn eval_with_selector(
        &self,
        tape: &mut Tape,
        x: Tensor,
        selector: Option<Tensor>,
    ) -> Result<Tensor, TapeError> {
        match self {
            ConstraintMap::States { .. } => {
                let sel = selector.expect("selector uploaded for state constraints");
                tape.matmul(sel, x)
            }
            ConstraintMap::Energy { cart } => cartpole_energy_taped(tape, x, cart),
        }
    }
}

/// Soft state-constraint specification. `steepness` is the live value the
/// adaptive scheduler ratchets during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    /// Penalty ceiling per constraint component.
    pub limit: f64,
    /// Boundary steepness k.
    pub steepness: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub map: ConstraintMap,
}

impl PenaltySpec {
    pub fn validate(&self) -> Result<(), CostError> {
        let r = self.map.output_dim();
        if self.lower.len() != r || self.upper.len() != r {
            return Err(CostError::BadSpec(format!(
                "constraint bounds must have {r} components"
            )));
        }
        for i in 0..r {
            if !(self.lower[i] < self.upper[i]) {
                return Err(CostError::BadSpec(format!(
                    "constraint component {i}: lower {} must be below upper {}",
                    self.lower[i], self.upper[i]
                )));
            }
        }
        if self.limit < 0.0 {
            return Err(CostError::BadSpec("penalty limit must be >= 0".into()));
        }
        if !(self.steepness > 0.0) {
            return Err(CostError::BadSpec("steepness must be positive".into()));
        }
        Ok(())
    }

    /// Whether the penalty term is active at all (`limit = 0` disables it).
    pub fn is_active(&self) -> bool {
        self.limit > 0.0
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (u + l))
            .collect()
    }

    pub fn half_width(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (u - l))
            .collect()
    }

    /// Constant term per component that moves the penalty minimum to zero.
    pub fn plateau(&self) -> Vec<f64> {
        self.half_width()
            .iter()
            .map(|h| (0.5 * self.steepness * h).tanh())
            .collect()
    }

    fn component(&self, c: f64, i: usize) -> f64 {
        let k = self.steepness;
        let t1 = (0.5 * k * (c - self.upper[i])).tanh();
        let t2 = (0.5 * k * (c - self.lower[i])).tanh();
        let h = 0.5 * (self.upper[i] - self.lower[i]);
        let p = self.limit * (0.5 * (t1 - t2) + (0.5 * k * h).tanh());
        p.max(0.0)
    }

    /// Penalty value, summed over constraint components.
    pub fn penalty(&self, x: &[f64]) -> f64 {
        if !self.is_active() {
            return 0.0;
        }
        let c = self.map.eval(x);
        c.iter().enumerate().map(|(i, &ci)| self.component(ci, i)).sum()
    }

    /// Analytic gradient of the penalty with respect to the state.
    pub fn penalty_gradient(&self, x: &[f64]) -> Vec<f64> {
        if !self.is_active() {
            return vec![0.0; x.len()];
        }
        let c = self.map.eval(x);
        let k = self.steepness;
        // dp/dc_i = L * k/4 * (tanh^2(k(c-lo)/2) - tanh^2(k(c-hi)/2))
        let dpdc: Vec<f64> = c
            .iter()
            .enumerate()
            .map(|(i, &ci)| {
                let t1 = (0.5 * k * (ci - self.upper[i])).tanh();
                let t2 = (0.5 * k * (ci - self.lower[i])).tanh();
                self.limit * 0.25 * k * (t2 * t2 - t1 * t1)
            })
            .collect();
        let jac = self.map.jacobian(x);
        let mut grad = vec![0.0; x.len()];
        for r in 0..dpdc.len() {
            for col in 0..x.len() {
                grad[col] += dpdc[r] * jac.at(r, col);
            }
        }
        grad
    }

    /// Upload the constant leaves of the penalty once; the returned handle
    /// evaluates the penalty repeatedly on the same tape.
    pub fn upload(&self, tape: &mut Tape, state_dim: usize) -> TapedPenalty {
        if !self.is_active() {
            let zero = tape.scalar(0.0);
            return TapedPenalty {
                limit: 0.0,
                steepness: self.steepness,
                map: self.map.clone(),
                leaves: None,
                zero,
            };
        }
        let r = self.map.output_dim();
        let upper = tape.leaf(&self.upper, r, 1, false);
        let lower = tape.leaf(&self.lower, r, 1, false);
        let plateau = self.plateau();
        let plateau = tape.leaf(&plateau, r, 1, false);
        let selector = self.map.upload_selector(tape, state_dim);
        let zero = tape.scalar(0.0);
        TapedPenalty {
            limit: self.limit,
            steepness: self.steepness,
            map: self.map.clone(),
            leaves: Some(PenaltyLeaves {
                upper,
                lower,
                plateau,
                selector,
            }),
            zero,
        }
    }

    /// Single-shot taped evaluation (tests and gradient checks). Skips the
    /// value clamp: rounding can leave the result a few ulp below zero,
    /// which is irrelevant inside the Hamiltonian.
    pub fn penalty_taped(&self, tape: &mut Tape, x: Tensor) -> Result<Tensor, TapeError> {
        let taped = self.upload(tape, x.rows());
        taped.eval(tape, x)
    }

    /// Number of constraint components outside `[lower, upper]` at `x`.
    pub fn violations(&self, x: &[f64]) -> usize {
        let c = self.map.eval(x);
        c.iter()
            .enumerate()
            .filter(|(i, &ci)| ci < self.lower[*i] || ci > self.upper[*i])
            .count()
    }
}

struct PenaltyLeaves {
    upper: Tensor,
    lower: Tensor,
    plateau: Tensor,
    selector: Option<Tensor>,
}

/// Penalty constants uploaded onto one tape, reusable across rollout steps.
pub struct TapedPenalty {
    limit: f64,
    steepness: f64,
    map: ConstraintMap,
    leaves: Option<PenaltyLeaves>,
    zero: Tensor,
}

impl TapedPenalty {
    pub fn eval(&self, tape: &mut Tape, x: Tensor) -> Result<Tensor, TapeError> {
        let Some(leaves) = &self.leaves else {
            return Ok(self.zero);
        };
        let k = self.steepness;
        let c = self.map.eval_with_selector(tape, x, leaves.selector)?;
        let cu = tape.sub(c, leaves.upper)?;
        let cu = tape.scale(cu, 0.5 * k)?;
        let t1 = tape.tanh(cu)?;
        let cl = tape.sub(c, leaves.lower)?;
        let cl = tape.scale(cl, 0.5 * k)?;
        let t2 = tape.tanh(cl)?;
        let diff = tape.sub(t1, t2)?;
        let half = tape.scale(diff, 0.5)?;
        let shifted = tape.add(half, leaves.plateau)?;
        let scaled = tape.scale(shifted, self.limit)?;
        tape.sum(scaled)
    }
}

/// Control saturation bounds and the weights of the saturation cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaturationSpec {
    /// Per-channel limits `U_max`.
    pub limits: Vec<f64>,
    /// Per-channel positive weights `c_i`.
    pub weights: Vec<f64>,
}

impl SaturationSpec {
    pub fn validate(&self) -> Result<(), CostError> {
        if self.limits.len() != self.weights.len() {
            return Err(CostError::BadSpec(
                "saturation limits and weights must have equal length".into(),
            ));
        }
        if self.limits.iter().any(|&u| u <= 0.0) || self.weights.iter().any(|&c| c <= 0.0) {
            return Err(CostError::BadSpec(
                "saturation limits and weights must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.limits.len()
    }
}

/// The odd saturating sigmoid `sig(v) = 2/(1+e^-v) - 1`, evaluated as
/// `tanh(v/2)` and clamped strictly inside (-1, 1).
pub fn sig(v: f64) -> f64 {
    (0.5 * v).tanh().clamp(-(1.0 - 1e-15), 1.0 - 1e-15)
}

pub fn sig_vec(v: &[f64]) -> Vec<f64> {
    v.iter().copied().map(sig).collect()
}

/// Saturated optimal control `u* = U_max . sig(-R^-1 G^T V_x)`, strictly
/// inside the bounds for any finite input.
pub fn saturated_control(v_x: &[f64], g: &Mat, r_inv: &Mat, limits: &[f64]) -> Vec<f64> {
    let gtv = g.transpose().matvec(v_x);
    let arg: Vec<f64> = r_inv.matvec(&gtv).iter().map(|a| -a).collect();
    arg.iter()
        .zip(limits)
        .map(|(&a, &u)| u * sig(a))
        .collect()
}

/// Closed form of the saturation cost
/// `S_i(u) = c_i U_i [(1+z)ln(1+z) + (1-z)ln(1-z)]` with `z = u_i/U_i`,
/// summed over channels. Errors when a channel sits at or beyond its limit.
pub fn saturation_cost(sat: &SaturationSpec, u: &[f64]) -> Result<f64, CostError> {
    let mut total = 0.0;
    for i in 0..sat.dim() {
        let z = u[i] / sat.limits[i];
        if z.abs() >= 1.0 {
            return Err(CostError::ControlAtLimit {
                index: i,
                value: u[i],
                limit: sat.limits[i],
            });
        }
        let term = (1.0 + z) * (1.0 + z).ln() + (1.0 - z) * (1.0 - z).ln();
        total += sat.weights[i] * sat.limits[i] * term;
    }
    Ok(total)
}

/// Saturation constants uploaded onto one tape.
pub struct TapedSaturation {
    cu: Tensor,
}

impl SaturationSpec {
    pub fn upload(&self, tape: &mut Tape) -> TapedSaturation {
        let cu: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.limits)
            .map(|(c, u)| 2.0 * c * u)
            .collect();
        TapedSaturation {
            cu: tape.leaf(&cu, self.dim(), 1, false),
        }
    }
}

impl TapedSaturation {
    /// Saturation cost from the pre-saturation argument `a` (so
    /// `z = tanh(a/2)`): with `w = a/2`,
    /// `(1+z)ln(1+z) + (1-z)ln(1-z) = 2 (w tanh w - ln cosh w)`,
    /// which stays finite for any `a` where the closed form in `z` would
    /// hit `ln 0` after rounding.
    pub fn eval(&self, tape: &mut Tape, presat: Tensor) -> Result<Tensor, TapeError> {
        let w = tape.scale(presat, 0.5)?;
        let th = tape.tanh(w)?;
        let wt = tape.mul(w, th)?;
        let lc = tape.ln_cosh(w)?;
        let term = tape.sub(wt, lc)?;
        tape.dot(self.cu, term)
    }
}

/// Single-shot taped saturation cost (tests and gradient checks).
pub fn saturation_cost_taped(
    tape: &mut Tape,
    sat: &SaturationSpec,
    presat: Tensor,
) -> Result<Tensor, TapeError> {
    let taped = sat.upload(tape);
    taped.eval(tape, presat)
}

/// Quadratic state weights, control cost, target, and terminal cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    /// PSD running state-cost weights.
    pub q: Mat,
    /// PD control-cost matrix.
    pub r: Mat,
    pub target: Vec<f64>,
    /// PSD terminal-cost weights for `g(x) = 1/2 (x-target)^T Q_T (x-target)`.
    pub terminal_q: Mat,
    r_inv: Mat,
}

impl CostSpec {
    pub fn new(q: Mat, r: Mat, target: Vec<f64>, terminal_q: Mat) -> Result<Self, CostError> {
        let n = target.len();
        if q.shape() != (n, n) || terminal_q.shape() != (n, n) {
            return Err(CostError::BadSpec(format!(
                "state cost matrices must be {n}x{n}"
            )));
        }
        if !r.is_symmetric(1e-12) {
            return Err(CostError::BadSpec("R must be symmetric".into()));
        }
        if r.cholesky().is_none() {
            return Err(CostError::BadSpec("R must be positive definite".into()));
        }
        if !q.is_symmetric(1e-12) || !terminal_q.is_symmetric(1e-12) {
            return Err(CostError::BadSpec("Q matrices must be symmetric".into()));
        }
        let r_inv = r
            .inverse()
            .ok_or_else(|| CostError::BadSpec("R is not invertible".into()))?;
        Ok(CostSpec {
            q,
            r,
            target,
            terminal_q,
            r_inv,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.target.len()
    }

    pub fn control_dim(&self) -> usize {
        self.r.rows()
    }

    pub fn r_inv(&self) -> &Mat {
        &self.r_inv
    }

    fn quadratic_form(&self, w: &Mat, x: &[f64]) -> f64 {
        let d: Vec<f64> = x.iter().zip(&self.target).map(|(a, b)| a - b).collect();
        let wd = w.matvec(&d);
        0.5 * d.iter().zip(&wd).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Running quadratic cost `1/2 (x - target)^T Q (x - target)`.
    pub fn quadratic(&self, x: &[f64]) -> f64 {
        self.quadratic_form(&self.q, x)
    }

    /// Terminal cost `g(x)`.
    pub fn terminal(&self, x: &[f64]) -> f64 {
        self.quadratic_form(&self.terminal_q, x)
    }

    /// `grad g(x) = Q_T (x - target)`.
    pub fn terminal_gradient(&self, x: &[f64]) -> Vec<f64> {
        let d: Vec<f64> = x.iter().zip(&self.target).map(|(a, b)| a - b).collect();
        self.terminal_q.matvec(&d)
    }

    /// Upload the target and weight matrices once for repeated use.
    pub fn upload(&self, tape: &mut Tape) -> TapedCost {
        TapedCost {
            target: tape.leaf(&self.target, self.target.len(), 1, false),
            q: tape.leaf_mat(&self.q, false),
            terminal_q: tape.leaf_mat(&self.terminal_q, false),
            r_inv: tape.leaf_mat(&self.r_inv, false),
        }
    }

    /// Single-shot taped running cost (tests and gradient checks).
    pub fn quadratic_taped(&self, tape: &mut Tape, x: Tensor) -> Result<Tensor, TapeError> {
        let taped = self.upload(tape);
        taped.quadratic(tape, x)
    }

    /// Single-shot taped terminal cost.
    pub fn terminal_taped(&self, tape: &mut Tape, x: Tensor) -> Result<Tensor, TapeError> {
        let taped = self.upload(tape);
        taped.terminal(tape, x)
    }
}

/// Cost constants uploaded onto one tape.
pub struct TapedCost {
    target: Tensor,
    q: Tensor,
    terminal_q: Tensor,
    r_inv: Tensor,
}

impl TapedCost {
    fn quadratic_form(&self, tape: &mut Tape, w: Tensor, x: Tensor) -> Result<Tensor, TapeError> {
        let d = tape.sub(x, self.target)?;
        let wd = tape.matmul(w, d)?;
        let q = tape.dot(d, wd)?;
        tape.scale(q, 0.5)
    }

    pub fn quadratic(&self, tape: &mut Tape, x: Tensor) -> Result<Tensor, TapeError> {
        self.quadratic_form(tape, self.q, x)
    }

    pub fn terminal(&self, tape: &mut Tape, x: Tensor) -> Result<Tensor, TapeError> {
        self.quadratic_form(tape, self.terminal_q, x)
    }

    pub fn r_inv(&self) -> Tensor {
        self.r_inv
    }
}

/// Penalized running state cost `c(x) = q(x) + p(x)`.
pub fn state_cost(cost: &CostSpec, pen: &PenaltySpec, x: &[f64]) -> f64 {
    cost.quadratic(x) + pen.penalty(x)
}

/// Penalized saturated Hamiltonian
/// `h = c(x) + V_x^T G u* + sum_i S_i(u*_i)`.
pub fn hamiltonian(
    cost: &CostSpec,
    pen: &PenaltySpec,
    sat: &SaturationSpec,
    x: &[f64],
    v_x: &[f64],
    g: &Mat,
    u_star: &[f64],
) -> Result<f64, CostError> {
    let c = state_cost(cost, pen, x);
    let gu = g.matvec(u_star);
    let cross: f64 = v_x.iter().zip(&gu).map(|(a, b)| a * b).sum();
    let s = saturation_cost(sat, u_star)?;
    Ok(c + cross + s)
}

/// Violating (member, step) pairs over flattened trajectories, as
/// `(violating, total)`.
pub fn count_violations(
    states: &[f64],
    members: usize,
    steps_plus_one: usize,
    dim: usize,
    pen: &PenaltySpec,
) -> (usize, usize) {
    let mut violating = 0;
    let total = members * steps_plus_one;
    for m in 0..members {
        for s in 0..steps_plus_one {
            let base = (m * steps_plus_one + s) * dim;
            if pen.violations(&states[base..base + dim]) > 0 {
                violating += 1;
            }
        }
    }
    (violating, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn fig1_spec(k: f64) -> PenaltySpec {
        PenaltySpec {
            limit: 100.0,
            steepness: k,
            lower: vec![-1.0],
            upper: vec![3.0],
            map: ConstraintMap::States { indices: vec![0] },
        }
    }

    /// Literal two-logistic form of the penalty, as an independent oracle.
    fn penalty_logistic_form(spec: &PenaltySpec, c: f64) -> f64 {
        let k = spec.steepness;
        let l = spec.limit;
        let (lo, hi) = (spec.lower[0], spec.upper[0]);
        let mu = 0.5 * (lo + hi);
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        l * sig(k * (c - hi)) - l * sig(k * (c - lo)) + l - 2.0 * l * sig(k * (mu - hi))
    }

    #[test]
    fn penalty_is_exactly_zero_at_midpoint() {
        for k in [0.5, 1.5, 6.0, 50.0] {
            let spec = fig1_spec(k);
            assert_eq!(spec.penalty(&[1.0]), 0.0, "k = {k}");
        }
    }

    #[test]
    fn penalty_matches_literal_logistic_form() {
        let spec = fig1_spec(4.0);
        for c in [-2.5, -1.0, 0.0, 1.7, 3.0, 4.2] {
            let got = spec.penalty(&[c]);
            let want = penalty_logistic_form(&spec, c);
            assert_relative_eq!(got, want, epsilon = 1e-10, max_relative = 1e-12);
        }
    }

    #[test]
    fn penalty_plateaus_at_limit_outside_and_vanishes_inside() {
        let spec = fig1_spec(8.0);
        let far_out = spec.penalty(&[10.0]);
        assert!((far_out - 100.0).abs() < 1e-3, "plateau {far_out}");
        let far_out_low = spec.penalty(&[-8.0]);
        assert!((far_out_low - 100.0).abs() < 1e-3);
        assert!(spec.penalty(&[1.5]) < 1e-1);
    }

    #[test]
    fn penalty_grows_with_steepness_outside_the_boundary() {
        let mut last = -1.0;
        for k in [1.0, 2.0, 4.0, 8.0] {
            let p = fig1_spec(k).penalty(&[3.5]);
            assert!(p > last, "k = {k}: {p} <= {last}");
            last = p;
        }
        // and at a fixed offset past the upper bound
        let mut last = -1.0;
        for k in [1.0, 2.0, 4.0, 8.0] {
            let p = fig1_spec(k).penalty(&[3.0 + 0.5]);
            assert!(p > last);
            last = p;
        }
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let spec = fig1_spec(3.0);
        for c in [-1.4, 0.2, 2.9, 3.3] {
            let g = spec.penalty_gradient(&[c])[0];
            let h = 1e-6;
            let fd = (spec.penalty(&[c + h]) - spec.penalty(&[c - h])) / (2.0 * h);
            assert_relative_eq!(g, fd, epsilon = 1e-6, max_relative = 1e-4);
        }
    }

    #[test]
    fn penalty_gradient_is_zero_at_midpoint() {
        let spec = fig1_spec(2.0);
        assert_eq!(spec.penalty_gradient(&[1.0])[0], 0.0);
    }

    #[test]
    fn steep_penalty_gradient_underflows_cleanly_inside() {
        let spec = fig1_spec(50.0);
        let g = spec.penalty_gradient(&[1.0 + 0.2]);
        assert!(g[0].is_finite());
        assert_eq!(g[0], 0.0);
        let p = spec.penalty(&[1.2]);
        assert!(p.is_finite() && p >= 0.0);
    }

    proptest! {
        #[test]
        fn penalty_is_symmetric_about_midpoint(a in -20.0f64..20.0, k in 0.1f64..20.0) {
            let spec = fig1_spec(k);
            let mu = 1.0;
            let lhs = spec.penalty(&[mu + a]);
            let rhs = spec.penalty(&[mu - a]);
            prop_assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
        }

        #[test]
        fn penalty_is_monotone_away_from_midpoint(a in 0.0f64..20.0, d in 0.0f64..5.0, k in 0.1f64..20.0) {
            let spec = fig1_spec(k);
            let near = spec.penalty(&[1.0 + a]);
            let far = spec.penalty(&[1.0 + a + d]);
            prop_assert!(far >= near - 1e-12);
        }

        #[test]
        fn penalty_stays_within_its_ceiling(c in -100.0f64..100.0, k in 0.1f64..40.0) {
            let spec = fig1_spec(k);
            let p = spec.penalty(&[c]);
            prop_assert!(p >= 0.0);
            prop_assert!(p <= 100.0 + 1e-9);
        }

        #[test]
        fn sig_equals_logistic_identity(v in -40.0f64..40.0) {
            let logistic = 2.0 / (1.0 + (-v).exp()) - 1.0;
            prop_assert!((sig(v) - logistic).abs() < 1e-12);
        }

        #[test]
        fn saturation_cost_is_even(z in -0.99f64..0.99) {
            let sat = SaturationSpec { limits: vec![10.0], weights: vec![1.0] };
            let plus = saturation_cost(&sat, &[10.0 * z]).unwrap();
            let minus = saturation_cost(&sat, &[-10.0 * z]).unwrap();
            prop_assert!((plus - minus).abs() < 1e-12);
        }
    }

    #[test]
    fn sig_basics() {
        assert_eq!(sig(0.0), 0.0);
        assert!(sig(50.0) > 1.0 - 1e-9);
        assert!(sig(50.0) < 1.0);
        assert!(sig(-50.0) < -(1.0 - 1e-9));
    }

    #[test]
    fn saturated_control_is_strictly_interior() {
        let r_inv = Mat::eye(1);
        let g = Mat::new(4, 1, vec![0.0, 0.0, 1.0, 2.0]);
        let limits = [10.0];
        for scale in [0.0, 1.0, 1e3, 1e9] {
            let v_x = [0.0, 0.0, -scale, -scale];
            let u = saturated_control(&v_x, &g, &r_inv, &limits);
            assert!(u[0].abs() < 10.0, "u = {} at scale {scale}", u[0]);
        }
        // huge push toward the limit gets within a hair of 10 N
        let v_x = [0.0, 0.0, -1e9, -1e9];
        let u = saturated_control(&v_x, &g, &r_inv, &limits);
        assert!(u[0] > 10.0 - 1e-9);
    }

    #[test]
    fn saturated_control_zero_for_zero_value_gradient() {
        let r_inv = Mat::eye(1);
        let g = Mat::new(2, 1, vec![1.0, 1.0]);
        let u = saturated_control(&[0.0, 0.0], &g, &r_inv, &[10.0]);
        assert_eq!(u, vec![0.0]);
    }

    #[test]
    fn scaling_r_halves_presaturation_and_keeps_sign() {
        let g = Mat::new(2, 1, vec![1.0, 0.5]);
        let v_x = [2.0, -0.4];
        let r1 = Mat::new(1, 1, vec![1.0]).inverse().unwrap();
        let r2 = Mat::new(1, 1, vec![2.0]).inverse().unwrap();
        let u1 = saturated_control(&v_x, &g, &r1, &[10.0]);
        let u2 = saturated_control(&v_x, &g, &r2, &[10.0]);
        assert_eq!(u1[0].signum(), u2[0].signum());
        // pre-saturation argument halves: sig^-1 comparison
        let a1 = 2.0 * (u1[0] / 10.0).atanh();
        let a2 = 2.0 * (u2[0] / 10.0).atanh();
        assert_relative_eq!(a1, 2.0 * a2, epsilon = 1e-10);
    }

    /// Adaptive Simpson quadrature of `integrand` on `[a, b]`.
    fn adaptive_simpson(integrand: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
            (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b))
        }
        fn recurse(
            f: &dyn Fn(f64) -> f64,
            a: f64,
            b: f64,
            whole: f64,
            tol: f64,
            depth: u32,
        ) -> f64 {
            let m = 0.5 * (a + b);
            let left = simpson(f, a, m);
            let right = simpson(f, m, b);
            if depth == 0 || (left + right - whole).abs() < 15.0 * tol {
                left + right + (left + right - whole) / 15.0
            } else {
                recurse(f, a, m, left, tol / 2.0, depth - 1)
                    + recurse(f, m, b, right, tol / 2.0, depth - 1)
            }
        }
        recurse(integrand, a, b, simpson(integrand, a, b), tol, 40)
    }

    #[test]
    fn saturation_cost_closed_form_matches_quadrature() {
        let u_max = 10.0;
        let sat = SaturationSpec {
            limits: vec![u_max],
            weights: vec![1.0],
        };
        let inv_sig = |v: f64| ((1.0 + v / u_max) / (1.0 - v / u_max)).ln();
        for z in [0.1, 0.5, 0.9, 0.999, -0.7, -0.999] {
            let u = z * u_max;
            let closed = saturation_cost(&sat, &[u]).unwrap();
            let quad = adaptive_simpson(&inv_sig, 0.0, u, 1e-10);
            assert!(
                (closed - quad).abs() < 1e-6,
                "z = {z}: closed {closed} vs quadrature {quad}"
            );
        }
    }

    #[test]
    fn saturation_cost_zero_control_and_error_cases() {
        let sat = SaturationSpec {
            limits: vec![10.0],
            weights: vec![1.0],
        };
        assert_eq!(saturation_cost(&sat, &[0.0]).unwrap(), 0.0);
        assert!(matches!(
            saturation_cost(&sat, &[10.0]),
            Err(CostError::ControlAtLimit { index: 0, .. })
        ));
        assert!(saturation_cost(&sat, &[-10.5]).is_err());
    }

    #[test]
    fn taped_saturation_cost_matches_closed_form() {
        let sat = SaturationSpec {
            limits: vec![10.0, 4.0],
            weights: vec![1.0, 2.5],
        };
        let presat = [1.3, -0.7];
        let u: Vec<f64> = presat
            .iter()
            .zip(&sat.limits)
            .map(|(&a, &l)| l * sig(a))
            .collect();
        let closed = saturation_cost(&sat, &u).unwrap();
        let mut tape = Tape::new();
        let a = tape.leaf(&presat, 2, 1, false);
        let s = saturation_cost_taped(&mut tape, &sat, a).unwrap();
        assert_relative_eq!(tape.value_scalar(s), closed, epsilon = 1e-12);
    }

    fn toy_cost() -> CostSpec {
        CostSpec::new(
            Mat::diag(&[1.0, 2.0]),
            Mat::new(1, 1, vec![0.5]),
            vec![0.5, -1.0],
            Mat::diag(&[3.0, 1.0]),
        )
        .unwrap()
    }

    #[test]
    fn state_cost_is_sum_of_its_parts() {
        let cost = toy_cost();
        let pen = PenaltySpec {
            limit: 10.0,
            steepness: 2.0,
            lower: vec![-1.0],
            upper: vec![1.0],
            map: ConstraintMap::States { indices: vec![0] },
        };
        let x = [1.3, 0.4];
        let total = state_cost(&cost, &pen, &x);
        assert_relative_eq!(
            total,
            cost.quadratic(&x) + pen.penalty(&x),
            epsilon = 1e-15
        );
        // target with c_s at the midpoint costs nothing
        let pen_centered = PenaltySpec {
            lower: vec![0.0],
            upper: vec![1.0],
            ..pen.clone()
        };
        assert_eq!(state_cost(&cost, &pen_centered, &[0.5, -1.0]), 0.0);
        // zero Q reduces to the penalty alone
        let no_q = CostSpec::new(
            Mat::zeros(2, 2),
            Mat::new(1, 1, vec![0.5]),
            vec![0.5, -1.0],
            Mat::diag(&[3.0, 1.0]),
        )
        .unwrap();
        assert_relative_eq!(
            state_cost(&no_q, &pen, &x),
            pen.penalty(&x),
            epsilon = 1e-15
        );
    }

    #[test]
    fn hamiltonian_decomposes_exactly() {
        let cost = toy_cost();
        let pen = PenaltySpec {
            limit: 10.0,
            steepness: 2.0,
            lower: vec![-1.0],
            upper: vec![1.0],
            map: ConstraintMap::States { indices: vec![0] },
        };
        let sat = SaturationSpec {
            limits: vec![10.0],
            weights: vec![1.0],
        };
        let x = [0.7, -0.2];
        let v_x = [1.5, -3.0];
        let g = Mat::new(2, 1, vec![0.4, 1.1]);
        let u = saturated_control(&v_x, &g, cost.r_inv(), &sat.limits);
        let h = hamiltonian(&cost, &pen, &sat, &x, &v_x, &g, &u).unwrap();
        let gu = g.matvec(&u);
        let cross: f64 = v_x.iter().zip(&gu).map(|(a, b)| a * b).sum();
        let s = saturation_cost(&sat, &u).unwrap();
        assert_eq!(h - cross - s, state_cost(&cost, &pen, &x));
        // V_x = 0 gives u* = 0 and h = c(x)
        let h0 = hamiltonian(&cost, &pen, &sat, &x, &[0.0, 0.0], &g, &[0.0]).unwrap();
        assert_eq!(h0, state_cost(&cost, &pen, &x));
        // disabling the penalty reduces to the saturated Hamiltonian
        let pen_off = PenaltySpec {
            limit: 0.0,
            ..pen.clone()
        };
        let h_off = hamiltonian(&cost, &pen_off, &sat, &x, &v_x, &g, &u).unwrap();
        assert_relative_eq!(h_off, cost.quadratic(&x) + cross + s, epsilon = 1e-15);
    }

    #[test]
    fn energy_constraint_map_evaluates_and_differentiates() {
        let cart = CartPoleParams::default();
        let map = ConstraintMap::Energy { cart: cart.clone() };
        let x = [0.3, 1.2, -0.8, 2.0];
        assert_eq!(map.eval(&x)[0], cartpole_energy(&x, &cart));
        let jac = map.jacobian(&x);
        let h = 1e-6;
        for i in 0..4 {
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            let fd = (cartpole_energy(&xp, &cart) - cartpole_energy(&xm, &cart)) / (2.0 * h);
            assert_relative_eq!(jac.at(0, i), fd, epsilon = 1e-7, max_relative = 1e-6);
        }
    }

    #[test]
    fn violation_counting() {
        let pen = PenaltySpec {
            limit: 100.0,
            steepness: 1.0,
            lower: vec![-1.5, -2.5],
            upper: vec![1.5, 2.5],
            map: ConstraintMap::States {
                indices: vec![0, 2],
            },
        };
        // two members, two steps each, dim 4
        let states = [
            0.0, 0.0, 0.0, 0.0, // inside
            2.0, 0.0, 0.0, 0.0, // x out
            0.0, 0.0, -3.0, 0.0, // x_dot out
            1.4, 9.0, 2.4, 9.0, // inside (theta unconstrained)
        ];
        let (v, total) = count_violations(&states, 2, 2, 4, &pen);
        assert_eq!((v, total), (2, 4));
    }

    #[test]
    fn cost_spec_rejects_bad_r() {
        let err = CostSpec::new(
            Mat::eye(2),
            Mat::new(1, 1, vec![-1.0]),
            vec![0.0, 0.0],
            Mat::eye(2),
        );
        assert!(err.is_err());
    }
}
