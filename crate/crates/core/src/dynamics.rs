//! Controlled SDE models and Euler-Maruyama stepping.
//!
//! A model supplies the triple `(f, G, Sigma)` of the controlled SDE
//! `dx = f(x,t) dt + G(x,t) u dt + Sigma(x,t) dw` both as plain functions
//! and as tape-recorded graphs so the rollout can differentiate through the
//! state chain.

use crate::matrix::Mat;
use crate::tape::{Tape, TapeError, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("non-finite state after Euler step: {state:?}")]
    NonFinite { state: Vec<f64> },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// A controlled diffusion. `drift`/`control_matrix`/`diffusion` are the
/// plain evaluations; the `_taped` variants record the same computation on
/// a gradient tape.
pub trait Dynamics: Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;

    fn drift(&self, x: &[f64], t: f64) -> Vec<f64>;
    fn control_matrix(&self, x: &[f64], t: f64) -> Mat;
    fn diffusion(&self, x: &[f64], t: f64) -> Mat;

    fn drift_taped(&self, tape: &mut Tape, x: Tensor, t: f64) -> Result<Tensor, TapeError>;
    fn control_matrix_taped(&self, tape: &mut Tape, x: Tensor, t: f64)
        -> Result<Tensor, TapeError>;
}

/// Cart-pole physical constants. Angle is measured from the downward
/// position; the pole is a point mass at the tip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CartPoleParams {
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub pole_length: f64,
    pub gravity: f64,
    /// Multiplier on the velocity-channel diffusion entries.
    pub noise_scale: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        CartPoleParams {
            cart_mass: 1.0,
            pole_mass: 0.01,
            pole_length: 0.5,
            gravity: 9.81,
            noise_scale: 1.0,
        }
    }
}

impl CartPoleParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.cart_mass <= 0.0 || self.pole_mass <= 0.0 || self.pole_length <= 0.0 {
            return Err("cart_mass, pole_mass, pole_length must be positive".into());
        }
        if self.noise_scale < 0.0 {
            return Err("noise_scale must be non-negative".into());
        }
        Ok(())
    }

    /// Disturbances hit the two velocity channels, discounted by 0.25.
    pub fn velocity_noise(&self) -> f64 {
        self.noise_scale * 0.25
    }
}

/// State layout: `[x, theta, x_dot, theta_dot]`.
pub const CARTPOLE_DIM: usize = 4;

/// Unforced accelerations, solved from the implicit equation pair
///   (M+m) x'' + mL sin(th) th'^2 - mL cos(th) th'' = u
///   mL^2 th'' - mL cos(th) x''  - mgL sin(th)      = 0
/// giving x'' = (u + m sin(th)(g cos(th) - L th'^2)) / (M + m sin^2(th))
/// and   th'' = (g sin(th) + cos(th) x'') / L.
pub fn cartpole_drift(s: &[f64], p: &CartPoleParams) -> Vec<f64> {
    let (theta, xd, td) = (s[1], s[2], s[3]);
    let (m, big_m, l, g) = (p.pole_mass, p.cart_mass, p.pole_length, p.gravity);
    let sin = theta.sin();
    let cos = theta.cos();
    let denom = big_m + m * sin * sin;
    let xdd = m * sin * (g * cos - l * td * td) / denom;
    let tdd = (g * sin + cos * xdd) / l;
    vec![xd, td, xdd, tdd]
}

/// Column of control influence: the coefficient of `u` in the solved
/// accelerations.
pub fn cartpole_control_matrix(s: &[f64], p: &CartPoleParams) -> Mat {
    let theta = s[1];
    let sin = theta.sin();
    let cos = theta.cos();
    let denom = p.cart_mass + p.pole_mass * sin * sin;
    let dinv = 1.0 / denom;
    Mat::new(4, 1, vec![0.0, 0.0, dinv, cos * dinv / p.pole_length])
}

/// Diffusion matrix: zeros on the position/angle rows, `noise_scale * 0.25`
/// on the velocity diagonal.
pub fn cartpole_diffusion(p: &CartPoleParams) -> Mat {
    let s = p.velocity_noise();
    Mat::new(4, 2, vec![0.0, 0.0, 0.0, 0.0, s, 0.0, 0.0, s])
}

/// Total mechanical energy (cart kinetic + pole potential + pole kinetic).
pub fn cartpole_energy(s: &[f64], p: &CartPoleParams) -> f64 {
    let (theta, xd, td) = (s[1], s[2], s[3]);
    let (m, big_m, l, g) = (p.pole_mass, p.cart_mass, p.pole_length, p.gravity);
    0.5 * big_m * xd * xd + m * g * l * (1.0 - theta.cos()) + 0.5 * m * l * l * td * td
}

pub fn cartpole_energy_gradient(s: &[f64], p: &CartPoleParams) -> Vec<f64> {
    let (theta, xd, td) = (s[1], s[2], s[3]);
    let (m, big_m, l, g) = (p.pole_mass, p.cart_mass, p.pole_length, p.gravity);
    vec![0.0, m * g * l * theta.sin(), big_m * xd, m * l * l * td]
}

pub fn cartpole_energy_taped(
    tape: &mut Tape,
    x: Tensor,
    p: &CartPoleParams,
) -> Result<Tensor, TapeError> {
    let (m, big_m, l, g) = (p.pole_mass, p.cart_mass, p.pole_length, p.gravity);
    let theta = tape.slice_rows(x, 1, 1)?;
    let xd = tape.slice_rows(x, 2, 1)?;
    let td = tape.slice_rows(x, 3, 1)?;
    let xd2 = tape.square(xd)?;
    let cart_ke = tape.scale(xd2, 0.5 * big_m)?;
    let cos = tape.cos(theta)?;
    let neg_cos = tape.neg(cos)?;
    let one_minus = tape.offset(neg_cos, 1.0)?;
    let pot = tape.scale(one_minus, m * g * l)?;
    let td2 = tape.square(td)?;
    let pole_ke = tape.scale(td2, 0.5 * m * l * l)?;
    let partial = tape.add(cart_ke, pot)?;
    tape.add(partial, pole_ke)
}

/// Cart-pole instance of [`Dynamics`].
#[derive(Clone, Debug)]
pub struct CartPole {
    pub params: CartPoleParams,
}

impl CartPole {
    pub fn new(params: CartPoleParams) -> Self {
        CartPole { params }
    }

    /// `Gamma` with `G = Sigma * Gamma`, solved on the velocity sub-block
    /// where `Sigma` is diagonal.
    pub fn gamma(&self, x: &[f64]) -> Mat {
        let g = cartpole_control_matrix(x, &self.params);
        let s = self.params.velocity_noise();
        Mat::new(2, 1, vec![g.at(2, 0) / s, g.at(3, 0) / s])
    }
}

impl Dynamics for CartPole {
    fn state_dim(&self) -> usize {
        CARTPOLE_DIM
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn noise_dim(&self) -> usize {
        2
    }

    fn drift(&self, x: &[f64], _t: f64) -> Vec<f64> {
        cartpole_drift(x, &self.params)
    }

    fn control_matrix(&self, x: &[f64], _t: f64) -> Mat {
        cartpole_control_matrix(x, &self.params)
    }

    fn diffusion(&self, _x: &[f64], _t: f64) -> Mat {
        cartpole_diffusion(&self.params)
    }

    fn drift_taped(&self, tape: &mut Tape, x: Tensor, _t: f64) -> Result<Tensor, TapeError> {
        let p = &self.params;
        let (m, big_m, l, g) = (p.pole_mass, p.cart_mass, p.pole_length, p.gravity);
        let theta = tape.slice_rows(x, 1, 1)?;
        let vel = tape.slice_rows(x, 2, 2)?;
        let td = tape.slice_rows(x, 3, 1)?;
        let sin = tape.sin(theta)?;
        let cos = tape.cos(theta)?;
        let sin2 = tape.square(sin)?;
        let msin2 = tape.scale(sin2, m)?;
        let denom = tape.offset(msin2, big_m)?;
        let dinv = tape.recip(denom)?;
        let td2 = tape.square(td)?;
        let ltd2 = tape.scale(td2, l)?;
        let gcos = tape.scale(cos, g)?;
        let bracket = tape.sub(gcos, ltd2)?;
        let sbracket = tape.mul(sin, bracket)?;
        let msb = tape.scale(sbracket, m)?;
        let xdd = tape.mul(msb, dinv)?;
        let gsin = tape.scale(sin, g)?;
        let cxdd = tape.mul(cos, xdd)?;
        let num = tape.add(gsin, cxdd)?;
        let tdd = tape.scale(num, 1.0 / l)?;
        tape.concat(&[vel, xdd, tdd])
    }

    fn control_matrix_taped(
        &self,
        tape: &mut Tape,
        x: Tensor,
        _t: f64,
    ) -> Result<Tensor, TapeError> {
        let p = &self.params;
        let (m, big_m, l) = (p.pole_mass, p.cart_mass, p.pole_length);
        let theta = tape.slice_rows(x, 1, 1)?;
        let sin = tape.sin(theta)?;
        let cos = tape.cos(theta)?;
        let sin2 = tape.square(sin)?;
        let msin2 = tape.scale(sin2, m)?;
        let denom = tape.offset(msin2, big_m)?;
        let dinv = tape.recip(denom)?;
        let cd = tape.mul(cos, dinv)?;
        let fourth = tape.scale(cd, 1.0 / l)?;
        let zeros = tape.leaf(&[0.0, 0.0], 2, 1, false);
        tape.concat(&[zeros, dinv, fourth])
    }
}

/// One explicit Euler-Maruyama step: `x + f dt + G u dt + Sigma dw`.
pub fn euler_step(
    model: &dyn Dynamics,
    x: &[f64],
    u: &[f64],
    dw: &[f64],
    t: f64,
    dt: f64,
) -> Result<Vec<f64>, DynamicsError> {
    let n = model.state_dim();
    if x.len() != n {
        return Err(DynamicsError::Dimension {
            expected: n,
            got: x.len(),
        });
    }
    let f = model.drift(x, t);
    let gu = model.control_matrix(x, t).matvec(u);
    let sdw = model.diffusion(x, t).matvec(dw);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        out.push(x[i] + f[i] * dt + gu[i] * dt + sdw[i]);
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(DynamicsError::NonFinite { state: out });
    }
    Ok(out)
}

/// i.i.d. Brownian increments, `N(0, dt)` per component.
pub fn sample_noise<R: Rng + ?Sized>(rng: &mut R, dim: usize, dt: f64) -> Vec<f64> {
    let scale = dt.sqrt();
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}
