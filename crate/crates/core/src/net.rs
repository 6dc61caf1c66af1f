//! Recurrent value-gradient approximator: a single LSTM cell with a dense
//! head predicting `V_x(x_n)`, plus the trainable initial values `phi`
//! (initial value, value gradient, hidden and cell state).
//!
//! One parameter block set serves every unrolled timestep; uploading the
//! blocks onto a tape once per rollout is what makes the weights shared.

use crate::matrix::Mat;
use crate::streams::{stream, DOMAIN_INIT};
use crate::tape::{Tape, TapeError, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Gate order used throughout: input, forget, output, candidate.
pub const GATE_NAMES: [&str; 4] = ["i", "f", "o", "c"];

/// Architecture knobs that are fixed during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub hidden: usize,
    /// Per-dimension multiplier applied to the state before it enters the
    /// cell (fixed standardization, not trained).
    pub input_scale: Vec<f64>,
    /// Initial forget-gate bias.
    pub forget_bias: f64,
    /// Multiplier on the trainable initial value and value gradient; sets
    /// the natural scale of `y` relative to unit-scale parameters.
    pub value_scale: f64,
    /// Multiplier on the dense head output.
    pub output_scale: f64,
}

impl NetConfig {
    pub fn validate(&self, state_dim: usize) -> Result<(), String> {
        if self.hidden == 0 {
            return Err("network.hidden must be at least 1".into());
        }
        if self.input_scale.len() != state_dim {
            return Err(format!(
                "network.input_scale must have {state_dim} components"
            ));
        }
        if self.value_scale == 0.0 || self.output_scale == 0.0 {
            return Err("network value/output scales must be non-zero".into());
        }
        Ok(())
    }
}

/// Trainable parameters: `theta` (LSTM + head) and `phi` (initial values).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    /// Per-gate input weights, `hidden x n`, order i, f, o, c.
    pub w_gates: [Mat; 4],
    /// Per-gate recurrent weights, `hidden x hidden`.
    pub u_gates: [Mat; 4],
    /// Per-gate biases, `hidden x 1`.
    pub b_gates: [Mat; 4],
    /// Head weights, `n x hidden`.
    pub w_out: Mat,
    /// Head bias, `n x 1`.
    pub b_out: Mat,
    /// Initial value function estimate (pre value-scale), `1 x 1`.
    pub y0: Mat,
    /// Initial value gradient estimate (pre value-scale), `n x 1`.
    pub vx0: Mat,
    /// Initial hidden state, `hidden x 1`.
    pub h0: Mat,
    /// Initial cell state, `hidden x 1`.
    pub c0: Mat,
}

/// Index of the first `phi` block in [`NetParams::block_names`] order.
pub const PHI_START: usize = 14;
pub const BLOCK_COUNT: usize = 18;

/// Weights drawn from `N(0, 2/(fan_in + fan_out))` with `fan_in = cols`,
/// `fan_out = rows`.
pub fn xavier_init<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Mat::new(rows, cols, data)
}

impl NetParams {
    /// Fresh parameters: Xavier-normal weights, zero biases (forget gate
    /// offset by `forget_bias`), zero `phi`.
    pub fn init(cfg: &NetConfig, state_dim: usize, seed: u64) -> Self {
        let h = cfg.hidden;
        let mut rng = stream(seed, DOMAIN_INIT, 0, 0);
        let w_gates = std::array::from_fn(|_| xavier_init(h, state_dim, &mut rng));
        let u_gates = std::array::from_fn(|_| xavier_init(h, h, &mut rng));
        let mut b_gates: [Mat; 4] = std::array::from_fn(|_| Mat::zeros(h, 1));
        b_gates[1]
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = cfg.forget_bias);
        let w_out = xavier_init(state_dim, h, &mut rng);
        NetParams {
            w_gates,
            u_gates,
            b_gates,
            w_out,
            b_out: Mat::zeros(state_dim, 1),
            y0: Mat::zeros(1, 1),
            vx0: Mat::zeros(state_dim, 1),
            h0: Mat::zeros(h, 1),
            c0: Mat::zeros(h, 1),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.b_out.rows()
    }

    pub fn hidden(&self) -> usize {
        self.h0.rows()
    }

    /// Stable block names, `theta` first then `phi`.
    pub fn block_names() -> Vec<String> {
        let mut names = Vec::with_capacity(BLOCK_COUNT);
        for g in GATE_NAMES {
            names.push(format!("w_{g}"));
        }
        for g in GATE_NAMES {
            names.push(format!("u_{g}"));
        }
        for g in GATE_NAMES {
            names.push(format!("b_{g}"));
        }
        names.push("w_out".into());
        names.push("b_out".into());
        names.push("y0".into());
        names.push("vx0".into());
        names.push("h0".into());
        names.push("c0".into());
        names
    }

    pub fn blocks(&self) -> Vec<&Mat> {
        let mut v: Vec<&Mat> = Vec::with_capacity(BLOCK_COUNT);
        v.extend(self.w_gates.iter());
        v.extend(self.u_gates.iter());
        v.extend(self.b_gates.iter());
        v.push(&self.w_out);
        v.push(&self.b_out);
        v.push(&self.y0);
        v.push(&self.vx0);
        v.push(&self.h0);
        v.push(&self.c0);
        v
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Mat> {
        let mut v: Vec<&mut Mat> = Vec::with_capacity(BLOCK_COUNT);
        v.extend(self.w_gates.iter_mut());
        v.extend(self.u_gates.iter_mut());
        v.extend(self.b_gates.iter_mut());
        v.push(&mut self.w_out);
        v.push(&mut self.b_out);
        v.push(&mut self.y0);
        v.push(&mut self.vx0);
        v.push(&mut self.h0);
        v.push(&mut self.c0);
        v
    }

    /// Whether block `idx` belongs to `theta` (weight decay applies) rather
    /// than `phi`.
    pub fn is_theta(idx: usize) -> bool {
        idx < PHI_START
    }

    /// Squared L2 norm over the `theta` blocks only.
    pub fn theta_sq_norm(&self) -> f64 {
        self.blocks()
            .iter()
            .enumerate()
            .filter(|(i, _)| Self::is_theta(*i))
            .map(|(_, b)| b.sq_sum())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.is_finite())
    }
}

/// Parameter blocks uploaded onto a tape as trainable leaves, in
/// [`NetParams::block_names`] order, plus the constant input-scale leaf.
pub struct TapedNet {
    pub blocks: Vec<Tensor>,
    input_scale: Tensor,
    value_scale: f64,
    output_scale: f64,
    hidden: usize,
}

impl TapedNet {
    pub fn upload(params: &NetParams, cfg: &NetConfig, tape: &mut Tape) -> TapedNet {
        let blocks = params
            .blocks()
            .into_iter()
            .map(|m| tape.leaf_mat(m, true))
            .collect();
        let input_scale = tape.leaf(&cfg.input_scale, cfg.input_scale.len(), 1, false);
        TapedNet {
            blocks,
            input_scale,
            value_scale: cfg.value_scale,
            output_scale: cfg.output_scale,
            hidden: cfg.hidden,
        }
    }

    fn w(&self, gate: usize) -> Tensor {
        self.blocks[gate]
    }

    fn u(&self, gate: usize) -> Tensor {
        self.blocks[4 + gate]
    }

    fn b(&self, gate: usize) -> Tensor {
        self.blocks[8 + gate]
    }

    fn w_out(&self) -> Tensor {
        self.blocks[12]
    }

    fn b_out(&self) -> Tensor {
        self.blocks[13]
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Scaled `phi`: `(y0, vx0, h0, c0)` ready to seed a rollout.
    pub fn initial_values(
        &self,
        tape: &mut Tape,
    ) -> Result<(Tensor, Tensor, Tensor, Tensor), TapeError> {
        let y0 = tape.scale(self.blocks[14], self.value_scale)?;
        let vx0 = tape.scale(self.blocks[15], self.value_scale)?;
        Ok((y0, vx0, self.blocks[16], self.blocks[17]))
    }

    fn gate(
        &self,
        tape: &mut Tape,
        idx: usize,
        x: Tensor,
        h: Tensor,
    ) -> Result<Tensor, TapeError> {
        let wx = tape.matmul(self.w(idx), x)?;
        let uh = tape.matmul(self.u(idx), h)?;
        let s = tape.add(wx, uh)?;
        tape.add(s, self.b(idx))
    }

    /// One cell step: consumes the raw state and the previous `(H, C)`,
    /// returns the `V_x` prediction and the next `(H, C)`.
    pub fn lstm_step(
        &self,
        tape: &mut Tape,
        state: Tensor,
        h: Tensor,
        c: Tensor,
    ) -> Result<(Tensor, Tensor, Tensor), TapeError> {
        let x = tape.mul(state, self.input_scale)?;
        let pre_i = self.gate(tape, 0, x, h)?;
        let i = tape.sigmoid(pre_i)?;
        let pre_f = self.gate(tape, 1, x, h)?;
        let f = tape.sigmoid(pre_f)?;
        let pre_o = self.gate(tape, 2, x, h)?;
        let o = tape.sigmoid(pre_o)?;
        let pre_c = self.gate(tape, 3, x, h)?;
        let cand = tape.tanh(pre_c)?;
        let fc = tape.mul(f, c)?;
        let ic = tape.mul(i, cand)?;
        let c_next = tape.add(fc, ic)?;
        let tc = tape.tanh(c_next)?;
        let h_next = tape.mul(o, tc)?;
        let head = tape.matmul(self.w_out(), h_next)?;
        let biased = tape.add(head, self.b_out())?;
        let v_x = tape.scale(biased, self.output_scale)?;
        Ok((v_x, h_next, c_next))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cfg(hidden: usize, n: usize) -> NetConfig {
        NetConfig {
            hidden,
            input_scale: vec![1.0; n],
            forget_bias: 0.0,
            value_scale: 1.0,
            output_scale: 1.0,
        }
    }

    #[test]
    fn xavier_variance_matches_fan_formula() {
        let mut rng = stream(5, DOMAIN_INIT, 1, 0);
        let m = xavier_init(100, 100, &mut rng);
        let mean: f64 = m.data().iter().sum::<f64>() / m.len() as f64;
        let var: f64 = m.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / m.len() as f64;
        assert!((var - 0.01).abs() / 0.01 < 0.10, "variance {var}");
    }

    #[test]
    fn init_zeroes_biases_and_phi() {
        let c = cfg(8, 4);
        let p = NetParams::init(&c, 4, 9);
        for g in 0..4 {
            assert!(p.b_gates[g].data().iter().all(|&v| v == 0.0));
        }
        assert!(p.b_out.data().iter().all(|&v| v == 0.0));
        assert_eq!(p.y0.data(), &[0.0]);
        assert!(p.vx0.data().iter().all(|&v| v == 0.0));
        assert!(p.h0.data().iter().all(|&v| v == 0.0));
        assert!(p.c0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forget_bias_lands_on_the_forget_gate_only() {
        let mut c = cfg(4, 2);
        c.forget_bias = 1.0;
        let p = NetParams::init(&c, 2, 9);
        assert!(p.b_gates[1].data().iter().all(|&v| v == 1.0));
        assert!(p.b_gates[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let c = cfg(8, 4);
        let a = NetParams::init(&c, 4, 77);
        let b = NetParams::init(&c, 4, 77);
        assert_eq!(a, b);
        let other = NetParams::init(&c, 4, 78);
        assert_ne!(a, other);
    }

    #[test]
    fn zero_weights_predict_the_head_bias() {
        let c = cfg(4, 3);
        let mut p = NetParams::init(&c, 3, 1);
        for b in p.blocks_mut() {
            b.data_mut().fill(0.0);
        }
        p.b_out = Mat::col(&[0.5, -0.25, 2.0]);
        let mut tape = Tape::new();
        let net = TapedNet::upload(&p, &c, &mut tape);
        let x = tape.leaf(&[0.0, 0.0, 0.0], 3, 1, false);
        let h = tape.leaf(&vec![0.0; 4], 4, 1, false);
        let cc = tape.leaf(&vec![0.0; 4], 4, 1, false);
        let (vx, h1, _c1) = net.lstm_step(&mut tape, x, h, cc).unwrap();
        assert_eq!(tape.value(vx), &[0.5, -0.25, 2.0]);
        assert!(tape.value(h1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_steps_share_one_parameter_block_set() {
        let c = cfg(4, 2);
        let p = NetParams::init(&c, 2, 3);
        let mut tape = Tape::new();
        let nodes_before_upload = tape.node_count();
        let net = TapedNet::upload(&p, &c, &mut tape);
        let uploaded = tape.node_count() - nodes_before_upload;
        assert_eq!(uploaded, BLOCK_COUNT + 1); // blocks + input-scale constant

        let x = tape.leaf(&[0.1, -0.2], 2, 1, false);
        let h = tape.leaf(&vec![0.0; 4], 4, 1, false);
        let cc = tape.leaf(&vec![0.0; 4], 4, 1, false);
        let (_vx1, h1, c1) = net.lstm_step(&mut tape, x, h, cc).unwrap();
        let (_vx2, _h2, _c2) = net.lstm_step(&mut tape, x, h1, c1).unwrap();
        // unrolling added computation nodes but no new trainable leaves
        assert_eq!(tape.trainable_leaves().len(), BLOCK_COUNT);
    }

    #[test]
    fn lstm_matches_reference_recurrence() {
        // independent plain-f64 evaluation of the same cell
        let c = cfg(3, 2);
        let p = NetParams::init(&c, 2, 21);
        let x = [0.3, -0.7];
        let h0 = [0.05, -0.1, 0.2];
        let c0 = [0.0, 0.4, -0.3];

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let gate = |w: &Mat, u: &Mat, b: &Mat| -> Vec<f64> {
            (0..3)
                .map(|r| {
                    w.at(r, 0) * x[0]
                        + w.at(r, 1) * x[1]
                        + u.at(r, 0) * h0[0]
                        + u.at(r, 1) * h0[1]
                        + u.at(r, 2) * h0[2]
                        + b.at(r, 0)
                })
                .collect()
        };
        let i: Vec<f64> = gate(&p.w_gates[0], &p.u_gates[0], &p.b_gates[0])
            .iter()
            .map(|&v| sig(v))
            .collect();
        let f: Vec<f64> = gate(&p.w_gates[1], &p.u_gates[1], &p.b_gates[1])
            .iter()
            .map(|&v| sig(v))
            .collect();
        let o: Vec<f64> = gate(&p.w_gates[2], &p.u_gates[2], &p.b_gates[2])
            .iter()
            .map(|&v| sig(v))
            .collect();
        let g: Vec<f64> = gate(&p.w_gates[3], &p.u_gates[3], &p.b_gates[3])
            .iter()
            .map(|&v| v.tanh())
            .collect();
        let c1: Vec<f64> = (0..3).map(|k| f[k] * c0[k] + i[k] * g[k]).collect();
        let h1: Vec<f64> = (0..3).map(|k| o[k] * c1[k].tanh()).collect();
        let expect: Vec<f64> = (0..2)
            .map(|r| {
                p.w_out.at(r, 0) * h1[0]
                    + p.w_out.at(r, 1) * h1[1]
                    + p.w_out.at(r, 2) * h1[2]
                    + p.b_out.at(r, 0)
            })
            .collect();

        let mut tape = Tape::new();
        let net = TapedNet::upload(&p, &c, &mut tape);
        let xt = tape.leaf(&x, 2, 1, false);
        let ht = tape.leaf(&h0, 3, 1, false);
        let ct = tape.leaf(&c0, 3, 1, false);
        let (vx, h_t, c_t) = net.lstm_step(&mut tape, xt, ht, ct).unwrap();
        for k in 0..2 {
            assert_relative_eq!(tape.value(vx)[k], expect[k], epsilon = 1e-14);
        }
        for k in 0..3 {
            assert_relative_eq!(tape.value(h_t)[k], h1[k], epsilon = 1e-14);
            assert_relative_eq!(tape.value(c_t)[k], c1[k], epsilon = 1e-14);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let c = cfg(6, 4);
        let p = NetParams::init(&c, 4, 123);
        let run = || {
            let mut tape = Tape::new();
            let net = TapedNet::upload(&p, &c, &mut tape);
            let x = tape.leaf(&[0.2, 0.4, -0.6, 0.8], 4, 1, false);
            let (_, h0, c0) = {
                let h = tape.leaf(&vec![0.1; 6], 6, 1, false);
                let cc = tape.leaf(&vec![-0.1; 6], 6, 1, false);
                (0, h, cc)
            };
            let (vx, _, _) = net.lstm_step(&mut tape, x, h0, c0).unwrap();
            tape.value(vx).to_vec()
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
