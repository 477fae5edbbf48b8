//! Single-layer LSTM used to compress each modality's time series into a
//! fixed-size context vector.

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};
use rand::Rng;

/// Gate parameters of one LSTM layer.
///
/// Weight layout: input matrices `w_*` are `[hidden, input]`, recurrent
/// matrices `u_*` are `[hidden, hidden]`, biases `[hidden]`.
#[derive(Debug, Clone)]
pub struct LstmParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_i: Tensor,
    pub w_f: Tensor,
    pub w_g: Tensor,
    pub w_o: Tensor,
    pub u_i: Tensor,
    pub u_f: Tensor,
    pub u_g: Tensor,
    pub u_o: Tensor,
    pub b_i: Tensor,
    pub b_f: Tensor,
    pub b_g: Tensor,
    pub b_o: Tensor,
}

impl LstmParams {
    /// Uniform `(-1/sqrt(h), 1/sqrt(h))` init for all gates.
    pub fn init<R: Rng>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let mut w = |rows, cols| Tensor::uniform(vec![rows, cols], -bound, bound, rng);
        let (w_i, w_f, w_g, w_o) = (
            w(hidden_dim, input_dim),
            w(hidden_dim, input_dim),
            w(hidden_dim, input_dim),
            w(hidden_dim, input_dim),
        );
        let (u_i, u_f, u_g, u_o) = (
            w(hidden_dim, hidden_dim),
            w(hidden_dim, hidden_dim),
            w(hidden_dim, hidden_dim),
            w(hidden_dim, hidden_dim),
        );
        let mut b = || Tensor::uniform(vec![hidden_dim], -bound, bound, rng);
        let (b_i, b_f, b_g, b_o) = (b(), b(), b(), b());
        LstmParams {
            input_dim,
            hidden_dim,
            w_i,
            w_f,
            w_g,
            w_o,
            u_i,
            u_f,
            u_g,
            u_o,
            b_i,
            b_f,
            b_g,
            b_o,
        }
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        LstmParams {
            input_dim,
            hidden_dim,
            w_i: Tensor::zeros(vec![hidden_dim, input_dim]),
            w_f: Tensor::zeros(vec![hidden_dim, input_dim]),
            w_g: Tensor::zeros(vec![hidden_dim, input_dim]),
            w_o: Tensor::zeros(vec![hidden_dim, input_dim]),
            u_i: Tensor::zeros(vec![hidden_dim, hidden_dim]),
            u_f: Tensor::zeros(vec![hidden_dim, hidden_dim]),
            u_g: Tensor::zeros(vec![hidden_dim, hidden_dim]),
            u_o: Tensor::zeros(vec![hidden_dim, hidden_dim]),
            b_i: Tensor::zeros(vec![hidden_dim]),
            b_f: Tensor::zeros(vec![hidden_dim]),
            b_g: Tensor::zeros(vec![hidden_dim]),
            b_o: Tensor::zeros(vec![hidden_dim]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, d) = (self.hidden_dim, self.input_dim);
        for (name, t, rows, cols) in [
            ("w_i", &self.w_i, h, d),
            ("w_f", &self.w_f, h, d),
            ("w_g", &self.w_g, h, d),
            ("w_o", &self.w_o, h, d),
            ("u_i", &self.u_i, h, h),
            ("u_f", &self.u_f, h, h),
            ("u_g", &self.u_g, h, h),
            ("u_o", &self.u_o, h, h),
        ] {
            if t.shape() != [rows, cols] {
                return Err(Error::ShapeMismatch(format!(
                    "lstm {name}: expected [{rows}, {cols}], got {:?}",
                    t.shape()
                )));
            }
        }
        for (name, t) in [
            ("b_i", &self.b_i),
            ("b_f", &self.b_f),
            ("b_g", &self.b_g),
            ("b_o", &self.b_o),
        ] {
            if t.shape() != [h] {
                return Err(Error::ShapeMismatch(format!(
                    "lstm {name}: expected [{h}], got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

impl LstmParams {
    pub fn bind(&self, tape: &mut Tape, binder: &mut crate::tensor::Binder, prefix: &str) -> BoundLstm {
        BoundLstm {
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            w_i: binder.leaf(tape, format!("{prefix}.w_i"), &self.w_i),
            w_f: binder.leaf(tape, format!("{prefix}.w_f"), &self.w_f),
            w_g: binder.leaf(tape, format!("{prefix}.w_g"), &self.w_g),
            w_o: binder.leaf(tape, format!("{prefix}.w_o"), &self.w_o),
            u_i: binder.leaf(tape, format!("{prefix}.u_i"), &self.u_i),
            u_f: binder.leaf(tape, format!("{prefix}.u_f"), &self.u_f),
            u_g: binder.leaf(tape, format!("{prefix}.u_g"), &self.u_g),
            u_o: binder.leaf(tape, format!("{prefix}.u_o"), &self.u_o),
            b_i: binder.leaf(tape, format!("{prefix}.b_i"), &self.b_i),
            b_f: binder.leaf(tape, format!("{prefix}.b_f"), &self.b_f),
            b_g: binder.leaf(tape, format!("{prefix}.b_g"), &self.b_g),
            b_o: binder.leaf(tape, format!("{prefix}.b_o"), &self.b_o),
        }
    }

    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.w_i"), &self.w_i);
        f(format!("{prefix}.w_f"), &self.w_f);
        f(format!("{prefix}.w_g"), &self.w_g);
        f(format!("{prefix}.w_o"), &self.w_o);
        f(format!("{prefix}.u_i"), &self.u_i);
        f(format!("{prefix}.u_f"), &self.u_f);
        f(format!("{prefix}.u_g"), &self.u_g);
        f(format!("{prefix}.u_o"), &self.u_o);
        f(format!("{prefix}.b_i"), &self.b_i);
        f(format!("{prefix}.b_f"), &self.b_f);
        f(format!("{prefix}.b_g"), &self.b_g);
        f(format!("{prefix}.b_o"), &self.b_o);
    }

    pub fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(format!("{prefix}.w_i"), &mut self.w_i);
        f(format!("{prefix}.w_f"), &mut self.w_f);
        f(format!("{prefix}.w_g"), &mut self.w_g);
        f(format!("{prefix}.w_o"), &mut self.w_o);
        f(format!("{prefix}.u_i"), &mut self.u_i);
        f(format!("{prefix}.u_f"), &mut self.u_f);
        f(format!("{prefix}.u_g"), &mut self.u_g);
        f(format!("{prefix}.u_o"), &mut self.u_o);
        f(format!("{prefix}.b_i"), &mut self.b_i);
        f(format!("{prefix}.b_f"), &mut self.b_f);
        f(format!("{prefix}.b_g"), &mut self.b_g);
        f(format!("{prefix}.b_o"), &mut self.b_o);
    }
}

/// LSTM parameters bound onto a tape for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BoundLstm {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_i: NodeId,
    pub w_f: NodeId,
    pub w_g: NodeId,
    pub w_o: NodeId,
    pub u_i: NodeId,
    pub u_f: NodeId,
    pub u_g: NodeId,
    pub u_o: NodeId,
    pub b_i: NodeId,
    pub b_f: NodeId,
    pub b_g: NodeId,
    pub b_o: NodeId,
}

/// Standard LSTM recurrence over `seq: [L, input_dim]` with zero initial
/// state. Returns the per-step hidden states `[L, hidden]` and the final
/// hidden state `[hidden]`.
pub fn lstm_forward(tape: &mut Tape, seq: NodeId, p: &BoundLstm) -> Result<(NodeId, NodeId)> {
    let shape = tape.shape(seq).to_vec();
    if shape.len() != 2 || shape[1] != p.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "lstm input: expected [L, {}], got {:?}",
            p.input_dim, shape
        )));
    }
    let steps = shape[0];
    if steps == 0 {
        return Err(Error::EmptySequence);
    }
    let h = p.hidden_dim;

    // transpose the [h, d] weights once so each step is a [1,d] x [d,h] product
    let w_it = tape.transpose(p.w_i)?;
    let w_ft = tape.transpose(p.w_f)?;
    let w_gt = tape.transpose(p.w_g)?;
    let w_ot = tape.transpose(p.w_o)?;
    let u_it = tape.transpose(p.u_i)?;
    let u_ft = tape.transpose(p.u_f)?;
    let u_gt = tape.transpose(p.u_g)?;
    let u_ot = tape.transpose(p.u_o)?;

    let mut h_prev = tape.constant(Tensor::zeros(vec![1, h]));
    let mut c_prev = tape.constant(Tensor::zeros(vec![1, h]));
    let mut states = Vec::with_capacity(steps);
    for t in 0..steps {
        let x_t = tape.row(seq, t)?;
        let gate = |tape: &mut Tape, wt, ut, b| -> Result<NodeId> {
            let xw = tape.matmul(x_t, wt)?;
            let hu = tape.matmul(h_prev, ut)?;
            let s = tape.add(xw, hu)?;
            tape.add_row(s, b)
        };
        let i_pre = gate(tape, w_it, u_it, p.b_i)?;
        let f_pre = gate(tape, w_ft, u_ft, p.b_f)?;
        let g_pre = gate(tape, w_gt, u_gt, p.b_g)?;
        let o_pre = gate(tape, w_ot, u_ot, p.b_o)?;
        let i = tape.sigmoid(i_pre)?;
        let f = tape.sigmoid(f_pre)?;
        let g = tape.tanh(g_pre)?;
        let o = tape.sigmoid(o_pre)?;
        let fc = tape.mul(f, c_prev)?;
        let ig = tape.mul(i, g)?;
        let c = tape.add(fc, ig)?;
        let ct = tape.tanh(c)?;
        let h_t = tape.mul(o, ct)?;
        states.push(h_t);
        h_prev = h_t;
        c_prev = c;
    }
    let all = tape.concat_rows(&states)?;
    let last = tape.reshape(*states.last().unwrap(), vec![h])?;
    Ok((all, last))
}
