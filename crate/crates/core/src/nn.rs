//! Small trainable building blocks expressed on the [`Tape`].

#[allow(unused_imports)]
use num_traits::Float;
use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `y = x W + b` on `[m, in]` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let std = (1.0 / inputs as f64).sqrt();
        let w = store.add_normal(format!("{name}.w"), &[inputs, outputs], std, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[outputs]));
        Self { w, b, inputs, outputs }
    }

    /// Zero-initialized layer.
    pub fn zeros(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[inputs, outputs]));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[outputs]));
        Self { w, b, inputs, outputs }
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Var {
        let y = tape.matmul(x, p.get(self.w));
        tape.add_row(y, p.get(self.b))
    }
}

/// Single-layer LSTM with gates ordered input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, inputs: usize, hidden: usize, rng: &mut R) -> Self {
        let std_i = (1.0 / inputs as f64).sqrt();
        let std_h = (1.0 / hidden as f64).sqrt();
        let w_ih = store.add_normal(format!("{name}.w_ih"), &[inputs, 4 * hidden], std_i, rng);
        let w_hh = store.add_normal(format!("{name}.w_hh"), &[hidden, 4 * hidden], std_h, rng);
        // forget-gate bias starts at 1
        let b = Tensor::from_fn(&[4 * hidden], |i| if (hidden..2 * hidden).contains(&i) { 1.0 } else { 0.0 });
        let b = store.add(format!("{name}.b"), b);
        Self { w_ih, w_hh, b, inputs, hidden }
    }

    /// One step for a batch: `x: [B, inputs]`, state `[B, hidden]`.
    pub fn cell(&self, tape: &Tape, p: &Bound, x: Var, h: Var, c: Var) -> (Var, Var) {
        let zx = tape.add_row(tape.matmul(x, p.get(self.w_ih)), p.get(self.b));
        self.gates(tape, p, zx, h, c)
    }

    fn gates(&self, tape: &Tape, p: &Bound, zx: Var, h: Var, c: Var) -> (Var, Var) {
        let h_dim = self.hidden;
        let z = tape.add(zx, tape.matmul(h, p.get(self.w_hh)));
        let i = tape.sigmoid(tape.slice_cols(z, 0, h_dim));
        let f = tape.sigmoid(tape.slice_cols(z, h_dim, h_dim));
        let g = tape.tanh(tape.slice_cols(z, 2 * h_dim, h_dim));
        let o = tape.sigmoid(tape.slice_cols(z, 3 * h_dim, h_dim));
        let c = tape.add(tape.mul(f, c), tape.mul(i, g));
        let h = tape.mul(o, tape.tanh(c));
        (h, c)
    }

    /// Zero state for `batch` sequences.
    pub fn zero_state(&self, tape: &Tape, batch: usize) -> (Var, Var) {
        (tape.constant(Tensor::zeros(&[batch, self.hidden])), tape.constant(Tensor::zeros(&[batch, self.hidden])))
    }

    /// Runs over the rows of `xs: [T, inputs]` from a zero state; returns `[T, hidden]`.
    pub fn forward(&self, tape: &Tape, p: &Bound, xs: Var) -> Var {
        let steps = tape.shape(xs)[0];
        let proj = tape.add_row(tape.matmul(xs, p.get(self.w_ih)), p.get(self.b));
        let (mut h, mut c) = self.zero_state(tape, 1);
        let mut outs = Vec::with_capacity(steps);
        for t in 0..steps {
            (h, c) = self.gates(tape, p, tape.row(proj, t), h, c);
            outs.push(h);
        }
        tape.stack_rows(&outs)
    }
}

/// Two linear layers with a `tanh` between them.
#[derive(Clone, Debug)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp2 {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, inputs: usize, hidden: usize, outputs: usize, rng: &mut R) -> Self {
        let first = Linear::new(store, &format!("{name}.0"), inputs, hidden, rng);
        let second = Linear::new(store, &format!("{name}.1"), hidden, outputs, rng);
        Self { first, second }
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Var {
        let h = self.first.forward(tape, p, x);
        let h = tape.tanh(h);
        self.second.forward(tape, p, h)
    }
}
