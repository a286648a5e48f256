//! Layers shared by the models, built on the autograd tape.
//!
//! Layers own only [`ParamId`]s. Before use in a graph they are *bound*,
//! which copies each parameter onto the tape once so that recurrent unrolls
//! reuse the same leaf.

use clvc_autograd::{Graph, Matrix, ParamId, ParamStore, Var};
use rand::Rng;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}/w"), Matrix::xavier(input, output, rng));
        let b = store.add(format!("{name}/b"), Matrix::zeros(1, output));
        Self { w, b, input, output }
    }

    /// All-zero weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Self {
        let w = store.add(format!("{name}/w"), Matrix::zeros(input, output));
        let b = store.add(format!("{name}/b"), Matrix::zeros(1, output));
        Self { w, b, input, output }
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> BoundLinear {
        BoundLinear {
            w: g.param(store, self.w),
            b: g.param(store, self.b),
        }
    }

    pub fn num_params(&self) -> usize {
        self.input * self.output + self.output
    }
}

impl BoundLinear {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        g.linear(x, self.w, self.b)
    }
}

/// 1-D convolution over the time (row) axis with "same" padding.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub kernel: usize,
    pub linear: Linear,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            kernel,
            linear: Linear::new(store, name, input * kernel, output, rng),
        }
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> BoundConv1d {
        BoundConv1d {
            kernel: self.kernel,
            linear: self.linear.bind(g, store),
        }
    }

    pub fn num_params(&self) -> usize {
        self.linear.num_params()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundConv1d {
    pub kernel: usize,
    pub linear: BoundLinear,
}

impl BoundConv1d {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let t = g.shape(x).0;
        let cols = g.unfold(x, self.kernel, self.kernel / 2, 0, t);
        self.linear.apply(g, cols)
    }
}

/// Single LSTM layer; gate order in the packed weights is input, forget,
/// cell, output.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLstm {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b: Var,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let w_ih = store.add(format!("{name}/w_ih"), Matrix::xavier(input, 4 * hidden, rng));
        let w_hh = store.add(format!("{name}/w_hh"), Matrix::xavier(hidden, 4 * hidden, rng));
        // Forget-gate bias of 1 keeps early gradients flowing through time.
        let bias = Matrix::from_fn(1, 4 * hidden, |_, c| {
            if (hidden..2 * hidden).contains(&c) {
                1.0
            } else {
                0.0
            }
        });
        let b = store.add(format!("{name}/b"), bias);
        Self {
            w_ih,
            w_hh,
            b,
            input,
            hidden,
        }
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> BoundLstm {
        BoundLstm {
            w_ih: g.param(store, self.w_ih),
            w_hh: g.param(store, self.w_hh),
            b: g.param(store, self.b),
            hidden: self.hidden,
        }
    }

    pub fn num_params(&self) -> usize {
        (self.input + self.hidden + 1) * 4 * self.hidden
    }
}

impl BoundLstm {
    pub fn zero_state(&self, g: &mut Graph, batch: usize) -> LstmState {
        LstmState {
            h: g.constant(Matrix::zeros(batch, self.hidden)),
            c: g.constant(Matrix::zeros(batch, self.hidden)),
        }
    }

    /// Input projection `x · W_ih + b` for a whole sequence or batch.
    pub fn project(&self, g: &mut Graph, x: Var) -> Var {
        g.linear(x, self.w_ih, self.b)
    }

    /// One step given the already projected input.
    pub fn step_projected(&self, g: &mut Graph, xw: Var, state: LstmState) -> LstmState {
        let h = self.hidden;
        let hw = g.matmul(state.h, self.w_hh);
        let gates = g.add(xw, hw);
        let i = g.slice_cols(gates, 0, h);
        let i = g.sigmoid(i);
        let f = g.slice_cols(gates, h, h);
        let f = g.sigmoid(f);
        let cand = g.slice_cols(gates, 2 * h, h);
        let cand = g.tanh(cand);
        let o = g.slice_cols(gates, 3 * h, h);
        let o = g.sigmoid(o);
        let keep = g.mul(f, state.c);
        let write = g.mul(i, cand);
        let c = g.add(keep, write);
        let tc = g.tanh(c);
        let h = g.mul(o, tc);
        LstmState { h, c }
    }

    pub fn step(&self, g: &mut Graph, x: Var, state: LstmState) -> LstmState {
        let xw = self.project(g, x);
        self.step_projected(g, xw, state)
    }

    /// Runs over the rows of `x` (`T × input`), returning `T × hidden` in
    /// input order. With `reverse`, time runs from the last row to the first.
    pub fn run(&self, g: &mut Graph, x: Var, reverse: bool) -> Var {
        let t = g.shape(x).0;
        let xw = self.project(g, x);
        let mut state = self.zero_state(g, 1);
        let mut outputs = vec![state.h; t];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..t).rev())
        } else {
            Box::new(0..t)
        };
        for i in order {
            let row = g.slice_rows(xw, i, 1);
            state = self.step_projected(g, row, state);
            outputs[i] = state.h;
        }
        g.concat_rows(&outputs)
    }

    /// Runs a batch of equal-length sequences given per-step `B × input`
    /// inputs; returns per-step `B × hidden` outputs.
    pub fn run_batch(&self, g: &mut Graph, steps: &[Var]) -> Vec<Var> {
        let batch = g.shape(steps[0]).0;
        let mut state = self.zero_state(g, batch);
        steps
            .iter()
            .map(|&x| {
                state = self.step(g, x, state);
                state.h
            })
            .collect()
    }
}

/// Stack of bidirectional LSTM layers; each layer's output is the forward
/// and backward hidden states concatenated.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub layers: Vec<(Lstm, Lstm)>,
}

impl BiLstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(num_layers);
        let mut width = input;
        for l in 0..num_layers {
            let fwd = Lstm::new(store, &format!("{name}/{l}/fwd"), width, hidden, rng);
            let bwd = Lstm::new(store, &format!("{name}/{l}/bwd"), width, hidden, rng);
            layers.push((fwd, bwd));
            width = 2 * hidden;
        }
        Self { layers }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |(f, _)| 2 * f.hidden)
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|(f, b)| f.num_params() + b.num_params())
            .sum()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for (fwd, bwd) in &self.layers {
            let f = fwd.bind(g, store);
            let b = bwd.bind(g, store);
            let hf = f.run(g, h, false);
            let hb = b.run(g, h, true);
            h = g.concat_cols(&[hf, hb]);
        }
        h
    }
}

/// Per-dimension standardization with statistics from a training corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Fits over all rows of all matrices; `std` is floored at `1e-5`.
    pub fn fit<'a>(data: impl IntoIterator<Item = &'a Matrix>) -> Option<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for m in data {
            if sum.is_empty() {
                sum = vec![0.0; m.cols()];
                sq = vec![0.0; m.cols()];
            }
            for r in 0..m.rows() {
                for (c, &x) in m.row(r).iter().enumerate() {
                    sum[c] += x;
                    sq[c] += x * x;
                }
            }
            n += m.rows();
        }
        if n == 0 {
            return None;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n as f64 - m * m).max(0.0).sqrt().max(1e-5))
            .collect();
        Some(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        assert_eq!(x.cols(), self.dim(), "normalizer width mismatch");
        let mut out = x.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_rows(&[self.mean.clone(), self.std.clone()])
    }

    pub fn from_matrix(m: &Matrix) -> Option<Self> {
        (m.rows() == 2).then(|| Self {
            mean: m.row(0).to_vec(),
            std: m.row(1).to_vec(),
        })
    }

    pub fn round_to_f32(&mut self) {
        for v in self.mean.iter_mut().chain(self.std.iter_mut()) {
            *v = *v as f32 as f64;
        }
    }
}
