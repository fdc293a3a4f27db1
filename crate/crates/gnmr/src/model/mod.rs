//! Network building blocks shared by the graph model and the flat
//! recurrent baseline: linear layers, leaky-ReLU feedforward stacks, GRU
//! stacks, and parameter bookkeeping.

mod checkpoint;
mod gnmr;
mod gru_mr;

pub use checkpoint::{checkpoint_kind, CheckpointKind};
pub use gnmr::{ForwardPass, GnmrModel};
pub use gru_mr::GruMrModel;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{GruCellIds, Tape, Tensor, TensorId};
use crate::error::Result;

/// Negative-side slope of every leaky ReLU in the networks.
pub const LEAKY_ALPHA: f64 = 0.01;

/// Whether a forward pass applies dropout, and with which noise stream.
pub enum DropoutMode<'a> {
    Eval,
    Train { rate: f64, rng: &'a mut ChaCha8Rng },
}

impl DropoutMode<'_> {
    fn apply(&mut self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        match self {
            DropoutMode::Eval => Ok(x),
            DropoutMode::Train { rate, rng } => tape.dropout(x, *rate, rng, true),
        }
    }
}

/// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)], the fan-in being the
/// input dimension (row count) of the matrix.
fn init_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    let values = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(vec![rows, cols], values)
        .expect("init values are finite")
        .with_grad()
}

fn zero_bias(cols: usize) -> Tensor {
    Tensor::zeros(vec![cols]).with_grad()
}

/// y = xW + b.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LinearLayer {
    pub w: Tensor,
    pub b: Tensor,
}

pub(crate) struct LinearIds {
    pub w: TensorId,
    pub b: TensorId,
}

impl LinearLayer {
    fn new(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> Self {
        LinearLayer {
            w: init_matrix(rng, in_dim, out_dim),
            b: zero_bias(out_dim),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.weight"), &self.w));
        out.push((format!("{prefix}.bias"), &self.b));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.weight"), &mut self.w));
        out.push((format!("{prefix}.bias"), &mut self.b));
    }

    fn bind(&self, tape: &mut Tape, acc: &mut Vec<TensorId>) -> LinearIds {
        let w = tape.leaf(&self.w);
        let b = tape.leaf(&self.b);
        acc.push(w);
        acc.push(b);
        LinearIds { w, b }
    }
}

impl LinearIds {
    fn apply(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        let xw = tape.matmul(x, self.w)?;
        tape.add_bias(xw, self.b)
    }
}

/// Two leaky-ReLU layers with dropout after each activation.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct FeedForward {
    pub l1: LinearLayer,
    pub l2: LinearLayer,
}

pub(crate) struct FeedForwardIds {
    l1: LinearIds,
    l2: LinearIds,
}

impl FeedForward {
    pub fn new(rng: &mut ChaCha8Rng, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        FeedForward {
            l1: LinearLayer::new(rng, in_dim, hidden),
            l2: LinearLayer::new(rng, hidden, out_dim),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.l1.visit(&format!("{prefix}.layer1"), out);
        self.l2.visit(&format!("{prefix}.layer2"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.l1.visit_mut(&format!("{prefix}.layer1"), out);
        self.l2.visit_mut(&format!("{prefix}.layer2"), out);
    }

    fn bind(&self, tape: &mut Tape, acc: &mut Vec<TensorId>) -> FeedForwardIds {
        FeedForwardIds {
            l1: self.l1.bind(tape, acc),
            l2: self.l2.bind(tape, acc),
        }
    }
}

impl FeedForwardIds {
    fn apply(&self, tape: &mut Tape, x: TensorId, mode: &mut DropoutMode) -> Result<TensorId> {
        let h = self.l1.apply(tape, x)?;
        let h = tape.leaky_relu(h, LEAKY_ALPHA);
        let h = mode.apply(tape, h)?;
        let h = self.l2.apply(tape, h)?;
        let h = tape.leaky_relu(h, LEAKY_ALPHA);
        mode.apply(tape, h)
    }
}

/// One GRU cell's nine parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct GruLayerParams {
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Tensor,
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w_h: Tensor,
    pub u_h: Tensor,
    pub b_h: Tensor,
}

impl GruLayerParams {
    pub fn new(rng: &mut ChaCha8Rng, in_dim: usize, d: usize) -> Self {
        GruLayerParams {
            w_z: init_matrix(rng, in_dim, d),
            u_z: init_matrix(rng, d, d),
            b_z: zero_bias(d),
            w_r: init_matrix(rng, in_dim, d),
            u_r: init_matrix(rng, d, d),
            b_r: zero_bias(d),
            w_h: init_matrix(rng, in_dim, d),
            u_h: init_matrix(rng, d, d),
            b_h: zero_bias(d),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.w_z"), &self.w_z));
        out.push((format!("{prefix}.u_z"), &self.u_z));
        out.push((format!("{prefix}.b_z"), &self.b_z));
        out.push((format!("{prefix}.w_r"), &self.w_r));
        out.push((format!("{prefix}.u_r"), &self.u_r));
        out.push((format!("{prefix}.b_r"), &self.b_r));
        out.push((format!("{prefix}.w_h"), &self.w_h));
        out.push((format!("{prefix}.u_h"), &self.u_h));
        out.push((format!("{prefix}.b_h"), &self.b_h));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.w_z"), &mut self.w_z));
        out.push((format!("{prefix}.u_z"), &mut self.u_z));
        out.push((format!("{prefix}.b_z"), &mut self.b_z));
        out.push((format!("{prefix}.w_r"), &mut self.w_r));
        out.push((format!("{prefix}.u_r"), &mut self.u_r));
        out.push((format!("{prefix}.b_r"), &mut self.b_r));
        out.push((format!("{prefix}.w_h"), &mut self.w_h));
        out.push((format!("{prefix}.u_h"), &mut self.u_h));
        out.push((format!("{prefix}.b_h"), &mut self.b_h));
    }

    fn bind(&self, tape: &mut Tape, acc: &mut Vec<TensorId>) -> GruCellIds {
        let ids = [
            tape.leaf(&self.w_z),
            tape.leaf(&self.u_z),
            tape.leaf(&self.b_z),
            tape.leaf(&self.w_r),
            tape.leaf(&self.u_r),
            tape.leaf(&self.b_r),
            tape.leaf(&self.w_h),
            tape.leaf(&self.u_h),
            tape.leaf(&self.b_h),
        ];
        acc.extend_from_slice(&ids);
        ids
    }
}

/// Stacked GRU layers; the first layer reads `in_dim`, the rest read `d`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct GruStack {
    pub layers: Vec<GruLayerParams>,
    pub d: usize,
}

impl GruStack {
    pub fn new(rng: &mut ChaCha8Rng, in_dim: usize, d: usize, num_layers: usize) -> Self {
        let layers = (0..num_layers)
            .map(|l| GruLayerParams::new(rng, if l == 0 { in_dim } else { d }, d))
            .collect();
        GruStack { layers, d }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (l, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("{prefix}.layer{l}"), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("{prefix}.layer{l}"), out);
        }
    }

    fn bind(&self, tape: &mut Tape, acc: &mut Vec<TensorId>) -> Vec<GruCellIds> {
        self.layers.iter().map(|l| l.bind(tape, acc)).collect()
    }
}

/// Run a bound GRU stack over a step sequence of batch×in blocks; returns
/// the top layer's hidden state after every step. Hidden states start at
/// zero for every layer.
fn gru_stack_apply(
    tape: &mut Tape,
    layers: &[GruCellIds],
    steps: &[TensorId],
    batch: usize,
    d: usize,
) -> Result<Vec<TensorId>> {
    let mut seq: Vec<TensorId> = steps.to_vec();
    for ids in layers {
        let mut h = tape.zeros(vec![batch, d]);
        let mut out = Vec::with_capacity(seq.len());
        for &x in &seq {
            h = tape.gru_cell(x, h, ids)?;
            out.push(h);
        }
        seq = out;
    }
    Ok(seq)
}
