//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A [`Tape`] owns an arena of tensor nodes and an ordered list of executed
//! primitive operations. Forward methods append nodes and records; `backward`
//! replays the records once, in reverse, accumulating gradients with `+=`
//! across fan-out. A tape is single-owner and one-shot: a second backward
//! call is an error rather than a silent double accumulation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::matmul::gemm;
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor node stored on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Node {
    fn rows(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    fn cols(&self) -> usize {
        match self.shape.last() {
            Some(&c) if self.shape.len() >= 2 => c,
            _ => self.values.len(),
        }
    }
}

/// Saved forward intermediates for one gated-cell application.
struct GruSaved {
    z: Vec<f64>,
    r: Vec<f64>,
    hh: Vec<f64>,
    rh: Vec<f64>,
}

/// Parameter ids for one gated cell: (w_z, u_z, b_z, w_r, u_r, b_r, w_h, u_h, b_h).
pub type GruCellIds = [TensorId; 9];

enum Op {
    Matmul {
        a: TensorId,
        b: TensorId,
        out: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
        out: TensorId,
    },
    /// out = a + c·b
    AddScaled {
        a: TensorId,
        b: TensorId,
        c: f64,
        out: TensorId,
    },
    /// Broadcast a row vector over every row of x.
    AddBias {
        x: TensorId,
        bias: TensorId,
        out: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
        out: TensorId,
    },
    /// out = mul·x + add with scalar coefficients.
    Affine {
        x: TensorId,
        mul: f64,
        out: TensorId,
    },
    Sigmoid {
        x: TensorId,
        out: TensorId,
    },
    Tanh {
        x: TensorId,
        out: TensorId,
    },
    LeakyRelu {
        x: TensorId,
        alpha: f64,
        out: TensorId,
    },
    SoftmaxLastDim {
        x: TensorId,
        out: TensorId,
    },
    ConcatLastDim {
        xs: Vec<TensorId>,
        out: TensorId,
    },
    ConcatRows {
        xs: Vec<TensorId>,
        out: TensorId,
    },
    SliceRows {
        x: TensorId,
        start_row: usize,
        out: TensorId,
    },
    SliceLastDim {
        x: TensorId,
        start_col: usize,
        out: TensorId,
    },
    SumLastDim {
        x: TensorId,
        out: TensorId,
    },
    Dropout {
        x: TensorId,
        mask: Vec<f64>,
        out: TensorId,
    },
    MseLoss {
        pred: TensorId,
        target: TensorId,
        out: TensorId,
    },
    GruCell {
        x: TensorId,
        h: TensorId,
        params: GruCellIds,
        saved: GruSaved,
        out: TensorId,
    },
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push_node(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            shape,
            values,
            requires_grad,
            grad: None,
        });
        id
    }

    /// Register a tensor's values as a leaf. Gradient flows to it iff the
    /// tensor is marked `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.push_node(t.shape().to_vec(), t.values().to_vec(), t.requires_grad())
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> TensorId {
        self.push_node(shape, values, false)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> TensorId {
        let n = shape.iter().product();
        self.push_node(shape, vec![0.0; n], false)
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Gradient accumulated for a node, if any flowed to it.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn check_finite(&self, id: TensorId, what: &str) -> Result<()> {
        let n = &self.nodes[id.0];
        if let Some(bad) = n.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "{what}: non-finite value {} at flat index {}",
                n.values[bad], bad
            )));
        }
        Ok(())
    }

    fn rg(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── forward primitives ──────────────────────────────────────────────

    /// Matrix product of 2-D operands: (m×k)·(k×n) → m×n.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = (self.nodes[a.0].rows(), self.nodes[a.0].cols());
        let (kb, n) = (self.nodes[b.0].rows(), self.nodes[b.0].cols());
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            ka,
            n,
            1.0,
            &self.nodes[a.0].values,
            false,
            &self.nodes[b.0].values,
            false,
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        let id = self.push_node(vec![m, n], out, rg);
        self.ops.push(Op::Matmul { a, b, out: id });
        Ok(id)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_len("add", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(&[a, b]);
        let shape = self.nodes[a.0].shape.clone();
        let id = self.push_node(shape, out, rg);
        self.ops.push(Op::Add { a, b, out: id });
        Ok(id)
    }

    /// out = a + c·b
    pub fn add_scaled(&mut self, a: TensorId, b: TensorId, c: f64) -> Result<TensorId> {
        self.check_same_len("add_scaled", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + c * y)
            .collect();
        let rg = self.rg(&[a, b]);
        let shape = self.nodes[a.0].shape.clone();
        let id = self.push_node(shape, out, rg);
        self.ops.push(Op::AddScaled { a, b, c, out: id });
        Ok(id)
    }

    /// Add a length-`cols` bias vector to every row of `x`.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let cols = self.nodes[x.0].cols();
        if self.nodes[bias.0].values.len() != cols {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[bias.0].shape.clone(),
            });
        }
        let out: Vec<f64> = {
            let b = &self.nodes[bias.0].values;
            self.nodes[x.0]
                .values
                .iter()
                .enumerate()
                .map(|(i, v)| v + b[i % cols])
                .collect()
        };
        let rg = self.rg(&[x, bias]);
        let shape = self.nodes[x.0].shape.clone();
        let id = self.push_node(shape, out, rg);
        self.ops.push(Op::AddBias { x, bias, out: id });
        Ok(id)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_len("mul", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        let shape = self.nodes[a.0].shape.clone();
        let id = self.push_node(shape, out, rg);
        self.ops.push(Op::Mul { a, b, out: id });
        Ok(id)
    }

    /// Elementwise mul·x + add with scalar coefficients.
    pub fn affine(&mut self, x: TensorId, mul: f64, add: f64) -> TensorId {
        let out: Vec<f64> = self.nodes[x.0].values.iter().map(|v| mul * v + add).collect();
        let rg = self.nodes[x.0].requires_grad;
        let shape = self.nodes[x.0].shape.clone();
        let id = self.push_node(shape, out, rg);
        self.ops.push(Op::Affine { x, mul, out: id });
        id
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        self.affine(x, c, 0.0)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let out: Vec<f64> = self.nodes[x.0].values.iter().map(|v| sigmoid(*v)).collect();
        let rg = self.nodes[x.0].requires_grad;
        let shape = self.nodes[x.0].shape.clone();
        let id = self.push_node(shape, out, rg);
        self.ops.push(Op::Sigmoid { x, out: id });
        id
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let out: Vec<f64> = self.nodes[x.0].values.iter().map(|v| v.tanh()).collect();
        let rg = self.nodes[x.0].requires_grad;
        let shape = self.nodes[x.0].shape.clone();
        let id = self.push_node(shape, out, rg);
        self.ops.push(Op::Tanh { x, out: id });
        id
    }

    pub fn leaky_relu(&mut self, x: TensorId, alpha: f64) -> TensorId {
        let out: Vec<f64> = self.nodes[x.0]
            .values
            .iter()
            .map(|&v| if v >= 0.0 { v } else { alpha * v })
            .collect();
        let rg = self.nodes[x.0].requires_grad;
        let shape = self.nodes[x.0].shape.clone();
        let id = self.push_node(shape, out, rg);
        self.ops.push(Op::LeakyRelu { x, alpha, out: id });
        id
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax_lastdim(&mut self, x: TensorId) -> TensorId {
        let (rows, cols) = (self.nodes[x.0].rows(), self.nodes[x.0].cols());
        let v = &self.nodes[x.0].values;
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let row = &v[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..cols {
                let e = (row[c] - max).exp();
                out[r * cols + c] = e;
                sum += e;
            }
            for c in 0..cols {
                out[r * cols + c] /= sum;
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        let shape = self.nodes[x.0].shape.clone();
        let id = self.push_node(shape, out, rg);
        self.ops.push(Op::SoftmaxLastDim { x, out: id });
        id
    }

    /// Concatenate 2-D operands with equal row counts along the last dim.
    pub fn concat_lastdim(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::Contract("concat_lastdim of zero tensors".into()));
        }
        let rows = self.nodes[xs[0].0].rows();
        let mut total_cols = 0;
        for &x in xs {
            if self.nodes[x.0].rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_lastdim",
                    lhs: self.nodes[xs[0].0].shape.clone(),
                    rhs: self.nodes[x.0].shape.clone(),
                });
            }
            total_cols += self.nodes[x.0].cols();
        }
        let mut out = vec![0.0; rows * total_cols];
        let mut col_off = 0;
        for &x in xs {
            let cols = self.nodes[x.0].cols();
            let v = &self.nodes[x.0].values;
            for r in 0..rows {
                out[r * total_cols + col_off..r * total_cols + col_off + cols]
                    .copy_from_slice(&v[r * cols..(r + 1) * cols]);
            }
            col_off += cols;
        }
        let rg = self.rg(xs);
        let id = self.push_node(vec![rows, total_cols], out, rg);
        self.ops.push(Op::ConcatLastDim {
            xs: xs.to_vec(),
            out: id,
        });
        Ok(id)
    }

    /// Stack 2-D operands with equal column counts along the row dimension.
    pub fn concat_rows(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::Contract("concat_rows of zero tensors".into()));
        }
        let cols = self.nodes[xs[0].0].cols();
        let mut total_rows = 0;
        for &x in xs {
            if self.nodes[x.0].cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.nodes[xs[0].0].shape.clone(),
                    rhs: self.nodes[x.0].shape.clone(),
                });
            }
            total_rows += self.nodes[x.0].rows();
        }
        let mut out = Vec::with_capacity(total_rows * cols);
        for &x in xs {
            out.extend_from_slice(&self.nodes[x.0].values);
        }
        let rg = self.rg(xs);
        let id = self.push_node(vec![total_rows, cols], out, rg);
        self.ops.push(Op::ConcatRows {
            xs: xs.to_vec(),
            out: id,
        });
        Ok(id)
    }

    /// Contiguous row slice [start, start+len) of a 2-D tensor.
    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (rows, cols) = (self.nodes[x.0].rows(), self.nodes[x.0].cols());
        if start + len > rows {
            return Err(Error::Contract(format!(
                "slice_rows [{start}, {}) out of bounds for {rows} rows",
                start + len
            )));
        }
        let out = self.nodes[x.0].values[start * cols..(start + len) * cols].to_vec();
        let rg = self.nodes[x.0].requires_grad;
        let id = self.push_node(vec![len, cols], out, rg);
        self.ops.push(Op::SliceRows {
            x,
            start_row: start,
            out: id,
        });
        Ok(id)
    }

    /// Column slice [start, start+len) along the last dimension.
    pub fn slice_lastdim(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (rows, cols) = (self.nodes[x.0].rows(), self.nodes[x.0].cols());
        if start + len > cols {
            return Err(Error::Contract(format!(
                "slice_lastdim [{start}, {}) out of bounds for {cols} columns",
                start + len
            )));
        }
        let v = &self.nodes[x.0].values;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&v[r * cols + start..r * cols + start + len]);
        }
        let rg = self.nodes[x.0].requires_grad;
        let id = self.push_node(vec![rows, len], out, rg);
        self.ops.push(Op::SliceLastDim {
            x,
            start_col: start,
            out: id,
        });
        Ok(id)
    }

    /// Row sums: rows×cols → rows×1.
    pub fn sum_lastdim(&mut self, x: TensorId) -> TensorId {
        let (rows, cols) = (self.nodes[x.0].rows(), self.nodes[x.0].cols());
        let v = &self.nodes[x.0].values;
        let out: Vec<f64> = (0..rows)
            .map(|r| v[r * cols..(r + 1) * cols].iter().sum())
            .collect();
        let rg = self.nodes[x.0].requires_grad;
        let id = self.push_node(vec![rows, 1], out, rg);
        self.ops.push(Op::SumLastDim { x, out: id });
        id
    }

    /// Inverted dropout: in training, zero each element with probability
    /// `rate` and scale survivors by 1/(1−rate); in eval mode, identity.
    pub fn dropout(
        &mut self,
        x: TensorId,
        rate: f64,
        rng: &mut ChaCha8Rng,
        training: bool,
    ) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.nodes[x.0].values.len())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let out: Vec<f64> = self.nodes[x.0]
            .values
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let rg = self.nodes[x.0].requires_grad;
        let shape = self.nodes[x.0].shape.clone();
        let id = self.push_node(shape, out, rg);
        self.ops.push(Op::Dropout { x, mask, out: id });
        Ok(id)
    }

    /// Mean squared error between two equal-length tensors; scalar output.
    pub fn mse_loss(&mut self, pred: TensorId, target: TensorId) -> Result<TensorId> {
        let n = self.nodes[pred.0].values.len();
        if n == 0 {
            return Err(Error::Contract("mse_loss over an empty batch".into()));
        }
        if n != self.nodes[target.0].values.len() {
            return Err(Error::ShapeMismatch {
                op: "mse_loss",
                lhs: self.nodes[pred.0].shape.clone(),
                rhs: self.nodes[target.0].shape.clone(),
            });
        }
        let sum: f64 = self.nodes[pred.0]
            .values
            .iter()
            .zip(&self.nodes[target.0].values)
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let rg = self.rg(&[pred, target]);
        let id = self.push_node(vec![1], vec![sum / n as f64], rg);
        self.ops.push(Op::MseLoss {
            pred,
            target,
            out: id,
        });
        Ok(id)
    }

    /// One gated recurrent cell step:
    ///   z  = σ(x·W_z + h·U_z + b_z)
    ///   r  = σ(x·W_r + h·U_r + b_r)
    ///   ĥ  = tanh(x·W_h + (r⊙h)·U_h + b_h)
    ///   h' = (1−z)⊙h + z⊙ĥ
    ///
    /// `x` is N×in_d, `h` is N×d; weight ids in `params` are
    /// (W_z, U_z, b_z, W_r, U_r, b_r, W_h, U_h, b_h) with W_* in_d×d and
    /// U_* d×d. Recorded as one primitive with an analytic backward, so a
    /// step saves four N×d buffers instead of a long chain of elementwise
    /// nodes.
    pub fn gru_cell(&mut self, x: TensorId, h: TensorId, params: &GruCellIds) -> Result<TensorId> {
        let (n, in_d) = (self.nodes[x.0].rows(), self.nodes[x.0].cols());
        let (nh, d) = (self.nodes[h.0].rows(), self.nodes[h.0].cols());
        if n != nh {
            return Err(Error::ShapeMismatch {
                op: "gru_cell",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[h.0].shape.clone(),
            });
        }
        let [wz, uz, bz, wr, ur, br, wh, uh, bh] = *params;
        for (w, rows_want, cols_want) in [
            (wz, in_d, d),
            (uz, d, d),
            (wr, in_d, d),
            (ur, d, d),
            (wh, in_d, d),
            (uh, d, d),
        ] {
            if self.nodes[w.0].rows() != rows_want || self.nodes[w.0].cols() != cols_want {
                return Err(Error::ShapeMismatch {
                    op: "gru_cell weights",
                    lhs: vec![rows_want, cols_want],
                    rhs: self.nodes[w.0].shape.clone(),
                });
            }
        }
        for b in [bz, br, bh] {
            if self.nodes[b.0].values.len() != d {
                return Err(Error::ShapeMismatch {
                    op: "gru_cell biases",
                    lhs: vec![d],
                    rhs: self.nodes[b.0].shape.clone(),
                });
            }
        }

        let gate_pre = |tape: &Tape, w: TensorId, u: TensorId, b: TensorId| -> Vec<f64> {
            let mut pre = vec![0.0; n * d];
            gemm(
                n,
                in_d,
                d,
                1.0,
                &tape.nodes[x.0].values,
                false,
                &tape.nodes[w.0].values,
                false,
                0.0,
                &mut pre,
            );
            gemm(
                n,
                d,
                d,
                1.0,
                &tape.nodes[h.0].values,
                false,
                &tape.nodes[u.0].values,
                false,
                1.0,
                &mut pre,
            );
            let bv = &tape.nodes[b.0].values;
            for (i, p) in pre.iter_mut().enumerate() {
                *p += bv[i % d];
            }
            pre
        };

        let z: Vec<f64> = gate_pre(self, wz, uz, bz)
            .iter()
            .map(|&v| sigmoid(v))
            .collect();
        let r: Vec<f64> = gate_pre(self, wr, ur, br)
            .iter()
            .map(|&v| sigmoid(v))
            .collect();
        let rh: Vec<f64> = r
            .iter()
            .zip(&self.nodes[h.0].values)
            .map(|(a, b)| a * b)
            .collect();
        let mut cpre = vec![0.0; n * d];
        gemm(
            n,
            in_d,
            d,
            1.0,
            &self.nodes[x.0].values,
            false,
            &self.nodes[wh.0].values,
            false,
            0.0,
            &mut cpre,
        );
        gemm(
            n,
            d,
            d,
            1.0,
            &rh,
            false,
            &self.nodes[uh.0].values,
            false,
            1.0,
            &mut cpre,
        );
        {
            let bv = &self.nodes[bh.0].values;
            for (i, p) in cpre.iter_mut().enumerate() {
                *p += bv[i % d];
            }
        }
        let hh: Vec<f64> = cpre.iter().map(|v| v.tanh()).collect();
        let out: Vec<f64> = {
            let hv = &self.nodes[h.0].values;
            (0..n * d)
                .map(|i| (1.0 - z[i]) * hv[i] + z[i] * hh[i])
                .collect()
        };

        let rg = self.rg(&[x, h]) || self.rg(params);
        let id = self.push_node(vec![n, d], out, rg);
        self.ops.push(Op::GruCell {
            x,
            h,
            params: *params,
            saved: GruSaved { z, r, hh, rh },
            out: id,
        });
        Ok(id)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates gradients for every
    /// `requires_grad` node reachable from it. One-shot per tape.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward called twice on the same tape".into(),
            ));
        }
        if self.nodes[loss.0].values.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);

        let ops = std::mem::take(&mut self.ops);
        for op in ops.iter().rev() {
            self.backward_op(op);
        }
        self.ops = ops;
        Ok(())
    }

    fn out_grad(&self, out: TensorId) -> Option<Vec<f64>> {
        self.nodes[out.0].grad.clone()
    }

    fn accum(&mut self, id: TensorId, grad: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(grad) {
                    *gi += di;
                }
            }
            None => self.nodes[id.0].grad = Some(grad.to_vec()),
        }
    }

    fn backward_op(&mut self, op: &Op) {
        match op {
            Op::Matmul { a, b, out } => {
                let Some(g) = self.out_grad(*out) else {
                    return;
                };
                let (m, k) = (self.nodes[a.0].rows(), self.nodes[a.0].cols());
                let n = self.nodes[b.0].cols();
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        &g,
                        false,
                        &self.nodes[b.0].values,
                        true,
                        0.0,
                        &mut da,
                    );
                    self.accum(*a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        &self.nodes[a.0].values,
                        true,
                        &g,
                        false,
                        0.0,
                        &mut db,
                    );
                    self.accum(*b, &db);
                }
            }
            Op::Add { a, b, out } => {
                let Some(g) = self.out_grad(*out) else {
                    return;
                };
                self.accum(*a, &g);
                self.accum(*b, &g);
            }
            Op::AddScaled { a, b, c, out } => {
                let Some(g) = self.out_grad(*out) else {
                    return;
                };
                self.accum(*a, &g);
                if self.nodes[b.0].requires_grad {
                    let gb: Vec<f64> = g.iter().map(|v| c * v).collect();
                    self.accum(*b, &gb);
                }
            }
            Op::AddBias { x, bias, out } => {
                let Some(g) = self.out_grad(*out) else {
                    return;
                };
                self.accum(*x, &g);
                if self.nodes[bias.0].requires_grad {
                    let cols = self.nodes[bias.0].values.len();
                    let mut gb = vec![0.0; cols];
                    for (i, v) in g.iter().enumerate() {
                        gb[i % cols] += v;
                    }
                    self.accum(*bias, &gb);
                }
            }
            Op::Mul { a, b, out } => {
                let Some(g) = self.out_grad(*out) else {
                    return;
                };
                if self.nodes[a.0].requires_grad {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[b.0].values)
                        .map(|(x, y)| x * y)
                        .collect();
                    self.accum(*a, &ga);
                }
                if self.nodes[b.0].requires_grad {
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].values)
                        .map(|(x, y)| x * y)
                        .collect();
                    self.accum(*b, &gb);
                }
            }
            Op::Affine { x, mul, out } => {
                let Some(g) = self.out_grad(*out) else {
                    return;
                };
                let gx: Vec<f64> = g.iter().map(|v| mul * v).collect();
                self.accum(*x, &gx);
            }
            Op::Sigmoid { x, out } => {
                let Some(g) = self.out_grad(*out) else {
                    return;
                };
                let gx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[out.0].values)
                    .map(|(gi, yi)| gi * yi * (1.0 - yi))
                    .collect();
                self.accum(*x, &gx);
            }
            Op::Tanh { x, out } => {
                let Some(g) = self.out_grad(*out) else {
                    return;
                };
                let gx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[out.0].values)
                    .map(|(gi, yi)| gi * (1.0 - yi * yi))
                    .collect();
                self.accum(*x, &gx);
            }
            Op::LeakyRelu { x, alpha, out } => {
                let Some(g) = self.out_grad(*out) else {
                    return;
                };
                let gx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x.0].values)
                    .map(|(gi, xi)| if *xi >= 0.0 { *gi } else { alpha * gi })
                    .collect();
                self.accum(*x, &gx);
            }
            Op::SoftmaxLastDim { x, out } => {
                let Some(g) = self.out_grad(*out) else {
                    return;
                };
                let (rows, cols) = (self.nodes[out.0].rows(), self.nodes[out.0].cols());
                let gx = {
                    let y = &self.nodes[out.0].values;
                    let mut gx = vec![0.0; rows * cols];
                    for row in 0..rows {
                        let base = row * cols;
                        let dot: f64 = (0..cols).map(|c| g[base + c] * y[base + c]).sum();
                        for c in 0..cols {
                            gx[base + c] = y[base + c] * (g[base + c] - dot);
                        }
                    }
                    gx
                };
                self.accum(*x, &gx);
            }
            Op::ConcatLastDim { xs, out } => {
                let Some(g) = self.out_grad(*out) else {
                    return;
                };
                let rows = self.nodes[out.0].rows();
                let total_cols = self.nodes[out.0].cols();
                let mut col_off = 0;
                for &x in xs {
                    let cols = self.nodes[x.0].cols();
                    if self.nodes[x.0].requires_grad {
                        let mut gx = vec![0.0; rows * cols];
                        for r in 0..rows {
                            gx[r * cols..(r + 1) * cols].copy_from_slice(
                                &g[r * total_cols + col_off..r * total_cols + col_off + cols],
                            );
                        }
                        self.accum(x, &gx);
                    }
                    col_off += cols;
                }
            }
            Op::ConcatRows { xs, out } => {
                let Some(g) = self.out_grad(*out) else {
                    return;
                };
                let mut off = 0;
                for &x in xs {
                    let len = self.nodes[x.0].values.len();
                    if self.nodes[x.0].requires_grad {
                        let gx = g[off..off + len].to_vec();
                        self.accum(x, &gx);
                    }
                    off += len;
                }
            }
            Op::SliceRows { x, start_row, out } => {
                let Some(g) = self.out_grad(*out) else {
                    return;
                };
                if self.nodes[x.0].requires_grad {
                    let cols = self.nodes[x.0].cols();
                    let mut gx = vec![0.0; self.nodes[x.0].values.len()];
                    gx[start_row * cols..start_row * cols + g.len()].copy_from_slice(&g);
                    self.accum(*x, &gx);
                }
            }
            Op::SliceLastDim { x, start_col, out } => {
                let Some(g) = self.out_grad(*out) else {
                    return;
                };
                if self.nodes[x.0].requires_grad {
                    let (rows, cols) = (self.nodes[x.0].rows(), self.nodes[x.0].cols());
                    let len = self.nodes[out.0].cols();
                    let mut gx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        gx[r * cols + start_col..r * cols + start_col + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    self.accum(*x, &gx);
                }
            }
            Op::SumLastDim { x, out } => {
                let Some(g) = self.out_grad(*out) else {
                    return;
                };
                if self.nodes[x.0].requires_grad {
                    let (rows, cols) = (self.nodes[x.0].rows(), self.nodes[x.0].cols());
                    let mut gx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        gx[r * cols..(r + 1) * cols].fill(g[r]);
                    }
                    self.accum(*x, &gx);
                }
            }
            Op::Dropout { x, mask, out } => {
                let Some(g) = self.out_grad(*out) else {
                    return;
                };
                let gx: Vec<f64> = g.iter().zip(mask).map(|(gi, m)| gi * m).collect();
                self.accum(*x, &gx);
            }
            Op::MseLoss { pred, target, out } => {
                let Some(g) = self.out_grad(*out) else {
                    return;
                };
                let n = self.nodes[pred.0].values.len() as f64;
                let scale = 2.0 * g[0] / n;
                if self.nodes[pred.0].requires_grad {
                    let gp: Vec<f64> = self.nodes[pred.0]
                        .values
                        .iter()
                        .zip(&self.nodes[target.0].values)
                        .map(|(p, t)| scale * (p - t))
                        .collect();
                    self.accum(*pred, &gp);
                }
                if self.nodes[target.0].requires_grad {
                    let gt: Vec<f64> = self.nodes[pred.0]
                        .values
                        .iter()
                        .zip(&self.nodes[target.0].values)
                        .map(|(p, t)| scale * (t - p))
                        .collect();
                    self.accum(*target, &gt);
                }
            }
            Op::GruCell {
                x,
                h,
                params,
                saved,
                out,
            } => {
                let Some(g) = self.out_grad(*out) else {
                    return;
                };
                self.backward_gru_cell(*x, *h, params, saved, &g);
            }
        }
    }

    fn backward_gru_cell(
        &mut self,
        x: TensorId,
        h: TensorId,
        params: &GruCellIds,
        saved: &GruSaved,
        g: &[f64],
    ) {
        let [wz, uz, bz, wr, ur, br, wh, uh, bh] = *params;
        let (n, in_d) = (self.nodes[x.0].rows(), self.nodes[x.0].cols());
        let d = self.nodes[h.0].cols();
        let hv = self.nodes[h.0].values.clone();
        let GruSaved { z, r, hh, rh } = saved;

        // h' = (1−z)⊙h + z⊙ĥ
        let mut dh: Vec<f64> = (0..n * d).map(|i| g[i] * (1.0 - z[i])).collect();
        let dc: Vec<f64> = (0..n * d)
            .map(|i| g[i] * z[i] * (1.0 - hh[i] * hh[i]))
            .collect();
        let dzpre: Vec<f64> = (0..n * d)
            .map(|i| g[i] * (hh[i] - hv[i]) * z[i] * (1.0 - z[i]))
            .collect();

        // candidate path: c = x·W_h + (r⊙h)·U_h + b_h
        let mut drh = vec![0.0; n * d];
        gemm(
            n,
            d,
            d,
            1.0,
            &dc,
            false,
            &self.nodes[uh.0].values,
            true,
            0.0,
            &mut drh,
        );
        let drpre: Vec<f64> = (0..n * d)
            .map(|i| drh[i] * hv[i] * r[i] * (1.0 - r[i]))
            .collect();
        for i in 0..n * d {
            dh[i] += drh[i] * r[i];
        }

        // gate pre-activations feed back into h through U_z and U_r
        {
            let mut tmp = vec![0.0; n * d];
            gemm(
                n,
                d,
                d,
                1.0,
                &dzpre,
                false,
                &self.nodes[uz.0].values,
                true,
                0.0,
                &mut tmp,
            );
            for i in 0..n * d {
                dh[i] += tmp[i];
            }
            gemm(
                n,
                d,
                d,
                1.0,
                &drpre,
                false,
                &self.nodes[ur.0].values,
                true,
                0.0,
                &mut tmp,
            );
            for i in 0..n * d {
                dh[i] += tmp[i];
            }
        }

        if self.nodes[x.0].requires_grad {
            let mut dx = vec![0.0; n * in_d];
            gemm(
                n,
                d,
                in_d,
                1.0,
                &dzpre,
                false,
                &self.nodes[wz.0].values,
                true,
                1.0,
                &mut dx,
            );
            gemm(
                n,
                d,
                in_d,
                1.0,
                &drpre,
                false,
                &self.nodes[wr.0].values,
                true,
                1.0,
                &mut dx,
            );
            gemm(
                n,
                d,
                in_d,
                1.0,
                &dc,
                false,
                &self.nodes[wh.0].values,
                true,
                1.0,
                &mut dx,
            );
            self.accum(x, &dx);
        }
        self.accum(h, &dh);

        // weight gradients: lhsᵀ · pre
        let xv = self.nodes[x.0].values.clone();
        for (w, lhs, lhs_cols, pre) in [
            (wz, &xv, in_d, &dzpre),
            (uz, &hv, d, &dzpre),
            (wr, &xv, in_d, &drpre),
            (ur, &hv, d, &drpre),
            (wh, &xv, in_d, &dc),
            (uh, rh, d, &dc),
        ] {
            if self.nodes[w.0].requires_grad {
                let mut dw = vec![0.0; lhs_cols * d];
                gemm(lhs_cols, n, d, 1.0, lhs, true, pre, false, 0.0, &mut dw);
                self.accum(w, &dw);
            }
        }

        for (b, pre) in [(bz, &dzpre), (br, &drpre), (bh, &dc)] {
            if self.nodes[b.0].requires_grad {
                let mut gb = vec![0.0; d];
                for (i, v) in pre.iter().enumerate() {
                    gb[i % d] += v;
                }
                self.accum(b, &gb);
            }
        }
    }

    fn check_same_len(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.nodes[a.0].values.len() != self.nodes[b.0].values.len() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}
