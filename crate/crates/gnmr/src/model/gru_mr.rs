//! Flat recurrent baseline: a GRU stack over the raw channel window (or
//! its projected version), final state through two leaky-ReLU layers and a
//! scalar head.

use rand_chacha::ChaCha8Rng;

use super::{gru_stack_apply, DropoutMode, FeedForward, GruStack, LinearLayer};
use crate::autodiff::{Tape, Tensor, TensorId};
use crate::data::FlatSample;
use crate::error::{Error, Result};

/// Result of one baseline pass; ids index into the tape.
pub struct BaselinePass {
    pub tape: Tape,
    pub loss: TensorId,
    pub prediction: TensorId,
    pub param_ids: Vec<TensorId>,
}

impl BaselinePass {
    pub fn predictions(&self) -> &[f64] {
        self.tape.values(self.prediction)
    }

    pub fn loss_value(&self) -> f64 {
        self.tape.values(self.loss)[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruMrModel {
    input_dim: usize,
    d: usize,
    gru_layers: usize,
    gru: GruStack,
    head: FeedForward,
    out: LinearLayer,
}

impl GruMrModel {
    pub fn new(
        input_dim: usize,
        d: usize,
        gru_layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if input_dim == 0 || d == 0 || gru_layers == 0 {
            return Err(Error::Config(format!(
                "input dim, hidden size, and layer count must be positive, got \
                 {input_dim}/{d}/{gru_layers}"
            )));
        }
        Ok(GruMrModel {
            input_dim,
            d,
            gru_layers,
            gru: GruStack::new(rng, input_dim, d, gru_layers),
            head: FeedForward::new(rng, d, d, d),
            out: LinearLayer::new(rng, d, 1),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_size(&self) -> usize {
        self.d
    }

    pub fn gru_layers(&self) -> usize {
        self.gru_layers
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.gru.visit("gru", &mut out);
        self.head.visit("head", &mut out);
        self.out.visit("out", &mut out);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.gru.visit_mut("gru", &mut out);
        self.head.visit_mut("head", &mut out);
        self.out.visit_mut("out", &mut out);
        out
    }

    /// One batched pass. Every sample's series is a t_len×input_dim
    /// row-major block; targets are the normalized remaining-life values.
    pub fn forward_batch(
        &self,
        samples: &[&FlatSample],
        mode: &mut DropoutMode,
    ) -> Result<BaselinePass> {
        let batch = samples.len();
        if batch == 0 {
            return Err(Error::Contract("forward over an empty batch".into()));
        }
        if samples[0].series.len() % self.input_dim != 0 {
            return Err(Error::ShapeMismatch {
                op: "gru_mr_forward",
                lhs: vec![samples[0].series.len()],
                rhs: vec![self.input_dim],
            });
        }
        let t_len = samples[0].series.len() / self.input_dim;
        if t_len == 0 {
            return Err(Error::Contract("window length is zero".into()));
        }
        for s in samples {
            if s.series.len() != t_len * self.input_dim {
                return Err(Error::ShapeMismatch {
                    op: "gru_mr_forward",
                    lhs: vec![s.series.len()],
                    rhs: vec![t_len, self.input_dim],
                });
            }
        }

        let mut tape = Tape::new();
        let mut param_ids = Vec::new();
        let gru_ids = self.gru.bind(&mut tape, &mut param_ids);
        let head_ids = self.head.bind(&mut tape, &mut param_ids);
        let out_ids = self.out.bind(&mut tape, &mut param_ids);

        // time-major block: row t*batch + i holds sample i at step t
        let mut block = Vec::with_capacity(t_len * batch * self.input_dim);
        for t in 0..t_len {
            for s in samples {
                block.extend_from_slice(&s.series[t * self.input_dim..(t + 1) * self.input_dim]);
            }
        }
        let x = tape.constant(vec![t_len * batch, self.input_dim], block);
        let steps: Vec<TensorId> = (0..t_len)
            .map(|t| tape.slice_rows(x, t * batch, batch))
            .collect::<Result<_>>()?;
        let outputs = gru_stack_apply(&mut tape, &gru_ids, &steps, batch, self.d)?;
        let last = *outputs.last().expect("t_len >= 1");
        let hidden = head_ids.apply(&mut tape, last, mode)?;
        let prediction = out_ids.apply(&mut tape, hidden)?;

        let targets: Vec<f64> = samples.iter().map(|s| s.target).collect();
        let target_id = tape.constant(vec![batch, 1], targets);
        let loss = tape.mse_loss(prediction, target_id)?;
        tape.check_finite(loss, "batch loss")?;

        Ok(BaselinePass {
            tape,
            loss,
            prediction,
            param_ids,
        })
    }
}
