//! The graph metric-regression network: per-node encoders feeding a shared
//! GRU, gated message passing over the equipment graph, and an attention
//! readout that mixes per-node remaining-life estimates.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use super::{
    gru_stack_apply, DropoutMode, FeedForward, FeedForwardIds, GruLayerParams, GruStack,
    LinearLayer, LinearIds, LEAKY_ALPHA,
};
use crate::autodiff::{GruCellIds, Tape, Tensor, TensorId};
use crate::data::WindowSample;
use crate::error::{Error, Result};
use crate::graph::{AdjacencyPair, EquipmentGraph};

/// Everything a caller needs after one batched pass: the tape (for
/// backward), the scalar loss, and the ids of predictions, attention
/// weights, per-node estimates, and bound parameters (in `named_params`
/// order).
pub struct ForwardPass {
    pub tape: Tape,
    pub loss: TensorId,
    pub prediction: TensorId,
    pub weights: TensorId,
    pub estimates: TensorId,
    pub param_ids: Vec<TensorId>,
}

impl ForwardPass {
    pub fn predictions(&self) -> &[f64] {
        self.tape.values(self.prediction)
    }

    pub fn attention_weights(&self) -> &[f64] {
        self.tape.values(self.weights)
    }

    pub fn node_estimates(&self) -> &[f64] {
        self.tape.values(self.estimates)
    }

    pub fn loss_value(&self) -> f64 {
        self.tape.values(self.loss)[0]
    }
}

struct ModelIds {
    encoders: Vec<FeedForwardIds>,
    gru_ts: Vec<GruCellIds>,
    edge_sets: Vec<FeedForwardIds>,
    prop_cell: GruCellIds,
    readout_hidden: LinearIds,
    score_head: LinearIds,
    estimate_head: LinearIds,
}

/// The full graph regression model.
#[derive(Debug, Clone, PartialEq)]
pub struct GnmrModel {
    graph: EquipmentGraph,
    adj: AdjacencyPair,
    d: usize,
    gru_layers: usize,
    tau: usize,
    tie_edges: bool,
    /// Parameter-set index per directed edge.
    edge_to_set: Vec<usize>,
    encoders: Vec<FeedForward>,
    gru_ts: GruStack,
    edge_sets: Vec<FeedForward>,
    prop_cell: GruLayerParams,
    readout_hidden: LinearLayer,
    score_head: LinearLayer,
    estimate_head: LinearLayer,
}

/// Group directed edges by (source type, target type), first occurrence
/// first; untied mode gives every edge its own group.
fn edge_grouping(graph: &EquipmentGraph, tie_edges: bool) -> (Vec<usize>, usize) {
    if !tie_edges {
        return ((0..graph.num_edges()).collect(), graph.num_edges());
    }
    let mut seen: BTreeMap<(String, String), usize> = BTreeMap::new();
    let mut order: Vec<usize> = Vec::new();
    let nodes = graph.nodes();
    for &(a, b) in graph.edges() {
        let key = (nodes[a].node_type.clone(), nodes[b].node_type.clone());
        let next = seen.len();
        let set = *seen.entry(key).or_insert(next);
        order.push(set);
    }
    let count = seen.len();
    (order, count)
}

impl GnmrModel {
    pub fn new(
        graph: EquipmentGraph,
        d: usize,
        gru_layers: usize,
        tau: usize,
        tie_edges: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if d == 0 || gru_layers == 0 {
            return Err(Error::Config(format!(
                "hidden size and layer count must be positive, got d={d}, layers={gru_layers}"
            )));
        }
        let adj = graph.build_adjacency();
        let v = graph.num_nodes();
        let (edge_to_set, num_sets) = edge_grouping(&graph, tie_edges);
        let encoders = graph
            .nodes()
            .iter()
            .map(|n| FeedForward::new(rng, n.sensors.len(), d, d))
            .collect();
        let gru_ts = GruStack::new(rng, d, d, gru_layers);
        let edge_sets = (0..num_sets).map(|_| FeedForward::new(rng, d, d, d)).collect();
        let prop_cell = GruLayerParams::new(rng, 2 * d, d);
        let readout_in = 2 * d + 1 + v;
        Ok(GnmrModel {
            graph,
            adj,
            d,
            gru_layers,
            tau,
            tie_edges,
            edge_to_set,
            encoders,
            gru_ts,
            edge_sets,
            prop_cell,
            readout_hidden: LinearLayer::new(rng, readout_in, d),
            score_head: LinearLayer::new(rng, d, 1),
            estimate_head: LinearLayer::new(rng, d, 1),
        })
    }

    pub fn graph(&self) -> &EquipmentGraph {
        &self.graph
    }

    pub fn hidden_size(&self) -> usize {
        self.d
    }

    pub fn gru_layers(&self) -> usize {
        self.gru_layers
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn tie_edges(&self) -> bool {
        self.tie_edges
    }

    pub fn edge_to_set(&self) -> &[usize] {
        &self.edge_to_set
    }

    pub fn num_edge_sets(&self) -> usize {
        self.edge_sets.len()
    }

    /// All trainable tensors with stable names, in binding order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (j, enc) in self.encoders.iter().enumerate() {
            enc.visit(&format!("encoder{j}"), &mut out);
        }
        self.gru_ts.visit("gru_ts", &mut out);
        for (k, set) in self.edge_sets.iter().enumerate() {
            set.visit(&format!("edge_set{k}"), &mut out);
        }
        self.prop_cell.visit("prop_cell", &mut out);
        self.readout_hidden.visit("readout.hidden", &mut out);
        self.score_head.visit("readout.score", &mut out);
        self.estimate_head.visit("readout.estimate", &mut out);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (j, enc) in self.encoders.iter_mut().enumerate() {
            enc.visit_mut(&format!("encoder{j}"), &mut out);
        }
        self.gru_ts.visit_mut("gru_ts", &mut out);
        for (k, set) in self.edge_sets.iter_mut().enumerate() {
            set.visit_mut(&format!("edge_set{k}"), &mut out);
        }
        self.prop_cell.visit_mut("prop_cell", &mut out);
        self.readout_hidden.visit_mut("readout.hidden", &mut out);
        self.score_head.visit_mut("readout.score", &mut out);
        self.estimate_head.visit_mut("readout.estimate", &mut out);
        out
    }

    fn bind(&self, tape: &mut Tape) -> (ModelIds, Vec<TensorId>) {
        let mut acc = Vec::new();
        let encoders = self.encoders.iter().map(|e| e.bind(tape, &mut acc)).collect();
        let gru_ts = self.gru_ts.bind(tape, &mut acc);
        let edge_sets = self.edge_sets.iter().map(|e| e.bind(tape, &mut acc)).collect();
        let prop_cell = self.prop_cell.bind(tape, &mut acc);
        let readout_hidden = self.readout_hidden.bind(tape, &mut acc);
        let score_head = self.score_head.bind(tape, &mut acc);
        let estimate_head = self.estimate_head.bind(tape, &mut acc);
        (
            ModelIds {
                encoders,
                gru_ts,
                edge_sets,
                prop_cell,
                readout_hidden,
                score_head,
                estimate_head,
            },
            acc,
        )
    }

    /// Encode one node's series block ((T·batch)×p_j, time-major rows) into
    /// the final top-layer GRU state (batch×d).
    fn encode_node(
        &self,
        tape: &mut Tape,
        ids: &ModelIds,
        node: usize,
        x: TensorId,
        t_len: usize,
        batch: usize,
        mode: &mut DropoutMode,
    ) -> Result<TensorId> {
        let m = ids.encoders[node].apply(tape, x, mode)?;
        let steps: Vec<TensorId> = (0..t_len)
            .map(|t| tape.slice_rows(m, t * batch, batch))
            .collect::<Result<_>>()?;
        let outputs = gru_stack_apply(tape, &ids.gru_ts, &steps, batch, self.d)?;
        Ok(*outputs.last().expect("t_len >= 1"))
    }

    /// Run the gated message-passing steps. Every directed edge's function
    /// is applied to both endpoints each step: to the source state for the
    /// target's incoming mean, and to the target state for the source's
    /// outgoing mean. Zero steps return the inputs untouched.
    fn propagate(
        &self,
        tape: &mut Tape,
        ids: &ModelIds,
        v0: &[TensorId],
        batch: usize,
        mode: &mut DropoutMode,
    ) -> Result<Vec<TensorId>> {
        let n = self.graph.num_nodes();
        let mut v = v0.to_vec();
        for _step in 0..self.tau {
            let mut in_acc: Vec<TensorId> = (0..n).map(|_| tape.zeros(vec![batch, self.d])).collect();
            let mut out_acc: Vec<TensorId> = (0..n).map(|_| tape.zeros(vec![batch, self.d])).collect();
            for (e, &(a, b)) in self.graph.edges().iter().enumerate() {
                let f = &ids.edge_sets[self.edge_to_set[e]];
                let w_in = self.adj.a_in[b * n + a];
                let msg_in = f.apply(tape, v[a], mode)?;
                in_acc[b] = tape.add_scaled(in_acc[b], msg_in, w_in)?;
                let w_out = self.adj.a_out[a * n + b];
                let msg_out = f.apply(tape, v[b], mode)?;
                out_acc[a] = tape.add_scaled(out_acc[a], msg_out, w_out)?;
            }
            let mut next = Vec::with_capacity(n);
            for j in 0..n {
                let agg = tape.concat_lastdim(&[in_acc[j], out_acc[j]])?;
                next.push(tape.gru_cell(agg, v[j], &ids.prop_cell)?);
            }
            v = next;
        }
        Ok(v)
    }

    /// Attention readout: per node, score and estimate heads over
    /// [v0, vt, age, one-hot(node)]; softmax over scores mixes the
    /// estimates into the final prediction.
    #[allow(clippy::too_many_arguments)]
    fn readout(
        &self,
        tape: &mut Tape,
        ids: &ModelIds,
        v0: &[TensorId],
        vt: &[TensorId],
        ages: &[f64],
        batch: usize,
        mode: &mut DropoutMode,
    ) -> Result<(TensorId, TensorId, TensorId)> {
        let n = self.graph.num_nodes();
        let age_col = tape.constant(vec![batch, 1], ages.to_vec());
        let mut scores = Vec::with_capacity(n);
        let mut estimates = Vec::with_capacity(n);
        for j in 0..n {
            let mut onehot = vec![0.0; batch * n];
            for i in 0..batch {
                onehot[i * n + j] = 1.0;
            }
            let onehot = tape.constant(vec![batch, n], onehot);
            let ctx = tape.concat_lastdim(&[v0[j], vt[j], age_col, onehot])?;
            let hidden = ids.readout_hidden.apply(tape, ctx)?;
            let hidden = tape.leaky_relu(hidden, LEAKY_ALPHA);
            let hidden = mode.apply(tape, hidden)?;
            scores.push(ids.score_head.apply(tape, hidden)?);
            estimates.push(ids.estimate_head.apply(tape, hidden)?);
        }
        let scores = tape.concat_lastdim(&scores)?;
        let weights = tape.softmax_lastdim(scores);
        let estimates = tape.concat_lastdim(&estimates)?;
        let mixed = tape.mul(weights, estimates)?;
        let prediction = tape.sum_lastdim(mixed);
        Ok((prediction, weights, estimates))
    }

    /// One batched pass over samples partitioned for this model's graph.
    /// The loss compares predictions with the samples' normalized targets.
    pub fn forward_batch(
        &self,
        samples: &[&WindowSample],
        mode: &mut DropoutMode,
    ) -> Result<ForwardPass> {
        let batch = samples.len();
        if batch == 0 {
            return Err(Error::Contract("forward over an empty batch".into()));
        }
        let n = self.graph.num_nodes();
        for s in samples {
            if s.nodes.len() != n {
                return Err(Error::Contract(format!(
                    "sample for unit {} has {} node blocks, graph has {n}",
                    s.unit_id,
                    s.nodes.len()
                )));
            }
        }
        let p0 = self.graph.nodes()[0].sensors.len();
        if samples[0].nodes[0].len() % p0 != 0 {
            return Err(Error::ShapeMismatch {
                op: "forward_batch",
                lhs: vec![samples[0].nodes[0].len()],
                rhs: vec![p0],
            });
        }
        let t_len = samples[0].nodes[0].len() / p0;
        if t_len == 0 {
            return Err(Error::Contract("window length is zero".into()));
        }

        let mut tape = Tape::new();
        let (ids, param_ids) = self.bind(&mut tape);

        let mut v0 = Vec::with_capacity(n);
        for (j, node) in self.graph.nodes().iter().enumerate() {
            let p = node.sensors.len();
            let mut block = Vec::with_capacity(t_len * batch * p);
            for t in 0..t_len {
                for s in samples {
                    if s.nodes[j].len() != t_len * p {
                        return Err(Error::ShapeMismatch {
                            op: "forward_batch",
                            lhs: vec![s.nodes[j].len()],
                            rhs: vec![t_len, p],
                        });
                    }
                    block.extend_from_slice(&s.nodes[j][t * p..(t + 1) * p]);
                }
            }
            let x = tape.constant(vec![t_len * batch, p], block);
            v0.push(self.encode_node(&mut tape, &ids, j, x, t_len, batch, mode)?);
        }

        let vt = self.propagate(&mut tape, &ids, &v0, batch, mode)?;

        let ages: Vec<f64> = samples.iter().map(|s| s.age_norm).collect();
        let (prediction, weights, estimates) =
            self.readout(&mut tape, &ids, &v0, &vt, &ages, batch, mode)?;

        let targets: Vec<f64> = samples.iter().map(|s| s.target).collect();
        let targets = tape.constant(vec![batch, 1], targets);
        let loss = tape.mse_loss(prediction, targets)?;
        tape.check_finite(loss, "batch loss")?;

        Ok(ForwardPass {
            tape,
            loss,
            prediction,
            weights,
            estimates,
            param_ids,
        })
    }
}
