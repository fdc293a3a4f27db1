//! Mini-batch training: Adam with a stepped learning-rate decay, early
//! stopping on validation RMSE with best-state restore, and a grid search
//! over the architecture knobs.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::autodiff::{Tape, Tensor, TensorId};
use crate::data::{FlatSample, WindowSample};
use crate::error::{Error, Result};
use crate::evaluation::{denormalize_prediction, rmse};
use crate::model::{DropoutMode, GnmrModel, GruMrModel};
use crate::seeds;

/// Learning rate at an epoch with the canonical 10-epoch decay period.
pub fn lr_at(lr0: f64, epoch: usize) -> f64 {
    lr_at_every(lr0, epoch, 10)
}

/// lr0 scaled by (1/sqrt(2)) for every completed `period` epochs; the rate
/// halves every two periods. A zero period disables the decay.
pub fn lr_at_every(lr0: f64, epoch: usize, period: usize) -> f64 {
    if period == 0 {
        return lr0;
    }
    lr0 * std::f64::consts::FRAC_1_SQRT_2.powi((epoch / period) as i32)
}

/// Adam optimizer state, aligned index-for-index with a model's named
/// parameter list.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[(String, &Tensor)]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
        }
    }

    /// One bias-corrected update. Gradients must be finite; a NaN or
    /// infinity aborts the step naming the offending parameter, leaving
    /// the parameters untouched.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor)],
        grads: &[Vec<f64>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {} with {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if !lr.is_finite() || lr <= 0.0 {
            return Err(Error::Config(format!("learning rate {lr} is not usable")));
        }
        for (i, (name, tensor)) in params.iter().enumerate() {
            if grads[i].len() != tensor.len() {
                return Err(Error::Contract(format!(
                    "gradient for {name} has {} values, parameter has {}",
                    grads[i].len(),
                    tensor.len()
                )));
            }
            if let Some(pos) = grads[i].iter().position(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in {name}[{pos}]"
                )));
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, tensor)) in params.iter_mut().enumerate() {
            let values = tensor.values_mut();
            for (k, &g) in grads[i].iter().enumerate() {
                self.m[i][k] = self.beta1 * self.m[i][k] + (1.0 - self.beta1) * g;
                self.v[i][k] = self.beta2 * self.v[i][k] + (1.0 - self.beta2) * g * g;
                let m_hat = self.m[i][k] / c1;
                let v_hat = self.v[i][k] / c2;
                values[k] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scale all gradients by a common factor so their global L2 norm does not
/// exceed `max_norm`. Returns the factor applied.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    for g in grads.iter_mut() {
        for v in g.iter_mut() {
            *v *= scale;
        }
    }
    scale
}

/// The pieces of a forward pass the training loop needs.
pub struct TrainStep {
    pub tape: Tape,
    pub loss: TensorId,
    pub prediction: TensorId,
    pub param_ids: Vec<TensorId>,
}

/// A model the generic training loop can drive.
pub trait TrainableModel {
    type Sample;

    fn forward(&self, batch: &[&Self::Sample], mode: &mut DropoutMode) -> Result<TrainStep>;
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)>;
}

impl TrainableModel for GnmrModel {
    type Sample = WindowSample;

    fn forward(&self, batch: &[&WindowSample], mode: &mut DropoutMode) -> Result<TrainStep> {
        let pass = self.forward_batch(batch, mode)?;
        Ok(TrainStep {
            tape: pass.tape,
            loss: pass.loss,
            prediction: pass.prediction,
            param_ids: pass.param_ids,
        })
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        GnmrModel::named_params(self)
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        GnmrModel::named_params_mut(self)
    }
}

impl TrainableModel for GruMrModel {
    type Sample = FlatSample;

    fn forward(&self, batch: &[&FlatSample], mode: &mut DropoutMode) -> Result<TrainStep> {
        let pass = self.forward_batch(batch, mode)?;
        Ok(TrainStep {
            tape: pass.tape,
            loss: pass.loss,
            prediction: pass.prediction,
            param_ids: pass.param_ids,
        })
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        GruMrModel::named_params(self)
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        GruMrModel::named_params_mut(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub dropout: f64,
    pub lr0: f64,
    /// Epochs between decay steps (0 keeps the rate constant).
    pub lr_decay_period: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping (0 disables).
    pub patience: usize,
    pub seed: u64,
    /// Optional global-norm gradient clip, off unless set.
    pub grad_clip: Option<f64>,
    /// Cycle scale for validation RMSE.
    pub rul_ceiling: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            dropout: 0.2,
            lr0: 1e-3,
            lr_decay_period: 10,
            max_epochs: 200,
            patience: 20,
            seed: 0,
            grad_clip: None,
            rul_ceiling: crate::data::RUL_CEILING,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    /// Sample-weighted mean training loss over the epoch's batches.
    pub loss: f64,
    /// Validation RMSE in cycles, dropout off.
    pub val_rmse: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
}

impl TrainHistory {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "loss", "val_rmse", "lr"])?;
        for row in &self.rows {
            w.write_record([
                row.epoch.to_string(),
                row.loss.to_string(),
                row.val_rmse.to_string(),
                row.lr.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: TrainHistory,
    pub best_epoch: usize,
    pub best_val_rmse: f64,
}

fn snapshot<M: TrainableModel>(model: &M) -> Vec<Vec<f64>> {
    model
        .named_params()
        .iter()
        .map(|(_, t)| t.values().to_vec())
        .collect()
}

fn restore<M: TrainableModel>(model: &mut M, snap: &[Vec<f64>]) {
    for ((_, t), s) in model.named_params_mut().iter_mut().zip(snap) {
        t.values_mut().copy_from_slice(s);
    }
}

fn predictions<M: TrainableModel>(
    model: &M,
    samples: &[M::Sample],
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size) {
        let refs: Vec<&M::Sample> = chunk.iter().collect();
        let step = model.forward(&refs, &mut DropoutMode::Eval)?;
        out.extend_from_slice(step.tape.values(step.prediction));
    }
    Ok(out)
}

fn validation_rmse<M: TrainableModel>(
    model: &M,
    val: &[M::Sample],
    targets: &[f64],
    batch_size: usize,
    r_u: f64,
) -> Result<f64> {
    let preds = predictions(model, val, batch_size)?;
    let errors: Vec<f64> = preds
        .iter()
        .zip(targets)
        .map(|(&p, &t)| denormalize_prediction(p, r_u, true) - t * r_u)
        .collect();
    rmse(&errors)
}

fn target_of<M: TrainableModel>(sample: &M::Sample) -> f64
where
    M::Sample: HasTarget,
{
    sample.target()
}

/// Normalized regression target of a sample, for validation scoring.
pub trait HasTarget {
    fn target(&self) -> f64;
}

impl HasTarget for WindowSample {
    fn target(&self) -> f64 {
        self.target
    }
}

impl HasTarget for FlatSample {
    fn target(&self) -> f64 {
        self.target
    }
}

/// Train with shuffled mini-batches and keep the parameters from the epoch
/// with the lowest validation RMSE. Stops early after `patience` epochs
/// without improvement; the model holds the best state on return.
pub fn train<M>(
    model: &mut M,
    train_set: &[M::Sample],
    val_set: &[M::Sample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome>
where
    M: TrainableModel,
    M::Sample: HasTarget,
{
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Config(
            "validation set is empty; early stopping needs held-out units".into(),
        ));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.dropout) {
        return Err(Error::Config(format!(
            "dropout rate {} outside [0, 1)",
            cfg.dropout
        )));
    }
    if cfg.max_epochs == 0 {
        return Err(Error::Config("epoch budget must be positive".into()));
    }

    let mut rng = seeds::rng(cfg.seed, &[0x7217]);
    let mut adam = Adam::new(&model.named_params());
    let val_targets: Vec<f64> = val_set.iter().map(target_of::<M>).collect();

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, Vec<Vec<f64>>)> = None;
    let mut bad_epochs = 0usize;

    for epoch in 0..cfg.max_epochs {
        let lr = lr_at_every(cfg.lr0, epoch, cfg.lr_decay_period);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&M::Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let mut step = if cfg.dropout > 0.0 {
                let mut mode = DropoutMode::Train {
                    rate: cfg.dropout,
                    rng: &mut rng,
                };
                model.forward(&refs, &mut mode)?
            } else {
                model.forward(&refs, &mut DropoutMode::Eval)?
            };
            step.tape.backward(step.loss)?;
            loss_sum += step.tape.values(step.loss)[0] * chunk.len() as f64;
            let mut grads: Vec<Vec<f64>> = step
                .param_ids
                .iter()
                .map(|&id| {
                    step.tape
                        .grad(id)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![0.0; step.tape.values(id).len()])
                })
                .collect();
            drop(step);
            if let Some(limit) = cfg.grad_clip {
                clip_global_norm(&mut grads, limit);
            }
            adam.step(&mut model.named_params_mut(), &grads, lr)?;
        }
        let loss = loss_sum / train_set.len() as f64;
        let val_rmse =
            validation_rmse(model, val_set, &val_targets, cfg.batch_size, cfg.rul_ceiling)?;
        history.rows.push(HistoryRow {
            epoch,
            loss,
            val_rmse,
            lr,
        });

        let improved = best.as_ref().is_none_or(|(b, _, _)| val_rmse < *b);
        if improved {
            best = Some((val_rmse, epoch, snapshot(model)));
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if cfg.patience > 0 && bad_epochs >= cfg.patience {
                break;
            }
        }
    }

    let (best_val_rmse, best_epoch, snap) = best.expect("at least one epoch ran");
    restore(model, &snap);
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_rmse,
    })
}

/// One architecture candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridPoint {
    pub d: usize,
    pub tau: usize,
    pub gru_layers: usize,
}

/// The full search grid: d in {30, 60}, tau in {0, 2, 4}, layers in
/// {2, 3, 4}.
pub fn default_grid() -> Vec<GridPoint> {
    let mut out = Vec::new();
    for &d in &[30, 60] {
        for &tau in &[0, 2, 4] {
            for &gru_layers in &[2, 3, 4] {
                out.push(GridPoint { d, tau, gru_layers });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub point: GridPoint,
    pub val_rmse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOutcome {
    /// One result per candidate, in input order.
    pub results: Vec<GridResult>,
    pub best: GridPoint,
    pub best_val_rmse: f64,
}

/// Evaluate every candidate with the supplied scorer (typically a full
/// train run returning its best validation RMSE) and pick the winner.
/// Ties go to the smaller hidden size, then fewer propagation steps, then
/// fewer recurrent layers.
pub fn grid_search<F>(points: &[GridPoint], jobs: usize, score: F) -> Result<GridOutcome>
where
    F: Fn(GridPoint) -> Result<f64> + Sync,
{
    if points.is_empty() {
        return Err(Error::Config("grid has no candidates".into()));
    }
    if jobs == 0 {
        return Err(Error::Config("job count must be positive".into()));
    }

    let scores: Vec<f64> = if jobs == 1 {
        points.iter().map(|&p| score(p)).collect::<Result<_>>()?
    } else {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("cannot build a {jobs}-thread pool: {e}")))?;
        pool.install(|| points.par_iter().map(|&p| score(p)).collect::<Result<_>>())?
    };

    let mut results = Vec::with_capacity(points.len());
    for (point, val_rmse) in points.iter().zip(&scores) {
        if !val_rmse.is_finite() {
            return Err(Error::Numerical(format!(
                "candidate d={} tau={} layers={} scored {val_rmse}",
                point.d, point.tau, point.gru_layers
            )));
        }
        results.push(GridResult {
            point: *point,
            val_rmse: *val_rmse,
        });
    }

    let best = results
        .iter()
        .min_by(|a, b| {
            (a.val_rmse, a.point.d, a.point.tau, a.point.gru_layers)
                .partial_cmp(&(b.val_rmse, b.point.d, b.point.tau, b.point.gru_layers))
                .expect("scores are finite")
        })
        .expect("grid is non-empty");
    Ok(GridOutcome {
        best: best.point,
        best_val_rmse: best.val_rmse,
        results: results.clone(),
    })
}

pub fn write_grid_csv(path: &Path, outcome: &GridOutcome) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["d", "tau", "gru_layers", "val_rmse"])?;
    for r in &outcome.results {
        w.write_record([
            r.point.d.to_string(),
            r.point.tau.to_string(),
            r.point.gru_layers.to_string(),
            r.val_rmse.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::EquipmentGraph;
    use rand::Rng;

    #[test]
    fn learning_rate_follows_the_stepped_decay() {
        assert_eq!(lr_at(1e-3, 0), 1e-3);
        assert!((lr_at(1e-3, 9) - 1e-3).abs() < 1e-15);
        assert!((lr_at(1e-3, 25) - 5e-4).abs() < 1e-15, "two decay steps halve");
        assert!((lr_at(1e-3, 10) - 1e-3 * std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        // piecewise constant: jumps only at multiples of the period
        for epoch in 0..60 {
            let here = lr_at(1e-3, epoch);
            let next = lr_at(1e-3, epoch + 1);
            if (epoch + 1) % 10 == 0 {
                assert!(next < here);
            } else {
                assert_eq!(next, here);
            }
        }
        assert_eq!(lr_at_every(1e-3, 57, 0), 1e-3, "period 0 disables decay");
    }

    fn toy_params(values: &[&[f64]]) -> Vec<(String, Tensor)> {
        values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                (
                    format!("p{i}"),
                    Tensor::from_vec(vec![v.len()], v.to_vec()).unwrap().with_grad(),
                )
            })
            .collect()
    }

    fn as_refs(params: &[(String, Tensor)]) -> Vec<(String, &Tensor)> {
        params.iter().map(|(n, t)| (n.clone(), t)).collect()
    }

    fn as_mut_refs(params: &mut [(String, Tensor)]) -> Vec<(String, &mut Tensor)> {
        params.iter_mut().map(|(n, t)| (n.clone(), t)).collect()
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut params = toy_params(&[&[1.0, -2.0], &[3.0]]);
        let mut adam = Adam::new(&as_refs(&params));
        adam.step(
            &mut as_mut_refs(&mut params),
            &[vec![0.0, 0.0], vec![0.0]],
            1e-3,
        )
        .unwrap();
        assert_eq!(params[0].1.values(), &[1.0, -2.0]);
        assert_eq!(params[1].1.values(), &[3.0]);
    }

    #[test]
    fn first_step_moves_against_the_gradient_by_about_lr() {
        let mut params = toy_params(&[&[0.0, 0.0]]);
        let mut adam = Adam::new(&as_refs(&params));
        adam.step(&mut as_mut_refs(&mut params), &[vec![2.5, -0.3]], 1e-3)
            .unwrap();
        // bias correction makes m_hat = g and v_hat = g^2 on step one, so
        // the update is lr * sign(g) up to eps
        assert!((params[0].1.values()[0] + 1e-3).abs() < 1e-8);
        assert!((params[0].1.values()[1] - 1e-3).abs() < 1e-8);
    }

    #[test]
    fn constant_gradient_steps_approach_lr_magnitude() {
        let mut params = toy_params(&[&[10.0]]);
        let mut adam = Adam::new(&as_refs(&params));
        let mut prev = 10.0;
        for _ in 0..50 {
            adam.step(&mut as_mut_refs(&mut params), &[vec![4.0]], 1e-2)
                .unwrap();
            let now = params[0].1.values()[0];
            let delta = prev - now;
            assert!(delta > 0.0, "moves down a positive gradient");
            assert!(delta < 1.05e-2, "step stays near lr");
            prev = now;
        }
        let total = 10.0 - prev;
        assert!(total > 0.4 * 1e-2 * 50.0, "sustained progress");
    }

    #[test]
    fn nan_gradient_is_a_numerical_error_naming_the_parameter() {
        let mut params = toy_params(&[&[1.0], &[2.0, 3.0]]);
        let mut adam = Adam::new(&as_refs(&params));
        let err = adam
            .step(
                &mut as_mut_refs(&mut params),
                &[vec![0.1], vec![0.2, f64::NAN]],
                1e-3,
            )
            .unwrap_err();
        assert_eq!(err.exit_code(), 4);
        match err {
            Error::Numerical(msg) => assert!(msg.contains("p1"), "{msg}"),
            other => panic!("expected a numerical error, got {other:?}"),
        }
        assert_eq!(params[1].1.values(), &[2.0, 3.0], "step aborted cleanly");
    }

    #[test]
    fn clipping_rescales_only_oversized_gradients() {
        let mut grads = vec![vec![3.0, 0.0], vec![4.0]];
        let scale = clip_global_norm(&mut grads, 10.0);
        assert_eq!(scale, 1.0);
        assert_eq!(grads[0], vec![3.0, 0.0]);

        let scale = clip_global_norm(&mut grads, 2.5);
        assert!((scale - 0.5).abs() < 1e-12);
        let norm = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        assert!((norm - 2.5).abs() < 1e-12);
    }

    fn tiny_graph() -> EquipmentGraph {
        EquipmentGraph::new(
            vec![
                ("a".into(), "m".into(), vec!["T24".into(), "T30".into()]),
                ("b".into(), "m".into(), vec!["T50".into()]),
            ],
            vec![(0, 1)],
        )
        .unwrap()
    }

    fn toy_samples(graph: &EquipmentGraph, count: usize, t_len: usize, seed: u64) -> Vec<WindowSample> {
        let mut rng = seeds::rng(seed, &[0x5a17]);
        (0..count)
            .map(|i| WindowSample {
                unit_id: i as u32 + 1,
                t_end: t_len as u32,
                age_norm: t_len as f64 / 130.0,
                target: rng.gen_range(0.05..0.95),
                nodes: graph
                    .nodes()
                    .iter()
                    .map(|n| {
                        (0..t_len * n.sensors.len())
                            .map(|_| rng.gen_range(-1.0..1.0))
                            .collect()
                    })
                    .collect(),
                is_test: false,
            })
            .collect()
    }

    fn quick_config(seed: u64, epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            dropout: 0.1,
            lr0: 3e-3,
            max_epochs: epochs,
            patience: 0,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn empty_sets_are_config_errors() {
        let graph = tiny_graph();
        let mut rng = seeds::rng(1, &[]);
        let mut model = GnmrModel::new(graph.clone(), 3, 1, 1, false, &mut rng).unwrap();
        let samples = toy_samples(&graph, 3, 4, 2);
        let err = train(&mut model, &[], &samples, &quick_config(0, 2)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert_eq!(err.exit_code(), 2);
        assert!(matches!(
            train(&mut model, &samples, &[], &quick_config(0, 2)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_window_is_overfit_quickly() {
        let graph = tiny_graph();
        let mut rng = seeds::rng(3, &[]);
        let mut model = GnmrModel::new(graph.clone(), 8, 2, 1, false, &mut rng).unwrap();
        let samples = toy_samples(&graph, 1, 12, 4);
        let cfg = TrainConfig {
            batch_size: 1,
            dropout: 0.0,
            lr0: 1e-2,
            lr_decay_period: 0,
            max_epochs: 500,
            patience: 0,
            seed: 5,
            grad_clip: None,
            rul_ceiling: 130.0,
        };
        let outcome = train(&mut model, &samples, &samples, &cfg).unwrap();
        let final_loss = outcome.history.rows.last().unwrap().loss;
        let min_loss = outcome
            .history
            .rows
            .iter()
            .map(|r| r.loss)
            .fold(f64::INFINITY, f64::min);
        assert!(
            min_loss < 1e-4,
            "single-sample loss should collapse, reached {min_loss} (final {final_loss})"
        );
    }

    #[test]
    fn model_keeps_the_best_validation_epoch() {
        let graph = tiny_graph();
        let mut rng = seeds::rng(7, &[]);
        let mut model = GnmrModel::new(graph.clone(), 4, 1, 1, false, &mut rng).unwrap();
        let train_set = toy_samples(&graph, 8, 6, 8);
        let val_set = toy_samples(&graph, 4, 6, 9);
        let outcome = train(&mut model, &train_set, &val_set, &quick_config(10, 12)).unwrap();

        let min_row = outcome
            .history
            .rows
            .iter()
            .min_by(|a, b| a.val_rmse.partial_cmp(&b.val_rmse).unwrap())
            .unwrap();
        assert_eq!(outcome.best_epoch, min_row.epoch);
        assert!((outcome.best_val_rmse - min_row.val_rmse).abs() < 1e-12);

        // the restored parameters reproduce the reported best RMSE
        let targets: Vec<f64> = val_set.iter().map(|s| s.target).collect();
        let check = validation_rmse(&model, &val_set, &targets, 4, 130.0).unwrap();
        assert!(
            (check - outcome.best_val_rmse).abs() < 1e-9,
            "restored {check} vs reported {}",
            outcome.best_val_rmse
        );
    }

    #[test]
    fn same_seed_reproduces_history_bit_for_bit() {
        let graph = tiny_graph();
        let run = || {
            let mut rng = seeds::rng(11, &[]);
            let mut model = GnmrModel::new(graph.clone(), 3, 1, 1, false, &mut rng).unwrap();
            let train_set = toy_samples(&graph, 6, 5, 12);
            let val_set = toy_samples(&graph, 3, 5, 13);
            train(&mut model, &train_set, &val_set, &quick_config(14, 6)).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        let other = {
            let mut rng = seeds::rng(11, &[]);
            let mut model = GnmrModel::new(graph.clone(), 3, 1, 1, false, &mut rng).unwrap();
            let train_set = toy_samples(&graph, 6, 5, 12);
            let val_set = toy_samples(&graph, 3, 5, 13);
            train(&mut model, &train_set, &val_set, &quick_config(15, 6)).unwrap()
        };
        assert_ne!(a.history, other.history, "a different seed diverges");
    }

    #[test]
    fn patience_stops_training_early() {
        let graph = tiny_graph();
        let mut rng = seeds::rng(17, &[]);
        let mut model = GnmrModel::new(graph.clone(), 3, 1, 1, false, &mut rng).unwrap();
        let train_set = toy_samples(&graph, 6, 5, 18);
        let val_set = toy_samples(&graph, 3, 5, 19);
        let cfg = TrainConfig {
            patience: 2,
            max_epochs: 60,
            ..quick_config(20, 60)
        };
        let outcome = train(&mut model, &train_set, &val_set, &cfg).unwrap();
        let ran = outcome.history.rows.len();
        if ran < 60 {
            assert!(ran >= outcome.best_epoch + 1 + 2, "stopped after the patience window");
        }
    }

    #[test]
    fn baseline_model_trains_through_the_same_loop() {
        let mut rng = seeds::rng(21, &[]);
        let mut model = GruMrModel::new(4, 3, 1, &mut rng).unwrap();
        let mut data_rng = seeds::rng(22, &[]);
        let make = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<FlatSample> {
            (0..n)
                .map(|i| FlatSample {
                    unit_id: i as u32 + 1,
                    t_end: 5,
                    target: rng.gen_range(0.1..0.9),
                    series: (0..5 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                })
                .collect()
        };
        let train_set = make(6, &mut data_rng);
        let val_set = make(3, &mut data_rng);
        let outcome = train(&mut model, &train_set, &val_set, &quick_config(23, 5)).unwrap();
        assert_eq!(outcome.history.rows.len(), 5);
        assert!(outcome.best_val_rmse.is_finite());
    }

    #[test]
    fn history_csv_layout_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let history = TrainHistory {
            rows: vec![
                HistoryRow { epoch: 0, loss: 0.5, val_rmse: 30.0, lr: 1e-3 },
                HistoryRow { epoch: 1, loss: 0.25, val_rmse: 20.5, lr: 1e-3 },
            ],
        };
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        history.write_csv(&a).unwrap();
        history.write_csv(&b).unwrap();
        let text = std::fs::read_to_string(&a).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "epoch,loss,val_rmse,lr");
        assert_eq!(lines.next().unwrap(), "0,0.5,30,0.001");
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn grid_has_the_full_cross_product() {
        let grid = default_grid();
        assert_eq!(grid.len(), 18);
        for &d in &[30, 60] {
            for &tau in &[0, 2, 4] {
                for &gru_layers in &[2, 3, 4] {
                    assert!(grid.contains(&GridPoint { d, tau, gru_layers }));
                }
            }
        }
    }

    #[test]
    fn grid_search_minimizes_the_stub_scores() {
        let points = vec![
            GridPoint { d: 30, tau: 0, gru_layers: 2 },
            GridPoint { d: 30, tau: 2, gru_layers: 2 },
            GridPoint { d: 60, tau: 4, gru_layers: 3 },
        ];
        let outcome = grid_search(&points, 1, |p| {
            Ok(match (p.d, p.tau) {
                (30, 0) => 19.0,
                (30, 2) => 14.5,
                _ => 16.0,
            })
        })
        .unwrap();
        assert_eq!(outcome.best, points[1]);
        assert_eq!(outcome.best_val_rmse, 14.5);
        assert_eq!(outcome.results.len(), 3);
        assert_eq!(outcome.results[2].val_rmse, 16.0, "input order kept");
    }

    #[test]
    fn grid_ties_break_toward_the_smaller_model() {
        let points = vec![
            GridPoint { d: 60, tau: 0, gru_layers: 2 },
            GridPoint { d: 30, tau: 4, gru_layers: 4 },
            GridPoint { d: 30, tau: 2, gru_layers: 4 },
            GridPoint { d: 30, tau: 2, gru_layers: 3 },
        ];
        let outcome = grid_search(&points, 1, |_| Ok(12.0)).unwrap();
        assert_eq!(
            outcome.best,
            GridPoint { d: 30, tau: 2, gru_layers: 3 },
            "smaller d, then smaller tau, then fewer layers"
        );
    }

    #[test]
    fn parallel_grid_matches_sequential() {
        let points = default_grid();
        let score = |p: GridPoint| Ok((p.d * 100 + p.tau * 10 + p.gru_layers) as f64);
        let seq = grid_search(&points, 1, score).unwrap();
        let par = grid_search(&points, 3, score).unwrap();
        assert_eq!(seq, par);
    }

    #[test]
    fn grid_search_propagates_scorer_failures() {
        let points = default_grid();
        let err = grid_search(&points, 1, |p| {
            if p.tau == 4 {
                Err(Error::Numerical("diverged".into()))
            } else {
                Ok(15.0)
            }
        })
        .unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
        assert!(matches!(
            grid_search(&[], 1, |_| Ok(1.0)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            grid_search(&points, 0, |_| Ok(1.0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn grid_csv_lists_every_candidate() {
        let dir = tempfile::tempdir().unwrap();
        let outcome = grid_search(&default_grid(), 1, |p| Ok(p.d as f64)).unwrap();
        let path = dir.path().join("grid_results.csv");
        write_grid_csv(&path, &outcome).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 19);
        assert_eq!(text.lines().next().unwrap(), "d,tau,gru_layers,val_rmse");
        assert!(text.contains("30,0,2,30"));
    }
}
