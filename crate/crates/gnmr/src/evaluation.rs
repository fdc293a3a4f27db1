//! Test-set metrics in cycle units plus the attention-versus-RUL profile,
//! with CSV emitters for all of them.

use std::path::Path;

use crate::data::{FlatSample, WindowSample};
use crate::error::{Error, Result};
use crate::model::{DropoutMode, GnmrModel, GruMrModel};

/// Scale constant for early (negative) errors.
pub const DEFAULT_EARLY_U: f64 = 13.0;
/// Scale constant for late (positive) errors. Smaller than the early one,
/// so late predictions are penalized harder.
pub const DEFAULT_LATE_U: f64 = 10.0;

/// Map a normalized prediction back to cycles. With `clamp` the value is
/// first clipped to [0, 1]: remaining life is never negative and the model
/// never saw targets above the ceiling, so values outside are artifacts.
pub fn denormalize_prediction(p_norm: f64, r_u: f64, clamp: bool) -> f64 {
    if clamp {
        p_norm.clamp(0.0, 1.0) * r_u
    } else {
        p_norm * r_u
    }
}

/// Root mean squared error.
pub fn rmse(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Contract("rmse over an empty error list".into()));
    }
    let n = errors.len() as f64;
    Ok((errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt())
}

/// Asymmetric exponential penalty: each error contributes
/// exp(|e|/u) − 1 with u = `u_early` when the prediction is early (e < 0)
/// and u = `u_late` when late. Late errors cost more at equal magnitude.
pub fn timeliness_score(errors: &[f64], u_early: f64, u_late: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Contract("score over an empty error list".into()));
    }
    if u_early <= 0.0 || u_late <= 0.0 {
        return Err(Error::Config(format!(
            "score scale constants must be positive, got {u_early}/{u_late}"
        )));
    }
    Ok(errors
        .iter()
        .map(|&e| {
            let u = if e < 0.0 { u_early } else { u_late };
            (e.abs() / u).exp_m1()
        })
        .sum())
}

/// One test instance: truth, prediction, and the model's internal
/// attribution. `weights` and `node_estimates` are empty for models
/// without an attention readout. Node estimates are in cycles but not
/// clamped, so the mixture property against the prediction stays visible.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRecord {
    pub unit_id: u32,
    pub true_rul: f64,
    pub predicted_rul: f64,
    /// predicted − true; positive means the model was late.
    pub error: f64,
    pub weights: Vec<f64>,
    pub node_estimates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rmse: f64,
    pub score: f64,
    pub records: Vec<InstanceRecord>,
}

/// Compute both metrics over per-instance records.
pub fn report_from_records(records: Vec<InstanceRecord>) -> Result<EvalReport> {
    let errors: Vec<f64> = records.iter().map(|r| r.error).collect();
    Ok(EvalReport {
        rmse: rmse(&errors)?,
        score: timeliness_score(&errors, DEFAULT_EARLY_U, DEFAULT_LATE_U)?,
        records,
    })
}

/// Evaluate a graph model on test windows: forward without dropout,
/// de-normalize, and compute both metrics in cycles.
pub fn evaluate_gnmr(
    model: &GnmrModel,
    samples: &[WindowSample],
    r_u: f64,
    clamp: bool,
    batch_size: usize,
) -> Result<EvalReport> {
    if batch_size == 0 {
        return Err(Error::Config("evaluation batch size must be positive".into()));
    }
    let n = model.graph().num_nodes();
    let mut records = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size) {
        let refs: Vec<&WindowSample> = chunk.iter().collect();
        let pass = model.forward_batch(&refs, &mut DropoutMode::Eval)?;
        let preds = pass.predictions();
        let weights = pass.attention_weights();
        let estimates = pass.node_estimates();
        for (i, s) in chunk.iter().enumerate() {
            let true_rul = s.target * r_u;
            let predicted_rul = denormalize_prediction(preds[i], r_u, clamp);
            records.push(InstanceRecord {
                unit_id: s.unit_id,
                true_rul,
                predicted_rul,
                error: predicted_rul - true_rul,
                weights: weights[i * n..(i + 1) * n].to_vec(),
                node_estimates: estimates[i * n..(i + 1) * n]
                    .iter()
                    .map(|&e| e * r_u)
                    .collect(),
            });
        }
    }
    report_from_records(records)
}

/// Evaluate a flat recurrent baseline; records carry no attribution.
pub fn evaluate_baseline(
    model: &GruMrModel,
    samples: &[FlatSample],
    r_u: f64,
    clamp: bool,
    batch_size: usize,
) -> Result<EvalReport> {
    if batch_size == 0 {
        return Err(Error::Config("evaluation batch size must be positive".into()));
    }
    let mut records = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size) {
        let refs: Vec<&FlatSample> = chunk.iter().collect();
        let pass = model.forward_batch(&refs, &mut DropoutMode::Eval)?;
        let preds = pass.predictions();
        for (i, s) in chunk.iter().enumerate() {
            let true_rul = s.target * r_u;
            let predicted_rul = denormalize_prediction(preds[i], r_u, clamp);
            records.push(InstanceRecord {
                unit_id: s.unit_id,
                true_rul,
                predicted_rul,
                error: predicted_rul - true_rul,
                weights: Vec::new(),
                node_estimates: Vec::new(),
            });
        }
    }
    report_from_records(records)
}

/// One RUL bin of the profile: means are NaN when the bin is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_w_fault: f64,
    pub mean_w_others: f64,
    pub mean_rhat_fault: f64,
    pub mean_rhat_others: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProfile {
    pub fault_node: usize,
    pub bins: Vec<ProfileBin>,
}

/// Width-10 edges over [0, 130].
pub fn default_rul_bins() -> Vec<f64> {
    (0..=13).map(|i| 10.0 * i as f64).collect()
}

/// Bin instances by true RUL and average, per bin, the attention weight
/// and the cycle-scale estimate of the fault node against the mean over
/// the remaining nodes. Bins are [lo, hi), the last inclusive; instances
/// outside the edge range are dropped.
pub fn attention_profile(
    report: &EvalReport,
    fault_node: usize,
    bin_edges: &[f64],
) -> Result<AttentionProfile> {
    if bin_edges.len() < 2 || bin_edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(
            "profile needs at least two strictly increasing bin edges".into(),
        ));
    }
    let num_nodes = match report.records.first() {
        Some(r) if !r.weights.is_empty() => r.weights.len(),
        _ => {
            return Err(Error::Contract(
                "profile requires a report with attention vectors".into(),
            ))
        }
    };
    if fault_node >= num_nodes {
        return Err(Error::Contract(format!(
            "fault node {fault_node} outside the {num_nodes}-node graph"
        )));
    }

    let num_bins = bin_edges.len() - 1;
    let mut sums = vec![[0.0f64; 4]; num_bins];
    let mut counts = vec![0usize; num_bins];
    for rec in &report.records {
        if rec.weights.len() != num_nodes || rec.node_estimates.len() != num_nodes {
            return Err(Error::Contract(format!(
                "unit {} carries {} weights and {} estimates, expected {num_nodes}",
                rec.unit_id,
                rec.weights.len(),
                rec.node_estimates.len()
            )));
        }
        let r = rec.true_rul;
        let bin = if r == bin_edges[num_bins] {
            num_bins - 1
        } else {
            match bin_edges.windows(2).position(|w| w[0] <= r && r < w[1]) {
                Some(b) => b,
                None => continue,
            }
        };
        let others = 1.0 / (num_nodes as f64 - 1.0).max(1.0);
        let w_fault = rec.weights[fault_node];
        let w_others: f64 = rec
            .weights
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != fault_node)
            .map(|(_, w)| w)
            .sum::<f64>()
            * others;
        let e_fault = rec.node_estimates[fault_node];
        let e_others: f64 = rec
            .node_estimates
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != fault_node)
            .map(|(_, e)| e)
            .sum::<f64>()
            * others;
        sums[bin][0] += w_fault;
        sums[bin][1] += w_others;
        sums[bin][2] += e_fault;
        sums[bin][3] += e_others;
        counts[bin] += 1;
    }

    let bins = (0..num_bins)
        .map(|b| {
            let c = counts[b] as f64;
            let mean = |v: f64| if counts[b] == 0 { f64::NAN } else { v / c };
            ProfileBin {
                lo: bin_edges[b],
                hi: bin_edges[b + 1],
                count: counts[b],
                mean_w_fault: mean(sums[b][0]),
                mean_w_others: mean(sums[b][1]),
                mean_rhat_fault: mean(sums[b][2]),
                mean_rhat_others: mean(sums[b][3]),
            }
        })
        .collect();
    Ok(AttentionProfile { fault_node, bins })
}

/// One row per test instance: unit, r, rhat, e, then the attention
/// weights and per-node estimates when present.
pub fn write_eval_report(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let num_nodes = report
        .records
        .first()
        .map(|r| r.weights.len())
        .unwrap_or(0);
    let mut header = vec!["unit".to_string(), "r".into(), "rhat".into(), "e".into()];
    for j in 1..=num_nodes {
        header.push(format!("w_{j}"));
    }
    for j in 1..=num_nodes {
        header.push(format!("rhat_{j}"));
    }
    w.write_record(&header)?;
    for rec in &report.records {
        let mut row = vec![
            rec.unit_id.to_string(),
            rec.true_rul.to_string(),
            rec.predicted_rul.to_string(),
            rec.error.to_string(),
        ];
        row.extend(rec.weights.iter().map(|v| v.to_string()));
        row.extend(rec.node_estimates.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a per-instance report CSV back, recomputing both metrics from the
/// rows. The inverse of [`write_eval_report`].
pub fn read_eval_report(path: &Path) -> Result<EvalReport> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let num_nodes = headers
        .iter()
        .filter(|h| h.starts_with("w_"))
        .count();
    let expected = 4 + 2 * num_nodes;
    if headers.len() != expected
        || headers.iter().take(4).ne(["unit", "r", "rhat", "e"])
    {
        return Err(Error::Format(format!(
            "{} does not look like an evaluation report (header {:?})",
            path.display(),
            headers
        )));
    }

    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let field = |j: usize| -> Result<f64> {
            row.get(j)
                .ok_or(())
                .and_then(|s| s.parse::<f64>().map_err(|_| ()))
                .map_err(|_| Error::Parse {
                    path: path.display().to_string(),
                    line: i + 2,
                    msg: format!("bad numeric field {}", j + 1),
                })
        };
        records.push(InstanceRecord {
            unit_id: field(0)? as u32,
            true_rul: field(1)?,
            predicted_rul: field(2)?,
            error: field(3)?,
            weights: (0..num_nodes).map(|j| field(4 + j)).collect::<Result<_>>()?,
            node_estimates: (0..num_nodes)
                .map(|j| field(4 + num_nodes + j))
                .collect::<Result<_>>()?,
        });
    }
    report_from_records(records)
}

pub fn write_metrics(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["rmse", "s"])?;
    w.write_record([report.rmse.to_string(), report.score.to_string()])?;
    w.flush()?;
    Ok(())
}

pub fn write_attention_profile(path: &Path, profile: &AttentionProfile) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "bin",
        "count",
        "mean_w_fault",
        "mean_w_others",
        "mean_rhat_fault",
        "mean_rhat_others",
    ])?;
    for bin in &profile.bins {
        w.write_record([
            format!("[{},{})", bin.lo, bin.hi),
            bin.count.to_string(),
            bin.mean_w_fault.to_string(),
            bin.mean_w_others.to_string(),
            bin.mean_rhat_fault.to_string(),
            bin.mean_rhat_others.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
