//! Turbofan data pipeline: parsing, split, normalization, windowing, and
//! node partitioning.

pub mod cache;
pub mod pca;
pub mod synth;

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::channels::{self, NUM_CHANNELS};
use crate::error::{Error, Result};
use crate::graph::EquipmentGraph;

pub use cache::DatasetCache;
pub use pca::PcaTransform;

/// Default window length.
pub const WINDOW_LEN: usize = 100;
/// Default stride between window end positions.
pub const WINDOW_SHIFT: usize = 5;
/// Life ceiling: remaining life is clipped here before normalization.
pub const RUL_CEILING: f64 = 130.0;

/// One of the four turbofan subsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetId {
    FD001,
    FD002,
    FD003,
    FD004,
}

impl DatasetId {
    pub const ALL: [DatasetId; 4] = [
        DatasetId::FD001,
        DatasetId::FD002,
        DatasetId::FD003,
        DatasetId::FD004,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "FD001" => Ok(Self::FD001),
            "FD002" => Ok(Self::FD002),
            "FD003" => Ok(Self::FD003),
            "FD004" => Ok(Self::FD004),
            other => Err(Error::Config(format!(
                "unknown dataset {other:?}; expected FD001..FD004"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::FD001 => "FD001",
            Self::FD002 => "FD002",
            Self::FD003 => "FD003",
            Self::FD004 => "FD004",
        }
    }

    pub fn train_file(self) -> String {
        format!("train_{}.txt", self.name())
    }

    pub fn test_file(self) -> String {
        format!("test_{}.txt", self.name())
    }

    pub fn rul_file(self) -> String {
        format!("RUL_{}.txt", self.name())
    }
}

/// One engine's full multivariate history.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineRun {
    pub unit_id: u32,
    /// cycles×24 row-major channel block.
    pub channels: Vec<f64>,
    pub cycles: usize,
    /// Failure cycle F: for training runs the last observed cycle; for test
    /// runs the last observed cycle plus the provided remaining life.
    pub failure_cycle: u32,
}

impl EngineRun {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.channels[t * NUM_CHANNELS..(t + 1) * NUM_CHANNELS]
    }
}

/// Per-channel training-split statistics driving normalization and padding.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
    /// Channel means of the training split after normalization; used as the
    /// pre-padding fill for runs shorter than the window.
    pub norm_means: Vec<f64>,
}

/// A fixed-length slice of one run's normalized channel block.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelWindow {
    pub unit_id: u32,
    /// Operational age: cycle index of the window's last row.
    pub t_end: u32,
    /// Age scaled by the life ceiling, the model's auxiliary input.
    pub age_norm: f64,
    /// Normalized clipped remaining life in [0, 1].
    pub target: f64,
    /// T×24 row-major.
    pub data: Vec<f64>,
}

/// A window partitioned into per-node series, ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub unit_id: u32,
    pub t_end: u32,
    pub age_norm: f64,
    pub target: f64,
    /// One T×p_j row-major block per graph node.
    pub nodes: Vec<Vec<f64>>,
    pub is_test: bool,
}

/// A window flattened for the baseline models: the raw channel block, or a
/// projected version of it.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatSample {
    pub unit_id: u32,
    pub t_end: u32,
    pub target: f64,
    /// T×dim row-major.
    pub series: Vec<f64>,
}

impl FlatSample {
    pub fn from_window(window: &ChannelWindow) -> Self {
        FlatSample {
            unit_id: window.unit_id,
            t_end: window.t_end,
            target: window.target,
            series: window.data.clone(),
        }
    }

    /// Project the 24 channels onto a fitted basis, yielding a T×k series.
    pub fn from_projected(window: &ChannelWindow, pca: &PcaTransform) -> Result<Self> {
        Ok(FlatSample {
            unit_id: window.unit_id,
            t_end: window.t_end,
            target: window.target,
            series: pca.apply(&window.data)?,
        })
    }
}

fn parse_numeric_table(path: &Path, want_cols: usize) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        msg: format!("cannot read file: {e}"),
    })?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::with_capacity(want_cols);
        for field in line.split_whitespace() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!("non-numeric field {field:?}"),
            })?;
            row.push(v);
        }
        if row.len() != want_cols {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!("expected {want_cols} columns, found {}", row.len()),
            });
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: "file contains no data rows".into(),
        });
    }
    Ok(rows)
}

fn group_runs(path: &Path, rows: Vec<Vec<f64>>) -> Result<Vec<EngineRun>> {
    let mut runs: Vec<EngineRun> = Vec::new();
    let mut line = 0usize;
    for row in rows {
        line += 1;
        let unit_id = row[0] as u32;
        let cycle = row[1] as u32;
        match runs.last_mut() {
            Some(run) if run.unit_id == unit_id => {
                if cycle != run.cycles as u32 + 1 {
                    return Err(Error::Parse {
                        path: path.display().to_string(),
                        line,
                        msg: format!(
                            "unit {unit_id}: cycle {cycle} breaks the contiguous sequence at {}",
                            run.cycles + 1
                        ),
                    });
                }
                run.channels.extend_from_slice(&row[2..]);
                run.cycles += 1;
            }
            _ => {
                if runs.iter().any(|r| r.unit_id == unit_id) {
                    return Err(Error::Parse {
                        path: path.display().to_string(),
                        line,
                        msg: format!("unit {unit_id} appears in two separate blocks"),
                    });
                }
                if cycle != 1 {
                    return Err(Error::Parse {
                        path: path.display().to_string(),
                        line,
                        msg: format!("unit {unit_id} starts at cycle {cycle}, expected 1"),
                    });
                }
                runs.push(EngineRun {
                    unit_id,
                    channels: row[2..].to_vec(),
                    cycles: 1,
                    failure_cycle: 0,
                });
            }
        }
    }
    Ok(runs)
}

/// Parse one subset's three files into training and test runs.
pub fn parse_cmapss(
    train_path: &Path,
    test_path: &Path,
    rul_path: &Path,
) -> Result<(Vec<EngineRun>, Vec<EngineRun>)> {
    let mut train = group_runs(train_path, parse_numeric_table(train_path, 2 + NUM_CHANNELS)?)?;
    for run in &mut train {
        run.failure_cycle = run.cycles as u32;
    }

    let mut test = group_runs(test_path, parse_numeric_table(test_path, 2 + NUM_CHANNELS)?)?;
    let ruls = parse_numeric_table(rul_path, 1)?;
    if ruls.len() != test.len() {
        return Err(Error::Parse {
            path: rul_path.display().to_string(),
            line: ruls.len(),
            msg: format!(
                "remaining-life file has {} entries for {} test units",
                ruls.len(),
                test.len()
            ),
        });
    }
    for (run, rul) in test.iter_mut().zip(&ruls) {
        run.failure_cycle = run.cycles as u32 + rul[0] as u32;
    }
    Ok((train, test))
}

/// Unit-level split: shuffles runs and keeps floor(n·(1−ratio)) for
/// validation. Both halves come back ordered by unit id.
pub fn split_train_val(
    runs: Vec<EngineRun>,
    ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<EngineRun>, Vec<EngineRun>)> {
    if !(0.0 < ratio && ratio < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must be in (0, 1), got {ratio}"
        )));
    }
    let n = runs.len();
    // nudge before flooring so 0.2*5 -> 1 despite 1-0.8 rounding down
    let n_val = ((1.0 - ratio) * n as f64 + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let val_set: std::collections::BTreeSet<usize> =
        order[n - n_val..].iter().copied().collect();
    let mut train = Vec::with_capacity(n - n_val);
    let mut val = Vec::with_capacity(n_val);
    for (i, run) in runs.into_iter().enumerate() {
        if val_set.contains(&i) {
            val.push(run);
        } else {
            train.push(run);
        }
    }
    train.sort_by_key(|r| r.unit_id);
    val.sort_by_key(|r| r.unit_id);
    Ok((train, val))
}

/// Per-channel min/max over the training split, plus normalized means.
pub fn fit_normalization(train: &[EngineRun]) -> NormalizationStats {
    let mut mins = vec![f64::INFINITY; NUM_CHANNELS];
    let mut maxs = vec![f64::NEG_INFINITY; NUM_CHANNELS];
    let mut sums = vec![0.0; NUM_CHANNELS];
    let mut count = 0usize;
    for run in train {
        for t in 0..run.cycles {
            for (c, v) in run.row(t).iter().enumerate() {
                mins[c] = mins[c].min(*v);
                maxs[c] = maxs[c].max(*v);
                sums[c] += v;
            }
        }
        count += run.cycles;
    }
    let norm_means = (0..NUM_CHANNELS)
        .map(|c| {
            let mean = sums[c] / count as f64;
            normalize_value(mean, mins[c], maxs[c])
        })
        .collect();
    NormalizationStats {
        mins,
        maxs,
        norm_means,
    }
}

fn normalize_value(v: f64, min: f64, max: f64) -> f64 {
    if max == min {
        0.0
    } else {
        2.0 * (v - min) / (max - min) - 1.0
    }
}

/// Map every channel through 2(x−min)/(max−min) − 1 with training stats.
/// Constant channels map to 0; out-of-range values pass through unclipped.
pub fn apply_normalization(run: &EngineRun, stats: &NormalizationStats) -> EngineRun {
    let mut channels = Vec::with_capacity(run.channels.len());
    for t in 0..run.cycles {
        for (c, v) in run.row(t).iter().enumerate() {
            channels.push(normalize_value(*v, stats.mins[c], stats.maxs[c]));
        }
    }
    EngineRun {
        unit_id: run.unit_id,
        channels,
        cycles: run.cycles,
        failure_cycle: run.failure_cycle,
    }
}

fn window_ending_at(run: &EngineRun, stats: &NormalizationStats, t_end: usize, t_len: usize, r_u: f64) -> ChannelWindow {
    let mut data = Vec::with_capacity(t_len * NUM_CHANNELS);
    if t_end < t_len {
        for _ in 0..t_len - t_end {
            data.extend_from_slice(&stats.norm_means);
        }
        data.extend_from_slice(&run.channels[..t_end * NUM_CHANNELS]);
    } else {
        data.extend_from_slice(&run.channels[(t_end - t_len) * NUM_CHANNELS..t_end * NUM_CHANNELS]);
    }
    let remaining = run.failure_cycle as f64 - t_end as f64;
    ChannelWindow {
        unit_id: run.unit_id,
        t_end: t_end as u32,
        age_norm: t_end as f64 / r_u,
        target: remaining.min(r_u) / r_u,
        data,
    }
}

/// Slide windows over one normalized training run. Ends fall on T, T+shift,
/// T+2·shift, … plus a final window at the last cycle when the stride does
/// not land there; runs shorter than T yield one mean-padded window.
pub fn make_windows(
    run: &EngineRun,
    stats: &NormalizationStats,
    t_len: usize,
    shift: usize,
    r_u: f64,
) -> Vec<ChannelWindow> {
    let last = run.cycles;
    if last < t_len {
        return vec![window_ending_at(run, stats, last, t_len, r_u)];
    }
    let mut out = Vec::new();
    let mut t_end = t_len;
    while t_end <= last {
        out.push(window_ending_at(run, stats, t_end, t_len, r_u));
        t_end += shift;
    }
    if out.last().map(|w| w.t_end as usize) != Some(last) {
        out.push(window_ending_at(run, stats, last, t_len, r_u));
    }
    out
}

/// One window per test run, ending at its last observed cycle.
pub fn make_test_windows(
    test: &[EngineRun],
    stats: &NormalizationStats,
    t_len: usize,
    r_u: f64,
) -> Vec<ChannelWindow> {
    test.iter()
        .map(|run| window_ending_at(run, stats, run.cycles, t_len, r_u))
        .collect()
}

/// Project a channel window onto the graph: node j receives its configured
/// sensor columns in config order. Shared sensors are copied into each node.
pub fn partition_by_node(
    window: &ChannelWindow,
    graph: &EquipmentGraph,
    t_len: usize,
    is_test: bool,
) -> Result<WindowSample> {
    let mut nodes = Vec::with_capacity(graph.num_nodes());
    for node in graph.nodes() {
        let cols: Vec<usize> = node
            .sensors
            .iter()
            .map(|s| {
                channels::channel_index(s).ok_or_else(|| {
                    Error::Config(format!(
                        "node {:?} sensor {s:?} is not a known channel",
                        node.name
                    ))
                })
            })
            .collect::<Result<_>>()?;
        let mut block = Vec::with_capacity(t_len * cols.len());
        for t in 0..t_len {
            let row = &window.data[t * NUM_CHANNELS..(t + 1) * NUM_CHANNELS];
            for &c in &cols {
                block.push(row[c]);
            }
        }
        nodes.push(block);
    }
    Ok(WindowSample {
        unit_id: window.unit_id,
        t_end: window.t_end,
        age_norm: window.age_norm,
        target: window.target,
        nodes,
        is_test,
    })
}

/// Pseudo-graph used by the flat baselines: one node holding all 24
/// channels in column order.
pub fn flat24_graph() -> EquipmentGraph {
    let sensors: Vec<String> = channels::channel_names().map(str::to_string).collect();
    EquipmentGraph::new(vec![("all".into(), "all".into(), sensors)], vec![])
        .expect("flat channel graph is valid")
}

/// Everything that shapes a prepared dataset besides the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct PrepareSettings {
    pub window_len: usize,
    pub window_shift: usize,
    pub rul_ceiling: f64,
    pub train_ratio: f64,
    pub seed: u64,
}

impl Default for PrepareSettings {
    fn default() -> Self {
        PrepareSettings {
            window_len: WINDOW_LEN,
            window_shift: WINDOW_SHIFT,
            rul_ceiling: RUL_CEILING,
            train_ratio: 0.8,
            seed: 0,
        }
    }
}

fn require_file(dir: &Path, name: &str) -> Result<std::path::PathBuf> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(Error::Config(format!(
            "data file {} not found; point --data-dir at the raw files or \
             generate them with synth-data",
            path.display()
        )));
    }
    Ok(path)
}

/// Parse, normalize, and split one subset into a cache. Normalization
/// statistics come from the full training file, before the unit-level
/// validation split, so they do not depend on the split seed.
pub fn prepare_dataset(
    id: DatasetId,
    data_dir: &Path,
    graph_hash: &str,
    s: &PrepareSettings,
) -> Result<DatasetCache> {
    let train_path = require_file(data_dir, &id.train_file())?;
    let test_path = require_file(data_dir, &id.test_file())?;
    let rul_path = require_file(data_dir, &id.rul_file())?;
    let (train_raw, test_raw) = parse_cmapss(&train_path, &test_path, &rul_path)?;
    if train_raw.is_empty() {
        return Err(Error::Config(format!(
            "{} holds no runs",
            train_path.display()
        )));
    }

    let stats = fit_normalization(&train_raw);
    let normalized: Vec<EngineRun> = train_raw
        .iter()
        .map(|r| apply_normalization(r, &stats))
        .collect();
    let test: Vec<EngineRun> = test_raw
        .iter()
        .map(|r| apply_normalization(r, &stats))
        .collect();
    let mut rng = crate::seeds::rng(s.seed, &[0x5917]);
    let (train, val) = split_train_val(normalized, s.train_ratio, &mut rng)?;

    Ok(DatasetCache {
        key: cache::CacheKey {
            dataset: id.name().to_string(),
            graph_hash: graph_hash.to_string(),
            window_len: s.window_len as u32,
            window_shift: s.window_shift as u32,
            rul_ceiling: s.rul_ceiling,
            train_ratio: s.train_ratio,
            seed: s.seed,
        },
        stats,
        train,
        val,
        test,
    })
}

/// Instance and window counts of a prepared subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrepareSummary {
    pub train_units: usize,
    pub val_units: usize,
    pub test_units: usize,
    pub train_windows: usize,
    pub val_windows: usize,
    pub test_windows: usize,
}

pub fn summarize(cache: &DatasetCache) -> PrepareSummary {
    let s = &cache.key;
    let count = |runs: &[EngineRun]| {
        runs.iter()
            .map(|r| {
                make_windows(
                    r,
                    &cache.stats,
                    s.window_len as usize,
                    s.window_shift as usize,
                    s.rul_ceiling,
                )
                .len()
            })
            .sum()
    };
    PrepareSummary {
        train_units: cache.train.len(),
        val_units: cache.val.len(),
        test_units: cache.test.len(),
        train_windows: count(&cache.train),
        val_windows: count(&cache.val),
        test_windows: cache.test.len(),
    }
}

/// Strided training-style samples over runs, partitioned for a graph.
pub fn graph_samples(
    runs: &[EngineRun],
    stats: &NormalizationStats,
    graph: &EquipmentGraph,
    s: &PrepareSettings,
) -> Result<Vec<WindowSample>> {
    let mut out = Vec::new();
    for run in runs {
        for w in make_windows(run, stats, s.window_len, s.window_shift, s.rul_ceiling) {
            out.push(partition_by_node(&w, graph, s.window_len, false)?);
        }
    }
    Ok(out)
}

/// One end-aligned sample per run, partitioned for a graph.
pub fn graph_test_samples(
    runs: &[EngineRun],
    stats: &NormalizationStats,
    graph: &EquipmentGraph,
    s: &PrepareSettings,
) -> Result<Vec<WindowSample>> {
    make_test_windows(runs, stats, s.window_len, s.rul_ceiling)
        .iter()
        .map(|w| partition_by_node(w, graph, s.window_len, true))
        .collect()
}

/// Strided flat samples, optionally projected onto a fitted basis.
pub fn flat_samples(
    runs: &[EngineRun],
    stats: &NormalizationStats,
    s: &PrepareSettings,
    pca: Option<&PcaTransform>,
) -> Result<Vec<FlatSample>> {
    let mut out = Vec::new();
    for run in runs {
        for w in make_windows(run, stats, s.window_len, s.window_shift, s.rul_ceiling) {
            out.push(match pca {
                Some(p) => FlatSample::from_projected(&w, p)?,
                None => FlatSample::from_window(&w),
            });
        }
    }
    Ok(out)
}

/// One end-aligned flat sample per run.
pub fn flat_test_samples(
    runs: &[EngineRun],
    stats: &NormalizationStats,
    s: &PrepareSettings,
    pca: Option<&PcaTransform>,
) -> Result<Vec<FlatSample>> {
    make_test_windows(runs, stats, s.window_len, s.rul_ceiling)
        .iter()
        .map(|w| {
            Ok(match pca {
                Some(p) => FlatSample::from_projected(w, p)?,
                None => FlatSample::from_window(w),
            })
        })
        .collect()
}

/// Every cycle row of the runs, stacked for fitting a projector.
pub fn stacked_rows(runs: &[EngineRun]) -> Vec<f64> {
    let total: usize = runs.iter().map(|r| r.cycles).sum();
    let mut out = Vec::with_capacity(total * NUM_CHANNELS);
    for run in runs {
        out.extend_from_slice(&run.channels);
    }
    out
}
