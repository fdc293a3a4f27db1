//! Command-line front end. An experiment config (TOML) drives every run;
//! flags override individual fields, and the fully resolved config is
//! written into the run directory so any artifact can be reproduced from
//! the files next to it.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channels::NUM_CHANNELS;
use crate::data::cache::CacheKey;
use crate::data::pca::pca_fit;
use crate::data::{
    flat24_graph, flat_samples, flat_test_samples, graph_samples, graph_test_samples,
    prepare_dataset, stacked_rows, summarize, synth, DatasetCache, DatasetId, PcaTransform,
    PrepareSettings,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    attention_profile, default_rul_bins, evaluate_baseline, evaluate_gnmr, read_eval_report,
    write_attention_profile, write_eval_report, write_metrics,
};
use crate::graph::{EquipmentGraph, GraphVariant};
use crate::model::{checkpoint_kind, CheckpointKind, GnmrModel, GruMrModel};
use crate::seeds;
use crate::train::{grid_search, write_grid_csv, GridPoint, TrainConfig};

/// Environment variable naming the default raw-data directory.
pub const DATA_DIR_ENV: &str = "GNMR_DATA_DIR";

/// Which estimator an experiment trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Graph model: per-node encoders, message passing, attention readout.
    Gnmr,
    /// Flat recurrent baseline over all channels.
    GruMr,
    /// Flat recurrent baseline over a PCA projection of the channels.
    PcaGruMr,
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gnmr" => Ok(Self::Gnmr),
            "gru_mr" | "gru-mr" => Ok(Self::GruMr),
            "pca_gru_mr" | "pca-gru-mr" => Ok(Self::PcaGruMr),
            other => Err(Error::Config(format!(
                "unknown model {other:?}; expected gnmr, gru_mr, or pca_gru_mr"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Gnmr => "gnmr",
            Self::GruMr => "gru_mr",
            Self::PcaGruMr => "pca_gru_mr",
        }
    }
}

/// Everything a run needs. Missing TOML fields fall back to the defaults
/// below, so a config file only has to name what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Subset id, FD001 through FD004.
    pub dataset: String,
    /// Raw data directory; falls back to $GNMR_DATA_DIR when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    /// Graph config path or variant name (original, reduced4, increased13,
    /// per_sensor, single_node). Flat baselines ignore it.
    pub graph: String,
    pub model: ModelKind,
    pub out_dir: PathBuf,
    /// Master seed; the unit split, parameter init, batch shuffling, and
    /// graph perturbation all derive their streams from it.
    pub seed: u64,

    /// Node representation width.
    pub d: usize,
    /// Message propagation steps.
    pub tau: usize,
    /// Stacked layers in the sequence encoder.
    pub gru_layers: usize,
    /// Share one message network across all directed edges.
    pub tie_edges: bool,
    /// Components kept by the pca_gru_mr projection.
    pub pca_components: usize,

    pub batch_size: usize,
    pub dropout: f64,
    pub lr0: f64,
    pub lr_decay_period: usize,
    pub max_epochs: usize,
    pub patience: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    pub rul_ceiling: f64,

    pub window_len: usize,
    pub window_shift: usize,
    pub train_ratio: f64,

    /// Axes of the architecture grid searched by the grid command.
    pub grid_d: Vec<usize>,
    pub grid_tau: Vec<usize>,
    pub grid_gru_layers: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let p = PrepareSettings::default();
        ExperimentConfig {
            dataset: "FD001".into(),
            data_dir: None,
            graph: "original".into(),
            model: ModelKind::Gnmr,
            out_dir: PathBuf::from("runs/experiment"),
            seed: 0,
            d: 30,
            tau: 2,
            gru_layers: 2,
            tie_edges: false,
            pca_components: 5,
            batch_size: t.batch_size,
            dropout: t.dropout,
            lr0: t.lr0,
            lr_decay_period: t.lr_decay_period,
            max_epochs: t.max_epochs,
            patience: t.patience,
            grad_clip: t.grad_clip,
            rul_ceiling: t.rul_ceiling,
            window_len: p.window_len,
            window_shift: p.window_shift,
            train_ratio: p.train_ratio,
            grid_d: vec![30, 60],
            grid_tau: vec![0, 2, 4],
            grid_gru_layers: vec![2, 3, 4],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("experiment config serializes")
    }

    pub fn dataset_id(&self) -> Result<DatasetId> {
        DatasetId::parse(&self.dataset)
    }

    pub fn prepare_settings(&self) -> PrepareSettings {
        PrepareSettings {
            window_len: self.window_len,
            window_shift: self.window_shift,
            rul_ceiling: self.rul_ceiling,
            train_ratio: self.train_ratio,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            dropout: self.dropout,
            lr0: self.lr0,
            lr_decay_period: self.lr_decay_period,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
            grad_clip: self.grad_clip,
            rul_ceiling: self.rul_ceiling,
        }
    }

    /// Cross product of the grid axes, in axis order.
    pub fn grid_points(&self) -> Result<Vec<GridPoint>> {
        if self.grid_d.is_empty() || self.grid_tau.is_empty() || self.grid_gru_layers.is_empty() {
            return Err(Error::Config("every grid axis needs at least one value".into()));
        }
        let mut out = Vec::new();
        for &d in &self.grid_d {
            for &tau in &self.grid_tau {
                for &gru_layers in &self.grid_gru_layers {
                    out.push(GridPoint { d, tau, gru_layers });
                }
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        };
        positive("d", self.d)?;
        positive("gru_layers", self.gru_layers)?;
        positive("batch_size", self.batch_size)?;
        positive("max_epochs", self.max_epochs)?;
        positive("window_len", self.window_len)?;
        positive("window_shift", self.window_shift)?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 {} must be positive", self.lr0)));
        }
        if !(self.rul_ceiling > 0.0 && self.rul_ceiling.is_finite()) {
            return Err(Error::Config(format!(
                "rul_ceiling {} must be positive",
                self.rul_ceiling
            )));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "train_ratio {} outside (0, 1]",
                self.train_ratio
            )));
        }
        if self.pca_components == 0 || self.pca_components > NUM_CHANNELS {
            return Err(Error::Config(format!(
                "pca_components {} outside 1..={NUM_CHANNELS}",
                self.pca_components
            )));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("grad_clip {c} must be positive")));
            }
        }
        Ok(())
    }
}

/// Flags shared by train, grid, and evaluate; each one overrides the
/// matching config field.
#[derive(Debug, Default, Args)]
struct Overrides {
    /// Experiment config file (TOML); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Subset id, FD001 through FD004.
    #[arg(long)]
    dataset: Option<String>,
    /// Directory holding the raw data files (default: $GNMR_DATA_DIR).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Graph config path or variant name.
    #[arg(long)]
    graph: Option<String>,
    /// Estimator: gnmr, gru_mr, or pca_gru_mr.
    #[arg(long)]
    model: Option<String>,
    /// Run directory for artifacts.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Node representation width.
    #[arg(long)]
    d: Option<usize>,
    /// Message propagation steps.
    #[arg(long)]
    tau: Option<usize>,
    /// Stacked layers in the sequence encoder.
    #[arg(long)]
    gru_layers: Option<usize>,
    /// Share one message network across all directed edges.
    #[arg(long)]
    tie_edges: Option<bool>,
    /// Components kept by the pca_gru_mr projection.
    #[arg(long)]
    pca_components: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    lr_decay_period: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    rul_ceiling: Option<f64>,
    #[arg(long)]
    window_len: Option<usize>,
    #[arg(long)]
    window_shift: Option<usize>,
    #[arg(long)]
    train_ratio: Option<f64>,
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_toml_path(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = &self.dataset {
            cfg.dataset = v.clone();
        }
        if let Some(v) = &self.data_dir {
            cfg.data_dir = Some(v.clone());
        }
        if let Some(v) = &self.graph {
            cfg.graph = v.clone();
        }
        if let Some(v) = &self.model {
            cfg.model = ModelKind::parse(v)?;
        }
        if let Some(v) = &self.out_dir {
            cfg.out_dir = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.d {
            cfg.d = v;
        }
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        if let Some(v) = self.gru_layers {
            cfg.gru_layers = v;
        }
        if let Some(v) = self.tie_edges {
            cfg.tie_edges = v;
        }
        if let Some(v) = self.pca_components {
            cfg.pca_components = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.dropout {
            cfg.dropout = v;
        }
        if let Some(v) = self.lr0 {
            cfg.lr0 = v;
        }
        if let Some(v) = self.lr_decay_period {
            cfg.lr_decay_period = v;
        }
        if let Some(v) = self.max_epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = self.patience {
            cfg.patience = v;
        }
        if let Some(v) = self.grad_clip {
            cfg.grad_clip = Some(v);
        }
        if let Some(v) = self.rul_ceiling {
            cfg.rul_ceiling = v;
        }
        if let Some(v) = self.window_len {
            cfg.window_len = v;
        }
        if let Some(v) = self.window_shift {
            cfg.window_shift = v;
        }
        if let Some(v) = self.train_ratio {
            cfg.train_ratio = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "gnmr",
    version,
    about = "Remaining-useful-life estimation over equipment graphs"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic run-to-failure files shaped like the turbofan sets.
    SynthData {
        /// Directory to write the train/test/RUL files into.
        #[arg(long)]
        data_dir: PathBuf,
        /// Subset to generate (default: all four).
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parse, normalize, split, and cache one subset.
    Prepare {
        #[arg(long)]
        dataset: String,
        /// Directory with the raw files (default: $GNMR_DATA_DIR).
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Graph config path or variant name; keys the cache.
        #[arg(long, default_value = "original")]
        graph: String,
        /// Cache file to write (default: <data-dir>/cache/<dataset>-<key>.bin).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        window_len: Option<usize>,
        #[arg(long)]
        window_shift: Option<usize>,
        #[arg(long)]
        rul_ceiling: Option<f64>,
        #[arg(long)]
        train_ratio: Option<f64>,
    },
    /// Train one model into a run directory.
    Train {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score a checkpoint on the held-out test instances.
    Evaluate {
        /// Model checkpoint to score.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory for the report CSVs (default: next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Keep raw cycle predictions instead of clamping into [0, ceiling].
        #[arg(long)]
        no_clamp: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train every architecture candidate and retrain the winner.
    Grid {
        /// Concurrent training jobs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Derive a structure variant and write it as a graph config.
    PerturbGraph {
        /// Base graph config (default: the built-in 8-module turbofan).
        #[arg(long)]
        base: Option<PathBuf>,
        /// original, reduced4, increased13, per_sensor, or single_node.
        #[arg(long)]
        variant: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output graph config path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate attention against true life from an evaluation report.
    AttentionReport {
        /// eval_report.csv produced by evaluate.
        #[arg(long)]
        report: PathBuf,
        /// Node under fault: a graph node name or a zero-based index.
        #[arg(long, default_value = "hpc")]
        fault_node: String,
        /// Graph that names the nodes (path or variant).
        #[arg(long, default_value = "original")]
        graph: String,
        /// Output CSV (default: attention_profile.csv next to the report).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Parse the process arguments and run the chosen command.
pub fn run() -> Result<()> {
    match Cli::parse().command {
        Command::SynthData {
            data_dir,
            dataset,
            seed,
        } => cmd_synth_data(&data_dir, dataset.as_deref(), seed),
        Command::Prepare {
            dataset,
            data_dir,
            graph,
            out,
            seed,
            window_len,
            window_shift,
            rul_ceiling,
            train_ratio,
        } => {
            let mut s = PrepareSettings {
                seed,
                ..PrepareSettings::default()
            };
            if let Some(v) = window_len {
                s.window_len = v;
            }
            if let Some(v) = window_shift {
                s.window_shift = v;
            }
            if let Some(v) = rul_ceiling {
                s.rul_ceiling = v;
            }
            if let Some(v) = train_ratio {
                s.train_ratio = v;
            }
            cmd_prepare(&dataset, data_dir.as_deref(), &graph, out.as_deref(), &s)
        }
        Command::Train { overrides } => cmd_train(&overrides),
        Command::Evaluate {
            checkpoint,
            out,
            no_clamp,
            overrides,
        } => cmd_evaluate(&checkpoint, out.as_deref(), no_clamp, &overrides),
        Command::Grid { jobs, overrides } => cmd_grid(jobs, &overrides),
        Command::PerturbGraph {
            base,
            variant,
            seed,
            out,
        } => cmd_perturb_graph(base.as_deref(), &variant, seed, &out),
        Command::AttentionReport {
            report,
            fault_node,
            graph,
            out,
            seed,
        } => cmd_attention_report(&report, &fault_node, &graph, out.as_deref(), seed),
    }
}

fn resolve_data_dir(flag: Option<&Path>) -> Result<PathBuf> {
    if let Some(d) = flag {
        return Ok(d.to_path_buf());
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
        _ => Err(Error::Config(format!(
            "no data directory; pass --data-dir, set data_dir in the config, \
             or export {DATA_DIR_ENV}"
        ))),
    }
}

/// A graph argument is either a variant of the built-in 8-module turbofan
/// structure or a path to a graph config.
fn resolve_graph(spec: &str, seed: u64) -> Result<EquipmentGraph> {
    match GraphVariant::parse(spec) {
        Ok(v) => EquipmentGraph::turbofan8().apply_variant(v, seed),
        Err(_) => {
            let path = Path::new(spec);
            if path.is_file() {
                EquipmentGraph::from_toml_path(path)
            } else {
                Err(Error::Config(format!(
                    "graph {spec:?} is neither a variant name (original, reduced4, \
                     increased13, per_sensor, single_node) nor an existing config file"
                )))
            }
        }
    }
}

fn expected_key(id: DatasetId, graph_hash: &str, s: &PrepareSettings) -> CacheKey {
    CacheKey {
        dataset: id.name().to_string(),
        graph_hash: graph_hash.to_string(),
        window_len: s.window_len as u32,
        window_shift: s.window_shift as u32,
        rul_ceiling: s.rul_ceiling,
        train_ratio: s.train_ratio,
        seed: s.seed,
    }
}

fn cache_fingerprint(key: &CacheKey) -> String {
    let mut h = Sha256::new();
    h.update(format!(
        "{}|{}|{}|{}|{}|{}|{}",
        key.dataset,
        key.graph_hash,
        key.window_len,
        key.window_shift,
        key.rul_ceiling,
        key.train_ratio,
        key.seed
    ));
    h.finalize()
        .iter()
        .take(6)
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn default_cache_path(data_dir: &Path, key: &CacheKey) -> PathBuf {
    data_dir
        .join("cache")
        .join(format!("{}-{}.bin", key.dataset, cache_fingerprint(key)))
}

/// Reuse a cache whose key matches exactly; otherwise rebuild from the raw
/// files and save. Returns the cache, its path, and whether it was built.
fn load_or_build_cache(
    id: DatasetId,
    data_dir: &Path,
    graph_hash: &str,
    s: &PrepareSettings,
    explicit: Option<&Path>,
) -> Result<(DatasetCache, PathBuf, bool)> {
    let key = expected_key(id, graph_hash, s);
    let path = explicit
        .map(Path::to_path_buf)
        .unwrap_or_else(|| default_cache_path(data_dir, &key));
    if path.is_file() {
        if let Ok(cache) = DatasetCache::load(&path) {
            if cache.check_key(&key).is_ok() {
                return Ok((cache, path, false));
            }
        }
    }
    let cache = prepare_dataset(id, data_dir, graph_hash, s)?;
    cache.save(&path)?;
    Ok((cache, path, true))
}

fn cmd_synth_data(dir: &Path, dataset: Option<&str>, seed: u64) -> Result<()> {
    let ids: Vec<DatasetId> = match dataset {
        Some(s) => vec![DatasetId::parse(s)?],
        None => DatasetId::ALL.to_vec(),
    };
    for id in ids {
        let ds = synth::generate(id, seed);
        let paths = synth::write_files(&ds, dir)?;
        let (train_units, test_units, windows) = synth::published_counts(id);
        println!("{}: {train_units} training units, {test_units} test units, {windows} training windows", id.name());
        for p in paths {
            println!("  wrote {}", p.display());
        }
    }
    Ok(())
}

fn cmd_prepare(
    dataset: &str,
    data_dir: Option<&Path>,
    graph_spec: &str,
    out: Option<&Path>,
    s: &PrepareSettings,
) -> Result<()> {
    let id = DatasetId::parse(dataset)?;
    let data_dir = resolve_data_dir(data_dir)?;
    let graph = resolve_graph(graph_spec, s.seed)?;
    let (cache, path, built) = load_or_build_cache(id, &data_dir, &graph.hash_hex(), s, out)?;
    let sum = summarize(&cache);
    println!("{} prepared from {}", id.name(), data_dir.display());
    println!(
        "units: train {}, val {}, test {}",
        sum.train_units, sum.val_units, sum.test_units
    );
    println!(
        "windows: train {}, val {}, train+val {}, test {}",
        sum.train_windows,
        sum.val_windows,
        sum.train_windows + sum.val_windows,
        sum.test_windows
    );
    println!("graph: {} nodes, hash {}", graph.num_nodes(), graph.hash_hex());
    println!(
        "cache: {} ({})",
        path.display(),
        if built { "written" } else { "reused" }
    );
    Ok(())
}

struct RunArtifacts {
    best_epoch: usize,
    best_val_rmse: f64,
}

/// Train cfg's model into cfg.out_dir: resolved config, history CSV, and
/// the best checkpoint (plus the fitted projection for pca_gru_mr).
fn run_training(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    let id = cfg.dataset_id()?;
    let data_dir = resolve_data_dir(cfg.data_dir.as_deref())?;
    let s = cfg.prepare_settings();
    let tc = cfg.train_config();
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml_string())?;

    let outcome = match cfg.model {
        ModelKind::Gnmr => {
            let graph = resolve_graph(&cfg.graph, cfg.seed)?;
            let (cache, _, _) = load_or_build_cache(id, &data_dir, &graph.hash_hex(), &s, None)?;
            let train_set = graph_samples(&cache.train, &cache.stats, &graph, &s)?;
            let val_set = graph_samples(&cache.val, &cache.stats, &graph, &s)?;
            let mut rng = seeds::rng(cfg.seed, &[0x4d0d]);
            let mut model = GnmrModel::new(
                graph.clone(),
                cfg.d,
                cfg.gru_layers,
                cfg.tau,
                cfg.tie_edges,
                &mut rng,
            )?;
            let outcome = crate::train::train(&mut model, &train_set, &val_set, &tc)?;
            model.save(&cfg.out_dir.join("best.ckpt"))?;
            outcome
        }
        ModelKind::GruMr | ModelKind::PcaGruMr => {
            let graph = flat24_graph();
            let (cache, _, _) = load_or_build_cache(id, &data_dir, &graph.hash_hex(), &s, None)?;
            let pca = if cfg.model == ModelKind::PcaGruMr {
                let p = pca_fit(&stacked_rows(&cache.train), NUM_CHANNELS, cfg.pca_components)?;
                let kept: f64 = p.explained_variance_ratio.iter().sum();
                println!(
                    "projection keeps {:.1}% of the training variance in {} components",
                    100.0 * kept,
                    p.k
                );
                p.save(&cfg.out_dir.join("pca.bin"))?;
                Some(p)
            } else {
                None
            };
            let train_set = flat_samples(&cache.train, &cache.stats, &s, pca.as_ref())?;
            let val_set = flat_samples(&cache.val, &cache.stats, &s, pca.as_ref())?;
            let input_dim = pca.as_ref().map(|p| p.k).unwrap_or(NUM_CHANNELS);
            let mut rng = seeds::rng(cfg.seed, &[0x4d0d]);
            let mut model = GruMrModel::new(input_dim, cfg.d, cfg.gru_layers, &mut rng)?;
            let outcome = crate::train::train(&mut model, &train_set, &val_set, &tc)?;
            model.save(&cfg.out_dir.join("best.ckpt"))?;
            outcome
        }
    };

    outcome.history.write_csv(&cfg.out_dir.join("history.csv"))?;
    Ok(RunArtifacts {
        best_epoch: outcome.best_epoch,
        best_val_rmse: outcome.best_val_rmse,
    })
}

fn cmd_train(overrides: &Overrides) -> Result<()> {
    let cfg = overrides.resolve()?;
    let run = run_training(&cfg)?;
    println!(
        "{} on {}: best epoch {}, validation rmse {:.4} cycles",
        cfg.model.name(),
        cfg.dataset,
        run.best_epoch,
        run.best_val_rmse
    );
    println!("run dir: {}", cfg.out_dir.display());
    Ok(())
}

fn cmd_evaluate(
    checkpoint: &Path,
    out: Option<&Path>,
    no_clamp: bool,
    overrides: &Overrides,
) -> Result<()> {
    let cfg = overrides.resolve()?;
    let id = cfg.dataset_id()?;
    let data_dir = resolve_data_dir(cfg.data_dir.as_deref())?;
    let s = cfg.prepare_settings();
    let clamp = !no_clamp;
    let out_dir = out
        .map(Path::to_path_buf)
        .or_else(|| checkpoint.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir)?;

    let report = match checkpoint_kind(checkpoint)? {
        CheckpointKind::Graph => {
            let graph = resolve_graph(&cfg.graph, cfg.seed)?;
            let model = GnmrModel::load(checkpoint, &graph)?;
            let (cache, _, _) = load_or_build_cache(id, &data_dir, &graph.hash_hex(), &s, None)?;
            let samples = graph_test_samples(&cache.test, &cache.stats, &graph, &s)?;
            evaluate_gnmr(&model, &samples, s.rul_ceiling, clamp, cfg.batch_size)?
        }
        CheckpointKind::Flat => {
            let model = GruMrModel::load(checkpoint)?;
            let graph = flat24_graph();
            let (cache, _, _) = load_or_build_cache(id, &data_dir, &graph.hash_hex(), &s, None)?;
            let pca = if model.input_dim() == NUM_CHANNELS {
                None
            } else {
                let sidecar = checkpoint.with_file_name("pca.bin");
                if !sidecar.is_file() {
                    return Err(Error::Incompatible(format!(
                        "checkpoint expects {}-wide inputs; place the fitted projection \
                         at {}",
                        model.input_dim(),
                        sidecar.display()
                    )));
                }
                let p = PcaTransform::load(&sidecar)?;
                if p.k != model.input_dim() {
                    return Err(Error::Incompatible(format!(
                        "projection keeps {} components but the checkpoint expects {}",
                        p.k,
                        model.input_dim()
                    )));
                }
                Some(p)
            };
            let samples = flat_test_samples(&cache.test, &cache.stats, &s, pca.as_ref())?;
            evaluate_baseline(&model, &samples, s.rul_ceiling, clamp, cfg.batch_size)?
        }
    };

    write_eval_report(&out_dir.join("eval_report.csv"), &report)?;
    write_metrics(&out_dir.join("metrics.csv"), &report)?;
    println!("rmse {}", report.rmse);
    println!("s {}", report.score);
    println!("reports in {}", out_dir.display());
    Ok(())
}

fn cmd_grid(jobs: usize, overrides: &Overrides) -> Result<()> {
    let cfg = overrides.resolve()?;
    if cfg.model != ModelKind::Gnmr {
        return Err(Error::Config(
            "grid search covers the graph model; train baselines directly".into(),
        ));
    }
    let id = cfg.dataset_id()?;
    let data_dir = resolve_data_dir(cfg.data_dir.as_deref())?;
    let s = cfg.prepare_settings();
    let graph = resolve_graph(&cfg.graph, cfg.seed)?;
    let (cache, _, _) = load_or_build_cache(id, &data_dir, &graph.hash_hex(), &s, None)?;
    let train_set = graph_samples(&cache.train, &cache.stats, &graph, &s)?;
    let val_set = graph_samples(&cache.val, &cache.stats, &graph, &s)?;
    let points = cfg.grid_points()?;

    // Seeds hang off the candidate itself, not its position, so scores do
    // not depend on evaluation order or the job count.
    let score = |p: GridPoint| -> Result<f64> {
        let tags = [0x6712, p.d as u64, p.tau as u64, p.gru_layers as u64];
        let mut rng = seeds::rng(cfg.seed, &tags);
        let mut model = GnmrModel::new(
            graph.clone(),
            p.d,
            p.gru_layers,
            p.tau,
            cfg.tie_edges,
            &mut rng,
        )?;
        let mut tc = cfg.train_config();
        tc.seed = seeds::derive(cfg.seed, &tags);
        let outcome = crate::train::train(&mut model, &train_set, &val_set, &tc)?;
        Ok(outcome.best_val_rmse)
    };
    let outcome = grid_search(&points, jobs, score)?;

    std::fs::create_dir_all(&cfg.out_dir)?;
    write_grid_csv(&cfg.out_dir.join("grid_results.csv"), &outcome)?;
    std::fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml_string())?;

    let mut best_cfg = cfg.clone();
    best_cfg.d = outcome.best.d;
    best_cfg.tau = outcome.best.tau;
    best_cfg.gru_layers = outcome.best.gru_layers;
    best_cfg.out_dir = cfg.out_dir.join("best");
    let run = run_training(&best_cfg)?;

    println!(
        "best candidate: d {}, tau {}, layers {} (validation rmse {:.4})",
        outcome.best.d, outcome.best.tau, outcome.best.gru_layers, outcome.best_val_rmse
    );
    println!(
        "retrained into {} (epoch {}, rmse {:.4})",
        best_cfg.out_dir.display(),
        run.best_epoch,
        run.best_val_rmse
    );
    Ok(())
}

fn cmd_perturb_graph(base: Option<&Path>, variant: &str, seed: u64, out: &Path) -> Result<()> {
    let v = GraphVariant::parse(variant)?;
    let base_graph = match base {
        Some(p) => EquipmentGraph::from_toml_path(p)?,
        None => EquipmentGraph::turbofan8(),
    };
    let derived = base_graph.apply_variant(v, seed)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out, derived.to_toml_string())?;
    println!(
        "{variant}: {} nodes, {} directed edges, hash {}",
        derived.num_nodes(),
        derived.num_edges(),
        derived.hash_hex()
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_attention_report(
    report_path: &Path,
    fault_node: &str,
    graph_spec: &str,
    out: Option<&Path>,
    seed: u64,
) -> Result<()> {
    let report = read_eval_report(report_path)?;
    let num_nodes = report
        .records
        .first()
        .map(|r| r.weights.len())
        .unwrap_or(0);
    let fault = match fault_node.parse::<usize>() {
        Ok(idx) => idx,
        Err(_) => {
            let graph = resolve_graph(graph_spec, seed)?;
            let name = fault_node.to_ascii_lowercase();
            let node = graph.node_by_name(&name).ok_or_else(|| {
                Error::Config(format!(
                    "graph has no node named {fault_node:?}; pass a node name or a \
                     zero-based index"
                ))
            })?;
            if graph.num_nodes() != num_nodes {
                return Err(Error::Incompatible(format!(
                    "report carries {num_nodes} attention columns but the graph has \
                     {} nodes",
                    graph.num_nodes()
                )));
            }
            node.id
        }
    };
    let profile = attention_profile(&report, fault, &default_rul_bins())?;
    let out_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| report_path.with_file_name("attention_profile.csv"));
    write_attention_profile(&out_path, &profile)?;
    let binned: usize = profile.bins.iter().map(|b| b.count).sum();
    println!("fault node {fault}, {binned} instances binned");
    println!("wrote {}", out_path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_configs_fill_in_defaults() {
        let cfg: ExperimentConfig =
            toml::from_str("dataset = \"FD003\"\nd = 60\n").unwrap();
        assert_eq!(cfg.dataset, "FD003");
        assert_eq!(cfg.d, 60);
        assert_eq!(cfg.tau, ExperimentConfig::default().tau);
        assert_eq!(cfg.batch_size, ExperimentConfig::default().batch_size);
    }

    #[test]
    fn unknown_config_fields_are_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("mystery_knob = 3\n").is_err());
    }

    #[test]
    fn grid_fields_default_to_the_full_search_grid() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.grid_points().unwrap(), crate::train::default_grid());
    }

    #[test]
    fn model_kind_names_round_trip() {
        for kind in [ModelKind::Gnmr, ModelKind::GruMr, ModelKind::PcaGruMr] {
            assert_eq!(ModelKind::parse(kind.name()).unwrap(), kind);
        }
        assert!(ModelKind::parse("transformer").is_err());
    }

    #[test]
    fn flags_override_config_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, "dataset = \"FD002\"\nd = 7\nseed = 3\n").unwrap();
        let overrides = Overrides {
            config: Some(path),
            d: Some(9),
            ..Overrides::default()
        };
        let cfg = overrides.resolve().unwrap();
        assert_eq!(cfg.dataset, "FD002");
        assert_eq!(cfg.d, 9, "flag beats the file");
        assert_eq!(cfg.seed, 3, "unflagged fields come from the file");
    }

    #[test]
    fn invalid_resolved_configs_are_config_errors() {
        let overrides = Overrides {
            dropout: Some(1.5),
            ..Overrides::default()
        };
        assert!(matches!(overrides.resolve(), Err(Error::Config(_))));
    }

    #[test]
    fn graph_arguments_accept_variants_and_paths() {
        assert_eq!(resolve_graph("original", 0).unwrap().num_nodes(), 8);
        assert_eq!(resolve_graph("reduced4", 0).unwrap().num_nodes(), 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.toml");
        std::fs::write(&path, EquipmentGraph::turbofan8().to_toml_string()).unwrap();
        let from_file = resolve_graph(path.to_str().unwrap(), 0).unwrap();
        assert_eq!(from_file.hash_hex(), EquipmentGraph::turbofan8().hash_hex());
        assert!(matches!(
            resolve_graph("no_such_variant", 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn cache_names_separate_every_key_field() {
        let base = expected_key(
            DatasetId::FD001,
            "abc",
            &PrepareSettings::default(),
        );
        let fingerprint = cache_fingerprint(&base);
        let mut names = std::collections::BTreeSet::new();
        names.insert(fingerprint.clone());
        for change in [
            |k: &mut CacheKey| k.dataset = "FD002".into(),
            |k: &mut CacheKey| k.graph_hash = "def".into(),
            |k: &mut CacheKey| k.window_len = 50,
            |k: &mut CacheKey| k.window_shift = 1,
            |k: &mut CacheKey| k.rul_ceiling = 125.0,
            |k: &mut CacheKey| k.train_ratio = 0.9,
            |k: &mut CacheKey| k.seed = 1,
        ] {
            let mut key = base.clone();
            change(&mut key);
            names.insert(cache_fingerprint(&key));
        }
        assert_eq!(names.len(), 8, "each field variation renames the cache");
        assert_eq!(fingerprint.len(), 12);
    }

    #[test]
    fn command_line_shapes_parse() {
        Cli::try_parse_from([
            "gnmr", "prepare", "--dataset", "FD001", "--data-dir", "/tmp/x",
        ])
        .unwrap();
        Cli::try_parse_from(["gnmr", "train", "--config", "exp.toml", "--max-epochs", "3"])
            .unwrap();
        Cli::try_parse_from([
            "gnmr",
            "evaluate",
            "--checkpoint",
            "best.ckpt",
            "--dataset",
            "FD001",
        ])
        .unwrap();
        Cli::try_parse_from(["gnmr", "grid", "--jobs", "2", "--dataset", "FD001"]).unwrap();
        Cli::try_parse_from([
            "gnmr",
            "perturb-graph",
            "--variant",
            "increased13",
            "--seed",
            "4",
            "--out",
            "g.toml",
        ])
        .unwrap();
        Cli::try_parse_from([
            "gnmr",
            "attention-report",
            "--report",
            "eval_report.csv",
            "--fault-node",
            "HPC",
        ])
        .unwrap();
        assert!(Cli::try_parse_from(["gnmr", "unknown-command"]).is_err());
    }
}
