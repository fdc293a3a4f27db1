//! Python bindings for the turbofan RUL regressor: equipment graphs,
//! prepared datasets, the graph model, and its training and evaluation
//! loops. Built as the `gnmr_py` extension module.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use gnmr::data::synth;
use gnmr::data::{
    graph_samples, graph_test_samples, prepare_dataset, summarize, DatasetCache, DatasetId,
    PrepareSettings,
};
use gnmr::evaluation::{evaluate_gnmr, rmse as rmse_of, timeliness_score};
use gnmr::graph::{EquipmentGraph, GraphVariant};
use gnmr::model::GnmrModel;
use gnmr::seeds;
use gnmr::train::{train, TrainConfig};

fn to_py(e: gnmr::error::Error) -> PyErr {
    use gnmr::error::Error;
    match &e {
        Error::Config(_) | Error::Parse { .. } | Error::Incompatible(_) => {
            PyValueError::new_err(e.to_string())
        }
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// An equipment graph: named nodes with per-node sensor lists plus
/// directed edges along the physical couplings.
#[pyclass(module = "gnmr_py")]
#[derive(Clone)]
struct Graph {
    inner: EquipmentGraph,
}

#[pymethods]
impl Graph {
    /// The built-in eight-module turbofan graph.
    #[staticmethod]
    fn turbofan8() -> Graph {
        Graph {
            inner: EquipmentGraph::turbofan8(),
        }
    }

    /// A named rewiring of the built-in graph: "original", "reduced4",
    /// "increased13", "per_sensor", or "single_node". The seed only
    /// matters for variants that split sensor sets randomly.
    #[staticmethod]
    #[pyo3(signature = (name, seed = 0))]
    fn variant(name: &str, seed: u64) -> PyResult<Graph> {
        let v = GraphVariant::parse(name).map_err(to_py)?;
        let inner = EquipmentGraph::turbofan8()
            .apply_variant(v, seed)
            .map_err(to_py)?;
        Ok(Graph { inner })
    }

    /// Load a graph from a TOML config file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Graph> {
        Ok(Graph {
            inner: EquipmentGraph::from_toml_path(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        std::fs::write(&path, self.inner.to_toml_string()).map_err(|e| to_py(e.into()))
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    #[getter]
    fn num_nodes(&self) -> usize {
        self.inner.num_nodes()
    }

    #[getter]
    fn node_names(&self) -> Vec<String> {
        self.inner.nodes().iter().map(|n| n.name.clone()).collect()
    }

    #[getter]
    fn edges(&self) -> Vec<(usize, usize)> {
        self.inner.edges().to_vec()
    }

    /// Content hash; caches and checkpoints are keyed by it.
    #[getter]
    fn hash(&self) -> String {
        self.inner.hash_hex()
    }

    fn __repr__(&self) -> String {
        format!(
            "Graph({} nodes, {} edges, hash {})",
            self.inner.num_nodes(),
            self.inner.edges().len(),
            self.inner.hash_hex()
        )
    }
}

/// One parsed, normalized, and split subset, windowed for a graph.
#[pyclass(module = "gnmr_py")]
struct Dataset {
    cache: DatasetCache,
    settings: PrepareSettings,
}

#[pymethods]
impl Dataset {
    /// Parse the raw files of one subset and split it for training.
    #[staticmethod]
    #[pyo3(signature = (
        dataset, data_dir, graph,
        window_len = 100, window_shift = 5, rul_ceiling = 130.0,
        train_ratio = 0.8, seed = 0,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn prepare(
        dataset: &str,
        data_dir: PathBuf,
        graph: &Graph,
        window_len: usize,
        window_shift: usize,
        rul_ceiling: f64,
        train_ratio: f64,
        seed: u64,
    ) -> PyResult<Dataset> {
        let id = DatasetId::parse(dataset).map_err(to_py)?;
        let settings = PrepareSettings {
            window_len,
            window_shift,
            rul_ceiling,
            train_ratio,
            seed,
        };
        let cache =
            prepare_dataset(id, &data_dir, &graph.inner.hash_hex(), &settings).map_err(to_py)?;
        Ok(Dataset { cache, settings })
    }

    /// Instance and window counts.
    fn summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let s = summarize(&self.cache);
        let d = PyDict::new(py);
        d.set_item("train_units", s.train_units)?;
        d.set_item("val_units", s.val_units)?;
        d.set_item("test_units", s.test_units)?;
        d.set_item("train_windows", s.train_windows)?;
        d.set_item("val_windows", s.val_windows)?;
        d.set_item("test_windows", s.test_windows)?;
        Ok(d)
    }

    #[getter]
    fn dataset(&self) -> String {
        self.cache.key.dataset.clone()
    }

    #[getter]
    fn graph_hash(&self) -> String {
        self.cache.key.graph_hash.clone()
    }

    fn __repr__(&self) -> String {
        let s = summarize(&self.cache);
        format!(
            "Dataset({}, {}+{} train/val units, {} test units)",
            self.cache.key.dataset, s.train_units, s.val_units, s.test_units
        )
    }
}

/// The graph regression model: per-node encoders, a shared recurrent
/// stack, gated message passing, and an attention readout.
#[pyclass(module = "gnmr_py")]
struct Model {
    inner: GnmrModel,
}

impl Model {
    fn check_graph(&self, dataset: &Dataset) -> PyResult<()> {
        if self.inner.graph().hash_hex() != dataset.cache.key.graph_hash {
            return Err(PyValueError::new_err(format!(
                "dataset was prepared for graph {}, model uses {}",
                dataset.cache.key.graph_hash,
                self.inner.graph().hash_hex()
            )));
        }
        Ok(())
    }
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (graph, d = 30, gru_layers = 2, tau = 2, tie_edges = false, seed = 0))]
    fn new(
        graph: &Graph,
        d: usize,
        gru_layers: usize,
        tau: usize,
        tie_edges: bool,
        seed: u64,
    ) -> PyResult<Model> {
        let mut rng = seeds::rng(seed, &[0x4d0d]);
        let inner = GnmrModel::new(graph.inner.clone(), d, gru_layers, tau, tie_edges, &mut rng)
            .map_err(to_py)?;
        Ok(Model { inner })
    }

    /// Load a saved checkpoint; the graph must hash to the one the
    /// checkpoint was trained on.
    #[staticmethod]
    fn load(path: PathBuf, graph: &Graph) -> PyResult<Model> {
        Ok(Model {
            inner: GnmrModel::load(&path, &graph.inner).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.hidden_size()
    }

    #[getter]
    fn tau(&self) -> usize {
        self.inner.tau()
    }

    #[getter]
    fn gru_layers(&self) -> usize {
        self.inner.gru_layers()
    }

    #[getter]
    fn graph(&self) -> Graph {
        Graph {
            inner: self.inner.graph().clone(),
        }
    }

    /// Train on a prepared dataset's train/val split. The model keeps the
    /// parameters of the best validation epoch. Returns the history plus
    /// the best epoch and its validation RMSE.
    #[pyo3(signature = (
        dataset,
        batch_size = 32, dropout = 0.2, lr0 = 1e-3, lr_decay_period = 10,
        max_epochs = 200, patience = 20, seed = 0, grad_clip = None,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn fit<'py>(
        &mut self,
        py: Python<'py>,
        dataset: &Dataset,
        batch_size: usize,
        dropout: f64,
        lr0: f64,
        lr_decay_period: usize,
        max_epochs: usize,
        patience: usize,
        seed: u64,
        grad_clip: Option<f64>,
    ) -> PyResult<Bound<'py, PyDict>> {
        self.check_graph(dataset)?;
        let graph = self.inner.graph().clone();
        let strain = graph_samples(&dataset.cache.train, &dataset.cache.stats, &graph, &dataset.settings)
            .map_err(to_py)?;
        let sval = graph_samples(&dataset.cache.val, &dataset.cache.stats, &graph, &dataset.settings)
            .map_err(to_py)?;
        let cfg = TrainConfig {
            batch_size,
            dropout,
            lr0,
            lr_decay_period,
            max_epochs,
            patience,
            seed,
            grad_clip,
            rul_ceiling: dataset.settings.rul_ceiling,
        };
        let model = &mut self.inner;
        let outcome = py
            .allow_threads(|| train(model, &strain, &sval, &cfg))
            .map_err(to_py)?;
        let history = PyList::empty(py);
        for row in &outcome.history.rows {
            let r = PyDict::new(py);
            r.set_item("epoch", row.epoch)?;
            r.set_item("loss", row.loss)?;
            r.set_item("val_rmse", row.val_rmse)?;
            r.set_item("lr", row.lr)?;
            history.append(r)?;
        }
        let out = PyDict::new(py);
        out.set_item("history", history)?;
        out.set_item("best_epoch", outcome.best_epoch)?;
        out.set_item("best_val_rmse", outcome.best_val_rmse)?;
        Ok(out)
    }

    /// Evaluate on the dataset's test units (one end-aligned window per
    /// unit). Returns both metrics in cycles and the per-unit records with
    /// attention weights and node estimates.
    #[pyo3(signature = (dataset, clamp = true, batch_size = 64))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        dataset: &Dataset,
        clamp: bool,
        batch_size: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        self.check_graph(dataset)?;
        let graph = self.inner.graph().clone();
        let stest =
            graph_test_samples(&dataset.cache.test, &dataset.cache.stats, &graph, &dataset.settings)
                .map_err(to_py)?;
        let model = &self.inner;
        let ceiling = dataset.settings.rul_ceiling;
        let report = py
            .allow_threads(|| evaluate_gnmr(model, &stest, ceiling, clamp, batch_size))
            .map_err(to_py)?;
        let units = PyList::empty(py);
        for rec in &report.records {
            let r = PyDict::new(py);
            r.set_item("unit", rec.unit_id)?;
            r.set_item("true_rul", rec.true_rul)?;
            r.set_item("predicted_rul", rec.predicted_rul)?;
            r.set_item("error", rec.error)?;
            r.set_item("weights", rec.weights.clone())?;
            r.set_item("node_estimates", rec.node_estimates.clone())?;
            units.append(r)?;
        }
        let out = PyDict::new(py);
        out.set_item("rmse", report.rmse)?;
        out.set_item("score", report.score)?;
        out.set_item("units", units)?;
        Ok(out)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(d={}, tau={}, gru_layers={}, {} nodes)",
            self.inner.hidden_size(),
            self.inner.tau(),
            self.inner.gru_layers(),
            self.inner.graph().num_nodes()
        )
    }
}

/// Write deterministic synthetic raw files for one subset, or all four
/// when no subset is named. Returns the written file names.
#[pyfunction]
#[pyo3(signature = (data_dir, dataset = None, seed = 0))]
fn synth_data(data_dir: PathBuf, dataset: Option<&str>, seed: u64) -> PyResult<Vec<String>> {
    std::fs::create_dir_all(&data_dir).map_err(|e| to_py(e.into()))?;
    let ids: Vec<DatasetId> = match dataset {
        Some(s) => vec![DatasetId::parse(s).map_err(to_py)?],
        None => DatasetId::ALL.to_vec(),
    };
    let mut written = Vec::new();
    for id in ids {
        let ds = synth::generate(id, seed);
        for path in synth::write_files(&ds, &data_dir).map_err(to_py)? {
            written.push(
                path.file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default(),
            );
        }
    }
    Ok(written)
}

/// Root-mean-square error of prediction errors, in cycles.
#[pyfunction]
fn rmse(errors: Vec<f64>) -> PyResult<f64> {
    rmse_of(&errors).map_err(to_py)
}

/// Asymmetric timeliness score: late predictions (positive errors) cost
/// exp(e/u_late)-1, early ones exp(-e/u_early)-1, summed over instances.
#[pyfunction]
#[pyo3(signature = (errors, u_early = 13.0, u_late = 10.0))]
fn score(errors: Vec<f64>, u_early: f64, u_late: f64) -> PyResult<f64> {
    timeliness_score(&errors, u_early, u_late).map_err(to_py)
}

#[pymodule]
fn gnmr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Graph>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(synth_data, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    Ok(())
}
