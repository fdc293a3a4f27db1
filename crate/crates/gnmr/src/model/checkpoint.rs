//! Versioned binary checkpoints for both model families. The header pins
//! the structure (graph hash, sizes, tying); tensors follow in parameter
//! declaration order.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{GnmrModel, GruMrModel};
use crate::binfmt::{read_f64s, read_string, write_f64s, write_string};
use crate::error::{Error, Result};
use crate::graph::EquipmentGraph;

const MAGIC: &[u8; 8] = b"GNMRMODL";
const VERSION: u32 = 1;
const KIND_GRAPH: u8 = 0;
const KIND_FLAT: u8 = 1;

fn write_params<W: Write>(w: &mut W, params: &[(String, &crate::autodiff::Tensor)]) -> Result<()> {
    w.write_u32::<LittleEndian>(params.len() as u32)?;
    for (name, tensor) in params {
        write_string(w, name)?;
        let shape = tensor.shape();
        w.write_u8(shape.len() as u8)?;
        for &dim in shape {
            w.write_u32::<LittleEndian>(dim as u32)?;
        }
        write_f64s(w, tensor.values())?;
    }
    Ok(())
}

/// Overwrite a model's tensors from the stream; names and shapes must line
/// up with the freshly-constructed parameter list.
fn read_params_into<R: Read>(
    r: &mut R,
    params: Vec<(String, &mut crate::autodiff::Tensor)>,
) -> Result<()> {
    let count = r.read_u32::<LittleEndian>()? as usize;
    if count != params.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} tensors, model expects {}",
            params.len()
        )));
    }
    for (name, tensor) in params {
        let file_name = read_string(r)?;
        if file_name != name {
            return Err(Error::Format(format!(
                "checkpoint tensor {file_name:?} does not match expected {name:?}"
            )));
        }
        let ndim = r.read_u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u32::<LittleEndian>()? as usize);
        }
        if shape != tensor.shape() {
            return Err(Error::Format(format!(
                "checkpoint tensor {name:?} has shape {shape:?}, model expects {:?}",
                tensor.shape()
            )));
        }
        let values = read_f64s(r, shape.iter().product())?;
        tensor.values_mut().copy_from_slice(&values);
    }
    Ok(())
}

/// Which model family a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    /// Graph model over an equipment structure.
    Graph,
    /// Flat recurrent baseline.
    Flat,
}

/// Read just enough of a checkpoint to dispatch a load.
pub fn checkpoint_kind(path: &Path) -> Result<CheckpointKind> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{} is not a model checkpoint",
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint version {version} (supported: {VERSION})"
        )));
    }
    match r.read_u8()? {
        KIND_GRAPH => Ok(CheckpointKind::Graph),
        KIND_FLAT => Ok(CheckpointKind::Flat),
        k => Err(Error::Format(format!("unknown checkpoint kind byte {k}"))),
    }
}

fn open_reader(path: &Path, want_kind: u8) -> Result<BufReader<std::fs::File>> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{} is not a model checkpoint",
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint version {version} (supported: {VERSION})"
        )));
    }
    let kind = r.read_u8()?;
    if kind != want_kind {
        let name = |k| if k == KIND_GRAPH { "graph model" } else { "flat baseline" };
        return Err(Error::Incompatible(format!(
            "checkpoint holds a {}, expected a {}",
            name(kind),
            name(want_kind)
        )));
    }
    Ok(r)
}

impl GnmrModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u8(KIND_GRAPH)?;
        write_string(&mut w, &self.graph().hash_hex())?;
        w.write_u32::<LittleEndian>(self.hidden_size() as u32)?;
        w.write_u32::<LittleEndian>(self.gru_layers() as u32)?;
        w.write_u32::<LittleEndian>(self.tau() as u32)?;
        w.write_u8(u8::from(self.tie_edges()))?;
        let map = self.edge_to_set();
        w.write_u32::<LittleEndian>(map.len() as u32)?;
        for &set in map {
            w.write_u32::<LittleEndian>(set as u32)?;
        }
        write_params(&mut w, &self.named_params())?;
        w.flush()?;
        Ok(())
    }

    /// Load a checkpoint for `graph`; a graph-hash mismatch is an artifact
    /// incompatibility, not a parse failure.
    pub fn load(path: &Path, graph: &EquipmentGraph) -> Result<Self> {
        let mut r = open_reader(path, KIND_GRAPH)?;
        let stored_hash = read_string(&mut r)?;
        let graph_hash = graph.hash_hex();
        if stored_hash != graph_hash {
            return Err(Error::Incompatible(format!(
                "checkpoint was trained on graph {stored_hash} but the supplied graph hashes \
                 to {graph_hash}"
            )));
        }
        let d = r.read_u32::<LittleEndian>()? as usize;
        let gru_layers = r.read_u32::<LittleEndian>()? as usize;
        let tau = r.read_u32::<LittleEndian>()? as usize;
        let tie_edges = r.read_u8()? != 0;
        let map_len = r.read_u32::<LittleEndian>()? as usize;
        let mut edge_to_set = Vec::with_capacity(map_len);
        for _ in 0..map_len {
            edge_to_set.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let mut rng = crate::seeds::rng(0, &[]);
        let mut model = GnmrModel::new(graph.clone(), d, gru_layers, tau, tie_edges, &mut rng)?;
        if model.edge_to_set() != edge_to_set.as_slice() {
            return Err(Error::Incompatible(
                "checkpoint edge-tying map does not match the graph".into(),
            ));
        }
        read_params_into(&mut r, model.named_params_mut())?;
        Ok(model)
    }
}

impl GruMrModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u8(KIND_FLAT)?;
        w.write_u32::<LittleEndian>(self.input_dim() as u32)?;
        w.write_u32::<LittleEndian>(self.hidden_size() as u32)?;
        w.write_u32::<LittleEndian>(self.gru_layers() as u32)?;
        write_params(&mut w, &self.named_params())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = open_reader(path, KIND_FLAT)?;
        let input_dim = r.read_u32::<LittleEndian>()? as usize;
        let d = r.read_u32::<LittleEndian>()? as usize;
        let gru_layers = r.read_u32::<LittleEndian>()? as usize;
        let mut rng = crate::seeds::rng(0, &[]);
        let mut model = GruMrModel::new(input_dim, d, gru_layers, &mut rng)?;
        read_params_into(&mut r, model.named_params_mut())?;
        Ok(model)
    }
}
