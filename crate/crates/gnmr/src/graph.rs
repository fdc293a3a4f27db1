//! Directed equipment graphs: modules with sensor subsets, the normalized
//! adjacency pair used by message propagation, and the structure variants
//! (split, merge, per-sensor, single-node).

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channels;
use crate::error::{Error, Result};

/// One equipment module: a graph node owning an ordered sensor subset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSpec {
    /// Position in the node list; always 0..|V| with no gaps.
    pub id: usize,
    pub name: String,
    pub node_type: String,
    pub sensors: Vec<String>,
}

impl NodeSpec {
    /// Input width p_j of this node's encoder.
    pub fn width(&self) -> usize {
        self.sensors.len()
    }
}

/// Directed graph of equipment modules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EquipmentGraph {
    nodes: Vec<NodeSpec>,
    edges: Vec<(usize, usize)>,
}

/// Row-normalized incoming/outgoing adjacency, stored row-major |V|×|V|.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyPair {
    pub n: usize,
    pub a_in: Vec<f64>,
    pub a_out: Vec<f64>,
}

#[derive(Debug, Deserialize, Serialize)]
struct RawGraph {
    edges: Vec<[String; 2]>,
    nodes: Vec<RawNode>,
}

#[derive(Debug, Deserialize, Serialize)]
struct RawNode {
    name: String,
    node_type: String,
    sensors: Vec<String>,
}

pub const TURBOFAN_8_TOML: &str = include_str!("../configs/turbofan_8.toml");
pub const TURBOFAN_4_TOML: &str = include_str!("../configs/turbofan_4.toml");

/// Named structure variants selectable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphVariant {
    Original,
    Reduced4,
    Increased13,
    PerSensor,
    SingleNode,
}

impl GraphVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Self::Original),
            "reduced4" | "reduced" => Ok(Self::Reduced4),
            "increased13" | "increased" => Ok(Self::Increased13),
            "per_sensor" | "per-sensor" => Ok(Self::PerSensor),
            "single_node" | "single-node" => Ok(Self::SingleNode),
            other => Err(Error::Config(format!(
                "unknown graph variant {other:?}; expected original, reduced4, \
                 increased13, per_sensor, or single_node"
            ))),
        }
    }
}

/// Neighboring pairs that turn the 8-module turbofan graph into the shipped
/// 4-module one.
pub const TURBOFAN_MERGE_PAIRS: [(&str, &str); 4] = [
    ("fan", "lpc"),
    ("hpc", "burner"),
    ("hpt", "lpt"),
    ("bypass", "nozzle"),
];

impl EquipmentGraph {
    pub fn new(
        nodes: Vec<(String, String, Vec<String>)>,
        edges: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let nodes = nodes
            .into_iter()
            .enumerate()
            .map(|(id, (name, node_type, sensors))| NodeSpec {
                id,
                name,
                node_type,
                sensors,
            })
            .collect();
        let g = EquipmentGraph { nodes, edges };
        g.validate()?;
        Ok(g)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawGraph = toml::from_str(text)
            .map_err(|e| Error::Config(format!("graph config does not parse: {e}")))?;
        let nodes: Vec<NodeSpec> = raw
            .nodes
            .into_iter()
            .enumerate()
            .map(|(id, n)| NodeSpec {
                id,
                name: n.name,
                node_type: n.node_type,
                sensors: n.sensors,
            })
            .collect();
        let mut edges = Vec::with_capacity(raw.edges.len());
        for [from, to] in &raw.edges {
            let find = |name: &str| {
                nodes
                    .iter()
                    .position(|n| n.name == name)
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "edge [{from:?}, {to:?}] references unknown node {name:?}"
                        ))
                    })
            };
            edges.push((find(from)?, find(to)?));
        }
        let g = EquipmentGraph { nodes, edges };
        g.validate()?;
        Ok(g)
    }

    pub fn from_toml_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!(
            "cannot read graph config {}: {e}",
            path.display()
        )))?;
        Self::from_toml_str(&text)
    }

    /// The shipped 8-module turbofan graph.
    pub fn turbofan8() -> Self {
        Self::from_toml_str(TURBOFAN_8_TOML).expect("shipped 8-node config is valid")
    }

    /// The shipped 4-module turbofan graph.
    pub fn turbofan4() -> Self {
        Self::from_toml_str(TURBOFAN_4_TOML).expect("shipped 4-node config is valid")
    }

    fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Config("graph has no nodes".into()));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id != i {
                return Err(Error::Config(format!(
                    "node {:?} has id {} at position {i}",
                    node.name, node.id
                )));
            }
            if node.sensors.is_empty() {
                return Err(Error::Config(format!(
                    "node {:?} has an empty sensor list",
                    node.name
                )));
            }
            for s in &node.sensors {
                if channels::channel_index(s).is_none() {
                    return Err(Error::Config(format!(
                        "node {:?} lists unknown sensor {s:?}",
                        node.name
                    )));
                }
            }
            let mut seen = std::collections::BTreeSet::new();
            for s in &node.sensors {
                if !seen.insert(s.as_str()) {
                    return Err(Error::Config(format!(
                        "node {:?} lists sensor {s:?} twice",
                        node.name
                    )));
                }
            }
            if self.nodes[..i].iter().any(|m| m.name == node.name) {
                return Err(Error::Config(format!("duplicate node name {:?}", node.name)));
            }
        }
        let mut seen_edges = std::collections::BTreeSet::new();
        for &(a, b) in &self.edges {
            if a >= self.nodes.len() || b >= self.nodes.len() {
                return Err(Error::Config(format!(
                    "edge ({a}, {b}) references a node outside 0..{}",
                    self.nodes.len()
                )));
            }
            if a == b {
                return Err(Error::Config(format!(
                    "self-loop on node {:?}",
                    self.nodes[a].name
                )));
            }
            if !seen_edges.insert((a, b)) {
                return Err(Error::Config(format!(
                    "duplicate edge {:?} -> {:?}",
                    self.nodes[a].name, self.nodes[b].name
                )));
            }
        }
        Ok(())
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn node_by_name(&self, name: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.name == name)
    }

    /// Distinct sensors in first-appearance order across the node list.
    pub fn sensor_union(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for node in &self.nodes {
            for s in &node.sensors {
                if !out.iter().any(|t| t == s) {
                    out.push(s.clone());
                }
            }
        }
        out
    }

    /// Content digest over names, types, sensors, and edges. Two graphs
    /// hash equal iff they are structurally identical.
    pub fn hash_hex(&self) -> String {
        let mut hasher = Sha256::new();
        for node in &self.nodes {
            hasher.update(node.name.as_bytes());
            hasher.update([0u8]);
            hasher.update(node.node_type.as_bytes());
            hasher.update([0u8]);
            for s in &node.sensors {
                hasher.update(s.as_bytes());
                hasher.update([1u8]);
            }
            hasher.update([2u8]);
        }
        for &(a, b) in &self.edges {
            hasher.update((a as u64).to_le_bytes());
            hasher.update((b as u64).to_le_bytes());
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml_string(&self) -> String {
        let raw = RawGraph {
            edges: self
                .edges
                .iter()
                .map(|&(a, b)| [self.nodes[a].name.clone(), self.nodes[b].name.clone()])
                .collect(),
            nodes: self
                .nodes
                .iter()
                .map(|n| RawNode {
                    name: n.name.clone(),
                    node_type: n.node_type.clone(),
                    sensors: n.sensors.clone(),
                })
                .collect(),
        };
        toml::to_string(&raw).expect("graph serializes")
    }

    /// In/out adjacency with each nonzero row normalized to sum 1, so a row
    /// times the node-representation matrix is a mean over neighbors.
    pub fn build_adjacency(&self) -> AdjacencyPair {
        let n = self.nodes.len();
        let mut a_in = vec![0.0; n * n];
        let mut a_out = vec![0.0; n * n];
        let mut indeg = vec![0usize; n];
        let mut outdeg = vec![0usize; n];
        for &(a, b) in &self.edges {
            outdeg[a] += 1;
            indeg[b] += 1;
        }
        for &(a, b) in &self.edges {
            a_in[b * n + a] = 1.0 / indeg[b] as f64;
            a_out[a * n + b] = 1.0 / outdeg[a] as f64;
        }
        AdjacencyPair { n, a_in, a_out }
    }

    /// Split every multi-sensor node into two children holding a random
    /// half of its sensors each (odd counts leave the extra with the first
    /// child). The children are connected both ways, and every edge of the
    /// parent is replicated to all child pairs across the edge.
    pub fn split_nodes(&self, rng: &mut ChaCha8Rng) -> Self {
        let mut nodes: Vec<NodeSpec> = Vec::new();
        let mut children: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            if node.sensors.len() <= 1 {
                let id = nodes.len();
                children.push(vec![id]);
                nodes.push(NodeSpec {
                    id,
                    name: node.name.clone(),
                    node_type: node.node_type.clone(),
                    sensors: node.sensors.clone(),
                });
            } else {
                let mut shuffled = node.sensors.clone();
                shuffled.shuffle(rng);
                let first_len = shuffled.len().div_ceil(2);
                let (first, second) = shuffled.split_at(first_len);
                let id1 = nodes.len();
                let id2 = id1 + 1;
                children.push(vec![id1, id2]);
                nodes.push(NodeSpec {
                    id: id1,
                    name: format!("{}_1", node.name),
                    node_type: node.node_type.clone(),
                    sensors: first.to_vec(),
                });
                nodes.push(NodeSpec {
                    id: id2,
                    name: format!("{}_2", node.name),
                    node_type: node.node_type.clone(),
                    sensors: second.to_vec(),
                });
            }
        }
        let mut edges = Vec::new();
        let push = |edges: &mut Vec<(usize, usize)>, e: (usize, usize)| {
            if !edges.contains(&e) {
                edges.push(e);
            }
        };
        for kids in &children {
            if let [a, b] = kids[..] {
                push(&mut edges, (a, b));
                push(&mut edges, (b, a));
            }
        }
        for &(a, b) in &self.edges {
            for &ca in &children[a] {
                for &cb in &children[b] {
                    push(&mut edges, (ca, cb));
                }
            }
        }
        let g = EquipmentGraph { nodes, edges };
        debug_assert!(g.validate().is_ok());
        g
    }

    /// Merge each given pair of edge-adjacent nodes into one node holding
    /// the sensor union. Pairs must be disjoint. Edges are remapped with
    /// self-loops dropped and duplicates removed.
    pub fn merge_nodes(&self, pairs: &[(usize, usize)]) -> Result<Self> {
        let n = self.nodes.len();
        let mut used = vec![false; n];
        for &(a, b) in pairs {
            if a >= n || b >= n {
                return Err(Error::Contract(format!(
                    "merge pair ({a}, {b}) outside 0..{n}"
                )));
            }
            if a == b || used[a] || used[b] {
                return Err(Error::Contract(format!(
                    "merge pairs must be disjoint; node {} repeats",
                    self.nodes[if used[a] || a == b { a } else { b }].name
                )));
            }
            used[a] = true;
            used[b] = true;
            let adjacent = self
                .edges
                .iter()
                .any(|&(x, y)| (x, y) == (a, b) || (x, y) == (b, a));
            if !adjacent {
                return Err(Error::Contract(format!(
                    "merge pair ({:?}, {:?}) is not edge-adjacent",
                    self.nodes[a].name, self.nodes[b].name
                )));
            }
        }

        let mut partner = vec![None; n];
        for &(a, b) in pairs {
            partner[a] = Some(b);
            partner[b] = Some(a);
        }
        let mut remap = vec![usize::MAX; n];
        let mut nodes: Vec<NodeSpec> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if remap[i] != usize::MAX {
                continue;
            }
            let id = nodes.len();
            match partner[i] {
                Some(j) => {
                    let other = &self.nodes[j];
                    let mut sensors = node.sensors.clone();
                    for s in &other.sensors {
                        if !sensors.iter().any(|t| t == s) {
                            sensors.push(s.clone());
                        }
                    }
                    let node_type = if node.node_type == other.node_type {
                        node.node_type.clone()
                    } else {
                        format!("{}+{}", node.node_type, other.node_type)
                    };
                    remap[i] = id;
                    remap[j] = id;
                    nodes.push(NodeSpec {
                        id,
                        name: format!("{}+{}", node.name, other.name),
                        node_type,
                        sensors,
                    });
                }
                None => {
                    remap[i] = id;
                    nodes.push(NodeSpec {
                        id,
                        name: node.name.clone(),
                        node_type: node.node_type.clone(),
                        sensors: node.sensors.clone(),
                    });
                }
            }
        }
        let mut edges = Vec::new();
        for &(a, b) in &self.edges {
            let e = (remap[a], remap[b]);
            if e.0 != e.1 && !edges.contains(&e) {
                edges.push(e);
            }
        }
        let g = EquipmentGraph { nodes, edges };
        g.validate()?;
        Ok(g)
    }

    /// One node per distinct sensor. Two sensor-nodes are connected iff
    /// some pair of their parent nodes is identical (both directions) or
    /// joined by an edge (that edge's direction).
    pub fn one_node_per_sensor(&self) -> Self {
        let union = self.sensor_union();
        let index_of = |s: &str| union.iter().position(|t| t == s).unwrap();
        let mut parents: Vec<Vec<usize>> = vec![Vec::new(); union.len()];
        for node in &self.nodes {
            for s in &node.sensors {
                parents[index_of(s)].push(node.id);
            }
        }
        let nodes: Vec<NodeSpec> = union
            .iter()
            .enumerate()
            .map(|(id, s)| NodeSpec {
                id,
                name: s.clone(),
                node_type: self.nodes[parents[id][0]].node_type.clone(),
                sensors: vec![s.clone()],
            })
            .collect();

        let has_edge = |a: usize, b: usize| self.edges.iter().any(|&e| e == (a, b));
        let mut edges = Vec::new();
        for s in 0..union.len() {
            for t in 0..union.len() {
                if s == t {
                    continue;
                }
                let connected = parents[s].iter().any(|&p| {
                    parents[t].iter().any(|&q| p == q || has_edge(p, q))
                });
                if connected {
                    edges.push((s, t));
                }
            }
        }
        let g = EquipmentGraph { nodes, edges };
        debug_assert!(g.validate().is_ok());
        g
    }

    /// All sensors collapsed into one node; no edges.
    pub fn single_node(&self) -> Self {
        let sensors = self.sensor_union();
        EquipmentGraph {
            nodes: vec![NodeSpec {
                id: 0,
                name: "all".into(),
                node_type: "all".into(),
                sensors,
            }],
            edges: Vec::new(),
        }
    }

    /// Resolve a named variant against this base graph. `Reduced4` merges
    /// the canonical turbofan pairs and therefore requires the 8-module
    /// node names to be present.
    pub fn apply_variant(&self, variant: GraphVariant, seed: u64) -> Result<Self> {
        match variant {
            GraphVariant::Original => Ok(self.clone()),
            GraphVariant::Increased13 => {
                let mut rng = crate::seeds::rng(seed, &[0x5b11]);
                Ok(self.split_nodes(&mut rng))
            }
            GraphVariant::PerSensor => Ok(self.one_node_per_sensor()),
            GraphVariant::SingleNode => Ok(self.single_node()),
            GraphVariant::Reduced4 => {
                let mut pairs = Vec::new();
                for (a, b) in TURBOFAN_MERGE_PAIRS {
                    let find = |name: &str| {
                        self.node_by_name(name).map(|n| n.id).ok_or_else(|| {
                            Error::Config(format!(
                                "variant reduced4 merges the turbofan module pairs and \
                                 needs node {name:?}; pass an explicit graph config instead"
                            ))
                        })
                    };
                    pairs.push((find(a)?, find(b)?));
                }
                self.merge_nodes(&pairs)
            }
        }
    }
}
