//! Control-flow graph model, JSON serialization and subgraph construction.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::encode::InstructionFields;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// A basic block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeBlock {
    pub id: i64,
    #[serde(default)]
    pub instructions: Vec<InstructionFields>,
}

impl NodeBlock {
    pub fn new(id: i64, instructions: Vec<InstructionFields>) -> Self {
        NodeBlock { id, instructions }
    }
}

/// Directed control-flow graph with a binary label.
///
/// Edges are held in canonical `(src, dst)` order with duplicates removed.
/// Every per-edge score vector in the crate is aligned to this order.
#[derive(Debug, Clone, PartialEq)]
pub struct CfGraph {
    id: String,
    label: usize,
    nodes: Vec<NodeBlock>,
    edges: Vec<(usize, usize)>,
    features: Option<Tensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CfgDoc {
    id: String,
    label: u64,
    nodes: Vec<NodeBlock>,
    edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<Vec<Vec<f64>>>,
}

impl CfGraph {
    /// Build a graph, validating endpoints and node ids and canonicalizing
    /// the edge list.
    pub fn new(
        id: impl Into<String>,
        label: usize,
        nodes: Vec<NodeBlock>,
        mut edges: Vec<(usize, usize)>,
        features: Option<Tensor>,
    ) -> Result<Self> {
        let id = id.into();
        if label > 1 {
            return Err(Error::validation(format!(
                "graph `{id}`: label {label} not in {{0, 1}}"
            )));
        }
        let n = nodes.len();
        let mut seen = BTreeSet::new();
        for node in &nodes {
            if !seen.insert(node.id) {
                return Err(Error::validation(format!(
                    "graph `{id}`: duplicate node id {}",
                    node.id
                )));
            }
        }
        for &(s, d) in &edges {
            if s >= n || d >= n {
                return Err(Error::validation(format!(
                    "graph `{id}`: edge [{s}, {d}] references a node index outside 0..{n}"
                )));
            }
        }
        edges.sort_unstable();
        let before = edges.len();
        edges.dedup();
        if edges.len() != before {
            log::warn!(
                "graph `{id}`: dropped {} duplicate edge(s)",
                before - edges.len()
            );
        }
        if let Some(f) = &features {
            if f.rows() != n {
                return Err(Error::validation(format!(
                    "graph `{id}`: feature matrix has {} rows for {n} nodes",
                    f.rows()
                )));
            }
        }
        Ok(CfGraph {
            id,
            label,
            nodes,
            edges,
            features,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn nodes(&self) -> &[NodeBlock] {
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

    pub fn features(&self) -> Option<&Tensor> {
        self.features.as_ref()
    }

    /// Node features, or a validation error naming the graph if none are attached.
    pub fn require_features(&self) -> Result<&Tensor> {
        self.features.as_ref().ok_or_else(|| {
            Error::validation(format!("graph `{}` has no node features attached", self.id))
        })
    }

    pub fn with_features(mut self, features: Tensor) -> Result<Self> {
        if features.rows() != self.nodes.len() {
            return Err(Error::validation(format!(
                "graph `{}`: feature matrix has {} rows for {} nodes",
                self.id,
                features.rows(),
                self.nodes.len()
            )));
        }
        self.features = Some(features);
        Ok(self)
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Index of the edge `(src, dst)` in canonical order.
    pub fn edge_index(&self, src: usize, dst: usize) -> Option<usize> {
        self.edges.binary_search(&(src, dst)).ok()
    }

    /// Number of nodes not touched by any edge.
    pub fn isolated_nodes(&self) -> usize {
        let mut touched = vec![false; self.nodes.len()];
        for &(s, d) in &self.edges {
            touched[s] = true;
            touched[d] = true;
        }
        touched.iter().filter(|t| !**t).count()
    }

    /// Keep the listed node indices (in ascending order) and every edge
    /// between them.
    pub fn induced_subgraph(&self, keep: &BTreeSet<usize>) -> CfGraph {
        let mut remap = vec![usize::MAX; self.nodes.len()];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new;
        }
        let nodes = keep.iter().map(|&i| self.nodes[i].clone()).collect();
        let edges = self
            .edges
            .iter()
            .filter(|(s, d)| remap[*s] != usize::MAX && remap[*d] != usize::MAX)
            .map(|&(s, d)| (remap[s], remap[d]))
            .collect();
        let rows: Vec<usize> = keep.iter().copied().collect();
        CfGraph {
            id: self.id.clone(),
            label: self.label,
            nodes,
            edges,
            features: self.features.as_ref().map(|f| f.select_rows(&rows)),
        }
    }

    /// Drop the listed nodes together with their incident edges.
    pub fn remove_nodes(&self, drop: &BTreeSet<usize>) -> CfGraph {
        let keep = (0..self.nodes.len()).filter(|i| !drop.contains(i)).collect();
        self.induced_subgraph(&keep)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_doc()).expect("graph serializes")
    }

    fn to_doc(&self) -> CfgDoc {
        CfgDoc {
            id: self.id.clone(),
            label: self.label as u64,
            nodes: self.nodes.clone(),
            edges: self.edges.iter().map(|&(s, d)| [s, d]).collect(),
            features: self.features.as_ref().map(Tensor::to_rows),
        }
    }

    /// Graphviz rendering; selected edges are drawn in red.
    pub fn to_dot(&self, selection: Option<&EdgeSelection>) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "digraph \"{}\" {{", self.id.replace('"', "\\\""));
        let _ = writeln!(out, "  node [shape=box];");
        for (i, n) in self.nodes.iter().enumerate() {
            let _ = writeln!(
                out,
                "  n{i} [label=\"{} ({} insns)\"];",
                n.id,
                n.instructions.len()
            );
        }
        for (e, &(s, d)) in self.edges.iter().enumerate() {
            if selection.is_some_and(|sel| sel.contains(e)) {
                let _ = writeln!(out, "  n{s} -> n{d} [color=red, penwidth=2];");
            } else {
                let _ = writeln!(out, "  n{s} -> n{d};");
            }
        }
        out.push_str("}\n");
        out
    }
}

/// Parse a CFG JSON document.
pub fn load_cfg(bytes: &[u8]) -> Result<CfGraph> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    let doc: CfgDoc = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        field: e.path().to_string(),
        msg: e.inner().to_string(),
    })?;
    if doc.label > 1 {
        return Err(Error::Parse {
            field: "label".into(),
            msg: format!("expected 0 or 1, got {}", doc.label),
        });
    }
    let features = match doc.features {
        Some(rows) => Some(Tensor::from_rows(&rows).map_err(|e| Error::Parse {
            field: "features".into(),
            msg: e.to_string(),
        })?),
        None => None,
    };
    CfGraph::new(
        doc.id,
        doc.label as usize,
        doc.nodes,
        doc.edges.into_iter().map(|[s, d]| (s, d)).collect(),
        features,
    )
}

/// Serialize a graph to its canonical JSON document.
pub fn save_cfg(g: &CfGraph) -> Vec<u8> {
    g.to_json().into_bytes()
}

/// A set of edge indices into a graph's canonical edge list, kept sorted.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EdgeSelection {
    edges: Vec<usize>,
}

impl EdgeSelection {
    pub fn new(mut edges: Vec<usize>, num_edges: usize) -> Result<Self> {
        edges.sort_unstable();
        if edges.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::validation("edge selection contains duplicates"));
        }
        if let Some(&last) = edges.last() {
            if last >= num_edges {
                return Err(Error::validation(format!(
                    "edge selection index {last} out of range for {num_edges} edges"
                )));
            }
        }
        Ok(EdgeSelection { edges })
    }

    pub fn empty() -> Self {
        EdgeSelection::default()
    }

    pub fn all(num_edges: usize) -> Self {
        EdgeSelection {
            edges: (0..num_edges).collect(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn contains(&self, e: usize) -> bool {
        self.edges.binary_search(&e).is_ok()
    }

    fn check(&self, g: &CfGraph) -> Result<()> {
        match self.edges.last() {
            Some(&last) if last >= g.num_edges() => Err(Error::validation(format!(
                "edge selection index {last} out of range for graph `{}` with {} edges",
                g.id(),
                g.num_edges()
            ))),
            _ => Ok(()),
        }
    }
}

/// The selected edges plus their incident nodes. Feature rows follow their
/// nodes; the label is preserved. An empty selection yields an empty graph.
pub fn important_subgraph(g: &CfGraph, sel: &EdgeSelection) -> Result<CfGraph> {
    sel.check(g)?;
    let mut keep = BTreeSet::new();
    for &e in sel.indices() {
        let (s, d) = g.edges[e];
        keep.insert(s);
        keep.insert(d);
    }
    let mut remap = vec![usize::MAX; g.num_nodes()];
    for (new, &old) in keep.iter().enumerate() {
        remap[old] = new;
    }
    let rows: Vec<usize> = keep.iter().copied().collect();
    Ok(CfGraph {
        id: g.id.clone(),
        label: g.label,
        nodes: rows.iter().map(|&i| g.nodes[i].clone()).collect(),
        edges: sel
            .indices()
            .iter()
            .map(|&e| {
                let (s, d) = g.edges[e];
                (remap[s], remap[d])
            })
            .collect(),
        features: g.features.as_ref().map(|f| f.select_rows(&rows)),
    })
}

/// All nodes of `g` with the selected edges removed.
pub fn complement_graph(g: &CfGraph, sel: &EdgeSelection) -> Result<CfGraph> {
    sel.check(g)?;
    let edges = g
        .edges
        .iter()
        .enumerate()
        .filter(|(e, _)| !sel.contains(*e))
        .map(|(_, &pair)| pair)
        .collect();
    Ok(CfGraph {
        edges,
        ..g.clone()
    })
}
