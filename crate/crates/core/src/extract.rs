//! Explanation subgraph extraction: top-edge selection (TES) and greedy
//! edge-wise composition (GEC).

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CfGraph, EdgeSelection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extraction {
    Tes,
    Gec,
}

impl Extraction {
    pub const ALL: [Extraction; 2] = [Extraction::Tes, Extraction::Gec];

    pub fn as_str(self) -> &'static str {
        match self {
            Extraction::Tes => "tes",
            Extraction::Gec => "gec",
        }
    }
}

impl fmt::Display for Extraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Extraction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tes" => Ok(Extraction::Tes),
            "gec" => Ok(Extraction::Gec),
            _ => Err(Error::invalid(format!("unknown extraction `{s}` (expected tes or gec)"))),
        }
    }
}

/// Number of edges kept at `percent` sparsity: `round(percent * |E| / 100)`
/// with halves rounded up, at least 1 and at most `|E|`.
pub fn sparsity_to_k(num_edges: usize, percent: f64) -> Result<usize> {
    if num_edges == 0 {
        return Err(Error::invalid("cannot choose edges from a graph without edges"));
    }
    if !percent.is_finite() || percent < 0.0 {
        return Err(Error::invalid(format!("sparsity must be a non-negative percentage, got {percent}")));
    }
    let k = (percent * num_edges as f64 / 100.0 + 0.5).floor() as usize;
    Ok(k.clamp(1, num_edges))
}

fn check_scores(g: &CfGraph, scores: &[f64]) -> Result<()> {
    if scores.len() != g.num_edges() {
        return Err(Error::Shape {
            op: "extract",
            lhs: vec![scores.len()],
            rhs: vec![g.num_edges()],
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score of edge {i} in `{}`", g.id())));
    }
    Ok(())
}

fn clamp_k(g: &CfGraph, k: usize) -> usize {
    if k > g.num_edges() {
        log::warn!(
            "k = {k} exceeds the {} edges of `{}`; keeping all edges",
            g.num_edges(),
            g.id()
        );
        g.num_edges()
    } else {
        k
    }
}

/// Edge indices by descending score, ties by ascending index.
pub fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// The `k` highest-scored edges.
pub fn tes(g: &CfGraph, scores: &[f64], k: usize) -> Result<EdgeSelection> {
    check_scores(g, scores)?;
    let k = clamp_k(g, k);
    let order = descending_order(scores);
    EdgeSelection::new(order[..k].to_vec(), g.num_edges())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GecResult {
    pub selection: EdgeSelection,
    pub nodes: BTreeSet<usize>,
    /// Times growth stalled and restarted from the best unused edge.
    pub reseeds: usize,
}

/// Grow a subgraph from the best edge, always adding the best unused edge
/// that touches the selected nodes (in either direction). When none is
/// left, restart from the best unused edge.
pub fn gec(g: &CfGraph, scores: &[f64], k: usize) -> Result<GecResult> {
    check_scores(g, scores)?;
    if k == 0 {
        return Err(Error::invalid("GEC needs k >= 1"));
    }
    let k = clamp_k(g, k);
    let order = descending_order(scores);
    let edges = g.edges();
    let mut used = vec![false; edges.len()];
    let mut nodes = BTreeSet::new();
    let mut chosen = Vec::with_capacity(k);
    let mut reseeds = 0;
    while chosen.len() < k {
        let next = order.iter().copied().find(|&e| {
            let (u, v) = edges[e];
            !used[e] && (nodes.contains(&u) || nodes.contains(&v))
        });
        let e = match next {
            Some(e) => e,
            None => {
                if !chosen.is_empty() {
                    reseeds += 1;
                }
                order
                    .iter()
                    .copied()
                    .find(|&e| !used[e])
                    .expect("fewer than k edges used")
            }
        };
        used[e] = true;
        nodes.insert(edges[e].0);
        nodes.insert(edges[e].1);
        chosen.push(e);
    }
    Ok(GecResult {
        selection: EdgeSelection::new(chosen, g.num_edges())?,
        nodes,
        reseeds,
    })
}

pub fn extract(method: Extraction, g: &CfGraph, scores: &[f64], k: usize) -> Result<EdgeSelection> {
    match method {
        Extraction::Tes => tes(g, scores, k),
        Extraction::Gec => Ok(gec(g, scores, k)?.selection),
    }
}

/// Selection JSON: `{"graph_id": .., "k": .., "edges": [..]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionRecord {
    pub graph_id: String,
    pub k: usize,
    pub edges: Vec<usize>,
}

impl SelectionRecord {
    pub fn new(g: &CfGraph, sel: &EdgeSelection) -> Self {
        SelectionRecord {
            graph_id: g.id().to_string(),
            k: sel.len(),
            edges: sel.indices().to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NodeBlock;
    use proptest::prelude::*;

    fn graph(n: usize, edges: Vec<(usize, usize)>) -> CfGraph {
        let nodes = (0..n).map(|i| NodeBlock::new(i as i64, vec![])).collect();
        CfGraph::new("t", 0, nodes, edges, None).unwrap()
    }

    #[test]
    fn k_from_percent() {
        assert_eq!(sparsity_to_k(100, 5.0).unwrap(), 5);
        assert_eq!(sparsity_to_k(3, 5.0).unwrap(), 1);
        assert_eq!(sparsity_to_k(7, 50.0).unwrap(), 4);
        assert_eq!(sparsity_to_k(7, 100.0).unwrap(), 7);
        assert_eq!(sparsity_to_k(7, 250.0).unwrap(), 7);
        assert!(sparsity_to_k(0, 5.0).is_err());
        assert!(sparsity_to_k(5, -1.0).is_err());
    }

    #[test]
    fn tes_examples() {
        let g = graph(5, vec![(0, 1), (1, 2), (2, 3), (3, 4)]);
        let s = [0.2, 0.9, 0.9, 0.1];
        assert_eq!(tes(&g, &s, 2).unwrap().indices(), &[1, 2]);
        assert_eq!(tes(&g, &s, 4).unwrap().len(), 4);
        assert_eq!(tes(&g, &s, 10).unwrap().len(), 4);
        assert!(tes(&g, &s[..3], 2).is_err());
    }

    #[test]
    fn gec_path_trace() {
        // a-b-c-d as nodes 0..4, canonical edges: (0,1)=a-b, (1,2)=b-c, (2,3)=c-d
        let g = graph(4, vec![(0, 1), (1, 2), (2, 3)]);
        let r = gec(&g, &[0.5, 0.9, 0.4], 2).unwrap();
        assert_eq!(r.selection.indices(), &[0, 1]);
        assert_eq!(r.nodes, BTreeSet::from([0, 1, 2]));
        assert_eq!(r.reseeds, 0);
    }

    #[test]
    fn gec_star_takes_all() {
        let g = graph(6, (1..6).map(|i| (0, i)).collect());
        let r = gec(&g, &[0.3, 0.1, 0.7, 0.2, 0.5], 5).unwrap();
        assert_eq!(r.selection.len(), 5);
        assert_eq!(r.reseeds, 0);
    }

    #[test]
    fn gec_reseeds_into_second_triangle() {
        let g = graph(6, vec![(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3)]);
        // canonical order: (0,1) (1,2) (2,0) (3,4) (4,5) (5,3)
        let s = [0.9, 0.8, 0.7, 0.3, 0.5, 0.2];
        let r = gec(&g, &s, 4).unwrap();
        assert_eq!(r.selection.indices(), &[0, 1, 2, 4]);
        assert_eq!(r.reseeds, 1);
        assert_eq!(r.nodes, BTreeSet::from([0, 1, 2, 4, 5]));
    }

    #[test]
    fn gec_uses_undirected_test() {
        // edge (2,1) points into the seed component
        let g = graph(3, vec![(0, 1), (2, 1)]);
        let r = gec(&g, &[0.9, 0.1], 2).unwrap();
        assert_eq!(r.reseeds, 0);
    }

    #[test]
    fn gec_matches_tes_when_top_edges_connected() {
        let g = graph(5, vec![(0, 1), (1, 2), (2, 3), (3, 4)]);
        let s = [0.9, 0.8, 0.1, 0.2];
        assert_eq!(gec(&g, &s, 2).unwrap().selection, tes(&g, &s, 2).unwrap());
    }

    proptest! {
        #[test]
        fn selection_size_is_min_k_edges(
            raw in prop::collection::vec((0usize..8, 0usize..8, 0.0f64..1.0), 1..25),
            k in 1usize..30,
        ) {
            let g = graph(8, raw.iter().map(|&(a, b, _)| (a, b)).collect());
            let scores: Vec<f64> = (0..g.num_edges()).map(|i| raw[i % raw.len()].2).collect();
            let want = k.min(g.num_edges());
            prop_assert_eq!(tes(&g, &scores, k).unwrap().len(), want);
            prop_assert_eq!(gec(&g, &scores, k).unwrap().selection.len(), want);
        }
    }
}
