//! Accuracy-vs-sparsity sweeps, Fidelity± and perturbation consistency.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::extract::{extract, sparsity_to_k, Extraction};
use crate::gcn::{evaluate, GcnParams, ModelOutput};
use crate::graph::{complement_graph, important_subgraph, CfGraph, EdgeSelection};
use crate::numerics::{cosine, derive_seed, rng};

/// 5, 10, ..., 95 percent.
pub fn default_sparsities() -> Vec<f64> {
    (1..=19).map(|i| f64::from(i) * 5.0).collect()
}

/// Cosine-distance thresholds 0.01, 0.0125, ..., 0.03.
pub fn tau_grid() -> Vec<f64> {
    (4..=12).map(|i| f64::from(i) / 400.0).collect()
}

/// Edge scores for graph `index` of a dataset at a given sparsity and `k`.
/// Plain explainers ignore the last two arguments; fused strategies use them.
pub type ScoreFn<'a> = dyn Fn(usize, f64, usize) -> Result<Vec<f64>> + Sync + 'a;

/// Selection for one graph at `percent`, empty when the graph has no edges.
pub fn select(
    g: &CfGraph,
    index: usize,
    scorer: &ScoreFn,
    extraction: Extraction,
    percent: f64,
) -> Result<EdgeSelection> {
    if g.num_edges() == 0 {
        return Ok(EdgeSelection::empty());
    }
    let k = sparsity_to_k(g.num_edges(), percent)?;
    let scores = scorer(index, percent, k)?;
    extract(extraction, g, &scores, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub explainer: String,
    pub extraction: Extraction,
    pub sparsity: f64,
    pub accuracy: f64,
}

/// Whether the model still predicts the true label from the important
/// subgraph. Empty subgraphs count as misclassified.
fn subgraph_correct(g: &CfGraph, sel: &EdgeSelection, p: &GcnParams) -> Result<bool> {
    let sub = important_subgraph(g, sel)?;
    if sub.num_nodes() == 0 {
        log::warn!("empty explanation subgraph for `{}`; counted as misclassified", g.id());
        return Ok(false);
    }
    Ok(evaluate(&sub, p)?.predicted() == g.label())
}

/// Accuracy of the model on the extracted subgraphs at every sparsity.
pub fn accuracy_sweep(
    dataset: &[CfGraph],
    p: &GcnParams,
    explainer: &str,
    scorer: &ScoreFn,
    extraction: Extraction,
    sparsities: &[f64],
) -> Result<Vec<SweepRow>> {
    sparsities
        .iter()
        .map(|&percent| {
            let correct: Vec<bool> = dataset
                .par_iter()
                .enumerate()
                .map(|(i, g)| subgraph_correct(g, &select(g, i, scorer, extraction, percent)?, p))
                .collect::<Result<_>>()?;
            let hits = correct.iter().filter(|c| **c).count();
            Ok(SweepRow {
                explainer: explainer.to_string(),
                extraction,
                sparsity: percent,
                accuracy: if dataset.is_empty() {
                    0.0
                } else {
                    hits as f64 / dataset.len() as f64
                },
            })
        })
        .collect()
}

/// Probability of the true class. Empty graphs give `softmax(b_c)`.
pub fn true_class_prob(g: &CfGraph, p: &GcnParams) -> Result<f64> {
    Ok(evaluate(g, p)?.probs[g.label()])
}

/// `(fid_plus, fid_minus)` for one graph and selection.
pub fn graph_fidelity(g: &CfGraph, sel: &EdgeSelection, p: &GcnParams) -> Result<(f64, f64)> {
    let full = true_class_prob(g, p)?;
    let without = true_class_prob(&complement_graph(g, sel)?, p)?;
    let only = true_class_prob(&important_subgraph(g, sel)?, p)?;
    Ok((full - without, full - only))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityRecord {
    pub graph_id: String,
    pub explainer: String,
    pub extraction: Extraction,
    pub sparsity: f64,
    pub k: usize,
    pub fid_plus: f64,
    pub fid_minus: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FidelitySummary {
    pub fid_plus: f64,
    pub fid_minus: f64,
    pub records: Vec<FidelityRecord>,
}

pub fn fidelity(
    dataset: &[CfGraph],
    p: &GcnParams,
    explainer: &str,
    scorer: &ScoreFn,
    extraction: Extraction,
    percent: f64,
) -> Result<FidelitySummary> {
    let records: Vec<FidelityRecord> = dataset
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let sel = select(g, i, scorer, extraction, percent)?;
            let (fid_plus, fid_minus) = graph_fidelity(g, &sel, p)?;
            Ok(FidelityRecord {
                graph_id: g.id().to_string(),
                explainer: explainer.to_string(),
                extraction,
                sparsity: percent,
                k: sel.len(),
                fid_plus,
                fid_minus,
            })
        })
        .collect::<Result<_>>()?;
    let n = records.len().max(1) as f64;
    Ok(FidelitySummary {
        fid_plus: records.iter().map(|r| r.fid_plus).sum::<f64>() / n,
        fid_minus: records.iter().map(|r| r.fid_minus).sum::<f64>() / n,
        records,
    })
}

/// Elements removed from a set of `size` items: `ceil(ln(size) + size * ratio)`,
/// capped at `size - 1`.
pub fn perturbation_size(size: usize, ratio: f64) -> usize {
    if size == 0 {
        return 0;
    }
    let raw = ((size as f64).ln() + size as f64 * ratio).ceil().max(0.0) as usize;
    if raw >= size {
        log::warn!("perturbation of {raw} out of {size} elements capped at {}", size - 1);
        size - 1
    } else {
        raw
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationConfig {
    pub ratio: f64,
    pub node_removals: usize,
    pub edge_removals: usize,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            ratio: 0.01,
            node_removals: 10,
            edge_removals: 10,
        }
    }
}

/// Node-removal perturbations first, then edge-removal ones.
pub fn gen_perturbations(g: &CfGraph, cfg: &PerturbationConfig, seed: u64) -> Result<Vec<CfGraph>> {
    let mut r = rng(seed);
    let mut out = Vec::with_capacity(cfg.node_removals + cfg.edge_removals);
    let n_drop = perturbation_size(g.num_nodes(), cfg.ratio);
    for i in 0..cfg.node_removals {
        let drop: BTreeSet<usize> = sample(&mut r, g.num_nodes(), n_drop).into_iter().collect();
        out.push(g.remove_nodes(&drop).with_id(format!("{}~n{i}", g.id())));
    }
    let e_drop = perturbation_size(g.num_edges(), cfg.ratio);
    for i in 0..cfg.edge_removals {
        let picked = sample(&mut r, g.num_edges(), e_drop).into_vec();
        let sel = EdgeSelection::new(picked, g.num_edges())?;
        out.push(complement_graph(g, &sel)?.with_id(format!("{}~e{i}", g.id())));
    }
    Ok(out)
}

fn cosine_distance(a: &ModelOutput, b: &ModelOutput) -> f64 {
    cosine(&a.graph_embedding, &b.graph_embedding).map_or(1.0, |c| (1.0 - c).max(0.0))
}

/// Indices of perturbations with an unchanged prediction and an embedding
/// within cosine distance `tau` of the original.
pub fn filter_valid(g: &CfGraph, perts: &[CfGraph], p: &GcnParams, tau: f64) -> Result<Vec<usize>> {
    let base = evaluate(g, p)?;
    let mut keep = Vec::new();
    for (i, h) in perts.iter().enumerate() {
        let out = evaluate(h, p)?;
        if out.predicted() == base.predicted() && cosine_distance(&base, &out) < tau {
            keep.push(i);
        }
    }
    Ok(keep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRecord {
    pub graph_id: String,
    pub tau: f64,
    pub n_valid: usize,
    /// `None` when no perturbation is valid.
    pub delta_plus: Option<f64>,
    pub delta_minus: Option<f64>,
}

fn spread(values: &[f64]) -> Option<f64> {
    let lo = values.iter().copied().reduce(f64::min)?;
    let hi = values.iter().copied().reduce(f64::max)?;
    Some(hi - lo)
}

/// Explain every perturbation, extract at `percent`, and report the spread of
/// Fidelity± over the valid perturbations at each threshold.
#[allow(clippy::too_many_arguments)]
pub fn consistency(
    g: &CfGraph,
    explain: &(dyn Fn(&CfGraph) -> Result<Vec<f64>> + Sync),
    p: &GcnParams,
    extraction: Extraction,
    percent: f64,
    taus: &[f64],
    pert_cfg: &PerturbationConfig,
    seed: u64,
) -> Result<Vec<ConsistencyRecord>> {
    let perts = gen_perturbations(g, pert_cfg, seed)?;
    let base = evaluate(g, p)?;
    let scored: Vec<(bool, f64, f64, f64)> = perts
        .iter()
        .map(|h| {
            let out = evaluate(h, p)?;
            let same = out.predicted() == base.predicted();
            let dist = cosine_distance(&base, &out);
            let sel = if h.num_edges() == 0 {
                EdgeSelection::empty()
            } else {
                let k = sparsity_to_k(h.num_edges(), percent)?;
                extract(extraction, h, &explain(h)?, k)?
            };
            let (fp, fm) = graph_fidelity(h, &sel, p)?;
            Ok((same, dist, fp, fm))
        })
        .collect::<Result<_>>()?;
    Ok(taus
        .iter()
        .map(|&tau| {
            let valid: Vec<&(bool, f64, f64, f64)> =
                scored.iter().filter(|s| s.0 && s.1 < tau).collect();
            let plus: Vec<f64> = valid.iter().map(|s| s.2).collect();
            let minus: Vec<f64> = valid.iter().map(|s| s.3).collect();
            ConsistencyRecord {
                graph_id: g.id().to_string(),
                tau,
                n_valid: valid.len(),
                delta_plus: spread(&plus),
                delta_minus: spread(&minus),
            }
        })
        .collect())
}

/// Seed for the perturbations of graph `index`.
pub fn perturbation_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, 0xC0FF_EE00 + index as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::CODE_DIM;
    use crate::graph::NodeBlock;
    use crate::numerics::Tensor;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_graph(seed: u64, n: usize, m: usize) -> CfGraph {
        let mut r = rng(seed);
        let edges = (0..m)
            .map(|_| (r.random_range(0..n), r.random_range(0..n)))
            .filter(|(a, b)| a != b)
            .collect();
        let x = Tensor::from_vec(
            n,
            CODE_DIM,
            (0..n * CODE_DIM).map(|_| r.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let nodes = (0..n).map(|i| NodeBlock::new(i as i64, vec![])).collect();
        CfGraph::new(format!("r{seed}"), (seed % 2) as usize, nodes, edges, Some(x)).unwrap()
    }

    fn path(n: usize) -> CfGraph {
        let mut r = rng(n as u64);
        let x = Tensor::from_vec(
            n,
            CODE_DIM,
            (0..n * CODE_DIM).map(|_| r.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let nodes = (0..n).map(|i| NodeBlock::new(i as i64, vec![])).collect();
        CfGraph::new("path", 1, nodes, (0..n - 1).map(|i| (i, i + 1)).collect(), Some(x)).unwrap()
    }

    #[test]
    fn grids() {
        assert_eq!(default_sparsities().len(), 19);
        assert_eq!(default_sparsities()[18], 95.0);
        let t = tau_grid();
        assert_eq!(t.len(), 9);
        assert_eq!(t[0], 0.01);
        assert_eq!(t[8], 0.03);
        assert!((t[1] - 0.0125).abs() < 1e-15);
    }

    #[test]
    fn perturbation_sizes() {
        assert_eq!(perturbation_size(100, 0.01), 6);
        assert_eq!(perturbation_size(3, 0.01), 2);
        assert_eq!(perturbation_size(2, 0.01), 1);
        assert_eq!(perturbation_size(1, 0.01), 0);
        assert_eq!(perturbation_size(0, 0.01), 0);
    }

    #[test]
    fn perturbations_are_seeded_and_sized() {
        let g = path(12);
        let cfg = PerturbationConfig::default();
        let a = gen_perturbations(&g, &cfg, 5).unwrap();
        assert_eq!(a, gen_perturbations(&g, &cfg, 5).unwrap());
        assert_eq!(a.len(), 20);
        let nd = perturbation_size(12, 0.01);
        let ed = perturbation_size(11, 0.01);
        for h in &a[..10] {
            assert_eq!(h.num_nodes(), 12 - nd);
        }
        for h in &a[10..] {
            assert_eq!(h.num_nodes(), 12);
            assert_eq!(h.num_edges(), 11 - ed);
        }
    }

    #[test]
    fn fidelity_identities() {
        let p = GcnParams::init(2);
        let g = path(6);
        assert_eq!(g.isolated_nodes(), 0);
        let (_, fm) = graph_fidelity(&g, &EdgeSelection::all(g.num_edges()), &p).unwrap();
        assert_eq!(fm, 0.0);
        let (fp, _) = graph_fidelity(&g, &EdgeSelection::empty(), &p).unwrap();
        assert_eq!(fp, 0.0);
    }

    #[test]
    fn identity_extraction_reproduces_full_accuracy() {
        let p = GcnParams::init(6);
        let graphs: Vec<CfGraph> = (3..11).map(path).collect();
        let full = graphs
            .iter()
            .filter(|g| evaluate(g, &p).unwrap().predicted() == g.label())
            .count() as f64
            / graphs.len() as f64;
        let lens: Vec<usize> = graphs.iter().map(|g| g.num_edges()).collect();
        let scorer = |i: usize, _: f64, _: usize| Ok(vec![1.0; lens[i]]);
        let rows = accuracy_sweep(&graphs, &p, "ones", &scorer, Extraction::Gec, &[5.0, 100.0]).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].accuracy, full);
    }

    #[test]
    fn filter_valid_rules() {
        let p = GcnParams::init(1);
        let g = path(8);
        let copies = vec![g.clone(), g.clone()];
        assert_eq!(filter_valid(&g, &copies, &p, 1e-9).unwrap(), vec![0, 1]);
        assert!(filter_valid(&g, &copies, &p, 0.0).unwrap().is_empty());
    }

    #[test]
    fn spread_conventions() {
        assert_eq!(spread(&[]), None);
        assert_eq!(spread(&[0.3]), Some(0.0));
        assert_eq!(spread(&[0.3, -0.1, 0.2]), Some(0.4));
    }

    #[test]
    fn consistency_of_exact_copies_is_zero() {
        // a single edge cannot lose ceil(ln 1 + 0.01) = 1 of 1 edges, so every
        // edge perturbation is an exact copy
        let p = GcnParams::init(1);
        let g = path(2);
        let cfg = PerturbationConfig {
            ratio: 0.01,
            node_removals: 0,
            edge_removals: 5,
        };
        let explain = |h: &CfGraph| Ok(vec![1.0; h.num_edges()]);
        let recs = consistency(&g, &explain, &p, Extraction::Gec, 50.0, &tau_grid(), &cfg, 3).unwrap();
        assert_eq!(recs.len(), 9);
        for r in &recs {
            assert_eq!(r.n_valid, 5);
            assert_eq!(r.delta_plus, Some(0.0));
            assert_eq!(r.delta_minus, Some(0.0));
        }
        let none = consistency(&g, &explain, &p, Extraction::Gec, 50.0, &[0.0], &cfg, 3).unwrap();
        assert_eq!(none[0].n_valid, 0);
        assert_eq!(none[0].delta_plus, None);
    }

    #[test]
    fn consistency_deltas_nonnegative() {
        let p = GcnParams::init(4);
        let g = random_graph(9, 12, 30);
        let explain = |h: &CfGraph| Ok((0..h.num_edges()).map(|e| (e * 7 % 5) as f64).collect());
        let recs = consistency(
            &g,
            &explain,
            &p,
            Extraction::Tes,
            30.0,
            &tau_grid(),
            &PerturbationConfig::default(),
            1,
        )
        .unwrap();
        for r in recs {
            for d in [r.delta_plus, r.delta_minus].into_iter().flatten() {
                assert!(d >= 0.0 && d.is_finite());
            }
            if r.n_valid <= 1 {
                assert!(r.delta_plus.unwrap_or(0.0) == 0.0);
            }
        }
    }

    proptest! {
        #[test]
        fn fidelity_bounded(seed in 0u64..500, picks in prop::collection::vec(any::<bool>(), 12)) {
            let g = random_graph(seed, 7, 12);
            let p = GcnParams::init(seed);
            let chosen: Vec<usize> = (0..g.num_edges()).filter(|&e| picks[e]).collect();
            let sel = EdgeSelection::new(chosen, g.num_edges()).unwrap();
            let (fp, fm) = graph_fidelity(&g, &sel, &p).unwrap();
            prop_assert!((-1.0..=1.0).contains(&fp));
            prop_assert!((-1.0..=1.0).contains(&fm));
        }

        #[test]
        fn validity_is_monotone_in_tau(seed in 0u64..200) {
            let g = random_graph(seed, 9, 16);
            let p = GcnParams::init(seed + 1);
            let perts = gen_perturbations(&g, &PerturbationConfig::default(), seed).unwrap();
            let lo: BTreeSet<usize> = filter_valid(&g, &perts, &p, 0.01).unwrap().into_iter().collect();
            let hi: BTreeSet<usize> = filter_valid(&g, &perts, &p, 0.03).unwrap().into_iter().collect();
            prop_assert!(lo.is_subset(&hi));
        }
    }
}
