//! Seeded planted-motif CFG generator.
//!
//! Benign graphs are chains with forward branches and occasional back edges,
//! filled with instructions from a benign opcode pool. Malicious graphs use
//! the same kind of base and additionally carry a densely connected motif
//! whose blocks draw opcodes from a disjoint suspicious pool. The motif is
//! attached to the base by two bridge edges. Ground truth is the set of edges
//! with both endpoints inside the motif.
//!
//! Suspicious blocks also use wide displacements and immediates, while benign
//! ones keep them within 8 and 16 bits.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encode::{InstructionFields, ModRm, Prefix, Sib};
use crate::error::{Error, Result};
use crate::graph::{CfGraph, EdgeSelection, NodeBlock};
use crate::numerics::{derive_seed, rng};

/// mov, add, sub, cmp, test, lea, push, pop, jmp, jcc, call, ret, and, or, inc, nop
pub const BENIGN_OPCODES: [u32; 16] = [
    0x89, 0x8B, 0x01, 0x29, 0x39, 0x85, 0x8D, 0x50, 0x58, 0xEB, 0x74, 0xE8, 0xC3, 0x21, 0x09, 0x90,
];

/// xor, int3, int, hlt, pushf, popf, in, out, lods, stos, xchg, rol/ror group, cpuid-ish 0x0F
pub const SUSPICIOUS_OPCODES: [u32; 13] = [
    0x31, 0xCC, 0xCD, 0xF4, 0x9C, 0x9D, 0xE4, 0xE6, 0xAD, 0xAB, 0x87, 0xD3, 0x0F,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub base_nodes_min: usize,
    pub base_nodes_max: usize,
    pub motif_nodes: usize,
    /// Probability of each ordered motif pair `(i, j)`, `i != j`, becoming an
    /// edge, on top of a spanning path.
    pub motif_density: f64,
    pub branch_prob: f64,
    pub back_edge_prob: f64,
    pub max_instructions: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            base_nodes_min: 30,
            base_nodes_max: 80,
            motif_nodes: 6,
            motif_density: 0.5,
            branch_prob: 0.3,
            back_edge_prob: 0.05,
            max_instructions: 6,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.base_nodes_min < 2 || self.base_nodes_min > self.base_nodes_max {
            return Err(Error::invalid(format!(
                "base node range {}..={} is invalid (need 2 <= min <= max)",
                self.base_nodes_min, self.base_nodes_max
            )));
        }
        if self.motif_nodes < 2 {
            return Err(Error::invalid("motif_nodes must be at least 2"));
        }
        if self.max_instructions < 1 {
            return Err(Error::invalid("max_instructions must be at least 1"));
        }
        for (name, p) in [
            ("motif_density", self.motif_density),
            ("branch_prob", self.branch_prob),
            ("back_edge_prob", self.back_edge_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub graphs: Vec<CfGraph>,
    /// Motif edges per graph, empty for benign graphs.
    pub truth: Vec<EdgeSelection>,
}

impl SynthDataset {
    /// `truth.json` body: graph id to motif edge indices.
    pub fn truth_json(&self) -> String {
        let map: BTreeMap<&str, &[usize]> = self
            .graphs
            .iter()
            .zip(&self.truth)
            .map(|(g, t)| (g.id(), t.indices()))
            .collect();
        serde_json::to_string_pretty(&map).expect("truth map serializes")
    }
}

/// Parse a `truth.json` body.
pub fn parse_truth(bytes: &[u8]) -> Result<BTreeMap<String, Vec<usize>>> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        field: e.path().to_string(),
        msg: e.inner().to_string(),
    })
}

/// Generate `n_per_class` benign and `n_per_class` malicious graphs,
/// alternating benign/malicious.
pub fn gen_dataset(n_per_class: usize, cfg: &SynthConfig) -> Result<SynthDataset> {
    if n_per_class < 1 {
        return Err(Error::invalid("n_per_class must be at least 1"));
    }
    cfg.validate()?;
    let made: Vec<(CfGraph, EdgeSelection)> = (0..2 * n_per_class)
        .into_par_iter()
        .map(|i| gen_graph(i, i % 2, cfg))
        .collect::<Result<_>>()?;
    let (graphs, truth) = made.into_iter().unzip();
    Ok(SynthDataset { graphs, truth })
}

fn gen_graph(index: usize, label: usize, cfg: &SynthConfig) -> Result<(CfGraph, EdgeSelection)> {
    let mut r = rng(derive_seed(cfg.seed, index as u64));
    let n_base = r.random_range(cfg.base_nodes_min..=cfg.base_nodes_max);
    let mut edges = base_edges(n_base, cfg, &mut r);
    let mut suspicious = vec![false; n_base];
    let mut motif_pairs = Vec::new();
    if label == 1 {
        let m = cfg.motif_nodes;
        let offset = n_base;
        for i in 0..m - 1 {
            motif_pairs.push((offset + i, offset + i + 1));
        }
        for i in 0..m {
            for j in 0..m {
                if i != j && j != i + 1 && r.random::<f64>() < cfg.motif_density {
                    motif_pairs.push((offset + i, offset + j));
                }
            }
        }
        let entry = r.random_range(0..n_base);
        let exit = r.random_range(0..n_base);
        edges.push((entry, offset));
        edges.push((offset + m - 1, exit));
        edges.extend(motif_pairs.iter().copied());
        suspicious.extend(std::iter::repeat_n(true, m));
    }

    // shuffle node positions so motif blocks are not always last
    let n = suspicious.len();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut r);
    let mut placed = vec![false; n];
    for (old, &new) in perm.iter().enumerate() {
        placed[new] = suspicious[old];
    }
    let nodes = placed
        .iter()
        .enumerate()
        .map(|(i, &sus)| {
            let count = r.random_range(1..=cfg.max_instructions);
            let instrs = (0..count).map(|_| gen_instruction(sus, &mut r)).collect();
            NodeBlock::new(0x40_1000 + 0x40 * i as i64, instrs)
        })
        .collect();
    let relabel = |(s, d): (usize, usize)| (perm[s], perm[d]);
    let edges: Vec<_> = edges.into_iter().map(relabel).collect();
    let id = format!("g{index:05}");
    let g = CfGraph::new(id, label, nodes, edges, None)?;
    let motif: Vec<usize> = motif_pairs
        .into_iter()
        .map(relabel)
        .filter_map(|(s, d)| g.edge_index(s, d))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let truth = EdgeSelection::new(motif, g.num_edges())?;
    Ok((g, truth))
}

fn base_edges(n: usize, cfg: &SynthConfig, r: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for i in 0..n - 1 {
        edges.push((i, i + 1));
        if r.random::<f64>() < cfg.branch_prob {
            let hi = (i + 8).min(n - 1);
            if i + 2 <= hi {
                edges.push((i, r.random_range(i + 2..=hi)));
            }
        }
        if i > 0 && r.random::<f64>() < cfg.back_edge_prob {
            let lo = i.saturating_sub(8);
            edges.push((i, r.random_range(lo..i)));
        }
    }
    edges
}

fn gen_instruction(suspicious: bool, r: &mut ChaCha8Rng) -> InstructionFields {
    let pool: &[u32] = if suspicious {
        &SUSPICIOUS_OPCODES
    } else {
        &BENIGN_OPCODES
    };
    let mut ins = InstructionFields::opcode(pool[r.random_range(0..pool.len())]);
    if r.random::<f64>() < 0.6 {
        ins.modrm = Some(ModRm {
            mode: r.random_range(0..4),
            reg: r.random_range(0..8),
            rm: r.random_range(0..8),
        });
    }
    if r.random::<f64>() < 0.1 {
        ins.sib = Some(Sib {
            scale: r.random_range(0..4),
            index: r.random_range(0..8),
            base: r.random_range(0..8),
        });
    }
    if r.random::<f64>() < 0.15 {
        ins.prefix = Some(Prefix {
            es: r.random_range(0..7),
            osz: r.random_range(0..2),
            asz: 0,
            lock: u32::from(r.random::<f64>() < 0.2),
        });
    }
    // suspicious blocks carry wide constants (packer keys, hashed API names)
    if suspicious {
        if r.random::<f64>() < 0.5 {
            ins.disp = Some(r.random::<u32>().into());
        }
        if r.random::<f64>() < 0.8 {
            ins.imm = Some(r.random());
        }
    } else {
        if r.random::<f64>() < 0.25 {
            ins.disp = Some(r.random_range(0..256));
        }
        if r.random::<f64>() < 0.3 {
            ins.imm = Some(r.random_range(0..1 << 16));
        }
    }
    ins
}

/// ROC-AUC of `scores` against membership in `truth`, with midranks for ties.
/// `None` when the truth set is empty or covers every edge.
pub fn motif_auc(scores: &[f64], truth: &EdgeSelection) -> Option<f64> {
    let n = scores.len();
    let pos = truth.len();
    if pos == 0 || pos >= n {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &e in &order[i..=j] {
            ranks[e] = mid;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 = truth.indices().iter().map(|&e| ranks[e]).sum();
    let neg = n - pos;
    let u = pos_rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            base_nodes_min: 10,
            base_nodes_max: 20,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn opcode_pools_are_disjoint() {
        for o in BENIGN_OPCODES {
            assert!(!SUSPICIOUS_OPCODES.contains(&o));
        }
    }

    #[test]
    fn deterministic_and_balanced() {
        let a = gen_dataset(10, &small()).unwrap();
        let b = gen_dataset(10, &small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.truth_json(), b.truth_json());
        let malicious = a.graphs.iter().filter(|g| g.label() == 1).count();
        assert_eq!(malicious, 10);
        assert_eq!(a.graphs.len(), 20);
    }

    #[test]
    fn truth_is_valid_and_motif_opcodes_are_suspicious() {
        let d = gen_dataset(25, &SynthConfig::default()).unwrap();
        for (g, t) in d.graphs.iter().zip(&d.truth) {
            if g.label() == 0 {
                assert!(t.is_empty());
                continue;
            }
            assert!(t.len() >= 5, "{}", g.id());
            // validity: a fresh selection over the same indices must accept them
            EdgeSelection::new(t.indices().to_vec(), g.num_edges()).unwrap();
            for &e in t.indices() {
                let (s, d) = g.edges()[e];
                for node in [s, d] {
                    let ops = &g.nodes()[node].instructions;
                    assert!(ops.iter().all(|i| SUSPICIOUS_OPCODES.contains(&i.opcode)));
                }
            }
            let suspicious = g
                .nodes()
                .iter()
                .filter(|n| SUSPICIOUS_OPCODES.contains(&n.instructions[0].opcode))
                .count();
            assert_eq!(suspicious, 6);
            for n in g.nodes() {
                for i in &n.instructions {
                    i.validate().unwrap();
                }
            }
        }
    }

    #[test]
    fn truth_json_roundtrip() {
        let d = gen_dataset(3, &small()).unwrap();
        let map = parse_truth(d.truth_json().as_bytes()).unwrap();
        assert_eq!(map.len(), 6);
        for (g, t) in d.graphs.iter().zip(&d.truth) {
            assert_eq!(map[g.id()], t.indices());
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(gen_dataset(0, &small()).is_err());
        let cfg = SynthConfig {
            base_nodes_min: 50,
            base_nodes_max: 40,
            ..Default::default()
        };
        assert!(gen_dataset(1, &cfg).is_err());
    }

    #[test]
    fn auc_conventions() {
        let truth = EdgeSelection::new(vec![1, 3], 5).unwrap();
        let ind = [0.0, 1.0, 0.0, 1.0, 0.0];
        assert_eq!(motif_auc(&ind, &truth), Some(1.0));
        let rev: Vec<f64> = ind.iter().map(|v| 1.0 - v).collect();
        assert_eq!(motif_auc(&rev, &truth), Some(0.0));
        assert_eq!(motif_auc(&[0.3; 5], &truth), Some(0.5));
        assert_eq!(motif_auc(&[0.3; 5], &EdgeSelection::empty()), None);
        assert_eq!(motif_auc(&[0.3; 5], &EdgeSelection::all(5)), None);
    }

    #[test]
    fn auc_matches_pair_counting() {
        let mut r = rng(11);
        for _ in 0..50 {
            let n = r.random_range(3..20);
            let scores: Vec<f64> = (0..n).map(|_| f64::from(r.random_range(0..5u8))).collect();
            let truth: Vec<usize> = (0..n).filter(|_| r.random::<bool>()).collect();
            let sel = EdgeSelection::new(truth.clone(), n).unwrap();
            let Some(auc) = motif_auc(&scores, &sel) else { continue };
            let mut wins = 0.0;
            let mut pairs = 0.0;
            for &p in &truth {
                for q in (0..n).filter(|q| !truth.contains(q)) {
                    pairs += 1.0;
                    wins += match scores[p].total_cmp(&scores[q]) {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
            assert!((auc - wins / pairs).abs() < 1e-12);
        }
    }
}
