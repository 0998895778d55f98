use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gnnexplainer::mask_regularizer;
use super::{Explanation, Method};
use crate::error::{Error, Result};
use crate::gcn::{forward_on_tape, gcn_forward, GcnParams, Mode, HIDDEN};
use crate::graph::CfGraph;
use crate::numerics::{
    derive_seed, rng, sigmoid, AdamConfig, AdamState, Adjacency, Checkpoint, ReluMode, Tape,
    Tensor, Var,
};

pub const PG_INPUT: usize = 2 * HIDDEN;
pub const PG_HIDDEN: usize = 64;

/// Shared edge scorer: `MLP(concat(z_u, z_v))`, 128 -> 64 -> 1.
#[derive(Debug, Clone, PartialEq)]
pub struct PgExplainerParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl PgExplainerParams {
    pub fn init(seed: u64) -> Self {
        let mut r = rng(seed);
        PgExplainerParams {
            w1: Tensor::glorot(PG_INPUT, PG_HIDDEN, &mut r),
            b1: Tensor::zeros(1, PG_HIDDEN),
            w2: Tensor::glorot(PG_HIDDEN, 1, &mut r),
            b2: Tensor::zeros(1, 1),
        }
    }

    fn flat(&self) -> Vec<Tensor> {
        vec![self.w1.clone(), self.b1.clone(), self.w2.clone(), self.b2.clone()]
    }

    fn from_flat(v: &[Tensor]) -> Self {
        PgExplainerParams {
            w1: v[0].clone(),
            b1: v[1].clone(),
            w2: v[2].clone(),
            b2: v[3].clone(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("pgexplainer");
        ck.push("w1", &self.w1);
        ck.push("b1", &self.b1);
        ck.push("w2", &self.w2);
        ck.push("b2", &self.b2);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(PgExplainerParams {
            w1: ck.get_shaped("w1", PG_INPUT, PG_HIDDEN)?,
            b1: ck.get_shaped("b1", 1, PG_HIDDEN)?,
            w2: ck.get_shaped("w2", PG_HIDDEN, 1)?,
            b2: ck.get_shaped("b2", 1, 1)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgExplainerConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Concrete samples per graph per step.
    pub k: usize,
    pub temp_start: f64,
    pub temp_end: f64,
    pub size_coef: f64,
    pub ent_coef: f64,
    pub seed: u64,
}

impl Default for PgExplainerConfig {
    fn default() -> Self {
        PgExplainerConfig {
            epochs: 30,
            lr: 0.003,
            k: 1,
            temp_start: 5.0,
            temp_end: 1.0,
            size_coef: 0.005,
            ent_coef: 1.0,
            seed: 0,
        }
    }
}

impl PgExplainerConfig {
    /// Geometric schedule from `temp_start` at the first epoch to `temp_end`
    /// at the last.
    pub fn temperature(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.temp_start;
        }
        let frac = epoch as f64 / (self.epochs - 1) as f64;
        self.temp_start * (self.temp_end / self.temp_start).powf(frac)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PgHistory {
    /// Mean per-graph training loss for each epoch.
    pub epoch_loss: Vec<f64>,
}

/// Frozen per-graph inputs: features, adjacency, final embeddings and the
/// original class distribution.
struct Prepared<'a> {
    x: &'a Tensor,
    adj: Arc<Adjacency>,
    z: Tensor,
    target: Tensor,
    src: Vec<usize>,
    dst: Vec<usize>,
}

fn prepare<'a>(g: &'a CfGraph, p: &GcnParams) -> Result<Prepared<'a>> {
    let x = g.require_features()?;
    let out = gcn_forward(g, x, None, p, Mode::Eval)?;
    Ok(Prepared {
        x,
        adj: Arc::new(Adjacency::new(g.num_nodes(), g.edges().to_vec())),
        z: out.node_embeddings,
        target: Tensor::row_vector(out.probs.to_vec()),
        src: g.edges().iter().map(|e| e.0).collect(),
        dst: g.edges().iter().map(|e| e.1).collect(),
    })
}

struct Leaves {
    vars: [Var; 4],
    logits: Var,
}

/// Edge logits as a `1 x |E|` row.
fn edge_logits(t: &mut Tape, prep: &Prepared, psi: &PgExplainerParams) -> Result<Leaves> {
    let z = t.leaf(prep.z.clone());
    let zu = t.gather_rows(z, prep.src.clone())?;
    let zv = t.gather_rows(z, prep.dst.clone())?;
    let h = t.concat_cols(zu, zv)?;
    let vars = [
        t.leaf(psi.w1.clone()),
        t.leaf(psi.b1.clone()),
        t.leaf(psi.w2.clone()),
        t.leaf(psi.b2.clone()),
    ];
    let h = t.matmul(h, vars[0])?;
    let h = t.add(h, vars[1])?;
    let h = t.relu(h);
    let o = t.matmul(h, vars[2])?;
    let o = t.add(o, vars[3])?;
    Ok(Leaves {
        vars,
        logits: t.transpose(o),
    })
}

/// Loss of one mask. `noise` holds the logistic noise per edge, or `None`
/// for the deterministic mask `sigmoid(logits / temp)`.
fn mask_loss(
    t: &mut Tape,
    prep: &Prepared,
    psi: &PgExplainerParams,
    p: &GcnParams,
    cfg: &PgExplainerConfig,
    noise: Option<Vec<f64>>,
    temp: f64,
) -> Result<(Leaves, Var)> {
    let leaves = edge_logits(t, prep, psi)?;
    let mut pre = leaves.logits;
    if let Some(n) = noise {
        let nv = t.leaf(Tensor::row_vector(n));
        pre = t.add(pre, nv)?;
    }
    let pre = t.scale(pre, 1.0 / temp);
    let s = t.sigmoid(pre);
    let fwd = forward_on_tape(t, &prep.adj, prep.x, s, p, Mode::Eval)?;
    let ce = t.softmax_ce(fwd.logits, prep.target.clone())?;
    let reg = mask_regularizer(t, s, cfg.size_coef, cfg.ent_coef)?;
    let loss = t.add(ce, reg)?;
    Ok((leaves, loss))
}

/// Train the shared scorer with one Adam step per graph, visiting graphs in
/// a seeded shuffled order each epoch.
pub fn train_pgexplainer(
    graphs: &[CfGraph],
    p: &GcnParams,
    cfg: &PgExplainerConfig,
) -> Result<(PgExplainerParams, PgHistory)> {
    if graphs.is_empty() {
        return Err(Error::invalid("PGExplainer training set is empty"));
    }
    if cfg.k < 1 {
        return Err(Error::invalid("PGExplainer needs at least one sample per step"));
    }
    let prepared: Vec<Prepared> = graphs
        .iter()
        .filter(|g| g.num_edges() > 0)
        .map(|g| prepare(g, p))
        .collect::<Result<_>>()?;
    let mut psi = PgExplainerParams::init(cfg.seed);
    let mut flat = psi.flat();
    let mut adam = AdamState::new(AdamConfig::new(cfg.lr), &flat);
    let mut order_rng = rng(derive_seed(cfg.seed, 1));
    let mut noise_rng = rng(derive_seed(cfg.seed, 2));
    let mut history = PgHistory::default();
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for epoch in 0..cfg.epochs {
        let temp = cfg.temperature(epoch);
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut order_rng);
        let mut total = 0.0;
        for &i in &order {
            let prep = &prepared[i];
            let mut grads: Vec<Tensor> = flat.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
            let mut loss_sum = 0.0;
            for _ in 0..cfg.k {
                let noise = (0..prep.src.len())
                    .map(|_| {
                        let eps: f64 = noise_rng.random_range(1e-6..1.0 - 1e-6);
                        eps.ln() - (1.0 - eps).ln()
                    })
                    .collect();
                let mut t = Tape::new();
                let (leaves, loss) = mask_loss(&mut t, prep, &psi, p, cfg, Some(noise), temp)?;
                let mut g = t.backward(loss, ReluMode::Standard);
                for (acc, v) in grads.iter_mut().zip(leaves.vars) {
                    acc.add_assign(&g.take(v, &t));
                }
                loss_sum += t.scalar(loss);
            }
            let loss = loss_sum / cfg.k as f64;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("PGExplainer loss at epoch {epoch}")));
            }
            let grads: Vec<Tensor> = grads.iter().map(|g| g.scale(1.0 / cfg.k as f64)).collect();
            adam.step(&mut flat, &grads)?;
            psi = PgExplainerParams::from_flat(&flat);
            total += loss;
        }
        history.epoch_loss.push(total / prepared.len().max(1) as f64);
        log::debug!("pgexplainer epoch {epoch}: loss {:.5}", history.epoch_loss[epoch]);
    }
    Ok((psi, history))
}

/// Deterministic loss of `g` under the mask `sigmoid(logits)`.
pub fn pg_eval_loss(
    g: &CfGraph,
    psi: &PgExplainerParams,
    p: &GcnParams,
    cfg: &PgExplainerConfig,
) -> Result<f64> {
    let prep = prepare(g, p)?;
    let mut t = Tape::new();
    let (_, loss) = mask_loss(&mut t, &prep, psi, p, cfg, None, 1.0)?;
    Ok(t.scalar(loss))
}

/// Score edges with `sigmoid(MLP(z_u, z_v))`, no sampling.
pub fn explain_pgexplainer(
    g: &CfGraph,
    x: &Tensor,
    psi: &PgExplainerParams,
    p: &GcnParams,
) -> Result<Explanation> {
    let z = gcn_forward(g, x, None, p, Mode::Eval)?.node_embeddings;
    let prep = Prepared {
        x,
        adj: Arc::new(Adjacency::new(g.num_nodes(), g.edges().to_vec())),
        z,
        target: Tensor::zeros(1, 2),
        src: g.edges().iter().map(|e| e.0).collect(),
        dst: g.edges().iter().map(|e| e.1).collect(),
    };
    let scores = if g.num_edges() == 0 {
        Vec::new()
    } else {
        let mut t = Tape::new();
        let leaves = edge_logits(&mut t, &prep, psi)?;
        t.value(leaves.logits).data().iter().map(|&v| sigmoid(v)).collect()
    };
    Explanation::new(g, Method::PgExplainer, scores)
}

#[cfg(test)]
mod tests {
    use super::super::tests::random_graph;
    use super::*;
    use crate::graph::NodeBlock;

    fn with_features(seed: u64, n: usize, m: usize) -> CfGraph {
        let (g, x) = random_graph(seed, n, m);
        g.with_features(x).unwrap()
    }

    #[test]
    fn architecture_dims() {
        let psi = PgExplainerParams::init(0);
        assert_eq!(psi.w1.shape(), [128, 64]);
        assert_eq!(psi.b1.shape(), [1, 64]);
        assert_eq!(psi.w2.shape(), [64, 1]);
        assert_eq!(psi.b2.shape(), [1, 1]);
        let ck = PgExplainerParams::from_checkpoint(
            &Checkpoint::from_json(psi.to_checkpoint().to_json().as_bytes(), "pgexplainer").unwrap(),
        )
        .unwrap();
        assert_eq!(ck, psi);
    }

    #[test]
    fn temperature_schedule() {
        let cfg = PgExplainerConfig::default();
        assert_eq!(cfg.temperature(0), 5.0);
        assert!((cfg.temperature(29) - 1.0).abs() < 1e-12);
        let mid = cfg.temperature(1) / cfg.temperature(0);
        let later = cfg.temperature(20) / cfg.temperature(19);
        assert!((mid - later).abs() < 1e-12);
    }

    #[test]
    fn scores_in_unit_interval_and_isomorphism_invariant() {
        let g = with_features(1, 6, 10);
        let p = GcnParams::init(3);
        let psi = PgExplainerParams::init(2);
        let x = g.features().unwrap();
        let e = explain_pgexplainer(&g, x, &psi, &p).unwrap();
        assert!(e.scores.iter().all(|s| *s > 0.0 && *s < 1.0));

        let perm = [2usize, 5, 0, 4, 1, 3];
        let mut rows = vec![0; 6];
        for (old, &new) in perm.iter().enumerate() {
            rows[new] = old;
        }
        let edges: Vec<_> = g.edges().iter().map(|&(s, d)| (perm[s], perm[d])).collect();
        let nodes = (0..6).map(|i| NodeBlock::new(i, vec![])).collect();
        let g2 = CfGraph::new("perm", 1, nodes, edges, None).unwrap();
        let e2 = explain_pgexplainer(&g2, &x.select_rows(&rows), &psi, &p).unwrap();
        for (i, &(s, d)) in g.edges().iter().enumerate() {
            let j = g2.edge_index(perm[s], perm[d]).unwrap();
            assert!((e.scores[i] - e2.scores[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicates_have_identical_losses() {
        let g = with_features(4, 6, 10);
        let p = GcnParams::init(1);
        let cfg = PgExplainerConfig {
            epochs: 3,
            ..Default::default()
        };
        let set = vec![g.clone(), g.clone().with_id("copy"), with_features(5, 5, 8)];
        let (psi, hist) = train_pgexplainer(&set, &p, &cfg).unwrap();
        assert_eq!(hist.epoch_loss.len(), 3);
        assert!(hist.epoch_loss.iter().all(|l| l.is_finite()));
        let a = pg_eval_loss(&set[0], &psi, &p, &cfg).unwrap();
        let b = pg_eval_loss(&set[1], &psi, &p, &cfg).unwrap();
        assert_eq!(a, b);
        let again = train_pgexplainer(&set, &p, &cfg).unwrap();
        assert_eq!(again.0, psi);
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let p = GcnParams::init(1);
        assert!(train_pgexplainer(&[], &p, &PgExplainerConfig::default()).is_err());
    }
}
