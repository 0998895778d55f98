//! Three-layer GCN graph classifier.
//!
//! Each layer computes `ReLU(D^-1/2 A(w) D^-1/2 H W)` over the symmetrized
//! CFG with unit self-loops, where every CFG edge carries a multiplicative
//! weight (1.0 unless an explainer supplies a mask). The final node
//! embeddings are mean-pooled into `h_G`, dropout is applied to `h_G` during
//! training only, and a linear layer plus softmax gives class probabilities.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::CODE_DIM;
use crate::error::{Error, Result};
use crate::graph::CfGraph;
use crate::numerics::{
    derive_seed, rng, softmax, AdamConfig, AdamState, Adjacency, Checkpoint, ReluMode, Tape,
    Tensor, Var,
};

pub const HIDDEN: usize = 64;
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    /// Layer weights, `64 x 64`, applied as `H W`.
    pub layers: [Tensor; 3],
    /// Classifier weight, `2 x 64`.
    pub wc: Tensor,
    /// Classifier bias, `1 x 2`.
    pub bc: Tensor,
}

impl GcnParams {
    pub fn init(seed: u64) -> Self {
        let mut r = rng(seed);
        let layers = [
            Tensor::glorot(CODE_DIM, HIDDEN, &mut r),
            Tensor::glorot(HIDDEN, HIDDEN, &mut r),
            Tensor::glorot(HIDDEN, HIDDEN, &mut r),
        ];
        let wc = Tensor::glorot(NUM_CLASSES, HIDDEN, &mut r);
        GcnParams {
            layers,
            wc,
            bc: Tensor::zeros(1, NUM_CLASSES),
        }
    }

    fn flat(&self) -> Vec<Tensor> {
        let mut v: Vec<Tensor> = self.layers.to_vec();
        v.push(self.wc.clone());
        v.push(self.bc.clone());
        v
    }

    fn from_flat(mut v: Vec<Tensor>) -> Self {
        let bc = v.pop().expect("bc");
        let wc = v.pop().expect("wc");
        let l2 = v.pop().expect("w3");
        let l1 = v.pop().expect("w2");
        let l0 = v.pop().expect("w1");
        GcnParams {
            layers: [l0, l1, l2],
            wc,
            bc,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("gcn");
        for (i, w) in self.layers.iter().enumerate() {
            ck.push(format!("w{}", i + 1), w);
        }
        ck.push("wc", &self.wc);
        ck.push("bc", &self.bc);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(GcnParams {
            layers: [
                ck.get_shaped("w1", CODE_DIM, HIDDEN)?,
                ck.get_shaped("w2", HIDDEN, HIDDEN)?,
                ck.get_shaped("w3", HIDDEN, HIDDEN)?,
            ],
            wc: ck.get_shaped("wc", NUM_CLASSES, HIDDEN)?,
            bc: ck.get_shaped("bc", 1, NUM_CLASSES)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Eval,
    /// Dropout on `h_G` with the given rate, mask drawn from `seed`.
    Train { dropout: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub logits: [f64; 2],
    pub probs: [f64; 2],
    /// Mean-pooled final node embeddings, before dropout.
    pub graph_embedding: Vec<f64>,
    pub node_embeddings: Tensor,
}

impl ModelOutput {
    pub fn predicted(&self) -> usize {
        usize::from(self.logits[1] > self.logits[0])
    }
}

pub fn adjacency(g: &CfGraph) -> Arc<Adjacency> {
    Arc::new(Adjacency::new(g.num_nodes(), g.edges().to_vec()))
}

/// Handles into a recorded forward pass.
pub struct TapeForward {
    pub layer_vars: Vec<Var>,
    pub wc: Var,
    pub bc: Var,
    pub x: Var,
    pub node_embeddings: Var,
    pub graph_embedding: Var,
    pub logits: Var,
}

/// Record the forward pass on `t` with `weights` (a `1 x |E|` var) as the
/// edge mask.
pub fn forward_on_tape(
    t: &mut Tape,
    adj: &Arc<Adjacency>,
    x: &Tensor,
    weights: Var,
    p: &GcnParams,
    mode: Mode,
) -> Result<TapeForward> {
    if x.rows() != adj.num_nodes() || x.cols() != CODE_DIM {
        return Err(Error::Shape {
            op: "gcn_forward features",
            lhs: x.shape().to_vec(),
            rhs: vec![adj.num_nodes(), CODE_DIM],
        });
    }
    let xv = t.leaf(x.clone());
    let mut h = xv;
    let mut layer_vars = Vec::with_capacity(3);
    for w in &p.layers {
        let wv = t.leaf(w.clone());
        layer_vars.push(wv);
        let z = t.matmul(h, wv)?;
        let z = t.propagate(weights, z, adj.clone())?;
        h = t.relu(z);
    }
    let pooled = t.mean_rows(h);
    let dropped = match mode {
        Mode::Eval => pooled,
        Mode::Train { dropout, seed } => {
            let mut r = rng(seed);
            let keep = 1.0 - dropout;
            let mask: Vec<f64> = (0..HIDDEN)
                .map(|_| {
                    if keep > 0.0 && r.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect();
            let m = t.leaf(Tensor::row_vector(mask));
            t.mul(pooled, m)?
        }
    };
    let wc = t.leaf(p.wc.transpose());
    let bc = t.leaf(p.bc.clone());
    let z = t.matmul(dropped, wc)?;
    let logits = t.add(z, bc)?;
    Ok(TapeForward {
        layer_vars,
        wc,
        bc,
        x: xv,
        node_embeddings: h,
        graph_embedding: pooled,
        logits,
    })
}

fn weights_leaf(t: &mut Tape, g: &CfGraph, edge_weights: Option<&[f64]>) -> Result<Var> {
    let w = match edge_weights {
        Some(w) => {
            if w.len() != g.num_edges() {
                return Err(Error::Shape {
                    op: "gcn_forward edge weights",
                    lhs: vec![w.len()],
                    rhs: vec![g.num_edges()],
                });
            }
            w.to_vec()
        }
        None => vec![1.0; g.num_edges()],
    };
    Ok(t.leaf(Tensor::row_vector(w)))
}

pub fn gcn_forward(
    g: &CfGraph,
    x: &Tensor,
    edge_weights: Option<&[f64]>,
    p: &GcnParams,
    mode: Mode,
) -> Result<ModelOutput> {
    let mut t = Tape::new();
    let w = weights_leaf(&mut t, g, edge_weights)?;
    let fwd = forward_on_tape(&mut t, &adjacency(g), x, w, p, mode)?;
    let l = t.value(fwd.logits).data();
    let logits = [l[0], l[1]];
    let pr = softmax(&logits);
    Ok(ModelOutput {
        logits,
        probs: [pr[0], pr[1]],
        graph_embedding: t.value(fwd.graph_embedding).data().to_vec(),
        node_embeddings: t.value(fwd.node_embeddings).clone(),
    })
}

/// Eval-mode forward on the graph's own features.
pub fn evaluate(g: &CfGraph, p: &GcnParams) -> Result<ModelOutput> {
    gcn_forward(g, g.require_features()?, None, p, Mode::Eval)
}

pub fn predict(g: &CfGraph, p: &GcnParams) -> Result<usize> {
    Ok(evaluate(g, p)?.predicted())
}

/// Gradient of the `target` logit with respect to every edge weight,
/// evaluated at `at` (all ones when `None`), eval mode.
pub fn grad_edge_weights_at(
    g: &CfGraph,
    x: &Tensor,
    p: &GcnParams,
    at: Option<&[f64]>,
    target: usize,
    relu_mode: ReluMode,
) -> Result<(f64, Vec<f64>)> {
    let mut t = Tape::new();
    let w = weights_leaf(&mut t, g, at)?;
    let fwd = forward_on_tape(&mut t, &adjacency(g), x, w, p, Mode::Eval)?;
    let sel = t.leaf(one_hot_row(target));
    let picked = t.mul(fwd.logits, sel)?;
    let out = t.sum(picked);
    let grads = t.backward(out, relu_mode);
    Ok((t.scalar(out), grads.get(w, &t).into_data()))
}

pub fn grad_edge_weights(
    g: &CfGraph,
    x: &Tensor,
    p: &GcnParams,
    target: usize,
    relu_mode: ReluMode,
) -> Result<Vec<f64>> {
    Ok(grad_edge_weights_at(g, x, p, None, target, relu_mode)?.1)
}

pub fn grad_node_features(
    g: &CfGraph,
    x: &Tensor,
    p: &GcnParams,
    target: usize,
    relu_mode: ReluMode,
) -> Result<Tensor> {
    let mut t = Tape::new();
    let w = weights_leaf(&mut t, g, None)?;
    let fwd = forward_on_tape(&mut t, &adjacency(g), x, w, p, Mode::Eval)?;
    let sel = t.leaf(one_hot_row(target));
    let picked = t.mul(fwd.logits, sel)?;
    let out = t.sum(picked);
    Ok(t.backward(out, relu_mode).get(fwd.x, &t))
}

fn one_hot_row(class: usize) -> Tensor {
    let mut v = vec![0.0; NUM_CLASSES];
    v[class] = 1.0;
    Tensor::row_vector(v)
}

/// Cross-entropy of one graph and gradients for every parameter.
pub fn loss_and_grads(g: &CfGraph, p: &GcnParams, mode: Mode) -> Result<(f64, GcnParams)> {
    let x = g.require_features()?;
    let mut t = Tape::new();
    let w = weights_leaf(&mut t, g, None)?;
    let fwd = forward_on_tape(&mut t, &adjacency(g), x, w, p, mode)?;
    let loss = t.softmax_ce(fwd.logits, one_hot_row(g.label()))?;
    let mut grads = t.backward(loss, ReluMode::Standard);
    let mut flat: Vec<Tensor> = fwd
        .layer_vars
        .iter()
        .map(|&v| grads.take(v, &t))
        .collect();
    flat.push(grads.take(fwd.wc, &t).transpose());
    flat.push(grads.take(fwd.bc, &t));
    Ok((t.scalar(loss), GcnParams::from_flat(flat)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GcnConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    /// Graphs per Adam step; gradients are averaged over the batch.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for GcnConfig {
    fn default() -> Self {
        GcnConfig {
            epochs: 50,
            lr: 1e-4,
            weight_decay: 5e-4,
            dropout: 0.2,
            batch_size: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean eval-mode cross-entropy and accuracy over a set of graphs.
pub fn evaluate_split(graphs: &[CfGraph], p: &GcnParams) -> Result<(f64, f64)> {
    if graphs.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for g in graphs {
        let out = evaluate(g, p)?;
        loss -= out.probs[g.label()].max(1e-300).ln();
        correct += usize::from(out.predicted() == g.label());
    }
    let n = graphs.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Train with Adam and cross-entropy. Metrics hold an `epoch 0` row for
/// the initial parameters followed by one row per split per epoch.
pub fn train_gnn(
    train: &[CfGraph],
    test: &[CfGraph],
    cfg: &GcnConfig,
) -> Result<(GcnParams, Vec<EpochMetrics>)> {
    if train.is_empty() {
        return Err(Error::invalid("GCN training set is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    if train.iter().all(|g| g.label() == train[0].label()) {
        log::warn!(
            "GCN training set contains only class {}; training anyway",
            train[0].label()
        );
    }
    let mut params = GcnParams::init(cfg.seed);
    let mut flat = params.flat();
    let mut adam = AdamState::new(
        AdamConfig::new(cfg.lr).with_weight_decay(cfg.weight_decay),
        &flat,
    );
    let mut r = rng(derive_seed(cfg.seed, 1));
    let mut metrics = Vec::new();
    let record = |epoch: usize, p: &GcnParams, metrics: &mut Vec<EpochMetrics>| -> Result<()> {
        for (split, set) in [("train", train), ("test", test)] {
            if set.is_empty() {
                continue;
            }
            let (loss, accuracy) = evaluate_split(set, p)?;
            metrics.push(EpochMetrics {
                epoch,
                split: split.into(),
                loss,
                accuracy,
            });
        }
        Ok(())
    };
    record(0, &params, &mut metrics)?;

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Tensor>> = None;
            for &i in chunk {
                step += 1;
                let mode = Mode::Train {
                    dropout: cfg.dropout,
                    seed: derive_seed(cfg.seed, step.wrapping_add(1 << 32)),
                };
                let (loss, g) = loss_and_grads(&train[i], &params, mode)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss on graph `{}` at epoch {epoch}",
                        train[i].id()
                    )));
                }
                let g = g.flat();
                match &mut acc {
                    Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| x.add_assign(y)),
                    None => acc = Some(g),
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            let grads: Vec<Tensor> = acc
                .expect("non-empty chunk")
                .iter()
                .map(|t| t.scale(scale))
                .collect();
            adam.step(&mut flat, &grads)?;
            params = GcnParams::from_flat(flat.clone());
        }
        record(epoch, &params, &mut metrics)?;
        if let Some(m) = metrics.last() {
            log::debug!("epoch {epoch}: {} loss {:.4} acc {:.4}", m.split, m.loss, m.accuracy);
        }
    }
    Ok((params, metrics))
}
