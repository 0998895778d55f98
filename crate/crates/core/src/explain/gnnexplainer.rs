use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{predicted_class, Explanation, Method};
use crate::error::Result;
use crate::gcn::{forward_on_tape, GcnParams, Mode, NUM_CLASSES};
use crate::graph::CfGraph;
use crate::numerics::{rng, sigmoid, AdamConfig, AdamState, Adjacency, ReluMode, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GnnExplainerConfig {
    pub epochs: usize,
    pub lr: f64,
    pub size_coef: f64,
    pub ent_coef: f64,
    pub seed: u64,
}

impl Default for GnnExplainerConfig {
    fn default() -> Self {
        GnnExplainerConfig {
            epochs: 100,
            lr: 0.01,
            size_coef: 0.005,
            ent_coef: 1.0,
            seed: 0,
        }
    }
}

const LOG_EPS: f64 = 1e-15;

/// `size_coef * mean(s) + ent_coef * mean(H(s))` for a mask `s` in [0, 1].
/// The logs are shifted by a tiny epsilon so saturated masks stay finite.
pub(crate) fn mask_regularizer(t: &mut Tape, s: Var, size_coef: f64, ent_coef: f64) -> Result<Var> {
    let size = t.mean(s);
    let size = t.scale(size, size_coef);
    let shifted = t.add_scalar(s, LOG_EPS);
    let log_s = t.log(shifted);
    let a = t.mul(s, log_s)?;
    let one_minus = t.scale(s, -1.0);
    let one_minus = t.add_scalar(one_minus, 1.0);
    let shifted = t.add_scalar(one_minus, LOG_EPS);
    let log_1m = t.log(shifted);
    let b = t.mul(one_minus, log_1m)?;
    let ab = t.add(a, b)?;
    let ent = t.mean(ab);
    let ent = t.scale(ent, -ent_coef);
    t.add(size, ent)
}

/// Learn a soft edge mask for one graph and return it as scores.
pub fn explain_gnnexplainer(
    g: &CfGraph,
    x: &Tensor,
    p: &GcnParams,
    cfg: &GnnExplainerConfig,
) -> Result<Explanation> {
    let n = g.num_edges();
    let normal = Normal::new(0.0, 0.1).expect("valid normal");
    let mut r = rng(cfg.seed);
    let init: Vec<f64> = (0..n).map(|_| normal.sample(&mut r)).collect();
    let mut mask = vec![Tensor::row_vector(init)];
    if n > 0 && cfg.epochs > 0 {
        let y = predicted_class(g, x, p)?;
        let mut target = Tensor::zeros(1, NUM_CLASSES);
        target.set(0, y, 1.0);
        let adj = Arc::new(Adjacency::new(g.num_nodes(), g.edges().to_vec()));
        let mut adam = AdamState::new(AdamConfig::new(cfg.lr), &mask);
        for _ in 0..cfg.epochs {
            let mut t = Tape::new();
            let m = t.leaf(mask[0].clone());
            let s = t.sigmoid(m);
            let fwd = forward_on_tape(&mut t, &adj, x, s, p, Mode::Eval)?;
            let ce = t.softmax_ce(fwd.logits, target.clone())?;
            let reg = mask_regularizer(&mut t, s, cfg.size_coef, cfg.ent_coef)?;
            let loss = t.add(ce, reg)?;
            let grad = t.backward(loss, ReluMode::Standard).get(m, &t);
            adam.step(&mut mask, &[grad])?;
        }
    }
    let scores = mask[0].data().iter().map(|&v| sigmoid(v)).collect();
    Ok(Explanation::new(g, Method::GnnExplainer, scores)?
        .with_seed(cfg.seed)
        .with_config(cfg))
}

#[cfg(test)]
mod tests {
    use super::super::tests::random_graph;
    use super::*;

    #[test]
    fn scores_are_open_unit_interval_and_seeded() {
        let (g, x) = random_graph(1, 6, 10);
        let p = GcnParams::init(1);
        let cfg = GnnExplainerConfig {
            epochs: 20,
            seed: 4,
            ..Default::default()
        };
        let a = explain_gnnexplainer(&g, &x, &p, &cfg).unwrap();
        let b = explain_gnnexplainer(&g, &x, &p, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.scores.iter().all(|s| *s > 0.0 && *s < 1.0));
        assert_eq!(a.seed, 4);
        assert_eq!(a.config["epochs"], 20);
    }

    #[test]
    fn zero_epochs_returns_initial_mask() {
        let (g, x) = random_graph(2, 5, 8);
        let p = GcnParams::init(1);
        let cfg = GnnExplainerConfig {
            epochs: 0,
            seed: 9,
            ..Default::default()
        };
        let e = explain_gnnexplainer(&g, &x, &p, &cfg).unwrap();
        let normal = Normal::new(0.0, 0.1).unwrap();
        let mut r = rng(9);
        let want: Vec<f64> = (0..g.num_edges())
            .map(|_| sigmoid(normal.sample(&mut r)))
            .collect();
        assert_eq!(e.scores, want);
    }

    #[test]
    fn saturated_mask_regularizer_is_finite() {
        let mut t = Tape::new();
        let s = t.leaf(Tensor::row_vector(vec![0.0, 1.0, 0.5]));
        let r = mask_regularizer(&mut t, s, 0.1, 1.0).unwrap();
        assert!(t.scalar(r).is_finite());
        let g = t.backward(r, ReluMode::Standard).get(s, &t);
        assert!(g.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn regularizer_value() {
        let mut t = Tape::new();
        let s = t.leaf(Tensor::row_vector(vec![0.5, 0.25]));
        let r = mask_regularizer(&mut t, s, 0.1, 2.0).unwrap();
        let h = |q: f64| -(q * q.ln() + (1.0 - q) * (1.0 - q).ln());
        let want = 0.1 * 0.375 + 2.0 * (h(0.5) + h(0.25)) / 2.0;
        assert!((t.scalar(r) - want).abs() < 1e-12);
    }

    #[test]
    fn edgeless_graph_gives_empty_explanation() {
        let (g, x) = random_graph(3, 1, 0);
        let p = GcnParams::init(1);
        let e = explain_gnnexplainer(&g, &x, &p, &GnnExplainerConfig::default()).unwrap();
        assert!(e.scores.is_empty());
    }
}
