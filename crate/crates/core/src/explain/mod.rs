//! Edge attribution methods.
//!
//! Every explainer returns one score per canonical edge. The gradient
//! methods attribute the predicted-class logit to multiplicative edge
//! weights, with an all-zero weight vector as the removal baseline.

mod gnnexplainer;
mod pgexplainer;

pub use gnnexplainer::{explain_gnnexplainer, GnnExplainerConfig};
pub use pgexplainer::{
    explain_pgexplainer, pg_eval_loss, train_pgexplainer, PgExplainerConfig, PgExplainerParams,
    PgHistory,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcn::{gcn_forward, grad_edge_weights, grad_edge_weights_at, GcnParams, Mode};
use crate::graph::CfGraph;
use crate::numerics::{ReluMode, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[serde(rename = "gnnexplainer")]
    GnnExplainer,
    #[serde(rename = "pgexplainer")]
    PgExplainer,
    Saliency,
    Ig,
    Gbp,
    #[serde(rename = "rankfusion")]
    RankFusion,
    MeanAgg,
    RankVote,
}

impl Method {
    pub const EXPLAINERS: [Method; 5] = [
        Method::GnnExplainer,
        Method::PgExplainer,
        Method::Saliency,
        Method::Ig,
        Method::Gbp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::GnnExplainer => "gnnexplainer",
            Method::PgExplainer => "pgexplainer",
            Method::Saliency => "saliency",
            Method::Ig => "ig",
            Method::Gbp => "gbp",
            Method::RankFusion => "rankfusion",
            Method::MeanAgg => "mean_agg",
            Method::RankVote => "rank_vote",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Method::GnnExplainer,
            Method::PgExplainer,
            Method::Saliency,
            Method::Ig,
            Method::Gbp,
            Method::RankFusion,
            Method::MeanAgg,
            Method::RankVote,
        ]
        .into_iter()
        .find(|m| m.as_str() == s)
        .ok_or_else(|| Error::invalid(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Explanation {
    pub graph_id: String,
    pub method: Method,
    pub scores: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl Explanation {
    pub fn new(g: &CfGraph, method: Method, scores: Vec<f64>) -> Result<Self> {
        let e = Explanation {
            graph_id: g.id().to_string(),
            method,
            scores,
            seed: 0,
            config: serde_json::Value::Object(Default::default()),
        };
        e.check(g)?;
        Ok(e)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_config(mut self, config: impl Serialize) -> Self {
        self.config = serde_json::to_value(config).expect("config serializes");
        self
    }

    /// Check alignment with `g` and finiteness.
    pub fn check(&self, g: &CfGraph) -> Result<()> {
        if self.scores.len() != g.num_edges() {
            return Err(Error::validation(format!(
                "explanation for `{}` has {} scores but the graph has {} edges",
                self.graph_id,
                self.scores.len(),
                g.num_edges()
            )));
        }
        if let Some(i) = self.scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{} score of edge {i} in `{}`",
                self.method, self.graph_id
            )));
        }
        Ok(())
    }
}

/// Eval-mode predicted class.
pub fn predicted_class(g: &CfGraph, x: &Tensor, p: &GcnParams) -> Result<usize> {
    Ok(gcn_forward(g, x, None, p, Mode::Eval)?.predicted())
}

pub fn explain_saliency(g: &CfGraph, x: &Tensor, p: &GcnParams) -> Result<Explanation> {
    let c = predicted_class(g, x, p)?;
    let grad = grad_edge_weights(g, x, p, c, ReluMode::Standard)?;
    Explanation::new(g, Method::Saliency, grad.into_iter().map(f64::abs).collect())
}

pub fn explain_gbp(g: &CfGraph, x: &Tensor, p: &GcnParams) -> Result<Explanation> {
    let c = predicted_class(g, x, p)?;
    let grad = grad_edge_weights(g, x, p, c, ReluMode::Guided)?;
    Explanation::new(g, Method::Gbp, grad.into_iter().map(f64::abs).collect())
}

/// Signed integrated gradients of the `target` logit along the straight path
/// from all-zero to all-one edge weights, midpoint rule with `m` steps.
pub fn integrated_gradients(
    g: &CfGraph,
    x: &Tensor,
    p: &GcnParams,
    target: usize,
    m: usize,
) -> Result<Vec<f64>> {
    if m < 1 {
        return Err(Error::invalid("integrated gradients needs at least one step"));
    }
    let mut total = vec![0.0; g.num_edges()];
    for k in 1..=m {
        let alpha = (k as f64 - 0.5) / m as f64;
        let at = vec![alpha; g.num_edges()];
        let (_, grad) = grad_edge_weights_at(g, x, p, Some(&at), target, ReluMode::Standard)?;
        for (t, v) in total.iter_mut().zip(grad) {
            *t += v;
        }
    }
    for t in &mut total {
        *t /= m as f64;
    }
    Ok(total)
}

pub fn explain_ig(g: &CfGraph, x: &Tensor, p: &GcnParams, m: usize) -> Result<Explanation> {
    let c = predicted_class(g, x, p)?;
    let ig = integrated_gradients(g, x, p, c, m)?;
    Ok(
        Explanation::new(g, Method::Ig, ig.into_iter().map(f64::abs).collect())?
            .with_config(serde_json::json!({ "steps": m })),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::CODE_DIM;
    use crate::gcn::HIDDEN;
    use crate::graph::NodeBlock;
    use crate::numerics::{finite_difference, rng};
    use rand::Rng;

    pub(crate) fn random_graph(seed: u64, n: usize, m: usize) -> (CfGraph, Tensor) {
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
        let g = CfGraph::new(format!("r{seed}"), 1, nodes, edges, None).unwrap();
        (g, x)
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::EXPLAINERS
            .into_iter()
            .chain([Method::RankFusion, Method::MeanAgg, Method::RankVote])
        {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
        assert!("captum".parse::<Method>().is_err());
    }

    #[test]
    fn zero_features_give_zero_scores() {
        let (g, _) = random_graph(1, 6, 9);
        let x = Tensor::zeros(6, CODE_DIM);
        let p = GcnParams::init(2);
        for e in [
            explain_saliency(&g, &x, &p).unwrap(),
            explain_gbp(&g, &x, &p).unwrap(),
            explain_ig(&g, &x, &p, 8).unwrap(),
        ] {
            assert!(e.scores.iter().all(|s| *s == 0.0), "{}", e.method);
        }
    }

    #[test]
    fn saliency_matches_absolute_finite_differences() {
        for seed in 0..4 {
            let (g, x) = random_graph(10 + seed, 6, 10);
            let p = GcnParams::init(seed);
            let e = explain_saliency(&g, &x, &p).unwrap();
            let c = predicted_class(&g, &x, &p).unwrap();
            let num = finite_difference(
                |w| gcn_forward(&g, &x, Some(w.data()), &p, Mode::Eval).unwrap().logits[c],
                &Tensor::full(1, g.num_edges(), 1.0),
                1e-5,
            );
            for (s, n) in e.scores.iter().zip(num.data()) {
                assert!(*s >= 0.0);
                assert!((s - n.abs()).abs() <= 1e-4 * s.max(n.abs()).max(1e-4));
            }
        }
    }

    #[test]
    fn gbp_equals_saliency_without_negative_signals() {
        // nonnegative features and weights keep every ReLU open and every
        // upstream gradient positive
        let (g, x) = random_graph(5, 6, 10);
        let p = positive_params(3);
        let s = explain_saliency(&g, &x, &p).unwrap();
        let b = explain_gbp(&g, &x, &p).unwrap();
        for (a, c) in s.scores.iter().zip(&b.scores) {
            assert!((a - c).abs() <= 1e-12 * a.abs().max(1.0));
        }

        // with mixed-sign weights the two generally differ
        let q = GcnParams::init(8);
        let s = explain_saliency(&g, &x, &q).unwrap();
        let b = explain_gbp(&g, &x, &q).unwrap();
        assert_ne!(s.scores, b.scores);
        assert!(b.scores.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn ig_single_step_is_midpoint_gradient() {
        let (g, x) = random_graph(6, 5, 8);
        let p = GcnParams::init(1);
        let ig = integrated_gradients(&g, &x, &p, 1, 1).unwrap();
        let half = vec![0.5; g.num_edges()];
        let (_, grad) =
            grad_edge_weights_at(&g, &x, &p, Some(&half), 1, ReluMode::Standard).unwrap();
        assert_eq!(ig, grad);
        assert!(integrated_gradients(&g, &x, &p, 1, 0).is_err());
    }

    fn positive_params(seed: u64) -> GcnParams {
        let mut r = rng(seed);
        let mut pos = |rows, cols| {
            Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(0.01..0.2)).collect())
                .unwrap()
        };
        GcnParams {
            layers: [pos(CODE_DIM, HIDDEN), pos(HIDDEN, HIDDEN), pos(HIDDEN, HIDDEN)],
            wc: pos(2, HIDDEN),
            bc: Tensor::zeros(1, 2),
        }
    }

    #[test]
    fn ig_completeness_on_smooth_paths() {
        // no ReLU switches along the path, so the midpoint rule converges fast
        for seed in 0..5 {
            let (g, x) = random_graph(30 + seed, 6, 10);
            let p = positive_params(seed);
            let c = predicted_class(&g, &x, &p).unwrap();
            let ig: f64 = integrated_gradients(&g, &x, &p, c, 256).unwrap().iter().sum();
            let ones = vec![1.0; g.num_edges()];
            let zeros = vec![0.0; g.num_edges()];
            let hi = gcn_forward(&g, &x, Some(&ones), &p, Mode::Eval).unwrap().logits[c];
            let lo = gcn_forward(&g, &x, Some(&zeros), &p, Mode::Eval).unwrap().logits[c];
            assert!((ig - (hi - lo)).abs() < 1e-3 * (hi - lo).abs(), "seed {seed}: {ig} vs {}", hi - lo);
        }
    }

    #[test]
    fn edge_order_alignment() {
        let (g, x) = random_graph(7, 6, 12);
        let p = GcnParams::init(4);
        let rev: Vec<_> = g.edges().iter().rev().copied().collect();
        let nodes = g.nodes().to_vec();
        let g2 = CfGraph::new("rev", 1, nodes, rev, None).unwrap();
        assert_eq!(
            explain_ig(&g, &x, &p, 4).unwrap().scores,
            explain_ig(&g2, &x, &p, 4).unwrap().scores
        );
    }

    #[test]
    fn explanation_json_shape() {
        let (g, x) = random_graph(8, 4, 5);
        let p = GcnParams::init(4);
        let e = explain_ig(&g, &x, &p, 3).unwrap().with_seed(5);
        let v: serde_json::Value = serde_json::to_value(&e).unwrap();
        assert_eq!(v["graph_id"], "r8");
        assert_eq!(v["method"], "ig");
        assert_eq!(v["seed"], 5);
        assert_eq!(v["config"]["steps"], 3);
        let back: Explanation = serde_json::from_value(v).unwrap();
        assert_eq!(back, e);
        let mut bad = e.clone();
        bad.scores.push(1.0);
        assert!(bad.check(&g).is_err());
        bad.scores.pop();
        bad.scores[0] = f64::NAN;
        assert!(matches!(bad.check(&g), Err(Error::NonFinite(_))));
    }
}
