use std::collections::{BTreeMap, HashMap};

use cfgx::autoencoder::{encode_batch, train_ae, AeParams, CODE_DIM};
use cfgx::encode::{encode_node, Aggregation, InstrVector, INSTR_DIM};
use cfgx::eval::{
    accuracy_sweep, consistency, fidelity, perturbation_seed, select, ConsistencyRecord, FidelityRecord,
    SweepRow,
};
use cfgx::explain::{
    explain_gbp, explain_gnnexplainer, explain_ig, explain_pgexplainer, explain_saliency, train_pgexplainer,
    Explanation, Method, PgExplainerParams,
};
use cfgx::extract::{sparsity_to_k, Extraction, SelectionRecord};
use cfgx::fuse::{mean_aggregate, rank_vote_scores, rankfusion_scores, select_top2, AccuracyTable, TopTwo};
use cfgx::gcn::{evaluate_split, train_gnn, GcnParams};
use cfgx::graph::{load_cfg, CfGraph};
use cfgx::numerics::{derive_seed, rng, Checkpoint, Tensor};
use cfgx::synth::gen_dataset;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{CliError, Result};
use crate::report;
use crate::store::{self, Store};

pub const FUSED: [Method; 3] = [Method::RankFusion, Method::MeanAgg, Method::RankVote];

pub struct Ctx {
    pub cfg: Config,
    pub store: Store,
}

fn graphs_from(store: &Store, name: &str, producer: &'static str) -> Result<Vec<CfGraph>> {
    let lines = store.read_lines(name, producer)?;
    let graphs = lines.parse(load_cfg)?;
    let mut seen = HashMap::new();
    for (i, g) in graphs.iter().enumerate() {
        if let Some(j) = seen.insert(g.id().to_string(), i) {
            return Err(CliError::format(
                name,
                format!("graph id `{}` appears twice (graphs {j} and {i})", g.id()),
            ));
        }
    }
    Ok(graphs)
}

fn checkpoint(ctx: &Ctx, mut ck: Checkpoint, extra: serde_json::Value) -> String {
    ck.meta.extend(ctx.store.meta().to_map());
    if let serde_json::Value::Object(m) = extra {
        ck.meta.extend(m);
    }
    ck.to_json()
}

fn read_checkpoint(ctx: &Ctx, name: &str, kind: &str, producer: &'static str) -> Result<Checkpoint> {
    let bytes = ctx.store.read(name, producer)?;
    Checkpoint::from_json(&bytes, kind).map_err(|source| CliError::Artifact {
        file: name.into(),
        source,
    })
}

pub fn synth_gen(ctx: &Ctx) -> Result<()> {
    let ds = gen_dataset(ctx.cfg.dataset.n_per_class, &ctx.cfg.synth)?;
    ctx.store.write_lines(store::GRAPHS, ds.graphs.iter().map(CfGraph::to_json))?;
    let truth: BTreeMap<&str, &[usize]> = ds
        .graphs
        .iter()
        .zip(&ds.truth)
        .map(|(g, t)| (g.id(), t.indices()))
        .collect();
    ctx.store.write_json(store::TRUTH, serde_json::json!({ "truth": truth }))?;
    println!("generated {} graphs", ds.graphs.len());
    Ok(())
}

/// Sparse node vectors: `(index, value)` pairs of the non-zero entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodedGraph {
    pub graph_id: String,
    pub nodes: Vec<Vec<(usize, f64)>>,
}

impl EncodedGraph {
    fn dense(&self) -> cfgx::Result<Vec<InstrVector>> {
        self.nodes
            .iter()
            .map(|pairs| {
                let mut v = vec![0.0; INSTR_DIM];
                for &(i, x) in pairs {
                    *v.get_mut(i).ok_or_else(|| {
                        cfgx::Error::Validation(format!("node vector index {i} exceeds {INSTR_DIM}"))
                    })? = x;
                }
                InstrVector::from_vec(v)
            })
            .collect()
    }
}

pub fn encode(ctx: &Ctx) -> Result<()> {
    let graphs = graphs_from(&ctx.store, store::GRAPHS, "synth-gen")?;
    let encoded: Vec<EncodedGraph> = graphs
        .par_iter()
        .map(|g| {
            let nodes = g
                .nodes()
                .iter()
                .map(|n| {
                    let v = encode_node(&n.instructions, Aggregation::Mean)?;
                    Ok(v.support().into_iter().map(|i| (i, v.as_slice()[i])).collect())
                })
                .collect::<cfgx::Result<_>>()
                .map_err(|source| CliError::Artifact {
                    file: format!("{} graph `{}`", store::GRAPHS, g.id()),
                    source,
                })?;
            Ok(EncodedGraph {
                graph_id: g.id().to_string(),
                nodes,
            })
        })
        .collect::<Result<_>>()?;
    let nodes: usize = encoded.iter().map(|e| e.nodes.len()).sum();
    ctx.store.write_lines(
        store::ENCODED,
        encoded.iter().map(|e| serde_json::to_string(e).expect("encoded graph serializes")),
    )?;
    println!("encoded {nodes} blocks in {} graphs", encoded.len());
    Ok(())
}

#[derive(Serialize)]
struct AeLossRow {
    epoch: usize,
    train_loss: f64,
    val_loss: Option<f64>,
}

fn features(ae: &AeParams, vectors: &[InstrVector]) -> Tensor {
    if vectors.is_empty() {
        return Tensor::zeros(0, CODE_DIM);
    }
    let data = vectors.iter().flat_map(|v| v.as_slice().iter().copied()).collect();
    let x = Tensor::from_vec(vectors.len(), INSTR_DIM, data).expect("uniform rows");
    encode_batch(ae, &x)
}

pub fn train_ae_cmd(ctx: &Ctx) -> Result<()> {
    let graphs = graphs_from(&ctx.store, store::GRAPHS, "synth-gen")?;
    let encoded: Vec<EncodedGraph> = ctx.store.read_lines(store::ENCODED, "encode")?.parse_json()?;
    if encoded.len() != graphs.len()
        || encoded
            .iter()
            .zip(&graphs)
            .any(|(e, g)| e.graph_id != g.id() || e.nodes.len() != g.num_nodes())
    {
        return Err(CliError::format(
            store::ENCODED,
            "does not match graphs.jsonl; rerun `cfgx encode`",
        ));
    }
    let vectors: Vec<Vec<InstrVector>> = encoded
        .iter()
        .map(EncodedGraph::dense)
        .collect::<cfgx::Result<_>>()
        .map_err(|source| CliError::Artifact {
            file: store::ENCODED.into(),
            source,
        })?;
    let all: Vec<InstrVector> = vectors.iter().flatten().cloned().collect();
    let (ae, hist) = train_ae(&all, &ctx.cfg.ae)?;
    ctx.store.write(
        store::AE,
        checkpoint(ctx, ae.to_checkpoint(), serde_json::json!({ "stopped_early": hist.stopped_early }))
            .as_bytes(),
    )?;
    let rows: Vec<AeLossRow> = hist
        .train_loss
        .iter()
        .enumerate()
        .map(|(i, &l)| AeLossRow {
            epoch: i + 1,
            train_loss: l,
            val_loss: hist.val_loss.get(i).copied(),
        })
        .collect();
    ctx.store.write_csv(store::AE_LOSS, &rows)?;
    let with_features: Vec<String> = graphs
        .into_par_iter()
        .zip(vectors.par_iter())
        .map(|(g, v)| Ok(g.with_features(features(&ae, v))?.to_json()))
        .collect::<Result<_>>()?;
    ctx.store.write_lines(store::FEATURES, with_features)?;
    println!(
        "trained autoencoder on {} blocks for {} epochs, final loss {}",
        all.len(),
        hist.train_loss.len(),
        hist.train_loss.last().map_or("n/a".into(), |l| format!("{l:.6}"))
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

pub fn train_gnn_cmd(ctx: &Ctx) -> Result<()> {
    let graphs = graphs_from(&ctx.store, store::FEATURES, "train-ae")?;
    for g in &graphs {
        g.require_features()?;
    }
    let mut order: Vec<usize> = (0..graphs.len()).collect();
    order.shuffle(&mut rng(ctx.cfg.split_seed()));
    let n_test = (graphs.len() as f64 * ctx.cfg.dataset.test_fraction).round() as usize;
    let (mut test_idx, mut train_idx) = (order[..n_test].to_vec(), order[n_test..].to_vec());
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    let pick = |idx: &[usize]| idx.iter().map(|&i| graphs[i].clone()).collect::<Vec<_>>();
    let (train, test) = (pick(&train_idx), pick(&test_idx));
    let (p, metrics) = train_gnn(&train, &test, &ctx.cfg.gnn)?;
    ctx.store
        .write(store::GNN, checkpoint(ctx, p.to_checkpoint(), serde_json::json!({})).as_bytes())?;
    let ids = |idx: &[usize]| idx.iter().map(|&i| graphs[i].id().to_string()).collect();
    ctx.store.write_json(
        store::SPLIT,
        Split {
            train: ids(&train_idx),
            test: ids(&test_idx),
        },
    )?;
    ctx.store.write_csv(store::METRICS, &metrics)?;
    let (_, acc) = evaluate_split(&test, &p)?;
    println!(
        "trained GCN on {} graphs for {} epochs; test accuracy {acc:.4} on {} graphs",
        train.len(),
        ctx.cfg.gnn.epochs,
        test.len()
    );
    Ok(())
}

/// Graphs with features, the train/test split and the trained classifier.
pub struct Model {
    pub graphs: Vec<CfGraph>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub p: GcnParams,
}

impl Model {
    pub fn load(ctx: &Ctx) -> Result<Self> {
        let graphs = graphs_from(&ctx.store, store::FEATURES, "train-ae")?;
        for g in &graphs {
            g.require_features()?;
        }
        let split: Split = ctx.store.read_json(store::SPLIT, "train-gnn")?;
        let index: HashMap<&str, usize> = graphs.iter().enumerate().map(|(i, g)| (g.id(), i)).collect();
        let resolve = |ids: &[String]| {
            ids.iter()
                .map(|id| {
                    index.get(id.as_str()).copied().ok_or_else(|| {
                        CliError::format(store::SPLIT, format!("unknown graph id `{id}`; rerun `cfgx train-gnn`"))
                    })
                })
                .collect::<Result<Vec<_>>>()
        };
        let (train, test) = (resolve(&split.train)?, resolve(&split.test)?);
        let ck = read_checkpoint(ctx, store::GNN, "gcn", "train-gnn")?;
        let p = GcnParams::from_checkpoint(&ck).map_err(|source| CliError::Artifact {
            file: store::GNN.into(),
            source,
        })?;
        Ok(Model {
            graphs,
            train,
            test,
            p,
        })
    }

    pub fn subset(&self, idx: &[usize]) -> Vec<CfGraph> {
        idx.iter().map(|&i| self.graphs[i].clone()).collect()
    }
}

fn producer_of(method: Method) -> &'static str {
    if FUSED.contains(&method) {
        "fuse"
    } else {
        "explain"
    }
}

/// Per-graph scores of one explainer, aligned with `model.graphs`.
pub fn load_scores(ctx: &Ctx, model: &Model, method: Method) -> Result<Vec<Vec<f64>>> {
    let name = store::explanations(method.as_str());
    let lines = ctx.store.read_lines(&name, producer_of(method))?;
    let mut by_id: HashMap<String, Explanation> = lines
        .parse_json::<Explanation>()?
        .into_iter()
        .map(|e| (e.graph_id.clone(), e))
        .collect();
    model
        .graphs
        .iter()
        .map(|g| {
            let e = by_id
                .remove(g.id())
                .ok_or_else(|| CliError::format(&name, format!("no explanation for graph `{}`", g.id())))?;
            if e.method != method {
                return Err(CliError::format(&name, format!("expected method {method}, found {}", e.method)));
            }
            e.check(g).map_err(|source| CliError::Artifact {
                file: name.clone(),
                source,
            })?;
            Ok(e.scores)
        })
        .collect()
}

fn available(ctx: &Ctx, methods: &[Method]) -> Vec<Method> {
    methods
        .iter()
        .copied()
        .filter(|m| ctx.store.exists(&store::explanations(m.as_str())))
        .collect()
}

fn load_pg(ctx: &Ctx) -> Result<PgExplainerParams> {
    let ck = read_checkpoint(ctx, store::PGEXPLAINER, "pgexplainer", "explain --method pgexplainer")?;
    PgExplainerParams::from_checkpoint(&ck).map_err(|source| CliError::Artifact {
        file: store::PGEXPLAINER.into(),
        source,
    })
}

/// Explain one graph with a base method. `index` seeds GNNExplainer.
fn explain_one(
    ctx: &Ctx,
    method: Method,
    g: &CfGraph,
    index: usize,
    p: &GcnParams,
    psi: Option<&PgExplainerParams>,
) -> cfgx::Result<Explanation> {
    let x = g.require_features()?;
    match method {
        Method::Saliency => explain_saliency(g, x, p),
        Method::Gbp => explain_gbp(g, x, p),
        Method::Ig => explain_ig(g, x, p, ctx.cfg.explain.ig_steps),
        Method::GnnExplainer => {
            let mut c = ctx.cfg.explain.gnnexplainer.clone();
            c.seed = derive_seed(c.seed, index as u64);
            explain_gnnexplainer(g, x, p, &c)
        }
        Method::PgExplainer => explain_pgexplainer(g, x, psi.expect("PGExplainer parameters loaded"), p),
        _ => Err(cfgx::Error::InvalidArgument(format!("{method} is not a base explainer"))),
    }
}

#[derive(Serialize)]
struct PgLossRow {
    epoch: usize,
    loss: f64,
}

pub fn explain_cmd(ctx: &Ctx, method: Method) -> Result<()> {
    if !Method::EXPLAINERS.contains(&method) {
        return Err(CliError::Usage(format!("`{method}` is produced by `cfgx fuse`, not `explain`")));
    }
    let model = Model::load(ctx)?;
    let psi = if method == Method::PgExplainer {
        let train = model.subset(&model.train);
        let (psi, hist) = train_pgexplainer(&train, &model.p, &ctx.cfg.explain.pgexplainer)?;
        ctx.store
            .write(store::PGEXPLAINER, checkpoint(ctx, psi.to_checkpoint(), serde_json::json!({})).as_bytes())?;
        let rows: Vec<PgLossRow> = hist
            .epoch_loss
            .iter()
            .enumerate()
            .map(|(i, &loss)| PgLossRow { epoch: i + 1, loss })
            .collect();
        ctx.store.write_csv(store::PG_LOSS, &rows)?;
        Some(psi)
    } else {
        None
    };
    let expls: Vec<Explanation> = model
        .graphs
        .par_iter()
        .enumerate()
        .map(|(i, g)| explain_one(ctx, method, g, i, &model.p, psi.as_ref()))
        .collect::<cfgx::Result<_>>()?;
    ctx.store.write_lines(
        &store::explanations(method.as_str()),
        expls.iter().map(|e| serde_json::to_string(e).expect("explanation serializes")),
    )?;
    println!("explained {} graphs with {method}", expls.len());
    Ok(())
}

type Scores = Vec<Vec<f64>>;

/// Accuracy sweep over the graphs listed in `idx`.
fn sweep_subset(
    model: &Model,
    idx: &[usize],
    name: &str,
    scorer: &(dyn Fn(usize, f64, usize) -> cfgx::Result<Vec<f64>> + Sync),
    extraction: Extraction,
    sparsities: &[f64],
) -> Result<Vec<SweepRow>> {
    let set = model.subset(idx);
    let local = |i: usize, s: f64, k: usize| scorer(idx[i], s, k);
    Ok(accuracy_sweep(&set, &model.p, name, &local, extraction, sparsities)?)
}

/// Accuracy of every base explainer on the training split, used to pick
/// and weight the fused pair.
fn validation_table(
    model: &Model,
    base: &[(Method, Scores)],
    extraction: Extraction,
    sparsities: &[f64],
) -> Result<AccuracyTable> {
    let mut rows = BTreeMap::new();
    for (m, scores) in base {
        let f = |i: usize, _: f64, _: usize| Ok(scores[i].clone());
        let sweep = sweep_subset(model, &model.train, m.as_str(), &f, extraction, sparsities)?;
        rows.insert(m.to_string(), sweep.iter().map(|r| r.accuracy).collect());
    }
    Ok(AccuracyTable {
        sparsities: sparsities.to_vec(),
        rows,
    })
}

fn scores_of<'a>(base: &'a [(Method, Scores)], name: &str) -> Option<&'a Scores> {
    base.iter().find(|(m, _)| m.as_str() == name).map(|(_, s)| s)
}

fn load_base(ctx: &Ctx, model: &Model) -> Result<Vec<(Method, Scores)>> {
    let methods = available(ctx, &Method::EXPLAINERS);
    if methods.is_empty() {
        return Err(CliError::Missing {
            file: ctx.store.path("explanations/<method>.jsonl").display().to_string(),
            producer: "explain",
        });
    }
    methods
        .into_iter()
        .map(|m| Ok((m, load_scores(ctx, model, m)?)))
        .collect()
}

fn vote_members<'a>(ctx: &Ctx, base: &'a [(Method, Scores)]) -> Option<[&'a Scores; 3]> {
    let v = &ctx.cfg.fuse.vote;
    Some([scores_of(base, &v[0])?, scores_of(base, &v[1])?, scores_of(base, &v[2])?])
}

fn top_two(model: &Model, base: &[(Method, Scores)], extraction: Extraction, sps: &[f64]) -> Result<TopTwo> {
    let table = validation_table(model, base, extraction, sps)?;
    Ok(select_top2(&table)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Strategy {
    Rankfusion,
    Mean,
    Vote,
}

impl Strategy {
    pub fn method(self) -> Method {
        match self {
            Strategy::Rankfusion => Method::RankFusion,
            Strategy::Mean => Method::MeanAgg,
            Strategy::Vote => Method::RankVote,
        }
    }
}

/// Edgeless graphs have nothing to rank.
fn per_graph_k(g: &CfGraph, percent: f64) -> cfgx::Result<usize> {
    if g.num_edges() == 0 {
        Ok(0)
    } else {
        sparsity_to_k(g.num_edges(), percent)
    }
}

pub fn fuse_cmd(ctx: &Ctx, strategy: Strategy, percent: f64, extraction: Extraction) -> Result<()> {
    let model = Model::load(ctx)?;
    let base = load_base(ctx, &model)?;
    let method = strategy.method();
    let (scores, config): (Scores, serde_json::Value) = match strategy {
        Strategy::Rankfusion | Strategy::Mean => {
            let top = top_two(&model, &base, extraction, &ctx.cfg.eval.sparsities)?;
            let s1 = scores_of(&base, &top.first).expect("selected explainer loaded");
            let s2 = scores_of(&base, &top.second).expect("selected explainer loaded");
            if strategy == Strategy::Mean {
                let fused = s1.iter().zip(s2).map(|(a, b)| mean_aggregate(a, b)).collect::<cfgx::Result<_>>()?;
                (fused, serde_json::json!({ "inputs": [top.first, top.second] }))
            } else {
                let at = validation_table(
                    &model,
                    &[(method_named(&top.first), s1.clone()), (method_named(&top.second), s2.clone())],
                    extraction,
                    &[percent],
                )?;
                let (a1, a2) = (at.rows[&top.first][0], at.rows[&top.second][0]);
                let t = ctx.cfg.fuse.threshold;
                let fused = s1
                    .iter()
                    .zip(s2)
                    .map(|(a, b)| rankfusion_scores(a, b, a1, a2, t))
                    .collect::<cfgx::Result<_>>()?;
                let config = serde_json::json!({
                    "inputs": [top.first, top.second],
                    "a1": a1, "a2": a2, "threshold": t,
                    "sparsity": percent, "extraction": extraction,
                });
                (fused, config)
            }
        }
        Strategy::Vote => {
            let [s1, s2, s3] = vote_members(ctx, &base).ok_or_else(|| CliError::Missing {
                file: format!("explanations for {}", ctx.cfg.fuse.vote.join(", ")),
                producer: "explain",
            })?;
            let fused = model
                .graphs
                .iter()
                .enumerate()
                .map(|(i, g)| rank_vote_scores(&s1[i], &s2[i], &s3[i], per_graph_k(g, percent)?))
                .collect::<cfgx::Result<_>>()?;
            (fused, serde_json::json!({ "inputs": ctx.cfg.fuse.vote, "sparsity": percent }))
        }
    };
    let expls: Vec<Explanation> = model
        .graphs
        .iter()
        .zip(scores)
        .map(|(g, s)| Ok(Explanation::new(g, method, s)?.with_config(&config)))
        .collect::<Result<_>>()?;
    ctx.store.write_lines(
        &store::explanations(method.as_str()),
        expls.iter().map(|e| serde_json::to_string(e).expect("explanation serializes")),
    )?;
    println!("fused {} explanations with {method} ({config})", expls.len());
    Ok(())
}

fn method_named(name: &str) -> Method {
    name.parse().expect("explainer names come from Method")
}

fn sparsity_tag(percent: f64) -> String {
    format!("{percent}").replace('.', "_")
}

pub fn extract_cmd(ctx: &Ctx, method: Method, extraction: Extraction, percent: f64, dot: &[String]) -> Result<()> {
    let model = Model::load(ctx)?;
    let scores = load_scores(ctx, &model, method)?;
    let scorer = |i: usize, _: f64, _: usize| Ok(scores[i].clone());
    let selections: Vec<cfgx::graph::EdgeSelection> = model
        .graphs
        .par_iter()
        .enumerate()
        .map(|(i, g)| select(g, i, &scorer, extraction, percent))
        .collect::<cfgx::Result<_>>()?;
    let tag = format!("{method}_{extraction}_{}", sparsity_tag(percent));
    ctx.store.write_lines(
        &format!("selections/{tag}.jsonl"),
        model.graphs.iter().zip(&selections).map(|(g, s)| {
            serde_json::to_string(&SelectionRecord::new(g, s)).expect("selection serializes")
        }),
    )?;
    for id in dot {
        let i = model
            .graphs
            .iter()
            .position(|g| g.id() == id)
            .ok_or_else(|| CliError::Usage(format!("no graph with id `{id}`")))?;
        let body = format!(
            "// cfgx extract config_hash={} seed={}\n{}",
            ctx.store.meta().config_hash,
            ctx.store.meta().seed,
            model.graphs[i].to_dot(Some(&selections[i]))
        );
        ctx.store.write(&format!("dot/{id}_{tag}.dot"), body.as_bytes())?;
    }
    let rows = sweep_subset(&model, &model.test, method.as_str(), &scorer, extraction, &[percent])?;
    println!(
        "extracted {} subgraphs ({extraction}, {percent}% of edges); classifier accuracy on the test subgraphs {:.4}",
        selections.len(),
        rows[0].accuracy
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionChoice {
    pub extraction: Extraction,
    pub first: String,
    pub second: String,
    pub validation: AccuracyTable,
}

pub fn sweep_cmd(ctx: &Ctx) -> Result<()> {
    let model = Model::load(ctx)?;
    let base = load_base(ctx, &model)?;
    let sps = &ctx.cfg.eval.sparsities;
    let mut rows = Vec::new();
    for (m, scores) in &base {
        let f = |i: usize, _: f64, _: usize| Ok(scores[i].clone());
        for ex in Extraction::ALL {
            rows.extend(sweep_subset(&model, &model.test, m.as_str(), &f, ex, sps)?);
        }
    }
    let mut choices = Vec::new();
    if base.len() >= 2 {
        for ex in Extraction::ALL {
            let table = validation_table(&model, &base, ex, sps)?;
            let top = select_top2(&table)?;
            let s1 = scores_of(&base, &top.first).expect("selected explainer loaded");
            let s2 = scores_of(&base, &top.second).expect("selected explainer loaded");
            let t = ctx.cfg.fuse.threshold;
            let rf = |i: usize, percent: f64, _: usize| {
                let j = sps.iter().position(|s| *s == percent).expect("sparsity on the grid");
                rankfusion_scores(&s1[i], &s2[i], top.a1[j], top.a2[j], t)
            };
            rows.extend(sweep_subset(&model, &model.test, Method::RankFusion.as_str(), &rf, ex, sps)?);
            let mean = |i: usize, _: f64, _: usize| mean_aggregate(&s1[i], &s2[i]);
            rows.extend(sweep_subset(&model, &model.test, Method::MeanAgg.as_str(), &mean, ex, sps)?);
            if let Some([v1, v2, v3]) = vote_members(ctx, &base) {
                let vote = |i: usize, _: f64, k: usize| rank_vote_scores(&v1[i], &v2[i], &v3[i], k);
                rows.extend(sweep_subset(&model, &model.test, Method::RankVote.as_str(), &vote, ex, sps)?);
            }
            choices.push(FusionChoice {
                extraction: ex,
                first: top.first,
                second: top.second,
                validation: table,
            });
        }
        ctx.store.write_json(store::FUSION, serde_json::json!({ "choices": choices }))?;
    }
    ctx.store.write_csv(store::SWEEP, &rows)?;
    println!("wrote {} sweep rows for {} explainers", rows.len(), base.len() + 3 * usize::from(base.len() >= 2));
    Ok(())
}

fn explainer_list(ctx: &Ctx, requested: Option<Method>, candidates: &[Method]) -> Result<Vec<Method>> {
    match requested {
        Some(m) => Ok(vec![m]),
        None => {
            let found = available(ctx, candidates);
            if found.is_empty() {
                Err(CliError::Missing {
                    file: ctx.store.path("explanations/<method>.jsonl").display().to_string(),
                    producer: "explain",
                })
            } else {
                Ok(found)
            }
        }
    }
}

pub fn fidelity_cmd(
    ctx: &Ctx,
    explainer: Option<Method>,
    extraction: Option<Extraction>,
    percent: Option<f64>,
) -> Result<()> {
    let model = Model::load(ctx)?;
    let all: Vec<Method> = Method::EXPLAINERS.iter().chain(&FUSED).copied().collect();
    let methods = explainer_list(ctx, explainer, &all)?;
    let extractions = extraction.map_or(Extraction::ALL.to_vec(), |e| vec![e]);
    let sps = percent.map_or(ctx.cfg.eval.sparsities.clone(), |p| vec![p]);
    let test = model.subset(&model.test);
    let mut records: Vec<FidelityRecord> = Vec::new();
    for m in methods {
        let scores = load_scores(ctx, &model, m)?;
        let f = |i: usize, _: f64, _: usize| Ok(scores[model.test[i]].clone());
        for &ex in &extractions {
            for &s in &sps {
                records.extend(fidelity(&test, &model.p, m.as_str(), &f, ex, s)?.records);
            }
        }
    }
    ctx.store.write_csv(store::FIDELITY, &records)?;
    println!("wrote {} fidelity records", records.len());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub explainer: String,
    pub extraction: Extraction,
    pub sparsity: f64,
    pub graph_id: String,
    pub tau: f64,
    pub n_valid: usize,
    pub delta_plus: Option<f64>,
    pub delta_minus: Option<f64>,
}

impl ConsistencyRow {
    fn new(explainer: Method, extraction: Extraction, sparsity: f64, r: ConsistencyRecord) -> Self {
        ConsistencyRow {
            explainer: explainer.to_string(),
            extraction,
            sparsity,
            graph_id: r.graph_id,
            tau: r.tau,
            n_valid: r.n_valid,
            delta_plus: r.delta_plus,
            delta_minus: r.delta_minus,
        }
    }
}

pub fn consistency_cmd(
    ctx: &Ctx,
    explainer: Option<Method>,
    extraction: Option<Extraction>,
    percent: Option<f64>,
) -> Result<()> {
    if let Some(m) = explainer.filter(|m| !Method::EXPLAINERS.contains(m)) {
        return Err(CliError::Usage(format!("consistency re-runs the explainer; `{m}` is not a base explainer")));
    }
    let model = Model::load(ctx)?;
    let methods = explainer_list(ctx, explainer, &Method::EXPLAINERS)?;
    let extractions = extraction.map_or(Extraction::ALL.to_vec(), |e| vec![e]);
    let sps = percent.map_or(ctx.cfg.eval.consistency_sparsities.clone(), |p| vec![p]);
    let mut rows = Vec::new();
    for m in methods {
        let psi = if m == Method::PgExplainer { Some(load_pg(ctx)?) } else { None };
        for &ex in &extractions {
            for &s in &sps {
                let per_graph: Vec<Vec<ConsistencyRecord>> = model
                    .test
                    .par_iter()
                    .map(|&gi| {
                        let g = &model.graphs[gi];
                        let f = |h: &CfGraph| Ok(explain_one(ctx, m, h, gi, &model.p, psi.as_ref())?.scores);
                        let seed = perturbation_seed(ctx.cfg.perturbation_seed(), gi);
                        consistency(g, &f, &model.p, ex, s, &ctx.cfg.eval.taus, &ctx.cfg.eval.perturbation, seed)
                    })
                    .collect::<cfgx::Result<_>>()?;
                rows.extend(per_graph.into_iter().flatten().map(|r| ConsistencyRow::new(m, ex, s, r)));
            }
        }
    }
    ctx.store.write_csv(store::CONSISTENCY, &rows)?;
    println!("wrote {} consistency records", rows.len());
    Ok(())
}

pub fn report_cmd(ctx: &Ctx) -> Result<()> {
    let sweep: Vec<SweepRow> = ctx.store.read_csv(store::SWEEP, "sweep")?;
    let fid: Option<Vec<FidelityRecord>> = if ctx.store.exists(store::FIDELITY) {
        Some(ctx.store.read_csv(store::FIDELITY, "fidelity")?)
    } else {
        None
    };
    let written = report::write_all(&ctx.store, &sweep, fid.as_deref())?;
    println!("wrote {written} plots to {}", ctx.store.path("report").display());
    Ok(())
}
