//! Reverse-mode differentiation over a small set of dense primitives.
//!
//! A [`Tape`] records every value produced while evaluating a program; calling
//! [`Tape::backward`] on a scalar output returns exact gradients for every
//! recorded value. The ReLU backward honours [`ReluMode::Guided`], which
//! additionally drops negative upstream gradients.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::tensor::{sigmoid, softmax, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReluMode {
    #[default]
    Standard,
    Guided,
}

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Symmetric weighted adjacency with unit self-loops, normalized as
/// `D^-1/2 A D^-1/2` inside [`Tape::propagate`].
///
/// Each weighted edge `(u, v)` with `u != v` contributes its weight to both
/// `A[u][v]` and `A[v][u]`; a weighted self-loop contributes once to `A[u][u]`.
/// Degrees are weighted row sums, so they include the unit self-loop.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
}

impl Adjacency {
    pub fn new(num_nodes: usize, edges: Vec<(usize, usize)>) -> Self {
        debug_assert!(edges.iter().all(|&(u, v)| u < num_nodes && v < num_nodes));
        Adjacency { num_nodes, edges }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Matrix entries as `(row, col, edge)`; `None` marks the unit self-loop.
    fn entries(&self) -> impl Iterator<Item = (usize, usize, Option<usize>)> + '_ {
        let selfs = (0..self.num_nodes).map(|i| (i, i, None));
        let edges = self.edges.iter().enumerate().flat_map(|(e, &(u, v))| {
            let fwd = Some((u, v, Some(e)));
            let back = (u != v).then_some((v, u, Some(e)));
            fwd.into_iter().chain(back)
        });
        selfs.chain(edges)
    }

    fn weight(&self, w: &[f64], edge: Option<usize>) -> f64 {
        edge.map_or(1.0, |e| w[e])
    }

    fn degrees(&self, w: &[f64]) -> Vec<f64> {
        let mut d = vec![0.0; self.num_nodes];
        for (i, _, e) in self.entries() {
            d[i] += self.weight(w, e);
        }
        d
    }

    /// Dense normalized matrix, for tests and inspection.
    pub fn normalized_dense(&self, w: &[f64]) -> Tensor {
        let d = self.degrees(w);
        let mut out = Tensor::zeros(self.num_nodes, self.num_nodes);
        for (i, j, e) in self.entries() {
            let v = out.get(i, j) + self.weight(w, e) / (d[i] * d[j]).sqrt();
            out.set(i, j, v);
        }
        out
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    /// Same shape, or a `1 x C` right operand broadcast over rows.
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    Transpose(usize),
    ConcatCols(usize, usize),
    GatherRows(usize, Vec<usize>),
    /// Mean over rows of the soft-target cross-entropy; keeps the softmax.
    SoftmaxCe {
        logits: usize,
        target: Tensor,
        probs: Tensor,
    },
    Propagate {
        weights: usize,
        h: usize,
        adj: Arc<Adjacency>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    /// Gradient for `v`; zeros if nothing flowed into it.
    pub fn get(&self, v: Var, tape: &Tape) -> Tensor {
        self.0[v.0].clone().unwrap_or_else(|| {
            let t = &tape.nodes[v.0].value;
            Tensor::zeros(t.rows(), t.cols())
        })
    }

    pub fn take(&mut self, v: Var, tape: &Tape) -> Tensor {
        self.0[v.0].take().unwrap_or_else(|| {
            let t = &tape.nodes[v.0].value;
            Tensor::zeros(t.rows(), t.cols())
        })
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a.0, b.0)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let v = if x.shape() == y.shape() {
            x.zip_map(y, "add", |p, q| p + q)?
        } else if y.rows() == 1 && y.cols() == x.cols() {
            let mut out = x.clone();
            for r in 0..out.rows() {
                for (o, b) in out.row_mut(r).iter_mut().zip(y.data()) {
                    *o += b;
                }
            }
            out
        } else {
            return Err(Error::Shape {
                op: "add",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        };
        Ok(self.push(v, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "sub", |p, q| p - q)?;
        Ok(self.push(v, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "mul", |p, q| p * q)?;
        Ok(self.push(v, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a.0))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a.0))
    }

    /// Column means over rows, `R x C -> 1 x C`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_rows();
        self.push(v, Op::MeanRows(a.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a.0))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rows() != y.rows() {
            return Err(Error::Shape {
                op: "concat_cols",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(x.rows(), x.cols() + y.cols());
        for r in 0..x.rows() {
            let row = out.row_mut(r);
            row[..x.cols()].copy_from_slice(x.row(r));
            row[x.cols()..].copy_from_slice(y.row(r));
        }
        Ok(self.push(out, Op::ConcatCols(a.0, b.0)))
    }

    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= x.rows()) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: x.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let v = x.select_rows(&rows);
        Ok(self.push(v, Op::GatherRows(a.0, rows)))
    }

    /// Mean over rows of `-sum_c target[r][c] * log softmax(logits[r])[c]`.
    pub fn softmax_ce(&mut self, logits: Var, target: Tensor) -> Result<Var> {
        let z = self.value(logits);
        z.same_shape(&target, "softmax_ce")?;
        let mut probs = Tensor::zeros(z.rows(), z.cols());
        let mut loss = 0.0;
        for r in 0..z.rows() {
            let p = softmax(z.row(r));
            let m = z.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.row(r).iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for c in 0..z.cols() {
                let t = target.get(r, c);
                if t != 0.0 {
                    loss -= t * (z.get(r, c) - lse);
                }
            }
            probs.row_mut(r).copy_from_slice(&p);
        }
        let rows = z.rows().max(1) as f64;
        Ok(self.push(
            Tensor::scalar(loss / rows),
            Op::SoftmaxCe {
                logits: logits.0,
                target,
                probs,
            },
        ))
    }

    /// Normalized graph propagation `D^-1/2 A(w) D^-1/2 H` where `w` is a
    /// `1 x |E|` vector of edge weights.
    pub fn propagate(&mut self, weights: Var, h: Var, adj: Arc<Adjacency>) -> Result<Var> {
        let w = self.value(weights);
        let x = self.value(h);
        if w.rows() != 1 || w.cols() != adj.num_edges() || x.rows() != adj.num_nodes() {
            return Err(Error::Shape {
                op: "propagate",
                lhs: vec![w.rows(), w.cols(), x.rows()],
                rhs: vec![1, adj.num_edges(), adj.num_nodes()],
            });
        }
        let wd = w.data();
        let s: Vec<f64> = adj.degrees(wd).iter().map(|d| 1.0 / d.sqrt()).collect();
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for (i, j, e) in adj.entries() {
            let c = s[i] * adj.weight(wd, e) * s[j];
            if c == 0.0 {
                continue;
            }
            let src = x.row(j).to_vec();
            for (o, v) in out.row_mut(i).iter_mut().zip(&src) {
                *o += c * v;
            }
        }
        Ok(self.push(
            out,
            Op::Propagate {
                weights: weights.0,
                h: h.0,
                adj,
            },
        ))
    }

    /// Gradients of the scalar `out` with respect to every recorded value.
    pub fn backward(&self, out: Var, relu_mode: ReluMode) -> Grads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed = &self.nodes[out.0].value;
        grads[out.0] = Some(Tensor::full(seed.rows(), seed.cols(), 1.0));

        fn acc(grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
            match &mut grads[i] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    acc(&mut grads, *a, g.matmul_t(bv).expect("matmul grad"));
                    acc(&mut grads, *b, av.t_matmul(&g).expect("matmul grad"));
                }
                Op::Add(a, b) => {
                    let bv = &self.nodes[*b].value;
                    if bv.shape() == g.shape() {
                        acc(&mut grads, *b, g.clone());
                    } else {
                        let col_sums = g.mean_rows().scale(g.rows() as f64);
                        acc(&mut grads, *b, col_sums);
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.scale(-1.0));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    acc(&mut grads, *a, g.zip_map(bv, "mul", |x, y| x * y).unwrap());
                    acc(&mut grads, *b, g.zip_map(av, "mul", |x, y| x * y).unwrap());
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.scale(*c)),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Relu(a) => {
                    let x = &self.nodes[*a].value;
                    let gi = g
                        .zip_map(x, "relu", |gv, xv| {
                            let open = xv > 0.0 && (relu_mode == ReluMode::Standard || gv > 0.0);
                            if open {
                                gv
                            } else {
                                0.0
                            }
                        })
                        .unwrap();
                    acc(&mut grads, *a, gi);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    acc(
                        &mut grads,
                        *a,
                        g.zip_map(y, "sigmoid", |gv, yv| gv * yv * (1.0 - yv)).unwrap(),
                    );
                }
                Op::Log(a) => {
                    let x = &self.nodes[*a].value;
                    acc(&mut grads, *a, g.zip_map(x, "log", |gv, xv| gv / xv).unwrap());
                }
                Op::Sum(a) => {
                    let x = &self.nodes[*a].value;
                    acc(&mut grads, *a, Tensor::full(x.rows(), x.cols(), g.data()[0]));
                }
                Op::Mean(a) => {
                    let x = &self.nodes[*a].value;
                    let n = x.len().max(1) as f64;
                    acc(
                        &mut grads,
                        *a,
                        Tensor::full(x.rows(), x.cols(), g.data()[0] / n),
                    );
                }
                Op::MeanRows(a) => {
                    let x = &self.nodes[*a].value;
                    let mut gi = Tensor::zeros(x.rows(), x.cols());
                    let n = x.rows().max(1) as f64;
                    for r in 0..x.rows() {
                        for (o, gv) in gi.row_mut(r).iter_mut().zip(g.data()) {
                            *o = gv / n;
                        }
                    }
                    acc(&mut grads, *a, gi);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[*a].value.cols();
                    let cb = self.nodes[*b].value.cols();
                    let mut ga = Tensor::zeros(g.rows(), ca);
                    let mut gb = Tensor::zeros(g.rows(), cb);
                    for r in 0..g.rows() {
                        ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                        gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::GatherRows(a, rows) => {
                    let x = &self.nodes[*a].value;
                    let mut gi = Tensor::zeros(x.rows(), x.cols());
                    for (k, &r) in rows.iter().enumerate() {
                        for (o, gv) in gi.row_mut(r).iter_mut().zip(g.row(k)) {
                            *o += gv;
                        }
                    }
                    acc(&mut grads, *a, gi);
                }
                Op::SoftmaxCe {
                    logits,
                    target,
                    probs,
                } => {
                    let scale = g.data()[0] / probs.rows().max(1) as f64;
                    let gi = probs
                        .zip_map(target, "softmax_ce", |p, t| (p - t) * scale)
                        .unwrap();
                    acc(&mut grads, *logits, gi);
                }
                Op::Propagate { weights, h, adj } => {
                    let (gw, gh) = propagate_backward(
                        adj,
                        self.nodes[*weights].value.data(),
                        &self.nodes[*h].value,
                        &g,
                    );
                    acc(&mut grads, *weights, gw);
                    acc(&mut grads, *h, gh);
                }
            }
        }
        Grads(grads)
    }
}

fn propagate_backward(adj: &Adjacency, w: &[f64], h: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let d = adj.degrees(w);
    let s: Vec<f64> = d.iter().map(|x| 1.0 / x.sqrt()).collect();
    let mut gh = Tensor::zeros(h.rows(), h.cols());
    let mut gw = vec![0.0; w.len()];
    // dL/ds per node, and dL/dA per entry folded straight into its edge
    let mut gs = vec![0.0; adj.num_nodes()];
    let mut entry_terms = Vec::new();
    for (i, j, e) in adj.entries() {
        let a = adj.weight(w, e);
        let p: f64 = g.row(i).iter().zip(h.row(j)).map(|(x, y)| x * y).sum();
        let c = s[i] * a * s[j];
        if c != 0.0 {
            let gi = g.row(i).to_vec();
            for (o, v) in gh.row_mut(j).iter_mut().zip(&gi) {
                *o += c * v;
            }
        }
        gs[i] += a * s[j] * p;
        gs[j] += s[i] * a * p;
        if let Some(e) = e {
            gw[e] += s[i] * s[j] * p;
            entry_terms.push((i, e));
        }
    }
    // d s / d d = -1/2 d^-3/2
    let gd: Vec<f64> = gs
        .iter()
        .zip(&d)
        .map(|(g, dv)| -0.5 * g * dv.powf(-1.5))
        .collect();
    for (row, e) in entry_terms {
        gw[e] += gd[row];
    }
    (Tensor::row_vector(gw), gh)
}
