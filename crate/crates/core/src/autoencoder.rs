//! Symmetric autoencoder compressing 439-dim node vectors to 64-dim codes.
//!
//! Encoder 439 -> 256 -> 128 -> 64 and decoder 64 -> 128 -> 256 -> 439, with a
//! ReLU after every layer. The loss is the per-sample squared reconstruction
//! error averaged over the batch.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encode::{InstrVector, INSTR_DIM};
use crate::error::{Error, Result};
use crate::numerics::{rng, AdamConfig, AdamState, Checkpoint, ReluMode, Tape, Tensor, Var};

pub const CODE_DIM: usize = 64;
pub const LAYER_DIMS: [usize; 7] = [INSTR_DIM, 256, 128, CODE_DIM, 128, 256, INSTR_DIM];

#[derive(Debug, Clone, PartialEq)]
pub struct AeParams {
    /// `(weight, bias)` per layer; layers 0..3 encode, 3..6 decode.
    pub layers: Vec<(Tensor, Tensor)>,
}

impl AeParams {
    pub fn init(seed: u64) -> Self {
        let mut r = rng(seed);
        let layers = LAYER_DIMS
            .windows(2)
            .map(|w| (Tensor::glorot(w[0], w[1], &mut r), Tensor::zeros(1, w[1])))
            .collect();
        AeParams { layers }
    }

    fn flat(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [w.clone(), b.clone()])
            .collect()
    }

    fn from_flat(flat: Vec<Tensor>) -> Self {
        let mut it = flat.into_iter();
        let mut layers = Vec::new();
        while let (Some(w), Some(b)) = (it.next(), it.next()) {
            layers.push((w, b));
        }
        AeParams { layers }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("autoencoder");
        for (i, (w, b)) in self.layers.iter().enumerate() {
            ck.push(format!("w{i}"), w);
            ck.push(format!("b{i}"), b);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let layers = LAYER_DIMS
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                Ok((
                    ck.get_shaped(&format!("w{i}"), w[0], w[1])?,
                    ck.get_shaped(&format!("b{i}"), 1, w[1])?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(AeParams { layers })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Randomly subsample the training vectors to at most this many.
    pub max_samples: Option<usize>,
    /// Fraction held out for the plateau check (ignored below 10 samples).
    pub val_fraction: f64,
    pub plateau_threshold: f64,
    /// Stop once validation MSE stayed below the threshold this many epochs.
    pub plateau_window: usize,
    pub seed: u64,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig {
            epochs: 5000,
            lr: 1e-4,
            batch_size: 256,
            max_samples: None,
            val_fraction: 0.1,
            plateau_threshold: 1e-4,
            plateau_window: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AeHistory {
    /// Mean mini-batch training loss per epoch.
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub stopped_early: bool,
}

fn stack(vectors: &[&[f64]], dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(vectors.len() * dim);
    for v in vectors {
        data.extend_from_slice(v);
    }
    Tensor::from_vec(vectors.len(), dim, data).expect("uniform rows")
}

/// Record the network on a tape; returns (leaf vars, code, reconstruction).
fn forward_on_tape(t: &mut Tape, p: &AeParams, x: Var) -> Result<(Vec<Var>, Var, Var)> {
    let mut leaves = Vec::new();
    let mut h = x;
    let mut code = x;
    for (i, (w, b)) in p.layers.iter().enumerate() {
        let wv = t.leaf(w.clone());
        let bv = t.leaf(b.clone());
        leaves.extend([wv, bv]);
        let z = t.matmul(h, wv)?;
        let z = t.add(z, bv)?;
        h = t.relu(z);
        if i == 2 {
            code = h;
        }
    }
    Ok((leaves, code, h))
}

/// Mean over rows of the squared reconstruction error, with gradients.
pub fn reconstruction_loss(p: &AeParams, batch: &Tensor) -> Result<(f64, AeParams)> {
    let mut t = Tape::new();
    let x = t.leaf(batch.clone());
    let (leaves, _, recon) = forward_on_tape(&mut t, p, x)?;
    let target = t.leaf(batch.clone());
    let d = t.sub(recon, target)?;
    let sq = t.mul(d, d)?;
    let s = t.sum(sq);
    let loss = t.scale(s, 1.0 / batch.rows().max(1) as f64);
    let mut g = t.backward(loss, ReluMode::Standard);
    let grads = leaves.iter().map(|&v| g.take(v, &t)).collect();
    Ok((t.scalar(loss), AeParams::from_flat(grads)))
}

/// Reconstruction MSE without gradients.
pub fn evaluate_mse(p: &AeParams, batch: &Tensor) -> f64 {
    let recon = decode(p, &encode_batch(p, batch));
    let n = batch.rows().max(1) as f64;
    batch
        .data()
        .iter()
        .zip(recon.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n
}

fn dense_relu(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut z = x.matmul(w).expect("layer shapes");
    for r in 0..z.rows() {
        for (o, bv) in z.row_mut(r).iter_mut().zip(b.data()) {
            *o = (*o + bv).max(0.0);
        }
    }
    z
}

/// Encode a batch of 439-dim rows to 64-dim codes.
pub fn encode_batch(p: &AeParams, x: &Tensor) -> Tensor {
    p.layers[..3]
        .iter()
        .fold(x.clone(), |h, (w, b)| dense_relu(&h, w, b))
}

pub fn decode(p: &AeParams, codes: &Tensor) -> Tensor {
    p.layers[3..]
        .iter()
        .fold(codes.clone(), |h, (w, b)| dense_relu(&h, w, b))
}

pub fn ae_encode(p: &AeParams, v: &InstrVector) -> Vec<f64> {
    encode_batch(p, &Tensor::row_vector(v.as_slice().to_vec())).into_data()
}

pub fn train_ae(dataset: &[InstrVector], cfg: &AeConfig) -> Result<(AeParams, AeHistory)> {
    if dataset.is_empty() {
        return Err(Error::invalid("autoencoder training set is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let mut r = rng(cfg.seed);
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut r);
    if let Some(m) = cfg.max_samples {
        idx.truncate(m.max(1));
    }
    let (train_idx, val_idx) = if idx.len() >= 10 && cfg.val_fraction > 0.0 {
        let n_val = ((idx.len() as f64 * cfg.val_fraction).round() as usize).clamp(1, idx.len() - 1);
        let (v, t) = idx.split_at(n_val);
        (t.to_vec(), v.to_vec())
    } else {
        (idx.clone(), idx)
    };
    let val = stack(
        &val_idx.iter().map(|&i| dataset[i].as_slice()).collect::<Vec<_>>(),
        INSTR_DIM,
    );

    let mut params = AeParams::init(cfg.seed);
    let mut flat = params.flat();
    let mut adam = AdamState::new(AdamConfig::new(cfg.lr), &flat);
    let mut history = AeHistory {
        train_loss: Vec::with_capacity(cfg.epochs),
        val_loss: Vec::with_capacity(cfg.epochs),
        stopped_early: false,
    };
    let mut order = train_idx;
    let mut below = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = stack(
                &chunk.iter().map(|&i| dataset[i].as_slice()).collect::<Vec<_>>(),
                INSTR_DIM,
            );
            let (loss, grads) = reconstruction_loss(&params, &batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("autoencoder loss at epoch {epoch}")));
            }
            adam.step(&mut flat, &grads.flat())?;
            params = AeParams::from_flat(flat.clone());
            total += loss;
            batches += 1;
        }
        history.train_loss.push(total / batches as f64);
        let v = evaluate_mse(&params, &val);
        history.val_loss.push(v);
        below = if v < cfg.plateau_threshold { below + 1 } else { 0 };
        if cfg.plateau_window > 0 && below >= cfg.plateau_window {
            history.stopped_early = true;
            log::info!("autoencoder: validation MSE plateaued at epoch {epoch}");
            break;
        }
    }
    Ok((params, history))
}
