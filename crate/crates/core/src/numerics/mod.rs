//! Dense tensors, reverse-mode differentiation, Adam and checkpoints.

mod adam;
mod checkpoint;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use tape::{Adjacency, Grads, ReluMode, Tape, Var};
pub use tensor::{cosine, sigmoid, softmax, Tensor};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeded generator used everywhere randomness is needed.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mix a base seed with a stream index so independent jobs draw from
/// independent sequences.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn finite_difference(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        out.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    out
}

/// Largest elementwise relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
