//! Workload builders shared by the kernel benchmarks.

use atrc::autodiff::{Tape, Var};
use atrc::rng::keyed;
use atrc::Tensor;
use rand::Rng;

/// Uniform `[lo, hi)` tensor from a keyed stream.
pub fn uniform(shape: &[usize], lo: f32, hi: f32, seed: u64) -> Tensor<f32> {
    let mut rng = keyed(seed, 0, 0);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Sums `out` and runs the backward pass so a benchmark covers both
/// directions of the operator under test.
pub fn backward_sum(tape: &mut Tape<f32>, out: Var) {
    let loss = tape.sum(out);
    tape.backward(loss).expect("backward runs");
}

/// Token inputs `[B, L, d]` for the attention benchmarks. `q` and `k` are
/// non-negative as the linearized kernel requires.
pub struct TokenInputs {
    pub q: Tensor<f32>,
    pub k: Tensor<f32>,
    pub v: Tensor<f32>,
}

impl TokenInputs {
    pub fn new(batch: usize, tokens: usize, d: usize) -> Self {
        TokenInputs {
            q: uniform(&[batch, tokens, d], 0.0, 1.0, 1),
            k: uniform(&[batch, tokens, d], 0.0, 1.0, 2),
            v: uniform(&[batch, tokens, d], -1.0, 1.0, 3),
        }
    }

    pub fn leaves(&self, tape: &mut Tape<f32>) -> (Var, Var, Var) {
        (tape.leaf(self.q.clone()), tape.leaf(self.k.clone()), tape.leaf(self.v.clone()))
    }
}
