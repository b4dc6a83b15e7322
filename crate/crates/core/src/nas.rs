//! Differentiable context-type search: Gumbel-Softmax relaxation, annealed
//! temperature and entropy weight, per-block freezing and cross-run voting.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::contexts::ContextType;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const K: usize = ContextType::COUNT;

/// Linear schedules and thresholds of the search phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSchedule {
    pub total_iters: usize,
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub omega_h_start: f64,
    pub omega_h_end: f64,
    pub freeze_threshold: f64,
    pub alpha_lr: f64,
}

impl Default for SearchSchedule {
    fn default() -> Self {
        SearchSchedule {
            total_iters: 2000,
            lambda_start: 1.0,
            lambda_end: 0.05,
            omega_h_start: -0.02,
            omega_h_end: 0.06,
            freeze_threshold: 0.3,
            alpha_lr: 0.0005,
        }
    }
}

impl SearchSchedule {
    fn lerp(&self, iter: usize, a: f64, b: f64) -> Result<f64> {
        if self.total_iters == 0 || iter > self.total_iters {
            return Err(Error::Search(format!("iteration {iter} outside schedule of {}", self.total_iters)));
        }
        let t = iter as f64 / self.total_iters as f64;
        Ok(a + (b - a) * t)
    }

    /// Gumbel-Softmax temperature.
    pub fn lambda_at(&self, iter: usize) -> Result<f64> {
        self.lerp(iter, self.lambda_start, self.lambda_end)
    }

    /// Entropy regularization weight.
    pub fn omega_h_at(&self, iter: usize) -> Result<f64> {
        self.lerp(iter, self.omega_h_start, self.omega_h_end)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Standard Gumbel draws `-ln(-ln U)` with `U` uniform on the open interval (0, 1).
pub fn gumbel_noise<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u = loop {
                let u: f64 = rng.gen();
                if u > 0.0 {
                    break u;
                }
            };
            -(-u.ln()).ln()
        })
        .collect()
}

/// `softmax((alpha + g) / lambda)`.
pub fn gumbel_softmax_sample(alpha: &[f64], noise: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(lambda > 0.0) {
        return Err(Error::Search(format!("temperature must be positive, got {lambda}")));
    }
    let z: Vec<f64> = alpha.iter().zip(noise).map(|(a, g)| (a + g) / lambda).collect();
    Ok(softmax(&z))
}

/// Differentiable Gumbel-Softmax over `alpha` of shape `[blocks, 5]`; the
/// noise is fixed so gradients flow through the reparameterization.
pub fn gumbel_softmax_tape<T: Real>(tape: &mut Tape<T>, alpha: Var, noise: &[f64], lambda: f64) -> Result<Var> {
    if !(lambda > 0.0) {
        return Err(Error::Search(format!("temperature must be positive, got {lambda}")));
    }
    let shape = tape.shape(alpha).to_vec();
    let g = Tensor::new(&shape, noise.iter().map(|&x| T::from_f64(x)).collect())?;
    let g = tape.constant(g);
    let z = tape.add(alpha, g)?;
    let z = tape.mul_scalar(z, T::from_f64(1.0 / lambda));
    Ok(tape.softmax(z, 1)?)
}

/// Mean entropy of `softmax(alpha_j)` over unfrozen blocks (0 if all are frozen).
pub fn entropy_regularizer(alpha: &[f64], frozen: &[Option<ContextType>]) -> f64 {
    let active: Vec<usize> = (0..frozen.len()).filter(|&j| frozen[j].is_none()).collect();
    if active.is_empty() {
        return 0.0;
    }
    active.iter().map(|&j| entropy(&softmax(&alpha[j * K..(j + 1) * K]))).sum::<f64>() / active.len() as f64
}

/// Tape version of [`entropy_regularizer`] for `alpha` of shape `[blocks, 5]`.
pub fn entropy_regularizer_tape<T: Real>(
    tape: &mut Tape<T>,
    alpha: Var,
    frozen: &[Option<ContextType>],
) -> Result<Var> {
    let active = frozen.iter().filter(|f| f.is_none()).count();
    let p = tape.softmax(alpha, 1)?;
    let logp = tape.log_softmax(alpha, 1)?;
    let plogp = tape.mul(p, logp)?;
    let scale = if active == 0 { 0.0 } else { -1.0 / active as f64 };
    let mask = Tensor::from_fn(&[frozen.len(), 1], |j| T::from_f64(if frozen[j].is_none() { scale } else { 0.0 }));
    let mask = tape.constant(mask);
    let weighted = tape.mul(plogp, mask)?;
    Ok(tape.sum(weighted))
}

/// Freeze decision on the probability gap between the two most likely candidates.
pub fn freeze_check(alpha_j: &[f64], threshold: f64) -> Option<ContextType> {
    let p = softmax(alpha_j);
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    if p[order[0]] - p[order[1]] > threshold {
        ContextType::from_index(order[0])
    } else {
        None
    }
}

/// Per-block plurality vote; ties go to the earliest context type.
pub fn vote_final_config(runs: &[Vec<ContextType>]) -> Result<Vec<ContextType>> {
    Ok(vote_tally(runs)?
        .iter()
        .map(|counts| {
            let best = (0..K).fold(0, |b, i| if counts[i] > counts[b] { i } else { b });
            ContextType::ALL[best]
        })
        .collect())
}

/// Per-block vote counts in [`ContextType::ALL`] order.
pub fn vote_tally(runs: &[Vec<ContextType>]) -> Result<Vec<[usize; K]>> {
    let first = runs.first().ok_or_else(|| Error::Search("no runs to vote over".into()))?;
    if runs.iter().any(|r| r.len() != first.len()) {
        return Err(Error::Search("runs disagree on the block count".into()));
    }
    let mut tally = vec![[0usize; K]; first.len()];
    for run in runs {
        for (t, c) in tally.iter_mut().zip(run) {
            t[c.index()] += 1;
        }
    }
    Ok(tally)
}

/// Architecture logits of every CP block plus freeze state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchParams {
    pub blocks: usize,
    /// `blocks x 5` logits, row-major.
    pub alpha: Vec<f64>,
    pub frozen: Vec<Option<ContextType>>,
    pub freeze_iter: Vec<Option<usize>>,
}

impl ArchParams {
    pub fn new(blocks: usize) -> Self {
        ArchParams {
            blocks,
            alpha: vec![0.0; blocks * K],
            frozen: vec![None; blocks],
            freeze_iter: vec![None; blocks],
        }
    }

    pub fn logits(&self, j: usize) -> &[f64] {
        &self.alpha[j * K..(j + 1) * K]
    }

    pub fn probs(&self, j: usize) -> Vec<f64> {
        softmax(self.logits(j))
    }

    /// Adam mask: only unfrozen blocks' logits move.
    pub fn active_mask(&self) -> Vec<bool> {
        (0..self.blocks * K).map(|i| self.frozen[i / K].is_none()).collect()
    }

    /// Freezes every unfrozen block whose gap exceeds `threshold`. Returns the
    /// newly frozen block indices.
    pub fn apply_freezing(&mut self, threshold: f64, iter: usize) -> Vec<usize> {
        let mut newly = Vec::new();
        for j in 0..self.blocks {
            if self.frozen[j].is_some() {
                continue;
            }
            if let Some(c) = freeze_check(self.logits(j), threshold) {
                self.frozen[j] = Some(c);
                self.freeze_iter[j] = Some(iter);
                newly.push(j);
            }
        }
        newly
    }

    /// Frozen choice, else the argmax of the logits (earliest on ties).
    pub fn selection(&self) -> Vec<ContextType> {
        (0..self.blocks)
            .map(|j| {
                self.frozen[j].unwrap_or_else(|| {
                    let l = self.logits(j);
                    let best = (0..K).fold(0, |b, i| if l[i] > l[b] { i } else { b });
                    ContextType::ALL[best]
                })
            })
            .collect()
    }

    pub fn frozen_fraction(&self) -> f64 {
        self.frozen.iter().filter(|f| f.is_some()).count() as f64 / self.blocks.max(1) as f64
    }

    pub fn mean_entropy(&self) -> f64 {
        entropy_regularizer(&self.alpha, &self.frozen)
    }
}
