//! Attention operators on token-major tensors.
//!
//! Spatial maps are `[B, C, H, W]`; the attention operators work on
//! `[B, L, C]` token matrices produced by [`to_tokens`].

use crate::autodiff::{Tape, Var};
use crate::tensor::{Real, Result, TensorError};

/// Clamp applied to the linearized attention denominator.
pub const LINEAR_DENOM_MIN: f64 = 1e-12;

/// `[B, C, H, W]` to `[B, H*W, C]`.
pub fn to_tokens<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(TensorError::shape("to_tokens", &[&s]));
    }
    let flat = tape.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    tape.permute(flat, &[0, 2, 1])
}

/// `[B, L, C]` back to `[B, C, H, W]` with `L = H * W`.
pub fn from_tokens<T: Real>(tape: &mut Tape<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[1] != h * w {
        return Err(TensorError::shape("from_tokens", &[&s, &[h, w]]));
    }
    let t = tape.permute(x, &[0, 2, 1])?;
    tape.reshape(t, &[s[0], s[2], h, w])
}

/// Scaled dot-product attention `softmax(q k^T / sqrt(d_k)) v`.
///
/// `q` is `[B, Lq, dk]`, `k` is `[B, Lk, dk]`, `v` is `[B, Lk, dv]`. Returns the
/// output `[B, Lq, dv]` and the attention matrix `[B, Lq, Lk]`.
pub fn attention_quadratic<T: Real>(tape: &mut Tape<T>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (sq, sk, sv) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if sq.len() != 3 || sk.len() != 3 || sv.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] || sk[..2] != sv[..2] {
        return Err(TensorError::shape("attention_quadratic", &[&sq, &sk, &sv]));
    }
    let logits = tape.bmm(q, k, false, true)?;
    let logits = tape.mul_scalar(logits, T::ONE / T::from_f64(sq[2] as f64).sqrt());
    let attn = tape.softmax(logits, 2)?;
    let out = tape.bmm(attn, v, false, false)?;
    Ok((out, attn))
}

/// Linear-kernel attention in O(L):
/// `v'_i = q_i (sum_j k_j^T v_j) / (q_i . sum_j k_j)`.
///
/// `q` and `k` must be non-negative; the softplus projections guarantee it.
pub fn global_linearized<T: Real>(tape: &mut Tape<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let (sq, sk, sv) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if sq.len() != 3 || sk.len() != 3 || sv.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] || sk[..2] != sv[..2] {
        return Err(TensorError::shape("global_linearized", &[&sq, &sk, &sv]));
    }
    for (name, x) in [("q", q), ("k", k)] {
        if tape.value(x).data().iter().any(|&e| e < T::ZERO) {
            return Err(TensorError::invalid("global_linearized", format!("{name} has negative entries")));
        }
    }
    let kv = tape.bmm(k, v, true, false)?; // [B, dk, dv]
    let ksum = tape.sum_axis(k, 1)?; // [B, 1, dk]
    let num = tape.bmm(q, kv, false, false)?; // [B, Lq, dv]
    let den = tape.bmm(q, ksum, false, true)?; // [B, Lq, 1]
    let den = tape.clamp_min(den, T::from_f64(LINEAR_DENOM_MIN));
    tape.div(num, den)
}

/// Windowed attention over `[B, C, H, W]` maps; see [`Tape::local_attention`].
pub fn local_context<T: Real>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, window: usize) -> Result<Var> {
    tape.local_attention(q, k, v, window)
}

/// Spatial softmax of region scores `[B, R, H, W]`, returned as `[B, R, L]`:
/// every region row is a distribution over pixels.
pub fn spatial_softmax<T: Real>(tape: &mut Tape<T>, a: Var) -> Result<Var> {
    let s = tape.shape(a).to_vec();
    if s.len() != 4 {
        return Err(TensorError::shape("spatial_softmax", &[&s]));
    }
    let flat = tape.reshape(a, &[s[0], s[1], s[2] * s[3]])?;
    tape.softmax(flat, 2)
}

/// Region prototypes `p = Â^T F_S`.
///
/// `f_s` is `[B, L, C]`; `a_hat` is stored region-major as `[B, R, L]`, so the
/// product is `[B, R, C]`.
pub fn label_prototypes<T: Real>(tape: &mut Tape<T>, f_s: Var, a_hat: Var) -> Result<Var> {
    let (sf, sa) = (tape.shape(f_s).to_vec(), tape.shape(a_hat).to_vec());
    if sf.len() != 3 || sa.len() != 3 || sf[0] != sa[0] || sf[1] != sa[2] {
        return Err(TensorError::shape("label_prototypes", &[&sf, &sa]));
    }
    tape.bmm(a_hat, f_s, false, false)
}
