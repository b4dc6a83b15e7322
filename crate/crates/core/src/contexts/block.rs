use rand::Rng;

use super::attention::{
    attention_quadratic, from_tokens, global_linearized, label_prototypes, local_context, to_tokens,
};
use super::ContextType;
use crate::autodiff::Var;
use crate::nn::{Activation, BufferStore, ConvBn, Ctx, ParamStore};
use crate::tensor::{Real, Result, TensorError};

/// Tolerance on the mixing weights' distance from the simplex.
const SIMPLEX_TOL: f64 = 1e-5;

/// The `f_q`, `f_k`, `f_v` transforms: each a 1x1 conv, batch norm and activation.
#[derive(Clone, Debug)]
pub struct QkvProjection {
    pub q: ConvBn,
    pub k: ConvBn,
    pub v: ConvBn,
    pub dk: usize,
    pub dv: usize,
}

impl QkvProjection {
    /// `qk_act` applies to `f_q` and `f_k`; `f_v` always uses ReLU.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        params: &mut ParamStore<T>,
        buffers: &mut BufferStore<T>,
        name: &str,
        target_channels: usize,
        source_channels: usize,
        dk: usize,
        dv: usize,
        qk_act: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(QkvProjection {
            q: ConvBn::new(params, buffers, &format!("{name}.q"), target_channels, dk, 1, qk_act, true, rng)?,
            k: ConvBn::new(params, buffers, &format!("{name}.k"), source_channels, dk, 1, qk_act, true, rng)?,
            v: ConvBn::new(params, buffers, &format!("{name}.v"), source_channels, dv, 1, Activation::Relu, true, rng)?,
            dk,
            dv,
        })
    }

    /// `q = f_q(F_T)`, `k = f_k(F_S)`, `v = f_v(F_S)` on spatially aligned maps.
    pub fn project<T: Real>(&self, ctx: &mut Ctx<'_, T>, f_t: Var, f_s: Var) -> Result<(Var, Var, Var)> {
        let (st, ss) = (ctx.tape.shape(f_t).to_vec(), ctx.tape.shape(f_s).to_vec());
        if st.len() != 4 || ss.len() != 4 || st[0] != ss[0] || st[2..] != ss[2..] {
            return Err(TensorError::shape("project_qkv", &[&st, &ss]));
        }
        let q = self.q.forward(ctx, f_t)?;
        let k = self.k.forward(ctx, f_s)?;
        let v = self.v.forward(ctx, f_s)?;
        Ok((q, k, v))
    }
}

/// One relational context: projections, the attention operator and an output
/// 1x1 conv whose batch norm has no affine parameters.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub kind: ContextType,
    pub proj: QkvProjection,
    pub out: ConvBn,
}

/// Everything a CP block reads. Region maps are `[B, R, L]` spatial distributions.
#[derive(Clone, Copy, Debug)]
pub struct CpInputs {
    pub f_t: Var,
    pub f_s: Var,
    pub a_hat_t: Option<Var>,
    pub a_hat_s: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub enum CpMode {
    Fixed(ContextType),
    /// Convex combination with weights `w[offset..offset + 5]`, in
    /// [`ContextType::ALL`] order.
    Mixed { weights: Var, offset: usize },
}

impl Candidate {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        params: &mut ParamStore<T>,
        buffers: &mut BufferStore<T>,
        name: &str,
        kind: ContextType,
        channels: usize,
        dk: usize,
        dv: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if kind == ContextType::None {
            return Err(TensorError::invalid("cp_block", "the none context has no parameters"));
        }
        let act = if kind == ContextType::Global { Activation::Softplus } else { Activation::Relu };
        let proj = QkvProjection::new(params, buffers, name, channels, channels, dk, dv, act, rng)?;
        let out = ConvBn::new(params, buffers, &format!("{name}.out"), dv, dv, 1, Activation::Identity, false, rng)?;
        Ok(Candidate { kind, proj, out })
    }

    /// Output `[B, dv, H, W]` plus the attention matrix `[B, L, R]` for label contexts.
    pub fn forward<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        inputs: &CpInputs,
        window: usize,
    ) -> Result<(Var, Option<Var>)> {
        let shape = ctx.tape.shape(inputs.f_t).to_vec();
        let (h, w) = (shape[2], shape[3]);
        let (v_prime, attn) = match self.kind {
            ContextType::Global => {
                let (q, k, v) = self.proj.project(ctx, inputs.f_t, inputs.f_s)?;
                let (q, k, v) = (to_tokens(ctx.tape, q)?, to_tokens(ctx.tape, k)?, to_tokens(ctx.tape, v)?);
                let o = global_linearized(ctx.tape, q, k, v)?;
                (from_tokens(ctx.tape, o, h, w)?, None)
            }
            ContextType::Local => {
                let (q, k, v) = self.proj.project(ctx, inputs.f_t, inputs.f_s)?;
                (local_context(ctx.tape, q, k, v, window)?, None)
            }
            ContextType::TLabel | ContextType::SLabel => {
                let a_hat = if self.kind == ContextType::TLabel { inputs.a_hat_t } else { inputs.a_hat_s };
                let a_hat = a_hat.ok_or_else(|| TensorError::invalid("label_context", "region maps missing"))?;
                let regions = ctx.tape.shape(a_hat)[1];
                if regions == 0 {
                    return Err(TensorError::invalid("label_context", "region count 0"));
                }
                let fs = to_tokens(ctx.tape, inputs.f_s)?;
                let p = label_prototypes(ctx.tape, fs, a_hat)?; // [B, R, C]
                let c = ctx.tape.shape(p)[2];
                let p = ctx.tape.permute(p, &[0, 2, 1])?;
                let p = ctx.tape.reshape(p, &[shape[0], c, regions, 1])?;
                let q = self.proj.q.forward(ctx, inputs.f_t)?;
                let k = self.proj.k.forward(ctx, p)?;
                let v = self.proj.v.forward(ctx, p)?;
                let (q, k, v) = (to_tokens(ctx.tape, q)?, to_tokens(ctx.tape, k)?, to_tokens(ctx.tape, v)?);
                let (o, a) = attention_quadratic(ctx.tape, q, k, v)?;
                (from_tokens(ctx.tape, o, h, w)?, Some(a))
            }
            ContextType::None => unreachable!("none candidates are never constructed"),
        };
        Ok((self.out.forward(ctx, v_prime)?, attn))
    }
}

/// Distillation unit from a source task into a target task.
#[derive(Clone, Debug)]
pub struct CpBlock {
    pub target: usize,
    pub source: usize,
    /// Non-none candidates, a subset of `ContextType::ALL[..4]` in order.
    pub candidates: Vec<Candidate>,
    pub window: usize,
}

impl CpBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        params: &mut ParamStore<T>,
        buffers: &mut BufferStore<T>,
        name: &str,
        target: usize,
        source: usize,
        kinds: &[ContextType],
        channels: usize,
        dk: usize,
        dv: usize,
        window: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if window.is_multiple_of(2) {
            return Err(TensorError::invalid("cp_block", format!("window extent {window} must be odd")));
        }
        let mut candidates = Vec::new();
        for &kind in ContextType::ALL.iter().filter(|k| kinds.contains(k) && **k != ContextType::None) {
            let cname = format!("{name}.{}", kind.name());
            candidates.push(Candidate::new(params, buffers, &cname, kind, channels, dk, dv, rng)?);
        }
        Ok(CpBlock {
            target,
            source,
            candidates,
            window,
        })
    }

    pub fn candidate(&self, kind: ContextType) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.kind == kind)
    }

    /// Runs the block. `None` stands for an all-zero output, which is what the
    /// none context produces and carries no gradient.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, inputs: &CpInputs, mode: CpMode) -> Result<Option<Var>> {
        match mode {
            CpMode::Fixed(ContextType::None) => Ok(None),
            CpMode::Fixed(kind) => {
                let c = self.candidate(kind).ok_or_else(|| {
                    TensorError::invalid("cp_block", format!("context {kind} not built for this block"))
                })?;
                Ok(Some(c.forward(ctx, inputs, self.window)?.0))
            }
            CpMode::Mixed { weights, offset } => {
                let wv = &ctx.tape.value(weights).data()[offset..offset + ContextType::COUNT];
                let total: f64 = wv.iter().map(|w| w.to_f64()).sum();
                if wv.iter().any(|w| w.to_f64() < -SIMPLEX_TOL) || (total - 1.0).abs() > SIMPLEX_TOL {
                    return Err(TensorError::invalid("cp_block", format!("mixing weights off the simplex (sum {total})")));
                }
                let mut acc: Option<Var> = None;
                for c in &self.candidates {
                    let (o, _) = c.forward(ctx, inputs, self.window)?;
                    let o = ctx.tape.scale_by_element(o, weights, offset + c.kind.index())?;
                    acc = Some(match acc {
                        Some(a) => ctx.tape.add(a, o)?,
                        None => o,
                    });
                }
                Ok(acc)
            }
        }
    }
}
