use serde::{Deserialize, Serialize};

use super::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// Outcome of comparing tape gradients against central finite differences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub entries: usize,
    pub tolerance: f64,
    /// Entries whose wide difference straddled a kink; see
    /// [`central_difference`].
    #[serde(default)]
    pub kinks: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Relative disagreement between the estimates at [`STEP`] and a tenth of it
/// beyond which the wide interval is taken to contain a kink.
const KINK_DISAGREEMENT: f64 = 1e-5;

/// Central difference of `f` at `x0`.
///
/// A second estimate at a tenth of the step guards against intervals that
/// straddle a point where `f` is not differentiable (ReLU, clamps). On a
/// smooth stretch both agree up to O(h^2) and round-off; otherwise the
/// narrow estimate is returned together with `true`.
pub fn central_difference<E>(mut f: impl FnMut(f64) -> std::result::Result<f64, E>, x0: f64) -> std::result::Result<(f64, bool), E> {
    let narrow_step = STEP / 10.0;
    let (fp, fm) = (f(x0 + STEP)?, f(x0 - STEP)?);
    let wide = (fp - fm) / (2.0 * STEP);
    let narrow = (f(x0 + narrow_step)? - f(x0 - narrow_step)?) / (2.0 * narrow_step);
    let round_off = 100.0 * f64::EPSILON * fp.abs().max(fm.abs()).max(1.0) / narrow_step;
    if (wide - narrow).abs() > KINK_DISAGREEMENT * wide.abs().max(narrow.abs()) + round_off {
        Ok((narrow, true))
    } else {
        Ok((wide, false))
    }
}

/// Checks the gradient of a scalar-valued `f` at `inputs` in 64-bit precision.
///
/// The relative error of an entry is `|analytic - numeric| / max(|analytic|,
/// |numeric|, floor)` where `floor` is 1e-3 of the largest numeric gradient
/// magnitude of that input (plus 1e-10), so entries that are zero up to
/// round-off do not dominate.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], tolerance: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(TensorError::shape("gradcheck", &[v.shape()]));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let base = tape.value(out).item();
    if !base.is_finite() {
        return Err(TensorError::invalid("gradcheck", "non-finite function value"));
    }
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        entries: 0,
        tolerance,
        kinks: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let mut numeric = Vec::with_capacity(input.numel());
        for ei in 0..input.numel() {
            let x0 = input.data()[ei];
            let (d, kink) = central_difference(
                |x| {
                    probe[ti].data_mut()[ei] = x;
                    eval(&probe)
                },
                x0,
            )?;
            probe[ti].data_mut()[ei] = x0;
            report.kinks += kink as usize;
            if !d.is_finite() {
                return Err(TensorError::invalid("gradcheck", "non-finite finite difference"));
            }
            numeric.push(d);
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = 1e-3 * scale + 1e-10;
        for (a, n) in analytic[ti].data().iter().zip(&numeric) {
            if !a.is_finite() {
                return Err(TensorError::invalid("gradcheck", "non-finite analytic gradient"));
            }
            let abs = (a - n).abs();
            let rel = abs / a.abs().max(n.abs()).max(floor);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.entries += 1;
        }
    }
    Ok(report)
}
