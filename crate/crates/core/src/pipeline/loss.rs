//! Weighted multi-task objective with auxiliary region losses.

use super::config::{TaskKind, TaskSpec};
use super::data::Batch;
use super::model::ForwardOutput;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Unweighted main loss per task.
    pub main: Vec<f64>,
    /// Unweighted auxiliary region loss per task.
    pub aux: Vec<f64>,
    /// Weighted entropy term, 0 outside the search.
    pub entropy: f64,
}

/// Unweighted loss of one task's prediction.
pub fn task_loss<T: Real>(tape: &mut Tape<T>, task: &TaskSpec, pred: Var, batch: &Batch, bce: (f64, f64)) -> Result<Var> {
    Ok(match task.kind {
        TaskKind::Classification => tape.cross_entropy(pred, &batch.semseg, None)?,
        TaskKind::Depth => tape.l1_loss(pred, &batch.depth.cast(), false)?,
        TaskKind::Normals => tape.l1_loss(pred, &batch.normals.cast(), true)?,
        TaskKind::Boundary => tape.weighted_bce(pred, &batch.boundary.cast(), T::from_f64(bce.0), T::from_f64(bce.1))?,
    })
}

/// `sum_n w_n (L_n + L_aux,n) + omega * H`. The auxiliary heads read a
/// detached copy of the trunk, so their losses never reach trunk parameters.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    out: &ForwardOutput,
    batch: &Batch,
    tasks: &[TaskSpec],
    bce: (f64, f64),
    regularizer: Option<(Var, f64)>,
) -> Result<(Var, LossBreakdown)> {
    if out.preds.len() != tasks.len() || batch.regions.len() != tasks.len() {
        return Err(Error::Config("labels do not match the task list".into()));
    }
    let mut breakdown = LossBreakdown::default();
    let mut total: Option<Var> = None;
    let mut add = |tape: &mut Tape<T>, v: Var| -> Result<()> {
        total = Some(match total {
            Some(t) => tape.add(t, v)?,
            None => v,
        });
        Ok(())
    };
    for (t, task) in tasks.iter().enumerate() {
        let w = T::from_f64(task.loss_weight);
        let main = task_loss(tape, task, out.preds[t], batch, bce)?;
        let aux = tape.cross_entropy(out.aux[t], &batch.regions[t], None)?;
        breakdown.main.push(tape.value(main).item().to_f64());
        breakdown.aux.push(tape.value(aux).item().to_f64());
        let both = tape.add(main, aux)?;
        let weighted = tape.mul_scalar(both, w);
        add(tape, weighted)?;
    }
    if let Some((h, omega)) = regularizer {
        let term = tape.mul_scalar(h, T::from_f64(omega));
        breakdown.entropy = tape.value(term).item().to_f64();
        add(tape, term)?;
    }
    let total = total.expect("at least one task");
    breakdown.total = tape.value(total).item().to_f64();
    Ok((total, breakdown))
}
