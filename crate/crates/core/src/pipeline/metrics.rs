//! Per-task evaluation metrics and the evaluation loop.

use serde::{Deserialize, Serialize};

use super::config::{TaskKind, TaskSpec};
use super::data::{Batch, LabeledSet};
use super::model::{ArchInput, ForwardOptions, MultiTaskNet};
use crate::autodiff::Tape;
use crate::contexts::ContextType;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BOUNDARY_THRESHOLDS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetric {
    pub task: String,
    pub metric: String,
    pub value: f64,
    /// 1 when lower is better.
    pub gamma: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub metrics: Vec<TaskMetric>,
}

impl MetricsReport {
    pub fn values(&self) -> Vec<f64> {
        self.metrics.iter().map(|m| m.value).collect()
    }

    pub fn gammas(&self) -> Vec<u8> {
        self.metrics.iter().map(|m| m.gamma).collect()
    }

    pub const CSV_HEADER: &'static str = "run,task,metric,value";

    pub fn csv_rows(&self) -> Vec<String> {
        self.metrics
            .iter()
            .map(|m| format!("{},{},{},{:.6}", self.run_id, m.task, m.metric, m.value))
            .collect()
    }
}

/// Running statistics of one task's metric.
#[derive(Clone, Debug)]
pub enum MetricAccumulator {
    /// Confusion matrix, row = ground truth, column = prediction.
    Confusion { classes: usize, counts: Vec<u64> },
    Rmse { sum_sq: f64, count: u64 },
    Angle { sum_deg: f64, count: u64 },
    /// Per threshold: matched predictions, predictions, matched ground truth;
    /// plus the ground-truth boundary count.
    Boundary {
        matched_pred: [u64; BOUNDARY_THRESHOLDS],
        pred: [u64; BOUNDARY_THRESHOLDS],
        matched_gt: [u64; BOUNDARY_THRESHOLDS],
        gt: u64,
    },
}

pub fn boundary_threshold(k: usize) -> f64 {
    (k + 1) as f64 / (BOUNDARY_THRESHOLDS + 1) as f64
}

/// Whether any pixel of `mask` lies in the 3x3 neighbourhood of `(y, x)`.
fn near(mask: &[bool], h: usize, w: usize, y: usize, x: usize) -> bool {
    for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
        for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
            if mask[ny * w + nx] {
                return true;
            }
        }
    }
    false
}

impl MetricAccumulator {
    pub fn new(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Classification => MetricAccumulator::Confusion {
                classes: kind.out_channels(),
                counts: vec![0; kind.out_channels() * kind.out_channels()],
            },
            TaskKind::Depth => MetricAccumulator::Rmse { sum_sq: 0.0, count: 0 },
            TaskKind::Normals => MetricAccumulator::Angle { sum_deg: 0.0, count: 0 },
            TaskKind::Boundary => MetricAccumulator::Boundary {
                matched_pred: [0; BOUNDARY_THRESHOLDS],
                pred: [0; BOUNDARY_THRESHOLDS],
                matched_gt: [0; BOUNDARY_THRESHOLDS],
                gt: 0,
            },
        }
    }

    /// Adds a prediction `[B, C, H, W]` (raw network output) for `batch`.
    pub fn update(&mut self, pred: &[f64], batch: &Batch) -> Result<()> {
        let (b, l) = (batch.size, batch.pixels());
        let channels = pred.len() / (b * l).max(1);
        if channels * b * l != pred.len() || b * l == 0 {
            return Err(Error::Analysis("prediction size does not match the batch".into()));
        }
        match self {
            MetricAccumulator::Confusion { classes, counts } => {
                if channels != *classes {
                    return Err(Error::Analysis(format!("expected {classes} class scores, got {channels}")));
                }
                for bi in 0..b {
                    for p in 0..l {
                        let score = |c: usize| pred[(bi * channels + c) * l + p];
                        let arg = (0..channels).fold(0, |best, c| if score(c) > score(best) { c } else { best });
                        counts[batch.semseg[bi * l + p] * *classes + arg] += 1;
                    }
                }
            }
            MetricAccumulator::Rmse { sum_sq, count } => {
                for (p, d) in pred.iter().zip(batch.depth.data()) {
                    *sum_sq += (p - *d as f64).powi(2);
                }
                *count += pred.len() as u64;
            }
            MetricAccumulator::Angle { sum_deg, count } => {
                let g = batch.normals.data();
                for bi in 0..b {
                    for p in 0..l {
                        let v = |src: &dyn Fn(usize) -> f64| [0, 1, 2].map(|c| src((bi * 3 + c) * l + p));
                        let pv = v(&|i| pred[i]);
                        let gv = v(&|i| g[i] as f64);
                        let np = pv.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                        let ng = gv.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                        let cos = (pv.iter().zip(&gv).map(|(a, b)| a * b).sum::<f64>() / (np * ng)).clamp(-1.0, 1.0);
                        *sum_deg += cos.acos().to_degrees();
                        *count += 1;
                    }
                }
            }
            MetricAccumulator::Boundary {
                matched_pred,
                pred: npred,
                matched_gt,
                gt,
            } => {
                let (h, w) = (batch.height, batch.width);
                for bi in 0..b {
                    let truth: Vec<bool> = batch.boundary.data()[bi * l..(bi + 1) * l].iter().map(|&v| v > 0.5).collect();
                    *gt += truth.iter().filter(|&&v| v).count() as u64;
                    let prob: Vec<f64> = pred[bi * l..(bi + 1) * l].iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
                    for k in 0..BOUNDARY_THRESHOLDS {
                        let th = boundary_threshold(k);
                        let mask: Vec<bool> = prob.iter().map(|&p| p >= th).collect();
                        for y in 0..h {
                            for x in 0..w {
                                let i = y * w + x;
                                if mask[i] {
                                    npred[k] += 1;
                                    matched_pred[k] += near(&truth, h, w, y, x) as u64;
                                }
                                if truth[i] {
                                    matched_gt[k] += near(&mask, h, w, y, x) as u64;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<f64> {
        let empty = || Error::Analysis("empty evaluation set".into());
        match self {
            MetricAccumulator::Confusion { classes, counts } => {
                let c = *classes;
                let mut ious = Vec::new();
                for k in 0..c {
                    let tp = counts[k * c + k];
                    let row: u64 = (0..c).map(|j| counts[k * c + j]).sum();
                    let col: u64 = (0..c).map(|i| counts[i * c + k]).sum();
                    let union = row + col - tp;
                    if union > 0 {
                        ious.push(tp as f64 / union as f64);
                    }
                }
                if ious.is_empty() {
                    return Err(empty());
                }
                Ok(ious.iter().sum::<f64>() / ious.len() as f64)
            }
            MetricAccumulator::Rmse { sum_sq, count } => {
                if *count == 0 {
                    return Err(empty());
                }
                Ok((sum_sq / *count as f64).sqrt())
            }
            MetricAccumulator::Angle { sum_deg, count } => {
                if *count == 0 {
                    return Err(empty());
                }
                Ok(sum_deg / *count as f64)
            }
            MetricAccumulator::Boundary {
                matched_pred,
                pred,
                matched_gt,
                gt,
            } => {
                let mut best: f64 = 0.0;
                for k in 0..BOUNDARY_THRESHOLDS {
                    if pred[k] == 0 && *gt == 0 {
                        best = 1.0;
                        continue;
                    }
                    let p = if pred[k] == 0 { 0.0 } else { matched_pred[k] as f64 / pred[k] as f64 };
                    let r = if *gt == 0 { 0.0 } else { matched_gt[k] as f64 / *gt as f64 };
                    if p + r > 0.0 {
                        best = best.max(2.0 * p * r / (p + r));
                    }
                }
                Ok(best)
            }
        }
    }
}

/// Architecture for evaluation passes.
#[derive(Clone, Debug, PartialEq)]
pub enum EvalArch {
    Fixed(Vec<ContextType>),
    Baseline,
}

impl EvalArch {
    pub fn input(&self) -> ArchInput<'_> {
        match self {
            EvalArch::Fixed(a) => ArchInput::Fixed(a),
            EvalArch::Baseline => ArchInput::Baseline,
        }
    }
}

/// Options of an evaluation pass.
pub struct EvalOptions<'a, T> {
    pub arch: &'a EvalArch,
    pub batch_size: usize,
    pub gt_regions: bool,
    /// Per-batch CP output substitutions, given the sample indices of the batch.
    #[allow(clippy::type_complexity)]
    pub overrides: Option<&'a dyn Fn(&[usize]) -> Vec<(usize, Tensor<T>)>>,
}

/// Runs `net` in eval mode over `set` and reports every task's metric.
pub fn evaluate<T: Real>(net: &MultiTaskNet<T>, set: &LabeledSet, opts: &EvalOptions<'_, T>, run_id: &str) -> Result<MetricsReport> {
    if set.is_empty() {
        return Err(Error::Analysis("empty evaluation set".into()));
    }
    let mut accs: Vec<MetricAccumulator> = net.tasks.iter().map(|t| MetricAccumulator::new(t.kind)).collect();
    let mut buffers = net.buffers.clone();
    let bs = opts.batch_size.max(1);
    for start in (0..set.len()).step_by(bs) {
        let idx: Vec<usize> = (start..(start + bs).min(set.len())).collect();
        let batch = set.batch(&idx)?;
        let overrides = opts.overrides.map(|f| f(&idx)).unwrap_or_default();
        let mut tape = Tape::new();
        let fo = ForwardOptions {
            arch: opts.arch.input(),
            gt_regions: opts.gt_regions,
            overrides: &overrides,
        };
        let out = net.forward(&mut tape, &mut buffers, &batch, false, &fo)?;
        for (acc, &p) in accs.iter_mut().zip(&out.preds) {
            let v: Vec<f64> = tape.value(p).data().iter().map(|x| x.to_f64()).collect();
            acc.update(&v, &batch)?;
        }
    }
    report_from(&net.tasks, &accs, run_id)
}

pub fn report_from(tasks: &[TaskSpec], accs: &[MetricAccumulator], run_id: &str) -> Result<MetricsReport> {
    Ok(MetricsReport {
        run_id: run_id.into(),
        metrics: tasks
            .iter()
            .zip(accs)
            .map(|(t, a)| {
                Ok(TaskMetric {
                    task: t.name.clone(),
                    metric: t.kind.metric().into(),
                    value: a.finish()?,
                    gamma: t.gamma(),
                })
            })
            .collect::<Result<Vec<_>>>()?,
    })
}

/// Per-sample CP outputs `[1, dv, H, W]` of block `j` over `set`, or `None`
/// when the block runs the none context.
pub fn collect_cp_outputs<T: Real>(
    net: &MultiTaskNet<T>,
    set: &LabeledSet,
    arch: &EvalArch,
    j: usize,
    batch_size: usize,
    gt_regions: bool,
) -> Result<Option<Vec<Tensor<T>>>> {
    let mut outs = Vec::with_capacity(set.len());
    let mut buffers = net.buffers.clone();
    let bs = batch_size.max(1);
    for start in (0..set.len()).step_by(bs) {
        let idx: Vec<usize> = (start..(start + bs).min(set.len())).collect();
        let batch = set.batch(&idx)?;
        let mut tape = Tape::new();
        let fo = ForwardOptions {
            arch: arch.input(),
            gt_regions,
            overrides: &[],
        };
        let out = net.forward(&mut tape, &mut buffers, &batch, false, &fo)?;
        let Some(v) = out.cp.get(j).copied().flatten() else {
            return Ok(None);
        };
        let t = tape.value(v);
        for b in 0..idx.len() {
            outs.push(t.narrow_first(b, 1)?);
        }
    }
    Ok(Some(outs))
}
