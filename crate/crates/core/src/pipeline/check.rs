//! Finite-difference check of the assembled network's loss gradient.

use rand::Rng;

use super::config::{default_tasks, AtrcMode, ModelConfig, RegionConfig, TrainConfig};
use super::data::{fit_regions, LabeledSet};
use super::loss::{task_loss, total_loss};
use super::model::{ArchInput, ForwardOptions, MultiTaskNet};
use crate::autodiff::{central_difference, GradcheckReport, Tape};
use crate::contexts::ContextType;
use crate::error::Result;
use crate::nn::ParamId;
use crate::rng::{keyed, stream};
use crate::synth::{dataset, SceneSpec, Split};

const BCE: (f64, f64) = (0.8, 0.2);

/// Spatial size and widths of the network check.
pub const CHECK_SIZE: usize = 8;
pub const CHECK_WIDTH: usize = 8;

/// Mixed architecture covering every context type on the 16 blocks.
pub fn check_arch() -> Vec<ContextType> {
    [ContextType::Global, ContextType::Local, ContextType::TLabel, ContextType::SLabel, ContextType::None]
        .into_iter()
        .cycle()
        .take(16)
        .collect()
}

/// Compares the analytic gradient of the total loss of a small 64-bit
/// network against central differences on one randomly chosen entry of
/// every parameter tensor.
pub fn network_gradcheck(seed: u64, tolerance: f64) -> Result<GradcheckReport> {
    let spec = SceneSpec {
        height: CHECK_SIZE,
        width: CHECK_SIZE,
        seed,
        ..Default::default()
    };
    let mut tasks = default_tasks();
    tasks[1].regions = RegionConfig::DepthBins { bins: 6 };
    tasks[2].regions = RegionConfig::NormalCodebook { codewords: 4 };
    let samples = dataset(&spec, 16, Split::Train);
    let tc = TrainConfig {
        codebook_samples: 200,
        ..Default::default()
    };
    let regions = fit_regions(&tasks, &samples, &tc, seed)?;
    let set = LabeledSet::new(samples, &tasks, &regions)?;
    let batch = set.batch(&[0, 1])?;
    let cfg = ModelConfig {
        backbone_width: CHECK_WIDTH,
        backbone_depth: 3,
        feature_width: CHECK_WIDTH,
        dk: 4,
        dv: 4,
        window: 3,
    };
    let arch = check_arch();
    let mut net = MultiTaskNet::<f64>::build(&cfg, &tasks, regions, &AtrcMode::Fixed { arch: arch.clone() }, seed)?;

    // The auxiliary heads and region maps read a detached trunk, so the
    // backbone is checked on the main losses with ground-truth regions; every
    // other parameter sees the full objective.
    let loss_of = |net: &MultiTaskNet<f64>, trunk: bool, grads: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let mut buffers = net.buffers.clone();
        let fo = ForwardOptions {
            gt_regions: trunk,
            ..ForwardOptions::new(ArchInput::Fixed(&arch))
        };
        let out = net.forward(&mut tape, &mut buffers, &batch, true, &fo)?;
        let loss = if trunk {
            let mut acc = None;
            for (t, task) in net.tasks.iter().enumerate() {
                let l = task_loss(&mut tape, task, out.preds[t], &batch, BCE)?;
                let l = tape.mul_scalar(l, task.loss_weight);
                acc = Some(match acc {
                    Some(a) => tape.add(a, l)?,
                    None => l,
                });
            }
            acc.expect("tasks")
        } else {
            total_loss(&mut tape, &out, &batch, &net.tasks, BCE, None)?.0
        };
        let value = tape.value(loss).item();
        if !grads {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss)?;
        let mut g = vec![Vec::new(); net.params.len()];
        for (id, t) in tape.param_grads() {
            g[id.0] = t.into_data();
        }
        Ok((value, g))
    };

    let (_, trunk_grads) = loss_of(&net, true, true)?;
    let (_, full_grads) = loss_of(&net, false, true)?;
    let mut rng = keyed(seed, stream::INIT, 1);
    let mut pairs = Vec::with_capacity(net.params.len());
    let mut kinks = 0;
    for p in 0..net.params.len() {
        let id = ParamId(p);
        let trunk = net.params.get(id).name.starts_with("backbone.");
        let len = net.params.get(id).tensor.numel();
        let e = rng.gen_range(0..len);
        let x0 = net.params.get(id).tensor.data()[e];
        let (n, kink) = central_difference(
            |x| {
                net.params.get_mut(id).tensor.data_mut()[e] = x;
                loss_of(&net, trunk, false).map(|r| r.0)
            },
            x0,
        )?;
        net.params.get_mut(id).tensor.data_mut()[e] = x0;
        kinks += kink as usize;
        let grads = if trunk { &trunk_grads } else { &full_grads };
        let a = grads[p].get(e).copied().unwrap_or(0.0);
        pairs.push((a, n));
    }
    let scale = pairs.iter().fold(0.0f64, |m, (_, n)| m.max(n.abs()));
    let floor = 1e-3 * scale + 1e-10;
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        entries: pairs.len(),
        tolerance,
        kinks,
    };
    for (a, n) in pairs {
        let abs = (a - n).abs();
        report.max_abs_error = report.max_abs_error.max(abs);
        report.max_rel_error = report.max_rel_error.max(abs / a.abs().max(n.abs()).max(floor));
    }
    Ok(report)
}
