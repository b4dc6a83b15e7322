//! Finite-difference checks over every primitive on small random shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gradcheck, BnMode, GradcheckReport, Tape, Var};
use crate::tensor::{Result, Tensor};

type CaseFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: CaseFn,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Reduces `out` to a scalar with fixed random weights so every output entry
/// carries a distinct cotangent.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = uniform(&mut rng, tape.shape(out), -1.0, 1.0);
    let wv = tape.constant(w);
    let p = tape.mul(out, wv)?;
    Ok(tape.sum(p))
}

fn cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| uniform(&mut rng, shape, -1.0, 1.0);
    let mut cases: Vec<Case> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($inp:expr),*], $f:expr) => {
            cases.push(Case { name: $name, inputs: vec![$($inp),*], f: Box::new($f) });
        };
    }
    case!("add_broadcast", [r(&[2, 3, 4]), r(&[3, 1])], move |t, v| {
        let o = t.add(v[0], v[1])?;
        project(t, o, seed)
    });
    case!("sub", [r(&[3, 4]), r(&[3, 4])], move |t, v| {
        let o = t.sub(v[0], v[1])?;
        project(t, o, seed)
    });
    case!("mul_broadcast", [r(&[2, 3, 4]), r(&[4])], move |t, v| {
        let o = t.mul(v[0], v[1])?;
        project(t, o, seed)
    });
    let denom = r(&[2, 1, 4]).map(|x| 1.0 + 0.5 * x);
    case!("div_broadcast", [r(&[2, 3, 4]), denom], move |t, v| {
        let o = t.div(v[0], v[1])?;
        project(t, o, seed)
    });
    case!("scalar_ops", [r(&[5])], move |t, v| {
        let o = t.mul_scalar(v[0], -2.5);
        let o = t.add_scalar(o, 0.75);
        project(t, o, seed)
    });
    case!("matmul", [r(&[3, 4]), r(&[4, 2])], move |t, v| {
        let o = t.matmul(v[0], v[1])?;
        project(t, o, seed)
    });
    case!("bmm_transposed", [r(&[2, 4, 3]), r(&[2, 5, 4])], move |t, v| {
        let o = t.bmm(v[0], v[1], true, true)?;
        project(t, o, seed)
    });
    case!("reshape_permute", [r(&[2, 3, 4])], move |t, v| {
        let o = t.permute(v[0], &[2, 0, 1])?;
        let o = t.reshape(o, &[4, 6])?;
        project(t, o, seed)
    });
    case!("concat", [r(&[2, 2, 3]), r(&[2, 1, 3])], move |t, v| {
        let o = t.concat(&[v[0], v[1]], 1)?;
        project(t, o, seed)
    });
    case!("slice_gather", [r(&[3, 5])], move |t, v| {
        let o = t.slice(v[0], 1, 1, 3)?;
        let o = t.index_select(o, 0, &[2, 0, 2])?;
        project(t, o, seed)
    });
    case!("reductions", [r(&[2, 3, 4])], move |t, v| {
        let a = t.sum_axis(v[0], 1)?;
        let b = t.mean_axis(v[0], 2)?;
        let pa = project(t, a, seed)?;
        let pb = project(t, b, seed + 1)?;
        let m = t.mean(v[0]);
        let s = t.add(pa, pb)?;
        t.add(s, m)
    });
    case!("exp_log", [r(&[6]).map(|x| 1.5 + x)], move |t, v| {
        let a = t.exp(v[0]);
        let b = t.log(v[0]);
        let o = t.add(a, b)?;
        project(t, o, seed)
    });
    case!("relu_sigmoid_clamp", [r(&[8])], move |t, v| {
        let a = t.relu(v[0]);
        let b = t.sigmoid(v[0]);
        let c = t.clamp_min(v[0], -0.5);
        let o = t.add(a, b)?;
        let o = t.add(o, c)?;
        project(t, o, seed)
    });
    case!("softplus", [r(&[8]).map(|x| 4.0 * x)], move |t, v| {
        let o = t.softplus(v[0]);
        project(t, o, seed)
    });
    case!("softmax", [r(&[3, 4, 2])], move |t, v| {
        let o = t.softmax(v[0], 1)?;
        project(t, o, seed)
    });
    case!("log_softmax", [r(&[3, 5])], move |t, v| {
        let o = t.log_softmax(v[0], 1)?;
        project(t, o, seed)
    });
    case!("scale_by_element", [r(&[2, 3]), r(&[5])], move |t, v| {
        let o = t.scale_by_element(v[0], v[1], 3)?;
        project(t, o, seed)
    });
    case!("conv1x1", [r(&[2, 3, 3, 3]), r(&[4, 3, 1, 1]), r(&[4])], move |t, v| {
        let o = t.conv2d(v[0], v[1], Some(v[2]))?;
        project(t, o, seed)
    });
    case!("conv3x3", [r(&[1, 2, 4, 5]), r(&[3, 2, 3, 3]), r(&[3])], move |t, v| {
        let o = t.conv2d(v[0], v[1], Some(v[2]))?;
        project(t, o, seed)
    });
    case!("batchnorm_train", [r(&[3, 2, 2, 3]), r(&[2]), r(&[2])], move |t, v| {
        let (o, _) = t.batch_norm(v[0], Some(v[1]), Some(v[2]), BnMode::Train, 1e-5)?;
        project(t, o, seed)
    });
    case!("batchnorm_eval", [r(&[2, 2, 3, 1]), r(&[2])], move |t, v| {
        let (o, _) = t.batch_norm(
            v[0],
            Some(v[1]),
            None,
            BnMode::Eval {
                mean: &[0.1, -0.3],
                var: &[0.7, 1.9],
            },
            1e-5,
        )?;
        project(t, o, seed)
    });
    let ce_targets: Vec<usize> = (0..12).map(|i| if i == 5 { 99 } else { (i * 7 + seed as usize) % 4 }).collect();
    case!("cross_entropy", [r(&[2, 4, 2, 3])], move |t, v| t.cross_entropy(v[0], &ce_targets, Some(99)));
    let l1_target = r(&[2, 3, 2, 2]);
    let l1_target2 = l1_target.clone();
    case!("l1", [r(&[2, 3, 2, 2])], move |t, v| t.l1_loss(v[0], &l1_target, false));
    case!("l1_unit", [r(&[2, 3, 2, 2])], move |t, v| t.l1_loss(v[0], &l1_target2, true));
    let bce_target = Tensor::from_fn(&[1, 1, 3, 4], |i| (i + seed as usize).is_multiple_of(3) as u8 as f64);
    case!("weighted_bce", [r(&[1, 1, 3, 4]).map(|x| 3.0 * x)], move |t, v| {
        t.weighted_bce(v[0], &bce_target, 0.8, 0.2)
    });
    case!("local_attention", [r(&[1, 3, 4, 5]), r(&[1, 3, 4, 5]), r(&[1, 2, 4, 5])], move |t, v| {
        let o = t.local_attention(v[0], v[1], v[2], 3)?;
        project(t, o, seed)
    });
    let comp_targets: Vec<usize> = (0..36).map(|i| (i * 5 + seed as usize) % 4).collect();
    case!(
        "conv_bn_relu_softmax_ce",
        [r(&[1, 4, 6, 6]), r(&[4, 4, 3, 3]), r(&[4]), r(&[4])],
        move |t, v| {
            // No conv bias: batch statistics cancel it, so its gradient is
            // zero and finite differences only see round-off.
            let o = t.conv2d(v[0], v[1], None)?;
            let (o, _) = t.batch_norm(o, Some(v[2]), Some(v[3]), BnMode::Train, 1e-5)?;
            let o = t.relu(o);
            // cross-entropy applies the channel softmax internally
            t.cross_entropy(o, &comp_targets, None)
        }
    );
    cases
}

/// Runs every primitive check for one seed; returns `(primitive, report)` pairs.
pub fn primitive_checks(seed: u64, tolerance: f64) -> Result<Vec<(&'static str, GradcheckReport)>> {
    let mut out = cases(seed)
        .into_iter()
        .map(|c| gradcheck(&c.f, &c.inputs, tolerance).map(|r| (c.name, r)))
        .collect::<Result<Vec<_>>>()?;
    out.push(("stop_gradient", stop_gradient_check(seed, tolerance)?));
    Ok(out)
}

/// Tape gradient of `f(x) + g(stop_gradient(x))` against finite differences of
/// `f` alone, with `f(x) = sum(w * x^2)` and `g = sum(exp)`.
fn stop_gradient_check(seed: u64, tolerance: f64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &[5], -1.0, 1.0);
    let w = uniform(&mut rng, &[5], -1.0, 1.0);
    let f = |x: &[f64]| x.iter().zip(w.data()).map(|(a, b)| b * a * a).sum::<f64>();

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let wv = tape.constant(w.clone());
    let sq = tape.mul(xv, xv)?;
    let fx = tape.mul(sq, wv)?;
    let fx = tape.sum(fx);
    let sg = tape.stop_gradient(xv);
    let gx = tape.exp(sg);
    let gx = tape.sum(gx);
    let total = tape.add(fx, gx)?;
    tape.backward(total)?;
    let analytic = tape.grad_tensor(xv);

    let h = 1e-5;
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        entries: 0,
        tolerance,
        kinks: 0,
    };
    let mut probe = x.data().to_vec();
    for i in 0..probe.len() {
        let x0 = probe[i];
        probe[i] = x0 + h;
        let fp = f(&probe);
        probe[i] = x0 - h;
        let fm = f(&probe);
        probe[i] = x0;
        let n = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let abs = (a - n).abs();
        report.max_abs_error = report.max_abs_error.max(abs);
        report.max_rel_error = report.max_rel_error.max(abs / a.abs().max(n.abs()).max(1e-10));
        report.entries += 1;
    }
    Ok(report)
}
