//! Multi-task performance measure, permutation importance of CP blocks and
//! agreement statistics over repeated searches.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::contexts::ContextType;
use crate::error::{Error, Result};
use crate::pipeline::{collect_cp_outputs, evaluate, EvalArch, EvalOptions, LabeledSet, MetricsReport, MultiTaskNet};
use crate::pnm;
use crate::rng::{keyed, stream};
use crate::tensor::{Real, Tensor};

fn bad<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Analysis(msg.into()))
}

/// Mean relative difference to the baseline in percent, with the sign of
/// lower-is-better metrics (`gamma = 1`) flipped so that positive is better.
pub fn delta_m(model: &[f64], baseline: &[f64], gammas: &[u8]) -> Result<f64> {
    if model.len() != baseline.len() || model.len() != gammas.len() || model.is_empty() {
        return bad(format!(
            "delta_m needs equally many metrics, got {} / {} / {}",
            model.len(),
            baseline.len(),
            gammas.len()
        ));
    }
    let mut sum = 0.0;
    for ((&m, &b), &g) in model.iter().zip(baseline).zip(gammas) {
        if b == 0.0 || !b.is_finite() {
            return bad(format!("baseline metric {b} cannot normalize"));
        }
        let sign = if g == 1 { -1.0 } else { 1.0 };
        sum += sign * (m - b) / b;
    }
    Ok(100.0 * sum / model.len() as f64)
}

/// [`delta_m`] of two reports over the same tasks.
pub fn delta_m_reports(model: &MetricsReport, baseline: &MetricsReport) -> Result<f64> {
    let names = |r: &MetricsReport| r.metrics.iter().map(|m| (m.task.clone(), m.metric.clone())).collect::<Vec<_>>();
    if names(model) != names(baseline) {
        return bad(format!("task sets differ: {:?} vs {:?}", names(model), names(baseline)));
    }
    delta_m(&model.values(), &baseline.values(), &model.gammas())
}

/// Importance of one CP block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockImportance {
    /// Mean drop of the performance measure when the block's outputs are
    /// shuffled across samples.
    pub drop: f64,
    /// The block runs the none context, so it has no output to shuffle.
    pub absent: bool,
}

/// Settings of a permutation-importance pass.
#[derive(Clone, Debug)]
pub struct ImportanceOptions<'a> {
    pub arch: &'a EvalArch,
    /// Reference the performance measure is taken against.
    pub reference: &'a MetricsReport,
    pub repetitions: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub gt_regions: bool,
}

/// Evaluates `net` with the outputs of block `j` replaced by those of the
/// samples `perm[i]`.
fn eval_permuted<T: Real>(
    net: &MultiTaskNet<T>,
    set: &LabeledSet,
    opts: &ImportanceOptions<'_>,
    j: usize,
    outputs: &[Tensor<T>],
    perm: &[usize],
) -> Result<MetricsReport> {
    let f = |idx: &[usize]| -> Vec<(usize, Tensor<T>)> {
        let parts: Vec<Tensor<T>> = idx.iter().map(|&i| outputs[perm[i]].clone()).collect();
        let stacked = Tensor::stack(&parts).expect("equal block output shapes");
        let mut shape = stacked.shape().to_vec();
        shape.remove(1);
        vec![(j, stacked.reshape(&shape).expect("drop unit axis"))]
    };
    evaluate(
        net,
        set,
        &EvalOptions {
            arch: opts.arch,
            batch_size: opts.batch_size,
            gt_regions: opts.gt_regions,
            overrides: Some(&f),
        },
        "permuted",
    )
}

/// Drop of the performance measure when block `(target, source)` sees
/// shuffled inputs, averaged over `repetitions` random permutations.
pub fn permutation_importance<T: Real>(
    net: &MultiTaskNet<T>,
    set: &LabeledSet,
    target: usize,
    source: usize,
    opts: &ImportanceOptions<'_>,
) -> Result<BlockImportance> {
    let n = net.num_tasks();
    if target >= n || source >= n {
        return bad(format!("block ({target}, {source}) outside {n} tasks"));
    }
    if opts.repetitions == 0 {
        return bad("importance needs at least one repetition");
    }
    let j = target * n + source;
    let Some(outputs) = collect_cp_outputs(net, set, opts.arch, j, opts.batch_size, opts.gt_regions)? else {
        return Ok(BlockImportance { drop: 0.0, absent: true });
    };
    let intact = evaluate(
        net,
        set,
        &EvalOptions {
            arch: opts.arch,
            batch_size: opts.batch_size,
            gt_regions: opts.gt_regions,
            overrides: None,
        },
        "intact",
    )?;
    let base = delta_m_reports(&intact, opts.reference)?;
    let mut total = 0.0;
    for rep in 0..opts.repetitions {
        let mut perm: Vec<usize> = (0..set.len()).collect();
        perm.shuffle(&mut keyed(opts.seed, stream::PERMUTE, (j * opts.repetitions + rep) as u64));
        let shuffled = eval_permuted(net, set, opts, j, &outputs, &perm)?;
        total += base - delta_m_reports(&shuffled, opts.reference)?;
    }
    Ok(BlockImportance {
        drop: total / opts.repetitions as f64,
        absent: false,
    })
}

/// Drop with the identity permutation; zero by construction.
pub fn identity_permutation_drop<T: Real>(net: &MultiTaskNet<T>, set: &LabeledSet, j: usize, opts: &ImportanceOptions<'_>) -> Result<f64> {
    let Some(outputs) = collect_cp_outputs(net, set, opts.arch, j, opts.batch_size, opts.gt_regions)? else {
        return Ok(0.0);
    };
    let intact = evaluate(
        net,
        set,
        &EvalOptions {
            arch: opts.arch,
            batch_size: opts.batch_size,
            gt_regions: opts.gt_regions,
            overrides: None,
        },
        "intact",
    )?;
    let perm: Vec<usize> = (0..set.len()).collect();
    let same = eval_permuted(net, set, opts, j, &outputs, &perm)?;
    Ok(delta_m_reports(&intact, opts.reference)? - delta_m_reports(&same, opts.reference)?)
}

/// `N x N` block importances; rows are targets, columns sources.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMatrix {
    pub tasks: Vec<String>,
    pub drops: Vec<f64>,
    pub absent: Vec<bool>,
    pub repetitions: usize,
}

impl ImportanceMatrix {
    pub fn compute<T: Real>(net: &MultiTaskNet<T>, set: &LabeledSet, opts: &ImportanceOptions<'_>) -> Result<Self> {
        let n = net.num_tasks();
        let mut drops = Vec::with_capacity(n * n);
        let mut absent = Vec::with_capacity(n * n);
        for t in 0..n {
            for s in 0..n {
                let b = permutation_importance(net, set, t, s, opts)?;
                drops.push(b.drop);
                absent.push(b.absent);
            }
        }
        Ok(ImportanceMatrix {
            tasks: net.tasks.iter().map(|t| t.name.clone()).collect(),
            drops,
            absent,
            repetitions: opts.repetitions,
        })
    }

    pub fn get(&self, target: usize, source: usize) -> f64 {
        self.drops[target * self.tasks.len() + source]
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("target,source,drop,absent\n");
        let n = self.tasks.len();
        for t in 0..n {
            for s in 0..n {
                let j = t * n + s;
                out.push_str(&format!("{},{},{},{}\n", self.tasks[t], self.tasks[s], self.drops[j], self.absent[j]));
            }
        }
        out
    }

    /// Gray heatmap with `cell` pixels per block, min-max scaled.
    pub fn pgm(&self, cell: usize) -> Vec<u8> {
        let n = self.tasks.len();
        let gray = pnm::normalize_gray(&self.drops);
        let side = n * cell;
        let pixels: Vec<u8> = (0..side * side).map(|p| gray[(p / side / cell) * n + (p % side) / cell]).collect();
        pnm::pgm_bytes(side, side, &pixels)
    }
}

fn check_runs<R: AsRef<[usize]>>(runs: &[R]) -> Result<usize> {
    if runs.len() < 2 {
        return bad(format!("agreement needs at least 2 runs, got {}", runs.len()));
    }
    let len = runs[0].as_ref().len();
    if len == 0 || runs.iter().any(|r| r.as_ref().len() != len) {
        return bad("runs must be non-empty and of equal length");
    }
    Ok(len)
}

/// Context selections as category indices.
pub fn as_categories(runs: &[Vec<ContextType>]) -> Vec<Vec<usize>> {
    runs.iter().map(|r| r.iter().map(|c| c.index()).collect()).collect()
}

fn pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |a| (a + 1..n).map(move |b| (a, b)))
}

fn agree(a: &[usize], b: &[usize]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
}

/// Mean over unordered run pairs of the fraction of blocks they agree on.
pub fn percentage_agreement<R: AsRef<[usize]>>(runs: &[R]) -> Result<f64> {
    check_runs(runs)?;
    let (sum, count) = pairs(runs.len()).fold((0.0, 0usize), |(s, c), (a, b)| (s + agree(runs[a].as_ref(), runs[b].as_ref()), c + 1));
    Ok(sum / count as f64)
}

/// Per-block fraction of run pairs choosing the same category.
pub fn block_agreement<R: AsRef<[usize]>>(runs: &[R]) -> Result<Vec<f64>> {
    let len = check_runs(runs)?;
    let npairs = pairs(runs.len()).count() as f64;
    Ok((0..len)
        .map(|j| pairs(runs.len()).filter(|&(a, b)| runs[a].as_ref()[j] == runs[b].as_ref()[j]).count() as f64 / npairs)
        .collect())
}

/// Chance-corrected agreement of two raters over `categories` classes.
/// With `p_e = 1` both raters used one identical category throughout, which
/// counts as full agreement when they also agree everywhere.
pub fn cohens_kappa(a: &[usize], b: &[usize], categories: usize) -> Result<f64> {
    if a.is_empty() || a.len() != b.len() {
        return bad(format!("kappa needs equal non-empty decision lists, got {} and {}", a.len(), b.len()));
    }
    if a.iter().chain(b).any(|&c| c >= categories) {
        return bad(format!("category outside 0..{categories}"));
    }
    let n = a.len() as f64;
    let mut ma = vec![0usize; categories];
    let mut mb = vec![0usize; categories];
    for (&x, &y) in a.iter().zip(b) {
        ma[x] += 1;
        mb[y] += 1;
    }
    let p_o = agree(a, b);
    let p_e: f64 = ma.iter().zip(&mb).map(|(&x, &y)| (x as f64 / n) * (y as f64 / n)).sum();
    if p_e >= 1.0 {
        return Ok(if p_o >= 1.0 { 1.0 } else { 0.0 });
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Mean pairwise Cohen's kappa.
pub fn lights_kappa<R: AsRef<[usize]>>(runs: &[R], categories: usize) -> Result<f64> {
    check_runs(runs)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (a, b) in pairs(runs.len()) {
        sum += cohens_kappa(runs[a].as_ref(), runs[b].as_ref(), categories)?;
        count += 1;
    }
    Ok(sum / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairKappa {
    pub run_a: usize,
    pub run_b: usize,
    pub kappa: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub percentage_agreement: f64,
    pub lights_kappa: f64,
    pub pairs: Vec<PairKappa>,
    pub block_agreement: Vec<f64>,
}

impl AgreementReport {
    pub fn from_runs(runs: &[Vec<ContextType>]) -> Result<Self> {
        let cats = as_categories(runs);
        let pairs = pairs(cats.len())
            .map(|(a, b)| {
                Ok(PairKappa {
                    run_a: a,
                    run_b: b,
                    kappa: cohens_kappa(&cats[a], &cats[b], ContextType::COUNT)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AgreementReport {
            percentage_agreement: percentage_agreement(&cats)?,
            lights_kappa: lights_kappa(&cats, ContextType::COUNT)?,
            pairs,
            block_agreement: block_agreement(&cats)?,
        })
    }
}

/// Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return bad(format!("correlation needs two equal series of length >= 2, got {} and {}", x.len(), y.len()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return bad("correlation of a constant series");
    }
    Ok(sxy / (sxx * syy).sqrt())
}
