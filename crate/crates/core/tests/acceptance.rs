//! Acceptance harness: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,3,7` runs a subset. Failures are reported on stdout;
//! the process exits nonzero on them only with `ACCEPTANCE_STRICT=1`.
//! Criteria 6 and 8 share their trained models, and 6 needs the architecture
//! voted in 5.

use std::collections::HashSet;
use std::process::ExitCode;
use std::time::Instant;

use atrc::analysis::{cohens_kappa, delta_m, delta_m_reports, identity_permutation_drop, lights_kappa, permutation_importance, ImportanceOptions};
use atrc::autodiff::suite::primitive_checks;
use atrc::autodiff::Tape;
use atrc::checkpoint::Checkpoint;
use atrc::contexts::{attention_quadratic, from_tokens, global_linearized, local_context, spatial_softmax, to_tokens, ContextType};
use atrc::label_space::{angle_deg, convex_hull, fit_normal_codebook, DepthBinning, Vec3};
use atrc::nas::{entropy, gumbel_noise, gumbel_softmax_sample, gumbel_softmax_tape, softmax, ArchParams};
use atrc::pipeline::{
    network_gradcheck, run_search, single_task_baseline, thread_budget, train_model, AtrcMode, EvalArch, Experiment, ExperimentConfig,
    MetricsReport, ModelConfig, SearchOutcome, TrainState,
};
use atrc::rng::{keyed, stream};
use atrc::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

type Check = Result<(bool, String), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

const SEARCH_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const TRAIN_SEEDS: [u64; 3] = [0, 1, 2];
const FREEZE_GAP: f64 = 0.3;

// ---------------------------------------------------------------- 1

fn delta_m_rows() -> Check {
    // Per-task means: mIoU, depth RMSE, normal angle, boundary F.
    let gammas = [0u8, 1, 1, 0];
    let single = [38.02, 0.6104, 20.94, 76.22];
    let mtl = delta_m(&[36.35, 0.6284, 21.02, 76.36], &single, &gammas).map_err(err)?;
    let mti = delta_m(&[39.89, 0.5824, 20.57, 76.60], &single, &gammas).map_err(err)?;
    let ok = (mtl - -1.89).abs() <= 0.01 && (mti - 2.94).abs() <= 0.01;
    Ok((ok, format!("multi-task baseline {mtl:+.4}%, MTI-Net {mti:+.4}%")))
}

// ---------------------------------------------------------------- 2

fn gradient_suite() -> Check {
    let mut worst_prim = 0.0f64;
    let mut worst_net = 0.0f64;
    let mut failed = Vec::new();
    let mut count = 0;
    let mut kinks = 0;
    for seed in 0..10 {
        for (name, r) in primitive_checks(seed, 1e-4).map_err(err)? {
            count += 1;
            kinks += r.kinks;
            worst_prim = worst_prim.max(r.max_rel_error);
            if !r.passed() {
                failed.push(format!("{name}@{seed}"));
            }
        }
        let r = network_gradcheck(seed, 1e-3).map_err(err)?;
        kinks += r.kinks;
        worst_net = worst_net.max(r.max_rel_error);
        if !r.passed() {
            failed.push(format!("network@{seed}"));
        }
    }
    Ok((
        failed.is_empty(),
        format!(
            "{count} primitive checks worst {worst_prim:.2e}, network worst {worst_net:.2e}, {kinks} entries retreated from a kink, failed {failed:?}"
        ),
    ))
}

// ---------------------------------------------------------------- 3

fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// `out_i = sum_j (q_i . k_j) v_j / sum_j (q_i . k_j)`, token-major.
fn linear_kernel_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Vec<f64> {
    let (b, l, dk) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let dv = v.shape()[2];
    let mut out = vec![0.0; b * l * dv];
    for bi in 0..b {
        for i in 0..l {
            let mut den = 0.0;
            let mut num = vec![0.0; dv];
            for j in 0..l {
                let s: f64 = (0..dk).map(|c| q.at(&[bi, i, c]) * k.at(&[bi, j, c])).sum();
                den += s;
                for (c, n) in num.iter_mut().enumerate() {
                    *n += s * v.at(&[bi, j, c]);
                }
            }
            for c in 0..dv {
                out[(bi * l + i) * dv + c] = num[c] / den;
            }
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn attention_equivalences() -> Check {
    let mut rng = keyed(3, 0, 0);
    let mut linear = 0.0f64;
    for l in [1, 2, 7, 16, 33, 64] {
        let q = rand_tensor(&mut rng, &[2, l, 5], 0.0, 1.0);
        let k = rand_tensor(&mut rng, &[2, l, 5], 0.0, 1.0);
        let v = rand_tensor(&mut rng, &[2, l, 3], -1.0, 1.0);
        let mut tape = Tape::<f64>::new();
        let (qv, kv, vv) = (tape.leaf(q.clone()), tape.leaf(k.clone()), tape.leaf(v.clone()));
        let out = global_linearized(&mut tape, qv, kv, vv).map_err(err)?;
        linear = linear.max(max_diff(tape.value(out).data(), &linear_kernel_oracle(&q, &k, &v)));
    }

    let mut local = 0.0f64;
    let mut identity = 0.0f64;
    for (h, w) in [(5, 7), (6, 6), (1, 9)] {
        let q = rand_tensor(&mut rng, &[2, 4, h, w], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[2, 4, h, w], -1.0, 1.0);
        let v = rand_tensor(&mut rng, &[2, 3, h, w], -1.0, 1.0);
        let mut tape = Tape::<f64>::new();
        let (qv, kv, vv) = (tape.leaf(q), tape.leaf(k), tape.leaf(v.clone()));
        let full = 2 * h.max(w) - 1;
        let windowed = local_context(&mut tape, qv, kv, vv, full).map_err(err)?;
        let (qt, kt, vt) = (
            to_tokens(&mut tape, qv).map_err(err)?,
            to_tokens(&mut tape, kv).map_err(err)?,
            to_tokens(&mut tape, vv).map_err(err)?,
        );
        let (dense, _) = attention_quadratic(&mut tape, qt, kt, vt).map_err(err)?;
        let dense = from_tokens(&mut tape, dense, h, w).map_err(err)?;
        local = local.max(max_diff(tape.value(windowed).data(), tape.value(dense).data()));
        let one = local_context(&mut tape, qv, kv, vv, 1).map_err(err)?;
        identity = identity.max(max_diff(tape.value(one).data(), v.data()));
    }
    let ok = linear <= 1e-5 && local <= 1e-6 && identity == 0.0;
    Ok((
        ok,
        format!("linearized vs quadratic {linear:.1e}, full window vs softmax {local:.1e}, window 1 vs v {identity:.1e}"),
    ))
}

// ---------------------------------------------------------------- 4

fn row_sum_error(data: &[f64], row: usize) -> f64 {
    data.chunks(row).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
}

fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.data.height = 8;
    c.data.width = 8;
    c.model = ModelConfig {
        backbone_width: 8,
        backbone_depth: 2,
        feature_width: 8,
        dk: 4,
        dv: 4,
        window: 3,
    };
    c.train.train_samples = 64;
    c.train.test_samples = 8;
    c.train.batch_size = 4;
    c.train.iterations = 12;
    c.train.codebook_samples = 500;
    c.search.total_iters = 12;
    c.search.alpha_lr = 0.05;
    c
}

fn mixed_arch() -> Vec<ContextType> {
    ContextType::ALL.iter().copied().cycle().take(16).collect()
}

fn normalization_invariants() -> Check {
    let mut rng = keyed(4, 0, 0);
    let mut attn = 0.0f64;
    let mut negative = false;
    for l in [3, 16, 64] {
        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(rand_tensor(&mut rng, &[2, l, 4], -3.0, 3.0));
        let k = tape.leaf(rand_tensor(&mut rng, &[2, l, 4], -3.0, 3.0));
        let v = tape.leaf(rand_tensor(&mut rng, &[2, l, 2], -1.0, 1.0));
        let (_, a) = attention_quadratic(&mut tape, q, k, v).map_err(err)?;
        attn = attn.max(row_sum_error(tape.value(a).data(), l));
        negative |= tape.value(a).data().iter().any(|&x| x < 0.0);
    }

    // Rows of a trained model's contexts, f32 storage.
    let exp = Experiment::prepare(tiny_config()).map_err(err)?;
    let st = train_model(&exp, &AtrcMode::Fixed { arch: mixed_arch() }, 1, false).map_err(err)?;
    let batch = exp.test.batch(&[0]).map_err(err)?;
    let arch = mixed_arch();
    for j in 0..16 {
        if arch[j] == ContextType::None {
            continue;
        }
        for pixel in [0, 27, 63] {
            let row = st.net.attention_row(&batch, j / 4, j % 4, arch[j], pixel, false).map_err(err)?;
            attn = attn.max((row.iter().sum::<f64>() - 1.0).abs());
            negative |= row.iter().any(|&x| x < 0.0);
        }
    }

    let mut gumbel = 0.0f64;
    let mut grng = keyed(4, stream::GUMBEL, 0);
    for _ in 0..1000 {
        let alpha: Vec<f64> = (0..5).map(|_| grng.gen_range(-4.0..4.0)).collect();
        let noise = gumbel_noise(&mut grng, 5);
        for lambda in [1.0, 0.3, 0.05] {
            let p = gumbel_softmax_sample(&alpha, &noise, lambda).map_err(err)?;
            gumbel = gumbel.max((p.iter().sum::<f64>() - 1.0).abs());
            negative |= p.iter().any(|&x| x < 0.0);
        }
    }
    let mut tape = Tape::<f32>::new();
    let alpha = tape.leaf(Tensor::from_fn(&[16, 5], |_| grng.gen_range(-4.0f32..4.0)));
    let noise = gumbel_noise(&mut grng, 80);
    let g = gumbel_softmax_tape(&mut tape, alpha, &noise, 0.05).map_err(err)?;
    let g: Vec<f64> = tape.value(g).data().iter().map(|&x| x as f64).collect();
    gumbel = gumbel.max(row_sum_error(&g, 5));

    // Region maps are stored region-major, so every region is one row.
    let mut regions = 0.0f64;
    let mut tape = Tape::<f32>::new();
    let scores = tape.leaf(Tensor::from_fn(&[2, 40, 16, 16], |_| grng.gen_range(-8.0f32..8.0)));
    let a_hat = spatial_softmax(&mut tape, scores).map_err(err)?;
    let a: Vec<f64> = tape.value(a_hat).data().iter().map(|&x| x as f64).collect();
    regions = regions.max(row_sum_error(&a, 256));

    let h0 = ArchParams::new(16).mean_entropy();
    let h_direct = entropy(&softmax(&[0.0; 5]));
    let h_err = (h0 - 5f64.ln()).abs().max((h_direct - 5f64.ln()).abs());

    let ok = attn <= 1e-6 && gumbel <= 1e-6 && !negative && regions <= 1e-5 && h_err <= 1e-9;
    Ok((
        ok,
        format!("attention rows {attn:.1e}, gumbel {gumbel:.1e}, region columns {regions:.1e}, H(0) - ln5 {h_err:.1e}, negative entries {negative}"),
    ))
}

// ---------------------------------------------------------------- 5

fn gap_oracle(alpha: &[f64]) -> (usize, f64) {
    let m = alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = alpha.iter().map(|a| (a - m).exp()).collect();
    let s: f64 = e.iter().sum();
    let p: Vec<f64> = e.iter().map(|x| x / s).collect();
    let mut best = 0;
    for i in 1..p.len() {
        if p[i] > p[best] {
            best = i;
        }
    }
    let second = (0..p.len()).filter(|&i| i != best).map(|i| p[i]).fold(f64::NEG_INFINITY, f64::max);
    (best, p[best] - second)
}

fn vote_oracle(runs: &[Vec<ContextType>]) -> Vec<ContextType> {
    (0..runs[0].len())
        .map(|j| {
            let mut best = (ContextType::ALL[0], 0usize);
            for c in ContextType::ALL {
                let n = runs.iter().filter(|r| r[j] == c).count();
                if n > best.1 {
                    best = (c, n);
                }
            }
            best.0
        })
        .collect()
}

/// Replays one search step by step and checks every freeze decision.
fn replay_freezing(exp: &Experiment, seed: u64) -> Result<(usize, Vec<ContextType>), String> {
    let mut st = TrainState::new(&exp.config, exp.regions.clone(), &AtrcMode::Search, seed, false).map_err(err)?;
    let mut decisions = 0;
    while !st.finished() {
        let before = st.arch.clone().expect("search state");
        st.train_step(&exp.config, &exp.train).map_err(err)?;
        let after = st.arch.as_ref().expect("search state");
        for j in 0..after.blocks {
            let logits = after.logits(j);
            if let Some(c) = before.frozen[j] {
                if after.frozen[j] != Some(c) || logits != before.logits(j) {
                    return Err(format!("frozen block {j} changed at iteration {}", st.iteration));
                }
                continue;
            }
            let (best, gap) = gap_oracle(logits);
            let want = (gap > FREEZE_GAP).then(|| ContextType::ALL[best]);
            if after.frozen[j] != want {
                return Err(format!("block {j} at iteration {}: frozen {:?}, oracle {want:?} (gap {gap})", st.iteration, after.frozen[j]));
            }
            decisions += 1;
        }
    }
    Ok((decisions, st.arch.expect("search state").selection()))
}

fn search_mechanics(exp: &Experiment, outcome: &mut Option<SearchOutcome>) -> Check {
    let result = run_search(exp, &SEARCH_SEEDS, thread_budget()).map_err(err)?;
    let mut notes = Vec::new();
    let mut ok = result.failures.is_empty() && result.runs.len() == SEARCH_SEEDS.len();
    let fractions: Vec<f64> = result.runs.iter().map(|r| r.frozen_fraction).collect();
    ok &= fractions.iter().all(|&f| f >= 0.8);
    notes.push(format!("frozen fractions {fractions:?}"));

    // Final-state oracle for every run: frozen logits stop moving, so a
    // frozen block still shows its gap and an unfrozen one never reached it.
    let mut mismatches = 0;
    for r in &result.runs {
        for j in 0..r.selection.len() {
            let (best, gap) = gap_oracle(&r.final_alpha[j * 5..(j + 1) * 5]);
            let frozen = r.freeze_iter[j].is_some();
            if frozen != (gap > FREEZE_GAP) || (frozen && r.selection[j] != ContextType::ALL[best]) {
                mismatches += 1;
            }
        }
    }
    ok &= mismatches == 0;
    notes.push(format!("final-state freeze mismatches {mismatches}"));

    match replay_freezing(exp, SEARCH_SEEDS[0]) {
        Ok((decisions, selection)) => {
            let same = selection == result.runs[0].selection;
            ok &= same;
            notes.push(format!("replayed {decisions} per-step freeze decisions, selection reproduced {same}"));
        }
        Err(e) => {
            ok = false;
            notes.push(format!("replay: {e}"));
        }
    }

    let selections: Vec<Vec<ContextType>> = result.runs.iter().map(|r| r.selection.clone()).collect();
    let votes_ok = vote_oracle(&selections) == result.voted;
    ok &= votes_ok;
    notes.push(format!("vote matches counting oracle {votes_ok}"));

    let mut freq_err = 0.0f64;
    let mut rng = keyed(5, stream::GUMBEL, 1);
    for alpha in [vec![0.0; 5], vec![1.0, -0.5, 0.3, 2.0, 0.0], vec![-2.0, 3.0, 0.0, 0.0, 1.0]] {
        let draws = 100_000;
        let mut counts = [0usize; 5];
        for _ in 0..draws {
            let g = gumbel_noise(&mut rng, 5);
            let z: Vec<f64> = alpha.iter().zip(&g).map(|(a, g)| a + g).collect();
            counts[(0..5).fold(0, |b, i| if z[i] > z[b] { i } else { b })] += 1;
        }
        let m = alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = alpha.iter().map(|a| (a - m).exp()).sum();
        for i in 0..5 {
            freq_err = freq_err.max((counts[i] as f64 / draws as f64 - (alpha[i] - m).exp() / s).abs());
        }
    }
    ok &= freq_err <= 0.01;
    notes.push(format!("gumbel argmax frequency error {freq_err:.4}"));
    notes.push(format!("voted {}", result.voted.iter().map(|c| c.name()).collect::<Vec<_>>().join(",")));
    *outcome = Some(result);
    Ok((ok, notes.join("; ")))
}

// ---------------------------------------------------------------- 6 and 8

#[derive(Default)]
struct DeskRuns {
    /// `(model, seed, delta_m)`.
    rows: Vec<(String, u64, f64)>,
}

impl DeskRuns {
    fn mean(&self, model: &str) -> f64 {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.0 == model).map(|r| r.2).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn desk_runs(exp: &Experiment, voted: Option<&[ContextType]>, need_fixed: bool, need_gt: bool) -> Result<DeskRuns, String> {
    let mut runs = DeskRuns::default();
    let bs = exp.config.train.batch_size;
    for seed in TRAIN_SEEDS {
        let base = single_task_baseline(exp, seed, "single").map_err(err)?;
        let mut models: Vec<(String, AtrcMode, bool)> = Vec::new();
        if need_fixed {
            models.push(("mtl".into(), AtrcMode::None, false));
            if let Some(v) = voted {
                models.push(("voted".into(), AtrcMode::Fixed { arch: v.to_vec() }, false));
            }
            for c in [ContextType::Global, ContextType::Local] {
                models.push((c.name().into(), AtrcMode::Single { context: c }, false));
            }
        }
        for c in [ContextType::TLabel, ContextType::SLabel] {
            models.push((c.name().into(), AtrcMode::Single { context: c }, false));
            if need_gt {
                models.push((format!("{}_gt", c.name()), AtrcMode::Single { context: c }, true));
            }
        }
        for (name, mode, gt) in models {
            let st = train_model(exp, &mode, seed, gt).map_err(err)?;
            let report: MetricsReport = st.evaluate(&exp.test, bs, &name).map_err(err)?;
            let dm = delta_m_reports(&report, &base).map_err(err)?;
            eprintln!("  seed {seed} {name:<10} delta_m {dm:+.3}");
            runs.rows.push((name, seed, dm));
        }
    }
    Ok(runs)
}

fn end_to_end(runs: &DeskRuns, voted: bool) -> Check {
    if !voted {
        return Ok((false, "no voted architecture (criterion 5 did not run)".into()));
    }
    let mtl = runs.mean("mtl");
    let v = runs.mean("voted");
    let singles: Vec<(&str, f64)> = ["global", "local", "t_label", "s_label"].iter().map(|&c| (c, runs.mean(c))).collect();
    let beats = singles.iter().filter(|s| s.1 > mtl).count();
    let ok = v >= mtl && beats > 0;
    let list: Vec<String> = singles.iter().map(|(c, d)| format!("{c} {d:+.3}")).collect();
    Ok((
        ok,
        format!("mean delta_m over {} seeds: voted {v:+.3}, multi-task baseline {mtl:+.3}, {}; {beats} single contexts beat the baseline", TRAIN_SEEDS.len(), list.join(", ")),
    ))
}

fn gt_regions(runs: &DeskRuns) -> Check {
    let pred = (runs.mean("t_label") + runs.mean("s_label")) / 2.0;
    let gt = (runs.mean("t_label_gt") + runs.mean("s_label_gt")) / 2.0;
    Ok((
        gt > pred,
        format!(
            "label-context mean delta_m: ground-truth regions {gt:+.3} (t {:+.3}, s {:+.3}), predicted {pred:+.3} (t {:+.3}, s {:+.3})",
            runs.mean("t_label_gt"),
            runs.mean("s_label_gt"),
            runs.mean("t_label"),
            runs.mean("s_label")
        ),
    ))
}

// ---------------------------------------------------------------- 7

fn sphere(n: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = keyed(seed, 0, 7);
    (0..n)
        .map(|_| {
            let v: Vec3 = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            [v[0] / l, v[1] / l, v[2] / l]
        })
        .collect()
}

fn label_space_suite() -> Check {
    let mut notes = Vec::new();
    let mut ok = true;
    let mut ratio_err = 0.0f64;
    for (lo, hi, n) in [(0.5, 8.0, 40), (0.7, 9.3, 40), (1.0, 10.0, 7), (0.01, 100.0, 64)] {
        let b = DepthBinning::new(lo, hi, n).map_err(err)?;
        let r0 = (hi / lo).powf(1.0 / n as f64);
        for w in b.edges.windows(2) {
            ratio_err = ratio_err.max((w[1] / w[0] - r0).abs());
        }
    }
    ok &= ratio_err <= 1e-9;
    let edges = DepthBinning::new(0.5, 8.0, 4).map_err(err)?.edges;
    let exact = edges == [0.5, 1.0, 2.0, 4.0, 8.0];
    ok &= exact;
    notes.push(format!("edge ratio error {ratio_err:.1e}, (0.5, 8, 4) edges {edges:?}"));

    let pts = sphere(40, 1);
    let tris = convex_hull(&pts).map_err(err)?;
    let edge_set: HashSet<(usize, usize)> = tris
        .iter()
        .flat_map(|t| [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])])
        .map(|(a, b)| (a.min(b), a.max(b)))
        .collect();
    let euler = 40 + tris.len() as i64 - edge_set.len() as i64;
    ok &= tris.len() == 76 && euler == 2;
    notes.push(format!("hull {} triangles, V - E + F = {euler}", tris.len()));

    let book = fit_normal_codebook(&sphere(4000, 2), 40, 0).map_err(err)?.codebook;
    let probe = sphere(2000, 3);
    let mut total = 0.0;
    for &n in &probe {
        total += angle_deg(n, book.decode(&book.encode(n).map_err(err)?).map_err(err)?);
    }
    let mean = total / probe.len() as f64;
    let mut one_hot_exact = true;
    for c in 0..book.len() {
        let mut p = vec![0.0; book.len()];
        p[c] = 1.0;
        one_hot_exact &= book.decode(&p).map_err(err)? == book.codewords[c];
    }
    ok &= mean < 10.0 && one_hot_exact;
    notes.push(format!("round trip mean {mean:.3} deg, one-hot decode exact {one_hot_exact}"));
    Ok((ok, notes.join("; ")))
}

// ---------------------------------------------------------------- 9

/// Cohen's kappa from the contingency table.
fn kappa_oracle(a: &[usize], b: &[usize], k: usize) -> f64 {
    let n = a.len() as f64;
    let mut table = vec![vec![0.0; k]; k];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1.0;
    }
    let po: f64 = (0..k).map(|i| table[i][i]).sum::<f64>() / n;
    let pe: f64 = (0..k).map(|i| table[i].iter().sum::<f64>() * (0..k).map(|r| table[r][i]).sum::<f64>()).sum::<f64>() / (n * n);
    (po - pe) / (1.0 - pe)
}

fn analysis_suite() -> Check {
    let mut notes = Vec::new();
    let exp = Experiment::prepare(tiny_config()).map_err(err)?;
    let arch = mixed_arch();
    let st = train_model(&exp, &AtrcMode::Fixed { arch: arch.clone() }, 2, false).map_err(err)?;
    let bs = exp.config.train.batch_size;
    let reference = st.evaluate(&exp.test, bs, "intact").map_err(err)?;
    let eval_arch = EvalArch::Fixed(arch.clone());
    let opts = ImportanceOptions {
        arch: &eval_arch,
        reference: &reference,
        repetitions: 3,
        seed: 0,
        batch_size: bs,
        gt_regions: false,
    };
    let mut none_ok = true;
    let mut nones = 0;
    for j in (0..16).filter(|&j| arch[j] == ContextType::None) {
        let b = permutation_importance(&st.net, &exp.test, j / 4, j % 4, &opts).map_err(err)?;
        none_ok &= b.absent && b.drop == 0.0;
        nones += 1;
    }
    let identity = identity_permutation_drop(&st.net, &exp.test, 1, &opts).map_err(err)?;
    let mut ok = none_ok && nones > 0 && identity == 0.0;
    notes.push(format!("{nones} none blocks with zero importance {none_ok}, identity permutation drop {identity}"));

    let mut rng = keyed(9, 0, 0);
    let a: Vec<usize> = (0..500).map(|_| rng.gen_range(0..5)).collect();
    let k_same = cohens_kappa(&a, &a, 5).map_err(err)?;
    let l_same = lights_kappa(&[a.clone(), a.clone(), a.clone()], 5).map_err(err)?;
    ok &= k_same == 1.0 && l_same == 1.0;
    notes.push(format!("identical runs kappa {k_same}, Light's {l_same}"));

    let x: Vec<usize> = (0..100_000).map(|_| rng.gen_range(0..5)).collect();
    let y: Vec<usize> = (0..100_000).map(|_| rng.gen_range(0..5)).collect();
    let k_ind = cohens_kappa(&x, &y, 5).map_err(err)?;
    ok &= k_ind.abs() <= 0.02;
    notes.push(format!("independent uniform kappa {k_ind:+.4}"));

    let mut light_err = 0.0f64;
    for trial in 0..20 {
        let m = 2 + trial % 5;
        // Skewed choices so the runs agree above chance.
        let runs: Vec<Vec<usize>> = (0..m)
            .map(|_| (0..30).map(|_| if rng.gen_bool(0.5) { 0 } else { rng.gen_range(0..5) }).collect())
            .collect();
        let mut sum = 0.0;
        let mut pairs = 0.0;
        for i in 0..m {
            for j in i + 1..m {
                sum += kappa_oracle(&runs[i], &runs[j], 5);
                pairs += 1.0;
            }
        }
        light_err = light_err.max((lights_kappa(&runs, 5).map_err(err)? - sum / pairs).abs());
    }
    ok &= light_err <= 1e-12;
    notes.push(format!("Light's kappa vs pair loop {light_err:.1e}"));
    Ok((ok, notes.join("; ")))
}

// ---------------------------------------------------------------- 10

fn metrics_csv(report: &MetricsReport) -> Vec<u8> {
    let mut s = String::from(MetricsReport::CSV_HEADER);
    s.push('\n');
    for row in report.csv_rows() {
        s.push_str(&row);
        s.push('\n');
    }
    s.into_bytes()
}

fn determinism() -> Check {
    let exp = Experiment::prepare(tiny_config()).map_err(err)?;
    let bs = exp.config.train.batch_size;
    let mut notes = Vec::new();
    let mut ok = true;
    for mode in [AtrcMode::Search, AtrcMode::Fixed { arch: mixed_arch() }, AtrcMode::None] {
        let label = match &mode {
            AtrcMode::Search => "search",
            AtrcMode::Fixed { .. } => "fixed",
            _ => "baseline",
        };
        let csv = || -> Result<Vec<u8>, String> {
            let st = train_model(&exp, &mode, 11, false).map_err(err)?;
            Ok(metrics_csv(&st.evaluate(&exp.test, bs, "run").map_err(err)?))
        };
        let same_csv = csv()? == csv()?;

        let full = train_model(&exp, &mode, 11, false).map_err(err)?;
        let mut half = TrainState::new(&exp.config, exp.regions.clone(), &mode, 11, false).map_err(err)?;
        for _ in 0..exp.config.train.iterations / 2 {
            half.train_step(&exp.config, &exp.train).map_err(err)?;
        }
        let dir = tempfile::tempdir().map_err(err)?;
        let path = dir.path().join("half.atrc");
        half.to_checkpoint().map_err(err)?.save(&path).map_err(err)?;
        let mut resumed = TrainState::from_checkpoint(&exp.config, &Checkpoint::load(&path).map_err(err)?).map_err(err)?;
        resumed.run(&exp.config, &exp.train).map_err(err)?;
        let same_state = full.to_checkpoint().map_err(err)?.to_bytes() == resumed.to_checkpoint().map_err(err)?.to_bytes();
        let tail: Vec<u32> = full.log[exp.config.train.iterations / 2..].iter().map(|l| (l.loss as f32).to_bits()).collect();
        let same_losses = tail == resumed.log.iter().map(|l| (l.loss as f32).to_bits()).collect::<Vec<_>>();
        ok &= same_csv && same_state && same_losses;
        notes.push(format!("{label}: csv identical {same_csv}, resumed state identical {same_state}, losses identical {same_losses}"));
    }
    Ok((ok, notes.join("; ")))
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let only: Option<HashSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let want = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut failures = 0;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Check| {
        if !want(n) {
            return;
        }
        let t0 = Instant::now();
        let (status, detail) = match f() {
            Ok((true, d)) => ("PASS", d),
            Ok((false, d)) => ("FAIL", d),
            Err(e) => ("FAIL", format!("error: {e}")),
        };
        if status == "FAIL" {
            failures += 1;
        }
        println!("criterion {n:>2} {name}: {status} [{:.1}s] {detail}", t0.elapsed().as_secs_f64());
    };

    report(1, "delta_m arithmetic", &mut delta_m_rows);
    report(2, "gradient suite", &mut gradient_suite);
    report(3, "attention equivalences", &mut attention_equivalences);
    report(4, "normalization invariants", &mut normalization_invariants);

    let desk = if want(5) || want(6) || want(8) {
        match Experiment::prepare(ExperimentConfig::desk()) {
            Ok(e) => Some(e),
            Err(e) => {
                println!("desk experiment could not be prepared: {e}");
                None
            }
        }
    } else {
        None
    };
    let mut outcome = None;
    if let Some(exp) = &desk {
        report(5, "search mechanics", &mut || search_mechanics(exp, &mut outcome));
    } else {
        report(5, "search mechanics", &mut || Err("no desk experiment".into()));
    }

    let runs = match &desk {
        Some(exp) if want(6) || want(8) => {
            let voted = outcome.as_ref().map(|o| o.voted.clone());
            desk_runs(exp, voted.as_deref(), want(6), want(8))
        }
        _ => Err("no desk experiment".into()),
    };
    let has_voted = outcome.is_some();
    report(6, "end-to-end ordering", &mut || end_to_end(runs.as_ref().map_err(Clone::clone)?, has_voted));
    report(7, "label-space suite", &mut label_space_suite);
    report(8, "ground-truth regions", &mut || gt_regions(runs.as_ref().map_err(Clone::clone)?));
    report(9, "analysis suite", &mut analysis_suite);
    report(10, "determinism and persistence", &mut determinism);

    if failures == 0 {
        println!("all criteria passed");
        return ExitCode::SUCCESS;
    }
    println!("{failures} criteria failed");
    if std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
