//! Command implementations. Each writes its outputs plus a manifest into
//! `--out` and fails when any requested work or invariant check fails.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use atrc::analysis::{delta_m_reports, pearson, AgreementReport, ImportanceMatrix, ImportanceOptions};
use atrc::autodiff::suite::primitive_checks;
use atrc::checkpoint::Checkpoint;
use atrc::contexts::{export_attention_map, ContextType};
use atrc::pipeline::{
    network_gradcheck, run_search, single_task_baseline, thread_budget, train_model, AtrcMode, EvalArch, Experiment,
    ExperimentConfig, MetricsReport, SearchOutcome, StepLog, TrainState,
};
use atrc::synth::{dataset, export_sample_images, Split};
use serde::{Deserialize, Serialize};

use crate::manifest::RunManifest;
use crate::output::{csv, ensure_dir, read_json, write_json, write_text};
use crate::{Common, SplitArg};

/// Tolerances of the gradient checks.
const PRIMITIVE_TOL: f64 = 1e-4;
const NETWORK_TOL: f64 = 1e-3;

/// Architecture file exchanged between `search` and `retrain`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchFile {
    pub tasks: Vec<String>,
    /// Row-major `target x source` contexts.
    pub arch: Vec<ContextType>,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    match &common.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn start(common: &Common, command: &str, cfg: &ExperimentConfig, seeds: Vec<u64>) -> Result<RunManifest> {
    ensure_dir(&common.out)?;
    let m = RunManifest::start(command, common.config.as_deref(), cfg, seeds, &common.out);
    m.write()?;
    Ok(m)
}

fn log_csv(rows: impl IntoIterator<Item = (u64, StepLog)>) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    csv(
        "seed,iteration,loss,lr,lambda,omega_h,mean_entropy,frozen",
        rows.into_iter().map(|(seed, l)| {
            format!(
                "{seed},{},{},{},{},{},{},{}",
                l.iteration,
                l.loss,
                l.lr,
                opt(l.lambda),
                opt(l.omega_h),
                opt(l.mean_entropy),
                l.frozen.map_or(String::new(), |f| f.to_string())
            )
        }),
    )
}

fn write_metrics(dir: &Path, report: &MetricsReport) -> Result<()> {
    write_text(&dir.join("metrics.csv"), &csv(MetricsReport::CSV_HEADER, report.csv_rows()))?;
    write_json(&dir.join("metrics.json"), report)
}

/// Range checks on reported metrics.
fn check_report(report: &MetricsReport) -> Result<()> {
    for m in &report.metrics {
        let ok = match m.metric.as_str() {
            "miou" | "boundary_f" => (0.0..=1.0).contains(&m.value),
            "rmse" => m.value >= 0.0 && m.value.is_finite(),
            "mean_angle_deg" => (0.0..=180.0).contains(&m.value),
            _ => m.value.is_finite(),
        };
        ensure!(ok, "metric {} of task {} out of range: {}", m.metric, m.task, m.value);
    }
    Ok(())
}

pub fn gen_data(common: &Common, count: usize, split: SplitArg) -> Result<()> {
    ensure!(count > 0, "count must be positive");
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.data.seed = s;
    }
    let m = start(common, "gen-data", &cfg, vec![cfg.data.seed])?;
    let (split, tag) = match split {
        SplitArg::Train => (Split::Train, "train"),
        SplitArg::Test => (Split::Test, "test"),
    };
    for (i, s) in dataset(&cfg.data, count, split).iter().enumerate() {
        export_sample_images(s, &cfg.data, common.out.join(format!("{tag}_{i:05}")))?;
    }
    m.finish()
}

fn search_seeds(cfg: &ExperimentConfig, seed: Option<u64>, runs: Option<usize>) -> Result<Vec<u64>> {
    let runs = runs.unwrap_or(cfg.search_seeds.len());
    ensure!(runs > 0, "at least one search run is needed");
    Ok(match seed {
        Some(s) => (0..runs as u64).map(|i| s + i).collect(),
        None => {
            ensure!(
                runs <= cfg.search_seeds.len(),
                "{runs} runs requested but the config lists {} seeds; pass --seed",
                cfg.search_seeds.len()
            );
            cfg.search_seeds[..runs].to_vec()
        }
    })
}

fn selection_table(tasks: &[String], arch: &[ContextType]) -> String {
    let w = tasks.iter().map(|t| t.len()).max().unwrap_or(0).max("target\\source".len()) + 2;
    let mut out = format!("{:w$}", "target\\source");
    for t in tasks {
        out.push_str(&format!("{t:w$}"));
    }
    out.push('\n');
    for (i, t) in tasks.iter().enumerate() {
        out.push_str(&format!("{t:w$}"));
        for c in &arch[i * tasks.len()..(i + 1) * tasks.len()] {
            out.push_str(&format!("{:w$}", c.name()));
        }
        out.push('\n');
    }
    out
}

pub fn search(common: &Common, runs: Option<usize>) -> Result<()> {
    let cfg = load_config(common)?;
    let seeds = search_seeds(&cfg, common.seed, runs)?;
    let m = start(common, "search", &cfg, seeds.clone())?;
    let exp = Experiment::prepare(cfg)?;
    let outcome = run_search(&exp, &seeds, thread_budget())?;
    let tasks: Vec<String> = exp.config.tasks.iter().map(|t| t.name.clone()).collect();
    let n = tasks.len();
    let dir = &common.out;

    write_json(&dir.join("search.json"), &outcome)?;
    let mut rows = Vec::new();
    let mut tables = String::new();
    for (k, r) in outcome.runs.iter().enumerate() {
        for j in 0..n * n {
            rows.push(format!(
                "{k},{},{},{},{},{}",
                r.seed,
                tasks[j / n],
                tasks[j % n],
                r.selection[j],
                r.freeze_iter[j].map_or(String::new(), |i| i.to_string())
            ));
        }
        tables.push_str(&format!("run {k} (seed {}), frozen {:.3}\n", r.seed, r.frozen_fraction));
        tables.push_str(&selection_table(&tasks, &r.selection));
        tables.push('\n');
    }
    tables.push_str("voted\n");
    tables.push_str(&selection_table(&tasks, &outcome.voted));
    write_text(&dir.join("selections.csv"), &csv("run,seed,target,source,context,freeze_iter", rows))?;
    write_text(&dir.join("selections.txt"), &tables)?;
    write_text(&dir.join("search_log.csv"), &log_csv(outcome.runs.iter().flat_map(|r| r.log.iter().map(|l| (r.seed, l.clone())))))?;
    write_json(
        &dir.join("voted_arch.json"),
        &ArchFile {
            tasks,
            arch: outcome.voted.clone(),
        },
    )?;
    if outcome.runs.len() >= 2 {
        write_agreement(dir, &AgreementReport::from_runs(&outcome.runs.iter().map(|r| r.selection.clone()).collect::<Vec<_>>())?)?;
    }
    m.finish()?;
    if !outcome.failures.is_empty() {
        bail!("{} of {} search runs failed: {:?}", outcome.failures.len(), seeds.len(), outcome.failures);
    }
    Ok(())
}

fn write_agreement(dir: &Path, report: &AgreementReport) -> Result<()> {
    write_json(&dir.join("agreement.json"), report)?;
    write_text(
        &dir.join("agreement.csv"),
        &csv("run_a,run_b,kappa", report.pairs.iter().map(|p| format!("{},{},{}", p.run_a, p.run_b, p.kappa))),
    )
}

/// Mode for a fixed architecture; all-none trains the plain multi-task
/// baseline.
fn mode_for(arch: &[ContextType]) -> AtrcMode {
    if arch.iter().all(|&c| c == ContextType::None) {
        AtrcMode::None
    } else {
        AtrcMode::Fixed { arch: arch.to_vec() }
    }
}

pub fn retrain(common: &Common, arch_path: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let arch: ArchFile = read_json(arch_path)?;
    let names: Vec<&str> = cfg.tasks.iter().map(|t| t.name.as_str()).collect();
    ensure!(
        arch.tasks.iter().map(String::as_str).eq(names.iter().copied()),
        "architecture tasks {:?} do not match the config's {:?}",
        arch.tasks,
        names
    );
    let seed = common.seed.unwrap_or(0);
    let mut m = start(common, "retrain", &cfg, vec![seed])?;
    m.inputs.push(arch_path.to_path_buf());
    m.write()?;
    let exp = Experiment::prepare(cfg)?;
    let st = train_model(&exp, &mode_for(&arch.arch), seed, exp.config.regions_from_gt)?;
    st.to_checkpoint()?.save(common.out.join("checkpoint.atrc"))?;
    write_text(&common.out.join("train_log.csv"), &log_csv(st.log.iter().map(|l| (seed, l.clone()))))?;
    let report = st.evaluate(&exp.test, exp.config.train.batch_size, &format!("retrain_seed{seed}"))?;
    write_metrics(&common.out, &report)?;
    check_report(&report)?;
    m.finish()
}

pub fn baseline(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let seed = common.seed.unwrap_or(0);
    let m = start(common, "baseline", &cfg, vec![seed])?;
    let exp = Experiment::prepare(cfg)?;
    let report = single_task_baseline(&exp, seed, &format!("single_task_seed{seed}"))?;
    write_metrics(&common.out, &report)?;
    check_report(&report)?;
    m.finish()
}

fn load_state(cfg: &ExperimentConfig, path: &Path) -> Result<TrainState> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    TrainState::from_checkpoint(cfg, &ck).with_context(|| format!("restoring {}", path.display()))
}

#[derive(Serialize)]
struct EvalSummary {
    report: MetricsReport,
    baseline: Option<PathBuf>,
    delta_m: Option<f64>,
}

pub fn eval(common: &Common, checkpoint: &Path, baseline: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let mut m = start(common, "eval", &cfg, Vec::new())?;
    m.inputs.push(checkpoint.to_path_buf());
    m.inputs.extend(baseline.map(Path::to_path_buf));
    m.write()?;
    let st = load_state(&cfg, checkpoint)?;
    m.seeds.push(st.seed);
    let exp = Experiment::prepare(cfg)?;
    let report = st.evaluate(&exp.test, exp.config.train.batch_size, "eval")?;
    write_metrics(&common.out, &report)?;
    let delta_m = match baseline {
        Some(p) => Some(delta_m_reports(&report, &read_json::<MetricsReport>(p)?)?),
        None => None,
    };
    write_json(
        &common.out.join("summary.json"),
        &EvalSummary {
            report: report.clone(),
            baseline: baseline.map(Path::to_path_buf),
            delta_m,
        },
    )?;
    check_report(&report)?;
    m.finish()
}

pub fn importance(common: &Common, checkpoint: &Path, baseline: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let seed = common.seed.unwrap_or(0);
    let mut m = start(common, "importance", &cfg, vec![seed])?;
    m.inputs.push(checkpoint.to_path_buf());
    m.inputs.extend(baseline.map(Path::to_path_buf));
    m.write()?;
    let st = load_state(&cfg, checkpoint)?;
    let exp = Experiment::prepare(cfg)?;
    let arch = st.eval_arch();
    let bs = exp.config.train.batch_size;
    let reference = match baseline {
        Some(p) => read_json::<MetricsReport>(p)?,
        None => st.evaluate(&exp.test, bs, "intact")?,
    };
    let matrix = if arch == EvalArch::Baseline {
        let n = exp.config.tasks.len();
        ImportanceMatrix {
            tasks: exp.config.tasks.iter().map(|t| t.name.clone()).collect(),
            drops: vec![0.0; n * n],
            absent: vec![true; n * n],
            repetitions: exp.config.importance_repetitions,
        }
    } else {
        let opts = ImportanceOptions {
            arch: &arch,
            reference: &reference,
            repetitions: exp.config.importance_repetitions,
            seed,
            batch_size: bs,
            gt_regions: st.gt_regions,
        };
        ImportanceMatrix::compute(&st.net, &exp.test, &opts)?
    };
    ensure!(matrix.drops.iter().all(|d| d.is_finite()), "non-finite importance");
    write_json(&common.out.join("importance.json"), &matrix)?;
    write_text(&common.out.join("importance.csv"), &matrix.csv())?;
    atrc::pnm::write(common.out.join("importance.pgm"), &matrix.pgm(16))?;
    m.finish()
}

#[derive(Serialize)]
struct Correlation {
    importance: Vec<f64>,
    block_agreement: Vec<f64>,
    pearson: f64,
}

pub fn agreement(common: &Common, search_path: &Path, importance: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let outcome: SearchOutcome = read_json(search_path)?;
    let mut m = start(common, "agreement", &cfg, outcome.runs.iter().map(|r| r.seed).collect())?;
    m.inputs.push(search_path.to_path_buf());
    m.inputs.extend(importance.map(Path::to_path_buf));
    m.write()?;
    let selections: Vec<Vec<ContextType>> = outcome.runs.iter().map(|r| r.selection.clone()).collect();
    let report = AgreementReport::from_runs(&selections)?;
    write_agreement(&common.out, &report)?;
    if let Some(p) = importance {
        let matrix: ImportanceMatrix = read_json(p)?;
        ensure!(
            matrix.drops.len() == report.block_agreement.len(),
            "importance has {} blocks, the search {}",
            matrix.drops.len(),
            report.block_agreement.len()
        );
        let r = pearson(&matrix.drops, &report.block_agreement)?;
        write_json(
            &common.out.join("correlation.json"),
            &Correlation {
                importance: matrix.drops,
                block_agreement: report.block_agreement.clone(),
                pearson: r,
            },
        )?;
    }
    m.finish()
}

#[derive(Serialize)]
struct GradcheckRow {
    check: String,
    seed: u64,
    max_rel_error: f64,
    max_abs_error: f64,
    entries: usize,
    tolerance: f64,
    passed: bool,
}

pub fn gradcheck(common: &Common, runs: usize) -> Result<()> {
    ensure!(runs > 0, "at least one seed is needed");
    let cfg = load_config(common)?;
    let first = common.seed.unwrap_or(0);
    let seeds: Vec<u64> = (first..first + runs as u64).collect();
    let m = start(common, "gradcheck", &cfg, seeds.clone())?;
    let mut rows = Vec::new();
    for &seed in &seeds {
        for (name, r) in primitive_checks(seed, PRIMITIVE_TOL)? {
            rows.push(GradcheckRow {
                check: name.into(),
                seed,
                passed: r.passed(),
                max_rel_error: r.max_rel_error,
                max_abs_error: r.max_abs_error,
                entries: r.entries,
                tolerance: r.tolerance,
            });
        }
        let r = network_gradcheck(seed, NETWORK_TOL)?;
        rows.push(GradcheckRow {
            check: "network".into(),
            seed,
            passed: r.passed(),
            max_rel_error: r.max_rel_error,
            max_abs_error: r.max_abs_error,
            entries: r.entries,
            tolerance: r.tolerance,
        });
    }
    write_text(
        &common.out.join("gradcheck.csv"),
        &csv(
            "check,seed,max_rel_error,max_abs_error,entries,tolerance,passed",
            rows.iter().map(|r| {
                format!(
                    "{},{},{},{},{},{},{}",
                    r.check, r.seed, r.max_rel_error, r.max_abs_error, r.entries, r.tolerance, r.passed
                )
            }),
        ),
    )?;
    write_json(&common.out.join("gradcheck.json"), &rows)?;
    let worst = rows.iter().map(|r| r.max_rel_error / r.tolerance).fold(0.0, f64::max);
    println!("{} checks, worst error/tolerance {worst:.3e}", rows.len());
    m.finish()?;
    let failed: Vec<String> = rows.iter().filter(|r| !r.passed).map(|r| format!("{} seed {}", r.check, r.seed)).collect();
    ensure!(failed.is_empty(), "gradient checks failed: {}", failed.join(", "));
    Ok(())
}

fn task_index(cfg: &ExperimentConfig, s: &str) -> Result<usize> {
    if let Some(i) = cfg.tasks.iter().position(|t| t.name == s) {
        return Ok(i);
    }
    let i: usize = s.parse().map_err(|_| anyhow!("unknown task {s:?}"))?;
    ensure!(i < cfg.tasks.len(), "task index {i} out of range");
    Ok(i)
}

pub fn export_attn(common: &Common, checkpoint: &Path, queries: &[String], sample: usize) -> Result<()> {
    let cfg = load_config(common)?;
    let mut m = start(common, "export-attn", &cfg, Vec::new())?;
    m.inputs.push(checkpoint.to_path_buf());
    m.write()?;
    let st = load_state(&cfg, checkpoint)?;
    let exp = Experiment::prepare(cfg)?;
    ensure!(sample < exp.test.len(), "sample {sample} outside the {} test samples", exp.test.len());
    let EvalArch::Fixed(arch) = st.eval_arch() else {
        bail!("the checkpoint has no CP blocks");
    };
    let batch = exp.test.batch(&[sample])?;
    let n = exp.config.tasks.len();
    let mut written = Vec::new();
    for q in queries {
        let parts: Vec<&str> = q.split(':').collect();
        ensure!(parts.len() == 3, "query {q:?} is not target:source:pixel");
        let (t, s) = (task_index(&exp.config, parts[0])?, task_index(&exp.config, parts[1])?);
        let pixel: usize = parts[2].parse().with_context(|| format!("pixel of query {q:?}"))?;
        let kind = arch[t * n + s];
        ensure!(kind != ContextType::None, "block ({}, {}) runs the none context", parts[0], parts[1]);
        let row = st.net.attention_row(&batch, t, s, kind, pixel, st.gt_regions)?;
        let sum: f64 = row.iter().sum();
        ensure!((sum - 1.0).abs() < 1e-4, "attention row of {q:?} sums to {sum}");
        let name = format!("attn_{}_{}_{pixel}.pgm", exp.config.tasks[t].name, exp.config.tasks[s].name);
        export_attention_map(&row, batch.height, batch.width, common.out.join(&name))?;
        written.push(format!("{},{},{pixel},{kind},{name}", exp.config.tasks[t].name, exp.config.tasks[s].name));
    }
    write_text(&common.out.join("attention.csv"), &csv("target,source,pixel,context,file", written))?;
    m.finish()
}
