//! Training state, the joint weight/architecture update, checkpointing, and
//! the search and retrain drivers.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::config::{AtrcMode, ExperimentConfig};
use super::data::{fit_regions, LabeledSet};
use super::loss::{total_loss, LossBreakdown};
use super::metrics::{evaluate, EvalArch, EvalOptions, MetricsReport};
use super::model::{ArchInput, ForwardOptions, MultiTaskNet};
use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::contexts::ContextType;
use crate::error::{Error, Result};
use crate::label_space::LabelRegionSpec;
use crate::nas::{entropy_regularizer_tape, gumbel_noise, gumbel_softmax_tape, vote_final_config, ArchParams};
use crate::nn::BufferStore;
use crate::optim::{poly_lr, AdamConfig, AdamState, SgdConfig, SgdState};
use crate::rng::{keyed, stream};
use crate::synth::{dataset, Split};
use crate::tensor::Tensor;

/// Data and label regions shared by every run of an experiment.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub regions: Vec<LabelRegionSpec>,
    pub train: LabeledSet,
    pub test: LabeledSet,
}

impl Experiment {
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let train = dataset(&config.data, config.train.train_samples, Split::Train);
        let test = dataset(&config.data, config.train.test_samples, Split::Test);
        let regions = fit_regions(&config.tasks, &train, &config.train, config.data.seed)?;
        let train = LabeledSet::new(train, &config.tasks, &regions)?;
        let test = LabeledSet::new(test, &config.tasks, &regions)?;
        Ok(Experiment {
            config,
            regions,
            train,
            test,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    pub lambda: Option<f64>,
    pub omega_h: Option<f64>,
    pub mean_entropy: Option<f64>,
    pub frozen: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub net: MultiTaskNet<f32>,
    pub sgd: SgdState<f32>,
    /// Architecture logits and their optimizer while searching.
    pub arch: Option<ArchParams>,
    pub adam: Option<AdamState<f32>>,
    pub iteration: usize,
    pub total_iters: usize,
    pub seed: u64,
    /// Replace predicted region maps by ground truth in the label contexts.
    pub gt_regions: bool,
    pub log: Vec<StepLog>,
}

const MODE_CODES: [&str; 5] = ["search", "no_self_attention", "fixed", "single", "none"];

fn mode_code(mode: &AtrcMode) -> usize {
    match mode {
        AtrcMode::Search => 0,
        AtrcMode::NoSelfAttention => 1,
        AtrcMode::Fixed { .. } => 2,
        AtrcMode::Single { .. } => 3,
        AtrcMode::None => 4,
    }
}

fn seed_tensor(seed: u64) -> Tensor<f32> {
    Tensor::new(&[4], (0..4).map(|i| ((seed >> (16 * i)) & 0xffff) as f32).collect()).expect("4 entries")
}

fn seed_from(t: &Tensor<f32>) -> u64 {
    t.data().iter().enumerate().map(|(i, &v)| (v as u64) << (16 * i)).sum()
}

impl TrainState {
    pub fn new(cfg: &ExperimentConfig, regions: Vec<LabelRegionSpec>, mode: &AtrcMode, seed: u64, gt_regions: bool) -> Result<Self> {
        let net = MultiTaskNet::build(&cfg.model, &cfg.tasks, regions, mode, seed)?;
        let blocks = cfg.blocks();
        let (arch, adam, total_iters) = if mode.is_search() {
            let mut arch = ArchParams::new(blocks);
            if *mode == AtrcMode::NoSelfAttention {
                let n = cfg.tasks.len();
                for t in 0..n {
                    arch.frozen[t * n + t] = Some(ContextType::None);
                    arch.freeze_iter[t * n + t] = Some(0);
                }
            }
            let adam = AdamState::new(
                AdamConfig {
                    lr: cfg.search.alpha_lr,
                    ..AdamConfig::default()
                },
                blocks * ContextType::COUNT,
            );
            (Some(arch), Some(adam), cfg.search.total_iters)
        } else {
            (None, None, cfg.train.iterations)
        };
        Ok(TrainState {
            net,
            sgd: SgdState::new(SgdConfig {
                momentum: cfg.train.momentum,
                weight_decay: cfg.train.weight_decay,
            }),
            arch,
            adam,
            iteration: 0,
            total_iters,
            seed,
            gt_regions,
            log: Vec::new(),
        })
    }

    pub fn finished(&self) -> bool {
        self.iteration >= self.total_iters
    }

    /// Architecture used for evaluation: the baseline, the fixed choice, or
    /// the frozen/argmax selection of a search.
    pub fn eval_arch(&self) -> EvalArch {
        if let Some(a) = &self.arch {
            return EvalArch::Fixed(a.selection());
        }
        match self.net.mode_arch() {
            Some(a) => EvalArch::Fixed(a),
            None => EvalArch::Baseline,
        }
    }

    /// One forward/backward pass followed by the SGD step on the weights and,
    /// while searching, the Adam step on the unfrozen architecture logits and
    /// the freeze check.
    pub fn train_step(&mut self, cfg: &ExperimentConfig, data: &LabeledSet) -> Result<LossBreakdown> {
        if self.finished() {
            return Err(Error::Config(format!("training already ran {} iterations", self.total_iters)));
        }
        let it = self.iteration;
        let bs = cfg.train.batch_size.min(data.len());
        let idx = sample(&mut keyed(self.seed, stream::BATCH, it as u64), data.len(), bs).into_vec();
        let batch = data.batch(&idx)?;

        let mut tape = Tape::<f32>::new();
        let fixed = self.net.mode_arch();
        let mut search_vars = None;
        let mut lambda = None;
        let mut omega = None;
        if let Some(arch) = &self.arch {
            let blocks = arch.blocks;
            let alpha = tape.leaf(Tensor::new(&[blocks, ContextType::COUNT], arch.alpha.iter().map(|&a| a as f32).collect())?);
            let noise = gumbel_noise(&mut keyed(self.seed, stream::GUMBEL, it as u64), blocks * ContextType::COUNT);
            let lam = cfg.search.lambda_at(it)?;
            let weights = gumbel_softmax_tape(&mut tape, alpha, &noise, lam)?;
            let h = entropy_regularizer_tape(&mut tape, alpha, &arch.frozen)?;
            let om = cfg.search.omega_h_at(it)?;
            lambda = Some(lam);
            omega = Some(om);
            search_vars = Some((alpha, weights, h));
        }
        let arch_input = match (&self.arch, &search_vars, &fixed) {
            (Some(a), Some((_, w, _)), _) => ArchInput::Sampled {
                weights: *w,
                frozen: &a.frozen,
            },
            (_, _, Some(f)) => ArchInput::Fixed(f),
            _ => ArchInput::Baseline,
        };
        let mut buffers = std::mem::replace(&mut self.net.buffers, BufferStore::new());
        let fo = ForwardOptions {
            arch: arch_input,
            gt_regions: self.gt_regions,
            overrides: &[],
        };
        let out = self.net.forward(&mut tape, &mut buffers, &batch, true, &fo);
        self.net.buffers = buffers;
        let out = out?;
        let reg = search_vars.map(|(_, _, h)| (h, omega.unwrap_or(0.0)));
        let bce = (cfg.boundary_pos_weight, cfg.boundary_neg_weight);
        let (loss, breakdown) = total_loss(&mut tape, &out, &batch, &self.net.tasks, bce, reg)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite {
                iteration: it,
                detail: format!("main {:?} aux {:?} entropy {}", breakdown.main, breakdown.aux, breakdown.entropy),
            });
        }
        tape.backward(loss)?;
        let lr = poly_lr(it, self.total_iters, cfg.train.lr, cfg.train.poly_power)?;
        self.sgd.step(&mut self.net.params, &tape.param_grads(), lr)?;

        if let (Some(arch), Some(adam), Some((alpha, _, _))) = (&mut self.arch, &mut self.adam, search_vars) {
            let g = tape.grad_tensor(alpha).into_data();
            let mut a32: Vec<f32> = arch.alpha.iter().map(|&a| a as f32).collect();
            let mask = arch.active_mask();
            adam.step(&mut a32, &g, Some(&mask))?;
            arch.alpha = a32.into_iter().map(f64::from).collect();
            arch.apply_freezing(cfg.search.freeze_threshold, it + 1);
        }
        self.iteration += 1;
        self.log.push(StepLog {
            iteration: it,
            loss: breakdown.total,
            lr,
            lambda,
            omega_h: omega,
            mean_entropy: self.arch.as_ref().map(|a| a.mean_entropy()),
            frozen: self.arch.as_ref().map(|a| a.frozen.iter().filter(|f| f.is_some()).count()),
        });
        Ok(breakdown)
    }

    pub fn run(&mut self, cfg: &ExperimentConfig, data: &LabeledSet) -> Result<()> {
        while !self.finished() {
            self.train_step(cfg, data)?;
        }
        Ok(())
    }

    pub fn evaluate(&self, set: &LabeledSet, batch_size: usize, run_id: &str) -> Result<MetricsReport> {
        let arch = self.eval_arch();
        evaluate(
            &self.net,
            set,
            &EvalOptions {
                arch: &arch,
                batch_size,
                gt_regions: self.gt_regions,
                overrides: None,
            },
            run_id,
        )
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.push("meta.iteration", Tensor::scalar(self.iteration as f32));
        ck.push("meta.total_iters", Tensor::scalar(self.total_iters as f32));
        ck.push("meta.seed", seed_tensor(self.seed));
        ck.push("meta.gt_regions", Tensor::scalar(self.gt_regions as u8 as f32));
        ck.push("meta.mode", Tensor::scalar(mode_code(&self.net.mode) as f32));
        if let Some(a) = self.net.mode_arch() {
            ck.push("meta.mode_arch", Tensor::new(&[a.len()], a.iter().map(|c| c.index() as f32).collect())?);
        }
        for (t, r) in self.net.regions.iter().enumerate() {
            r.save(&mut ck, &format!("regions.{t}"))?;
        }
        for (_, p) in self.net.params.iter() {
            ck.push(format!("param.{}", p.name), p.tensor.clone());
        }
        for (_, b) in self.net.buffers.iter() {
            ck.push(format!("buffer.{}", b.name), b.tensor.clone());
        }
        for (id, p) in self.net.params.iter() {
            if let Some(Some(v)) = self.sgd.velocity.get(id.0) {
                ck.push(format!("sgd.{}", p.name), Tensor::new(p.tensor.shape(), v.clone())?);
            }
        }
        if let (Some(arch), Some(adam)) = (&self.arch, &self.adam) {
            let n = arch.blocks;
            let k = ContextType::COUNT;
            ck.push("arch.alpha", Tensor::new(&[n, k], arch.alpha.iter().map(|&a| a as f32).collect())?);
            let code = |o: Option<usize>| o.map_or(-1.0, |v| v as f32);
            ck.push("arch.frozen", Tensor::new(&[n], arch.frozen.iter().map(|f| code(f.map(|c| c.index()))).collect())?);
            ck.push("arch.freeze_iter", Tensor::new(&[n], arch.freeze_iter.iter().map(|&f| code(f)).collect())?);
            ck.push("adam.m", Tensor::new(&[n, k], adam.m.clone())?);
            ck.push("adam.v", Tensor::new(&[n, k], adam.v.clone())?);
            ck.push("adam.step", Tensor::scalar(adam.step as f32));
        }
        Ok(ck)
    }

    /// Rebuilds a state saved by [`TrainState::to_checkpoint`]; model
    /// dimensions and optimizer settings come from `cfg`.
    pub fn from_checkpoint(cfg: &ExperimentConfig, ck: &Checkpoint) -> Result<Self> {
        let n = cfg.tasks.len();
        let code = ck.require("meta.mode")?.item() as usize;
        let arch_idx = || -> Result<Vec<ContextType>> {
            ck.require("meta.mode_arch")?
                .data()
                .iter()
                .map(|&v| ContextType::from_index(v as usize).ok_or_else(|| Error::Checkpoint(format!("bad context index {v}"))))
                .collect()
        };
        let mode = match MODE_CODES.get(code) {
            Some(&"search") => AtrcMode::Search,
            Some(&"no_self_attention") => AtrcMode::NoSelfAttention,
            Some(&"fixed") => AtrcMode::Fixed { arch: arch_idx()? },
            Some(&"single") => AtrcMode::Single { context: arch_idx()?[0] },
            Some(&"none") => AtrcMode::None,
            _ => return Err(Error::Checkpoint(format!("unknown mode code {code}"))),
        };
        let regions = (0..n).map(|t| LabelRegionSpec::load(ck, &format!("regions.{t}"))).collect::<Result<Vec<_>>>()?;
        let seed = seed_from(ck.require("meta.seed")?);
        let gt = ck.require("meta.gt_regions")?.item() > 0.5;
        let mut st = TrainState::new(cfg, regions, &mode, seed, gt)?;
        st.iteration = ck.require("meta.iteration")?.item() as usize;
        st.total_iters = ck.require("meta.total_iters")?.item() as usize;
        let shape_check = |name: &str, a: &[usize], b: &[usize]| -> Result<()> {
            if a != b {
                return Err(Error::Checkpoint(format!("{name}: shape {b:?} does not match model {a:?}")));
            }
            Ok(())
        };
        for (_, p) in st.net.params.iter_mut() {
            let t = ck.require(&format!("param.{}", p.name))?;
            shape_check(&p.name, p.tensor.shape(), t.shape())?;
            p.tensor = t.clone();
        }
        for (_, b) in st.net.buffers.iter_mut() {
            let t = ck.require(&format!("buffer.{}", b.name))?;
            shape_check(&b.name, b.tensor.shape(), t.shape())?;
            b.tensor = t.clone();
        }
        st.sgd.velocity = st
            .net
            .params
            .iter()
            .map(|(_, p)| ck.get(&format!("sgd.{}", p.name)).map(|t| t.data().to_vec()))
            .collect();
        if let (Some(arch), Some(adam)) = (&mut st.arch, &mut st.adam) {
            arch.alpha = ck.require("arch.alpha")?.data().iter().map(|&a| a as f64).collect();
            let frozen = ck.require("arch.frozen")?.data();
            let iters = ck.require("arch.freeze_iter")?.data();
            for j in 0..arch.blocks {
                arch.frozen[j] = (frozen[j] >= 0.0).then(|| ContextType::from_index(frozen[j] as usize)).flatten();
                arch.freeze_iter[j] = (iters[j] >= 0.0).then_some(iters[j] as usize);
            }
            adam.m = ck.require("adam.m")?.data().to_vec();
            adam.v = ck.require("adam.v")?.data().to_vec();
            adam.step = ck.require("adam.step")?.item() as u64;
        }
        Ok(st)
    }
}

/// Trains one model to completion.
pub fn train_model(exp: &Experiment, mode: &AtrcMode, seed: u64, gt_regions: bool) -> Result<TrainState> {
    let mut st = TrainState::new(&exp.config, exp.regions.clone(), mode, seed, gt_regions)?;
    st.run(&exp.config, &exp.train)?;
    Ok(st)
}

/// Trains task `t` alone (no distillation) on the shared backbone design.
pub fn train_single_task(exp: &Experiment, t: usize, seed: u64) -> Result<(TrainState, ExperimentConfig, LabeledSet)> {
    let task = exp.config.tasks.get(t).ok_or_else(|| Error::Config(format!("no task {t}")))?.clone();
    let mut cfg = exp.config.clone();
    cfg.tasks = vec![task];
    let train = exp.train.task_subset(t)?;
    let mut st = TrainState::new(&cfg, vec![exp.regions[t].clone()], &AtrcMode::None, seed, false)?;
    st.run(&cfg, &train)?;
    Ok((st, cfg, exp.test.task_subset(t)?))
}

/// Metrics of one single-task model per task, merged into one report: the
/// reference of the multi-task performance measure.
pub fn single_task_baseline(exp: &Experiment, seed: u64, run_id: &str) -> Result<MetricsReport> {
    let mut metrics = Vec::with_capacity(exp.config.tasks.len());
    for t in 0..exp.config.tasks.len() {
        let (st, cfg, test) = train_single_task(exp, t, seed)?;
        let r = st.evaluate(&test, cfg.train.batch_size, run_id)?;
        metrics.extend(r.metrics);
    }
    Ok(MetricsReport {
        run_id: run_id.into(),
        metrics,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchRun {
    pub seed: u64,
    pub selection: Vec<ContextType>,
    pub freeze_iter: Vec<Option<usize>>,
    pub frozen_fraction: f64,
    pub final_alpha: Vec<f64>,
    pub final_entropy: f64,
    pub log: Vec<StepLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub runs: Vec<SearchRun>,
    /// Seeds whose run failed, with the error.
    pub failures: Vec<(u64, String)>,
    pub voted: Vec<ContextType>,
}

pub fn search_once(exp: &Experiment, seed: u64) -> Result<SearchRun> {
    let mode = if exp.config.mode == AtrcMode::NoSelfAttention { AtrcMode::NoSelfAttention } else { AtrcMode::Search };
    let st = train_model(exp, &mode, seed, false)?;
    let arch = st.arch.as_ref().expect("search state has logits");
    Ok(SearchRun {
        seed,
        selection: arch.selection(),
        freeze_iter: arch.freeze_iter.clone(),
        frozen_fraction: arch.frozen_fraction(),
        final_alpha: arch.alpha.clone(),
        final_entropy: arch.mean_entropy(),
        log: st.log,
    })
}

/// Independent searches, one per seed, on up to `threads` workers; the
/// final configuration is the per-block vote over successful runs.
pub fn run_search(exp: &Experiment, seeds: &[u64], threads: usize) -> Result<SearchOutcome> {
    if seeds.is_empty() {
        return Err(Error::Search("no search seeds".into()));
    }
    let threads = threads.clamp(1, seeds.len());
    let mut results: Vec<Option<Result<SearchRun>>> = (0..seeds.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (chunk_seeds, chunk_out) in seeds.chunks(seeds.len().div_ceil(threads)).zip(results.chunks_mut(seeds.len().div_ceil(threads))) {
            scope.spawn(move || {
                for (s, o) in chunk_seeds.iter().zip(chunk_out.iter_mut()) {
                    *o = Some(search_once(exp, *s));
                }
            });
        }
    });
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (seed, r) in seeds.iter().zip(results) {
        match r.expect("every seed ran") {
            Ok(run) => runs.push(run),
            Err(e) => failures.push((*seed, e.to_string())),
        }
    }
    if runs.is_empty() {
        return Err(Error::Search(format!("every search run failed: {failures:?}")));
    }
    let selections: Vec<Vec<ContextType>> = runs.iter().map(|r| r.selection.clone()).collect();
    let voted = vote_final_config(&selections)?;
    Ok(SearchOutcome { runs, failures, voted })
}

/// Parallelism cap from `ATRC_THREADS`, defaulting to the available cores.
pub fn thread_budget() -> usize {
    std::env::var("ATRC_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}
