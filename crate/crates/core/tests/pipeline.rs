use atrc::autodiff::Tape;
use atrc::checkpoint::Checkpoint;
use atrc::contexts::ContextType;
use atrc::nn::Ctx;
use atrc::pipeline::*;
use atrc::Tensor;

fn tiny_cfg() -> ExperimentConfig {
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
    c.search_seeds = vec![3];
    c
}

fn mixed_arch() -> Vec<ContextType> {
    ContextType::ALL.iter().copied().cycle().take(16).collect()
}

#[test]
fn all_none_config_is_the_zero_fuse_path() {
    let exp = Experiment::prepare(tiny_cfg()).unwrap();
    let none = vec![ContextType::None; 16];
    let net = MultiTaskNet::<f64>::build(&exp.config.model, &exp.config.tasks, exp.regions.clone(), &AtrcMode::Fixed { arch: none.clone() }, 4).unwrap();
    let batch = exp.test.batch(&[0, 1, 2]).unwrap();

    let mut tape = Tape::new();
    let mut buffers = net.buffers.clone();
    let out = net.forward(&mut tape, &mut buffers, &batch, false, &ForwardOptions::new(ArchInput::Fixed(&none))).unwrap();
    assert!(out.cp.iter().all(Option::is_none));

    // Hand composition: trunk and heads through the baseline path, then the
    // fusion layers applied to an all-zero CP concatenation.
    let mut tape2 = Tape::new();
    let mut buffers2 = net.buffers.clone();
    let base = net.forward(&mut tape2, &mut buffers2, &batch, false, &ForwardOptions::new(ArchInput::Baseline)).unwrap();
    let mut ctx = Ctx {
        tape: &mut tape2,
        params: &net.params,
        buffers: &mut buffers2,
        training: false,
    };
    let (b, dv) = (batch.size, exp.config.model.dv);
    for t in 0..4 {
        let zeros = ctx.tape.constant(Tensor::zeros(&[b, 4 * dv, 8, 8]));
        let fused = net.fusion[t].fuse.forward(&mut ctx, zeros).unwrap();
        let joined = ctx.tape.concat(&[fused, base.features[t]], 1).unwrap();
        let post = net.fusion[t].post.forward(&mut ctx, joined).unwrap();
        let pred = net.pred[t].forward(&mut ctx, post).unwrap();
        let want = ctx.tape.value(pred).clone();
        assert!(tape.value(out.preds[t]).max_abs_diff(&want) < 1e-6, "task {t}");
    }
}

#[test]
fn auxiliary_losses_leave_trunk_gradients_untouched() {
    let exp = Experiment::prepare(tiny_cfg()).unwrap();
    let arch = mixed_arch();
    let net = MultiTaskNet::<f64>::build(&exp.config.model, &exp.config.tasks, exp.regions.clone(), &AtrcMode::Fixed { arch: arch.clone() }, 9).unwrap();
    let batch = exp.train.batch(&[0, 1, 2, 3]).unwrap();
    let grads = |with_aux: bool| {
        let mut tape = Tape::new();
        let mut buffers = net.buffers.clone();
        let out = net.forward(&mut tape, &mut buffers, &batch, true, &ForwardOptions::new(ArchInput::Fixed(&arch))).unwrap();
        let loss = if with_aux {
            total_loss(&mut tape, &out, &batch, &net.tasks, (0.8, 0.2), None).unwrap().0
        } else {
            let mut acc = None;
            for (t, task) in net.tasks.iter().enumerate() {
                let l = task_loss(&mut tape, task, out.preds[t], &batch, (0.8, 0.2)).unwrap();
                let l = tape.mul_scalar(l, task.loss_weight);
                acc = Some(match acc {
                    Some(a) => tape.add(a, l).unwrap(),
                    None => l,
                });
            }
            acc.unwrap()
        };
        tape.backward(loss).unwrap();
        tape.param_grads()
    };
    let (on, off) = (grads(true), grads(false));
    let mut checked = 0;
    for ((id, a), (_, b)) in on.iter().zip(&off) {
        let name = &net.params.get(*id).name;
        if name.starts_with("backbone.") || name.ends_with(".main.conv.weight") {
            assert!(a.max_abs_diff(b) <= 1e-12, "{name}");
            checked += 1;
        }
    }
    assert!(checked >= 6);
    let aux = on.iter().zip(&off).find(|((id, _), _)| net.params.get(*id).name.contains(".aux_out.")).unwrap();
    assert!(aux.0 .1.max_abs_diff(&aux.1 .1) > 0.0);
}

#[test]
fn loss_is_finite_at_initialization_in_every_mode() {
    let exp = Experiment::prepare(tiny_cfg()).unwrap();
    let modes = [
        AtrcMode::Search,
        AtrcMode::NoSelfAttention,
        AtrcMode::Fixed { arch: mixed_arch() },
        AtrcMode::Single { context: ContextType::Global },
        AtrcMode::Single { context: ContextType::Local },
        AtrcMode::Single { context: ContextType::TLabel },
        AtrcMode::Single { context: ContextType::SLabel },
        AtrcMode::None,
    ];
    for (i, mode) in modes.iter().enumerate() {
        let mut st = TrainState::new(&exp.config, exp.regions.clone(), mode, i as u64, false).unwrap();
        let b = st.train_step(&exp.config, &exp.train).unwrap();
        assert!(b.total.is_finite(), "{mode:?}");
        assert_eq!(b.main.len(), 4);
    }
}

#[test]
fn overfits_a_small_set() {
    for mode in [AtrcMode::None, AtrcMode::Single { context: ContextType::Global }] {
        let mut cfg = tiny_cfg();
        cfg.train.iterations = 200;
        cfg.train.batch_size = 8;
        cfg.model.backbone_width = 16;
        cfg.model.backbone_depth = 3;
        cfg.model.feature_width = 16;
        let exp = Experiment::prepare(cfg).unwrap();
        let mut st = TrainState::new(&exp.config, exp.regions.clone(), &mode, 1, false).unwrap();
        st.run(&exp.config, &exp.train).unwrap();
        let first = st.log[0].loss;
        let tail: f64 = st.log[190..].iter().map(|l| l.loss).sum::<f64>() / 10.0;
        assert!(tail < 0.25 * first, "{mode:?}: {first} -> {tail}");
    }
}

#[test]
fn frozen_logits_do_not_move() {
    let exp = Experiment::prepare(tiny_cfg()).unwrap();
    let mut st = TrainState::new(&exp.config, exp.regions.clone(), &AtrcMode::Search, 2, false).unwrap();
    {
        let arch = st.arch.as_mut().unwrap();
        arch.frozen[5] = Some(ContextType::Local);
        arch.alpha[5 * 5 + 1] = 2.0;
    }
    let before = st.arch.as_ref().unwrap().alpha.clone();
    for _ in 0..3 {
        st.train_step(&exp.config, &exp.train).unwrap();
    }
    let after = &st.arch.as_ref().unwrap().alpha;
    assert_eq!(&before[25..30], &after[25..30]);
    assert_ne!(&before[..25], &after[..25]);
}

#[test]
fn same_seed_same_trajectory() {
    let exp = Experiment::prepare(tiny_cfg()).unwrap();
    let run = || {
        let st = train_model(&exp, &AtrcMode::Search, 7, false).unwrap();
        (st.log.iter().map(|l| l.loss).collect::<Vec<_>>(), st.arch.unwrap().alpha)
    };
    assert_eq!(run(), run());
    let other = train_model(&exp, &AtrcMode::Search, 8, false).unwrap();
    assert_ne!(run().0, other.log.iter().map(|l| l.loss).collect::<Vec<_>>());
}

fn assert_same_state(a: &TrainState, b: &TrainState) {
    for ((_, p), (_, q)) in a.net.params.iter().zip(b.net.params.iter()) {
        assert_eq!(p.tensor, q.tensor, "{}", p.name);
    }
    for ((_, p), (_, q)) in a.net.buffers.iter().zip(b.net.buffers.iter()) {
        assert_eq!(p.tensor, q.tensor, "{}", p.name);
    }
    assert_eq!(a.arch, b.arch);
    assert_eq!(a.iteration, b.iteration);
}

#[test]
fn checkpoint_resume_is_bit_identical() {
    let exp = Experiment::prepare(tiny_cfg()).unwrap();
    for mode in [AtrcMode::Search, AtrcMode::Fixed { arch: mixed_arch() }, AtrcMode::None] {
        let full = train_model(&exp, &mode, 5, false).unwrap();
        let mut half = TrainState::new(&exp.config, exp.regions.clone(), &mode, 5, false).unwrap();
        for _ in 0..5 {
            half.train_step(&exp.config, &exp.train).unwrap();
        }
        let bytes = half.to_checkpoint().unwrap().to_bytes();
        let mut resumed = TrainState::from_checkpoint(&exp.config, &Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        resumed.run(&exp.config, &exp.train).unwrap();
        assert_same_state(&full, &resumed);
        let tail: Vec<f64> = full.log[5..].iter().map(|l| l.loss).collect();
        assert_eq!(tail, resumed.log.iter().map(|l| l.loss).collect::<Vec<_>>(), "{mode:?}");
    }
}

#[test]
fn loss_weights_scale_linearly() {
    let exp = Experiment::prepare(tiny_cfg()).unwrap();
    let net = MultiTaskNet::<f64>::build(&exp.config.model, &exp.config.tasks, exp.regions.clone(), &AtrcMode::None, 0).unwrap();
    let batch = exp.train.batch(&[0, 1]).unwrap();
    let loss_with = |weights: [f64; 4]| {
        let mut tasks = net.tasks.clone();
        for (t, w) in tasks.iter_mut().zip(weights) {
            t.loss_weight = w;
        }
        let mut tape = Tape::new();
        let mut buffers = net.buffers.clone();
        let out = net.forward(&mut tape, &mut buffers, &batch, true, &ForwardOptions::new(ArchInput::Baseline)).unwrap();
        total_loss(&mut tape, &out, &batch, &tasks, (0.8, 0.2), None).unwrap().1
    };
    assert_eq!(loss_with([0.0; 4]).total, 0.0);
    let one = loss_with([0.0, 1.0, 0.0, 0.0]);
    let two = loss_with([0.0, 2.0, 0.0, 0.0]);
    assert!((two.total - 2.0 * (one.main[1] + one.aux[1])).abs() < 1e-12);
    assert_eq!(
        exp.config.tasks.iter().map(|t| t.loss_weight).collect::<Vec<_>>(),
        vec![1.0, 1.0, 10.0, 50.0]
    );
}

#[test]
fn single_run_search_votes_its_own_selection() {
    let exp = Experiment::prepare(tiny_cfg()).unwrap();
    let a = run_search(&exp, &[3], 1).unwrap();
    assert_eq!(a.runs.len(), 1);
    assert_eq!(a.voted, a.runs[0].selection);
    let b = run_search(&exp, &[3], 2).unwrap();
    assert_eq!(a, b);
}

#[test]
fn no_self_attention_keeps_the_diagonal_empty() {
    let mut cfg = tiny_cfg();
    cfg.mode = AtrcMode::NoSelfAttention;
    let exp = Experiment::prepare(cfg).unwrap();
    let run = search_once(&exp, 0).unwrap();
    for t in 0..4 {
        assert_eq!(run.selection[t * 4 + t], ContextType::None);
        assert_eq!(run.freeze_iter[t * 4 + t], Some(0));
    }
}

#[test]
fn single_task_baseline_covers_every_task() {
    let exp = Experiment::prepare(tiny_cfg()).unwrap();
    let r = single_task_baseline(&exp, 0, "stl").unwrap();
    let names: Vec<&str> = r.metrics.iter().map(|m| m.metric.as_str()).collect();
    assert_eq!(names, ["miou", "rmse", "mean_angle_deg", "boundary_f"]);
    assert!(r.values().iter().all(|v| v.is_finite()));
}
