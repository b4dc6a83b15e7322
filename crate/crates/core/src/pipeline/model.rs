//! Shared backbone, per-task heads, the CP-block distillation and the
//! prediction layers.

use rand::Rng;

use super::config::{AtrcMode, ModelConfig, TaskSpec};
use super::data::Batch;
use crate::autodiff::{Tape, Var};
use crate::contexts::{spatial_softmax, to_tokens, ContextType, CpBlock, CpInputs, CpMode};
use crate::error::{Error, Result};
use crate::label_space::{normalized_region_rows, LabelRegionSpec};
use crate::nn::{Activation, BufferStore, ConvBn, Conv2d, Ctx, ParamStore};
use crate::rng::{keyed, stream};
use crate::tensor::{Real, Tensor};

/// Per-task main and auxiliary heads.
#[derive(Clone, Debug)]
pub struct TaskHead {
    /// 3x3 conv-BN-ReLU producing the task features.
    pub main: ConvBn,
    pub aux_hidden: ConvBn,
    /// 1x1 conv producing region logits.
    pub aux_out: Conv2d,
}

/// Per-target fusion of the CP outputs.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub fuse: ConvBn,
    pub post: ConvBn,
}

#[derive(Clone, Debug)]
pub struct MultiTaskNet<T> {
    pub config: ModelConfig,
    pub tasks: Vec<TaskSpec>,
    pub regions: Vec<LabelRegionSpec>,
    pub mode: AtrcMode,
    pub params: ParamStore<T>,
    pub buffers: BufferStore<T>,
    pub backbone: Vec<ConvBn>,
    pub heads: Vec<TaskHead>,
    /// Row-major over (target, source); empty in the baseline mode.
    pub blocks: Vec<CpBlock>,
    pub fusion: Vec<Fusion>,
    pub pred: Vec<Conv2d>,
}

/// Architecture used by one forward pass.
#[derive(Clone, Copy, Debug)]
pub enum ArchInput<'a> {
    Fixed(&'a [ContextType]),
    /// Mixing weights `[blocks, 5]` on the tape; frozen blocks run their choice.
    Sampled {
        weights: Var,
        frozen: &'a [Option<ContextType>],
    },
    /// Predictions read the task features directly.
    Baseline,
}

pub struct ForwardOptions<'a, T> {
    pub arch: ArchInput<'a>,
    /// Replace predicted region maps with normalized ground-truth regions.
    pub gt_regions: bool,
    /// CP outputs to substitute, by block index.
    pub overrides: &'a [(usize, Tensor<T>)],
}

impl<'a, T> ForwardOptions<'a, T> {
    pub fn new(arch: ArchInput<'a>) -> Self {
        ForwardOptions {
            arch,
            gt_regions: false,
            overrides: &[],
        }
    }
}

pub struct ForwardOutput {
    pub preds: Vec<Var>,
    /// Region logits `[B, R, H, W]` per task.
    pub aux: Vec<Var>,
    /// Region maps `[B, R, L]`, each row a distribution over pixels.
    pub a_hat: Vec<Var>,
    /// Task features `[B, F, H, W]`.
    pub features: Vec<Var>,
    /// CP outputs by block; `None` for the none context.
    pub cp: Vec<Option<Var>>,
}

fn block_kinds(mode: &AtrcMode, t: usize, s: usize, j: usize) -> Vec<ContextType> {
    match mode {
        AtrcMode::Search => ContextType::ALL.to_vec(),
        AtrcMode::NoSelfAttention if t == s => vec![],
        AtrcMode::NoSelfAttention => ContextType::ALL.to_vec(),
        AtrcMode::Fixed { arch } => vec![arch[j]],
        AtrcMode::Single { context } => vec![*context],
        AtrcMode::None => vec![],
    }
}

impl<T: Real> MultiTaskNet<T> {
    pub fn build(
        config: &ModelConfig,
        tasks: &[TaskSpec],
        regions: Vec<LabelRegionSpec>,
        mode: &AtrcMode,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = keyed(seed, stream::INIT, 0);
        Self::build_with(config, tasks, regions, mode, &mut rng)
    }

    pub fn build_with<R: Rng>(
        config: &ModelConfig,
        tasks: &[TaskSpec],
        regions: Vec<LabelRegionSpec>,
        mode: &AtrcMode,
        rng: &mut R,
    ) -> Result<Self> {
        let n = tasks.len();
        if n == 0 || (n < 2 && *mode != AtrcMode::None) {
            return Err(Error::Config(format!("need at least 2 tasks for distillation, got {n}")));
        }
        if regions.len() != n {
            return Err(Error::Config(format!("{} region specs for {n} tasks", regions.len())));
        }
        if let AtrcMode::Fixed { arch } = mode {
            if arch.len() != n * n {
                return Err(Error::Config(format!("fixed arch has {} entries, expected {}", arch.len(), n * n)));
            }
        }
        let (c, f) = (config.backbone_width, config.feature_width);
        let mut params = ParamStore::new();
        let mut buffers = BufferStore::new();
        let mut backbone = Vec::new();
        for i in 0..config.backbone_depth {
            let cin = if i == 0 { 3 } else { c };
            backbone.push(ConvBn::new(&mut params, &mut buffers, &format!("backbone.{i}"), cin, c, 3, Activation::Relu, true, rng)?);
        }
        let mut heads = Vec::new();
        for (t, r) in tasks.iter().zip(&regions) {
            let p = format!("head.{}", t.name);
            heads.push(TaskHead {
                main: ConvBn::new(&mut params, &mut buffers, &format!("{p}.main"), c, f, 3, Activation::Relu, true, rng)?,
                aux_hidden: ConvBn::new(&mut params, &mut buffers, &format!("{p}.aux"), c, f, 1, Activation::Relu, true, rng)?,
                aux_out: Conv2d::new(&mut params, &format!("{p}.aux_out"), f, r.count(), 1, true, rng)?,
            });
        }
        let mut blocks = Vec::new();
        let mut fusion = Vec::new();
        if *mode != AtrcMode::None {
            for t in 0..n {
                for s in 0..n {
                    let j = t * n + s;
                    let name = format!("cp.{}.{}", tasks[t].name, tasks[s].name);
                    let kinds = block_kinds(mode, t, s, j);
                    blocks.push(CpBlock::new(
                        &mut params,
                        &mut buffers,
                        &name,
                        t,
                        s,
                        &kinds,
                        f,
                        config.dk,
                        config.dv,
                        config.window,
                        rng,
                    )?);
                }
            }
            for t in tasks {
                let p = format!("fusion.{}", t.name);
                fusion.push(Fusion {
                    fuse: ConvBn::new(&mut params, &mut buffers, &format!("{p}.fuse"), n * config.dv, f, 1, Activation::Identity, true, rng)?,
                    post: ConvBn::new(&mut params, &mut buffers, &format!("{p}.post"), 2 * f, f, 1, Activation::Relu, true, rng)?,
                });
            }
        }
        let mut pred = Vec::new();
        for t in tasks {
            pred.push(Conv2d::new(&mut params, &format!("pred.{}", t.name), f, t.out_channels(), 1, true, rng)?);
        }
        Ok(MultiTaskNet {
            config: config.clone(),
            tasks: tasks.to_vec(),
            regions,
            mode: mode.clone(),
            params,
            buffers,
            backbone,
            heads,
            blocks,
            fusion,
            pred,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// The fixed architecture implied by the mode, if any.
    pub fn mode_arch(&self) -> Option<Vec<ContextType>> {
        let n2 = self.num_tasks() * self.num_tasks();
        match &self.mode {
            AtrcMode::Fixed { arch } => Some(arch.clone()),
            AtrcMode::Single { context } => Some(vec![*context; n2]),
            _ => None,
        }
    }

    /// Ground-truth region maps `[B, R, L]` for task `t`.
    pub fn gt_region_maps(&self, batch: &Batch, t: usize) -> Result<Tensor<T>> {
        let r = self.regions[t].count();
        let l = batch.pixels();
        let mut data = Vec::with_capacity(batch.size * r * l);
        for b in 0..batch.size {
            let rows = normalized_region_rows(&batch.regions[t][b * l..(b + 1) * l], r);
            data.extend(rows.into_iter().map(T::from_f64));
        }
        Ok(Tensor::new(&[batch.size, r, l], data)?)
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        buffers: &mut BufferStore<T>,
        batch: &Batch,
        training: bool,
        opts: &ForwardOptions<'_, T>,
    ) -> Result<ForwardOutput> {
        let n = self.num_tasks();
        let mut ctx = Ctx {
            tape,
            params: &self.params,
            buffers,
            training,
        };
        let x = ctx.tape.constant(batch.image.cast());
        let mut h = x;
        for layer in &self.backbone {
            h = layer.forward(&mut ctx, h)?;
        }
        let trunk_detached = ctx.tape.stop_gradient(h);
        let mut features = Vec::with_capacity(n);
        let mut aux = Vec::with_capacity(n);
        let mut a_hat = Vec::with_capacity(n);
        for (t, head) in self.heads.iter().enumerate() {
            features.push(head.main.forward(&mut ctx, h)?);
            let a = head.aux_hidden.forward(&mut ctx, trunk_detached)?;
            let a = head.aux_out.forward(&mut ctx, a)?;
            aux.push(a);
            a_hat.push(if opts.gt_regions {
                ctx.tape.constant(self.gt_region_maps(batch, t)?)
            } else {
                spatial_softmax(ctx.tape, a)?
            });
        }

        let mut cp = Vec::new();
        let mut preds = Vec::with_capacity(n);
        if matches!(opts.arch, ArchInput::Baseline) || self.blocks.is_empty() {
            for (t, p) in self.pred.iter().enumerate() {
                preds.push(p.forward(&mut ctx, features[t])?);
            }
            return Ok(ForwardOutput {
                preds,
                aux,
                a_hat,
                features,
                cp,
            });
        }

        let (hh, ww) = (batch.height, batch.width);
        let dv = self.config.dv;
        for t in 0..n {
            let mut outs = Vec::with_capacity(n);
            for s in 0..n {
                let j = t * n + s;
                let block = &self.blocks[j];
                let inputs = CpInputs {
                    f_t: features[t],
                    f_s: features[s],
                    a_hat_t: Some(a_hat[t]),
                    a_hat_s: Some(a_hat[s]),
                };
                let mode = match opts.arch {
                    ArchInput::Fixed(arch) => CpMode::Fixed(arch[j]),
                    ArchInput::Sampled { weights, frozen } => match frozen[j] {
                        Some(c) => CpMode::Fixed(c),
                        None if block.candidates.is_empty() => CpMode::Fixed(ContextType::None),
                        None => CpMode::Mixed { weights, offset: j * ContextType::COUNT },
                    },
                    ArchInput::Baseline => unreachable!(),
                };
                let mut out = block.forward(&mut ctx, &inputs, mode)?;
                if let Some((_, o)) = opts.overrides.iter().find(|(b, _)| *b == j) {
                    if out.is_some() {
                        out = Some(ctx.tape.constant(o.clone()));
                    }
                }
                outs.push(out);
            }
            let parts: Vec<Var> = outs
                .iter()
                .map(|o| o.unwrap_or_else(|| ctx.tape.constant(Tensor::zeros(&[batch.size, dv, hh, ww]))))
                .collect();
            let cat = ctx.tape.concat(&parts, 1)?;
            let fused = self.fusion[t].fuse.forward(&mut ctx, cat)?;
            let joined = ctx.tape.concat(&[fused, features[t]], 1)?;
            let post = self.fusion[t].post.forward(&mut ctx, joined)?;
            preds.push(self.pred[t].forward(&mut ctx, post)?);
            cp.extend(outs);
        }
        Ok(ForwardOutput {
            preds,
            aux,
            a_hat,
            features,
            cp,
        })
    }

    /// Attention weights of target pixel `pixel` over the source positions
    /// (pixels, or regions spread back onto pixels) for block `(t, s)`,
    /// computed for the first image of `batch` in eval mode.
    pub fn attention_row(
        &self,
        batch: &Batch,
        target: usize,
        source: usize,
        kind: ContextType,
        pixel: usize,
        gt_regions: bool,
    ) -> Result<Vec<f64>> {
        let n = self.num_tasks();
        let l = batch.pixels();
        if target >= n || source >= n || pixel >= l {
            return Err(Error::Config(format!("attention query ({target}, {source}, {pixel}) out of range")));
        }
        let block = &self.blocks.get(target * n + source).ok_or_else(|| Error::Config("model has no CP blocks".into()))?;
        let cand = block
            .candidate(kind)
            .ok_or_else(|| Error::Config(format!("context {kind} not built in block ({target}, {source})")))?;
        let mut tape = Tape::new();
        let mut buffers = self.buffers.clone();
        let out = self.forward(&mut tape, &mut buffers, batch, false, &ForwardOptions {
            arch: ArchInput::Baseline,
            gt_regions,
            overrides: &[],
        })?;
        let mut ctx = Ctx {
            tape: &mut tape,
            params: &self.params,
            buffers: &mut buffers,
            training: false,
        };
        let (f_t, f_s) = (out.features[target], out.features[source]);
        let softmax = |v: Vec<f64>| {
            let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect::<Vec<f64>>()
        };
        let dk = self.config.dk;
        let first = |tape: &Tape<T>, v: Var| -> Vec<f64> {
            // tokens [B, L, C]; keep image 0
            let t = tape.value(v);
            let (len, c) = (t.shape()[1], t.shape()[2]);
            t.data()[..len * c].iter().map(|x| x.to_f64()).collect()
        };
        match kind {
            ContextType::Global | ContextType::Local => {
                let (q, k, _) = cand.proj.project(&mut ctx, f_t, f_s)?;
                let q = to_tokens(ctx.tape, q)?;
                let k = to_tokens(ctx.tape, k)?;
                let (q, k) = (first(ctx.tape, q), first(ctx.tape, k));
                let qi = &q[pixel * dk..(pixel + 1) * dk];
                let dot = |j: usize| qi.iter().zip(&k[j * dk..(j + 1) * dk]).map(|(a, b)| a * b).sum::<f64>();
                if kind == ContextType::Global {
                    let raw: Vec<f64> = (0..l).map(dot).collect();
                    let s: f64 = raw.iter().sum::<f64>().max(crate::contexts::attention::LINEAR_DENOM_MIN);
                    Ok(raw.into_iter().map(|x| x / s).collect())
                } else {
                    let (h, w) = (batch.height as i64, batch.width as i64);
                    let r = (block.window / 2) as i64;
                    let (py, px) = (pixel as i64 / w, pixel as i64 % w);
                    let mut idx = Vec::new();
                    for y in (py - r).max(0)..=(py + r).min(h - 1) {
                        for x in (px - r).max(0)..=(px + r).min(w - 1) {
                            idx.push((y * w + x) as usize);
                        }
                    }
                    let scale = 1.0 / (dk as f64).sqrt();
                    let p = softmax(idx.iter().map(|&j| dot(j) * scale).collect());
                    let mut row = vec![0.0; l];
                    for (&j, pj) in idx.iter().zip(p) {
                        row[j] = pj;
                    }
                    Ok(row)
                }
            }
            ContextType::TLabel | ContextType::SLabel => {
                let src = if kind == ContextType::TLabel { target } else { source };
                let inputs = CpInputs {
                    f_t,
                    f_s,
                    a_hat_t: Some(out.a_hat[target]),
                    a_hat_s: Some(out.a_hat[source]),
                };
                let (_, attn) = cand.forward(&mut ctx, &inputs, block.window)?;
                let attn = attn.expect("label contexts return attention");
                let a = ctx.tape.value(attn);
                let r = a.shape()[2];
                let row: Vec<f64> = a.data()[pixel * r..(pixel + 1) * r].iter().map(|x| x.to_f64()).collect();
                let a_hat = ctx.tape.value(out.a_hat[src]);
                let maps: Vec<f64> = a_hat.data()[..r * l].iter().map(|x| x.to_f64()).collect();
                Ok(crate::contexts::spread_regions(&row, &maps, l))
            }
            ContextType::None => Ok(vec![0.0; l]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::config::default_tasks;
    use crate::pipeline::data::{fit_regions, LabeledSet};
    use crate::pipeline::config::TrainConfig;
    use crate::synth::{dataset, SceneSpec, Split};

    pub(crate) fn tiny_setup(hw: usize) -> (ModelConfig, Vec<TaskSpec>, Vec<LabelRegionSpec>, LabeledSet) {
        let spec = SceneSpec {
            height: hw,
            width: hw,
            ..Default::default()
        };
        let tasks = default_tasks();
        let train = dataset(&spec, 8, Split::Train);
        let tc = TrainConfig {
            codebook_samples: 400,
            ..Default::default()
        };
        let mut tasks = tasks;
        tasks[1].regions = super::super::config::RegionConfig::DepthBins { bins: 6 };
        tasks[2].regions = super::super::config::RegionConfig::NormalCodebook { codewords: 8 };
        let regions = fit_regions(&tasks, &train, &tc, 0).unwrap();
        let set = LabeledSet::new(train, &tasks, &regions).unwrap();
        let cfg = ModelConfig {
            backbone_width: 8,
            backbone_depth: 2,
            feature_width: 8,
            dk: 4,
            dv: 4,
            window: 3,
        };
        (cfg, tasks, regions, set)
    }

    #[test]
    fn wiring_and_shapes() {
        let (cfg, tasks, regions, set) = tiny_setup(8);
        let net = MultiTaskNet::<f32>::build(&cfg, &tasks, regions.clone(), &AtrcMode::Search, 0).unwrap();
        assert_eq!(net.blocks.len(), 16);
        assert!(net.blocks.iter().all(|b| b.candidates.len() == 4));
        let nsa = MultiTaskNet::<f32>::build(&cfg, &tasks, regions.clone(), &AtrcMode::NoSelfAttention, 0).unwrap();
        for b in &nsa.blocks {
            assert_eq!(b.candidates.is_empty(), b.target == b.source);
        }
        let batch = set.batch(&[0, 1, 2]).unwrap();
        let arch = vec![ContextType::Global, ContextType::Local, ContextType::TLabel, ContextType::SLabel]
            .into_iter()
            .cycle()
            .take(16)
            .collect::<Vec<_>>();
        let fixed = MultiTaskNet::<f32>::build(&cfg, &tasks, regions.clone(), &AtrcMode::Fixed { arch: arch.clone() }, 0).unwrap();
        let mut tape = Tape::new();
        let mut buffers = fixed.buffers.clone();
        let out = fixed.forward(&mut tape, &mut buffers, &batch, true, &ForwardOptions::new(ArchInput::Fixed(&arch))).unwrap();
        let shapes: Vec<Vec<usize>> = out.preds.iter().map(|&p| tape.shape(p).to_vec()).collect();
        assert_eq!(shapes, vec![vec![3, 4, 8, 8], vec![3, 1, 8, 8], vec![3, 3, 8, 8], vec![3, 1, 8, 8]]);
        for (t, &a) in out.a_hat.iter().enumerate() {
            let v = tape.value(a);
            assert_eq!(v.shape(), &[3, regions[t].count(), 64]);
            for row in v.data().chunks(64) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            }
        }
        let base = MultiTaskNet::<f32>::build(&cfg, &tasks, regions, &AtrcMode::None, 0).unwrap();
        assert!(base.blocks.is_empty() && base.fusion.is_empty());
    }

    #[test]
    fn gt_region_maps_are_distributions() {
        let (cfg, tasks, regions, set) = tiny_setup(8);
        let net = MultiTaskNet::<f64>::build(&cfg, &tasks, regions, &AtrcMode::Single { context: ContextType::SLabel }, 1).unwrap();
        let batch = set.batch(&[0, 1]).unwrap();
        for t in 0..4 {
            let m = net.gt_region_maps(&batch, t).unwrap();
            for row in m.data().chunks(64) {
                let s: f64 = row.iter().sum();
                assert!(s == 0.0 || (s - 1.0).abs() < 1e-12);
            }
        }
    }
}
