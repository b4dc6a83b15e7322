//! Batching of synthetic samples and fitting of per-task label regions.

use rand::Rng;

use super::config::{RegionConfig, TaskKind, TaskSpec, TrainConfig};
use crate::error::{Error, Result};
use crate::label_space::{fit_normal_codebook, DepthBinning, GtLabels, LabelRegionSpec, RegionKind, Vec3};
use crate::rng::{keyed, stream};
use crate::synth::Sample;
use crate::tensor::Tensor;

/// Stacked labels and inputs of a minibatch. Per-pixel index vectors are
/// laid out `[B, H, W]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    pub height: usize,
    pub width: usize,
    pub image: Tensor<f32>,
    pub semseg: Vec<usize>,
    pub depth: Tensor<f32>,
    pub normals: Tensor<f32>,
    pub boundary: Tensor<f32>,
    /// Region index per pixel for every task.
    pub regions: Vec<Vec<usize>>,
}

impl Batch {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Samples with their region indices precomputed for every task.
#[derive(Clone, Debug)]
pub struct LabeledSet {
    pub samples: Vec<Sample>,
    /// `[sample][task] -> region index per pixel`.
    pub region_idx: Vec<Vec<Vec<usize>>>,
}

fn sample_normals(s: &Sample) -> Vec<f64> {
    s.normals.iter().map(|&x| x as f64).collect()
}

/// Region indices of one sample for one task.
pub fn sample_regions(task: &TaskSpec, spec: &LabelRegionSpec, s: &Sample) -> Result<Vec<usize>> {
    match task.kind {
        TaskKind::Classification => spec.region_indices(GtLabels::Classes(&s.semseg)),
        TaskKind::Boundary => {
            let b: Vec<usize> = s.boundary.iter().map(|&v| v as usize).collect();
            spec.region_indices(GtLabels::Classes(&b))
        }
        TaskKind::Depth => {
            let d: Vec<f64> = s.depth.iter().map(|&x| x as f64).collect();
            spec.region_indices(GtLabels::Depth(&d))
        }
        TaskKind::Normals => spec.region_indices(GtLabels::Normals(&sample_normals(s))),
    }
}

impl LabeledSet {
    pub fn new(samples: Vec<Sample>, tasks: &[TaskSpec], specs: &[LabelRegionSpec]) -> Result<Self> {
        let region_idx = samples
            .iter()
            .map(|s| tasks.iter().zip(specs).map(|(t, r)| sample_regions(t, r, s)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(LabeledSet { samples, region_idx })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let first = self
            .samples
            .get(*indices.first().ok_or_else(|| Error::Config("empty batch".into()))?)
            .ok_or_else(|| Error::Config("batch index out of range".into()))?;
        let (h, w) = (first.height, first.width);
        let l = h * w;
        let b = indices.len();
        let tasks = self.region_idx.first().map_or(0, |r| r.len());
        let mut image = Vec::with_capacity(b * 3 * l);
        let mut normals = Vec::with_capacity(b * 3 * l);
        let mut depth = Vec::with_capacity(b * l);
        let mut boundary = Vec::with_capacity(b * l);
        let mut semseg = Vec::with_capacity(b * l);
        let mut regions = vec![Vec::with_capacity(b * l); tasks];
        for &i in indices {
            let s = self.samples.get(i).ok_or_else(|| Error::Config("batch index out of range".into()))?;
            if s.height != h || s.width != w {
                return Err(Error::Config("samples in a batch differ in size".into()));
            }
            image.extend_from_slice(&s.image);
            normals.extend_from_slice(&s.normals);
            depth.extend_from_slice(&s.depth);
            boundary.extend(s.boundary.iter().map(|&v| v as f32));
            semseg.extend_from_slice(&s.semseg);
            for (t, r) in regions.iter_mut().enumerate() {
                r.extend_from_slice(&self.region_idx[i][t]);
            }
        }
        Ok(Batch {
            size: b,
            height: h,
            width: w,
            image: Tensor::new(&[b, 3, h, w], image)?,
            semseg,
            depth: Tensor::new(&[b, 1, h, w], depth)?,
            normals: Tensor::new(&[b, 3, h, w], normals)?,
            boundary: Tensor::new(&[b, 1, h, w], boundary)?,
            regions,
        })
    }

    /// The same samples labelled for task `t` only.
    pub fn task_subset(&self, t: usize) -> Result<Self> {
        let region_idx = self
            .region_idx
            .iter()
            .map(|r| r.get(t).cloned().map(|v| vec![v]).ok_or_else(|| Error::Config(format!("no task {t}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(LabeledSet {
            samples: self.samples.clone(),
            region_idx,
        })
    }

    /// Consecutive batches covering the set in order.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = Result<Batch>> + '_ {
        let n = self.len();
        (0..n).step_by(batch_size.max(1)).map(move |s| {
            let idx: Vec<usize> = (s..(s + batch_size).min(n)).collect();
            self.batch(&idx)
        })
    }
}

/// Fits the region partition of every task from the training samples.
pub fn fit_regions(tasks: &[TaskSpec], train: &[Sample], cfg: &TrainConfig, seed: u64) -> Result<Vec<LabelRegionSpec>> {
    tasks
        .iter()
        .map(|t| -> Result<LabelRegionSpec> {
            Ok(match &t.regions {
                RegionConfig::Classes { count } => LabelRegionSpec::classes(*count),
                RegionConfig::DepthBins { bins } => {
                    let (lo, hi) = train.iter().flat_map(|s| s.depth.iter()).fold((f64::MAX, f64::MIN), |(lo, hi), &d| {
                        (lo.min(d as f64), hi.max(d as f64))
                    });
                    if lo > hi {
                        return Err(Error::LabelSpace("no depth samples to fit bins".into()));
                    }
                    LabelRegionSpec {
                        kind: RegionKind::DepthBins(DepthBinning::from_observed(lo, hi, *bins)?),
                    }
                }
                RegionConfig::NormalCodebook { codewords } => {
                    let mut rng = keyed(seed, stream::CODEBOOK, 0);
                    let total: usize = train.iter().map(|s| s.pixels()).sum();
                    if total == 0 {
                        return Err(Error::LabelSpace("no normal samples to fit a codebook".into()));
                    }
                    let pts: Vec<Vec3> = (0..cfg.codebook_samples.max(*codewords))
                        .map(|_| {
                            let s = &train[rng.gen_range(0..train.len())];
                            let l = s.pixels();
                            let p = rng.gen_range(0..l);
                            [0, 1, 2].map(|c| s.normals[c * l + p] as f64)
                        })
                        .collect();
                    let fit = fit_normal_codebook(&pts, *codewords, seed)?;
                    LabelRegionSpec {
                        kind: RegionKind::NormalCodewords(fit.codebook),
                    }
                }
            })
        })
        .collect()
}
