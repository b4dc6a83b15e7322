//! Experiment configuration, read from and written to JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contexts::ContextType;
use crate::error::{Error, Result};
use crate::nas::SearchSchedule;
use crate::synth::{SceneSpec, NUM_CLASSES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Semantic segmentation.
    Classification,
    Depth,
    Normals,
    Boundary,
}

impl TaskKind {
    pub fn out_channels(self) -> usize {
        match self {
            TaskKind::Classification => NUM_CLASSES,
            TaskKind::Depth | TaskKind::Boundary => 1,
            TaskKind::Normals => 3,
        }
    }

    pub fn metric(self) -> &'static str {
        match self {
            TaskKind::Classification => "miou",
            TaskKind::Depth => "rmse",
            TaskKind::Normals => "mean_angle_deg",
            TaskKind::Boundary => "boundary_f",
        }
    }

    /// 1 when lower values are better.
    pub fn gamma(self) -> u8 {
        match self {
            TaskKind::Classification | TaskKind::Boundary => 0,
            TaskKind::Depth | TaskKind::Normals => 1,
        }
    }

    pub fn default_weight(self) -> f64 {
        match self {
            TaskKind::Classification | TaskKind::Depth => 1.0,
            TaskKind::Normals => 10.0,
            TaskKind::Boundary => 50.0,
        }
    }

    pub fn default_regions(self) -> RegionConfig {
        match self {
            TaskKind::Classification => RegionConfig::Classes { count: NUM_CLASSES },
            TaskKind::Depth => RegionConfig::DepthBins { bins: 40 },
            TaskKind::Normals => RegionConfig::NormalCodebook { codewords: 20 },
            TaskKind::Boundary => RegionConfig::Classes { count: 2 },
        }
    }
}

/// How a task's label space is split into regions for the label contexts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionConfig {
    Classes { count: usize },
    /// Log-spaced bins over the observed training depth range.
    DepthBins { bins: usize },
    /// Spherical k-means codebook over training normals.
    NormalCodebook { codewords: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub loss_weight: f64,
    pub regions: RegionConfig,
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        let name = match kind {
            TaskKind::Classification => "semseg",
            TaskKind::Depth => "depth",
            TaskKind::Normals => "normals",
            TaskKind::Boundary => "boundary",
        };
        TaskSpec {
            name: name.into(),
            kind,
            loss_weight: kind.default_weight(),
            regions: kind.default_regions(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kind.out_channels()
    }

    pub fn gamma(&self) -> u8 {
        self.kind.gamma()
    }
}

pub fn default_tasks() -> Vec<TaskSpec> {
    [TaskKind::Classification, TaskKind::Depth, TaskKind::Normals, TaskKind::Boundary]
        .into_iter()
        .map(TaskSpec::new)
        .collect()
}

/// Which distillation the model runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AtrcMode {
    /// Supergraph over all candidates with Gumbel-Softmax weights.
    Search,
    /// Search with the diagonal (self-attention) blocks fixed to none.
    NoSelfAttention,
    /// One context per block, row-major over (target, source).
    Fixed { arch: Vec<ContextType> },
    /// The same context in every block.
    Single { context: ContextType },
    /// Multi-task baseline: predictions read the task features directly.
    None,
}

impl AtrcMode {
    pub fn is_search(&self) -> bool {
        matches!(self, AtrcMode::Search | AtrcMode::NoSelfAttention)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone_width: usize,
    pub backbone_depth: usize,
    pub feature_width: usize,
    pub dk: usize,
    pub dv: usize,
    pub window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone_width: 32,
            backbone_depth: 3,
            feature_width: 32,
            dk: 16,
            dv: 16,
            window: 9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Normal samples drawn for fitting the codebook.
    pub codebook_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 8,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            poly_power: 0.9,
            train_samples: 512,
            test_samples: 128,
            codebook_samples: 4000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: SceneSpec,
    pub model: ModelConfig,
    pub tasks: Vec<TaskSpec>,
    pub train: TrainConfig,
    pub search: SearchSchedule,
    pub mode: AtrcMode,
    /// Boundary BCE weights for positive and negative pixels.
    pub boundary_pos_weight: f64,
    pub boundary_neg_weight: f64,
    /// One search run per seed.
    pub search_seeds: Vec<u64>,
    pub importance_repetitions: usize,
    /// Label contexts read ground-truth region maps instead of the
    /// auxiliary predictions (upper-bound experiment).
    pub regions_from_gt: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: SceneSpec::default(),
            model: ModelConfig::default(),
            tasks: default_tasks(),
            train: TrainConfig::default(),
            search: SearchSchedule::default(),
            mode: AtrcMode::Search,
            boundary_pos_weight: 0.8,
            boundary_neg_weight: 0.2,
            search_seeds: vec![0, 1, 2, 3, 4],
            importance_repetitions: 5,
            regions_from_gt: false,
        }
    }
}

impl ExperimentConfig {
    /// Reduced sizes for single-core runs: 16x16 scenes, width 16, 300
    /// iterations. The architecture learning rate grows with the shorter
    /// schedule so that blocks still freeze before the end.
    pub fn desk() -> Self {
        let mut c = ExperimentConfig::default();
        c.data.height = 16;
        c.data.width = 16;
        c.model = ModelConfig {
            backbone_width: 16,
            backbone_depth: 3,
            feature_width: 16,
            dk: 8,
            dv: 8,
            window: 5,
        };
        c.train.iterations = 300;
        c.train.train_samples = 256;
        c.train.test_samples = 64;
        c.search.total_iters = 300;
        c.search.alpha_lr = 0.05;
        c
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn blocks(&self) -> usize {
        self.tasks.len() * self.tasks.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.tasks.len() < 2 {
            return bad(format!("need at least 2 tasks, got {}", self.tasks.len()));
        }
        for t in &self.tasks {
            if !(t.loss_weight >= 0.0) || !t.loss_weight.is_finite() {
                return bad(format!("task {} has invalid loss weight {}", t.name, t.loss_weight));
            }
            let ok = matches!(
                (t.kind, &t.regions),
                (TaskKind::Classification, RegionConfig::Classes { count: NUM_CLASSES })
                    | (TaskKind::Boundary, RegionConfig::Classes { count: 2 })
                    | (TaskKind::Depth, RegionConfig::DepthBins { .. })
                    | (TaskKind::Normals, RegionConfig::NormalCodebook { .. })
            );
            if !ok {
                return bad(format!("task {} has regions {:?} that do not fit its labels", t.name, t.regions));
            }
        }
        for (i, a) in self.tasks.iter().enumerate() {
            if self.tasks[..i].iter().any(|b| b.name == a.name) {
                return bad(format!("duplicate task name {}", a.name));
            }
        }
        let m = &self.model;
        if m.backbone_width == 0 || m.feature_width == 0 || m.dk == 0 || m.dv == 0 || m.backbone_depth == 0 {
            return bad("model widths and depth must be positive".into());
        }
        if m.window.is_multiple_of(2) {
            return bad(format!("local window {} must be odd", m.window));
        }
        if self.train.batch_size == 0 || self.train.iterations == 0 || self.train.train_samples == 0 {
            return bad("batch size, iterations and train samples must be positive".into());
        }
        if let AtrcMode::Fixed { arch } = &self.mode {
            if arch.len() != self.blocks() {
                return bad(format!("fixed arch has {} entries, expected {}", arch.len(), self.blocks()));
            }
        }
        if self.mode.is_search() && self.search.total_iters == 0 {
            return bad("search schedule needs iterations".into());
        }
        Ok(())
    }
}
