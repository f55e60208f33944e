//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clip::ClipSearchConfig;
use crate::data::{image_dims, load_cifar10, synthetic_blobs, BlobSpec, Split, CIFAR_SIDE};
use crate::diagnostics::regret::{GradQuant, StepSize};
use crate::diagnostics::histogram::MIN_BINS;
use crate::error::{Error, Result};
use crate::kernels::ConvGeometry;
use crate::lr_scale::{LrScaleConfig, ScaleForm};
use crate::nn::{zoo, GradClip, Mode, Model, ModelKind};
use crate::train::{LrSchedule, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub optim: OptimSection,
    #[serde(default)]
    pub clip: ClipSection,
    #[serde(default)]
    pub lr_scale: LrScaleSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub bound: BoundSection,
    #[serde(default)]
    pub bench: BenchSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    /// Run id written into every trace row.
    pub name: String,
    pub model: ModelKind,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn default_width() -> usize {
    8
}

fn default_mode() -> Mode {
    Mode::Int8
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Directory holding `data_batch_{1..5}.bin` and `test_batch.bin`.
    Cifar10 {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_limit: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_limit: Option<usize>,
    },
    /// Noisy class prototypes; generated from the experiment seed.
    SyntheticBlobs { classes: usize, dim: usize, train: usize, test: usize, noise: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub lr: f64,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_iters: Option<u64>,
    pub eval_batch_size: usize,
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection {
            lr: 0.1,
            schedule: LrSchedule::Cosine,
            momentum: 0.0,
            epochs: 5,
            batch_size: 32,
            max_iters: None,
            eval_batch_size: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipPolicy {
    /// Minimize the cosine distance of the quantized activation gradient.
    Search,
    /// No clipping: the clip follows `max|g|`.
    MaxAbs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipSection {
    pub policy: ClipPolicy,
    pub grid: usize,
    pub refine_rounds: usize,
    pub period: u64,
    pub wa_period: u64,
    pub calibration_batches: usize,
}

impl Default for ClipSection {
    fn default() -> Self {
        let s = ClipSearchConfig::default();
        ClipSection { policy: ClipPolicy::Search, grid: s.grid, refine_rounds: s.refine_rounds, period: 100, wa_period: 100, calibration_batches: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrScaleSection {
    pub enabled: bool,
    pub alpha: f64,
    pub beta: f64,
    pub form: ScaleForm,
}

impl Default for LrScaleSection {
    fn default() -> Self {
        let s = LrScaleConfig::default();
        LrScaleSection { enabled: true, alpha: s.alpha, beta: s.beta, form: s.form }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    /// Iterations whose activation gradients and weights are snapshotted.
    pub capture_iters: Vec<u64>,
    pub bins: usize,
    /// Distribution fits use an evenly strided subsample of at most this size.
    pub max_samples: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection { capture_iters: Vec::new(), bins: 64, max_samples: 20_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    Constant,
    InvSqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundQuant {
    None,
    /// `clip` is a fraction of each round's `max|g|`.
    Ratio,
    /// `clip` is an absolute value.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundSection {
    pub samples: usize,
    pub dim: usize,
    pub lambda: f64,
    pub rounds: usize,
    /// Half-width of the feasible box.
    pub radius: f64,
    pub eta: f64,
    pub step: StepRule,
    pub quant: BoundQuant,
    pub clip: f64,
}

impl Default for BoundSection {
    fn default() -> Self {
        BoundSection {
            samples: 500,
            dim: 50,
            lambda: 1e-3,
            rounds: 1000,
            radius: 1.0,
            eta: 0.5,
            step: StepRule::InvSqrt,
            quant: BoundQuant::Ratio,
            clip: 1.0,
        }
    }
}

impl BoundSection {
    pub fn step_size(&self) -> StepSize {
        match self.step {
            StepRule::Constant => StepSize::Constant(self.eta),
            StepRule::InvSqrt => StepSize::InvSqrt(self.eta),
        }
    }

    pub fn grad_quant(&self) -> GradQuant {
        match self.quant {
            BoundQuant::None => GradQuant::None,
            BoundQuant::Ratio => GradQuant::Ratio(self.clip),
            BoundQuant::Fixed => GradQuant::Fixed(self.clip),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConv {
    pub batch: usize,
    pub channels: usize,
    pub size: usize,
    pub out: usize,
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub pad: usize,
    #[serde(default = "one")]
    pub groups: usize,
}

fn one() -> usize {
    1
}

impl BenchConv {
    pub fn geometry(&self) -> Result<ConvGeometry> {
        ConvGeometry::new(
            [self.batch, self.channels, self.size, self.size],
            self.out,
            [self.kernel, self.kernel],
            self.stride,
            self.pad,
            self.groups,
        )
    }

    pub fn label(&self) -> String {
        format!(
            "n{}c{}h{}o{}k{}s{}p{}g{}",
            self.batch, self.channels, self.size, self.out, self.kernel, self.stride, self.pad, self.groups
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub reps: usize,
    pub conv: Vec<BenchConv>,
    /// `[m, k, n]` shapes for the fused quantize-GEMM comparison.
    pub gemm: Vec<[usize; 3]>,
}

impl Default for BenchSection {
    fn default() -> Self {
        let c = |batch, channels, size, out, kernel, pad, groups| BenchConv {
            batch,
            channels,
            size,
            out,
            kernel,
            stride: 1,
            pad,
            groups,
        };
        BenchSection {
            reps: 5,
            conv: vec![
                c(1, 1, 1, 1, 1, 0, 1),
                c(8, 16, 16, 32, 3, 1, 1),
                c(8, 64, 8, 64, 1, 0, 1),
                c(8, 32, 16, 32, 3, 1, 32),
            ],
            gemm: vec![[256, 1024, 64], [128, 2304, 64]],
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates. Syntax errors report line and column; semantic
    /// errors name the offending field.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        let e = &self.experiment;
        if e.name.is_empty() || e.name.contains([',', '\n', '\r', '"']) {
            return bad("experiment.name", "must be nonempty without commas, quotes or newlines".into());
        }
        if e.width == 0 {
            return bad("experiment.width", "must be positive".into());
        }
        match &self.dataset {
            DatasetSpec::Cifar10 { train_limit, test_limit, .. } => {
                if *train_limit == Some(0) || *test_limit == Some(0) {
                    return bad("dataset", "limits must be positive".into());
                }
            }
            DatasetSpec::SyntheticBlobs { classes, dim, train, test, noise } => {
                if !(2..=256).contains(classes) {
                    return bad("dataset.classes", format!("must lie in 2..=256, got {classes}"));
                }
                if *dim == 0 || *train == 0 || *test == 0 {
                    return bad("dataset", "dim, train and test must be positive".into());
                }
                if !(*noise >= 0.0 && noise.is_finite()) {
                    return bad("dataset.noise", format!("must be finite and nonnegative, got {noise}"));
                }
            }
        }
        if self.analysis.bins < MIN_BINS {
            return bad("analysis.bins", format!("must be at least {MIN_BINS}"));
        }
        if self.analysis.max_samples < crate::diagnostics::distfit::MIN_SAMPLES {
            return bad("analysis.max_samples", "too small for a distribution fit".into());
        }
        let b = &self.bound;
        if b.samples == 0 || b.dim == 0 || b.rounds == 0 {
            return bad("bound", "samples, dim and rounds must be positive".into());
        }
        if !(b.radius > 0.0 && b.eta > 0.0 && b.lambda >= 0.0) {
            return bad("bound", "radius and eta must be positive and lambda nonnegative".into());
        }
        if b.quant != BoundQuant::None && !(b.clip > 0.0 && b.clip.is_finite()) {
            return bad("bound.clip", format!("must be positive, got {}", b.clip));
        }
        if self.bench.reps < 5 {
            return bad("bench.reps", format!("at least 5 repetitions are required, got {}", self.bench.reps));
        }
        for c in &self.bench.conv {
            c.geometry().map_err(|err| Error::Config(format!("bench.conv {}: {err}", c.label())))?;
        }
        if self.bench.gemm.iter().any(|s| s.contains(&0)) {
            return bad("bench.gemm", "shapes must be positive".into());
        }
        self.train_config().validate().map_err(|err| Error::Config(format!("optim/clip/lr_scale: {err}")))
    }

    pub fn train_config(&self) -> TrainConfig {
        let o = &self.optim;
        let c = &self.clip;
        let s = &self.lr_scale;
        TrainConfig {
            mode: self.experiment.mode,
            base_lr: o.lr,
            schedule: o.schedule,
            momentum: o.momentum,
            epochs: o.epochs,
            batch_size: o.batch_size,
            seed: self.experiment.seed,
            lr_scale: s.enabled.then_some(LrScaleConfig { alpha: s.alpha, beta: s.beta, form: s.form }),
            grad_clip: match c.policy {
                ClipPolicy::Search => GradClip::Search(ClipSearchConfig { grid: c.grid, refine_rounds: c.refine_rounds }),
                ClipPolicy::MaxAbs => GradClip::MaxAbs,
            },
            period: c.period,
            wa_period: c.wa_period,
            calibration_batches: c.calibration_batches,
            max_iters: o.max_iters,
            capture_iters: self.analysis.capture_iters.clone(),
            eval_batch_size: o.eval_batch_size,
        }
    }

    /// Input shape and class count implied by the dataset.
    pub fn input(&self) -> ([usize; 3], usize) {
        match &self.dataset {
            DatasetSpec::Cifar10 { .. } => ([3, CIFAR_SIDE, CIFAR_SIDE], 10),
            DatasetSpec::SyntheticBlobs { classes, dim, .. } => (image_dims(*dim), *classes),
        }
    }

    pub fn load_dataset(&self) -> Result<Split> {
        match &self.dataset {
            DatasetSpec::Cifar10 { path, train_limit, test_limit } => load_cifar10(path, *train_limit, *test_limit),
            &DatasetSpec::SyntheticBlobs { classes, dim, train, test, noise } => synthetic_blobs(&BlobSpec {
                classes,
                dim,
                train,
                test,
                seed: self.experiment.seed,
                noise: noise as f32,
            }),
        }
    }

    pub fn build_model(&self) -> Result<Model> {
        let (input, classes) = self.input();
        zoo::build(self.experiment.model, input, classes, self.experiment.width, self.experiment.seed)
    }
}
