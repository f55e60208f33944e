//! Training loop: SGD with per-layer scaled learning rates, crash detection
//! and periodic refresh of the weight and activation clips.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::clip::ClipSearchConfig;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::lr_scale::LrScaleConfig;
use crate::nn::{Backward, Forward, GradClip, LayerQuant, Mode, Model};
use crate::quant::LcgStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    /// `0.5 * lr0 * (1 + cos(pi * t / T))`.
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub base_lr: f64,
    pub schedule: LrSchedule,
    /// Zero gives plain SGD.
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// `None` disables learning-rate scaling.
    pub lr_scale: Option<LrScaleConfig>,
    pub grad_clip: GradClip,
    /// Iterations between gradient clip searches.
    pub period: u64,
    /// Iterations between weight and activation clip refreshes.
    pub wa_period: u64,
    /// Batches used to calibrate the initial activation clips.
    pub calibration_batches: usize,
    /// Stop after this many iterations even if epochs remain.
    pub max_iters: Option<u64>,
    /// Iterations whose gradients and weights are kept in the step report.
    pub capture_iters: Vec<u64>,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Int8,
            base_lr: 0.1,
            schedule: LrSchedule::Cosine,
            momentum: 0.0,
            epochs: 1,
            batch_size: 32,
            seed: 0,
            lr_scale: Some(LrScaleConfig::default()),
            grad_clip: GradClip::Search(ClipSearchConfig::default()),
            period: 100,
            wa_period: 100,
            calibration_batches: 1,
            max_iters: None,
            capture_iters: Vec::new(),
            eval_batch_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base lr must be finite and nonnegative, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.period == 0 || self.wa_period == 0 {
            return Err(Error::Config("clip periods must be positive".into()));
        }
        if self.calibration_batches == 0 {
            return Err(Error::Config("at least one calibration batch is required".into()));
        }
        if let Some(s) = &self.lr_scale {
            s.validate()?;
        }
        if let GradClip::Search(c) = &self.grad_clip {
            c.validate()?;
        }
        Ok(())
    }

    pub fn lr_at(&self, iter: u64, total: u64) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.base_lr,
            LrSchedule::Cosine => {
                let t = iter as f64 / total.max(1) as f64;
                0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub layer: usize,
    pub dc: f64,
    pub clip: f32,
    pub lr_scale: f64,
    pub eps_norm: f64,
    pub ghat_sqnorm: f64,
}

/// Float activation gradient and weight of one layer at a captured iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Capture {
    pub layer: usize,
    pub gz: Tensor,
    pub weight: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub iter: u64,
    pub lr: f64,
    pub loss: f64,
    pub layers: Vec<LayerReport>,
    pub diverged: bool,
    pub captures: Vec<Capture>,
    /// Wall time spent choosing gradient clips; excluded from equality-based
    /// determinism checks by callers.
    pub clip_time: Duration,
}

impl StepReport {
    fn crashed(iter: u64, lr: f64, loss: f64, layers: usize, clip_time: Duration) -> Self {
        let nan = LayerReport { layer: 0, dc: f64::NAN, clip: f32::NAN, lr_scale: f64::NAN, eps_norm: f64::NAN, ghat_sqnorm: f64::NAN };
        StepReport {
            iter,
            lr,
            loss,
            layers: (0..layers).map(|layer| LayerReport { layer, ..nan.clone() }).collect(),
            diverged: true,
            captures: Vec::new(),
            clip_time,
        }
    }
}

/// Initial weight and activation clips: `max|W|`, and the running maximum of
/// `max|a|` over the calibration batches in an FP32 pass.
pub fn calibrate_wa_clips(model: &Model, batches: &[Tensor]) -> Result<Vec<(f32, f32)>> {
    if batches.is_empty() {
        return Err(Error::Config("calibration needs at least one batch".into()));
    }
    let mut probe = model.clone();
    let n = probe.quant_layers();
    let mut act = vec![0.0f32; n];
    for x in batches {
        let labels = vec![0; x.dims()[0]];
        let out = probe.forward(x, &labels, Forward { mode: Mode::Fp32, train: true, states: &[] })?;
        for (a, m) in act.iter_mut().zip(out.act_max_abs) {
            *a = a.max(m);
        }
    }
    Ok(model.quantized_weights().iter().map(|w| w.max_abs()).zip(act).collect())
}

pub fn new_states(model: &Model, period: u64) -> Vec<LayerQuant> {
    (0..model.quant_layers()).map(|i| LayerQuant::new(i, period)).collect()
}

fn is_nonfinite_error(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. })
}

/// One SGD iteration at learning rate `lr`.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Model,
    x: &Tensor,
    labels: &[usize],
    states: &mut [LayerQuant],
    stream: &mut LcgStream,
    cfg: &TrainConfig,
    iter: u64,
    lr: f64,
) -> Result<StepReport> {
    let n_layers = model.quant_layers();
    let refresh = cfg.mode == Mode::Int8 && iter > 0 && iter % cfg.wa_period == 0;
    if refresh {
        for (s, w) in states.iter_mut().zip(model.quantized_weights()) {
            s.weight_clip = w.max_abs();
        }
    }
    let out = match model.forward(x, labels, Forward { mode: cfg.mode, train: true, states }) {
        Ok(o) => o,
        Err(e) if is_nonfinite_error(&e) => return Ok(StepReport::crashed(iter, lr, f64::NAN, n_layers, Duration::ZERO)),
        Err(e) => return Err(e),
    };
    if refresh {
        for (s, &a) in states.iter_mut().zip(&out.act_max_abs) {
            s.act_clip = a;
        }
    }
    let loss = out.loss;
    if !loss.is_finite() || out.logits.has_nonfinite() {
        return Ok(StepReport::crashed(iter, lr, loss, n_layers, Duration::ZERO));
    }
    let capture = cfg.capture_iters.contains(&iter);
    let mut bwd = Backward { states, policy: cfg.grad_clip, iter, stream, capture };
    let grads = match model.backward(out, &mut bwd) {
        Ok(g) => g,
        Err(e) if is_nonfinite_error(&e) => return Ok(StepReport::crashed(iter, lr, f64::NAN, n_layers, Duration::ZERO)),
        Err(e) => return Err(e),
    };
    let mut finite = true;
    model.visit_params_mut(&mut |p| finite &= !p.param.grad.has_nonfinite());
    if !finite {
        return Ok(StepReport::crashed(iter, lr, loss, n_layers, grads.clip_time));
    }

    let scale_on = cfg.mode == Mode::Int8;
    let scales: BTreeMap<usize, f64> = grads
        .layers
        .iter()
        .map(|g| (g.layer, cfg.lr_scale.filter(|_| scale_on).map_or(1.0, |s| s.scale_factor(g.dc))))
        .collect();
    model.visit_params_mut(&mut |p| {
        let f = p.qid.map_or(1.0, |q| scales[&q]);
        p.param.sgd(lr * f, cfg.momentum);
    });

    let mut captures = Vec::new();
    if capture {
        let weights = model.quantized_weights();
        for g in &grads.layers {
            if let Some(gz) = &g.gz {
                captures.push(Capture { layer: g.layer, gz: gz.clone(), weight: weights[g.layer].clone() });
            }
        }
    }
    let layers = grads
        .layers
        .iter()
        .map(|g| LayerReport {
            layer: g.layer,
            dc: g.dc,
            clip: g.clip,
            lr_scale: scales[&g.layer],
            eps_norm: g.eps_norm,
            ghat_sqnorm: g.ghat_sqnorm,
        })
        .collect();
    Ok(StepReport { iter, lr, loss, layers, diverged: false, captures, clip_time: grads.clip_time })
}

/// Top-1 accuracy in `mode`, using running batch-norm statistics.
pub fn evaluate(model: &mut Model, ds: &Dataset, mode: Mode, states: &[LayerQuant], batch: usize) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Dataset("empty evaluation set".into()));
    }
    let mut correct = 0usize;
    for idx in ds.eval_batches(batch) {
        let (x, labels) = ds.batch(&idx)?;
        let out = model.forward(&x, &labels, Forward { mode, train: false, states })?;
        for (row, &y) in out.logits.data().chunks_exact(model.classes).zip(&labels) {
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if row.iter().all(|v| v.is_finite()) && best == y {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrashKind {
    /// Non-finite loss or gradients.
    NonFinite,
    /// Test accuracy at or below 1.5x chance after an epoch, either falling
    /// back from above that level or still there when training ends.
    AccuracyCollapse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub iterations: u64,
    pub epochs_completed: usize,
    pub initial_accuracy: f64,
    pub epoch_accuracy: Vec<f64>,
    pub final_accuracy: f64,
    pub crash: Option<(u64, CrashKind)>,
    pub clip_seconds: f64,
    pub train_seconds: f64,
    pub clip_searches: u64,
}

impl RunSummary {
    pub fn crashed(&self) -> bool {
        self.crash.is_some()
    }
}

/// A model together with its quantization states and the gradient RNG.
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub states: Vec<LayerQuant>,
    pub stream: LcgStream,
    pub iter: u64,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let states = new_states(&model, cfg.period);
        let stream = LcgStream::from_seed(cfg.seed ^ 0x5EED_0F_6AD5);
        Ok(Trainer { model, cfg, states, stream, iter: 0 })
    }

    pub fn calibrate(&mut self, batches: &[Tensor]) -> Result<()> {
        for (s, (w, a)) in self.states.iter_mut().zip(calibrate_wa_clips(&self.model, batches)?) {
            s.weight_clip = w;
            s.act_clip = a;
        }
        Ok(())
    }

    pub fn evaluate(&mut self, ds: &Dataset) -> Result<f64> {
        evaluate(&mut self.model, ds, self.cfg.mode, &self.states, self.cfg.eval_batch_size)
    }

    pub fn total_iters(&self, train: &Dataset) -> u64 {
        let per_epoch = (train.len() / self.cfg.batch_size) as u64;
        let total = per_epoch * self.cfg.epochs as u64;
        self.cfg.max_iters.map_or(total, |m| m.min(total))
    }

    /// Trains for the configured epochs, calling `on_step` after every
    /// iteration. Stops at the first crash.
    pub fn run(&mut self, split: &Split, on_step: &mut dyn FnMut(&StepReport) -> Result<()>) -> Result<RunSummary> {
        let cfg = self.cfg.clone();
        if split.train.len() < cfg.batch_size {
            return Err(Error::Dataset(format!(
                "{} training samples cannot fill a batch of {}",
                split.train.len(),
                cfg.batch_size
            )));
        }
        let start = Instant::now();
        let total = self.total_iters(&split.train);
        if cfg.mode == Mode::Int8 {
            let order = split.train.epoch_batches(cfg.batch_size, cfg.seed, 0);
            let batches = order
                .iter()
                .take(cfg.calibration_batches)
                .map(|idx| split.train.batch(idx).map(|b| b.0))
                .collect::<Result<Vec<_>>>()?;
            self.calibrate(&batches)?;
        }
        let initial_accuracy = self.evaluate(&split.test)?;
        let collapse = 1.5 / split.test.classes() as f64;
        let mut best = 0.0f64;
        let mut summary = RunSummary {
            iterations: 0,
            epochs_completed: 0,
            initial_accuracy,
            epoch_accuracy: Vec::new(),
            final_accuracy: initial_accuracy,
            crash: None,
            clip_seconds: 0.0,
            train_seconds: 0.0,
            clip_searches: 0,
        };
        'epochs: for epoch in 0..cfg.epochs {
            if self.iter >= total {
                break;
            }
            for idx in split.train.epoch_batches(cfg.batch_size, cfg.seed, epoch as u64) {
                if self.iter >= total {
                    break;
                }
                let (x, labels) = split.train.batch(&idx)?;
                let lr = cfg.lr_at(self.iter, total);
                let report =
                    train_step(&mut self.model, &x, &labels, &mut self.states, &mut self.stream, &cfg, self.iter, lr)?;
                summary.clip_seconds += report.clip_time.as_secs_f64();
                on_step(&report)?;
                self.iter += 1;
                summary.iterations = self.iter;
                if report.diverged {
                    summary.crash = Some((report.iter, CrashKind::NonFinite));
                    break 'epochs;
                }
            }
            let acc = self.evaluate(&split.test)?;
            summary.epoch_accuracy.push(acc);
            let prior_best = best;
            best = best.max(acc);
            summary.final_accuracy = acc;
            summary.epochs_completed = epoch + 1;
            let last = epoch + 1 == cfg.epochs || self.iter >= total;
            if acc <= collapse && (prior_best > collapse || last) {
                summary.crash = Some((self.iter, CrashKind::AccuracyCollapse));
                break;
            }
        }
        if summary.crash.is_some_and(|(_, k)| k == CrashKind::NonFinite) {
            summary.final_accuracy = self.evaluate(&split.test)?;
        }
        summary.clip_searches = self.states.iter().map(|s| s.grad.searches).sum();
        summary.train_seconds = start.elapsed().as_secs_f64();
        Ok(summary)
    }
}
