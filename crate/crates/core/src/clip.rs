//! Direction-sensitive gradient clipping.
//!
//! The clip value of each layer's activation gradient is chosen to minimise
//! the cosine distance between the float gradient and its quantize-dequantized
//! counterpart. Searches run on a fixed period; between searches only the
//! distance at the current clip is measured, because the learning-rate scaler
//! consumes it every iteration.

use crate::error::{Error, Result};
use crate::quant::{quantize_scalar, QuantParams, RoundingMode};
use crate::tensor::{max_abs, Tensor};

/// `1 - cos(g, g_hat)` in `[0, 2]`, accumulated in `f64`.
///
/// If both inputs are zero the distance is 0; if exactly one is zero it is 1.
pub fn cosine_distance(g: &Tensor, g_hat: &Tensor) -> Result<f64> {
    if g.dims() != g_hat.dims() {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", g.dims(), g_hat.dims())));
    }
    Ok(cosine_distance_slices(g.data(), g_hat.data()))
}

pub fn cosine_distance_slices(g: &[f32], g_hat: &[f32]) -> f64 {
    let (mut dot, mut n1, mut n2) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in g.iter().zip(g_hat) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        n1 += a * a;
        n2 += b * b;
    }
    finish_distance(dot, n1, n2)
}

fn finish_distance(dot: f64, n1: f64, n2: f64) -> f64 {
    match (n1 == 0.0, n2 == 0.0) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 1.0,
        _ => (1.0 - dot / (n1.sqrt() * n2.sqrt())).clamp(0.0, 2.0),
    }
}

/// Cosine distance between `g` and its nearest-rounded quantize-dequantized
/// counterpart at `clip`, without materializing the dequantized tensor.
pub fn distance_at_clip(g: &[f32], clip: f32) -> Result<f64> {
    let params = QuantParams::new(clip)?;
    let (mut dot, mut n1, mut n2) = (0.0f64, 0.0f64, 0.0f64);
    for &x in g {
        let q = (quantize_scalar(x, params, RoundingMode::Nearest, None) as f32 * params.scale()) as f64;
        let x = x as f64;
        dot += x * q;
        n1 += x * x;
        n2 += q * q;
    }
    Ok(finish_distance(dot, n1, n2))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipSearchConfig {
    /// Number of grid candidates; candidate `i` is `i / grid * max|g|`.
    pub grid: usize,
    /// Golden-section refinement rounds around the best grid point.
    pub refine_rounds: usize,
}

impl Default for ClipSearchConfig {
    fn default() -> Self {
        ClipSearchConfig { grid: 32, refine_rounds: 2 }
    }
}

impl ClipSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid < 8 {
            return Err(Error::Config(format!("clip grid must be at least 8, got {}", self.grid)));
        }
        Ok(())
    }
}

/// Result of a clip search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipChoice {
    pub clip: f32,
    pub distance: f64,
    /// Number of distance evaluations performed.
    pub evaluations: usize,
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Searches the clip value minimising the cosine distance.
///
/// Returns `None` for an all-zero gradient. The returned distance never
/// exceeds the distance at `c = max|g|`, which is always a grid candidate.
pub fn search_clip(g: &Tensor, cfg: &ClipSearchConfig) -> Result<Option<ClipChoice>> {
    cfg.validate()?;
    if let Some(index) = g.first_nonfinite() {
        return Err(Error::NonFinite { index });
    }
    let m = max_abs(g.data());
    if m == 0.0 {
        return Ok(None);
    }
    let data = g.data();
    let at_ratio = |r: f64| -> Result<(f32, f64)> {
        let c = (r * m as f64) as f32;
        let c = if c > 0.0 { c } else { f32::MIN_POSITIVE };
        Ok((c, distance_at_clip(data, c)?))
    };

    let mut evaluations = 0;
    let mut best = (0usize, f32::NAN, f64::INFINITY);
    for i in 1..=cfg.grid {
        let (c, d) = at_ratio(i as f64 / cfg.grid as f64)?;
        evaluations += 1;
        if d < best.2 {
            best = (i, c, d);
        }
    }
    let (i_best, mut clip, mut distance) = best;

    let step = 1.0 / cfg.grid as f64;
    let mut lo = (i_best as f64 - 1.0) * step;
    let mut hi = ((i_best as f64 + 1.0) * step).min(1.0);
    for _ in 0..cfg.refine_rounds {
        let x1 = hi - INV_PHI * (hi - lo);
        let x2 = lo + INV_PHI * (hi - lo);
        let (c1, d1) = at_ratio(x1.max(step * 1e-3))?;
        let (c2, d2) = at_ratio(x2)?;
        evaluations += 2;
        for (c, d) in [(c1, d1), (c2, d2)] {
            if d < distance {
                clip = c;
                distance = d;
            }
        }
        if d1 < d2 {
            hi = x2;
        } else {
            lo = x1;
        }
    }
    Ok(Some(ClipChoice { clip, distance, evaluations }))
}

/// Per-layer clipping bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipState {
    pub layer: usize,
    pub clip: f32,
    pub last_dc: f64,
    /// Iteration of the last search; `None` until the first one.
    pub last_update: Option<u64>,
    pub period: u64,
    pub searches: u64,
    /// Elements passed through the quantizer for clip maintenance.
    pub element_evals: u64,
}

impl ClipState {
    pub fn new(layer: usize, period: u64) -> Self {
        ClipState {
            layer,
            clip: 1.0,
            last_dc: 0.0,
            last_update: None,
            period: period.max(1),
            searches: 0,
            element_evals: 0,
        }
    }

    pub fn is_due(&self, iter: u64) -> bool {
        match self.last_update {
            None => true,
            Some(last) => iter.saturating_sub(last) >= self.period,
        }
    }

    /// Runs a search when the period has elapsed, otherwise measures the
    /// distance at the current clip.
    pub fn maybe_update(&mut self, g: &Tensor, iter: u64, cfg: &ClipSearchConfig) -> Result<()> {
        if self.is_due(iter) {
            self.last_update = Some(iter);
            self.searches += 1;
            match search_clip(g, cfg)? {
                Some(choice) => {
                    self.clip = choice.clip;
                    self.last_dc = choice.distance;
                    self.element_evals += (choice.evaluations * g.len()) as u64;
                }
                None => self.last_dc = 0.0,
            }
        } else {
            self.measure(g)?;
        }
        Ok(())
    }

    /// Unclipped quantization: `c = max|g|` every iteration.
    pub fn track_max_abs(&mut self, g: &Tensor) -> Result<()> {
        if let Some(index) = g.first_nonfinite() {
            return Err(Error::NonFinite { index });
        }
        let m = g.max_abs();
        if m > 0.0 {
            self.clip = m;
        }
        self.measure(g)
    }

    fn measure(&mut self, g: &Tensor) -> Result<()> {
        self.last_dc = distance_at_clip(g.data(), self.clip)?;
        self.element_evals += g.len() as u64;
        Ok(())
    }
}
