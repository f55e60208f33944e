//! Convex online-learning harness: projected SGD with quantized gradients,
//! regret tracking and the three-term average-regret bound.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::quant::{quantize_into, LcgStream, QuantParams, RoundingMode};

/// One online round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegretEntry {
    /// `f_t(w_t)`.
    pub loss: f64,
    /// `f_t(w*)`.
    pub loss_star: f64,
    /// `||g_t - ghat_t||_2`.
    pub eps_norm: f64,
    /// `||g_t - ghat_t||_1`.
    pub eps_l1: f64,
    pub eta: f64,
    /// `||ghat_t||_2^2`.
    pub ghat_sqnorm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegretTrace {
    /// Parameter count.
    pub d: usize,
    /// Configured diameter of the feasible set in the max norm.
    pub d_inf: f64,
    pub entries: Vec<RegretEntry>,
    /// Largest `||w_t - w*||_inf` seen during the run.
    pub max_distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundTerms {
    pub term1: f64,
    pub term2: f64,
    pub term3: f64,
}

impl BoundTerms {
    pub fn total(&self) -> f64 {
        self.term1 + self.term2 + self.term3
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    pub t: usize,
    pub avg_regret: f64,
    pub terms: BoundTerms,
    pub bound: f64,
    pub holds: bool,
    /// Second term with `||eps||_1`, which bounds `<eps, w - w*>` under the
    /// max-norm diameter without a dimension factor.
    pub term2_l1: f64,
}

/// `term1 = d D^2 / (2 T eta_T)`, `term2 = (D / T) sum ||eps_t||`,
/// `term3 = (1 / T) sum eta_t ||ghat_t||^2 / 2` over the first `t` entries.
pub fn regret_bound_terms(trace: &RegretTrace, t: usize) -> Result<BoundTerms> {
    if t == 0 || trace.entries.len() < t {
        return Err(Error::Config(format!("need {t} > 0 entries, trace has {}", trace.entries.len())));
    }
    let e = &trace.entries[..t];
    let tf = t as f64;
    let eta_t = e[t - 1].eta;
    Ok(BoundTerms {
        term1: trace.d as f64 * trace.d_inf * trace.d_inf / (2.0 * tf * eta_t),
        term2: trace.d_inf / tf * e.iter().map(|r| r.eps_norm).sum::<f64>(),
        term3: e.iter().map(|r| 0.5 * r.eta * r.ghat_sqnorm).sum::<f64>() / tf,
    })
}

/// Compares the measured average regret with the bound. A run whose iterates
/// left the configured diameter is rejected rather than judged.
pub fn verify_bound(trace: &RegretTrace, t: usize) -> Result<BoundReport> {
    if trace.max_distance > trace.d_inf * (1.0 + 1e-12) {
        return Err(Error::Assumption(format!(
            "iterates reached distance {} from the optimum, beyond D = {}",
            trace.max_distance, trace.d_inf
        )));
    }
    if let Some(r) = trace.entries.iter().find(|r| !(r.eta > 0.0)) {
        return Err(Error::Config(format!("step sizes must be positive, found {}", r.eta)));
    }
    let terms = regret_bound_terms(trace, t)?;
    let e = &trace.entries[..t];
    let avg_regret = e.iter().map(|r| r.loss - r.loss_star).sum::<f64>() / t as f64;
    let bound = terms.total();
    let term2_l1 = trace.d_inf / t as f64 * e.iter().map(|r| r.eps_l1).sum::<f64>();
    Ok(BoundReport { t, avg_regret, terms, bound, holds: avg_regret <= bound, term2_l1 })
}

/// Convex per-round losses.
#[derive(Debug, Clone, PartialEq)]
pub enum Problem {
    /// L2-regularized logistic regression; round `t` sees one sample.
    Logistic { features: Vec<f64>, labels: Vec<f64>, d: usize, lambda: f64 },
    /// `f_t(w) = sum_j a_j (w_j - b_j)^2 / 2` for every round.
    Quadratic { curvature: Vec<f64>, center: Vec<f64> },
}

impl Problem {
    /// Separable-ish synthetic data from a random teacher with label noise.
    pub fn logistic(n: usize, d: usize, lambda: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let teacher: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut features = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let x: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt()).collect();
            let margin: f64 = x.iter().zip(&teacher).map(|(a, b)| a * b).sum();
            let p = 1.0 / (1.0 + (-2.0 * margin).exp());
            labels.push(if rng.random::<f64>() < p { 1.0 } else { -1.0 });
            features.extend(x);
        }
        Problem::Logistic { features, labels, d, lambda }
    }

    pub fn quadratic(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let curvature = (0..d).map(|_| rng.random_range(0.5..2.0)).collect();
        let center = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
        Problem::Quadratic { curvature, center }
    }

    pub fn dim(&self) -> usize {
        match self {
            Problem::Logistic { d, .. } => *d,
            Problem::Quadratic { center, .. } => center.len(),
        }
    }

    fn rounds(&self) -> usize {
        match self {
            Problem::Logistic { labels, .. } => labels.len(),
            Problem::Quadratic { .. } => 1,
        }
    }

    /// Loss of round component `i` and its gradient written to `grad`.
    fn loss_grad(&self, i: usize, w: &[f64], grad: Option<&mut [f64]>) -> f64 {
        match self {
            Problem::Logistic { features, labels, d, lambda } => {
                let x = &features[i * d..(i + 1) * d];
                let y = labels[i];
                let m = y * x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
                // log(1 + e^{-m}) computed without overflow.
                let loss = if m > 0.0 { (-m).exp().ln_1p() } else { -m + m.exp().ln_1p() };
                let reg = 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>();
                if let Some(g) = grad {
                    let s = -y / (1.0 + m.exp());
                    for ((gj, xj), wj) in g.iter_mut().zip(x).zip(w) {
                        *gj = s * xj + lambda * wj;
                    }
                }
                loss + reg
            }
            Problem::Quadratic { curvature, center } => {
                if let Some(g) = grad {
                    for (j, gj) in g.iter_mut().enumerate() {
                        *gj = curvature[j] * (w[j] - center[j]);
                    }
                }
                0.5 * curvature.iter().zip(center).zip(w).map(|((a, b), x)| a * (x - b) * (x - b)).sum::<f64>()
            }
        }
    }

    /// Average loss over all round components and its gradient.
    pub fn full_loss_grad(&self, w: &[f64], grad: &mut [f64]) -> f64 {
        let n = self.rounds();
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut tmp = vec![0.0; w.len()];
        let mut loss = 0.0;
        for i in 0..n {
            loss += self.loss_grad(i, w, Some(&mut tmp));
            grad.iter_mut().zip(&tmp).for_each(|(g, t)| *g += t);
        }
        grad.iter_mut().for_each(|g| *g /= n as f64);
        loss / n as f64
    }
}

fn project(w: &mut [f64], radius: f64) {
    w.iter_mut().for_each(|v| *v = v.clamp(-radius, radius));
}

/// Minimizer of the average loss over the box `[-radius, radius]^d`, by
/// projected gradient descent until the gradient mapping has norm `< tol`.
pub fn solve_optimum(problem: &Problem, radius: f64, tol: f64, max_iters: usize) -> Result<Vec<f64>> {
    let d = problem.dim();
    let mut w = vec![0.0; d];
    let mut g = vec![0.0; d];
    // Step 1/L with a safe bound on the smoothness constant.
    let l = match problem {
        Problem::Logistic { features, labels, d, lambda } => {
            let n = labels.len() as f64;
            let sq: f64 = features.chunks_exact(*d).map(|x| x.iter().map(|v| v * v).sum::<f64>()).sum();
            0.25 * sq / n + lambda
        }
        Problem::Quadratic { curvature, .. } => curvature.iter().cloned().fold(0.0, f64::max),
    };
    let step = 1.0 / l;
    for _ in 0..max_iters {
        problem.full_loss_grad(&w, &mut g);
        let mut next: Vec<f64> = w.iter().zip(&g).map(|(a, b)| a - step * b).collect();
        project(&mut next, radius);
        let gm = next.iter().zip(&w).map(|(a, b)| ((b - a) / step).powi(2)).sum::<f64>().sqrt();
        w = next;
        if gm < tol {
            return Ok(w);
        }
    }
    Err(Error::Config(format!("optimum not reached within {max_iters} iterations")))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradQuant {
    /// Exact gradients.
    None,
    /// Clip at `ratio * max|g_t|`; `1.0` is unclipped quantization.
    Ratio(f64),
    /// Clip at a constant value.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSize {
    Constant(f64),
    /// `eta_0 / sqrt(t)` for rounds `t = 1, 2, ...`.
    InvSqrt(f64),
}

impl StepSize {
    pub fn at(&self, t: usize) -> f64 {
        match *self {
            StepSize::Constant(e) => e,
            StepSize::InvSqrt(e) => e / ((t + 1) as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarnessConfig {
    pub rounds: usize,
    /// Half-width of the feasible box; the diameter is twice this.
    pub radius: f64,
    pub step: StepSize,
    pub quant: GradQuant,
    pub seed: u64,
    /// Project iterates back onto the box. Disabling it voids the bound.
    pub project: bool,
}

/// Runs projected online SGD with quantized gradients and records the
/// per-round quantities of the bound.
pub fn run_online(problem: &Problem, w_star: &[f64], cfg: &HarnessConfig) -> Result<RegretTrace> {
    let d = problem.dim();
    if w_star.len() != d {
        return Err(Error::DimensionMismatch(format!("optimum has {} entries, problem {d}", w_star.len())));
    }
    let mut pick = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stream = LcgStream::from_seed(cfg.seed);
    let mut w = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut gf = vec![0.0f32; d];
    let mut q = vec![0i8; d];
    let mut entries = Vec::with_capacity(cfg.rounds);
    let mut max_distance = 0.0f64;
    for t in 0..cfg.rounds {
        max_distance = max_distance.max(w.iter().zip(w_star).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        let i = pick.random_range(0..problem.rounds());
        let loss = problem.loss_grad(i, &w, Some(&mut g));
        let loss_star = problem.loss_grad(i, w_star, None);
        let ghat: Vec<f64> = match cfg.quant {
            GradQuant::None => g.clone(),
            GradQuant::Ratio(_) | GradQuant::Fixed(_) => {
                gf.iter_mut().zip(&g).for_each(|(a, &b)| *a = b as f32);
                let max_abs = gf.iter().fold(0.0f32, |m, v| m.max(v.abs()));
                let clip = match cfg.quant {
                    GradQuant::Ratio(r) => max_abs * r as f32,
                    GradQuant::Fixed(c) => c as f32,
                    GradQuant::None => unreachable!(),
                };
                let params = QuantParams::from_max_abs(clip)?;
                quantize_into(&gf, params, RoundingMode::Stochastic, Some(&mut stream), &mut q)?;
                q.iter().map(|&v| v as f64 * params.scale() as f64).collect()
            }
        };
        let eps: Vec<f64> = g.iter().zip(&ghat).map(|(a, b)| a - b).collect();
        let eta = cfg.step.at(t);
        entries.push(RegretEntry {
            loss,
            loss_star,
            eps_norm: eps.iter().map(|v| v * v).sum::<f64>().sqrt(),
            eps_l1: eps.iter().map(|v| v.abs()).sum(),
            eta,
            ghat_sqnorm: ghat.iter().map(|v| v * v).sum(),
        });
        w.iter_mut().zip(&ghat).for_each(|(wj, gj)| *wj -= eta * gj);
        if cfg.project {
            project(&mut w, cfg.radius);
        }
    }
    Ok(RegretTrace { d, d_inf: 2.0 * cfg.radius, entries, max_distance })
}
