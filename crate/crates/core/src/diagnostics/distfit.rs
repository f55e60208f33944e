//! Maximum-likelihood fits and one-sample Kolmogorov-Smirnov statistics.

use statrs::distribution::{Continuous, ContinuousCDF, Laplace, Normal, StudentsT};

use crate::error::{Error, Result};

pub const MIN_SAMPLES: usize = 100;

/// Degrees of freedom tried by the Student-t fit.
pub const NU_GRID: std::ops::RangeInclusive<u32> = 1..=100;

const EM_ITERS: usize = 200;
const EM_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Gaussian,
    Laplace,
    StudentT,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Gaussian, Family::Laplace, Family::StudentT];

    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Laplace => "laplace",
            Family::StudentT => "student_t",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DistParams {
    Gaussian { mean: f64, std: f64 },
    Laplace { loc: f64, scale: f64 },
    StudentT { loc: f64, scale: f64, nu: f64 },
}

impl DistParams {
    pub fn family(&self) -> Family {
        match self {
            DistParams::Gaussian { .. } => Family::Gaussian,
            DistParams::Laplace { .. } => Family::Laplace,
            DistParams::StudentT { .. } => Family::StudentT,
        }
    }

    fn cdf_fn(&self) -> Result<Box<dyn Fn(f64) -> f64>> {
        let bad = |e: statrs::distribution::NormalError| Error::DegenerateSamples(e.to_string());
        Ok(match *self {
            DistParams::Gaussian { mean, std } => {
                let d = Normal::new(mean, std).map_err(bad)?;
                Box::new(move |x| d.cdf(x))
            }
            DistParams::Laplace { loc, scale } => {
                let d = Laplace::new(loc, scale).map_err(|e| Error::DegenerateSamples(e.to_string()))?;
                Box::new(move |x| d.cdf(x))
            }
            DistParams::StudentT { loc, scale, nu } => {
                let d = StudentsT::new(loc, scale, nu).map_err(|e| Error::DegenerateSamples(e.to_string()))?;
                Box::new(move |x| d.cdf(x))
            }
        })
    }

    pub fn cdf(&self, x: f64) -> Result<f64> {
        Ok(self.cdf_fn()?(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistFit {
    pub params: DistParams,
    pub n: usize,
    pub ks: f64,
    /// Critical value at the 0.05 level.
    pub critical: f64,
}

impl DistFit {
    pub fn family(&self) -> Family {
        self.params.family()
    }

    pub fn rejects(&self) -> bool {
        self.ks > self.critical
    }
}

/// Asymptotic 0.05-level critical value `1.358 / sqrt(n)`.
pub fn critical_value(n: usize) -> f64 {
    1.358 / (n as f64).sqrt()
}

fn check(samples: &[f64]) -> Result<()> {
    if samples.len() < MIN_SAMPLES {
        return Err(Error::DegenerateSamples(format!("{} samples, need {MIN_SAMPLES}", samples.len())));
    }
    if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }
    let first = samples[0];
    if samples.iter().all(|&v| v == first) {
        return Err(Error::DegenerateSamples("zero variance".into()));
    }
    Ok(())
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn sorted(samples: &[f64]) -> Vec<f64> {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Location and scale of a Student-t with fixed `nu` by EM, from a warm start.
fn fit_t_fixed_nu(x: &[f64], nu: f64, mut loc: f64, mut scale: f64) -> (f64, f64) {
    let n = x.len() as f64;
    for _ in 0..EM_ITERS {
        let (mut sw, mut swx) = (0.0, 0.0);
        let weights: Vec<f64> = x
            .iter()
            .map(|&v| {
                let z = (v - loc) / scale;
                (nu + 1.0) / (nu + z * z)
            })
            .collect();
        for (&w, &v) in weights.iter().zip(x) {
            sw += w;
            swx += w * v;
        }
        let new_loc = swx / sw;
        let var = weights.iter().zip(x).map(|(&w, &v)| w * (v - new_loc) * (v - new_loc)).sum::<f64>() / n;
        let new_scale = var.sqrt().max(f64::MIN_POSITIVE);
        let done = (new_loc - loc).abs() <= EM_TOL * scale && (new_scale - scale).abs() <= EM_TOL * scale;
        loc = new_loc;
        scale = new_scale;
        if done {
            break;
        }
    }
    (loc, scale)
}

/// Maximum-likelihood parameters. Gaussian and Laplace use closed forms;
/// Student-t profiles location and scale for each `nu` in [`NU_GRID`] and
/// keeps the most likely.
pub fn fit(samples: &[f64], family: Family) -> Result<DistParams> {
    check(samples)?;
    let n = samples.len() as f64;
    Ok(match family {
        Family::Gaussian => {
            let mean = samples.iter().sum::<f64>() / n;
            let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            DistParams::Gaussian { mean, std: var.sqrt() }
        }
        Family::Laplace => {
            let loc = median(&sorted(samples));
            let scale = samples.iter().map(|v| (v - loc).abs()).sum::<f64>() / n;
            if scale <= 0.0 {
                return Err(Error::DegenerateSamples("zero mean absolute deviation".into()));
            }
            DistParams::Laplace { loc, scale }
        }
        Family::StudentT => {
            let s = sorted(samples);
            let med = median(&s);
            let mut dev: Vec<f64> = s.iter().map(|v| (v - med).abs()).collect();
            dev.sort_by(f64::total_cmp);
            let mad = median(&dev);
            let mut scale = if mad > 0.0 { 1.4826 * mad } else { samples.iter().map(|v| (v - med).abs()).sum::<f64>() / n };
            let mut loc = med;
            let mut best: Option<(f64, DistParams)> = None;
            for nu in NU_GRID {
                let nu = nu as f64;
                (loc, scale) = fit_t_fixed_nu(samples, nu, loc, scale);
                let d = StudentsT::new(loc, scale, nu).map_err(|e| Error::DegenerateSamples(e.to_string()))?;
                let ll: f64 = samples.iter().map(|&v| d.ln_pdf(v)).sum();
                if best.as_ref().is_none_or(|(b, _)| ll > *b) {
                    best = Some((ll, DistParams::StudentT { loc, scale, nu }));
                }
            }
            best.expect("grid is nonempty").1
        }
    })
}

/// `sup |F_n - F|` over the sample points, including left limits.
pub fn ks_statistic(samples: &[f64], params: &DistParams) -> Result<f64> {
    check(samples)?;
    let cdf = params.cdf_fn()?;
    let s = sorted(samples);
    let n = s.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in s.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    Ok(d.clamp(0.0, 1.0))
}

/// Fit by maximum likelihood, then test the fit.
pub fn ks_test(samples: &[f64], family: Family) -> Result<DistFit> {
    let params = fit(samples, family)?;
    let ks = ks_statistic(samples, &params)?;
    Ok(DistFit { params, n: samples.len(), ks, critical: critical_value(samples.len()) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Direct empirical-CDF comparison at every sample point.
    fn brute_force_ks(samples: &[f64], params: &DistParams) -> f64 {
        let n = samples.len();
        let mut d = 0.0f64;
        for &x in samples {
            let le = samples.iter().filter(|&&v| v <= x).count();
            let lt = samples.iter().filter(|&&v| v < x).count();
            let f = params.cdf(x).unwrap();
            d = d.max((le as f64 / n as f64 - f).abs()).max((lt as f64 / n as f64 - f).abs());
        }
        d
    }

    fn normal_samples(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn gaussian_self_fit_is_close() {
        let x = normal_samples(100_000, 1);
        let f = ks_test(&x, Family::Gaussian).unwrap();
        assert!(f.ks < 0.01, "{}", f.ks);
        assert!(!f.rejects());
    }

    #[test]
    fn two_point_samples_are_far_from_gaussian() {
        let x: Vec<f64> = (0..1000).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
        let f = ks_test(&x, Family::Gaussian).unwrap();
        // The fit is N(0, 1); at x = -1 the empirical CDF jumps from 0 to 1/2.
        let phi = 0.5 * (1.0 + libm_erf(-1.0 / 2f64.sqrt()));
        assert!((f.ks - (0.5 - phi)).abs() < 1e-9);
        assert!(f.ks >= 0.3);
    }

    fn libm_erf(x: f64) -> f64 {
        statrs::function::erf::erf(x)
    }

    #[test]
    fn matches_brute_force_with_ties() {
        let mut x = normal_samples(3000, 2);
        for v in x.iter_mut().step_by(3) {
            *v = (*v * 4.0).round() / 4.0;
        }
        for family in Family::ALL {
            let p = fit(&x, family).unwrap();
            assert_eq!(ks_statistic(&x, &p).unwrap(), brute_force_ks(&x, &p), "{family:?}");
        }
    }

    #[test]
    fn closed_form_fits() {
        let x: Vec<f64> = (0..101).map(|i| i as f64).collect();
        match fit(&x, Family::Laplace).unwrap() {
            DistParams::Laplace { loc, scale } => {
                assert_eq!(loc, 50.0);
                assert!((scale - 2550.0 / 101.0).abs() < 1e-12);
            }
            _ => unreachable!(),
        }
        match fit(&x, Family::Gaussian).unwrap() {
            DistParams::Gaussian { mean, std } => {
                assert_eq!(mean, 50.0);
                assert!((std * std - 850.0).abs() < 1e-9);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn student_t_recovers_heavy_tails() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = StudentsT::new(0.5, 2.0, 3.0).unwrap();
        let x: Vec<f64> = (0..20_000).map(|_| t.inverse_cdf(rng.random_range(1e-12..1.0 - 1e-12))).collect();
        match fit(&x, Family::StudentT).unwrap() {
            DistParams::StudentT { loc, scale, nu } => {
                assert!((loc - 0.5).abs() < 0.1);
                assert!((scale - 2.0).abs() < 0.15);
                assert!((2.0..=5.0).contains(&nu), "{nu}");
            }
            _ => unreachable!(),
        }
        assert!(!ks_test(&x, Family::StudentT).unwrap().rejects());
        assert!(ks_test(&x, Family::Gaussian).unwrap().rejects());
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(fit(&[1.0; 200], Family::Gaussian), Err(Error::DegenerateSamples(_))));
        assert!(matches!(fit(&[1.0, 2.0], Family::Gaussian), Err(Error::DegenerateSamples(_))));
        assert!((critical_value(10_000) - 0.01358).abs() < 1e-15);
    }
}
