//! Reverse-time integrators over any score field, analytic score oracles,
//! and two-phase (mask, then image) pair synthesis.

use std::fmt;
use std::str::FromStr;

use dxp_autodiff::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::data::{Provenance, SamplePair, MAX_FOREGROUND, MIN_FOREGROUND};
use crate::error::{Error, Result};
use crate::guidance::{guided_score, ConditionTarget, GuidanceSpec};
use crate::models::{Denoiser, Segmenter};
use crate::rng::{standard_normal, SeedStream};
use crate::schedule::{NoiseSchedule, T_MIN};

/// A score field `grad_x log q_t(x)`.
pub trait ScoreSource: Sync {
    fn score(&self, x: &Tensor, t: f64, schedule: &NoiseSchedule) -> Result<Tensor>;
}

/// Gradient of a condition log-likelihood `grad_x log p(y | x_t)`.
pub trait Condition: Sync {
    fn grad_log_prob(&self, x: &Tensor, t: f64, schedule: &NoiseSchedule) -> Result<Tensor>;
}

/// Data `x0 ~ N(m, v I)`. `mean` broadcasts cyclically over the leading
/// axis, so one oracle serves a batch of chains stored as rows.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianOracle {
    pub mean: Tensor,
    pub var: f64,
}

impl GaussianOracle {
    pub fn new(mean: Tensor, var: f64) -> Result<Self> {
        if !(var > 0.0) || mean.is_empty() {
            return Err(Error::invalid("oracle needs a non-empty mean and positive variance"));
        }
        Ok(GaussianOracle { mean, var })
    }

    /// `E[x0 | x_t]`
    pub fn posterior_mean(&self, x: &Tensor, t: f64, schedule: &NoiseSchedule) -> Result<Tensor> {
        let (a, s) = schedule.alpha_sigma(t)?;
        let gain = a * self.var / (a * a * self.var + s * s);
        Ok(cyclic_zip(x, &self.mean, |xi, mi| mi + gain * (xi - a * mi)))
    }
}

fn cyclic_zip(x: &Tensor, m: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = x.data().iter().zip(m.data().iter().cycle()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same length")
}

impl ScoreSource for GaussianOracle {
    fn score(&self, x: &Tensor, t: f64, schedule: &NoiseSchedule) -> Result<Tensor> {
        let (a, s) = schedule.alpha_sigma(t)?;
        let denom = a * a * self.var + s * s;
        Ok(cyclic_zip(x, &self.mean, |xi, mi| -(xi - a * mi) / denom))
    }
}

/// Isotropic Gaussian mixture with per-component weights.
#[derive(Clone, Debug)]
pub struct GaussianMixtureOracle {
    pub components: Vec<(f64, GaussianOracle)>,
}

impl ScoreSource for GaussianMixtureOracle {
    /// Evaluated per row of `x` (`[n, d]` or a single `[d]` point).
    fn score(&self, x: &Tensor, t: f64, schedule: &NoiseSchedule) -> Result<Tensor> {
        let (a, s) = schedule.alpha_sigma(t)?;
        let d = self.components[0].1.mean.len();
        if x.len() % d != 0 {
            return Err(Error::invalid(format!("state length {} not a multiple of {d}", x.len())));
        }
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(d) {
            let logs: Vec<f64> = self
                .components
                .iter()
                .map(|(w, c)| {
                    let var = a * a * c.var + s * s;
                    let sq: f64 = row.iter().zip(c.mean.data()).map(|(xi, mi)| (xi - a * mi).powi(2)).sum();
                    w.ln() - 0.5 * d as f64 * var.ln() - 0.5 * sq / var
                })
                .collect();
            let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let resp: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = resp.iter().sum();
            for (j, xi) in row.iter().enumerate() {
                let mut g = 0.0;
                for (r, (_, c)) in resp.iter().zip(&self.components) {
                    let var = a * a * c.var + s * s;
                    g += r / total * (-(xi - a * c.mean.data()[j]) / var);
                }
                out.push(g);
            }
        }
        Ok(Tensor::new(x.shape().to_vec(), out)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    EulerOde,
    EulerSde,
    DpmPp2M,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::EulerOde => "euler-ode",
            Method::EulerSde => "euler-sde",
            Method::DpmPp2M => "dpmpp-2m",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler-ode" => Ok(Method::EulerOde),
            "euler-sde" => Ok(Method::EulerSde),
            "dpmpp-2m" => Ok(Method::DpmPp2M),
            _ => Err(Error::invalid(format!("unknown solver `{s}` (euler-ode, euler-sde, dpmpp-2m)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    pub method: Method,
    pub steps: usize,
    pub t_start: f64,
    pub t_end: f64,
}

impl SolverConfig {
    pub fn new(method: Method, steps: usize) -> Self {
        SolverConfig {
            method,
            steps,
            t_start: 1.0,
            t_end: T_MIN,
        }
    }
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self::new(Method::DpmPp2M, 50)
    }
}

fn check_state(x: &Tensor, step: usize, t: f64) -> Result<()> {
    if x.all_finite() {
        Ok(())
    } else {
        Err(Error::SamplingDiverged { step, t })
    }
}

/// Integrates from `x_start` at `t_start` down to `t_end`. `rng` drives
/// the Brownian increments of the SDE solver and is unused otherwise.
pub fn sample(
    source: &dyn ScoreSource,
    cfg: &SolverConfig,
    schedule: &NoiseSchedule,
    x_start: Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if cfg.steps == 0 {
        return Err(Error::invalid("solver needs at least one step"));
    }
    if !(0.0..=1.0).contains(&cfg.t_end) || !(cfg.t_end < cfg.t_start && cfg.t_start <= 1.0) {
        return Err(Error::invalid(format!("bad time span {} -> {}", cfg.t_start, cfg.t_end)));
    }
    match cfg.method {
        Method::EulerOde => euler(source, cfg, schedule, x_start, None),
        Method::EulerSde => euler(source, cfg, schedule, x_start, Some(rng)),
        Method::DpmPp2M => dpmpp_2m(source, cfg, schedule, x_start),
    }
}

/// Draws `x_1 ~ N(0, I)` of the given shape and integrates it.
pub fn sample_from_noise(
    source: &dyn ScoreSource,
    cfg: &SolverConfig,
    schedule: &NoiseSchedule,
    shape: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let x1 = standard_normal(rng, shape);
    sample(source, cfg, schedule, x1, rng)
}

fn euler(
    source: &dyn ScoreSource,
    cfg: &SolverConfig,
    schedule: &NoiseSchedule,
    mut x: Tensor,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor> {
    let h = (cfg.t_start - cfg.t_end) / cfg.steps as f64;
    for i in 0..cfg.steps {
        let t = cfg.t_start - i as f64 * h;
        let (f, g2) = schedule.drift_diffusion(t)?;
        let score = source.score(&x, t, schedule)?;
        x = match rng.as_deref_mut() {
            // x(t - h) = x - h (f x - 1/2 g^2 score)
            None => x.lincomb(1.0 - h * f, &score, 0.5 * h * g2)?,
            Some(rng) => {
                let z = standard_normal(rng, x.shape());
                x.lincomb(1.0 - h * f, &score, h * g2)?.lincomb(1.0, &z, (g2 * h).sqrt())?
            }
        };
        check_state(&x, i, t)?;
    }
    Ok(x)
}

fn dpmpp_2m(source: &dyn ScoreSource, cfg: &SolverConfig, schedule: &NoiseSchedule, mut x: Tensor) -> Result<Tensor> {
    let lam_start = schedule.lambda(cfg.t_start)?;
    let lam_end = schedule.lambda(cfg.t_end)?;
    let n = cfg.steps;
    let times: Vec<f64> = (0..=n)
        .map(|i| match i {
            0 => cfg.t_start,
            i if i == n => cfg.t_end,
            i => schedule.inverse_lambda(lam_start + (lam_end - lam_start) * i as f64 / n as f64),
        })
        .collect();
    let mut prev: Option<(Tensor, f64)> = None;
    for i in 0..n {
        let (t0, t1) = (times[i], times[i + 1]);
        let (a0, s0) = schedule.alpha_sigma(t0)?;
        let (a1, s1) = schedule.alpha_sigma(t1)?;
        let h = schedule.lambda(t1)? - schedule.lambda(t0)?;
        let score = source.score(&x, t0, schedule)?;
        // Data prediction x0 = (x + sigma^2 score) / alpha.
        let x0 = x.lincomb(1.0 / a0, &score, s0 * s0 / a0)?;
        let d = match &prev {
            None => x0.clone(),
            Some((x0_prev, h_prev)) => {
                let r = h_prev / h;
                x0.lincomb(1.0 + 0.5 / r, x0_prev, -0.5 / r)?
            }
        };
        x = x.lincomb(s1 / s0, &d, -a1 * (-h).exp_m1())?;
        check_state(&x, i, t1)?;
        prev = Some((x0, h));
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// Learned scores and pair synthesis

/// Denoiser score for a fixed condition target, optionally guided.
pub struct LearnedScore<'a> {
    pub denoiser: &'a Denoiser,
    pub segmenter: Option<&'a Segmenter>,
    pub target: ConditionTarget,
    pub spec: Option<GuidanceSpec>,
}

impl ScoreSource for LearnedScore<'_> {
    fn score(&self, x: &Tensor, t: f64, schedule: &NoiseSchedule) -> Result<Tensor> {
        guided_score(self.denoiser, self.segmenter, x, t, &self.target, self.spec.as_ref(), schedule)
    }
}

pub const MAX_MASK_ATTEMPTS: usize = 5;

/// Synthesizes a mask from noise, then an image conditioned on it.
pub struct PairSampler<'a> {
    pub denoiser: &'a Denoiser,
    pub segmenter: Option<&'a Segmenter>,
    /// `None` synthesizes with the condition embedding only.
    pub spec: Option<GuidanceSpec>,
    pub solver: SolverConfig,
    pub schedule: NoiseSchedule,
    pub height: usize,
    pub width: usize,
}

impl PairSampler<'_> {
    pub fn sample(&self, seed: u64) -> Result<SamplePair> {
        let stream = SeedStream::new(seed).substream("sampling");
        let shape = [1, self.height, self.width];
        let spec = self.spec.filter(GuidanceSpec::is_active);
        let mut mask = None;
        for attempt in 0..MAX_MASK_ATTEMPTS {
            let source = LearnedScore {
                denoiser: self.denoiser,
                segmenter: self.segmenter,
                target: ConditionTarget::mask(),
                spec,
            };
            let mut rng = stream.rng(attempt as u64);
            let x = sample_from_noise(&source, &self.solver, &self.schedule, &shape, &mut rng)?;
            let m = x.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&m.mean()) {
                mask = Some(m);
                break;
            }
        }
        let mask = mask.ok_or(Error::MaskRejected(MAX_MASK_ATTEMPTS))?;
        let source = LearnedScore {
            denoiser: self.denoiser,
            segmenter: self.segmenter,
            target: ConditionTarget::image(mask.clone()),
            spec,
        };
        let mut rng = stream.substream("image").rng(0);
        let image = sample_from_noise(&source, &self.solver, &self.schedule, &shape, &mut rng)?;
        Ok(SamplePair {
            image: image.map(|v| f64::from(v.clamp(-1.0, 1.0) as f32)),
            mask,
            provenance: Provenance::Synthetic {
                seed,
                guidance: spec,
            },
        })
    }
}
