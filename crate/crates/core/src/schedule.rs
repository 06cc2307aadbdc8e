//! Variance-preserving noise schedules and the continuous-time quantities
//! derived from them: `alpha`, `sigma`, log-SNR `lambda`, drift `f` and
//! squared diffusion `g^2`.

use std::f64::consts::FRAC_PI_2;

use dxp_autodiff::Tensor;

use crate::error::{Error, Result};

/// Lower bound applied to `sigma` so scores stay finite at `t = 0`.
pub const SIGMA_FLOOR: f64 = 1e-4;
/// Smallest time used for training draws and as the sampling end point.
pub const T_MIN: f64 = 1e-3;

const COSINE_OFFSET: f64 = 0.008;
// The cosine schedule hits alpha = 0 at the end of its range; continuous
// time [0, 1] is mapped onto [0, COSINE_T_MAX] to keep log(alpha) finite.
const COSINE_T_MAX: f64 = 0.9946;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScheduleKind {
    LinearVp { beta_min: f64, beta_max: f64 },
    CosineVp,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    steps: u32,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::LinearVp {
                beta_min: 0.1,
                beta_max: 20.0,
            },
            steps: 1000,
        }
    }
}

impl NoiseSchedule {
    pub fn linear(beta_min: f64, beta_max: f64, steps: u32) -> Result<Self> {
        if !(beta_min > 0.0 && beta_max > beta_min && beta_max.is_finite()) {
            return Err(Error::invalid(format!(
                "linear schedule needs 0 < beta_min < beta_max, got {beta_min}, {beta_max}"
            )));
        }
        Self::new(ScheduleKind::LinearVp { beta_min, beta_max }, steps)
    }

    pub fn cosine(steps: u32) -> Result<Self> {
        Self::new(ScheduleKind::CosineVp, steps)
    }

    pub fn new(kind: ScheduleKind, steps: u32) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one discrete step"));
        }
        Ok(Self { kind, steps })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Discrete step count `T`.
    pub fn steps(&self) -> u32 {
        self.steps
    }

    /// `t / T`
    pub fn to_continuous(&self, step: u32) -> f64 {
        f64::from(step.min(self.steps)) / f64::from(self.steps)
    }

    pub fn to_discrete(&self, t: f64) -> u32 {
        (t.clamp(0.0, 1.0) * f64::from(self.steps)).round() as u32
    }

    fn check_time(t: f64) -> Result<()> {
        if (0.0..=1.0).contains(&t) {
            Ok(())
        } else {
            Err(Error::TimeOutOfRange(t))
        }
    }

    fn cosine_angle(t: f64) -> f64 {
        (t * COSINE_T_MAX + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * FRAC_PI_2
    }

    fn cosine_angle0() -> f64 {
        COSINE_OFFSET / (1.0 + COSINE_OFFSET) * FRAC_PI_2
    }

    /// `log(alpha_t)` without range checks.
    pub fn log_alpha(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::LinearVp { beta_min, beta_max } => {
                -0.25 * t * t * (beta_max - beta_min) - 0.5 * t * beta_min
            }
            ScheduleKind::CosineVp => Self::cosine_angle(t).cos().ln() - Self::cosine_angle0().cos().ln(),
        }
    }

    fn sigma_from_log_alpha(log_alpha: f64) -> f64 {
        (-(2.0 * log_alpha).exp_m1()).max(0.0).sqrt().max(SIGMA_FLOOR)
    }

    /// `(alpha_t, sigma_t)` with `alpha^2 + sigma^2 = 1` up to the sigma floor.
    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        Self::check_time(t)?;
        let la = self.log_alpha(t);
        Ok((la.exp(), Self::sigma_from_log_alpha(la)))
    }

    /// Log signal-to-noise ratio `log(alpha_t / sigma_t)`.
    pub fn lambda(&self, t: f64) -> Result<f64> {
        Self::check_time(t)?;
        let la = self.log_alpha(t);
        Ok(la - Self::sigma_from_log_alpha(la).ln())
    }

    /// Time at which `lambda(t) == lambda`.
    pub fn inverse_lambda(&self, lambda: f64) -> f64 {
        // log(alpha) as a function of lambda in the VP family.
        let neg_log_alpha = 0.5 * softplus(-2.0 * lambda);
        let t = match self.kind {
            ScheduleKind::LinearVp { beta_min, beta_max } => {
                let d = beta_max - beta_min;
                2.0 * neg_log_alpha / (0.5 * beta_min + (0.25 * beta_min * beta_min + d * neg_log_alpha).sqrt())
            }
            ScheduleKind::CosineVp => {
                let c = (-neg_log_alpha + Self::cosine_angle0().cos().ln()).exp();
                let angle = c.clamp(-1.0, 1.0).acos();
                (angle / FRAC_PI_2 * (1.0 + COSINE_OFFSET) - COSINE_OFFSET) / COSINE_T_MAX
            }
        };
        t.clamp(0.0, 1.0)
    }

    /// Closed-form `(f(t), g^2(t))` with `f = d log(alpha)/dt` and
    /// `g^2 = d sigma^2/dt - 2 f sigma^2`. Times below [`T_MIN`] are clamped.
    pub fn drift_diffusion(&self, t: f64) -> Result<(f64, f64)> {
        Self::check_time(t)?;
        let t = t.max(T_MIN);
        let f = match self.kind {
            ScheduleKind::LinearVp { beta_min, beta_max } => -0.5 * (beta_min + t * (beta_max - beta_min)),
            ScheduleKind::CosineVp => {
                -Self::cosine_angle(t).tan() * FRAC_PI_2 * COSINE_T_MAX / (1.0 + COSINE_OFFSET)
            }
        };
        // For VP schedules d sigma^2/dt = -2 f alpha^2, so g^2 = -2 f.
        Ok((f, -2.0 * f))
    }

    /// `alpha_t * x0 + sigma_t * eps`
    pub fn forward_diffuse(&self, x0: &Tensor, t: f64, eps: &Tensor) -> Result<Tensor> {
        let (alpha, sigma) = self.alpha_sigma(t)?;
        Ok(x0.lincomb(alpha, eps, sigma)?)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Score estimate from a noise prediction: `noise / (-sigma)`.
pub fn noise_to_score(noise: &Tensor, sigma: f64) -> Result<Tensor> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::NonPositiveSigma(sigma));
    }
    Ok(noise.scale(-1.0 / sigma))
}

/// Noise prediction from a score: `-sigma * score`.
pub fn score_to_noise(score: &Tensor, sigma: f64) -> Tensor {
    score.scale(-sigma)
}
