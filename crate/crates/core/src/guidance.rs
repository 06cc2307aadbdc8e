//! Segmenter guidance: condition log-likelihoods, guided scores, the discrete
//! guided mean, and the temperature-vs-scale comparison for softmax heads.

use dxp_autodiff::{Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::models::{Denoiser, Network, Segmenter};
use crate::nn::bind;
use crate::sampling::{Condition, GaussianOracle, ScoreSource};
use crate::schedule::{noise_to_score, NoiseSchedule};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GuidanceMode {
    /// Logits divided by `tau` before the normalised exponential.
    Temperature(f64),
    /// Log-likelihood multiplied by `s`.
    Scale(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceSpec {
    pub use_y1: bool,
    pub use_y2: bool,
    pub mode: GuidanceMode,
    /// Multiplier on the pixel-averaged mask log-likelihood.
    pub y2_weight: f64,
    /// Doubles the condition gradient relative to the score, i.e. removes the
    /// one-half that the guided probability-flow ODE applies to both terms.
    pub drop_half: bool,
}

impl GuidanceSpec {
    /// Both conditions at the given temperature with the default mask weight
    /// for an `h x w` plane.
    pub fn temperature(tau: f64, h: usize, w: usize) -> Self {
        GuidanceSpec {
            use_y1: true,
            use_y2: true,
            mode: GuidanceMode::Temperature(tau),
            y2_weight: default_y2_weight(h, w),
            drop_half: false,
        }
    }

    pub fn scale(s: f64, h: usize, w: usize) -> Self {
        GuidanceSpec {
            mode: GuidanceMode::Scale(s),
            ..Self::temperature(1.0, h, w)
        }
    }

    pub fn is_active(&self) -> bool {
        self.use_y1 || self.use_y2
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            GuidanceMode::Temperature(t) if !(t > 0.0 && t.is_finite()) => {
                Err(Error::invalid(format!("temperature must be positive, got {t}")))
            }
            GuidanceMode::Scale(s) if !(s >= 0.0 && s.is_finite()) => {
                Err(Error::invalid(format!("gradient scale must be non-negative, got {s}")))
            }
            _ if !self.y2_weight.is_finite() => Err(Error::invalid("y2 weight must be finite")),
            _ => Ok(()),
        }
    }

    /// `(logit divisor reciprocal, log-likelihood multiplier)`
    fn factors(&self) -> (f64, f64) {
        match self.mode {
            GuidanceMode::Temperature(tau) => (1.0 / tau, 1.0),
            GuidanceMode::Scale(s) => (1.0, s),
        }
    }
}

pub fn default_y2_weight(h: usize, w: usize) -> f64 {
    (h * w) as f64 * 0.01
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionTarget {
    pub y1: bool,
    /// Binary `{0, 1}` mask; only meaningful when `y1` is set.
    pub y2: Option<Tensor>,
}

impl ConditionTarget {
    pub fn mask() -> Self {
        ConditionTarget { y1: false, y2: None }
    }

    pub fn image(mask: Tensor) -> Self {
        ConditionTarget {
            y1: true,
            y2: Some(mask),
        }
    }
}

/// The two summands of the condition log-likelihood. `y2` is `None` when it
/// is disabled or when the target is a mask (`y1 = 0`), for which no mask
/// condition exists.
pub struct CondTerms {
    pub y1: Option<Var>,
    pub y2: Option<Var>,
}

/// `log p(y1 | x_t)` and `log p(y2 | x_t, y1)` on the tape.
pub fn cond_log_prob_terms(
    tape: &Tape,
    segmenter: &Segmenter,
    params: &[Var],
    x_t: Var,
    t: f64,
    target: &ConditionTarget,
    spec: &GuidanceSpec,
) -> Result<CondTerms> {
    spec.validate()?;
    let want_y2 = spec.use_y2 && target.y1;
    if want_y2 && target.y2.is_none() {
        return Err(Error::MissingCondition("y2 mask required when mask guidance is enabled"));
    }
    if !spec.use_y1 && !want_y2 {
        return Ok(CondTerms { y1: None, y2: None });
    }
    let (inv_tau, mult) = spec.factors();
    let out = segmenter.forward(tape, params, x_t, t)?;
    let y1 = if spec.use_y1 {
        let sign = if target.y1 { inv_tau } else { -inv_tau };
        let l = tape.log_sigmoid(tape.scale(out.y1_logit, sign));
        Some(tape.scale(tape.sum(l), mult))
    } else {
        None
    };
    let y2 = if want_y2 {
        let mask = target.y2.as_ref().expect("checked above");
        let logits = tape.scale(out.pixel_logits, inv_tau);
        let ll = bernoulli_log_likelihood(tape, logits, mask)?;
        Some(tape.scale(tape.mean(ll), mult * spec.y2_weight))
    } else {
        None
    };
    Ok(CondTerms { y1, y2 })
}

/// Per-element `m log sigmoid(l) + (1 - m) log sigmoid(-l)`.
pub fn bernoulli_log_likelihood(tape: &Tape, logits: Var, mask: &Tensor) -> Result<Var> {
    let pos = tape.constant(mask.clone());
    let neg = tape.constant(mask.map(|m| 1.0 - m));
    let a = tape.mul(tape.log_sigmoid(logits), pos)?;
    let b = tape.mul(tape.log_sigmoid(tape.neg(logits)), neg)?;
    Ok(tape.add(a, b)?)
}

/// Sum of the active condition terms (a zero constant when none is active).
pub fn cond_log_prob(
    tape: &Tape,
    segmenter: &Segmenter,
    params: &[Var],
    x_t: Var,
    t: f64,
    target: &ConditionTarget,
    spec: &GuidanceSpec,
) -> Result<Var> {
    let terms = cond_log_prob_terms(tape, segmenter, params, x_t, t, target, spec)?;
    Ok(match (terms.y1, terms.y2) {
        (Some(a), Some(b)) => tape.add(a, b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => tape.constant(Tensor::scalar(0.0)),
    })
}

/// Value and `x_t` gradient of the condition log-likelihood.
pub fn cond_log_prob_grad(
    segmenter: &Segmenter,
    x_t: &Tensor,
    t: f64,
    target: &ConditionTarget,
    spec: &GuidanceSpec,
) -> Result<(f64, Tensor)> {
    let tape = Tape::new();
    let p = bind(&tape, segmenter.params(), false);
    let x = tape.leaf(x_t.clone());
    let lp = cond_log_prob(&tape, segmenter, &p, x, t, target, spec)?;
    let value = tape.value(lp).item()?;
    let grads = tape.backward(lp)?;
    let g = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(x_t.shape().to_vec()));
    if !g.all_finite() {
        return Err(Error::NonFinite("condition gradient".into()));
    }
    Ok((value, g))
}

/// Multiplier applied to condition gradients before adding them to the score.
pub fn condition_weight(spec: &GuidanceSpec) -> f64 {
    if spec.drop_half {
        2.0
    } else {
        1.0
    }
}

/// Denoiser score, with the segmenter's condition gradient added when
/// `spec` is active. The denoiser input follows the target: `y1 = 0` with
/// the absent condition, or `y1 = 1` with the target mask (coded `{-1, +1}`).
pub fn guided_score(
    denoiser: &Denoiser,
    segmenter: Option<&Segmenter>,
    x_t: &Tensor,
    t: f64,
    target: &ConditionTarget,
    spec: Option<&GuidanceSpec>,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let (_, sigma) = schedule.alpha_sigma(t)?;
    let cond = match (target.y1, &target.y2) {
        (true, Some(m)) => Some(m.map(|v| 2.0 * v - 1.0)),
        (true, None) => return Err(Error::MissingCondition("image synthesis needs a mask condition")),
        (false, _) => None,
    };
    let noise = denoiser.denoise(x_t, t, target.y1, cond.as_ref())?;
    let score = noise_to_score(&noise, sigma)?;
    match spec {
        Some(spec) if spec.is_active() => {
            let seg = segmenter.ok_or(Error::MissingCondition("guidance needs a segmenter"))?;
            let (_, grad) = cond_log_prob_grad(seg, x_t, t, target, spec)?;
            Ok(score.lincomb(1.0, &grad, condition_weight(spec))?)
        }
        _ => Ok(score),
    }
}

/// `mu + c * sum(grads)`
pub fn guided_mean_discrete(mu: &Tensor, c: f64, cond_grads: &[Tensor]) -> Result<Tensor> {
    if !(c >= 0.0) {
        return Err(Error::invalid(format!("guidance variance must be non-negative, got {c}")));
    }
    let mut out = mu.clone();
    for g in cond_grads {
        out = out.lincomb(1.0, g, c)?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Softmax temperature vs gradient scale

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(v);
    v.iter().map(|x| (x - lse).exp()).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `s * (1 - softmax_i(y))`: logit-gradient factor of `s log p_i`.
pub fn scaled_factor(logits: &[f64], i: usize, s: f64) -> f64 {
    s * (1.0 - softmax(logits)[i])
}

/// `(1/tau) * (1 - softmax_i(y / tau))`: logit-gradient factor of `log p_i` at temperature `tau`.
pub fn tempered_factor(logits: &[f64], i: usize, tau: f64) -> f64 {
    let scaled: Vec<f64> = logits.iter().map(|y| y / tau).collect();
    (1.0 - softmax(&scaled)[i]) / tau
}

/// `g(x) = sum_j (x - y_j) exp(x - y_j)`
pub fn crossing_function(x: f64, logits: &[f64]) -> f64 {
    logits.iter().map(|y| (x - y) * (x - y).exp()).sum()
}

/// Root of [`crossing_function`] on `[min y, max y]` by bisection.
pub fn crossing_point(logits: &[f64]) -> f64 {
    let mut lo = logits.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut hi = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if crossing_function(mid, logits) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Threshold at which `softmax_i(s y) = softmax_i(y)`, independent of `i`:
/// `(LSE(s y) - LSE(y)) / (s - 1)`.
pub fn exact_crossing_point(logits: &[f64], s: f64) -> f64 {
    let scaled: Vec<f64> = logits.iter().map(|y| s * y).collect();
    (log_sum_exp(&scaled) - log_sum_exp(logits)) / (s - 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lemma3Outcome {
    /// Predicted ordering of the two factors holds on the side of `y_m`.
    pub holds: bool,
    /// Bisected root of the crossing function.
    pub y_m: f64,
    pub scaled_factor: f64,
    pub tempered_factor: f64,
    /// Same verdict using the exact threshold instead of `y_m`.
    pub holds_exact: bool,
    pub y_m_exact: f64,
}

const LEMMA3_SLACK: f64 = 1e-12;

fn side_holds(yi: f64, threshold: f64, scaled: f64, tempered: f64) -> bool {
    if yi >= threshold {
        scaled >= tempered - LEMMA3_SLACK
    } else {
        scaled <= tempered + LEMMA3_SLACK
    }
}

/// Compares `s log p_i` against `log p_i` at `tau = 1/s` for softmax logits.
pub fn lemma3_check(logits: &[f64], target: usize, tau: f64) -> Result<Lemma3Outcome> {
    let s = 1.0 / tau;
    if !(s >= 1.0) || !s.is_finite() {
        return Err(Error::invalid(format!("need 1/tau = s >= 1, got s = {s}")));
    }
    if logits.is_empty() || target >= logits.len() {
        return Err(Error::invalid(format!("target {target} out of range for {} logits", logits.len())));
    }
    let sf = scaled_factor(logits, target, s);
    let tf = tempered_factor(logits, target, tau);
    let y_m = crossing_point(logits);
    let yi = logits[target];
    // At s = 1 both factors coincide and any threshold works.
    let y_m_exact = if s == 1.0 { y_m } else { exact_crossing_point(logits, s) };
    Ok(Lemma3Outcome {
        holds: side_holds(yi, y_m, sf, tf),
        y_m,
        scaled_factor: sf,
        tempered_factor: tf,
        holds_exact: side_holds(yi, y_m_exact, sf, tf),
        y_m_exact,
    })
}

// ---------------------------------------------------------------------------
// Analytic condition for oracle checks

/// Observation `y = x0 + noise`, noise `N(0, w I)`, under a Gaussian prior
/// `x0 ~ N(m, v I)`. Its likelihood given `x_t` is Gaussian in closed form.
#[derive(Clone, Debug)]
pub struct LinearGaussianCondition {
    pub prior: GaussianOracle,
    pub y: Tensor,
    pub noise_var: f64,
}

impl LinearGaussianCondition {
    /// Exact posterior `(mean, variance)` of `x0` given `y`.
    pub fn posterior(&self) -> Result<(Tensor, f64)> {
        let v = self.prior.var;
        let w = self.noise_var;
        let vp = 1.0 / (1.0 / v + 1.0 / w);
        let mean = self.prior.mean.lincomb(vp / v, &self.y, vp / w)?;
        Ok((mean, vp))
    }
}

impl Condition for LinearGaussianCondition {
    fn grad_log_prob(&self, x: &Tensor, t: f64, schedule: &NoiseSchedule) -> Result<Tensor> {
        let (alpha, sigma) = schedule.alpha_sigma(t)?;
        let v = self.prior.var;
        let denom = alpha * alpha * v + sigma * sigma;
        let gain = alpha * v / denom;
        let s_post = v * sigma * sigma / denom;
        let k = gain / (s_post + self.noise_var);
        // y - E[x0 | x_t]
        let m = &self.prior.mean;
        let resid = Tensor::new(
            x.shape().to_vec(),
            x.data()
                .iter()
                .zip(self.y.data().iter().cycle())
                .zip(m.data().iter().cycle())
                .map(|((&xi, &yi), &mi)| k * (yi - (mi + gain * (xi - alpha * mi))))
                .collect(),
        )?;
        Ok(resid)
    }
}

/// Score source plus weighted condition gradients: `score + sum_k w_k grad_k`.
pub struct Guided<'a> {
    pub base: &'a dyn ScoreSource,
    pub conditions: Vec<(&'a dyn Condition, f64)>,
}

impl ScoreSource for Guided<'_> {
    fn score(&self, x: &Tensor, t: f64, schedule: &NoiseSchedule) -> Result<Tensor> {
        let mut s = self.base.score(x, t, schedule)?;
        for (c, w) in &self.conditions {
            s = s.lincomb(1.0, &c.grad_log_prob(x, t, schedule)?, *w)?;
        }
        Ok(s)
    }
}
