//! Losses and the mini-batch Adam loop used for the denoiser, the
//! noise-conditional segmenter and the clean-image validators.

use std::fmt::Write as _;

use dxp_autodiff::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::SamplePair;
use crate::error::{Error, Result};
use crate::models::{Denoiser, Network, Segmenter};
use crate::nn::bind;
use crate::rng::{standard_normal, SeedStream};
use crate::schedule::{NoiseSchedule, T_MIN};

pub const DICE_SMOOTH: f64 = 1e-6;

/// `1 - (2 sum(p t) + eps) / (sum p + sum t + eps)`
pub fn dice_loss(tape: &Tape, probs: Var, target: Var) -> Result<Var> {
    if tape.shape(probs) != tape.shape(target) {
        return Err(dxp_autodiff::TensorError::ShapeMismatch {
            op: "dice_loss",
            lhs: tape.shape(probs),
            rhs: tape.shape(target),
        }
        .into());
    }
    let inter = tape.sum(tape.mul(probs, target)?);
    let num = tape.offset(tape.scale(inter, 2.0), DICE_SMOOTH);
    let den = tape.offset(tape.add(tape.sum(probs), tape.sum(target))?, DICE_SMOOTH);
    // num / den = exp(log num - log den)
    let ratio = tape.exp(tape.sub(tape.log(num), tape.log(den))?);
    Ok(tape.offset(tape.neg(ratio), 1.0))
}

/// Mean binary cross-entropy from logits against `{0, 1}` targets.
pub fn bce_with_logits(tape: &Tape, logits: Var, target: &Tensor) -> Result<Var> {
    if tape.shape(logits) != target.shape() {
        return Err(dxp_autodiff::TensorError::ShapeMismatch {
            op: "bce_with_logits",
            lhs: tape.shape(logits),
            rhs: target.shape().to_vec(),
        }
        .into());
    }
    let ll = crate::guidance::bernoulli_log_likelihood(tape, logits, target)?;
    Ok(tape.neg(tape.mean(ll)))
}

/// Random quantities of one diffusion training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    pub y1: bool,
    pub t: f64,
    pub eps: Tensor,
}

impl Draw {
    /// `y1 ~ Bernoulli(1/2)`, `t ~ U(T_MIN, 1)`, `eps ~ N(0, I)`.
    pub fn sample(rng: &mut ChaCha8Rng, shape: &[usize]) -> Draw {
        let y1 = rng.random_bool(0.5);
        let t = rng.random_range(T_MIN..1.0);
        Draw {
            y1,
            t,
            eps: standard_normal(rng, shape),
        }
    }
}

/// Denoiser regression: image plane with the true mask as condition when
/// `y1`, otherwise the `{-1, +1}` mask plane with the absent condition.
/// `drop_condition` forces the absent condition on the image branch.
pub fn stage1_loss_with(
    tape: &Tape,
    model: &Denoiser,
    params: &[Var],
    pair: &SamplePair,
    schedule: &NoiseSchedule,
    draw: &Draw,
    drop_condition: bool,
) -> Result<Var> {
    let (target, cond) = if draw.y1 {
        let cond = (!drop_condition).then(|| tape.constant(pair.mask_signed()));
        (pair.image.clone(), cond)
    } else {
        (pair.mask_signed(), None)
    };
    let x_t = tape.constant(schedule.forward_diffuse(&target, draw.t, &draw.eps)?);
    let pred = model.forward(tape, params, x_t, draw.t, draw.y1, cond)?;
    let diff = tape.sub(pred, tape.constant(draw.eps.clone()))?;
    Ok(tape.mean(tape.square(diff)))
}

pub fn stage1_loss(
    tape: &Tape,
    model: &Denoiser,
    params: &[Var],
    pair: &SamplePair,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let draw = Draw::sample(rng, pair.image.shape());
    stage1_loss_with(tape, model, params, pair, schedule, &draw, false)
}

/// Segmenter loss: on a noisy image, Dice + pixel BCE + image-vs-mask BCE
/// towards 1; on a noisy mask, only the image-vs-mask BCE towards 0.
pub fn stage2_loss_with(
    tape: &Tape,
    model: &Segmenter,
    params: &[Var],
    pair: &SamplePair,
    schedule: &NoiseSchedule,
    draw: &Draw,
) -> Result<Var> {
    let clean = if draw.y1 { pair.image.clone() } else { pair.mask_signed() };
    let x_t = tape.constant(schedule.forward_diffuse(&clean, draw.t, &draw.eps)?);
    let out = model.forward(tape, params, x_t, draw.t)?;
    let y1_target = Tensor::new([1, 1], vec![if draw.y1 { 1.0 } else { 0.0 }])?;
    let cls = bce_with_logits(tape, out.y1_logit, &y1_target)?;
    if !draw.y1 {
        return Ok(cls);
    }
    let seg = segmentation_loss(tape, out.pixel_logits, &pair.mask)?;
    Ok(tape.add(seg, cls)?)
}

pub fn stage2_loss(
    tape: &Tape,
    model: &Segmenter,
    params: &[Var],
    pair: &SamplePair,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let draw = Draw::sample(rng, pair.image.shape());
    stage2_loss_with(tape, model, params, pair, schedule, &draw)
}

/// Dice + BCE of pixel logits against a binary mask.
pub fn segmentation_loss(tape: &Tape, logits: Var, mask: &Tensor) -> Result<Var> {
    let probs = tape.sigmoid(logits);
    let dice = dice_loss(tape, probs, tape.constant(mask.clone()))?;
    let bce = bce_with_logits(tape, logits, mask)?;
    Ok(tape.add(dice, bce)?)
}

/// Clean-image segmentation loss for validators and the filter model,
/// evaluated at the smallest noise level.
pub fn clean_loss(tape: &Tape, model: &Segmenter, params: &[Var], pair: &SamplePair) -> Result<Var> {
    let x = tape.constant(pair.image.clone());
    let out = model.forward(tape, params, x, T_MIN)?;
    segmentation_loss(tape, out.pixel_logits, &pair.mask)
}

// ---------------------------------------------------------------------------
// Optimisation

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TrainLength {
    /// Batches drawn with replacement.
    Iterations(usize),
    /// Passes over a fresh permutation of the data; the last batch may be short.
    Epochs(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub length: TrainLength,
    pub learning_rate: f64,
    pub seed: u64,
    /// Probability of replacing the mask condition by the absent condition
    /// on image-branch denoiser examples.
    pub cond_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            length: TrainLength::Iterations(3000),
            learning_rate: 1e-4,
            seed: 0,
            cond_dropout: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("bad learning rate {}", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::invalid("condition dropout must be in [0, 1]"));
        }
        Ok(())
    }
}

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let data: Vec<f64> = p
                .data()
                .iter()
                .zip(&grads[k])
                .enumerate()
                .map(|(j, (&w, &g))| {
                    m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                    v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                    w - self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps)
                })
                .collect();
            *p = Tensor::new(p.shape().to_vec(), data).expect("same shape");
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Mean batch loss per optimizer step.
    pub losses: Vec<f64>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            writeln!(s, "{i},{l:.8e}").expect("string write");
        }
        s
    }

    /// Mean of the last `n` recorded losses.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let tail = &self.losses[self.losses.len().saturating_sub(n)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Per-example loss builder: `(tape, bound params, pair, example rng)`.
pub type LossFn<'a, M> = dyn Fn(&Tape, &M, &[Var], &SamplePair, &mut ChaCha8Rng) -> Result<Var> + Sync + 'a;

fn batches(n: usize, cfg: &TrainConfig, stream: SeedStream) -> Vec<Vec<usize>> {
    let mut rng = stream.substream("batches").rng(0);
    match cfg.length {
        TrainLength::Iterations(iters) => (0..iters)
            .map(|_| (0..cfg.batch_size).map(|_| rng.random_range(0..n)).collect())
            .collect(),
        TrainLength::Epochs(epochs) => {
            let mut out = Vec::new();
            for _ in 0..epochs {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng);
                out.extend(perm.chunks(cfg.batch_size).map(<[usize]>::to_vec));
            }
            out
        }
    }
}

/// Mini-batch Adam. Per-example gradients are computed in parallel and
/// summed in batch order, so results do not depend on the worker count.
pub fn train<M: Network>(model: &mut M, data: &[SamplePair], cfg: &TrainConfig, loss: &LossFn<'_, M>) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let stream = SeedStream::new(cfg.seed);
    let draws = stream.substream("diffusion-times");
    let mut opt = Adam::new(model.params(), cfg.learning_rate);
    let mut log = TrainLog::default();
    let mut example = 0u64;
    for (step, batch) in batches(data.len(), cfg, stream).into_iter().enumerate() {
        let first = example;
        example += batch.len() as u64;
        let results = batch
            .par_iter()
            .enumerate()
            .map(|(k, &idx)| {
                let tape = Tape::new();
                let p = bind(&tape, model.params(), true);
                let mut rng = draws.rng(first + k as u64);
                let l = loss(&tape, model, &p, &data[idx], &mut rng)?;
                let value = tape.value(l).item()?;
                let grads = tape.backward(l)?;
                let g: Vec<Tensor> = p.iter().map(|v| grads.get(*v).expect("leaf gradient").clone()).collect();
                Ok((value, g))
            })
            .collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / batch.len() as f64;
        let mut mean_loss = 0.0;
        let mut acc: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
        for (value, g) in &results {
            mean_loss += value * scale;
            for (a, t) in acc.iter_mut().zip(g) {
                for (x, y) in a.iter_mut().zip(t.data()) {
                    *x += y * scale;
                }
            }
        }
        if !mean_loss.is_finite() || acc.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss(step));
        }
        log.losses.push(mean_loss);
        opt.update(model.params_mut(), &acc);
    }
    Ok(log)
}

pub fn train_denoiser(
    model: &mut Denoiser,
    data: &[SamplePair],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    let dropout = cfg.cond_dropout;
    let loss = move |tape: &Tape, m: &Denoiser, p: &[Var], pair: &SamplePair, rng: &mut ChaCha8Rng| {
        let draw = Draw::sample(rng, pair.image.shape());
        let drop = dropout > 0.0 && rng.random_bool(dropout);
        stage1_loss_with(tape, m, p, pair, schedule, &draw, drop)
    };
    train(model, data, cfg, &loss)
}

pub fn train_segmenter(
    model: &mut Segmenter,
    data: &[SamplePair],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    let loss = |tape: &Tape, m: &Segmenter, p: &[Var], pair: &SamplePair, rng: &mut ChaCha8Rng| {
        stage2_loss(tape, m, p, pair, schedule, rng)
    };
    train(model, data, cfg, &loss)
}

/// Clean-image segmenter (validator or filter model).
pub fn train_clean_segmenter(model: &mut Segmenter, data: &[SamplePair], cfg: &TrainConfig) -> Result<TrainLog> {
    let loss = |tape: &Tape, m: &Segmenter, p: &[Var], pair: &SamplePair, _: &mut ChaCha8Rng| clean_loss(tape, m, p, pair);
    train(model, data, cfg, &loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item().unwrap()
    }

    #[test]
    fn dice_loss_reference_values() {
        let tape = Tape::new();
        let t = tape.constant(Tensor::from_vec(vec![1.0, 1.0, 0.0, 0.0]));
        assert!(scalar(&tape, dice_loss(&tape, t, t).unwrap()).abs() < 1e-9);
        let other = tape.constant(Tensor::from_vec(vec![0.0, 0.0, 1.0, 1.0]));
        assert!((scalar(&tape, dice_loss(&tape, other, t).unwrap()) - 1.0).abs() < 1e-6);
        let half = tape.constant(Tensor::full([4], 0.5));
        assert!((scalar(&tape, dice_loss(&tape, half, t).unwrap()) - 0.5).abs() < 1e-6);
        let short = tape.constant(Tensor::zeros([3]));
        assert!(dice_loss(&tape, short, t).is_err());
    }

    #[test]
    fn bce_reference_values() {
        let tape = Tape::new();
        let one = Tensor::from_vec(vec![1.0]);
        let l0 = tape.constant(Tensor::from_vec(vec![0.0]));
        assert!((scalar(&tape, bce_with_logits(&tape, l0, &one).unwrap()) - 2f64.ln()).abs() < 1e-15);
        let l20 = tape.constant(Tensor::from_vec(vec![20.0]));
        assert!(scalar(&tape, bce_with_logits(&tape, l20, &one).unwrap()) < 1e-8);
    }

    #[test]
    fn bce_matches_naive_formula() {
        let logits = [-3.1, -0.4, 0.0, 0.7, 2.5];
        let targets = [0.0, 1.0, 1.0, 0.0, 1.0];
        let tape = Tape::new();
        let l = tape.constant(Tensor::from_vec(logits.to_vec()));
        let got = scalar(&tape, bce_with_logits(&tape, l, &Tensor::from_vec(targets.to_vec())).unwrap());
        let want: f64 = logits
            .iter()
            .zip(&targets)
            .map(|(&z, &t)| {
                let p = 1.0 / (1.0 + (-z as f64).exp());
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / logits.len() as f64;
        assert!((got - want).abs() <= 1e-10 * want.abs());
    }

    #[test]
    fn epoch_batches_cover_data_once() {
        let cfg = TrainConfig {
            batch_size: 4,
            length: TrainLength::Epochs(2),
            ..Default::default()
        };
        let b = batches(10, &cfg, SeedStream::new(1));
        assert_eq!(b.len(), 6);
        let mut first: Vec<usize> = b[..3].concat();
        first.sort_unstable();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            learning_rate: f64::NAN,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
