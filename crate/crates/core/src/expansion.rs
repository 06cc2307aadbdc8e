//! Dice-threshold filtering of synthesized pairs, validator training on
//! expanded datasets, and a random-projection Fréchet distance.

use std::fmt::Write as _;

use dxp_autodiff::Tensor;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::data::SamplePair;
use crate::error::{Error, Result};
use crate::guidance::sigmoid;
use crate::models::Segmenter;
use crate::rng::SeedStream;
use crate::schedule::T_MIN;
use crate::training::{train_clean_segmenter, TrainConfig, TrainLength, DICE_SMOOTH};

pub const DEFAULT_ETA: f64 = 0.065;

/// Soft Dice loss on plain values (same formula as the training loss).
pub fn dice_loss_value(probs: &[f64], target: &[f64]) -> f64 {
    let inter: f64 = probs.iter().zip(target).map(|(p, t)| p * t).sum();
    let sp: f64 = probs.iter().sum();
    let st: f64 = target.iter().sum();
    1.0 - (2.0 * inter + DICE_SMOOTH) / (sp + st + DICE_SMOOTH)
}

fn is_binary(t: &Tensor) -> bool {
    t.data().iter().all(|&v| v == 0.0 || v == 1.0)
}

/// `2|A ∩ B| / (|A| + |B|)`, with two empty masks scoring 1.
pub fn dice_score(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(dxp_autodiff::TensorError::ShapeMismatch {
            op: "dice_score",
            lhs: pred.shape().to_vec(),
            rhs: truth.shape().to_vec(),
        }
        .into());
    }
    if !is_binary(pred) || !is_binary(truth) {
        return Err(Error::invalid("dice_score needs binary masks"));
    }
    let inter: f64 = pred.data().iter().zip(truth.data()).map(|(a, b)| a * b).sum();
    let total = pred.sum() + truth.sum();
    Ok(if total == 0.0 { 1.0 } else { 2.0 * inter / total })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterReport {
    /// Dice loss of every input pair, in input order.
    pub losses: Vec<f64>,
    pub kept_indices: Vec<usize>,
    pub eta: f64,
}

/// Keeps pairs whose filter-model Dice loss is strictly below `eta`.
/// Both outputs preserve input order.
pub fn filter_pairs(
    pairs: &[SamplePair],
    model: Option<&Segmenter>,
    eta: f64,
) -> Result<(Vec<SamplePair>, Vec<SamplePair>, FilterReport)> {
    let model = model.ok_or(Error::MissingCondition("Stage IV needs a trained filter model"))?;
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::invalid(format!("eta must be in (0, 1], got {eta}")));
    }
    let losses = pairs
        .par_iter()
        .map(|p| {
            let (logits, _) = model.segment(&p.image, T_MIN)?;
            let probs: Vec<f64> = logits.data().iter().map(|&l| sigmoid(l)).collect();
            Ok(dice_loss_value(&probs, p.mask.data()))
        })
        .collect::<Result<Vec<f64>>>()?;
    let (mut kept, mut discarded, mut kept_indices) = (Vec::new(), Vec::new(), Vec::new());
    for (i, (p, &l)) in pairs.iter().zip(&losses).enumerate() {
        if l < eta {
            kept.push(p.clone());
            kept_indices.push(i);
        } else {
            discarded.push(p.clone());
        }
    }
    Ok((kept, discarded, FilterReport { losses, kept_indices, eta }))
}

/// Hard Dice of a clean-image segmenter on each pair.
pub fn evaluate_segmenter(model: &Segmenter, pairs: &[SamplePair]) -> Result<Vec<f64>> {
    pairs
        .par_iter()
        .map(|p| dice_score(&model.predict_mask(&p.image, T_MIN)?, &p.mask))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    pub width: usize,
    pub train: TrainConfig,
    /// Also train on each synthetic set alone.
    pub synth_only: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seeds: vec![0, 1, 2],
            width: 8,
            train: TrainConfig {
                batch_size: 16,
                length: TrainLength::Epochs(50),
                learning_rate: 1e-2,
                seed: 0,
                cond_dropout: 0.0,
            },
            synth_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub train_pairs: usize,
    pub dice: Vec<f64>,
}

impl EvalRow {
    pub fn mean(&self) -> f64 {
        self.dice.iter().sum::<f64>() / self.dice.len() as f64
    }

    /// Sample standard deviation over seeds.
    pub fn std(&self) -> f64 {
        let n = self.dice.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.dice.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn row(&self, name: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("setting,train_pairs,seed_dice,mean_dice,std_dice\n");
        for r in &self.rows {
            let seeds: Vec<String> = r.dice.iter().map(|d| format!("{d:.6}")).collect();
            writeln!(s, "{},{},{},{:.6},{:.6}", r.name, r.train_pairs, seeds.join(";"), r.mean(), r.std())
                .expect("string write");
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<16} {:>7} {:>10} {:>8}\n", "setting", "pairs", "dice", "std");
        for r in &self.rows {
            writeln!(s, "{:<16} {:>7} {:>10.4} {:>8.4}", r.name, r.train_pairs, r.mean(), r.std()).expect("string write");
        }
        s
    }
}

/// Mean held-out Dice of fresh validators trained on `train`, one per seed.
pub fn validator_dice(train: &[SamplePair], test: &[SamplePair], cfg: &EvalConfig) -> Result<Vec<f64>> {
    if train.is_empty() {
        return Err(Error::Empty("validator training set"));
    }
    if test.is_empty() {
        return Err(Error::Empty("test split"));
    }
    cfg.seeds
        .iter()
        .map(|&seed| {
            let stream = SeedStream::new(seed);
            let mut model = Segmenter::new(cfg.width, stream.substream("init"));
            let tc = TrainConfig {
                seed: stream.substream("validator").seed(),
                ..cfg.train
            };
            train_clean_segmenter(&mut model, train, &tc)?;
            let scores = evaluate_segmenter(&model, test)?;
            Ok(scores.iter().sum::<f64>() / scores.len() as f64)
        })
        .collect()
}

/// Trains validators on `origin` alone and on `origin` joined with each
/// named synthetic set, reporting held-out Dice per seed.
pub fn expand_and_evaluate(
    origin: &[SamplePair],
    test: &[SamplePair],
    arms: &[(String, Vec<SamplePair>)],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let mut rows = vec![EvalRow {
        name: "origin".into(),
        train_pairs: origin.len(),
        dice: validator_dice(origin, test, cfg)?,
    }];
    for (name, synth) in arms {
        let mut joined = origin.to_vec();
        joined.extend(synth.iter().cloned());
        rows.push(EvalRow {
            name: name.clone(),
            train_pairs: joined.len(),
            dice: validator_dice(&joined, test, cfg)?,
        });
        if cfg.synth_only && !synth.is_empty() {
            rows.push(EvalRow {
                name: format!("{name} (synth only)"),
                train_pairs: synth.len(),
                dice: validator_dice(synth, test, cfg)?,
            });
        }
    }
    Ok(EvalReport { rows })
}

// ---------------------------------------------------------------------------
// proxy-FID

pub const PROXY_FEATURES: usize = 16;
const RIDGE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProxyFid {
    pub value: f64,
    /// A ridge was added to a rank-deficient covariance.
    pub ridge: bool,
}

/// Fixed Gaussian projection `[PROXY_FEATURES, n_pixels]` scaled by `1/sqrt(n_pixels)`.
pub fn projection(n_pixels: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = SeedStream::new(seed).substream("proxy-fid").rng(0);
    let scale = 1.0 / (n_pixels as f64).sqrt();
    DMatrix::from_fn(PROXY_FEATURES, n_pixels, |_, _| rng.sample::<f64, _>(StandardNormal) * scale)
}

fn gaussian_fit(images: &[Tensor], proj: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let feats: Vec<DVector<f64>> = images
        .iter()
        .map(|im| proj * DVector::from_column_slice(im.data()))
        .collect();
    let n = feats.len() as f64;
    let mean = feats.iter().fold(DVector::zeros(PROXY_FEATURES), |a, f| a + f) / n;
    let mut cov = DMatrix::zeros(PROXY_FEATURES, PROXY_FEATURES);
    for f in &feats {
        let d = f - &mean;
        cov += &d * d.transpose();
    }
    (mean, cov / (n - 1.0).max(1.0))
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn min_eigen(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

/// Fréchet distance between Gaussian fits of projected images.
pub fn proxy_fid(set_a: &[Tensor], set_b: &[Tensor], seed: u64) -> Result<ProxyFid> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(Error::Empty("proxy-FID image set"));
    }
    let n_pixels = set_a[0].len();
    if set_a.iter().chain(set_b).any(|t| t.len() != n_pixels) {
        return Err(Error::invalid("proxy-FID images differ in size"));
    }
    let proj = projection(n_pixels, seed);
    let (ma, mut ca) = gaussian_fit(set_a, &proj);
    let (mb, mut cb) = gaussian_fit(set_b, &proj);
    let mut ridge = false;
    for c in [&mut ca, &mut cb] {
        if min_eigen(c) <= RIDGE {
            *c += DMatrix::identity(PROXY_FEATURES, PROXY_FEATURES) * RIDGE;
            ridge = true;
        }
    }
    // tr sqrt(A B) = tr sqrt(A^1/2 B A^1/2)
    let sa = sqrt_psd(&ca);
    let cross = sqrt_psd(&(&sa * &cb * &sa));
    let value = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross.trace();
    Ok(ProxyFid {
        value: value.max(0.0),
        ridge,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(f: impl Fn(usize, usize) -> bool) -> Tensor {
        Tensor::from_fn([1, 8, 8], |i| if f(i / 8, i % 8) { 1.0 } else { 0.0 })
    }

    #[test]
    fn dice_score_reference_values() {
        let a = square(|r, _| r < 4);
        let b = square(|_, c| c < 4);
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        assert_eq!(dice_score(&a, &square(|r, _| r >= 4)).unwrap(), 0.0);
        assert!((dice_score(&a, &b).unwrap() - 0.5).abs() < 1e-15);
        let empty = square(|_, _| false);
        assert_eq!(dice_score(&empty, &empty).unwrap(), 1.0);
        assert!(dice_score(&a, &Tensor::full([1, 8, 8], 0.5)).is_err());
    }

    #[test]
    fn missing_filter_model_is_an_error() {
        assert!(filter_pairs(&[], None, DEFAULT_ETA).is_err());
    }

    #[test]
    fn proxy_fid_of_a_set_with_itself_is_zero() {
        let set: Vec<Tensor> = (0..40).map(|k| Tensor::from_fn([1, 8, 8], |i| ((i * k) as f64 * 0.1).sin())).collect();
        let d = proxy_fid(&set, &set, 3).unwrap();
        assert!(d.value.abs() < 1e-9, "{}", d.value);
    }

    #[test]
    fn shift_adds_squared_projected_shift() {
        let set: Vec<Tensor> = (0..60).map(|k| Tensor::from_fn([1, 8, 8], |i| ((i + 3 * k) as f64 * 0.7).cos())).collect();
        let delta = 0.3;
        let shifted: Vec<Tensor> = set.iter().map(|t| t.map(|v| v + delta)).collect();
        let d = proxy_fid(&set, &shifted, 5).unwrap();
        let gain = (projection(64, 5) * DVector::from_element(64, 1.0)).norm_squared();
        assert!((d.value - delta * delta * gain).abs() < 1e-6, "{} vs {}", d.value, delta * delta * gain);
    }
}
