mod common;

use dxp_autodiff::{Tape, Tensor};
use dxp_core::data::generate;
use dxp_core::models::{Denoiser, Network, Segmenter};
use dxp_core::nn::bind;
use dxp_core::rng::SeedStream;
use dxp_core::schedule::{NoiseSchedule, T_MIN};
use dxp_core::training::{
    bce_with_logits, stage1_loss_with, stage2_loss_with, train_clean_segmenter, train_denoiser, Adam, Draw, TrainConfig,
    TrainLength,
};
use dxp_core::Error;

use common::{param_gradcheck, toy_pair};

fn tiny_cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 3,
        length: TrainLength::Iterations(steps),
        learning_rate: 1e-2,
        seed: 9,
        cond_dropout: 0.0,
    }
}

#[test]
fn stage1_gradient_matches_finite_differences() {
    let schedule = NoiseSchedule::default();
    let pair = toy_pair(8, 1);
    let den = Denoiser::new(1, SeedStream::new(5));
    let mut rng = SeedStream::new(6).rng(0);
    for y1 in [true, false] {
        let draw = Draw {
            y1,
            ..Draw::sample(&mut rng, &[1, 8, 8])
        };
        for drop in [false, true] {
            let err = param_gradcheck(&|t, p| stage1_loss_with(t, &den, p, &pair, &schedule, &draw, drop), den.params());
            assert!(err <= 1e-4, "y1={y1} drop={drop}: {err:e}");
        }
    }
}

#[test]
fn stage2_gradient_matches_finite_differences() {
    let schedule = NoiseSchedule::cosine(1000).unwrap();
    let pair = toy_pair(8, 2);
    let seg = Segmenter::new(1, SeedStream::new(7));
    let mut rng = SeedStream::new(8).rng(0);
    for y1 in [true, false] {
        let draw = Draw {
            y1,
            ..Draw::sample(&mut rng, &[1, 8, 8])
        };
        let err = param_gradcheck(&|t, p| stage2_loss_with(t, &seg, p, &pair, &schedule, &draw), seg.params());
        assert!(err <= 1e-4, "y1={y1}: {err:e}");
    }
}

#[test]
fn draws_are_fair_coins_and_uniform_times() {
    let mut rng = SeedStream::new(3).rng(0);
    let n = 20_000;
    let draws: Vec<Draw> = (0..n).map(|_| Draw::sample(&mut rng, &[1])).collect();
    let frac = draws.iter().filter(|d| d.y1).count() as f64 / n as f64;
    // 4 standard errors of a fair coin
    assert!((frac - 0.5).abs() < 4.0 * (0.25 / n as f64).sqrt(), "{frac}");
    assert!(draws.iter().all(|d| (T_MIN..1.0).contains(&d.t)));
    let mean_t = draws.iter().map(|d| d.t).sum::<f64>() / n as f64;
    assert!((mean_t - 0.5 * (1.0 + T_MIN)).abs() < 0.01);
}

#[test]
fn stage1_branches_follow_the_condition_flag() {
    let schedule = NoiseSchedule::default();
    let pair = toy_pair(8, 4);
    let den = Denoiser::new(2, SeedStream::new(1));
    let eps = Tensor::from_fn([1, 8, 8], |k| ((k * 7) % 5) as f64 * 0.3 - 0.6);
    let manual = |y1: bool, target: &Tensor, cond: Option<&Tensor>| {
        let x_t = schedule.forward_diffuse(target, 0.4, &eps).unwrap();
        let pred = den.denoise(&x_t, 0.4, y1, cond).unwrap();
        pred.sub(&eps).unwrap().map(|v| v * v).mean()
    };
    let loss = |y1: bool, drop: bool| {
        let tape = Tape::new();
        let p = bind(&tape, den.params(), false);
        let draw = Draw {
            y1,
            t: 0.4,
            eps: eps.clone(),
        };
        tape.value(stage1_loss_with(&tape, &den, &p, &pair, &schedule, &draw, drop).unwrap()).item().unwrap()
    };
    let signed = pair.mask_signed();
    assert_eq!(loss(true, false), manual(true, &pair.image, Some(&signed)));
    assert_eq!(loss(true, true), manual(true, &pair.image, None));
    assert_eq!(loss(false, false), manual(false, &signed, None));
    assert_ne!(loss(true, false), loss(false, false));
}

#[test]
fn stage2_mask_branch_only_classifies() {
    let schedule = NoiseSchedule::default();
    let pair = toy_pair(8, 5);
    let seg = Segmenter::new(2, SeedStream::new(2));
    let eps = Tensor::from_fn([1, 8, 8], |k| (k % 3) as f64 - 1.0);
    let tape = Tape::new();
    let p = bind(&tape, seg.params(), false);
    let draw = Draw {
        y1: false,
        t: 0.3,
        eps: eps.clone(),
    };
    let got = tape.value(stage2_loss_with(&tape, &seg, &p, &pair, &schedule, &draw).unwrap()).item().unwrap();
    let x_t = tape.constant(schedule.forward_diffuse(&pair.mask_signed(), 0.3, &eps).unwrap());
    let out = seg.forward(&tape, &p, x_t, 0.3).unwrap();
    let want = bce_with_logits(&tape, out.y1_logit, &Tensor::zeros([1, 1])).unwrap();
    assert_eq!(got, tape.value(want).item().unwrap());
    assert!(got >= 0.0);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let seg = Segmenter::new(2, SeedStream::new(0));
    let mut params = seg.params().to_vec();
    let before = params.clone();
    let grads: Vec<Vec<f64>> = params.iter().map(|p| vec![0.5; p.len()]).collect();
    let mut opt = Adam::new(&params, 0.0);
    opt.update(&mut params, &grads);
    assert_eq!(params, before);
}

#[test]
fn training_is_deterministic_across_worker_counts() {
    let ds = generate(1, 12, 32, 32).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut den = Denoiser::new(2, SeedStream::new(3));
            let log = train_denoiser(&mut den, &ds.train, &NoiseSchedule::default(), &tiny_cfg(4)).unwrap();
            (den.params().to_vec(), log)
        })
    };
    let (a, b) = (run(1), run(3));
    assert_eq!(a, b);
    assert_eq!(a.1.losses.len(), 4);
}

#[test]
fn clean_training_reduces_loss() {
    let ds = generate(2, 20, 32, 32).unwrap();
    let mut seg = Segmenter::new(4, SeedStream::new(1));
    let cfg = TrainConfig {
        batch_size: 6,
        length: TrainLength::Epochs(15),
        learning_rate: 1e-2,
        seed: 0,
        cond_dropout: 0.0,
    };
    let log = train_clean_segmenter(&mut seg, &ds.train, &cfg).unwrap();
    assert_eq!(log.losses.len(), 15 * ds.train.len().div_ceil(6));
    assert!(log.tail_mean(5) < log.losses[0], "{:?}", log.losses);
}

#[test]
fn exploding_learning_rate_is_reported() {
    let ds = generate(3, 12, 32, 32).unwrap();
    let mut seg = Segmenter::new(2, SeedStream::new(1));
    let cfg = TrainConfig {
        learning_rate: 1e300,
        ..tiny_cfg(20)
    };
    match train_clean_segmenter(&mut seg, &ds.train, &cfg) {
        Err(Error::NonFiniteLoss(_) | Error::NonFinite(_)) => {}
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}

#[test]
fn empty_training_set_is_an_error() {
    let mut seg = Segmenter::new(2, SeedStream::new(1));
    assert!(matches!(train_clean_segmenter(&mut seg, &[], &tiny_cfg(1)), Err(Error::Empty(_))));
}
