//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use dxp_autodiff::{Tape, Tensor, Var};
use dxp_core::data::{Provenance, SamplePair};
use dxp_core::nn::bind;
use dxp_core::rng::SeedStream;
use rand::Rng;

pub type ParamLoss<'a> = dyn Fn(&Tape, &[Var]) -> dxp_core::Result<Var> + 'a;

const STEP: f64 = 1e-5;

fn value(loss: &ParamLoss, params: &[Tensor]) -> f64 {
    let tape = Tape::new();
    let p = bind(&tape, params, false);
    tape.value(loss(&tape, &p).unwrap()).item().unwrap()
}

/// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over every
/// parameter coordinate.
pub fn param_gradcheck(loss: &ParamLoss, params: &[Tensor]) -> f64 {
    let tape = Tape::new();
    let p = bind(&tape, params, true);
    let l = loss(&tape, &p).unwrap();
    let grads = tape.backward(l).unwrap();
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (k, param) in params.iter().enumerate() {
        let g = grads.get(p[k]).cloned().unwrap_or_else(|| Tensor::zeros(param.shape().to_vec()));
        for j in 0..param.len() {
            let mut shifted = params.to_vec();
            let mut v = param.to_vec();
            v[j] += STEP;
            shifted[k] = Tensor::new(param.shape().to_vec(), v.clone()).unwrap();
            let fp = value(loss, &shifted);
            v[j] -= 2.0 * STEP;
            shifted[k] = Tensor::new(param.shape().to_vec(), v).unwrap();
            let fm = value(loss, &shifted);
            let num = (fp - fm) / (2.0 * STEP);
            let a = g.data()[j];
            diff += (a - num).powi(2);
            na += a * a;
            nn += num * num;
        }
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(f64::MIN_POSITIVE)
}

/// A smooth random image with a disc mask, side `n`.
pub fn toy_pair(n: usize, seed: u64) -> SamplePair {
    let mut rng = SeedStream::new(seed).rng(0);
    let (cy, cx, r) = (
        rng.random_range(0.3..0.7) * n as f64,
        rng.random_range(0.3..0.7) * n as f64,
        rng.random_range(0.15..0.3) * n as f64,
    );
    let mask = Tensor::from_fn([1, n, n], |k| {
        let (i, j) = ((k / n) as f64 + 0.5, (k % n) as f64 + 0.5);
        if (i - cy).powi(2) + (j - cx).powi(2) <= r * r {
            1.0
        } else {
            0.0
        }
    });
    let image = mask.map(|m| 0.8 * m - 0.4).zip_map(&Tensor::from_fn([1, n, n], |_| rng.random_range(-0.1..0.1)), |a, b| a + b).unwrap();
    SamplePair {
        image,
        mask,
        provenance: Provenance::Original,
    }
}
