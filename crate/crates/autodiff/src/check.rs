//! Central finite-difference gradient checking.

use crate::{Tape, Tensor, TensorError, Var};

pub type Build<'a> = dyn Fn(&Tape, &[Var]) -> Result<Var, TensorError> + 'a;

/// Step used by [`gradcheck`].
pub const FD_STEP: f64 = 1e-5;

/// Deterministic values in `[lo, hi)` from a splitmix64 stream.
pub fn pseudo_random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut state = seed;
    Tensor::from_fn(shape.to_vec(), |_| {
        state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
        lo + (hi - lo) * (z >> 11) as f64 / (1u64 << 53) as f64
    })
}

fn weighted(tape: &Tape, out: Var, weights: &Tensor) -> Result<Var, TensorError> {
    let w = tape.constant(weights.clone());
    Ok(tape.sum(tape.mul(out, w)?))
}

fn eval(build: &Build, inputs: &[Tensor], weights: &Tensor) -> Result<f64, TensorError> {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&tape, &vars)?;
    tape.value(weighted(&tape, out, weights)?).item()
}

/// Worst relative error `||analytic - numeric|| / max(||analytic||, ||numeric||)`
/// over all inputs. Non-scalar outputs are contracted with fixed random
/// weights so the whole Jacobian is exercised.
pub fn gradcheck(build: &Build, inputs: &[Tensor], seed: u64) -> Result<f64, TensorError> {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&tape, &vars)?;
    let weights = pseudo_random(&tape.shape(out), seed, -1.0, 1.0);
    let loss = weighted(&tape, out, &weights)?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        let mut numeric = vec![0.0; input.len()];
        let mut shifted = inputs.to_vec();
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut v = input.to_vec();
            v[j] = input.data()[j] + FD_STEP;
            shifted[i] = Tensor::new(input.shape().to_vec(), v.clone())?;
            let fp = eval(build, &shifted, &weights)?;
            v[j] = input.data()[j] - FD_STEP;
            shifted[i] = Tensor::new(input.shape().to_vec(), v)?;
            let fm = eval(build, &shifted, &weights)?;
            *slot = (fp - fm) / (2.0 * FD_STEP);
        }
        shifted[i] = input.clone();
        let norm = |it: &mut dyn Iterator<Item = f64>| it.map(|v| v * v).sum::<f64>().sqrt();
        let diff = norm(&mut analytic.data().iter().zip(&numeric).map(|(a, n)| a - n));
        let scale = norm(&mut analytic.data().iter().copied()).max(norm(&mut numeric.iter().copied()));
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
    }
    Ok(worst)
}

fn case(build: &Build, shapes: &[&[usize]], seed: u64, lo: f64, hi: f64) -> Result<f64, TensorError> {
    let inputs: Vec<Tensor> = shapes
        .iter()
        .enumerate()
        .map(|(k, s)| pseudo_random(s, seed.wrapping_mul(31).wrapping_add(k as u64), lo, hi))
        .collect();
    gradcheck(build, &inputs, seed)
}

/// Relative finite-difference error of every differentiable primitive.
pub fn primitive_errors() -> Result<Vec<(&'static str, f64)>, TensorError> {
    let mut out = Vec::new();
    let mut push = |name, build: &Build, shapes: &[&[usize]], seed| -> Result<(), TensorError> {
        out.push((name, case(build, shapes, seed, -2.0, 2.0)?));
        Ok(())
    };
    push("add", &|t, v| t.add(v[0], v[1]), &[&[3, 4], &[4]], 1)?;
    push("sub", &|t, v| t.sub(v[0], v[1]), &[&[2, 3], &[2, 1]], 2)?;
    push("mul", &|t, v| t.mul(v[0], v[1]), &[&[2, 3, 3], &[2, 1, 1]], 3)?;
    push("scale", &|t, v| Ok(t.scale(v[0], -1.7)), &[&[6]], 4)?;
    push("offset", &|t, v| Ok(t.offset(v[0], 0.3)), &[&[6]], 5)?;
    push("neg", &|t, v| Ok(t.neg(v[0])), &[&[6]], 6)?;
    push("silu", &|t, v| Ok(t.silu(v[0])), &[&[3, 3]], 7)?;
    push("sigmoid", &|t, v| Ok(t.sigmoid(v[0])), &[&[7]], 8)?;
    push("log_sigmoid", &|t, v| Ok(t.log_sigmoid(v[0])), &[&[7]], 9)?;
    push("exp", &|t, v| Ok(t.exp(v[0])), &[&[7]], 10)?;
    push("square", &|t, v| Ok(t.square(v[0])), &[&[7]], 11)?;
    push("sum", &|t, v| Ok(t.sum(v[0])), &[&[2, 3]], 12)?;
    push("mean", &|t, v| Ok(t.mean(v[0])), &[&[2, 3]], 13)?;
    push("sum_axis", &|t, v| t.sum_axis(v[0], 1), &[&[3, 2, 2]], 14)?;
    push("softmax", &|t, v| t.softmax(v[0]), &[&[3, 5]], 15)?;
    push("matmul", &|t, v| t.matmul(v[0], v[1]), &[&[3, 4], &[4, 2]], 16)?;
    push("conv2d", &|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1), &[&[2, 5, 5], &[3, 2, 3, 3], &[3]], 17)?;
    push("conv2d stride 2", &|t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1), &[&[2, 6, 6], &[2, 2, 3, 3], &[2]], 18)?;
    push("slice", &|t, v| t.slice(v[0], 1, 1, 2), &[&[2, 4, 3]], 19)?;
    push("concat", &|t, v| t.concat(&[v[0], v[1]], 2), &[&[2, 2, 1], &[2, 2, 3]], 20)?;
    push("broadcast_to", &|t, v| t.broadcast_to(v[0], &[3, 2, 4]), &[&[2, 1]], 21)?;
    push("reshape", &|t, v| t.reshape(v[0], &[6]), &[&[2, 3]], 22)?;
    push("upsample2", &|t, v| t.upsample2(v[0]), &[&[2, 3, 2]], 23)?;
    out.push(("log", case(&|t, v| Ok(t.log(v[0])), &[&[7]], 24, 0.2, 2.0)?));
    // Magnitudes bounded away from the kink.
    let x = pseudo_random(&[3, 4], 25, 0.1, 2.0).zip_map(&pseudo_random(&[3, 4], 26, -1.0, 1.0), |m, s| m.copysign(s))?;
    out.push(("relu", gradcheck(&|t, v| Ok(t.relu(v[0])), &[x], 25)?));
    Ok(out)
}
