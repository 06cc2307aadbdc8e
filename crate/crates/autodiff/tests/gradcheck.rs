//! Analytic gradients of every primitive against central finite differences.

use dxp_autodiff::{Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;

type Build = dyn Fn(&Tape, &[Var]) -> Result<Var, TensorError>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Reduces an arbitrary-shaped output to a scalar with fixed random weights
/// so the check covers the whole Jacobian rather than its column sums.
fn weighted_loss(tape: &Tape, out: Var, weights: &Tensor) -> Var {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

fn eval(build: &Build, inputs: &[Tensor], weights: &Tensor) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&tape, &vars).unwrap();
    let loss = weighted_loss(&tape, out, weights);
    tape.value(loss).item().unwrap()
}

/// Returns the worst relative error over all inputs, measured as
/// `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
fn gradcheck(build: &Build, inputs: &[Tensor], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&tape, &vars).unwrap();
    let weights = random(&mut rng, &tape.shape(out), -1.0, 1.0);
    let loss = weighted_loss(&tape, out, &weights);
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).unwrap();
        let mut numeric = vec![0.0; input.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = input.to_vec();
            let mut minus = input.to_vec();
            plus[j] += H;
            minus[j] -= H;
            let mut shifted = inputs.to_vec();
            shifted[i] = Tensor::new(input.shape().to_vec(), plus).unwrap();
            let fp = eval(build, &shifted, &weights);
            shifted[i] = Tensor::new(input.shape().to_vec(), minus).unwrap();
            let fm = eval(build, &shifted, &weights);
            *slot = (fp - fm) / (2.0 * H);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = analytic.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = na.max(nn);
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

fn check(name: &str, build: &Build, shapes: &[&[usize]], seed: u64) {
    check_range(name, build, shapes, seed, -2.0, 2.0);
}

fn check_range(name: &str, build: &Build, shapes: &[&[usize]], seed: u64, lo: f64, hi: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s, lo, hi)).collect();
    let err = gradcheck(build, &inputs, seed);
    assert!(err <= TOL, "{name}: relative error {err:e} exceeds {TOL:e}");
}

#[test]
fn elementwise_binary() {
    check("add", &|t, v| t.add(v[0], v[1]), &[&[3, 4], &[3, 4]], 1);
    check("add broadcast", &|t, v| t.add(v[0], v[1]), &[&[3, 4, 2], &[4, 1]], 2);
    check("sub broadcast", &|t, v| t.sub(v[0], v[1]), &[&[2, 3], &[3]], 3);
    check("mul", &|t, v| t.mul(v[0], v[1]), &[&[5], &[5]], 4);
    check("mul broadcast", &|t, v| t.mul(v[0], v[1]), &[&[2, 3, 3], &[2, 1, 1]], 5);
}

#[test]
fn elementwise_unary() {
    check("scale", &|t, v| Ok(t.scale(v[0], -1.7)), &[&[6]], 10);
    check("offset", &|t, v| Ok(t.offset(v[0], 0.3)), &[&[6]], 11);
    check("silu", &|t, v| Ok(t.silu(v[0])), &[&[3, 3]], 12);
    check("sigmoid", &|t, v| Ok(t.sigmoid(v[0])), &[&[7]], 13);
    check("log_sigmoid", &|t, v| Ok(t.log_sigmoid(v[0])), &[&[7]], 14);
    check("exp", &|t, v| Ok(t.exp(v[0])), &[&[7]], 15);
    check("square", &|t, v| Ok(t.square(v[0])), &[&[7]], 16);
    check_range("log", &|t, v| Ok(t.log(v[0])), &[&[7]], 17, 0.2, 2.0);
}

#[test]
fn relu_away_from_kink() {
    // Inputs bounded away from zero so the finite difference never straddles the kink.
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let data: Vec<f64> = (0..12)
        .map(|_| {
            let m: f64 = rng.random_range(0.1..2.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    let x = Tensor::new([3, 4], data).unwrap();
    let err = gradcheck(&|t, v| Ok(t.relu(v[0])), &[x], 20);
    assert!(err <= TOL, "relu: {err:e}");
}

#[test]
fn reductions_and_softmax() {
    check("sum", &|t, v| Ok(t.sum(v[0])), &[&[2, 3]], 30);
    check("mean", &|t, v| Ok(t.mean(v[0])), &[&[2, 3]], 31);
    check("sum_axis 0", &|t, v| t.sum_axis(v[0], 0), &[&[3, 2, 2]], 32);
    check("sum_axis 2", &|t, v| t.sum_axis(v[0], 2), &[&[3, 2, 2]], 33);
    check("softmax", &|t, v| t.softmax(v[0]), &[&[3, 5]], 34);
}

#[test]
fn matmul_gradient() {
    check("matmul", &|t, v| t.matmul(v[0], v[1]), &[&[3, 4], &[4, 2]], 40);
}

#[test]
fn conv2d_gradients() {
    check("conv s1 p1", &|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1), &[&[2, 5, 5], &[3, 2, 3, 3], &[3]], 50);
    check("conv s2 p1", &|t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1), &[&[2, 6, 6], &[2, 2, 3, 3], &[2]], 51);
    check("conv s1 p0", &|t, v| t.conv2d(v[0], v[1], None, 1, 0), &[&[1, 4, 5], &[2, 1, 3, 3]], 52);
    check("conv 1x1", &|t, v| t.conv2d(v[0], v[1], None, 1, 0), &[&[3, 4, 4], &[2, 3, 1, 1]], 53);
}

#[test]
fn structural_ops() {
    check("slice", &|t, v| t.slice(v[0], 1, 1, 2), &[&[2, 4, 3]], 60);
    check("concat", &|t, v| t.concat(&[v[0], v[1]], 0), &[&[2, 3], &[1, 3]], 61);
    check("concat inner", &|t, v| t.concat(&[v[0], v[1]], 2), &[&[2, 2, 1], &[2, 2, 3]], 62);
    check("broadcast", &|t, v| t.broadcast_to(v[0], &[3, 2, 4]), &[&[2, 1]], 63);
    check("reshape", &|t, v| t.reshape(v[0], &[6]), &[&[2, 3]], 64);
    check("upsample2", &|t, v| t.upsample2(v[0]), &[&[2, 3, 2]], 65);
}

#[test]
fn composite_network_gradient() {
    // conv -> silu -> upsample -> concat skip -> conv -> softmax over last axis -> log
    let build: &Build = &|t, v| {
        let h = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
        let h = t.silu(h);
        let h = t.upsample2(h)?;
        let h = t.concat(&[h, v[0]], 0)?;
        let h = t.conv2d(h, v[3], None, 1, 1)?;
        let p = t.softmax(h)?;
        Ok(t.log(p))
    };
    check("composite", build, &[&[1, 4, 4], &[2, 1, 3, 3], &[2], &[1, 3, 3, 3]], 70);
}

#[test]
fn log_sigmoid_of_dot_closed_form() {
    let w = [0.5, -1.5, 2.0];
    let x0 = [0.3, 0.1, -0.4];
    let tape = Tape::new();
    let wv = tape.constant(Tensor::new([1, 3], w.to_vec()).unwrap());
    let xv = tape.leaf(Tensor::new([3, 1], x0.to_vec()).unwrap());
    let dot = tape.matmul(wv, xv).unwrap();
    let s = tape.sigmoid(dot);
    let l = tape.log(s);
    let loss = tape.sum(l);
    let g = tape.backward(loss).unwrap();
    let z: f64 = w.iter().zip(&x0).map(|(a, b)| a * b).sum();
    let sig = 1.0 / (1.0 + (-z).exp());
    for (gi, wi) in g.get(xv).unwrap().data().iter().zip(&w) {
        assert!((gi - (1.0 - sig) * wi).abs() < 1e-14);
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let x0 = Tensor::from_vec(vec![0.4, -1.2, 0.9]);
    let grad_of = |which: u8| {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let a = {
            let e = tape.exp(x);
            tape.sum(e)
        };
        let b = {
            let s = tape.silu(x);
            tape.mean(s)
        };
        let loss = match which {
            0 => a,
            1 => b,
            _ => tape.add(a, b).unwrap(),
        };
        tape.backward(loss).unwrap().get(x).unwrap().clone()
    };
    let sum = grad_of(0).add(&grad_of(1)).unwrap();
    assert!(sum.max_abs_diff(&grad_of(2)).unwrap() < 1e-14);
}

#[test]
fn forward_backward_is_bit_identical_across_runs() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = random(&mut rng, &[2, 6, 6], -2.0, 2.0);
        let w = random(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let tape = Tape::new();
        let xv = tape.leaf(x);
        let wv = tape.leaf(w);
        let y = tape.conv2d(xv, wv, None, 1, 1).unwrap();
        let y = tape.silu(y);
        let loss = tape.mean(y);
        let g = tape.backward(loss).unwrap();
        (tape.value(loss).to_vec(), g.get(xv).unwrap().to_vec(), g.get(wv).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

#[test]
fn library_suite_covers_every_primitive() {
    let errs = dxp_autodiff::check::primitive_errors().unwrap();
    assert!(errs.len() >= 24);
    for (name, e) in errs {
        assert!(e <= TOL, "{name}: {e:e}");
    }
}
