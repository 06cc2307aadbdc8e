use dxp_autodiff::{Tape, Tensor};
use proptest::prelude::*;

fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; c_out * ho * wo];
    for o in 0..c_out {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = 0.0;
                for c in 0..c_in {
                    for a in 0..k {
                        for b in 0..k {
                            let r = (i * stride + a) as isize - pad as isize;
                            let s = (j * stride + b) as isize - pad as isize;
                            if r >= 0 && s >= 0 && (r as usize) < h && (s as usize) < wd {
                                acc += x.data()[(c * h + r as usize) * wd + s as usize]
                                    * w.data()[((o * c_in + c) * k + a) * k + b];
                            }
                        }
                    }
                }
                out[(o * ho + i) * wo + j] = acc;
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_direct_summation(
        c_in in 1usize..4, c_out in 1usize..4, h in 3usize..9, w in 3usize..9,
        k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3, pad in 0usize..2,
        seed in any::<u64>(),
    ) {
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
        };
        let x = Tensor::from_fn([c_in, h, w], |_| next());
        let wt = Tensor::from_fn([c_out, c_in, k, k], |_| next());
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(wt.clone());
        let y = tape.conv2d(xv, wv, None, stride, pad).unwrap();
        let expected = naive_conv(&x, &wt, stride, pad);
        for (a, b) in tape.value(y).data().iter().zip(&expected) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn broadcast_add_then_sum_matches_scaled_sums(rows in 1usize..6, cols in 1usize..6, v in -3.0f64..3.0) {
        let tape = Tape::new();
        let a = tape.constant(Tensor::full([rows, cols], 1.0));
        let b = tape.constant(Tensor::full([cols], v));
        let s = tape.add(a, b).unwrap();
        let total = tape.value(tape.sum(s)).item().unwrap();
        prop_assert!((total - (rows * cols) as f64 * (1.0 + v)).abs() < 1e-9);
    }
}
