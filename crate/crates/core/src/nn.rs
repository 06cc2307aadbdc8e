//! Layers over a flat parameter list and the small U-Net shared by the
//! denoiser and the segmenter.
//!
//! Parameters live in a `Vec<Tensor>`; layers hold indices into it. A forward
//! pass binds the list onto a tape (as leaves when training, as constants
//! otherwise) and threads the resulting `Var`s through the layers.

use dxp_autodiff::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const TIME_FREQS: usize = 8;

pub fn bind(tape: &Tape, params: &[Tensor], trainable: bool) -> Vec<Var> {
    params
        .iter()
        .map(|p| if trainable { tape.leaf(p.clone()) } else { tape.constant(p.clone()) })
        .collect()
}

pub fn check_finite(tape: &Tape, v: Var, layer: &str) -> Result<Var> {
    if tape.value(v).all_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("layer `{layer}`")))
    }
}

pub struct ParamBuilder<'a> {
    params: Vec<Tensor>,
    rng: &'a mut ChaCha8Rng,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(rng: &'a mut ChaCha8Rng) -> Self {
        Self { params: Vec::new(), rng }
    }

    fn push(&mut self, t: Tensor) -> usize {
        self.params.push(t);
        self.params.len() - 1
    }

    fn normal(&mut self, shape: Vec<usize>, std: f64) -> Tensor {
        let rng = &mut *self.rng;
        Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal) * std)
    }

    /// He-initialised convolution; `gain` rescales the default standard deviation.
    pub fn conv(&mut self, c_in: usize, c_out: usize, k: usize, stride: usize, gain: f64) -> Conv {
        let std = gain * (2.0 / (c_in * k * k) as f64).sqrt();
        let w = self.normal(vec![c_out, c_in, k, k], std);
        Conv {
            w: self.push(w),
            b: self.push(Tensor::zeros([c_out])),
            stride,
            pad: k / 2,
        }
    }

    pub fn linear(&mut self, n_in: usize, n_out: usize, gain: f64) -> Linear {
        let std = gain * (1.0 / n_in as f64).sqrt();
        let w = self.normal(vec![n_in, n_out], std);
        Linear {
            w: self.push(w),
            b: self.push(Tensor::zeros([n_out])),
        }
    }

    pub fn finish(self) -> Vec<Tensor> {
        self.params
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub fn apply(&self, tape: &Tape, p: &[Var], x: Var) -> Result<Var> {
        Ok(tape.conv2d(x, p[self.w], Some(p[self.b]), self.stride, self.pad)?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    /// `x: [1, n_in] -> [1, n_out]`
    pub fn apply(&self, tape: &Tape, p: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.w])?;
        Ok(tape.add(y, p[self.b])?)
    }
}

/// Sinusoidal features of `t` in `[0, 1]`, `2 * TIME_FREQS` values.
pub fn time_features(t: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * TIME_FREQS);
    for k in 0..TIME_FREQS {
        let freq = 1000.0 * (-(k as f64) / TIME_FREQS as f64 * 1000f64.ln()).exp();
        out.push((t * freq).sin());
        out.push((t * freq).cos());
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
    /// Extra scalar inputs appended to the time features (flags such as `y1`).
    pub extra_scalars: usize,
}

impl UNetConfig {
    pub fn emb_dim(&self) -> usize {
        2 * self.width
    }
}

/// Two-level U-Net: widths `w, 2w, 2w`, stride-2 downsampling, nearest
/// upsampling and additive skips. An embedding of `t` and the extra scalars
/// is added as a per-channel bias at every resolution.
#[derive(Clone, Debug)]
pub struct UNet {
    cfg: UNetConfig,
    emb1: Linear,
    emb2: Linear,
    proj: [Linear; 5],
    stem: Conv,
    enc1: Conv,
    down1: Conv,
    enc2: Conv,
    down2: Conv,
    mid: Conv,
    up2: Conv,
    up1: Conv,
    out: Conv,
}

pub struct UNetOutput {
    pub out: Var,
    /// Mean-pooled bottleneck features, `[1, 2w]`.
    pub pooled: Var,
}

impl UNet {
    pub fn new(cfg: UNetConfig, pb: &mut ParamBuilder<'_>) -> Self {
        let w = cfg.width;
        let e = cfg.emb_dim();
        let n_in = 2 * TIME_FREQS + cfg.extra_scalars;
        UNet {
            cfg,
            emb1: pb.linear(n_in, e, 1.0),
            emb2: pb.linear(e, e, 1.0),
            proj: [
                pb.linear(e, w, 0.5),
                pb.linear(e, 2 * w, 0.5),
                pb.linear(e, 2 * w, 0.5),
                pb.linear(e, 2 * w, 0.5),
                pb.linear(e, w, 0.5),
            ],
            stem: pb.conv(cfg.in_channels, w, 3, 1, 1.0),
            enc1: pb.conv(w, w, 3, 1, 1.0),
            down1: pb.conv(w, 2 * w, 3, 2, 1.0),
            enc2: pb.conv(2 * w, 2 * w, 3, 1, 1.0),
            down2: pb.conv(2 * w, 2 * w, 3, 2, 1.0),
            mid: pb.conv(2 * w, 2 * w, 3, 1, 1.0),
            up2: pb.conv(2 * w, 2 * w, 3, 1, 1.0),
            up1: pb.conv(2 * w, w, 3, 1, 1.0),
            out: pb.conv(w, cfg.out_channels, 3, 1, 0.1),
        }
    }

    pub fn config(&self) -> UNetConfig {
        self.cfg
    }

    fn with_bias(tape: &Tape, p: &[Var], h: Var, proj: &Linear, emb: Var) -> Result<Var> {
        let c = tape.shape(h)[0];
        let bias = proj.apply(tape, p, emb)?;
        let bias = tape.reshape(bias, &[c, 1, 1])?;
        Ok(tape.add(h, bias)?)
    }

    /// `x: [in_channels, H, W]` with `H`, `W` divisible by 4.
    pub fn forward(&self, tape: &Tape, p: &[Var], x: Var, t: f64, scalars: &[f64]) -> Result<UNetOutput> {
        let shape = tape.shape(x);
        if shape.len() != 3 || shape[0] != self.cfg.in_channels || shape[1] % 4 != 0 || shape[2] % 4 != 0 {
            return Err(Error::invalid(format!(
                "network expects [{}, H, W] with H, W divisible by 4, got {shape:?}",
                self.cfg.in_channels
            )));
        }
        if scalars.len() != self.cfg.extra_scalars {
            return Err(Error::invalid(format!(
                "expected {} conditioning scalars, got {}",
                self.cfg.extra_scalars,
                scalars.len()
            )));
        }
        let mut feats = time_features(t);
        feats.extend_from_slice(scalars);
        let n = feats.len();
        let e = tape.constant(Tensor::new([1, n], feats)?);
        let e = tape.silu(self.emb1.apply(tape, p, e)?);
        let emb = tape.silu(self.emb2.apply(tape, p, e)?);

        let h = self.stem.apply(tape, p, x)?;
        let h = tape.silu(Self::with_bias(tape, p, h, &self.proj[0], emb)?);
        let h1 = tape.silu(self.enc1.apply(tape, p, h)?);
        let h1 = check_finite(tape, h1, "enc1")?;

        let h = self.down1.apply(tape, p, h1)?;
        let h = tape.silu(Self::with_bias(tape, p, h, &self.proj[1], emb)?);
        let h2 = tape.silu(self.enc2.apply(tape, p, h)?);
        let h2 = check_finite(tape, h2, "enc2")?;

        let h = self.down2.apply(tape, p, h2)?;
        let h = tape.silu(Self::with_bias(tape, p, h, &self.proj[2], emb)?);
        let h3 = tape.silu(self.mid.apply(tape, p, h)?);
        let h3 = check_finite(tape, h3, "mid")?;

        let u = tape.upsample2(h3)?;
        let u = self.up2.apply(tape, p, u)?;
        let u = tape.add(u, h2)?;
        let u = tape.silu(Self::with_bias(tape, p, u, &self.proj[3], emb)?);

        let u = tape.upsample2(u)?;
        let u = self.up1.apply(tape, p, u)?;
        let u = tape.add(u, h1)?;
        let u = tape.silu(Self::with_bias(tape, p, u, &self.proj[4], emb)?);
        let out = self.out.apply(tape, p, u)?;
        let out = check_finite(tape, out, "out")?;

        let [c, hh, ww] = tape.shape(h3)[..] else { unreachable!() };
        let flat = tape.reshape(h3, &[c, hh * ww])?;
        let pooled = tape.scale(tape.sum_axis(flat, 1)?, 1.0 / (hh * ww) as f64);
        let pooled = tape.reshape(pooled, &[1, c])?;
        Ok(UNetOutput { out, pooled })
    }
}
