//! The noise-prediction network, the noise-conditional segmenter with its
//! image-vs-mask head, and the shared parameter plumbing.

use dxp_autodiff::{Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{bind, check_finite, Linear, ParamBuilder, UNet, UNetConfig};
use crate::rng::SeedStream;

pub const DEFAULT_WIDTH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Denoiser,
    Segmenter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub kind: ModelKind,
    pub width: usize,
}

/// Shared access to a model's flat parameter list.
pub trait Network: Send + Sync {
    fn architecture(&self) -> Architecture;
    fn params(&self) -> &[Tensor];
    fn params_mut(&mut self) -> &mut Vec<Tensor>;

    fn param_count(&self) -> usize {
        self.params().iter().map(Tensor::len).sum()
    }

    /// Replaces all parameters; shapes must match the current ones.
    fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        let cur = self.params();
        if cur.len() != params.len() || cur.iter().zip(&params).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::invalid("parameter list does not match the architecture"));
        }
        *self.params_mut() = params;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    net: UNet,
    params: Vec<Tensor>,
}

impl Denoiser {
    pub fn new(width: usize, init: SeedStream) -> Self {
        let mut rng = init.rng(0);
        let mut pb = ParamBuilder::new(&mut rng);
        let net = UNet::new(
            UNetConfig {
                in_channels: 2,
                out_channels: 1,
                width,
                extra_scalars: 2,
            },
            &mut pb,
        );
        Denoiser {
            net,
            params: pb.finish(),
        }
    }

    /// Noise prediction on a tape. `cond: None` is the absent condition: a
    /// zero plane plus the absent flag.
    pub fn forward(&self, tape: &Tape, p: &[Var], x_t: Var, t: f64, y1: bool, cond: Option<Var>) -> Result<Var> {
        let shape = tape.shape(x_t);
        let (cond, absent) = match cond {
            Some(c) => {
                if tape.shape(c) != shape {
                    return Err(Error::invalid(format!(
                        "condition shape {:?} differs from input {shape:?}",
                        tape.shape(c)
                    )));
                }
                (c, 0.0)
            }
            None => (tape.constant(Tensor::zeros(shape)), 1.0),
        };
        let x = tape.concat(&[x_t, cond], 0)?;
        let y1 = if y1 { 1.0 } else { 0.0 };
        Ok(self.net.forward(tape, p, x, t, &[y1, absent])?.out)
    }

    pub fn denoise(&self, x_t: &Tensor, t: f64, y1: bool, cond: Option<&Tensor>) -> Result<Tensor> {
        let tape = Tape::new();
        let p = bind(&tape, &self.params, false);
        let x = tape.constant(x_t.clone());
        let c = cond.map(|c| tape.constant(c.clone()));
        Ok(tape.value(self.forward(&tape, &p, x, t, y1, c)?))
    }
}

impl Network for Denoiser {
    fn architecture(&self) -> Architecture {
        Architecture {
            kind: ModelKind::Denoiser,
            width: self.net.config().width,
        }
    }

    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Vec<Tensor> {
        &mut self.params
    }
}

#[derive(Clone, Debug)]
pub struct Segmenter {
    net: UNet,
    head: Linear,
    params: Vec<Tensor>,
}

pub struct SegmentVars {
    pub pixel_logits: Var,
    /// `[1, 1]`
    pub y1_logit: Var,
}

impl Segmenter {
    pub fn new(width: usize, init: SeedStream) -> Self {
        let mut rng = init.rng(0);
        let mut pb = ParamBuilder::new(&mut rng);
        let net = UNet::new(
            UNetConfig {
                in_channels: 1,
                out_channels: 1,
                width,
                extra_scalars: 0,
            },
            &mut pb,
        );
        let head = pb.linear(2 * width, 1, 1.0);
        Segmenter {
            net,
            head,
            params: pb.finish(),
        }
    }

    pub fn forward(&self, tape: &Tape, p: &[Var], x_t: Var, t: f64) -> Result<SegmentVars> {
        let out = self.net.forward(tape, p, x_t, t, &[])?;
        let y1_logit = check_finite(tape, self.head.apply(tape, p, out.pooled)?, "y1 head")?;
        Ok(SegmentVars {
            pixel_logits: out.out,
            y1_logit,
        })
    }

    /// Per-pixel logits `[1, H, W]` and the image-vs-mask logit.
    pub fn segment(&self, x_t: &Tensor, t: f64) -> Result<(Tensor, f64)> {
        let tape = Tape::new();
        let p = bind(&tape, &self.params, false);
        let x = tape.constant(x_t.clone());
        let out = self.forward(&tape, &p, x, t)?;
        Ok((tape.value(out.pixel_logits), tape.value(out.y1_logit).data()[0]))
    }

    /// Binary mask predicted from pixel logits thresholded at zero.
    pub fn predict_mask(&self, x_t: &Tensor, t: f64) -> Result<Tensor> {
        let (logits, _) = self.segment(x_t, t)?;
        Ok(logits.map(|l| if l > 0.0 { 1.0 } else { 0.0 }))
    }
}

impl Network for Segmenter {
    fn architecture(&self) -> Architecture {
        Architecture {
            kind: ModelKind::Segmenter,
            width: self.net.config().width,
        }
    }

    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Vec<Tensor> {
        &mut self.params
    }
}
