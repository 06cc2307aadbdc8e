//! `DXCK` checkpoint files: model role, schedule, architecture, training
//! configuration and the flat `f64` parameter list.

use std::fs;
use std::path::Path;

use dxp_autodiff::Tensor;

use crate::error::{Error, Result};
use crate::models::{Architecture, Denoiser, ModelKind, Network, Segmenter};
use crate::rng::SeedStream;
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::training::{TrainConfig, TrainLength};

const MAGIC: &[u8; 4] = b"DXCK";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Denoiser,
    Segmenter,
    /// Clean-image segmenter used for Stage IV filtering.
    Filter,
}

impl Role {
    fn tag(self) -> u8 {
        match self {
            Role::Denoiser => 0,
            Role::Segmenter => 1,
            Role::Filter => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Denoiser => "denoiser",
            Role::Segmenter => "segmenter",
            Role::Filter => "filter",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub role: Role,
    pub schedule: NoiseSchedule,
    pub arch: Architecture,
    pub train: TrainConfig,
    pub params: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(role: Role, model: &dyn Network, schedule: NoiseSchedule, train: TrainConfig) -> Self {
        Checkpoint {
            role,
            schedule,
            arch: model.architecture(),
            train,
            params: model.params().to_vec(),
        }
    }

    fn expect_role(&self, allowed: &[Role]) -> Result<()> {
        if allowed.contains(&self.role) {
            Ok(())
        } else {
            Err(Error::invalid(format!("checkpoint holds a {} model", self.role.name())))
        }
    }

    pub fn denoiser(&self) -> Result<Denoiser> {
        self.expect_role(&[Role::Denoiser])?;
        let mut m = Denoiser::new(self.arch.width, SeedStream::new(0));
        m.set_params(self.params.clone())?;
        Ok(m)
    }

    pub fn segmenter(&self) -> Result<Segmenter> {
        self.expect_role(&[Role::Segmenter, Role::Filter])?;
        let mut m = Segmenter::new(self.arch.width, SeedStream::new(0));
        m.set_params(self.params.clone())?;
        Ok(m)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.push(self.role.tag());
        match self.schedule.kind() {
            ScheduleKind::LinearVp { beta_min, beta_max } => {
                out.push(0);
                out.extend_from_slice(&beta_min.to_le_bytes());
                out.extend_from_slice(&beta_max.to_le_bytes());
            }
            ScheduleKind::CosineVp => {
                out.push(1);
                out.extend_from_slice(&[0; 16]);
            }
        }
        out.extend_from_slice(&self.schedule.steps().to_le_bytes());
        out.push(match self.arch.kind {
            ModelKind::Denoiser => 0,
            ModelKind::Segmenter => 1,
        });
        out.extend_from_slice(&(self.arch.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.train.batch_size as u32).to_le_bytes());
        let (len_tag, len) = match self.train.length {
            TrainLength::Iterations(n) => (0u8, n),
            TrainLength::Epochs(n) => (1u8, n),
        };
        out.push(len_tag);
        out.extend_from_slice(&(len as u64).to_le_bytes());
        out.extend_from_slice(&self.train.learning_rate.to_le_bytes());
        out.extend_from_slice(&self.train.seed.to_le_bytes());
        out.extend_from_slice(&self.train.cond_dropout.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.push(p.rank() as u8);
            for &d in p.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.bad(0, "bad magic, not a checkpoint".into()));
        }
        let version = r.u8()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let at = r.pos;
        let role = match r.u8()? {
            0 => Role::Denoiser,
            1 => Role::Segmenter,
            2 => Role::Filter,
            t => return Err(r.bad(at, format!("unknown role tag {t}"))),
        };
        let at = r.pos;
        let sched_tag = r.u8()?;
        let beta_min = r.f64()?;
        let beta_max = r.f64()?;
        let steps = r.u32()?;
        let schedule = match sched_tag {
            0 => NoiseSchedule::linear(beta_min, beta_max, steps),
            1 => NoiseSchedule::cosine(steps),
            t => return Err(r.bad(at, format!("unknown schedule tag {t}"))),
        }
        .map_err(|e| r.bad(at, e.to_string()))?;
        let at = r.pos;
        let kind = match r.u8()? {
            0 => ModelKind::Denoiser,
            1 => ModelKind::Segmenter,
            t => return Err(r.bad(at, format!("unknown architecture tag {t}"))),
        };
        let width = r.u32()? as usize;
        let batch_size = r.u32()? as usize;
        let at = r.pos;
        let len_tag = r.u8()?;
        let len = r.u64()? as usize;
        let length = match len_tag {
            0 => TrainLength::Iterations(len),
            1 => TrainLength::Epochs(len),
            t => return Err(r.bad(at, format!("unknown length tag {t}"))),
        };
        let train = TrainConfig {
            batch_size,
            length,
            learning_rate: r.f64()?,
            seed: r.u64()?,
            cond_dropout: r.f64()?,
        };
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let bytes = r.take(8 * len)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.push(Tensor::new(shape, data)?);
        }
        if r.pos != buf.len() {
            return Err(r.bad(r.pos, "trailing bytes".into()));
        }
        let ck = Checkpoint {
            role,
            schedule,
            arch: Architecture { kind, width },
            train,
            params,
        };
        // Reject parameter lists that do not fit the declared architecture.
        match kind {
            ModelKind::Denoiser => ck.denoiser().map(drop),
            ModelKind::Segmenter => ck.segmenter().map(drop),
        }
        .map_err(|e| r.bad(r.pos, e.to_string()))?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        Self::decode(&fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.bad(self.pos, format!("truncated ({n} bytes needed)")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bad(&self, offset: usize, msg: String) -> Error {
        Error::Format {
            what: "checkpoint",
            offset: offset as u64,
            msg,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_forward_outputs() {
        let seg = Segmenter::new(4, SeedStream::new(9));
        let ck = Checkpoint::new(Role::Filter, &seg, NoiseSchedule::cosine(500).unwrap(), TrainConfig::default());
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back, ck);
        let x = Tensor::from_fn([1, 32, 32], |i| (i as f64 * 0.37).sin());
        let a = seg.segment(&x, 0.2).unwrap();
        let b = back.segmenter().unwrap().segment(&x, 0.2).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert!(back.denoiser().is_err());
    }

    #[test]
    fn corrupt_input_is_reported() {
        let d = Denoiser::new(4, SeedStream::new(1));
        let bytes = Checkpoint::new(Role::Denoiser, &d, NoiseSchedule::default(), TrainConfig::default()).encode();
        assert!(matches!(Checkpoint::decode(&bytes[..100]), Err(Error::Format { .. })));
        let mut v = bytes.clone();
        v[4] = 7;
        assert!(matches!(Checkpoint::decode(&v), Err(Error::Version { found: 7, .. })));
        assert!(matches!(Checkpoint::decode(b"nope"), Err(Error::Format { offset: 0, .. })));
    }
}
