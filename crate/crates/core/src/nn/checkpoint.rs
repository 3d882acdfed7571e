//! Versioned binary checkpoints.
//!
//! ```text
//! "DHCK" | version u32 | input_channels u32 | num_classes u32 | kernel_size u32
//! | num_stages u32 | widths u32 × num_stages | seed u64
//! | parameters f64 × N (declaration order)
//! | running mean, running var f64 per normalization layer
//! | has_training u8
//! [ | epochs_done u64 | step u64 | skipped u64
//!   | schedule tag u8 | lr_start f64 | lr_end f64 | total_steps u64
//!   | first moments f64 × N | second moments f64 × N ]
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::model::{ModelParams, NetworkConfig, RunningNorm};
use super::optim::{LrSchedule, OptimizerState};
use super::tensor::Tensor;
use super::train::TrainProgress;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DHCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const KIND: &str = "checkpoint";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub progress: Option<TrainProgress>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(KIND, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::format(KIND, "size overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn tensors(&mut self, shapes: &[[usize; 4]]) -> Result<Vec<Tensor>> {
        shapes
            .iter()
            .map(|&s| Tensor::from_vec(s, self.f64s(s.iter().product())?))
            .collect()
    }
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let p = &ckpt.params;
    let cfg = p.config();
    let mut w = Writer(CHECKPOINT_MAGIC.to_vec());
    w.u32(CHECKPOINT_VERSION as usize);
    w.u32(cfg.input_channels);
    w.u32(cfg.num_classes);
    w.u32(cfg.kernel_size);
    w.u32(cfg.widths.len());
    for &width in &cfg.widths {
        w.u32(width);
    }
    w.u64(cfg.seed);
    for t in p.tensors() {
        w.f64s(t.data());
    }
    for n in p.norms() {
        w.f64s(&n.mean);
        w.f64s(&n.var);
    }
    match &ckpt.progress {
        None => w.u8(0),
        Some(prog) => {
            let o = &prog.optimizer;
            w.u8(1);
            w.u64(prog.epochs_done);
            w.u64(o.step);
            w.u64(o.skipped);
            match o.schedule {
                LrSchedule::Constant { lr } => {
                    w.u8(0);
                    w.f64s(&[lr, lr]);
                    w.u64(0);
                }
                LrSchedule::Cosine {
                    lr_start,
                    lr_end,
                    total_steps,
                } => {
                    w.u8(1);
                    w.f64s(&[lr_start, lr_end]);
                    w.u64(total_steps);
                }
            }
            for t in o.first_moment.iter().chain(&o.second_moment) {
                w.f64s(t.data());
            }
        }
    }
    w.0
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(KIND, "bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::format(KIND, format!("unsupported version {version}")));
    }
    let input_channels = r.u32()?;
    let num_classes = r.u32()?;
    let kernel_size = r.u32()?;
    let stages = r.u32()?;
    if stages > 1024 {
        return Err(Error::format(KIND, format!("implausible stage count {stages}")));
    }
    let widths = (0..stages).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let config = NetworkConfig {
        input_channels,
        widths,
        num_classes,
        kernel_size,
        seed: r.u64()?,
    };
    config
        .validate()
        .map_err(|e| Error::format(KIND, format!("invalid network config: {e}")))?;
    let shapes = config.tensor_shapes();
    let tensors = r.tensors(&shapes)?;
    let norms = config
        .norm_widths()
        .into_iter()
        .map(|c| {
            Ok(RunningNorm {
                mean: r.f64s(c)?,
                var: r.f64s(c)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let params = ModelParams::from_parts(config, tensors, norms)?;
    let progress = match r.u8()? {
        0 => None,
        1 => {
            let epochs_done = r.u64()?;
            let step = r.u64()?;
            let skipped = r.u64()?;
            let tag = r.u8()?;
            let (lr_start, lr_end, total_steps) = (r.f64()?, r.f64()?, r.u64()?);
            let schedule = match tag {
                0 => LrSchedule::Constant { lr: lr_start },
                1 => LrSchedule::Cosine {
                    lr_start,
                    lr_end,
                    total_steps,
                },
                t => return Err(Error::format(KIND, format!("unknown schedule tag {t}"))),
            };
            Some(TrainProgress {
                optimizer: OptimizerState {
                    step,
                    skipped,
                    first_moment: r.tensors(&shapes)?,
                    second_moment: r.tensors(&shapes)?,
                    schedule,
                },
                epochs_done,
            })
        }
        f => return Err(Error::format(KIND, format!("bad training flag {f}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::format(KIND, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { params, progress })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode(ckpt))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}
