//! Binary checkpoint format.
//!
//! ```text
//! magic   b"MOFIv1"
//! u32     header length (LE), followed by a JSON header
//! u32     tensor count
//! tensor* u16 name length, name bytes, u8 ndim, u64 dims[ndim], f32 data
//! ```
//!
//! The header carries the trainer config, class list, input width, step,
//! and the exact `log τ` (f32 tensors would round it).

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::encoder::Tower;
use super::{TrainerConfig, TrainerState};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"MOFIv1";
const WHAT: &str = "checkpoint";

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainerConfig,
    classes: Vec<String>,
    input_dim: usize,
    step: usize,
    log_tau: f64,
}

pub fn encode_checkpoint(state: &TrainerState) -> Vec<u8> {
    let header = Header {
        config: state.config.clone(),
        classes: state.classes.clone(),
        input_dim: state.image.d_in(),
        step: state.step,
        log_tau: state.log_tau,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let slices = state.named_slices();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(slices.len() as u32).to_le_bytes());
    for (name, shape, data) in slices {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(shape.len() as u8);
        for d in &shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for x in data {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format(WHAT, format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainerState> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(CHECKPOINT_MAGIC.len()).ok() != Some(&CHECKPOINT_MAGIC[..]) {
        return Err(Error::format(WHAT, "bad magic"));
    }
    let hlen = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| Error::format(WHAT, format!("header: {e}")))?;
    header.config.validate()?;
    let count = r.u32()? as usize;
    let mut tensors = std::collections::BTreeMap::new();
    for _ in 0..count {
        let nlen = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::format(WHAT, "tensor name is not UTF-8"))?
            .to_string();
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        let mut len: usize = 1;
        for _ in 0..ndim {
            let d = usize::try_from(r.u64()?).map_err(|_| Error::format(WHAT, "dim overflow"))?;
            len = len
                .checked_mul(d)
                .ok_or_else(|| Error::format(WHAT, "tensor size overflow"))?;
            shape.push(d);
        }
        if len.saturating_mul(4) > r.remaining() {
            return Err(Error::format(
                WHAT,
                format!("tensor {name:?} larger than file"),
            ));
        }
        let raw = r.take(len * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("checkpoint tensor {name:?}")));
        }
        if tensors
            .insert(name.clone(), Tensor { shape, data })
            .is_some()
        {
            return Err(Error::format(WHAT, format!("duplicate tensor {name:?}")));
        }
    }
    if r.remaining() != 0 {
        return Err(Error::format(WHAT, "trailing bytes"));
    }

    let cfg = &header.config;
    let (d_in, d_h, d_e) = (header.input_dim, cfg.hidden_dim, cfg.embed_dim);
    let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
        let t = tensors
            .remove(name)
            .ok_or_else(|| Error::format(WHAT, format!("missing tensor {name:?}")))?;
        if t.shape != shape {
            return Err(Error::format(
                WHAT,
                format!(
                    "tensor {name:?} has shape {:?}, expected {shape:?}",
                    t.shape
                ),
            ));
        }
        Ok(t.data)
    };
    let mut tower = |prefix: &str| -> Result<Tower> {
        let w1 = take(&format!("{prefix}.w1"), &[d_h, d_in])?;
        let b1 = take(&format!("{prefix}.b1"), &[d_h])?;
        let w2 = take(&format!("{prefix}.w2"), &[d_e, d_h])?;
        let b2 = take(&format!("{prefix}.b2"), &[d_e])?;
        Ok(Tower {
            w1: Array2::from_shape_vec((d_h, d_in), w1).unwrap(),
            b1: Array1::from(b1),
            w2: Array2::from_shape_vec((d_e, d_h), w2).unwrap(),
            b2: Array1::from(b2),
        })
    };
    let image = tower("image")?;
    let text = tower("text")?;
    let n = header.classes.len();
    let cw = take("class_weights", &[n, d_e])?;
    take("log_tau", &[1])?;
    if !tensors.is_empty() {
        let extra: Vec<_> = tensors.keys().cloned().collect();
        return Err(Error::format(WHAT, format!("unexpected tensors {extra:?}")));
    }
    if !header.log_tau.is_finite() {
        return Err(Error::NonFinite("checkpoint log_tau".into()));
    }
    Ok(TrainerState::from_parts(
        header.config,
        image,
        text,
        Array2::from_shape_vec((n, d_e), cw).unwrap(),
        header.classes,
        header.log_tau,
        header.step,
    ))
}
