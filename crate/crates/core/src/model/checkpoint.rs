//! Binary checkpoint format.
//!
//! ```text
//! magic "DRSCKPT1" | version u16 | count u32
//! count × { name_len u16 | name utf-8 | tag u8 | rank u8 | dims u32×rank | words u32×len }
//! crc32 u32 over every preceding byte
//! ```
//! All integers are little-endian. Parameter words are stored verbatim so
//! NaN payloads and infinities survive a round trip.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{Component, Head, ModelError, ModelGraph, Parameter};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DRSCKPT1";
const VERSION: u16 = 1;
const HEAD_SIGMOID: &str = "head.sigmoid";
const HEAD_SIGMOID_FM: &str = "head.sigmoid_fm";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("checkpoint checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub fn write_checkpoint<W: Write>(model: &ModelGraph, mut w: W) -> Result<(), CheckpointError> {
    let marker = match model.head() {
        Head::Raw => None,
        Head::Sigmoid { fm: false } => Some(HEAD_SIGMOID),
        Head::Sigmoid { fm: true } => Some(HEAD_SIGMOID_FM),
    };
    let params = model.parameters();
    let mut buf = Vec::with_capacity(16 + model.parameter_count() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&((params.len() + marker.is_some() as usize) as u32).to_le_bytes());
    let mut put = |name: &str, tag: u8, t: &Tensor| -> Result<(), CheckpointError> {
        let name_len = u16::try_from(name.len()).map_err(|_| CheckpointError::Format {
            offset: buf.len(),
            reason: format!("parameter name `{name}` too long"),
        })?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(tag);
        buf.push(t.rank() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for word in t.words() {
            buf.extend_from_slice(&word.to_le_bytes());
        }
        Ok(())
    };
    for p in params {
        put(&p.name, p.component.tag(), &p.tensor)?;
    }
    if let Some(name) = marker {
        put(name, Component::Mlp.tag(), &Tensor::zeros(&[0]))?;
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Format {
                offset: self.pos,
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelGraph, CheckpointError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < MAGIC.len() + 2 + 4 + 4 {
        return Err(CheckpointError::Format {
            offset: bytes.len(),
            reason: "file too short".into(),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let mut c = Cursor { buf: body, pos: 0 };
    if c.take(8, "magic")? != MAGIC {
        return Err(CheckpointError::Format {
            offset: 0,
            reason: "bad magic".into(),
        });
    }
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Crc { stored, computed });
    }
    let version_at = c.pos;
    let version = c.u16("version")?;
    if version != VERSION {
        return Err(CheckpointError::Format {
            offset: version_at,
            reason: format!("unsupported version {version}"),
        });
    }
    let count = c.u32("parameter count")?;
    let mut params = Vec::new();
    let mut head = Head::Raw;
    for _ in 0..count {
        let start = c.pos;
        let name_len = c.u16("name length")? as usize;
        let name_at = c.pos;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| CheckpointError::Format {
                offset: name_at,
                reason: "parameter name is not utf-8".into(),
            })?
            .to_owned();
        let tag_at = c.pos;
        let component = Component::from_tag(c.u8("component tag")?).ok_or_else(|| CheckpointError::Format {
            offset: tag_at,
            reason: format!("unknown component tag for `{name}`"),
        })?;
        let rank = c.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("dimension")? as usize);
        }
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| CheckpointError::Format {
            offset: start,
            reason: format!("shape of `{name}` overflows"),
        })?;
        let raw = c.take(len.saturating_mul(4), "parameter data")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_bits(u32::from_le_bytes(b.try_into().unwrap())))
            .collect();
        match name.as_str() {
            HEAD_SIGMOID => head = Head::Sigmoid { fm: false },
            HEAD_SIGMOID_FM => head = Head::Sigmoid { fm: true },
            _ => params.push(Parameter {
                tensor: Tensor::new(shape, data).map_err(|e| CheckpointError::Format {
                    offset: start,
                    reason: e.to_string(),
                })?,
                name,
                component,
            }),
        }
    }
    if c.pos != body.len() {
        return Err(CheckpointError::Format {
            offset: c.pos,
            reason: "trailing bytes after last parameter".into(),
        });
    }
    Ok(ModelGraph::from_parameters(params)?.with_head(head))
}

pub fn save_checkpoint(model: &ModelGraph, path: &Path) -> Result<(), CheckpointError> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(model, std::io::BufWriter::new(f))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelGraph, CheckpointError> {
    read_checkpoint(std::fs::File::open(path)?)
}
