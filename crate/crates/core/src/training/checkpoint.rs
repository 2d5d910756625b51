use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::OptimState;
use crate::error::{Error, Result};
use crate::model::{ChannelStats, ModeModel, ModelConfig};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"MODECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    norm_stats: Option<ChannelStats>,
    best_metric: Option<f64>,
}

/// Model weights plus everything needed to rebuild and resume.
///
/// Layout: magic, version, length-prefixed JSON header, parameter blobs
/// (name, shape, little-endian f64 values), optional Adam moments, and a
/// SHA-256 of all preceding bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub norm_stats: Option<ChannelStats>,
    pub params: Vec<(String, Tensor)>,
    pub optim: Option<OptimState>,
    pub best_metric: Option<f64>,
}

fn ck(msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(msg.to_string())
}

fn write_tensor(buf: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    buf.write_u8(t.rank() as u8)?;
    for &d in t.shape() {
        buf.write_u64::<LittleEndian>(d as u64)?;
    }
    for &x in t.data() {
        buf.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_tensor(r: &mut Cursor<&[u8]>) -> Result<Tensor> {
    let rank = r.read_u8()? as usize;
    let shape = (0..rank)
        .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
        .collect::<std::io::Result<Vec<_>>>()?;
    let n = shape.iter().product::<usize>();
    let remaining = r.get_ref().len() as u64 - r.position();
    if (n as u64).saturating_mul(8) > remaining {
        return Err(ck(format!("tensor {shape:?} overruns the file")));
    }
    let mut data = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut data)?;
    Tensor::new(shape, data)
}

impl Checkpoint {
    pub fn from_model(model: &ModeModel, optim: Option<&OptimState>, best_metric: Option<f64>) -> Self {
        Self {
            model: model.config().clone(),
            norm_stats: model.norm_stats.clone(),
            params: model.named_params(),
            optim: optim.cloned(),
            best_metric,
        }
    }

    pub fn to_model(&self) -> Result<ModeModel> {
        let mut m = ModeModel::build_variant(&self.model)?;
        m.load_named(&self.params)?;
        m.norm_stats = self.norm_stats.clone();
        Ok(m)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.write_all(MAGIC)?;
        buf.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        let header = serde_json::to_vec(&Header {
            model: self.model.clone(),
            norm_stats: self.norm_stats.clone(),
            best_metric: self.best_metric,
        })?;
        buf.write_u32::<LittleEndian>(header.len() as u32)?;
        buf.write_all(&header)?;
        buf.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for (name, t) in &self.params {
            buf.write_u16::<LittleEndian>(name.len() as u16)?;
            buf.write_all(name.as_bytes())?;
            write_tensor(&mut buf, t)?;
        }
        match &self.optim {
            Some(o) => {
                buf.write_u8(1)?;
                buf.write_u64::<LittleEndian>(o.step)?;
                for t in o.m.iter().chain(&o.v) {
                    write_tensor(&mut buf, t)?;
                }
            }
            None => buf.write_u8(0)?,
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(ck("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(ck("checksum mismatch"));
        }
        let mut r = Cursor::new(body);
        r.set_position(8);
        let version = r.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(ck(format!("unsupported version {version}")));
        }
        let hlen = r.read_u32::<LittleEndian>()? as usize;
        let mut header = vec![0u8; hlen];
        r.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header)?;
        let n = r.read_u32::<LittleEndian>()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.read_u16::<LittleEndian>()? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(ck)?;
            params.push((name, read_tensor(&mut r)?));
        }
        let optim = match r.read_u8()? {
            0 => None,
            1 => {
                let step = r.read_u64::<LittleEndian>()?;
                let m = (0..n).map(|_| read_tensor(&mut r)).collect::<Result<Vec<_>>>()?;
                let v = (0..n).map(|_| read_tensor(&mut r)).collect::<Result<Vec<_>>>()?;
                Some(OptimState { m, v, step })
            }
            other => return Err(ck(format!("bad optimizer flag {other}"))),
        };
        if r.position() as usize != body.len() {
            return Err(ck("trailing bytes"));
        }
        Ok(Self {
            model: header.model,
            norm_stats: header.norm_stats,
            params,
            optim,
            best_metric: header.best_metric,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
