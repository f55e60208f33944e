//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `I8FT`, version `u32`, tensor count `u32`,
//! then per tensor `name_len u32, name bytes, rank u32, dims u32 x rank,
//! f32 payload`; then clip-state count `u32` and per state
//! `layer u32, clip f64, last_dc f64, last_update u64, period u64`, where
//! `last_update == u64::MAX` encodes "never".

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::clip::ClipState;
use crate::error::{Error, Result};
use crate::nn::{LayerQuant, Model};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"I8FT";
pub const VERSION: u32 = 1;

const WEIGHT_CLIPS: &str = "quant.weight_clip";
const ACT_CLIPS: &str = "quant.act_clip";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipRecord {
    pub layer: u32,
    pub clip: f64,
    pub last_dc: f64,
    pub last_update: Option<u64>,
    pub period: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub clips: Vec<ClipRecord>,
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn get<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(b)
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(get(r)?))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(get(r)?))
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} does not fit in u32")))
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&MAGIC)?;
        put_u32(w, VERSION)?;
        put_u32(w, len_u32(self.tensors.len(), "tensor count")?)?;
        for (name, t) in &self.tensors {
            put_u32(w, len_u32(name.len(), "name length")?)?;
            w.write_all(name.as_bytes())?;
            put_u32(w, len_u32(t.dims().len(), "rank")?)?;
            for &d in t.dims() {
                put_u32(w, len_u32(d, "extent")?)?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        put_u32(w, len_u32(self.clips.len(), "clip count")?)?;
        for c in &self.clips {
            put_u32(w, c.layer)?;
            w.write_all(&c.clip.to_le_bytes())?;
            w.write_all(&c.last_dc.to_le_bytes())?;
            put_u64(w, c.last_update.unwrap_or(u64::MAX))?;
            put_u64(w, c.period)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        if get::<4>(r)? != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = get_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let n = get_u32(r)?;
        let mut tensors = Vec::new();
        for _ in 0..n {
            let len = get_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|e| Error::Format(format!("truncated name: {e}")))?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = get_u32(r)? as usize;
            let dims = (0..rank).map(|_| get_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
            let mut bytes = vec![0u8; numel * 4];
            r.read_exact(&mut bytes).map_err(|e| Error::Format(format!("truncated payload of {name}: {e}")))?;
            let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            tensors.push((name, Tensor::from_vec(&dims, data)?));
        }
        let m = get_u32(r)?;
        let mut clips = Vec::new();
        for _ in 0..m {
            let layer = get_u32(r)?;
            let clip = f64::from_le_bytes(get(r)?);
            let last_dc = f64::from_le_bytes(get(r)?);
            let it = get_u64(r)?;
            let period = get_u64(r)?;
            clips.push(ClipRecord { layer, clip, last_dc, last_update: (it != u64::MAX).then_some(it), period });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint { tensors, clips })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        Ok(w.flush()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// Model state plus every layer's quantization state.
    pub fn capture(model: &Model, states: &[LayerQuant]) -> Self {
        let mut tensors = model.state_tensors();
        if !states.is_empty() {
            let l = states.len();
            let wc = states.iter().map(|s| s.weight_clip).collect();
            let ac = states.iter().map(|s| s.act_clip).collect();
            tensors.push((WEIGHT_CLIPS.into(), Tensor::from_vec(&[l], wc).expect("nonempty")));
            tensors.push((ACT_CLIPS.into(), Tensor::from_vec(&[l], ac).expect("nonempty")));
        }
        let clips = states
            .iter()
            .map(|s| ClipRecord {
                layer: s.grad.layer as u32,
                clip: s.grad.clip as f64,
                last_dc: s.grad.last_dc,
                last_update: s.grad.last_update,
                period: s.grad.period,
            })
            .collect();
        Checkpoint { tensors, clips }
    }

    /// Restores what [`Checkpoint::capture`] stored into a model of the same
    /// architecture. Search counters restart at zero.
    pub fn restore(&self, model: &mut Model) -> Result<Vec<LayerQuant>> {
        let n_model = model.state_tensors().len();
        if self.tensors.len() < n_model {
            return Err(Error::Format("checkpoint holds fewer tensors than the model".into()));
        }
        model.load_state_tensors(&self.tensors[..n_model])?;
        let extra = &self.tensors[n_model..];
        let find = |name: &str| extra.iter().find(|(n, _)| n == name).map(|(_, t)| t.data().to_vec());
        let (wc, ac) = (find(WEIGHT_CLIPS).unwrap_or_default(), find(ACT_CLIPS).unwrap_or_default());
        if self.clips.len() != wc.len() || wc.len() != ac.len() {
            return Err(Error::Format("inconsistent quantization state records".into()));
        }
        Ok(self
            .clips
            .iter()
            .zip(wc.iter().zip(&ac))
            .map(|(c, (&w, &a))| {
                let mut grad = ClipState::new(c.layer as usize, c.period);
                grad.clip = c.clip as f32;
                grad.last_dc = c.last_dc;
                grad.last_update = c.last_update;
                LayerQuant { weight_clip: w, act_clip: a, grad }
            })
            .collect())
    }
}
