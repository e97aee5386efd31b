//! Binary checkpoints: `PLAB`, a u32 format version, a length-prefixed JSON
//! header, then tensor records until end of file. Each record is a u32 name
//! length, the UTF-8 name, a u32 rank, u32 extents, and little-endian f32
//! values. Optimizer moments and loss history use reserved name prefixes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::Moments;
use super::stage::TrainState;
use crate::error::{io_err, Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::objectives::LossBreakdown;
use crate::scene::Vocab;

const MAGIC: &[u8; 4] = b"PLAB";
pub const FORMAT_VERSION: u32 = 1;
const MOMENT_M: &str = "adam.m/";
const MOMENT_V: &str = "adam.v/";
const HISTORY: &str = "state.history";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    vocab_fingerprint: u64,
    stage: u8,
    stage_step: u64,
    step: u64,
    seed: u64,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len() as u32);
    for &e in shape {
        put_u32(out, e as u32);
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Serializes a training state. The same state always yields the same bytes.
pub fn to_bytes(state: &TrainState, seed: u64) -> Result<Vec<u8>> {
    let header = Header {
        model: state.params.config().clone(),
        vocab_fingerprint: Vocab::standard().fingerprint(),
        stage: state.stage,
        stage_step: state.stage_step,
        step: state.step,
        seed,
    };
    let text = serde_json::to_string(&header).map_err(|e| bad(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, text.len() as u32);
    out.extend_from_slice(text.as_bytes());
    for p in state.params.params() {
        put_record(&mut out, &p.name, p.tensor.shape(), p.tensor.data());
    }
    for (p, m) in state.params.params().iter().zip(&state.moments) {
        if let Some(m) = m {
            put_record(&mut out, &format!("{MOMENT_M}{}", p.name), p.tensor.shape(), &m.m);
            put_record(&mut out, &format!("{MOMENT_V}{}", p.name), p.tensor.shape(), &m.v);
        }
    }
    if !state.history.is_empty() {
        let flat: Vec<f32> = state.history.iter().flat_map(|l| [l.ntp, l.visual, l.total, l.beta]).collect();
        put_record(&mut out, HISTORY, &[state.history.len(), 4], &flat);
    }
    Ok(out)
}

/// Parses a checkpoint. With `expected` set, any difference in the model
/// configuration is rejected. Returns the state and its stored seed.
pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<(TrainState, u64)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| bad("header is not UTF-8"))?;
    let header: Header = serde_json::from_str(text).map_err(|e| bad(format!("header: {e}")))?;
    if let Some(want) = expected {
        if *want != header.model {
            let a = serde_json::to_value(want).map_err(|e| bad(e.to_string()))?;
            let b = serde_json::to_value(&header.model).map_err(|e| bad(e.to_string()))?;
            let fields: Vec<String> = a
                .as_object()
                .into_iter()
                .flatten()
                .filter(|(k, v)| b.get(k.as_str()) != Some(v))
                .map(|(k, v)| format!("{k} (config {v}, checkpoint {})", b[k.as_str()]))
                .collect();
            return Err(bad(format!("model config mismatch: {}", fields.join(", "))));
        }
    }
    if header.vocab_fingerprint != Vocab::standard().fingerprint() {
        return Err(bad("checkpoint was written with a different vocabulary"));
    }
    let mut params = ModelParams::init(&header.model)?;
    let mut moments: Vec<Option<Moments>> = vec![None; params.len()];
    let mut seen = vec![false; params.len()];
    let mut history = Vec::new();
    while !r.done() {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| bad("record name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<_>>()?;
        let count: usize = shape.iter().product();
        let raw = r.take(count.checked_mul(4).ok_or_else(|| bad("record too large"))?)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
        if name == HISTORY {
            if shape.len() != 2 || shape[1] != 4 {
                return Err(bad(format!("history record has shape {shape:?}")));
            }
            history = data
                .chunks_exact(4)
                .map(|c| LossBreakdown {
                    ntp: c[0],
                    visual: c[1],
                    total: c[2],
                    beta: c[3],
                })
                .collect();
            continue;
        }
        let (base, slot) = if let Some(b) = name.strip_prefix(MOMENT_M) {
            (b, 1)
        } else if let Some(b) = name.strip_prefix(MOMENT_V) {
            (b, 2)
        } else {
            (name.as_str(), 0)
        };
        let i = params.find(base).ok_or_else(|| bad(format!("unknown tensor {name:?}")))?;
        if params.tensor(i).shape() != shape.as_slice() {
            return Err(bad(format!(
                "tensor {name:?} has shape {shape:?}, model expects {:?}",
                params.tensor(i).shape()
            )));
        }
        match slot {
            0 => {
                params.tensor_mut(i).data_mut().copy_from_slice(&data);
                seen[i] = true;
            }
            1 => moments[i].get_or_insert_with(|| Moments::zeros(count)).m = data,
            _ => moments[i].get_or_insert_with(|| Moments::zeros(count)).v = data,
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(bad(format!("tensor {:?} missing", params.params()[i].name)));
    }
    let state = TrainState {
        params,
        moments,
        stage: header.stage,
        stage_step: header.stage_step,
        step: header.step,
        history,
    };
    Ok((state, header.seed))
}

pub fn save(state: &TrainState, seed: u64, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(state, seed)?).map_err(io_err(path))
}

pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<(TrainState, u64)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    from_bytes(&bytes, expected).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}
