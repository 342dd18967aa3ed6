//! Checkpoint file.
//!
//! `RFC1`, a u32 LE length and that many bytes of `key = value` model
//! config, then named entries until end of file. Each entry is a u32 LE name
//! length, the UTF-8 name and one portable tensor. Names:
//!
//! * `param/<name>`: network parameters, in registry order
//! * `bn_mean/<name>`, `bn_var/<name>`: batch-norm running statistics
//! * `adam_m/<name>`, `adam_v/<name>`: optimizer moments (optional)
//! * `meta/step`, `meta/epoch`: scalars (optional)

use std::collections::HashMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use rfnet_autodiff::io::{read_tensor, write_tensor};
use rfnet_autodiff::{OptimizerState, RunningStats, Tensor};

use crate::config::{KeyValues, ModelConfig};
use crate::error::{io_err, Error, Result};
use crate::model::NetworkGraph;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RFC1";

/// Optimizer progress stored next to the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step: u64,
    /// Number of completed epochs.
    pub epoch: usize,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn encode(graph: &NetworkGraph, training: Option<&TrainingState>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let cfg = graph.config().to_kv();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let mut entry = |name: &str, t: &Tensor| -> Result<()> {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        write_tensor(&mut out, t)?;
        Ok(())
    };
    for p in graph.params() {
        entry(&format!("param/{}", p.name), &p.value)?;
    }
    for s in graph.stats() {
        let c = s.stats.mean.len();
        entry(&format!("bn_mean/{}", s.name), &Tensor::new(vec![c], s.stats.mean.clone())?)?;
        entry(&format!("bn_var/{}", s.name), &Tensor::new(vec![c], s.stats.var.clone())?)?;
    }
    if let Some(t) = training {
        for (p, (m, v)) in graph.params().iter().zip(t.first_moment.iter().zip(&t.second_moment)) {
            entry(&format!("adam_m/{}", p.name), m)?;
            entry(&format!("adam_v/{}", p.name), v)?;
        }
        entry("meta/step", &Tensor::scalar(t.step as f64))?;
        entry("meta/epoch", &Tensor::scalar(t.epoch as f64))?;
    }
    Ok(out)
}

pub fn save(path: &Path, graph: &NetworkGraph, training: Option<&TrainingState>) -> Result<()> {
    fs::write(path, encode(graph, training)?).map_err(io_err(path))
}

fn read_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| fmt_err("truncated checkpoint"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_string(r: &mut Cursor<&[u8]>, len: usize) -> Result<String> {
    let remaining = r.get_ref().len() - r.position() as usize;
    if len > remaining {
        return Err(fmt_err("truncated checkpoint"));
    }
    let mut b = vec![0u8; len];
    r.read_exact(&mut b).map_err(|_| fmt_err("truncated checkpoint"))?;
    String::from_utf8(b).map_err(|_| fmt_err("checkpoint string is not UTF-8"))
}

fn take(entries: &mut HashMap<String, Tensor>, key: String, dims: &[usize]) -> Result<Tensor> {
    let t = entries
        .remove(&key)
        .ok_or_else(|| fmt_err(format!("missing entry {key}")))?;
    if t.dims() != dims {
        return Err(fmt_err(format!("{key}: dims {:?}, expected {dims:?}", t.dims())));
    }
    Ok(t)
}

/// Rebuilds the network (and optimizer state, if stored) from bytes.
pub fn decode(bytes: &[u8]) -> Result<(NetworkGraph, Option<TrainingState>)> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(fmt_err("not a checkpoint (bad magic)"));
    }
    let mut r = Cursor::new(bytes);
    r.set_position(4);
    let cfg_len = read_u32(&mut r)? as usize;
    let cfg = ModelConfig::from_kv(&KeyValues::parse(&read_string(&mut r, cfg_len)?)?)?;
    let mut entries: HashMap<String, Tensor> = HashMap::new();
    while (r.position() as usize) < bytes.len() {
        let n = read_u32(&mut r)? as usize;
        let name = read_string(&mut r, n)?;
        let t = read_tensor(&mut r).map_err(|e| fmt_err(format!("entry {name}: {e}")))?;
        if entries.insert(name.clone(), t).is_some() {
            return Err(fmt_err(format!("duplicate entry {name}")));
        }
    }

    let mut graph = NetworkGraph::build(&cfg, 0)?;
    for p in graph.params_mut() {
        let dims = p.value.dims().to_vec();
        p.value = take(&mut entries, format!("param/{}", p.name), &dims)?;
    }
    for s in graph.stats_mut() {
        let c = s.stats.mean.len();
        s.stats = RunningStats {
            mean: take(&mut entries, format!("bn_mean/{}", s.name), &[c])?.into_data(),
            var: take(&mut entries, format!("bn_var/{}", s.name), &[c])?.into_data(),
        };
    }
    let training = if entries.contains_key("meta/step") {
        let mut first = Vec::new();
        let mut second = Vec::new();
        for p in graph.params() {
            first.push(take(&mut entries, format!("adam_m/{}", p.name), p.value.dims())?);
            second.push(take(&mut entries, format!("adam_v/{}", p.name), p.value.dims())?);
        }
        let step = take(&mut entries, "meta/step".into(), &[1])?.item();
        let epoch = take(&mut entries, "meta/epoch".into(), &[1])?.item();
        Some(TrainingState {
            first_moment: first,
            second_moment: second,
            step: step as u64,
            epoch: epoch as usize,
        })
    } else {
        None
    };
    if let Some(extra) = entries.keys().next() {
        return Err(fmt_err(format!("unexpected entry {extra}")));
    }
    Ok((graph, training))
}

pub fn load(path: &Path) -> Result<(NetworkGraph, Option<TrainingState>)> {
    decode(&fs::read(path).map_err(io_err(path))?)
}

impl TrainingState {
    pub fn from_optimizer(state: &OptimizerState, epoch: usize) -> Self {
        Self {
            first_moment: state.first_moment.clone(),
            second_moment: state.second_moment.clone(),
            step: state.step,
            epoch,
        }
    }
}
