//! Versioned binary artifacts with JSON headers.
//!
//! Layout: 4-byte magic, u32 format version, u64 header length, the JSON
//! header, then the raw little-endian payload. Headers carry the hashes
//! that decide cache validity; payload layouts are fixed per artifact.

use std::io::{Read, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::dp::{Policy, ValueTable, TIE_BREAK};
use crate::error::{Error, Result};
use crate::kernel::{SamplePath, TransitionModel};
use crate::tightening::TighteningParams;

pub const FORMAT_VERSION: u32 = 1;
pub const MAGIC_VALUE: &[u8; 4] = b"RAVT";
pub const MAGIC_KERNEL: &[u8; 4] = b"RAKC";

fn write_artifact(
    path: &Path,
    magic: &[u8; 4],
    header: &impl Serialize,
    payload: &[u8],
) -> Result<()> {
    let header_bytes = serde_json::to_vec(header)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(magic)?;
    f.write_all(&FORMAT_VERSION.to_le_bytes())?;
    f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    f.write_all(payload)?;
    Ok(())
}

fn read_artifact<H: DeserializeOwned>(path: &Path, magic: &[u8; 4]) -> Result<(H, Vec<u8>)> {
    let mut f = std::fs::File::open(path)?;
    let mut got_magic = [0u8; 4];
    f.read_exact(&mut got_magic)?;
    if &got_magic != magic {
        return Err(Error::CacheMismatch(format!(
            "bad magic in {}",
            path.display()
        )));
    }
    let mut word = [0u8; 4];
    f.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(Error::CacheMismatch(format!(
            "format version {version} != {FORMAT_VERSION}"
        )));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)?;
    let header = serde_json::from_slice(&header_bytes)?;
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;
    Ok((header, payload))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CacheMismatch("truncated payload".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ValueHeader {
    pub grid_hash: String,
    pub model_hash: String,
    pub n_stages: usize,
    pub num_safe: usize,
    pub kappa: Option<f64>,
    pub software_version: String,
}

pub fn save_value_policy(
    path: &Path,
    header: &ValueHeader,
    value: &ValueTable,
    policy: &Policy,
) -> Result<()> {
    let mut payload = Vec::new();
    payload.extend_from_slice(&(value.stages.len() as u64).to_le_bytes());
    payload.extend_from_slice(&(header.num_safe as u64).to_le_bytes());
    for stage in &value.stages {
        if stage.len() != header.num_safe {
            return Err(Error::invalid("value table width mismatch"));
        }
        for v in stage {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    payload.extend_from_slice(&(policy.stages.len() as u64).to_le_bytes());
    for stage in &policy.stages {
        for a in stage {
            payload.extend_from_slice(&a.to_le_bytes());
        }
    }
    write_artifact(path, MAGIC_VALUE, header, &payload)
}

pub fn load_value_policy(path: &Path) -> Result<(ValueHeader, ValueTable, Policy)> {
    let (header, payload): (ValueHeader, Vec<u8>) = read_artifact(path, MAGIC_VALUE)?;
    let mut c = Cursor::new(&payload);
    let n_value_stages = c.u64()? as usize;
    let width = c.u64()? as usize;
    if width != header.num_safe {
        return Err(Error::CacheMismatch("value width vs header".into()));
    }
    let mut stages = Vec::with_capacity(n_value_stages);
    for _ in 0..n_value_stages {
        let mut s = Vec::with_capacity(width);
        for _ in 0..width {
            s.push(c.f64()?);
        }
        stages.push(s);
    }
    let n_policy_stages = c.u64()? as usize;
    let mut pstages = Vec::with_capacity(n_policy_stages);
    for _ in 0..n_policy_stages {
        let mut s = Vec::with_capacity(width);
        for _ in 0..width {
            s.push(c.u32()?);
        }
        pstages.push(s);
    }
    if !c.done() {
        return Err(Error::CacheMismatch("trailing bytes in value artifact".into()));
    }
    Ok((
        header,
        ValueTable { stages },
        Policy {
            stages: pstages,
            tie_break: TIE_BREAK,
        },
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct KernelHeader {
    pub grid_hash: String,
    pub scenario_hash: String,
    pub seed: u64,
    pub samples_per_action: usize,
    pub num_actions: usize,
    pub n_s: usize,
    pub sim_step: f64,
    pub tightening: TighteningParams,
    pub software_version: String,
}

/// Persists a translation-invariant kernel (the only mode worth caching:
/// per-state models are grid-bound and regenerate with the rows anyway).
pub fn save_kernel(path: &Path, header: &KernelHeader, model: &TransitionModel) -> Result<()> {
    let samples = model.ti_samples();
    if samples.is_empty() {
        return Err(Error::invalid("only translation-invariant kernels persist"));
    }
    let mut payload = Vec::new();
    payload.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    payload.extend_from_slice(&(model.samples_per_action as u64).to_le_bytes());
    for per_action in samples {
        for path_rec in per_action {
            payload.push(u8::from(path_rec.infeasible));
            payload.extend_from_slice(&(path_rec.pts.len() as u64).to_le_bytes());
            for v in &path_rec.pts {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    write_artifact(path, MAGIC_KERNEL, header, &payload)
}

pub fn load_kernel(path: &Path) -> Result<(KernelHeader, TransitionModel)> {
    let (header, payload): (KernelHeader, Vec<u8>) = read_artifact(path, MAGIC_KERNEL)?;
    let mut c = Cursor::new(&payload);
    let num_actions = c.u64()? as usize;
    let k = c.u64()? as usize;
    if num_actions != header.num_actions || k != header.samples_per_action {
        return Err(Error::CacheMismatch("kernel counts vs header".into()));
    }
    let mut ti = Vec::with_capacity(num_actions);
    for _ in 0..num_actions {
        let mut per_action = Vec::with_capacity(k);
        for _ in 0..k {
            let infeasible = c.u8()? != 0;
            let len = c.u64()? as usize;
            let mut pts = Vec::with_capacity(len);
            for _ in 0..len {
                pts.push(c.f64()?);
            }
            per_action.push(SamplePath { pts, infeasible });
        }
        ti.push(per_action);
    }
    if !c.done() {
        return Err(Error::CacheMismatch("trailing bytes in kernel artifact".into()));
    }
    let model = TransitionModel::from_ti_parts(header.n_s, k, header.seed, header.sim_step, ti);
    Ok((header, model))
}
