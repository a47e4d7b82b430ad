//! Binary checkpoint format.
//!
//! ```text
//! "MFPC"                         4 bytes magic
//! version                        u32 little-endian (currently 1)
//! header length                  u32 little-endian, in bytes
//! header                         UTF-8 JSON: arch, masks, seed, epoch, param_count
//! parameters                     param_count × f64 little-endian
//! ```
//!
//! Parameters are written in declaration order, each tensor row-major:
//! every conv layer's `[out, in, K, K]` weights, then the classifier
//! weights `[classes, features]`, then the classifier bias `[classes]`.
//! Optimizer state is not stored.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MfpError, Result};
use crate::filters::{FilterBank, PruneMask};
use crate::model::{ArchSpec, ModelState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MFPC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    arch: ArchSpec,
    masks: Vec<Vec<bool>>,
    seed: u64,
    epoch: usize,
    param_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelState,
    pub seed: u64,
    pub epoch: usize,
}

fn param_count(arch: &ArchSpec) -> usize {
    let conv: usize = arch
        .convs
        .iter()
        .map(|c| c.out_channels * c.in_channels * c.kernel * c.kernel)
        .sum();
    conv + arch.classes * arch.feature_dim() + arch.classes
}

pub fn encode_checkpoint(model: &ModelState, seed: u64, epoch: usize) -> Result<Vec<u8>> {
    let header = Header {
        arch: model.arch().clone(),
        masks: model.masks().iter().map(|m| m.keep.clone()).collect(),
        seed,
        epoch,
        param_count: param_count(model.arch()),
    };
    let json = serde_json::to_vec(&header)?;
    let header_len = u32::try_from(json.len()).map_err(|_| MfpError::Checkpoint("header exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(12 + json.len() + header.param_count * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    let (cw, cb) = model.classifier();
    let tensors = model.layers().iter().map(|l| l.bank.weights()).chain([cw, cb]);
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(MfpError::Checkpoint(format!(
            "truncated while reading {what}: need {n} bytes, {} left",
            bytes.len()
        )));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn read_u32(bytes: &mut &[u8], what: &str) -> Result<u32> {
    let b = take(bytes, 4, what)?;
    Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut rest = bytes;
    if take(&mut rest, 4, "magic")? != MAGIC {
        return Err(MfpError::Checkpoint("bad magic (expected \"MFPC\")".into()));
    }
    let version = read_u32(&mut rest, "version")?;
    if version != FORMAT_VERSION {
        return Err(MfpError::Checkpoint(format!("unsupported format version {version}")));
    }
    let header_len = read_u32(&mut rest, "header length")? as usize;
    let header: Header = serde_json::from_slice(take(&mut rest, header_len, "header")?)
        .map_err(|e| MfpError::Checkpoint(format!("bad header: {e}")))?;
    header
        .arch
        .validate()
        .map_err(|e| MfpError::Checkpoint(format!("bad architecture: {e}")))?;
    let expected = param_count(&header.arch);
    if header.param_count != expected {
        return Err(MfpError::Checkpoint(format!(
            "header declares {} parameters, architecture needs {expected}",
            header.param_count
        )));
    }
    if rest.len() != expected * 8 {
        return Err(MfpError::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            expected * 8,
            rest.len()
        )));
    }
    let mut values = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut read_tensor = |shape: Vec<usize>| -> Result<Tensor> {
        let n = shape.iter().product();
        Tensor::new(shape, values.by_ref().take(n).collect())
    };
    let arch = header.arch;
    let mut banks = Vec::with_capacity(arch.convs.len());
    for c in &arch.convs {
        banks.push(FilterBank::new(read_tensor(vec![
            c.out_channels,
            c.in_channels,
            c.kernel,
            c.kernel,
        ])?)?);
    }
    let cw = read_tensor(vec![arch.classes, arch.feature_dim()])?;
    let cb = read_tensor(vec![arch.classes])?;
    let masks = header.masks.into_iter().map(|keep| PruneMask { keep }).collect();
    let model = ModelState::from_parts(arch, banks, cw, cb, masks).map_err(|e| MfpError::Checkpoint(e.to_string()))?;
    Ok(Checkpoint {
        model,
        seed: header.seed,
        epoch: header.epoch,
    })
}

pub fn save_checkpoint(path: &Path, model: &ModelState, seed: u64, epoch: usize) -> Result<()> {
    let bytes = encode_checkpoint(model, seed, epoch)?;
    std::fs::write(path, bytes).map_err(|e| MfpError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| MfpError::io(path, e))?;
    decode_checkpoint(&bytes)
}
