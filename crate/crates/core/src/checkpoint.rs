//! Single-file checkpoint container.
//!
//! Layout: a UTF-8 header of newline-terminated lines
//!
//! ```text
//! EQUIPRUNE-CHECKPOINT 1
//! config {...json...}
//! dtype f64
//! tensor <name> <rows> <cols> <byte offset>
//! ...
//! end
//! ```
//!
//! followed by the little-endian tensor payload (row-major, in header order)
//! and the 32-byte SHA-256 digest of everything before it.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::model::{tensor_specs, ModelConfig, ModelParams};
use crate::tape::Mat;
use crate::{Error, Result};

const MAGIC: &str = "EQUIPRUNE-CHECKPOINT";
const VERSION: u32 = 1;

/// Payload element type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Dtype::F64 => "f64",
            Dtype::F32 => "f32",
        }
    }
}

/// Serialises `params` with FP64 payload.
pub fn to_bytes(params: &ModelParams) -> Result<Vec<u8>> {
    to_bytes_as(params, Dtype::F64)
}

/// Serialises `params`; an FP32 payload rounds every weight.
pub fn to_bytes_as(params: &ModelParams, dtype: Dtype) -> Result<Vec<u8>> {
    params.validate()?;
    let config = serde_json::to_string(&params.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut header = format!("{MAGIC} {VERSION}\nconfig {config}\ndtype {}\n", dtype.name());
    let mut offset = 0usize;
    for (name, m) in &params.tensors {
        let _ = writeln!(header, "tensor {name} {} {} {offset}", m.rows, m.cols);
        offset += m.data.len() * dtype.size();
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    out.reserve(offset + 32);
    for m in params.tensors.values() {
        for &v in &m.data {
            match dtype {
                Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
                Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Parses and validates a checkpoint.
pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < 32 {
        return Err(bad("file too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch".into()));
    }
    let end = find_header_end(body).ok_or_else(|| bad("header has no end line".into()))?;
    let header = std::str::from_utf8(&body[..end]).map_err(|_| bad("header is not UTF-8".into()))?;
    let payload = &body[end..];
    let mut lines = header.lines();
    match lines.next().and_then(|l| l.split_once(' ')) {
        Some((MAGIC, v)) if v == VERSION.to_string() => {}
        Some((MAGIC, v)) => return Err(bad(format!("unsupported version {v}"))),
        _ => return Err(bad("not a checkpoint file".into())),
    }
    let mut config: Option<ModelConfig> = None;
    let mut dtype = None;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        match key {
            "config" => {
                config = Some(serde_json::from_str(rest).map_err(|e| bad(format!("line {line_no}: {e}")))?);
            }
            "dtype" => {
                dtype = Some(match rest {
                    "f64" => Dtype::F64,
                    "f32" => Dtype::F32,
                    d => return Err(bad(format!("line {line_no}: unknown dtype {d}"))),
                })
            }
            "tensor" => {
                let f: Vec<&str> = rest.split(' ').collect();
                let parse = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("line {line_no}: {e}")));
                if f.len() != 4 {
                    return Err(bad(format!("line {line_no}: malformed tensor record")));
                }
                records.push((f[0].to_string(), parse(f[1])?, parse(f[2])?, parse(f[3])?));
            }
            "end" => {}
            _ => return Err(bad(format!("line {line_no}: unknown header key {key:?}"))),
        }
    }
    let config = config.ok_or_else(|| bad("missing config".into()))?;
    let dtype = dtype.ok_or_else(|| bad("missing dtype".into()))?;
    let specs = tensor_specs(&config);
    let mut params = ModelParams { config, tensors: Default::default() };
    let mut expected_offset = 0;
    for (name, rows, cols, offset) in records {
        let spec = specs.get(&name).ok_or_else(|| bad(format!("unexpected tensor {name}")))?;
        if (spec.rows, spec.cols) != (rows, cols) {
            return Err(bad(format!("tensor {name} is {rows}x{cols}, config needs {}x{}", spec.rows, spec.cols)));
        }
        if offset != expected_offset {
            return Err(bad(format!("tensor {name} has offset {offset}, expected {expected_offset}")));
        }
        let n = rows * cols;
        let raw = payload
            .get(offset..offset + n * dtype.size())
            .ok_or_else(|| bad(format!("payload truncated in {name}")))?;
        let data = match dtype {
            Dtype::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            Dtype::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        };
        expected_offset += n * dtype.size();
        if params.tensors.insert(name.clone(), Mat::from_vec(rows, cols, data)).is_some() {
            return Err(bad(format!("duplicate tensor {name}")));
        }
    }
    if expected_offset != payload.len() {
        return Err(bad(format!("payload has {} trailing bytes", payload.len() - expected_offset)));
    }
    params.validate().map_err(|e| bad(e.to_string()))?;
    Ok(params)
}

fn find_header_end(body: &[u8]) -> Option<usize> {
    const END: &[u8] = b"\nend\n";
    body.windows(END.len()).position(|w| w == END).map(|p| p + END.len())
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(params)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelParams> {
    from_bytes(&std::fs::read(path)?)
}

/// Hex SHA-256 of the canonical FP64 serialisation.
pub fn digest(params: &ModelParams) -> Result<String> {
    let bytes = to_bytes(params)?;
    Ok(bytes[bytes.len() - 32..].iter().map(|b| format!("{b:02x}")).collect())
}
