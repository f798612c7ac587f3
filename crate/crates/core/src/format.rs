//! Binary container shared by float weights files and quantized model files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "VEINW" | version u32 | scheme u8 | config (5 × u32)
//! tensor_count u32
//!   name_len u32 | name utf-8 | dtype u8 | rank u8 | dims (rank × u32)
//!   [scale f32 | zero_point i32]   -- INT8 only
//!   payload (element_count × dtype size)
//! calib_count u32
//!   name_len u32 | name utf-8 | min f32 | max f32
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::model::UNetConfig;

pub const MAGIC: &[u8; 5] = b"VEINW";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
    I8 = 2,
    F16 = 3,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::I8 => 1,
            Dtype::F16 => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Dtype::F32,
            1 => Dtype::F64,
            2 => Dtype::I8,
            3 => Dtype::F16,
            _ => return None,
        })
    }
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("not a weights file (bad magic)")]
    NotWeightsFile,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unexpected end of file while reading {0}")]
    UnexpectedEof(String),
    #[error("unknown dtype tag {tag} for tensor {name}")]
    UnknownDtype { name: String, tag: u8 },
    #[error("invalid utf-8 in {0}")]
    InvalidName(String),
    #[error("trailing bytes after calibration table")]
    TrailingBytes,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Scale and zero point, present for INT8 payloads.
    pub quant: Option<(f32, i32)>,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibEntry {
    pub name: String,
    pub min: f32,
    pub max: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub version: u32,
    pub scheme: u8,
    pub config: UNetConfig,
    pub tensors: Vec<TensorRecord>,
    pub calibration: Vec<CalibEntry>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
}

impl Container {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, self.version);
        out.push(self.scheme);
        let c = &self.config;
        for v in [
            c.input_size,
            c.depth,
            c.base_channels,
            c.regression_hidden,
            c.regression_dim,
        ] {
            put_u32(&mut out, v as u32);
        }
        put_u32(&mut out, self.tensors.len() as u32);
        for t in &self.tensors {
            put_name(&mut out, &t.name);
            out.push(t.dtype as u8);
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                put_u32(&mut out, d as u32);
            }
            if t.dtype == Dtype::I8 {
                let (scale, zp) = t.quant.unwrap_or((1.0, 0));
                out.extend_from_slice(&scale.to_le_bytes());
                out.extend_from_slice(&zp.to_le_bytes());
            }
            out.extend_from_slice(&t.payload);
        }
        put_u32(&mut out, self.calibration.len() as u32);
        for e in &self.calibration {
            put_name(&mut out, &e.name);
            out.extend_from_slice(&e.min.to_le_bytes());
            out.extend_from_slice(&e.max.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(FormatError::NotWeightsFile);
        }
        let mut r = Reader {
            buf: bytes,
            pos: MAGIC.len(),
        };
        let version = r.u32("header")?;
        if version != FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let scheme = r.u8("header")?;
        let mut cfg = [0usize; 5];
        for slot in &mut cfg {
            *slot = r.u32("config block")? as usize;
        }
        let config = UNetConfig {
            input_size: cfg[0],
            depth: cfg[1],
            base_channels: cfg[2],
            regression_hidden: cfg[3],
            regression_dim: cfg[4],
        };
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::with_capacity(count.min(4096) as usize);
        for i in 0..count {
            let name = r.name(&format!("tensor #{i} name"))?;
            let tag = r.u8(&name)?;
            let dtype = Dtype::from_tag(tag).ok_or_else(|| FormatError::UnknownDtype {
                name: name.clone(),
                tag,
            })?;
            let rank = r.u8(&name)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32(&name)? as usize);
            }
            let quant = if dtype == Dtype::I8 {
                let scale = f32::from_le_bytes(r.take(4, &name)?.try_into().unwrap());
                let zp = i32::from_le_bytes(r.take(4, &name)?.try_into().unwrap());
                Some((scale, zp))
            } else {
                None
            };
            let n: usize = shape.iter().product();
            let payload = r.take(n * dtype.size(), &format!("tensor {name}"))?.to_vec();
            tensors.push(TensorRecord {
                name,
                dtype,
                shape,
                quant,
                payload,
            });
        }
        let ncal = r.u32("calibration table")?;
        let mut calibration = Vec::with_capacity(ncal.min(4096) as usize);
        for _ in 0..ncal {
            let name = r.name("calibration entry")?;
            let min = f32::from_le_bytes(r.take(4, &name)?.try_into().unwrap());
            let max = f32::from_le_bytes(r.take(4, &name)?.try_into().unwrap());
            calibration.push(CalibEntry { name, min, max });
        }
        if r.pos != bytes.len() {
            return Err(FormatError::TrailingBytes);
        }
        Ok(Self {
            version,
            scheme,
            config,
            tensors,
            calibration,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, ctx: &str) -> Result<&'a [u8], FormatError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| FormatError::UnexpectedEof(ctx.to_string()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, ctx: &str) -> Result<u8, FormatError> {
        Ok(self.take(1, ctx)?[0])
    }

    fn u32(&mut self, ctx: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, ctx)?.try_into().unwrap()))
    }

    fn name(&mut self, ctx: &str) -> Result<String, FormatError> {
        let len = self.u32(ctx)? as usize;
        let raw = self.take(len, ctx)?;
        String::from_utf8(raw.to_vec()).map_err(|_| FormatError::InvalidName(ctx.to_string()))
    }
}

/// Writes `bytes` to a temporary sibling of `path` and renames it into
/// place, so a failed write never leaves a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = dir.join(format!(".{file_name}.tmp-{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}
