//! Binary model checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "TACSPNET"                      8-byte magic
//! version                         u32
//! input_height, input_width       u32, u32
//! conv layer count, then per layer filters, kernel, stride (u32 each)
//! hidden layer count, then widths (u32 each)
//! outputs, binarize               u32, u32
//! per output: mid, half           f64, f64
//! parameter count                 u64
//! parameters                      f32 each
//! SHA-256 of all preceding bytes  32 bytes
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Architecture, ConvSpec, NetError, Normalizer, PoseNet};

pub const MAGIC: &[u8; 8] = b"TACSPNET";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Bound on any stored size, so a hostile header cannot overflow shape math.
const DIM_LIMIT: usize = 4096;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a model checkpoint")]
    Magic,
    #[error("checkpoint version {found} is not supported (expected {CHECKPOINT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

pub fn encode(model: &PoseNet<f32>) -> Vec<u8> {
    let arch = model.architecture();
    let mut out = MAGIC.to_vec();
    let u32s = |out: &mut Vec<u8>, v: usize| out.extend((v as u32).to_le_bytes());
    u32s(&mut out, CHECKPOINT_VERSION as usize);
    u32s(&mut out, arch.input_height);
    u32s(&mut out, arch.input_width);
    u32s(&mut out, arch.conv.len());
    for c in &arch.conv {
        u32s(&mut out, c.filters);
        u32s(&mut out, c.kernel);
        u32s(&mut out, c.stride);
    }
    u32s(&mut out, arch.hidden.len());
    for &h in &arch.hidden {
        u32s(&mut out, h);
    }
    u32s(&mut out, arch.outputs);
    u32s(&mut out, arch.binarize as usize);
    for n in model.normalizers() {
        out.extend(n.mid.to_le_bytes());
        out.extend(n.half.to_le_bytes());
    }
    out.extend((model.parameter_count() as u64).to_le_bytes());
    for p in model.params() {
        out.extend(p.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend(digest);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| CheckpointError::Format("truncated".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Element count guarded against absurd values before allocating.
    fn count(&mut self, limit: usize) -> Result<usize, CheckpointError> {
        let n = self.u32()?;
        if n > limit {
            return Err(CheckpointError::Format(format!("count {n} exceeds {limit}")));
        }
        Ok(n)
    }
}

pub fn decode(bytes: &[u8]) -> Result<PoseNet<f32>, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let mut c = Cursor {
        bytes,
        pos: MAGIC.len(),
    };
    let version = c.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(CheckpointError::Format("truncated".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Checksum);
    }
    c.bytes = body;
    let input_height = c.count(DIM_LIMIT)?;
    let input_width = c.count(DIM_LIMIT)?;
    let n_conv = c.count(64)?;
    let mut conv = Vec::with_capacity(n_conv);
    for _ in 0..n_conv {
        conv.push(ConvSpec {
            filters: c.count(DIM_LIMIT)?,
            kernel: c.count(DIM_LIMIT)?,
            stride: c.count(DIM_LIMIT)?,
        });
    }
    let n_hidden = c.count(64)?;
    let mut hidden = Vec::with_capacity(n_hidden);
    for _ in 0..n_hidden {
        hidden.push(c.count(DIM_LIMIT)?);
    }
    let outputs = c.count(64)?;
    let binarize = match c.u32()? {
        0 => false,
        1 => true,
        v => return Err(CheckpointError::Format(format!("binarize flag {v}"))),
    };
    let arch = Architecture {
        input_height,
        input_width,
        conv,
        hidden,
        outputs,
        binarize,
    };
    let mut norm = Vec::with_capacity(outputs);
    for _ in 0..outputs {
        norm.push(Normalizer {
            mid: c.f64()?,
            half: c.f64()?,
        });
    }
    let count = c.u64()? as usize;
    if count != arch.parameter_count()? {
        return Err(CheckpointError::Format(format!("{count} parameters do not match the architecture")));
    }
    let raw = c.take(count.checked_mul(4).ok_or_else(|| CheckpointError::Format("overflow".into()))?)?;
    let params = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    if c.pos != body.len() {
        return Err(CheckpointError::Format("trailing bytes".into()));
    }
    Ok(PoseNet::from_parts(arch, norm, params)?)
}

pub fn save_checkpoint(model: &PoseNet<f32>, path: &Path) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<PoseNet<f32>, CheckpointError> {
    decode(&std::fs::read(path)?)
}
