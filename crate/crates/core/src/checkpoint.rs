//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LSAC"  u16 version  u16 layer_count
//! per layer: u8 tag, hyperparameters, parameter blobs
//!   0 Linear     u32 out_features             weight, bias
//!   1 Conv2D     u32 out_channels, kh, kw     weight, bias
//!   2 ReLU
//!   3 ELU        u64 alpha (f64 bits)
//!   4 MaxPool2D  u32 kh, kw
//!   5 Flatten
//! blob: u8 rank, u32 dims[rank], f64 values
//! ```
//!
//! The input shape is not stored; callers supply it when loading. A plain
//! text sidecar (`<file>.meta`) records the model tag, seed, epoch, config
//! hash and parameter digest.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{LayerKind, LayerSpec, Model};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LSAC";
pub const VERSION: u16 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    out.push(t.rank() as u8);
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Serializes the layer stack of `model`.
pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let n = u16::try_from(model.layers().len()).map_err(|_| Error::Checkpoint("too many layers".into()))?;
    out.extend_from_slice(&n.to_le_bytes());
    for spec in model.layers() {
        match spec.kind {
            LayerKind::Linear { out_features } => {
                out.push(0);
                put_u32(&mut out, out_features)?;
            }
            LayerKind::Conv2d { out_channels, kh, kw } => {
                out.push(1);
                for v in [out_channels, kh, kw] {
                    put_u32(&mut out, v)?;
                }
            }
            LayerKind::Relu => out.push(2),
            LayerKind::Elu { alpha } => {
                out.push(3);
                out.extend_from_slice(&alpha.to_bits().to_le_bytes());
            }
            LayerKind::MaxPool2d { kh, kw } => {
                out.push(4);
                put_u32(&mut out, kh)?;
                put_u32(&mut out, kw)?;
            }
            LayerKind::Flatten => out.push(5),
        }
        if spec.kind.is_learnable() {
            put_tensor(&mut out, spec.weight.as_ref().expect("learnable layer has weights"))?;
            put_tensor(&mut out, spec.bias.as_ref().expect("learnable layer has a bias"))?;
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated: needed {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u8()? as usize;
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len.ok_or_else(|| Error::Checkpoint(format!("tensor shape {shape:?} overflows")))?;
        let raw = self.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

/// Parses the layer stack without checking that shapes chain.
pub fn decode_layers(bytes: &[u8]) -> Result<Vec<LayerSpec>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a model checkpoint".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let n = r.u16()? as usize;
    let mut layers = Vec::with_capacity(n);
    for position in 0..n {
        let kind = match r.u8()? {
            0 => LayerKind::Linear { out_features: r.u32()? },
            1 => LayerKind::Conv2d { out_channels: r.u32()?, kh: r.u32()?, kw: r.u32()? },
            2 => LayerKind::Relu,
            3 => LayerKind::Elu { alpha: f64::from_bits(r.u64()?) },
            4 => LayerKind::MaxPool2d { kh: r.u32()?, kw: r.u32()? },
            5 => LayerKind::Flatten,
            t => return Err(Error::Checkpoint(format!("unknown layer tag {t} at position {position}"))),
        };
        layers.push(if kind.is_learnable() {
            let w = r.tensor()?;
            let b = r.tensor()?;
            LayerSpec::with_params(kind, w, b)
        } else {
            LayerSpec::new(kind)
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(layers)
}

/// Input width of a checkpoint whose first learnable layer is Linear.
pub fn flat_input_features(layers: &[LayerSpec]) -> Option<usize> {
    let first = layers.iter().find(|l| l.kind.is_learnable())?;
    match first.kind {
        LayerKind::Linear { .. } => first.weight.as_ref().map(|w| w.shape()[1]),
        _ => None,
    }
}

/// Rebuilds a model from checkpoint bytes for inputs of `input_shape`.
/// Layer shapes that do not chain from that input are an architecture
/// mismatch.
pub fn decode(bytes: &[u8], input_shape: &[usize]) -> Result<Model> {
    let layers = decode_layers(bytes)?;
    Model::from_layers(input_shape.to_vec(), layers).map_err(|e| Error::ArchitectureMismatch(e.to_string()))
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, input_shape: &[usize]) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, input_shape)
}

/// Loads a checkpoint and checks its layer kinds against `expected`.
pub fn load_expecting(path: &Path, input_shape: &[usize], expected: &[LayerKind]) -> Result<Model> {
    let model = load(path, input_shape)?;
    let kinds: Vec<LayerKind> = model.layers().iter().map(|l| l.kind).collect();
    if kinds != expected {
        return Err(Error::ArchitectureMismatch(format!(
            "{} holds [{}], config expects [{}]",
            path.display(),
            kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join(", "),
            expected.iter().map(|k| k.name()).collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(model)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of the encoded parameters.
pub fn param_digest(model: &Model) -> Result<String> {
    Ok(sha256_hex(&encode(model)?))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sidecar {
    pub model_tag: String,
    pub seed: u64,
    pub epoch: usize,
    pub config_hash: String,
    pub param_digest: String,
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

impl Sidecar {
    pub fn to_text(&self) -> String {
        format!(
            "format_version={VERSION}\nmodel_tag={}\nseed={}\nepoch={}\nconfig_hash={}\nparam_digest={}\n",
            self.model_tag,
            self.seed, self.epoch, self.config_hash, self.param_digest
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let get = |key: &str| {
            text.lines()
                .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .map(str::trim)
                .ok_or_else(|| Error::Checkpoint(format!("sidecar lacks `{key}`")))
        };
        let num = |key: &str| -> Result<u64> {
            get(key)?.parse().map_err(|_| Error::Checkpoint(format!("sidecar `{key}` is not an integer")))
        };
        Ok(Sidecar {
            model_tag: get("model_tag")?.to_string(),
            seed: num("seed")?,
            epoch: num("epoch")? as usize,
            config_hash: get("config_hash")?.to_string(),
            param_digest: get("param_digest")?.to_string(),
        })
    }

    pub fn write(&self, checkpoint: &Path) -> Result<()> {
        let p = sidecar_path(checkpoint);
        fs::write(&p, self.to_text()).map_err(|e| Error::io(&p, e))
    }

    pub fn read(checkpoint: &Path) -> Result<Self> {
        let p = sidecar_path(checkpoint);
        Self::parse(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)
    }
}
