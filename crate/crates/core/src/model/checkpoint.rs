//! Binary named-tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VTOL"                        magic, 4 bytes
//! u32 version                   currently 1
//! u32 n, n bytes                config block: UTF-8 key=value lines (may be empty)
//! repeated until end of file:
//!   u32 len, len bytes          tensor name, UTF-8
//!   u32 rank
//!   u64 × rank                  dims
//!   f64 × product(dims)         values, row-major
//! ```
//!
//! Checkpoints carry the model config in the config block and the parameters
//! as tensors. Attention/gradient/relevance interchange files use the same
//! layout with names `attn.b`, `grad.b`, `rel.b`.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::config::ModelConfig;
use super::vit::{Vit, VitParams};
use crate::error::{Error, Result};
use crate::kv;
use crate::tensor::{Tensor, TensorStack};

pub const MAGIC: &[u8; 4] = b"VTOL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn encode(config: &str, tensors: &[(String, &Tensor)]) -> Vec<u8> {
    let values: usize = tensors.iter().map(|(_, t)| t.len()).sum();
    let mut buf = Vec::with_capacity(16 + config.len() + values * 8 + tensors.len() * 64);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(config.as_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!("truncated while reading {what} at byte {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<String> {
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::format(self.path, format!("{what} is not UTF-8")))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<TensorFile> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(path, "bad magic, expected VTOL"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let clen = r.u32("config length")? as usize;
    let config = r.utf8(clen, "config block")?;
    let mut tensors = Vec::new();
    while r.pos < bytes.len() {
        let nlen = r.u32("name length")? as usize;
        let name = r.utf8(nlen, "tensor name")?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(path, format!("{name}: dimensions overflow")))?;
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::format(path, "tensor too large"))?,
            "tensor values",
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format(path, format!("{name}: {e}")))?;
        tensors.push((name, t));
    }
    Ok(TensorFile { config, tensors })
}

pub fn write_file(path: &Path, config: &str, tensors: &[(String, &Tensor)]) -> Result<()> {
    let bytes = encode(config, tensors);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<TensorFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn config_block(cfg: &ModelConfig) -> String {
    kv::render(&cfg.to_pairs())
}

pub fn parse_config_block(text: &str, path: &Path) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::desk();
    for (line, k, v) in kv::parse(text, path)? {
        if !cfg.apply(&k, &v)? {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("unknown config key {k:?}"),
            });
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn encode_checkpoint(vit: &Vit) -> Vec<u8> {
    encode(&config_block(&vit.config), &vit.params.named())
}

pub fn save(vit: &Vit, path: &Path) -> Result<()> {
    write_file(path, &config_block(&vit.config), &vit.params.named())
}

pub fn load(path: &Path) -> Result<Vit> {
    let file = read_file(path)?;
    let cfg = parse_config_block(&file.config, path)?;
    let expected = VitParams::expected_shapes(&cfg);
    if expected.len() != file.tensors.len() {
        return Err(Error::Shape(format!(
            "{}: {} tensors, config needs {}",
            path.display(),
            file.tensors.len(),
            expected.len()
        )));
    }
    let mut params = VitParams::init(&cfg);
    for (((want_name, want_shape), (name, t)), slot) in expected
        .iter()
        .zip(&file.tensors)
        .zip(params.tensors_mut())
    {
        if want_name != name || want_shape.as_slice() != t.shape() {
            return Err(Error::Shape(format!(
                "{}: tensor {name} {:?}, expected {want_name} {want_shape:?}",
                path.display(),
                t.shape()
            )));
        }
        *slot = t.clone();
    }
    Vit::from_parts(cfg, params)
}

/// Attention, gradient and optional relevance stacks for offline rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct StackBundle {
    pub attention: TensorStack,
    pub gradients: TensorStack,
    pub relevances: Option<TensorStack>,
}

pub fn save_stacks(path: &Path, bundle: &StackBundle) -> Result<()> {
    bundle.attention.check_matches(&bundle.gradients)?;
    let mut named = Vec::new();
    for (prefix, stack) in [("attn", Some(&bundle.attention)), ("grad", Some(&bundle.gradients)), ("rel", bundle.relevances.as_ref())] {
        if let Some(stack) = stack {
            for (b, t) in stack.blocks().iter().enumerate() {
                named.push((format!("{prefix}.{b}"), t));
            }
        }
    }
    write_file(path, "", &named)
}

pub fn load_stacks(path: &Path) -> Result<StackBundle> {
    let file = read_file(path)?;
    let mut groups: [Vec<(usize, Tensor)>; 3] = Default::default();
    for (name, t) in file.tensors {
        let (prefix, idx) = name
            .split_once('.')
            .ok_or_else(|| Error::format(path, format!("unexpected tensor name {name:?}")))?;
        let slot = match prefix {
            "attn" => 0,
            "grad" => 1,
            "rel" => 2,
            _ => return Err(Error::format(path, format!("unexpected tensor name {name:?}"))),
        };
        let idx: usize = idx
            .parse()
            .map_err(|_| Error::format(path, format!("bad block index in {name:?}")))?;
        groups[slot].push((idx, t));
    }
    let to_stack = |mut g: Vec<(usize, Tensor)>, what: &str| -> Result<TensorStack> {
        g.sort_by_key(|(i, _)| *i);
        if g.iter().enumerate().any(|(i, (b, _))| i != *b) {
            return Err(Error::format(path, format!("{what} blocks are not 0..K-1")));
        }
        Ok(TensorStack::new(g.into_iter().map(|(_, t)| t).collect()))
    };
    let [attn, grad, rel] = groups;
    if attn.is_empty() || grad.is_empty() {
        return Err(Error::format(path, "missing attn.* or grad.* tensors"));
    }
    let attention = to_stack(attn, "attn")?;
    let gradients = to_stack(grad, "grad")?;
    attention.check_matches(&gradients)?;
    let relevances = if rel.is_empty() {
        None
    } else {
        let r = to_stack(rel, "rel")?;
        attention.check_matches(&r)?;
        Some(r)
    };
    Ok(StackBundle {
        attention,
        gradients,
        relevances,
    })
}
