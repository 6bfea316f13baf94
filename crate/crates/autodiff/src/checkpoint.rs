//! `HSP1` parameter container.
//!
//! Layout:
//!
//! ```text
//! "HSP1"                      4 bytes
//! manifest length             u64 little-endian
//! manifest                    UTF-8 text, one entry per line
//! payload                     f32 little-endian arrays, back to back
//! ```
//!
//! Manifest lines are either `# key = value` metadata or
//! `name<TAB>d0,d1,...<TAB>byte offset into payload`.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HSP1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: IndexMap<String, String>,
    pub params: ParamStore,
}

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(params: ParamStore) -> Self {
        Self {
            meta: IndexMap::new(),
            params,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = String::new();
        for (k, v) in &self.meta {
            manifest.push_str(&format!("# {k} = {v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in self.params.iter() {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            manifest.push_str(&format!("{name}\t{}\t{offset}\n", dims.join(",")));
            offset += t.numel() * 4;
        }
        let mut out = Vec::with_capacity(12 + manifest.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for (_, t) in self.params.iter() {
            for &x in t.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("missing HSP1 header"));
        }
        let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
        let manifest = bytes
            .get(12..12 + len)
            .ok_or_else(|| bad("truncated manifest"))?;
        let manifest = std::str::from_utf8(manifest).map_err(|_| bad("manifest is not UTF-8"))?;
        let payload = &bytes[12 + len..];

        let mut ckpt = Checkpoint::default();
        for (lineno, line) in manifest.lines().enumerate() {
            if let Some(rest) = line.strip_prefix('#') {
                let (k, v) = rest
                    .split_once('=')
                    .ok_or_else(|| bad(format!("line {}: malformed metadata", lineno + 1)))?;
                ckpt.meta.insert(k.trim().to_string(), v.trim().to_string());
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [name, dims, offset] = fields[..] else {
                return Err(bad(format!("line {}: expected 3 fields", lineno + 1)));
            };
            let shape = if dims.is_empty() {
                Vec::new()
            } else {
                dims.split(',')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad(format!("line {}: bad shape `{dims}`", lineno + 1)))?
            };
            let offset: usize = offset
                .parse()
                .map_err(|_| bad(format!("line {}: bad offset", lineno + 1)))?;
            let n: usize = shape.iter().product();
            let raw = payload
                .get(offset..offset + 4 * n)
                .ok_or_else(|| bad(format!("`{name}` runs past the payload")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            ckpt.params.insert(name, Tensor::new(&shape, data)?);
        }
        Ok(ckpt)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
