//! Binary checkpoint format.
//!
//! ```text
//! MASSCKPT1\n
//! key=value\n            model config, then free-form metadata
//! ...
//! params <count>\n
//! <name> <rank> <dim>...\n  followed by product(dims) little-endian f64
//! ...
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Metadata, ModelConfig, Transformer};
use crate::tensor::Tensor;

pub const MAGIC: &str = "MASSCKPT1";

pub fn to_bytes(model: &Transformer, metadata: &Metadata) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC.as_bytes());
    out.push(b'\n');
    let config = model.config().to_pairs();
    for (k, v) in config
        .iter()
        .map(|(k, v)| (k.as_str(), v.as_str()))
        .chain(metadata.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    {
        if k.is_empty() || k.contains(['=', '\n', ' ']) || v.contains('\n') {
            return Err(Error::format(
                "checkpoint",
                format!("unwritable metadata entry {k:?}={v:?}"),
            ));
        }
        out.extend_from_slice(format!("{k}={v}\n").as_bytes());
    }
    let params = model.params();
    out.extend_from_slice(format!("params {}\n", params.len()).as_bytes());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        let dims: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
        out.extend_from_slice(format!("{name} {} {}\n", dims.len(), dims.join(" ")).as_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format("checkpoint", "unexpected end of header"))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::format("checkpoint", "header line is not UTF-8"))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n * 8;
        if self.pos + len > self.bytes.len() {
            return Err(Error::format("checkpoint", "truncated parameter blob"));
        }
        let data = self.bytes[self.pos..self.pos + len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        self.pos += len;
        Ok(data)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Transformer, Metadata)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.line()? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let mut config = ModelConfig::default();
    let mut metadata = Metadata::new();
    let count = loop {
        let line = r.line()?;
        if let Some(n) = line.strip_prefix("params ") {
            break n
                .parse::<usize>()
                .map_err(|_| Error::format("checkpoint", format!("bad count {n:?}")))?;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format("checkpoint", format!("bad header line {line:?}")))?;
        if !config.set(k, v)? {
            metadata.insert(k.to_string(), v.to_string());
        }
    };
    let mut stored = Vec::with_capacity(count);
    for _ in 0..count {
        let header = r.line()?;
        let mut parts = header.split(' ');
        let name = parts.next().unwrap_or_default().to_string();
        let dims: Vec<usize> = parts
            .map(|p| p.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format("checkpoint", format!("bad blob header {header:?}")))?;
        let (rank, shape) = dims
            .split_first()
            .ok_or_else(|| Error::format("checkpoint", format!("bad blob header {header:?}")))?;
        if *rank != shape.len() {
            return Err(Error::format(
                "checkpoint",
                format!("rank mismatch in {header:?}"),
            ));
        }
        let data = r.floats(shape.iter().product())?;
        stored.push((name, Tensor::new(shape.to_vec(), data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::format("checkpoint", "trailing bytes after last blob"));
    }
    Ok((Transformer::from_params(config, stored)?, metadata))
}

pub fn save(path: &Path, model: &Transformer, metadata: &Metadata) -> Result<()> {
    fs::write(path, to_bytes(model, metadata)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Transformer, Metadata)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
