//! Binary checkpoint container.
//!
//! Layout (little-endian): 8-byte magic, `u32` format version, `u64` header
//! length, JSON header, then per blob: `u32` name length, UTF-8 name, `u32`
//! rank, `u64` per dimension, `f32` data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ConnectionSpec, Feedback, LoraConfig, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

const MAGIC: &[u8; 8] = b"TCONNCKP";
const VERSION: u32 = 1;

/// A named tensor stored beside the model weights, e.g. optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug)]
pub struct CheckpointContents {
    pub model: Model,
    /// Caller-defined metadata stored with the weights.
    pub train: Option<serde_json::Value>,
    /// Blobs that are not model parameters, in file order.
    pub extra: Vec<Blob>,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    config: ModelConfig,
    connections: ConnectionSpec,
    lora: Option<LoraConfig>,
    feedback: Feedback,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelHeader,
    train: Option<serde_json::Value>,
    blobs: usize,
}

pub fn write_checkpoint(
    path: impl AsRef<Path>,
    model: &Model,
    train: Option<&serde_json::Value>,
    extra: &[Blob],
) -> Result<()> {
    let path = path.as_ref();
    let header = Header {
        model: ModelHeader {
            config: model.config().clone(),
            connections: model.spec().clone(),
            lora: model.lora().cloned(),
            feedback: model.feedback(),
        },
        train: train.cloned(),
        blobs: model.params().len() + extra.len(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::State(format!("checkpoint header: {e}")))?;
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    let params = model.params().iter().map(|(_, p)| (p.name.as_str(), &p.tensor));
    let extras = extra.iter().map(|b| (b.name.as_str(), &b.tensor));
    for (name, t) in params.chain(extras) {
        write_blob(&mut w, name, t).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn write_blob(w: &mut impl Write, name: &str, t: &Tensor) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &x in t.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

struct Reader<'p, R> {
    inner: R,
    path: &'p Path,
}

impl<R: Read> Reader<'_, R> {
    fn bad(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.display().to_string(),
            msg: msg.into(),
        }
    }

    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => self.bad(format!("truncated while reading {what}")),
            _ => Error::io(self.path, e),
        })?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().expect("8 bytes")))
    }

    fn size(&mut self, what: &str, limit: u64) -> Result<usize> {
        let v = self.u64(what)?;
        if v > limit {
            return Err(self.bad(format!("{what} {v} is implausibly large")));
        }
        Ok(v as usize)
    }

    fn blob(&mut self) -> Result<Blob> {
        let n = self.u32("blob name length")? as usize;
        let name = String::from_utf8(self.bytes(n, "blob name")?).map_err(|_| self.bad("blob name is not UTF-8"))?;
        let rank = self.u32("blob rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(self.bad(format!("blob {name} has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| self.size("blob dimension", 1 << 32))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = self.bytes(numel * 4, &format!("data of blob {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| self.bad(format!("blob {name}: {e}")))?;
        Ok(Blob { name, tensor })
    }
}

/// Load a checkpoint, checking every parameter blob against the shapes the
/// stored configuration implies.
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointContents> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
        path,
    };
    if r.bytes(8, "magic")? != MAGIC {
        return Err(r.bad("not a checkpoint file"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.bad(format!("unsupported format version {version}")));
    }
    let len = r.size("header length", 1 << 30)?;
    let raw = r.bytes(len, "header")?;
    let header: Header = serde_json::from_slice(&raw).map_err(|e| r.bad(format!("header: {e}")))?;
    let m = header.model;
    let stored = m.connections;
    let pairs = stored.connections().iter().map(|c| (c.source, c.dest));
    let spec = ConnectionSpec::new(pairs, stored.alpha, stored.group_size, stored.proj_rank)?;
    let mut model = Model::new(m.config, spec, 0)?;
    if let Some(l) = &m.lora {
        model.attach_lora(l.rank, &l.targets)?;
    }
    model.set_feedback(m.feedback)?;

    let mut seen = vec![false; model.params().len()];
    let mut extra = Vec::new();
    for _ in 0..header.blobs {
        let blob = r.blob()?;
        let Some(id) = model.params().id(&blob.name) else {
            extra.push(blob);
            continue;
        };
        if seen[id.index()] {
            return Err(r.bad(format!("parameter {} appears twice", blob.name)));
        }
        seen[id.index()] = true;
        let slot = model.params_mut().get_mut(id);
        if slot.shape() != blob.tensor.shape() {
            return Err(Error::Format {
                path: path.display().to_string(),
                msg: format!(
                    "parameter {} has shape {:?}, config implies {:?}",
                    blob.name,
                    blob.tensor.shape(),
                    slot.shape()
                ),
            });
        }
        let trainable = slot.requires_grad();
        *slot = blob.tensor.with_requires_grad(trainable);
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let name = &model.params().iter().nth(i).expect("index in range").1.name;
        return Err(r.bad(format!("parameter {name} is missing")));
    }
    let mut probe = [0u8];
    if r.inner.read(&mut probe).map_err(|e| Error::io(path, e))? != 0 {
        return Err(r.bad("trailing bytes after the last blob"));
    }
    Ok(CheckpointContents {
        model,
        train: header.train,
        extra,
    })
}
