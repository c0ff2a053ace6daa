//! Binary model checkpoints and the plain-text embedding export.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! magic "HPLCKPT\0" | version u32 | header length u32 | header JSON
//! token count u32 | (col u32, row u32) per token
//! tensor count u32 | per tensor: name length u32, name, rows u32, cols u32, f32 values
//! sha256 of everything above (32 bytes)
//! ```

use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::Tensor;
use crate::grid::{CellIndex, GridError, GridLevel, GridSpec, HierarchicalVocabulary};
use crate::hier_embedding::{EmbeddingError, Method, SlicePartition};
use crate::model::{AttributeSizes, ModelConfig, ModelError, NextPlaceModel};

pub const MAGIC: &[u8; 8] = b"HPLCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic bytes)")]
    Magic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checksum mismatch: checkpoint is corrupt")]
    Checksum,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint has an empty vocabulary")]
    EmptyVocabulary,
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("malformed embedding export, line {line}: {msg}")]
    Export { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config_hash: String,
    pub seed: u64,
    pub method: Method,
    pub partition: String,
    pub model: ModelConfig,
    pub attributes: AttributeSizes,
    pub grid_origin: (f64, f64),
    pub grid_levels: Vec<(String, u32)>,
}

impl CheckpointHeader {
    pub fn grid_spec(&self) -> Result<GridSpec, GridError> {
        let levels = self
            .grid_levels
            .iter()
            .map(|(n, s)| GridLevel::new(n.clone(), *s))
            .collect();
        GridSpec::new(self.grid_origin.0, self.grid_origin.1, levels)
    }
}

fn level_names(spec: &GridSpec) -> Vec<String> {
    spec.levels().iter().map(|l| l.name.clone()).collect()
}

/// Partition description such as `10km:12,1km:20,place:32`.
pub fn describe_partition(partition: &SlicePartition, spec: &GridSpec) -> String {
    partition.describe(&level_names(spec))
}

/// A decoded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub vocab: Arc<HierarchicalVocabulary>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model(model: &NextPlaceModel<f32>, config_hash: &str, seed: u64) -> Self {
        let vocab = model.places.vocab().clone();
        let spec = vocab.spec();
        let header = CheckpointHeader {
            config_hash: config_hash.to_string(),
            seed,
            method: model.config().method,
            partition: describe_partition(model.places.partition(), spec),
            model: model.config().clone(),
            attributes: model.attributes(),
            grid_origin: spec.origin(),
            grid_levels: spec
                .levels()
                .iter()
                .map(|l| (l.name.clone(), l.cell_size))
                .collect(),
        };
        let tensors = model
            .parameters()
            .into_iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        Self {
            header,
            vocab,
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// The place embedding matrix.
    pub fn embedding(&self) -> Option<&Tensor<f32>> {
        self.tensor("places")
    }

    /// Rebuilds the model; every parameter must be present with its shape.
    pub fn to_model(&self) -> Result<NextPlaceModel<f32>, CheckpointError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = NextPlaceModel::<f32>::new(
            &self.header.model,
            self.vocab.clone(),
            self.header.attributes,
            &mut rng,
        )?;
        for p in model.parameters_mut() {
            let t = self.tensor(&p.name).ok_or_else(|| {
                CheckpointError::Malformed(format!("missing tensor `{}`", p.name))
            })?;
            if t.shape() != p.value.shape() {
                return Err(CheckpointError::Malformed(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        put_u32(&mut out, header.len());
        out.extend_from_slice(&header);
        put_u32(&mut out, self.vocab.len());
        for c in self.vocab.tokens() {
            out.extend_from_slice(&c.col.to_le_bytes());
            out.extend_from_slice(&c.row.to_le_bytes());
        }
        put_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rows());
            put_u32(&mut out, t.cols());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let mut r = Reader {
            bytes,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(CheckpointError::Truncated);
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::Checksum);
        }
        let mut r = Reader {
            bytes: body,
            pos: r.pos,
        };
        let header_len = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let spec = header.grid_spec()?;
        let n_tokens = r.u32()? as usize;
        if n_tokens == 0 {
            return Err(CheckpointError::EmptyVocabulary);
        }
        let mut tokens = Vec::with_capacity(n_tokens.min(body.len() / 8));
        for _ in 0..n_tokens {
            let col = r.u32()?;
            let row = r.u32()?;
            tokens.push(CellIndex::new(spec.finest(), col, row));
        }
        let vocab = Arc::new(HierarchicalVocabulary::from_ordered(tokens, &spec)?);
        let n_tensors = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..n_tensors {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let count = rows.checked_mul(cols).ok_or(CheckpointError::Truncated)?;
            let raw = r.take(count.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.push((name, Tensor::from_vec(rows, cols, data)));
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        Ok(Self {
            header,
            vocab,
            tensors,
        })
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("checkpoint field exceeds u32");
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Place embeddings keyed by finest-cell coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingExport {
    pub partition: String,
    /// (col, row) of each token, in token order.
    pub cells: Vec<(u32, u32)>,
    pub values: Tensor<f32>,
}

impl EmbeddingExport {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, CheckpointError> {
        let values = ckpt
            .embedding()
            .ok_or_else(|| CheckpointError::Malformed("missing tensor `places`".into()))?
            .clone();
        Ok(Self {
            partition: ckpt.header.partition.clone(),
            cells: ckpt.vocab.tokens().iter().map(|c| (c.col, c.row)).collect(),
            values,
        })
    }

    pub fn d(&self) -> usize {
        self.values.cols()
    }

    /// Header `token_count d partition`, then `col row v...` per token with
    /// nine significant digits.
    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{} {} {}", self.cells.len(), self.d(), self.partition)?;
        let mut line = String::new();
        for (i, (col, row)) in self.cells.iter().enumerate() {
            line.clear();
            line.push_str(&format!("{col} {row}"));
            for v in self.values.row(i) {
                line.push_str(&format!(" {v:.8e}"));
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn parse<R: BufRead>(input: R) -> Result<Self, CheckpointError> {
        let err = |line: usize, msg: &str| CheckpointError::Export {
            line,
            msg: msg.to_string(),
        };
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| err(1, "missing header"))??;
        let mut parts = header.split_whitespace();
        let count: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(1, "bad token count"))?;
        let d: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(1, "bad width"))?;
        let partition = parts
            .next()
            .ok_or_else(|| err(1, "missing partition"))?
            .to_string();
        if parts.next().is_some() {
            return Err(err(1, "unexpected header fields"));
        }
        let mut cells = Vec::with_capacity(count);
        let mut data = Vec::with_capacity(count * d);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let n = i + 2;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != d + 2 {
                return Err(err(
                    n,
                    &format!("expected {} fields, found {}", d + 2, fields.len()),
                ));
            }
            let col = fields[0].parse().map_err(|_| err(n, "bad column"))?;
            let row = fields[1].parse().map_err(|_| err(n, "bad row"))?;
            cells.push((col, row));
            for f in &fields[2..] {
                data.push(f.parse::<f32>().map_err(|_| err(n, "bad value"))?);
            }
        }
        if cells.len() != count {
            return Err(err(
                0,
                &format!("header announces {count} tokens, found {}", cells.len()),
            ));
        }
        Ok(Self {
            partition,
            cells,
            values: Tensor::from_vec(count, d, data),
        })
    }

    /// Checks the partition description against the width.
    pub fn slice_partition(
        &self,
        level_names: &[String],
    ) -> Result<SlicePartition, EmbeddingError> {
        SlicePartition::parse(self.d(), &self.partition, level_names)
    }
}
