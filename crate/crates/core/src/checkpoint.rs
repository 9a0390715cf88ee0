//! Checkpoint container: a text header (magic, model metadata, one line per
//! parameter with shape, byte offset, and length) followed by raw
//! little-endian f64 payloads. Writing is deterministic, so identical
//! parameters produce identical bytes.

use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::registry::{self, AssembledModel, ModelConfig, ModelError, ModelName};
use crate::tensor::{ParamSet, Tensor, TensorError};

pub const MAGIC: &str = "HGTPP1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic (expected {MAGIC})")]
    BadMagic,
    #[error("malformed checkpoint header at line {line}: {msg}")]
    Header { line: usize, msg: String },
    #[error("checkpoint payload truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("checkpoint does not match the model: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// Model identity stored alongside the parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub model: String,
    pub dim: usize,
    pub num_left: usize,
    pub num_right: usize,
    pub history_capacity: usize,
}

impl CheckpointMeta {
    pub fn for_model(model: &AssembledModel) -> Self {
        CheckpointMeta {
            model: model.config.name.as_str().to_string(),
            dim: model.config.dim,
            num_left: model.num_left(),
            num_right: model.num_right(),
            history_capacity: model.config.history_capacity,
        }
    }
}

/// Serialize metadata and every parameter to `path`.
pub fn save(path: &Path, meta: &CheckpointMeta, params: &ParamSet) -> Result<()> {
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    header.push_str(&format!(
        "model {} dim {} left {} right {} history {}\n",
        meta.model, meta.dim, meta.num_left, meta.num_right, meta.history_capacity
    ));
    header.push_str(&format!("params {}\n", params.len()));
    let mut offset = 0usize;
    let mut payload: Vec<u8> = Vec::new();
    for p in params.iter() {
        let value = p.value();
        let shape = value
            .shape()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        header.push_str(&format!(
            "{} {} {} {} {}\n",
            p.name(),
            value.shape().len(),
            shape,
            offset,
            value.len()
        ));
        for v in value.values() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += value.len() * 8;
    }
    header.push_str(&format!("payload {}\n", payload.len()));

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|source| CheckpointError::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
    }
    let mut file = std::fs::File::create(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    file.write_all(header.as_bytes())
        .and_then(|_| file.write_all(&payload))
        .map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
}

/// Parse a checkpoint into its metadata and named tensors.
pub fn load(path: &Path) -> Result<(CheckpointMeta, Vec<(String, Tensor)>)> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;

    struct HeaderReader<'a> {
        bytes: &'a [u8],
        cursor: usize,
        line_no: usize,
    }
    impl HeaderReader<'_> {
        fn next_line(&mut self) -> Result<String> {
            let start = self.cursor;
            while self.cursor < self.bytes.len() && self.bytes[self.cursor] != b'\n' {
                self.cursor += 1;
            }
            if self.cursor >= self.bytes.len() {
                return Err(CheckpointError::Header {
                    line: self.line_no + 1,
                    msg: "unexpected end of header".into(),
                });
            }
            let line = String::from_utf8_lossy(&self.bytes[start..self.cursor]).into_owned();
            self.cursor += 1;
            self.line_no += 1;
            Ok(line)
        }
    }
    let mut reader = HeaderReader {
        bytes: &bytes,
        cursor: 0,
        line_no: 0,
    };

    if reader.next_line()? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let meta_line = reader.next_line()?;
    let tokens: Vec<&str> = meta_line.split_whitespace().collect();
    if tokens.len() != 10 || tokens[0] != "model" {
        return Err(CheckpointError::Header {
            line: reader.line_no,
            msg: format!("bad metadata line `{meta_line}`"),
        });
    }
    let parse_usize = |s: &str, line: usize| -> Result<usize> {
        s.parse().map_err(|_| CheckpointError::Header {
            line,
            msg: format!("expected an integer, got `{s}`"),
        })
    };
    let meta = CheckpointMeta {
        model: tokens[1].to_string(),
        dim: parse_usize(tokens[3], reader.line_no)?,
        num_left: parse_usize(tokens[5], reader.line_no)?,
        num_right: parse_usize(tokens[7], reader.line_no)?,
        history_capacity: parse_usize(tokens[9], reader.line_no)?,
    };

    let params_line = reader.next_line()?;
    let count: usize = params_line
        .strip_prefix("params ")
        .and_then(|s| s.parse().ok())
        .ok_or(CheckpointError::Header {
            line: reader.line_no,
            msg: format!("bad params line `{params_line}`"),
        })?;

    struct Entry {
        name: String,
        shape: Vec<usize>,
        offset: usize,
        len: usize,
    }
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let line = reader.next_line()?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 4 {
            return Err(CheckpointError::Header {
                line: reader.line_no,
                msg: format!("bad parameter line `{line}`"),
            });
        }
        let rank = parse_usize(toks[1], reader.line_no)?;
        if toks.len() != 4 + rank {
            return Err(CheckpointError::Header {
                line: reader.line_no,
                msg: format!(
                    "parameter line has {} tokens, expected {}",
                    toks.len(),
                    4 + rank
                ),
            });
        }
        let shape = toks[2..2 + rank]
            .iter()
            .map(|s| parse_usize(s, reader.line_no))
            .collect::<Result<Vec<usize>>>()?;
        entries.push(Entry {
            name: toks[0].to_string(),
            shape,
            offset: parse_usize(toks[2 + rank], reader.line_no)?,
            len: parse_usize(toks[3 + rank], reader.line_no)?,
        });
    }
    let payload_line = reader.next_line()?;
    let payload_len: usize = payload_line
        .strip_prefix("payload ")
        .and_then(|s| s.parse().ok())
        .ok_or(CheckpointError::Header {
            line: reader.line_no,
            msg: format!("bad payload line `{payload_line}`"),
        })?;
    let payload = &bytes[reader.cursor..];
    if payload.len() < payload_len {
        return Err(CheckpointError::Truncated {
            need: payload_len,
            have: payload.len(),
        });
    }

    let mut out = Vec::with_capacity(count);
    for e in entries {
        let end = e.offset + e.len * 8;
        if end > payload_len {
            return Err(CheckpointError::Truncated {
                need: end,
                have: payload_len,
            });
        }
        let values: Vec<f64> = payload[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((e.name, Tensor::new(e.shape, values)?));
    }
    Ok((meta, out))
}

/// Rebuild the assembled model a checkpoint was saved from. All parameters
/// must be present with matching shapes; model name, dimension, and node
/// counts must line up exactly.
pub fn restore_model(path: &Path) -> Result<AssembledModel> {
    let (meta, tensors) = load(path)?;
    let name = ModelName::parse(&meta.model)?;
    let config = ModelConfig::for_name(name, meta.dim, meta.history_capacity);
    let mut model = registry::assemble(config, meta.num_left, meta.num_right, 0)?;
    if tensors.len() != model.params.len() {
        return Err(CheckpointError::Incompatible(format!(
            "checkpoint has {} parameters, model {} expects {}",
            tensors.len(),
            meta.model,
            model.params.len()
        )));
    }
    for (name, tensor) in tensors {
        let id = model
            .params
            .id(&name)
            .map_err(|_| CheckpointError::Incompatible(format!("unexpected parameter `{name}`")))?;
        model
            .params
            .set_value(id, tensor)
            .map_err(|e| CheckpointError::Incompatible(format!("parameter `{name}`: {e}")))?;
    }
    Ok(model)
}

/// Verify that a checkpoint's identity matches a run configuration.
pub fn check_compatible(meta: &CheckpointMeta, model_name: &str, dim: usize) -> Result<()> {
    if !meta.model.eq_ignore_ascii_case(model_name) {
        return Err(CheckpointError::Incompatible(format!(
            "checkpoint holds model {}, run requests {model_name}",
            meta.model
        )));
    }
    if meta.dim != dim {
        return Err(CheckpointError::Incompatible(format!(
            "checkpoint dimension {} differs from requested {dim}",
            meta.dim
        )));
    }
    Ok(())
}
