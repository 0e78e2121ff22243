//! Model checkpoints: an ASCII manifest followed by a raw little-endian
//! payload. The byte layout is described in `docs/checkpoint.md`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::{BranchSet, BsaConfig};
use crate::error::{BsaError, Result};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::real::Real;

pub const MAGIC: &str = "BSA-CHECKPOINT 1";

fn format_err(msg: impl Into<String>) -> BsaError {
    BsaError::Format(msg.into())
}

fn meta_lines(cfg: &ModelConfig) -> Vec<(&'static str, String)> {
    let l = &cfg.layer;
    vec![
        ("in_dim", cfg.in_dim.to_string()),
        ("depth", cfg.depth.to_string()),
        ("ball_size", l.ball_size.to_string()),
        ("block_len", l.block_len.to_string()),
        ("top_k", l.top_k.to_string()),
        ("group_size", l.group_size.to_string()),
        ("heads", l.heads.to_string()),
        ("model_dim", l.model_dim.to_string()),
        ("head_dim", l.head_dim.to_string()),
        ("ffn_dim", l.ffn_dim.to_string()),
        ("phi", l.phi.to_string()),
        ("group_selection", l.group_selection.to_string()),
        ("coarsen_queries", l.coarsen_queries.to_string()),
        ("group_compression", l.group_compression.to_string()),
        ("ball_masking", l.ball_masking.to_string()),
        ("branch_ball", l.branches.ball.to_string()),
        ("branch_compression", l.branches.compression.to_string()),
        ("branch_selection", l.branches.selection.to_string()),
        ("full_attention", l.full_attention.to_string()),
    ]
}

pub fn write_model<T: Real, W: Write>(model: &Model<T>, mut w: W) -> Result<()> {
    let mut header = format!("{MAGIC}\ndtype {}\n", T::DTYPE);
    for (k, v) in meta_lines(&model.config) {
        header.push_str(&format!("meta {k} {v}\n"));
    }
    let width = std::mem::size_of::<T>();
    let tensors = model.params.named_tensors();
    let mut offset = 0usize;
    for (name, t) in &tensors {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let bytes = t.len() * width;
        header.push_str(&format!(
            "tensor {name} {} {} {offset} {bytes}\n",
            t.ndim(),
            dims.join(" ")
        ));
        offset += bytes;
    }
    header.push_str(&format!("payload {offset}\n"));
    w.write_all(header.as_bytes())?;
    for (_, t) in &tensors {
        for x in t.iter() {
            w.write_all(&x.to_le_bytes_vec())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_model<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    write_model(model, BufWriter::new(File::create(path)?))
}

struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    bytes: usize,
}

fn parse<V: std::str::FromStr>(s: &str, what: &str) -> Result<V> {
    s.parse().map_err(|_| format_err(format!("bad {what} `{s}`")))
}

fn config_from_meta(meta: &[(String, String)]) -> Result<ModelConfig> {
    let get = |k: &str| -> Result<&str> {
        meta.iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| format_err(format!("missing meta `{k}`")))
    };
    let u = |k: &str| -> Result<usize> { parse(get(k)?, k) };
    let b = |k: &str| -> Result<bool> { parse(get(k)?, k) };
    let layer = BsaConfig {
        ball_size: u("ball_size")?,
        block_len: u("block_len")?,
        top_k: u("top_k")?,
        group_size: u("group_size")?,
        heads: u("heads")?,
        model_dim: u("model_dim")?,
        head_dim: u("head_dim")?,
        ffn_dim: u("ffn_dim")?,
        phi: parse(get("phi")?, "phi")?,
        group_selection: b("group_selection")?,
        coarsen_queries: b("coarsen_queries")?,
        group_compression: b("group_compression")?,
        ball_masking: b("ball_masking")?,
        branches: BranchSet {
            ball: b("branch_ball")?,
            compression: b("branch_compression")?,
            selection: b("branch_selection")?,
        },
        full_attention: b("full_attention")?,
    };
    Ok(ModelConfig {
        in_dim: u("in_dim")?,
        depth: u("depth")?,
        layer,
    })
}

fn read_line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut line = String::new();
    if r.read_line(&mut line)? == 0 {
        return Err(format_err("unexpected end of manifest"));
    }
    if !line.ends_with('\n') || !line.is_ascii() {
        return Err(format_err("manifest lines must be ASCII and newline-terminated"));
    }
    line.pop();
    Ok(line)
}

/// Reads a checkpoint written in either precision into precision `T`.
pub fn read_model<T: Real, R: Read>(reader: R) -> Result<Model<T>> {
    let mut r = BufReader::new(reader);
    if read_line(&mut r)? != MAGIC {
        return Err(format_err("not a checkpoint (bad magic line)"));
    }
    let dtype_line = read_line(&mut r)?;
    let width = match dtype_line.strip_prefix("dtype ") {
        Some("f32") => 4,
        Some("f64") => 8,
        _ => return Err(format_err(format!("bad dtype line `{dtype_line}`"))),
    };
    let mut meta = Vec::new();
    let mut entries = Vec::new();
    let payload = loop {
        let line = read_line(&mut r)?;
        let parts: Vec<&str> = line.split(' ').collect();
        match parts.as_slice() {
            ["meta", k, v] => meta.push((k.to_string(), v.to_string())),
            ["tensor", name, rank, rest @ ..] => {
                let rank: usize = parse(rank, "rank")?;
                if rest.len() != rank + 2 {
                    return Err(format_err(format!("tensor `{name}` line has the wrong field count")));
                }
                let shape = rest[..rank]
                    .iter()
                    .map(|d| parse(d, "dimension"))
                    .collect::<Result<Vec<usize>>>()?;
                entries.push(TensorEntry {
                    name: name.to_string(),
                    shape,
                    offset: parse(rest[rank], "offset")?,
                    bytes: parse(rest[rank + 1], "byte count")?,
                });
            }
            ["payload", n] => break parse::<usize>(n, "payload size")?,
            _ => return Err(format_err(format!("unrecognised manifest line `{line}`"))),
        }
    };
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    if data.len() != payload {
        return Err(format_err(format!(
            "payload is {} bytes, manifest says {payload}",
            data.len()
        )));
    }
    let config = config_from_meta(&meta)?;
    let mut params = ModelParams::<T>::init(&config, 0)?;
    let expected = params.named_tensors().len();
    if entries.len() != expected {
        return Err(format_err(format!(
            "{} tensors stored, config needs {expected}",
            entries.len()
        )));
    }
    for ((name, mut t), e) in params.named_tensors_mut().into_iter().zip(&entries) {
        if name != e.name || t.shape() != e.shape.as_slice() {
            return Err(format_err(format!(
                "tensor `{}` {:?} where `{name}` {:?} expected",
                e.name,
                e.shape,
                t.shape()
            )));
        }
        if e.bytes != t.len() * width || e.offset.checked_add(e.bytes).is_none_or(|end| end > data.len()) {
            return Err(format_err(format!("tensor `{name}` extent is out of bounds")));
        }
        let raw = &data[e.offset..e.offset + e.bytes];
        for (x, chunk) in t.iter_mut().zip(raw.chunks_exact(width)) {
            *x = if width == 4 {
                T::c(f32::from_le_slice(chunk) as f64)
            } else {
                T::c(f64::from_le_slice(chunk))
            };
        }
    }
    Model::from_parts(config, params)
}

pub fn load_model<T: Real>(path: &Path) -> Result<Model<T>> {
    read_model(File::open(path)?)
}
