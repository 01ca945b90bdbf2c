//! Checkpoints: a text header followed by named 64-bit tensor records.
//!
//! ```text
//! spaco-checkpoint v1
//! stage = 2
//! epoch = 30
//! seed = 7
//! rng = chacha8
//! config_hash = <sha256 of the [config] section>
//! scalar.<name> = <f64>
//! [config]
//! <resolved run config>
//! [tensors] <count>
//! ```
//!
//! Each tensor record is a little-endian `u16` name length, the UTF-8 name
//! and an `SPC1` tensor with dtype f64.

use super::{RunConfig, TensorData, TensorFile};
use crate::error::{Error, Result};
use crate::rng::RNG_ALGORITHM;
use crate::tensor::{Parameterized, Tensor};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &str = "spaco-checkpoint v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: u8,
    pub epoch: usize,
    pub seed: u64,
    pub rng_algorithm: String,
    /// Optimizer and bookkeeping scalars, in insertion order.
    pub scalars: Vec<(String, f64)>,
    pub config: RunConfig,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(stage: u8, epoch: usize, config: &RunConfig) -> Self {
        Self {
            stage,
            epoch,
            seed: config.seed,
            rng_algorithm: RNG_ALGORITHM.to_string(),
            scalars: Vec::new(),
            config: config.clone(),
            tensors: Vec::new(),
        }
    }

    /// Appends every parameter value of `model` under `prefix`.
    pub fn add_model(&mut self, prefix: &str, model: &impl Parameterized) {
        for (name, p) in model.params() {
            self.tensors.push((crate::tensor::join_name(prefix, &name), p.value.clone()));
        }
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.scalars.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}.");
        self.tensors.iter().any(|(n, _)| n.starts_with(&p))
    }

    /// Copies the tensors stored under `prefix` into `model`. Every model
    /// parameter must be present with a matching shape.
    pub fn load_into(&self, prefix: &str, model: &mut impl Parameterized) -> Result<()> {
        for (name, p) in model.params_mut() {
            let full = crate::tensor::join_name(prefix, &name);
            let t = self
                .tensor(&full)
                .ok_or_else(|| Error::MissingCheckpoint(format!("checkpoint has no tensor `{full}`")))?;
            if t.shape() != p.value.shape() {
                return Err(Error::dim(format!(
                    "checkpoint tensor `{full}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    /// SHA-256 over all tensor names, shapes and value bits under `prefix`.
    pub fn digest(&self, prefix: &str) -> String {
        let p = format!("{prefix}.");
        let mut h = Sha256::new();
        for (n, t) in self.tensors.iter().filter(|(n, _)| prefix.is_empty() || n.starts_with(&p)) {
            h.update(n.as_bytes());
            h.update(TensorFile::from_tensor_f64(t).encode());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut head = format!(
            "{CHECKPOINT_MAGIC}\nstage = {}\nepoch = {}\nseed = {}\nrng = {}\nconfig_hash = {}\n",
            self.stage,
            self.epoch,
            self.seed,
            self.rng_algorithm,
            self.config.hash()
        );
        for (n, v) in &self.scalars {
            head.push_str(&format!("scalar.{n} = {v:?}\n"));
        }
        head.push_str("[config]\n");
        head.push_str(&self.config.render());
        head.push_str(&format!("[tensors] {}\n", self.tensors.len()));
        let mut out = head.into_bytes();
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&TensorFile::from_tensor_f64(t).encode());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let next_line = |pos: &mut usize| -> Result<(usize, String)> {
            let start = *pos;
            let end = bytes[start..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::parse(start, "unterminated header line"))?;
            *pos = start + end + 1;
            let line = std::str::from_utf8(&bytes[start..start + end])
                .map_err(|_| Error::parse(start, "header line is not UTF-8"))?;
            Ok((start, line.to_string()))
        };

        let (_, magic) = next_line(&mut pos)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::parse(0, format!("expected `{CHECKPOINT_MAGIC}`")));
        }
        let mut stage = None;
        let mut epoch = None;
        let mut seed = None;
        let mut rng = None;
        let mut hash = None;
        let mut scalars = Vec::new();
        loop {
            let (at, line) = next_line(&mut pos)?;
            if line == "[config]" {
                break;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::parse(at, format!("malformed header line `{line}`")))?;
            let bad = |what: &str| Error::parse(at + k.len() + 3, format!("bad {what} `{v}`"));
            match k {
                "stage" => stage = Some(v.parse::<u8>().map_err(|_| bad("stage"))?),
                "epoch" => epoch = Some(v.parse::<usize>().map_err(|_| bad("epoch"))?),
                "seed" => seed = Some(v.parse::<u64>().map_err(|_| bad("seed"))?),
                "rng" => rng = Some(v.to_string()),
                "config_hash" => hash = Some((at, v.to_string())),
                _ => match k.strip_prefix("scalar.") {
                    Some(name) => scalars.push((name.to_string(), v.parse::<f64>().map_err(|_| bad("scalar"))?)),
                    None => return Err(Error::parse(at, format!("unknown header field `{k}`"))),
                },
            }
        }
        let config_start = pos;
        let (tensors_at, count) = loop {
            let (at, line) = next_line(&mut pos)?;
            if let Some(n) = line.strip_prefix("[tensors] ") {
                break (at, n.parse::<usize>().map_err(|_| Error::parse(at, "bad tensor count"))?);
            }
        };
        let config_text = std::str::from_utf8(&bytes[config_start..tensors_at]).expect("checked per line");
        let config = RunConfig::parse(config_text).map_err(|e| match e {
            Error::Parse { offset, msg } => Error::parse(config_start + offset, msg),
            other => other,
        })?;
        let (hash_at, hash) = hash.ok_or_else(|| Error::parse(config_start, "header has no config_hash"))?;
        if hash != config.hash() {
            return Err(Error::parse(hash_at, "config_hash does not match the [config] section"));
        }

        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len_bytes = bytes
                .get(pos..pos + 2)
                .ok_or_else(|| Error::parse(pos, "truncated tensor name length"))?;
            let len = u16::from_le_bytes([len_bytes[0], len_bytes[1]]) as usize;
            let name_bytes = bytes
                .get(pos + 2..pos + 2 + len)
                .ok_or_else(|| Error::parse(pos + 2, "truncated tensor name"))?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| Error::parse(pos + 2, "tensor name is not UTF-8"))?
                .to_string();
            pos += 2 + len;
            let (file, used) = TensorFile::decode_prefix(&bytes[pos..]).map_err(|e| match e {
                Error::Parse { offset, msg } => Error::parse(pos + offset, format!("tensor `{name}`: {msg}")),
                other => other,
            })?;
            if !matches!(file.data(), TensorData::F64(_)) {
                return Err(Error::parse(pos + 4, format!("tensor `{name}` is not stored as f64")));
            }
            pos += used;
            tensors.push((name, file.to_tensor()?));
        }
        if pos != bytes.len() {
            return Err(Error::parse(pos, "trailing bytes after the last tensor"));
        }
        Ok(Self {
            stage: stage.ok_or_else(|| Error::parse(0, "header has no stage"))?,
            epoch: epoch.ok_or_else(|| Error::parse(0, "header has no epoch"))?,
            seed: seed.ok_or_else(|| Error::parse(0, "header has no seed"))?,
            rng_algorithm: rng.ok_or_else(|| Error::parse(0, "header has no rng"))?,
            scalars,
            config,
            tensors,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingCheckpoint(path.display().to_string()),
            _ => Error::Io(e).in_file(path),
        })?;
        Self::decode(&bytes).map_err(|e| e.in_file(path))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, &self.encode())
    }
}
