//! Run configuration: flat `key = value` lines.
//!
//! Syntax is parsed as a TOML table so strings, numbers and booleans follow
//! the usual rules. Every key must be known; values are checked against the
//! model's preconditions and errors name the offending key.

use crate::error::{Error, Result};
use crate::features::BackboneConfig;
use crate::gldm::GldmConfig;
use sha2::{Digest, Sha256};
use std::path::Path;
use toml::{Table, Value};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub classes: usize,
    pub objects: usize,
    pub channels: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub decoder: bool,
    pub filter_kernel: usize,
    /// IFEM output stride relative to the image.
    pub ifem_downsample: usize,
    /// SSRM output stride relative to its (already filtered) input.
    pub ssrm_downsample: usize,
    pub cham_reduction: usize,
    pub stage1_eta: f64,
    pub stage2_eta: f64,
    pub stage1_dropout: f64,
    pub stage2_dropout: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub grad_check_eps: f64,
    pub grad_check_tolerance: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            classes: 4,
            objects: 8,
            channels: 64,
            heads: 4,
            mlp_ratio: 4,
            decoder: true,
            filter_kernel: 2,
            ifem_downsample: 16,
            ssrm_downsample: 16,
            cham_reduction: 4,
            stage1_eta: 0.01,
            stage2_eta: 0.1,
            stage1_dropout: 0.3,
            stage2_dropout: 0.8,
            stage1_epochs: 12,
            stage2_epochs: 30,
            batch_size: 4,
            grad_check_eps: 1e-5,
            grad_check_tolerance: 1e-4,
        }
    }
}


fn as_int(key: &str, v: &Value) -> Result<i64> {
    v.as_integer()
        .ok_or_else(|| Error::config(key, format!("expected an integer, found `{v}`")))
}

fn as_count(key: &str, v: &Value) -> Result<usize> {
    let i = as_int(key, v)?;
    usize::try_from(i).map_err(|_| Error::config(key, format!("must be non-negative, found {i}")))
}

fn as_real(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(Error::config(key, format!("expected a number, found `{v}`"))),
    }
}

impl RunConfig {
    /// Every accepted key, in render order.
    pub const KEYS: &[&str] = &[
        "seed",
        "classes",
        "objects",
        "channels",
        "heads",
        "mlp_ratio",
        "decoder",
        "filter_kernel",
        "ifem_downsample",
        "ssrm_downsample",
        "cham_reduction",
        "stage1_eta",
        "stage2_eta",
        "stage1_dropout",
        "stage2_dropout",
        "stage1_epochs",
        "stage2_epochs",
        "batch_size",
        "grad_check_eps",
        "grad_check_tolerance",
    ];

    pub fn parse(text: &str) -> Result<Self> {
        let table: Table = text.parse().map_err(|e: toml::de::Error| {
            Error::parse(e.span().map_or(0, |s| s.start), e.message().trim().to_string())
        })?;
        let mut cfg = Self::default();
        for (key, value) in &table {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
        Self::parse(&text).map_err(|e| e.in_file(path))
    }

    fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        match key {
            "seed" => {
                self.seed = u64::try_from(as_int(key, v)?)
                    .map_err(|_| Error::config(key, "must be non-negative"))?
            }
            "classes" => self.classes = as_count(key, v)?,
            "objects" => self.objects = as_count(key, v)?,
            "channels" => self.channels = as_count(key, v)?,
            "heads" => self.heads = as_count(key, v)?,
            "mlp_ratio" => self.mlp_ratio = as_count(key, v)?,
            "decoder" => {
                self.decoder = v
                    .as_bool()
                    .ok_or_else(|| Error::config(key, format!("expected true or false, found `{v}`")))?
            }
            "filter_kernel" => self.filter_kernel = as_count(key, v)?,
            "ifem_downsample" => self.ifem_downsample = as_count(key, v)?,
            "ssrm_downsample" => self.ssrm_downsample = as_count(key, v)?,
            "cham_reduction" => self.cham_reduction = as_count(key, v)?,
            "stage1_eta" => self.stage1_eta = as_real(key, v)?,
            "stage2_eta" => self.stage2_eta = as_real(key, v)?,
            "stage1_dropout" => self.stage1_dropout = as_real(key, v)?,
            "stage2_dropout" => self.stage2_dropout = as_real(key, v)?,
            "stage1_epochs" => self.stage1_epochs = as_count(key, v)?,
            "stage2_epochs" => self.stage2_epochs = as_count(key, v)?,
            "batch_size" => self.batch_size = as_count(key, v)?,
            "grad_check_eps" => self.grad_check_eps = as_real(key, v)?,
            "grad_check_tolerance" => self.grad_check_tolerance = as_real(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("classes", self.classes),
            ("objects", self.objects),
            ("channels", self.channels),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("filter_kernel", self.filter_kernel),
            ("cham_reduction", self.cham_reduction),
            ("batch_size", self.batch_size),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::config(k, "must be positive"));
            }
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::config("seed", format!("{} does not fit in a config integer", self.seed)));
        }
        if self.classes < 2 {
            return Err(Error::config("classes", "need at least two scene classes"));
        }
        if self.objects > u16::MAX as usize {
            return Err(Error::config("objects", "label ids must fit in 16 bits"));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(Error::config(
                "heads",
                format!("{} heads do not divide {} channels", self.heads, self.channels),
            ));
        }
        if !self.channels.is_multiple_of(self.cham_reduction) {
            return Err(Error::config(
                "cham_reduction",
                format!("ratio {} does not divide {} channels", self.cham_reduction, self.channels),
            ));
        }
        self.ifem_backbone()
            .map_err(|e| rename(e, "ifem_downsample"))?
            .validate("ifem_downsample")?;
        self.ssrm_backbone()
            .map_err(|e| rename(e, "ssrm_downsample"))?
            .validate("cham_reduction")?;
        for (k, eta) in [("stage1_eta", self.stage1_eta), ("stage2_eta", self.stage2_eta)] {
            if !(eta.is_finite() && eta >= 0.0) {
                return Err(Error::config(k, format!("step size must be finite and non-negative, found {eta}")));
            }
        }
        for (k, p) in [("stage1_dropout", self.stage1_dropout), ("stage2_dropout", self.stage2_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(k, format!("dropout rate must be in [0, 1), found {p}")));
            }
        }
        if !(self.grad_check_eps > 0.0 && self.grad_check_eps.is_finite()) {
            return Err(Error::config("grad_check_eps", "must be positive"));
        }
        if !(self.grad_check_tolerance > 0.0 && self.grad_check_tolerance.is_finite()) {
            return Err(Error::config("grad_check_tolerance", "must be positive"));
        }
        Ok(())
    }

    pub fn ifem_backbone(&self) -> Result<BackboneConfig> {
        BackboneConfig::with_factor(3, self.channels, self.ifem_downsample, None)
    }

    pub fn ssrm_backbone(&self) -> Result<BackboneConfig> {
        BackboneConfig::with_factor(self.objects, self.channels, self.ssrm_downsample, Some(self.cham_reduction))
    }

    pub fn gldm(&self) -> GldmConfig {
        GldmConfig {
            channels: self.channels,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            objects: self.objects,
            decoder: self.decoder,
        }
    }

    /// Image height and width must be multiples of this.
    pub fn input_multiple(&self) -> usize {
        let ssrm = self.filter_kernel * self.ssrm_downsample;
        let (a, b) = (self.ifem_downsample, ssrm);
        a / gcd(a, b) * b
    }

    /// Every key with its resolved value, one per line, in a fixed order.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        line("seed", self.seed.to_string());
        line("classes", self.classes.to_string());
        line("objects", self.objects.to_string());
        line("channels", self.channels.to_string());
        line("heads", self.heads.to_string());
        line("mlp_ratio", self.mlp_ratio.to_string());
        line("decoder", self.decoder.to_string());
        line("filter_kernel", self.filter_kernel.to_string());
        line("ifem_downsample", self.ifem_downsample.to_string());
        line("ssrm_downsample", self.ssrm_downsample.to_string());
        line("cham_reduction", self.cham_reduction.to_string());
        line("stage1_eta", real(self.stage1_eta));
        line("stage2_eta", real(self.stage2_eta));
        line("stage1_dropout", real(self.stage1_dropout));
        line("stage2_dropout", real(self.stage2_dropout));
        line("stage1_epochs", self.stage1_epochs.to_string());
        line("stage2_epochs", self.stage2_epochs.to_string());
        line("batch_size", self.batch_size.to_string());
        line("grad_check_eps", real(self.grad_check_eps));
        line("grad_check_tolerance", real(self.grad_check_tolerance));
        s
    }

    /// Hex SHA-256 of [`RunConfig::render`].
    pub fn hash(&self) -> String {
        Sha256::digest(self.render().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Writes the resolved config as `config.resolved` inside `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        super::write_atomic(&dir.join("config.resolved"), self.render().as_bytes())
    }
}

/// Shortest round-tripping form that still parses as a float.
fn real(v: f64) -> String {
    let s = format!("{v:?}");
    if s.contains(['.', 'e', 'E']) || !v.is_finite() {
        s
    } else {
        format!("{s}.0")
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn rename(e: Error, key: &str) -> Error {
    match e {
        Error::Config { msg, .. } => Error::config(key, msg),
        other => other,
    }
}
