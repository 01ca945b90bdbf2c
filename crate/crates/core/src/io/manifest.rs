//! Text dataset manifests.
//!
//! ```text
//! spaco-manifest v1 classes=4 objects=8
//! train/000000.image.spc<TAB>train/000000.scores.spc<TAB>2
//! ```
//!
//! Relative paths are resolved against the manifest's directory.

use crate::error::{Error, Result};
use std::path::{Path, PathBuf};

pub const MANIFEST_MAGIC: &str = "spaco-manifest v1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub scores: PathBuf,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub classes: usize,
    pub objects: usize,
    pub entries: Vec<ManifestEntry>,
}

fn header_field(token: Option<&str>, key: &str, offset: usize) -> Result<usize> {
    let tok = token.ok_or_else(|| Error::parse(offset, format!("header is missing `{key}=`")))?;
    let value = tok
        .strip_prefix(key)
        .and_then(|t| t.strip_prefix('='))
        .ok_or_else(|| Error::parse(offset, format!("expected `{key}=<n>`, found `{tok}`")))?;
    match value.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(Error::parse(offset, format!("`{key}` must be a positive integer, found `{value}`"))),
    }
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.split_inclusive('\n');
        let header = lines.next().unwrap_or("").trim_end_matches(['\n', '\r']);
        let rest = header
            .strip_prefix(MANIFEST_MAGIC)
            .ok_or_else(|| Error::parse(0, format!("manifest must start with `{MANIFEST_MAGIC}`")))?;
        let mut tokens = rest.split_whitespace();
        let at = |tok: Option<&str>| tok.map_or(header.len(), |t| t.as_ptr() as usize - text.as_ptr() as usize);
        let t1 = tokens.next();
        let classes = header_field(t1, "classes", at(t1))?;
        let t2 = tokens.next();
        let objects = header_field(t2, "objects", at(t2))?;
        if let Some(extra) = tokens.next() {
            return Err(Error::parse(at(Some(extra)), format!("unexpected header field `{extra}`")));
        }

        let mut entries = Vec::new();
        let mut offset = text.split_inclusive('\n').next().map_or(0, str::len);
        for raw in lines {
            let line = raw.trim_end_matches(['\n', '\r']);
            let start = offset;
            offset += raw.len();
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::parse(
                    start,
                    format!("expected 3 tab-separated fields, found {}", fields.len()),
                ));
            }
            let class_at = start + fields[0].len() + fields[1].len() + 2;
            let class: usize = fields[2]
                .trim()
                .parse()
                .map_err(|_| Error::parse(class_at, format!("bad class index `{}`", fields[2])))?;
            if class >= classes {
                return Err(Error::parse(
                    class_at,
                    format!("class {class} out of range for {classes} classes"),
                ));
            }
            if fields[0].is_empty() || fields[1].is_empty() {
                return Err(Error::parse(start, "empty path"));
            }
            entries.push(ManifestEntry {
                image: PathBuf::from(fields[0]),
                scores: PathBuf::from(fields[1]),
                class,
            });
        }
        Ok(Self { classes, objects, entries })
    }

    pub fn render(&self) -> String {
        let mut s = format!("{MANIFEST_MAGIC} classes={} objects={}\n", self.classes, self.objects);
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\t{}\n", e.image.display(), e.scores.display(), e.class));
        }
        s
    }

    /// Reads a manifest and makes its entry paths absolute relative to its directory.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
        let mut m = Self::parse(&text).map_err(|e| e.in_file(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &mut m.entries {
            e.image = base.join(&e.image);
            e.scores = base.join(&e.scores);
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, self.render().as_bytes())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for e in &self.entries {
            c[e.class] += 1;
        }
        c
    }
}
