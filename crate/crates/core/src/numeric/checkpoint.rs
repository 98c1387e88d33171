//! On-disk parameter snapshots.
//!
//! A checkpoint is a directory holding `manifest.txt` plus one
//! little-endian blob per parameter. The manifest is `key = value` text:
//!
//! ```text
//! format = glcon-checkpoint
//! version = 1
//! precision = f64
//! meta.epoch = 3
//! param.0 = image.conv0.weight 16x1x3x3
//! ```
//!
//! Parameter `param.i` is stored in `<name>.bin`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const FORMAT: &str = "glcon-checkpoint";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Checkpoint(format!("unknown precision `{other}`"))),
        }
    }
}

/// Loaded checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub precision: Precision,
    pub meta: BTreeMap<String, String>,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

pub fn save(
    dir: &Path,
    params: &ParamStore,
    precision: Precision,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!(
        "format = {FORMAT}\nversion = {VERSION}\nprecision = {}\n",
        precision.as_str()
    );
    for (k, v) in meta {
        if k.contains('=') || v.contains('\n') {
            return Err(Error::Checkpoint(format!("unencodable metadata `{k}`")));
        }
        manifest.push_str(&format!("meta.{k} = {v}\n"));
    }
    for (i, p) in params.iter().enumerate() {
        if !valid_name(&p.name) {
            return Err(Error::Checkpoint(format!("invalid parameter name `{}`", p.name)));
        }
        let dims: Vec<String> = p.tensor.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("param.{i} = {} {}\n", p.name, dims.join("x")));
        let mut blob = Vec::with_capacity(p.tensor.len() * 8);
        for &v in p.tensor.data() {
            match precision {
                Precision::F64 => blob.extend_from_slice(&v.to_le_bytes()),
                Precision::F32 => blob.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
        let path = dir.join(format!("{}.bin", p.name));
        fs::write(&path, blob).map_err(|e| Error::io(path, e))?;
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries = BTreeMap::new();
    let mut order = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: lineno + 1,
            msg: "expected `key = value`".into(),
        })?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if k.starts_with("param.") {
            order.push(k.clone());
        }
        entries.insert(k, v);
    }
    if entries.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(Error::Checkpoint("not a glcon checkpoint".into()));
    }
    let version: u32 = entries
        .get("version")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Checkpoint("missing version".into()))?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let precision = Precision::parse(
        entries
            .get("precision")
            .ok_or_else(|| Error::Checkpoint("missing precision".into()))?,
    )?;

    let mut indexed: Vec<(usize, &String)> = Vec::new();
    for k in &order {
        let i: usize = k["param.".len()..]
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad key `{k}`")))?;
        indexed.push((i, k));
    }
    indexed.sort();
    let mut params = ParamStore::new();
    for (pos, (i, k)) in indexed.into_iter().enumerate() {
        if i != pos {
            return Err(Error::Checkpoint(format!("parameter index gap at {pos}")));
        }
        let spec = &entries[k];
        let (name, dims) = spec
            .split_once(' ')
            .ok_or_else(|| Error::Checkpoint(format!("bad parameter entry `{spec}`")))?;
        if !valid_name(name) {
            return Err(Error::Checkpoint(format!("invalid parameter name `{name}`")));
        }
        let shape: Vec<usize> = dims
            .split('x')
            .map(|d| d.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Checkpoint(format!("bad shape `{dims}`")))?;
        let blob_path = dir.join(format!("{name}.bin"));
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let width = match precision {
            Precision::F32 => 4,
            Precision::F64 => 8,
        };
        let expected: usize = shape.iter().product::<usize>() * width;
        if blob.len() != expected {
            return Err(Error::Checkpoint(format!(
                "blob for `{name}` has {} bytes, expected {expected}",
                blob.len()
            )));
        }
        let data: Vec<f64> = blob
            .chunks_exact(width)
            .map(|c| match precision {
                Precision::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
                Precision::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
            })
            .collect();
        params.register(name, Tensor::new(&shape, data)?)?;
    }
    let meta = entries
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("meta.").map(|m| (m.to_string(), v.clone())))
        .collect();
    Ok(Checkpoint {
        params,
        precision,
        meta,
    })
}
