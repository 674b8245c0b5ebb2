//! Named parameter storage, initialization, and checkpoint files.
//!
//! A checkpoint is two files: the payload (every parameter flattened, in
//! registration order, as little-endian `f32`) and a text manifest at
//! `<payload>.manifest` holding metadata lines and one
//! `param <name> <offset> <shape>` line per parameter, where `offset` counts
//! `f32` elements and `shape` is `x`-joined, e.g. `3x3x16x32`.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    lookup: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.lookup.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let id = ParamId(self.values.len());
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    /// He-normal weights (std `sqrt(2 / fan_in)`).
    pub fn add_he(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ParamId {
        self.add_normal(name, shape, (2.0 / fan_in as f64).sqrt(), rng)
    }

    /// Zero-mean normal weights with the given std.
    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut impl Rng) -> ParamId {
        let normal = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| round_f32(normal.sample(rng))).collect();
        self.add(name, Tensor::from_vec(shape.to_vec(), data).expect("shape"))
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Tensor::full(shape, value))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.values.iter_mut()
    }

    /// Writes the payload and manifest, each through a temporary file that is
    /// renamed into place.
    pub fn save_checkpoint(&self, path: &Path, metadata: &[(String, String)]) -> Result<()> {
        let mut payload = Vec::with_capacity(self.scalar_count() * 4);
        let mut manifest = String::from("# cscn checkpoint v1\n");
        for (key, value) in metadata {
            if key.contains(char::is_whitespace) || value.contains('\n') {
                return Err(Error::Checkpoint(format!("bad metadata entry `{key}`")));
            }
            manifest.push_str(&format!("meta {key}={value}\n"));
        }
        let mut offset = 0;
        for (_, name, t) in self.iter() {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            manifest.push_str(&format!("param {name} {offset} {}\n", shape.join("x")));
            for &v in t.data() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
            offset += t.len();
        }
        write_atomic(path, &payload)?;
        write_atomic(&manifest_path(path), manifest.as_bytes())
    }

    /// Loads a checkpoint, returning the store and its metadata entries.
    pub fn load_checkpoint(path: &Path) -> Result<(Self, Vec<(String, String)>)> {
        let manifest = fs::read_to_string(manifest_path(path))?;
        let payload = fs::read(path)?;
        if payload.len() % 4 != 0 {
            return Err(Error::Checkpoint("payload length not a multiple of 4".into()));
        }
        let floats: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut store = Self::new();
        let mut metadata = Vec::new();
        for line in manifest.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(entry) = line.strip_prefix("meta ") {
                let (k, v) = entry
                    .split_once('=')
                    .ok_or_else(|| Error::Checkpoint(format!("bad meta line `{line}`")))?;
                metadata.push((k.to_string(), v.to_string()));
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [tag, name, offset, shape] = fields[..] else {
                return Err(Error::Checkpoint(format!("bad manifest line `{line}`")));
            };
            if tag != "param" {
                return Err(Error::Checkpoint(format!("unknown manifest tag `{tag}`")));
            }
            let offset: usize = offset
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad offset in `{line}`")))?;
            let shape: Vec<usize> = shape
                .split('x')
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|_| Error::Checkpoint(format!("bad shape in `{line}`")))?;
            let n: usize = shape.iter().product();
            let slice = floats
                .get(offset..offset + n)
                .ok_or_else(|| Error::Checkpoint(format!("parameter `{name}` exceeds payload")))?;
            let data = slice.iter().map(|&v| v as f64).collect();
            store.add(name, Tensor::from_vec(shape, data)?);
        }
        if store.scalar_count() != floats.len() {
            return Err(Error::Checkpoint(format!(
                "manifest covers {} values, payload holds {}",
                store.scalar_count(),
                floats.len()
            )));
        }
        Ok((store, metadata))
    }

    /// Copies values from `other` by name; both stores must hold the same
    /// names with the same shapes.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, checkpoint has {}",
                self.len(),
                other.len()
            )));
        }
        for (i, name) in self.names.iter().enumerate() {
            let src = other
                .id(name)
                .map(|id| other.get(id))
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks `{name}`")))?;
            if src.shape() != self.values[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    src.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = src.clone();
        }
        Ok(())
    }
}

/// Rounds to the nearest `f32`, the precision parameters are stored at.
pub fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
