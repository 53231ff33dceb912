//! Named parameter storage and the checkpoint container.
//!
//! Checkpoint layout: a magic line, one line of compact JSON describing the
//! parameters (name and shape, in order) plus an optional embedded model
//! config, then every parameter's values as little-endian `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "QUICKADAPT-CKPT v1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

/// Parameters registered as leaves on one tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Re-keys tape gradients by parameter name.
    pub fn named_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(n, v)| grads.get(*v).map(|g| (n.clone(), g.clone())))
            .collect()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.params.insert(name.into(), tensor.with_grad());
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if slot.shape() != tensor.shape() {
            return Err(Error::shape(
                "set_param",
                format!("`{name}`: {:?} vs {:?}", slot.shape(), tensor.shape()),
            ));
        }
        *slot = tensor.with_grad();
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|(n, t)| (n.clone(), tape.leaf(t.clone())))
                .collect(),
        }
    }

    /// Binds every parameter as a non-differentiable constant.
    pub fn bind_constant(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|(n, t)| (n.clone(), tape.constant(t.clone())))
                .collect(),
        }
    }

    /// Bit pattern of every value, for exact comparisons.
    pub fn fingerprint(&self) -> Vec<u64> {
        self.params
            .values()
            .flat_map(|t| t.data().iter().map(|x| x.to_bits()))
            .collect()
    }

    pub fn save(&self, path: &Path, config: Option<&serde_json::Value>) -> Result<()> {
        let header = Header {
            config: config.cloned(),
            params: self
                .params
                .iter()
                .map(|(n, t)| ParamEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let mut buf = Vec::with_capacity(64 + 8 * self.num_scalars());
        writeln!(buf, "{MAGIC}").unwrap();
        serde_json::to_writer(&mut buf, &header)?;
        buf.push(b'\n');
        for t in self.params.values() {
            for x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint, returning the parameters and the embedded config.
    pub fn load(path: &Path) -> Result<(ParamStore, Option<serde_json::Value>)> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let mut line = String::new();
        reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if line.trim_end() != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: not a checkpoint (bad magic)",
                path.display()
            )));
        }
        line.clear();
        reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        let header: Header = serde_json::from_str(line.trim_end())?;
        let mut store = ParamStore::new();
        let mut bytes = [0u8; 8];
        for entry in header.params {
            let n: usize = entry.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                reader.read_exact(&mut bytes).map_err(|e| {
                    Error::Checkpoint(format!("{}: truncated at `{}`: {e}", path.display(), entry.name))
                })?;
                data.push(f64::from_le_bytes(bytes));
            }
            store.insert(entry.name, Tensor::new(&entry.shape, data)?);
        }
        if reader.read(&mut bytes).map_err(|e| Error::io(path, e))? != 0 {
            return Err(Error::Checkpoint(format!("{}: trailing bytes", path.display())));
        }
        Ok((store, header.config))
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: Option<serde_json::Value>,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}
