//! Directory bundles of named MLBT tensors with a JSON manifest.
//!
//! ```text
//! <dir>/manifest.json   {"meta": {...}, "tensors": [{"role", "file", "shape"}]}
//! <dir>/<role>.mlbt
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_tensor_file, write_tensor_file, Tensor};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    role: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Bundle {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, role: &str, t: Tensor) {
        self.tensors.insert(role.to_string(), t);
    }

    pub fn get(&self, role: &str) -> Result<&Tensor> {
        self.tensors.get(role).ok_or_else(|| Error::Format(format!("bundle has no tensor '{role}'")))
    }

    pub fn take(&mut self, role: &str) -> Result<Tensor> {
        self.tensors.remove(role).ok_or_else(|| Error::Format(format!("bundle has no tensor '{role}'")))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (role, t) in &self.tensors {
            let file = format!("{role}.mlbt");
            write_tensor_file(dir.join(&file), t)?;
            entries.push(Entry { role: role.clone(), file, shape: t.shape().to_vec() });
        }
        let manifest = Manifest { meta: self.meta.clone(), tensors: entries };
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join(MANIFEST))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", dir.join(MANIFEST).display())))?;
        let mut tensors = BTreeMap::new();
        for e in manifest.tensors {
            let t = read_tensor_file(dir.join(&e.file))?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::Format(format!(
                    "{}: manifest says shape {:?}, file has {:?}",
                    e.file,
                    e.shape,
                    t.shape()
                )));
            }
            tensors.insert(e.role, t);
        }
        Ok(Self { meta: manifest.meta, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = Bundle::new(serde_json::json!({"kind": "test"}));
        b.insert("U", Tensor::eye(2));
        b.insert("b", Tensor::from_vec(vec![0.5]));
        b.save(dir.path()).unwrap();
        assert_eq!(Bundle::load(dir.path()).unwrap(), b);
    }

    #[test]
    fn shape_mismatch_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = Bundle::new(serde_json::json!({}));
        b.insert("U", Tensor::eye(2));
        b.save(dir.path()).unwrap();
        write_tensor_file(dir.path().join("U.mlbt"), &Tensor::eye(3)).unwrap();
        assert!(matches!(Bundle::load(dir.path()), Err(Error::Format(_))));
    }
}
