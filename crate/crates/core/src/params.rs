//! Named parameter tensors and their on-disk checkpoint form.
//!
//! A checkpoint directory holds `index.txt` with one `<name>\t<shape>` line
//! per parameter (shape as comma-separated extents) and `<name>.npy` for
//! each entry.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use thiserror::Error;

use crate::npy::{read_npy_file, write_npy_file, NpyArray, NpyError};
use crate::tensor::{Scalar, Tensor4};

pub const INDEX_FILE: &str = "index.txt";

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("duplicate parameter name `{0}`")]
    Duplicate(String),
    #[error("unknown parameter `{0}`")]
    Missing(String),
    #[error("parameter `{name}`: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("index line {line}: {msg}")]
    Index { line: usize, msg: String },
    #[error("{path}: {source}")]
    Npy { path: PathBuf, source: NpyError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub learnable: bool,
}

impl Param {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rank-4 view; lower-rank shapes are padded with trailing ones.
    pub fn dims4(&self) -> [usize; 4] {
        let mut d = [1; 4];
        for (slot, &e) in d.iter_mut().zip(&self.shape) {
            *slot = e;
        }
        d
    }

    pub fn tensor<T: Scalar>(&self) -> Tensor4<T> {
        Tensor4 { dims: self.dims4(), data: self.data.iter().map(|&v| T::from_f64(v as f64)).collect() }
    }
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

/// Ordered parameter collection; iteration order is insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>, learnable: bool) -> Result<(), ParamError> {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), data.len(), "parameter `{name}` shape/data mismatch");
        if self.params.contains_key(&name) {
            return Err(ParamError::Duplicate(name));
        }
        self.params.insert(name.clone(), Param { name, shape, data, learnable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Param, ParamError> {
        self.get(name).ok_or_else(|| ParamError::Missing(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.values_mut()
    }

    pub fn learnable(&self) -> impl Iterator<Item = &Param> {
        self.iter().filter(|p| p.learnable)
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

    /// Element count of learnable parameters.
    pub fn learnable_count(&self) -> usize {
        self.learnable().map(Param::len).sum()
    }

    pub fn index_text(&self) -> String {
        let mut out = String::new();
        for p in self.iter() {
            let _ = writeln!(out, "{}\t{}", p.name, shape_text(&p.shape));
        }
        out
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<(), ParamError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for p in self.iter() {
            let path = dir.join(format!("{}.npy", p.name));
            write_npy_file(&path, &NpyArray::new(p.shape.clone(), p.data.clone()))
                .map_err(|source| ParamError::Npy { path, source })?;
        }
        std::fs::write(dir.join(INDEX_FILE), self.index_text())?;
        Ok(())
    }

    /// Reads every indexed tensor, preserving index order. Learnable flags
    /// are not stored on disk and default to `true`; use [`Self::load_into`]
    /// to restore into an existing layout.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, ParamError> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join(INDEX_FILE))?;
        let mut store = ParamStore::new();
        for (k, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: &str| ParamError::Index { line: k + 1, msg: msg.to_string() };
            let (name, shape) = line.split_once('\t').ok_or_else(|| bad("expected `<name>\\t<shape>`"))?;
            let shape: Vec<usize> = if shape.trim().is_empty() {
                Vec::new()
            } else {
                shape.split(',').map(|s| s.trim().parse::<usize>()).collect::<Result<_, _>>().map_err(|_| bad("bad shape"))?
            };
            let path = dir.join(format!("{name}.npy"));
            let arr = read_npy_file(&path).map_err(|source| ParamError::Npy { path, source })?;
            if arr.shape != shape {
                return Err(ParamError::ShapeMismatch { name: name.to_string(), expected: shape, found: arr.shape });
            }
            store.insert(name, arr.shape, arr.data, true)?;
        }
        Ok(store)
    }

    /// Overwrites values from a checkpoint directory, requiring the same
    /// names and shapes.
    pub fn load_into(&mut self, dir: impl AsRef<Path>) -> Result<(), ParamError> {
        let loaded = ParamStore::load_dir(dir)?;
        self.assign_from(&loaded)
    }

    pub fn assign_from(&mut self, other: &ParamStore) -> Result<(), ParamError> {
        for p in self.params.values() {
            let q = other.require(&p.name)?;
            if q.shape != p.shape {
                return Err(ParamError::ShapeMismatch { name: p.name.clone(), expected: p.shape.clone(), found: q.shape.clone() });
            }
        }
        if let Some(extra) = other.names().find(|n| !self.params.contains_key(*n)) {
            return Err(ParamError::Missing(extra.to_string()));
        }
        for p in self.params.values_mut() {
            p.data.clone_from(&other.params[&p.name].data);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("enc0.conv.weight", vec![2, 1, 3, 3], (0..18).map(|v| v as f32 * 0.1).collect(), true).unwrap();
        s.insert("enc0.norm.running_var", vec![2], vec![1.0, 2.5], false).unwrap();
        s
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = sample();
        assert!(matches!(s.insert("enc0.conv.weight", vec![1], vec![0.0], true), Err(ParamError::Duplicate(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample();
        s.save_dir(dir.path()).unwrap();
        let index = std::fs::read_to_string(dir.path().join(INDEX_FILE)).unwrap();
        assert_eq!(index, "enc0.conv.weight\t2,1,3,3\nenc0.norm.running_var\t2\n");
        let mut t = sample();
        t.iter_mut().for_each(|p| p.data.iter_mut().for_each(|v| *v = -1.0));
        t.load_into(dir.path()).unwrap();
        assert_eq!(t, s);
    }

    #[test]
    fn load_into_checks_shapes() {
        let dir = tempfile::tempdir().unwrap();
        sample().save_dir(dir.path()).unwrap();
        let mut other = ParamStore::new();
        other.insert("enc0.conv.weight", vec![18], vec![0.0; 18], true).unwrap();
        other.insert("enc0.norm.running_var", vec![2], vec![0.0; 2], false).unwrap();
        assert!(matches!(other.load_into(dir.path()), Err(ParamError::ShapeMismatch { .. })));
    }

    #[test]
    fn dims4_pads() {
        let s = sample();
        assert_eq!(s.get("enc0.norm.running_var").unwrap().dims4(), [2, 1, 1, 1]);
        assert_eq!(s.learnable_count(), 18);
    }
}
