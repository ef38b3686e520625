//! Named parameter storage shared by every learnable component.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_snapshot, write_snapshot, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat list of named tensors. Names are dotted paths such as
/// `fusion.attn2.wq.0` and must be unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    schema: u32,
    params: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    path: String,
    file: String,
    shape: Vec<usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter path {name}")));
        }
        if !value.is_finite() {
            return Err(Error::contract(format!("parameter {name} is not finite")));
        }
        let id = self.values.len();
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(id))
    }

    /// Uniform Glorot initialisation for a `fan_in x fan_out` matrix.
    pub fn add_glorot<R: Rng>(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::new(vec![fan_in, fan_out], data)?)
    }

    pub fn add_normal<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut R) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * standard_normal(rng)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<ParamId> {
        self.add(name, Tensor::full(shape, value))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.values.iter().map(|t| Tensor::zeros(t.shape())).collect()
    }

    /// Writes one snapshot per parameter plus `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.len());
        for (name, value) in self.names.iter().zip(&self.values) {
            let file = format!("{name}.bin");
            let mut buf = Vec::new();
            write_snapshot(&mut buf, value)?;
            fs::write(dir.join(&file), buf)?;
            entries.push(ManifestEntry {
                path: name.clone(),
                file,
                shape: value.shape().to_vec(),
            });
        }
        let manifest = CheckpointManifest {
            schema: 1,
            params: entries,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    /// Overwrites every parameter of `self` from a checkpoint written by
    /// [`ParamStore::save`]. Paths and shapes must match exactly.
    pub fn load_into(&mut self, dir: &Path) -> Result<()> {
        let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if manifest.params.len() != self.len() {
            return Err(Error::Snapshot(format!(
                "checkpoint has {} parameters, model expects {}",
                manifest.params.len(),
                self.len()
            )));
        }
        for entry in manifest.params {
            let id = self
                .find(&entry.path)
                .ok_or_else(|| Error::Snapshot(format!("unknown parameter {}", entry.path)))?;
            let t = read_snapshot(&fs::read(dir.join(&entry.file))?[..])?;
            if t.shape() != self.get(id).shape() {
                return Err(Error::dim("load_into", self.get(id).shape(), t.shape()));
            }
            self.values[id.0] = t;
        }
        Ok(())
    }
}

pub(crate) fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; the second variate is discarded to keep one draw per call.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::scalar(1.0)).unwrap();
        assert!(s.add("a", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        s.add_glorot("layer.w", 3, 4, &mut rng).unwrap();
        s.add_const("layer.b", &[4], 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path()).unwrap();

        let mut t = ParamStore::new();
        t.add_const("layer.w", &[3, 4], 0.0).unwrap();
        t.add_const("layer.b", &[4], 0.0).unwrap();
        t.load_into(dir.path()).unwrap();
        assert_eq!(s, t);

        let mut wrong = ParamStore::new();
        wrong.add_const("layer.w", &[4, 3], 0.0).unwrap();
        wrong.add_const("layer.b", &[4], 0.0).unwrap();
        assert!(wrong.load_into(dir.path()).is_err());
    }
}
