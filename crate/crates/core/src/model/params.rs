//! Named parameter tensors, their deterministic initialization, and the
//! checkpoint file format.
//!
//! A checkpoint is `MCXPARM1`, a little-endian `u64` manifest length, a JSON
//! manifest (`{"meta": .., "tensors": [{"name", "shape"}]}`), then every tensor
//! as raw little-endian `f32` in manifest order.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Float;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MCXPARM1";

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `+/- 1/sqrt(fan_in)`.
    FanIn(usize),
    Const(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

impl ParamSpec {
    pub fn fan_in(name: impl Into<String>, rows: usize, cols: usize, fan_in: usize) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
            init: Init::FanIn(fan_in),
        }
    }

    /// A pointwise (1x1) convolution weight `out x in`.
    pub fn conv(name: impl Into<String>, out: usize, inp: usize) -> Self {
        Self::fan_in(name, out, inp, inp)
    }

    pub fn constant(name: impl Into<String>, rows: usize, cols: usize, v: f64) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
            init: Init::Const(v),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T> {
    names: Vec<String>,
    tensors: Vec<Array2<T>>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

impl<T: Float> ParameterSet<T> {
    pub fn from_named(named: Vec<(String, Array2<T>)>) -> Result<Self> {
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        let mut index = HashMap::new();
        for (i, (name, t)) in named.into_iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate parameter {name}")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            names,
            tensors,
            index,
        })
    }

    /// Draws every tensor in layout order from one seeded stream.
    pub fn init(layout: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let named = layout
            .iter()
            .map(|spec| {
                let t = match spec.init {
                    Init::FanIn(fan_in) => {
                        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                        Array2::from_shape_simple_fn((spec.rows, spec.cols), || {
                            T::from_f64_lossy(rng.random_range(-bound..bound))
                        })
                    }
                    Init::Const(v) => Array2::from_elem((spec.rows, spec.cols), T::from_f64_lossy(v)),
                };
                (spec.name.clone(), t)
            })
            .collect();
        Self::from_named(named).expect("layouts have unique names")
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Array2<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<T>] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Array2<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<T>> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Float>(&self) -> ParameterSet<U> {
        ParameterSet {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.mapv(|v| U::from_f64_lossy(v.to_f64_lossy())))
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Errors unless names and shapes match `layout` exactly.
    pub fn check_layout(&self, layout: &[ParamSpec]) -> Result<()> {
        if layout.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                layout.len(),
                self.len()
            )));
        }
        for spec in layout {
            let t = self.get(&spec.name).ok_or_else(|| {
                Error::Checkpoint(format!("missing tensor {}", spec.name))
            })?;
            if t.dim() != (spec.rows, spec.cols) {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    spec.name,
                    t.dim(),
                    (spec.rows, spec.cols)
                )));
            }
        }
        Ok(())
    }
}

impl ParameterSet<f32> {
    pub fn write_to(&self, mut w: impl Write, meta: &serde_json::Value) -> Result<()> {
        let manifest = Manifest {
            meta: meta.clone(),
            tensors: self
                .names
                .iter()
                .zip(&self.tensors)
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: [t.nrows(), t.ncols()],
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest)?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::with_capacity(self.num_scalars() * 4);
        for t in &self.tensors {
            for v in t.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<(Self, serde_json::Value)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a parameter file".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let manifest: Manifest = serde_json::from_slice(&json)?;
        let mut named = Vec::with_capacity(manifest.tensors.len());
        for entry in manifest.tensors {
            let [rows, cols] = entry.shape;
            let mut bytes = vec![0u8; rows * cols * 4];
            r.read_exact(&mut bytes).map_err(|e| {
                Error::Checkpoint(format!("truncated data for {}: {e}", entry.name))
            })?;
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            named.push((entry.name, t));
        }
        Ok((Self::from_named(named)?, manifest.meta))
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: &serde_json::Value) -> Result<()> {
        let f = std::fs::File::create(path.as_ref())?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w, meta)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, serde_json::Value)> {
        let f = std::fs::File::open(path.as_ref())?;
        Self::read_from(std::io::BufReader::new(f))
    }
}
