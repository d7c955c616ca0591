//! Seeded parameter store with a JSON-manifest + raw-blob dump format.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_seed, SeededRng};
use crate::tensor::Matrix;

/// Standard deviation of the truncated-normal weight fill.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("missing parameter {0}")]
    Missing(String),
    #[error("parameter {name}: expected {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("blob holds {found} values, manifest needs {expected}")]
    BlobLength { expected: usize, found: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    TruncatedNormal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, init: Init) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
            init,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    seed: u64,
    specs: Vec<ParamSpec>,
    tensors: BTreeMap<String, Matrix>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    tensors: Vec<ParamSpec>,
}

/// Fills every tensor from its own stream, seeded by `(seed, name)`, so a
/// tensor's values do not depend on which other tensors exist.
pub fn init_params(specs: &[ParamSpec], seed: u64) -> ParamStore {
    let tensors = specs
        .iter()
        .map(|spec| {
            let n = spec.rows * spec.cols;
            let data = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::TruncatedNormal => {
                    let mut rng = SeededRng::new(derive_seed(seed, &spec.name));
                    (0..n)
                        .map(|_| rng.truncated_normal(INIT_STD) as f32)
                        .collect()
                }
            };
            let m = Matrix::new(spec.rows, spec.cols, data).expect("length matches spec");
            (spec.name.clone(), m)
        })
        .collect();
    ParamStore {
        seed,
        specs: specs.to_vec(),
        tensors,
    }
}

impl ParamStore {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn get(&self, name: &str) -> Result<&Matrix, ParamError> {
        self.tensors
            .get(name)
            .ok_or_else(|| ParamError::Missing(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix, ParamError> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| ParamError::Missing(name.to_string()))
    }

    /// Looks up a tensor and checks its shape.
    pub fn expect(&self, name: &str, rows: usize, cols: usize) -> Result<&Matrix, ParamError> {
        let m = self.get(name)?;
        if m.shape() != (rows, cols) {
            return Err(ParamError::Shape {
                name: name.to_string(),
                expected: (rows, cols),
                found: m.shape(),
            });
        }
        Ok(m)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Matrix::is_finite)
    }

    /// Writes `<manifest>` (JSON) and `<blob>` (f32 little-endian values in
    /// manifest order).
    pub fn save(&self, manifest: &Path, blob: &Path) -> Result<(), ParamError> {
        let man = Manifest {
            seed: self.seed,
            tensors: self.specs.clone(),
        };
        fs::write(manifest, serde_json::to_vec_pretty(&man)?)?;
        let mut bytes = Vec::new();
        for spec in &self.specs {
            for v in self.get(&spec.name)?.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(blob, bytes)?;
        Ok(())
    }

    pub fn load(manifest: &Path, blob: &Path) -> Result<Self, ParamError> {
        let man: Manifest = serde_json::from_slice(&fs::read(manifest)?)?;
        let bytes = fs::read(blob)?;
        let expected: usize = man.tensors.iter().map(|s| s.rows * s.cols).sum();
        if bytes.len() != expected * 4 {
            return Err(ParamError::BlobLength {
                expected,
                found: bytes.len() / 4,
            });
        }
        let mut values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let mut tensors = BTreeMap::new();
        for spec in &man.tensors {
            let data: Vec<f32> = values.by_ref().take(spec.rows * spec.cols).collect();
            let m = Matrix::new(spec.rows, spec.cols, data).expect("blob length checked");
            tensors.insert(spec.name.clone(), m);
        }
        Ok(Self {
            seed: man.seed,
            specs: man.tensors,
            tensors,
        })
    }
}
