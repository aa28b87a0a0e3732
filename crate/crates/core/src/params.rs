//! Named parameter storage shared by the generator and detector, plus the
//! single-file checkpoint format (named tensors + config echo + optimizer
//! state).

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tape::{Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
}

/// Handle to one registered parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of named learnable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, t: Tensor) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// Register with normal(0, std) initialization.
    pub fn register_normal(&mut self, name: &str, shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal_sample(rng) * std).collect();
        self.register(name, Tensor::new(shape, data))
    }

    pub fn register_zeros(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        self.register(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }
}

fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    loop {
        let u: f64 = rng.gen_range(f64::EPSILON..1.0);
        let v: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let z = (-2.0 * u.ln()).sqrt() * v.cos();
        if z.is_finite() {
            return z;
        }
    }
}

/// Binds parameters into a tape lazily so each parameter becomes exactly one
/// leaf per forward pass.
pub struct Binder<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Binder { store, vars: vec![None; store.len()] }
    }

    pub fn var(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = tape.leaf(self.store.tensor(id).clone());
        self.vars[id.0] = Some(v);
        v
    }

    /// Parameters touched by this pass, as (id, tape var) pairs.
    pub fn bound(&self) -> Vec<(ParamId, Var)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect()
    }
}

const MAGIC: &[u8; 8] = b"TAGFORG1";

/// Checkpoint: config echo, step counter, named tensors, optional momentum.
pub struct Checkpoint {
    pub config_echo: String,
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
    pub momentum: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        let echo = self.config_echo.as_bytes();
        f.write_u64::<LittleEndian>(echo.len() as u64)?;
        f.write_all(echo)?;
        f.write_u64::<LittleEndian>(self.step)?;
        for group in [&self.tensors, &self.momentum] {
            f.write_u64::<LittleEndian>(group.len() as u64)?;
            for (name, t) in group {
                let nb = name.as_bytes();
                f.write_u64::<LittleEndian>(nb.len() as u64)?;
                f.write_all(nb)?;
                f.write_u64::<LittleEndian>(t.shape.len() as u64)?;
                for &d in &t.shape {
                    f.write_u64::<LittleEndian>(d as u64)?;
                }
                for &v in &t.data {
                    f.write_f64::<LittleEndian>(v)?;
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Format("bad magic".into()));
        }
        let elen = f.read_u64::<LittleEndian>()? as usize;
        let mut echo = vec![0u8; elen];
        f.read_exact(&mut echo)?;
        let config_echo = String::from_utf8(echo)
            .map_err(|_| CheckpointError::Format("config echo is not utf-8".into()))?;
        let step = f.read_u64::<LittleEndian>()?;
        let mut groups = Vec::new();
        for _ in 0..2 {
            let n = f.read_u64::<LittleEndian>()? as usize;
            let mut group = Vec::with_capacity(n);
            for _ in 0..n {
                let nlen = f.read_u64::<LittleEndian>()? as usize;
                let mut nb = vec![0u8; nlen];
                f.read_exact(&mut nb)?;
                let name = String::from_utf8(nb)
                    .map_err(|_| CheckpointError::Format("tensor name is not utf-8".into()))?;
                let ndim = f.read_u64::<LittleEndian>()? as usize;
                let mut shape = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    shape.push(f.read_u64::<LittleEndian>()? as usize);
                }
                let numel: usize = shape.iter().product();
                let mut data = Vec::with_capacity(numel);
                for _ in 0..numel {
                    data.push(f.read_f64::<LittleEndian>()?);
                }
                group.push((name, Tensor::new(shape, data)));
            }
            groups.push(group);
        }
        let momentum = groups.pop().unwrap();
        let tensors = groups.pop().unwrap();
        Ok(Checkpoint { config_echo, step, tensors, momentum })
    }

    /// Copy checkpoint tensors into a freshly constructed store by name.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<(), CheckpointError> {
        let by_name: HashMap<&str, &Tensor> =
            self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let t = by_name
                .get(name.as_str())
                .ok_or_else(|| CheckpointError::Format(format!("missing tensor {name}")))?;
            if t.shape != store.tensor(id).shape {
                return Err(CheckpointError::Format(format!(
                    "shape mismatch for {name}: {:?} vs {:?}",
                    t.shape,
                    store.tensor(id).shape
                )));
            }
            *store.tensor_mut(id) = (*t).clone();
        }
        Ok(())
    }
}
