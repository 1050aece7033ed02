//! Named parameter storage with seeded initialization.
//!
//! Every network in the crate is built through a [`ParamBuilder`], which
//! either creates parameters from a seeded ChaCha stream or reads them from an
//! existing [`ParamSet`]. Candle's own initializers draw from a process-global
//! RNG, so they are never used here.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// How a fresh parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-b, b]` with `b = gain / sqrt(fan_in)`.
    FanInUniform {
        fan_in: usize,
        gain: f64,
    },
}

/// An ordered collection of named trainable variables.
#[derive(Clone, Default)]
pub struct ParamSet {
    vars: BTreeMap<String, Var>,
}

impl std::fmt::Debug for ParamSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamSet")
            .field("len", &self.vars.len())
            .field("elements", &self.element_count())
            .finish()
    }
}

impl ParamSet {
    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Variables in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Deep copy; the returned set shares no storage with `self`.
    pub fn deep_clone(&self) -> Result<ParamSet> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.vars {
            vars.insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(ParamSet { vars })
    }

    /// Hex SHA-256 over names, shapes and little-endian f32 values.
    pub fn content_hash(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in &self.vars {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for d in var.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for x in flat_f32(var.as_tensor())? {
                hasher.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    /// Flattened `(name, shape, values)` triples for serialization.
    pub fn export(&self) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.dims().to_vec(), flat_f32(v.as_tensor())?)))
            .collect()
    }

    pub fn import(entries: Vec<(String, Vec<usize>, Vec<f32>)>) -> Result<ParamSet> {
        let mut vars = BTreeMap::new();
        for (name, shape, data) in entries {
            let expected: usize = shape.iter().product();
            if expected != data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {shape:?} needs {expected} values, found {}",
                    data.len()
                )));
            }
            let t = Tensor::from_vec(data, shape, &Device::Cpu)?;
            vars.insert(name, Var::from_tensor(&t)?);
        }
        Ok(ParamSet { vars })
    }

    /// Union of two sets; names in `other` are prefixed with `prefix.`.
    pub fn merged(&self, prefix: &str, other: &ParamSet) -> ParamSet {
        let mut vars = self.vars.clone();
        for (k, v) in &other.vars {
            vars.insert(format!("{prefix}.{k}"), v.clone());
        }
        ParamSet { vars }
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.vars.len() != other.vars.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: expected {}, found {}",
                self.vars.len(),
                other.vars.len()
            )));
        }
        for (name, var) in &self.vars {
            match other.vars.get(name) {
                Some(o) if o.dims() == var.dims() => {}
                Some(o) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name}: expected shape {:?}, found {:?}",
                        var.dims(),
                        o.dims()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        Ok(())
    }
}

pub(crate) fn flat_f32(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
}

struct BuildState {
    params: ParamSet,
    rng: ChaCha8Rng,
    from_existing: bool,
    track: bool,
}

/// Hands out parameter tensors under a hierarchical name prefix.
///
/// With `track = false` the returned tensors are detached: gradients never
/// flow into them, which is how frozen components are realized.
#[derive(Clone)]
pub struct ParamBuilder {
    state: Rc<RefCell<BuildState>>,
    prefix: String,
}

impl ParamBuilder {
    /// Fresh parameters drawn from `seed`.
    pub fn fresh(seed: u64, track: bool) -> Self {
        Self {
            state: Rc::new(RefCell::new(BuildState {
                params: ParamSet::default(),
                rng: ChaCha8Rng::seed_from_u64(seed),
                from_existing: false,
                track,
            })),
            prefix: String::new(),
        }
    }

    /// Reuses the variables of `params`; building fails on any name or
    /// shape the set does not contain.
    pub fn existing(params: &ParamSet, track: bool) -> Self {
        Self {
            state: Rc::new(RefCell::new(BuildState {
                params: params.clone(),
                rng: ChaCha8Rng::seed_from_u64(0),
                from_existing: true,
                track,
            })),
            prefix: String::new(),
        }
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Self {
            state: self.state.clone(),
            prefix,
        }
    }

    pub fn get(&self, shape: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let full = self.pp(name).prefix;
        let mut st = self.state.borrow_mut();
        if let Some(var) = st.params.vars.get(&full) {
            if var.dims() != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {full}: expected shape {shape:?}, found {:?}",
                    var.dims()
                )));
            }
            let t = var.as_tensor();
            return Ok(if st.track { t.clone() } else { t.detach() });
        }
        if st.from_existing {
            return Err(Error::Checkpoint(format!("missing parameter {full}")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::FanInUniform { fan_in, gain } => {
                let bound = gain / (fan_in.max(1) as f64).sqrt();
                (0..n)
                    .map(|_| st.rng.random_range(-bound..bound) as f32)
                    .collect()
            }
        };
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &Device::Cpu)?)?;
        let t = var.as_tensor().clone();
        let track = st.track;
        st.params.vars.insert(full, var);
        Ok(if track { t } else { t.detach() })
    }

    /// The parameters created or reused so far.
    pub fn params(&self) -> ParamSet {
        self.state.borrow().params.clone()
    }
}
