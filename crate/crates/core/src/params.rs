//! Named parameter store shared by every trainable component.
//!
//! Parameters are candle `Var`s registered under dotted names. Frozen entries
//! (the random conv feature extractors) live in the same store so that
//! checkpointing and the freeze invariant cover them, but they are excluded
//! from gradient updates.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};

use crate::rawio::RawArray;
use crate::rng::{hash_f32s, uniform_vec, SeedRng};
use crate::{Error, Result};

pub struct ParamStore {
    dev: Device,
    dtype: DType,
    names: Vec<String>,
    vars: Vec<Var>,
    frozen: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        ParamStore {
            dev: Device::Cpu,
            dtype,
            names: Vec::new(),
            vars: Vec::new(),
            frozen: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.dev
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Register a parameter from f32 data (converted to the store dtype).
    /// Returns a tensor handle that shares storage with the stored Var.
    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<f32>, frozen: bool) -> Result<Tensor> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let t = Tensor::from_vec(data, shape, &self.dev)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.index.insert(name.to_string(), self.vars.len());
        self.names.push(name.to_string());
        self.vars.push(var);
        self.frozen.push(frozen);
        Ok(handle)
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        let i = self
            .index
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        Ok(self.vars[*i].as_tensor().clone())
    }

    /// Overwrite a parameter in place (shape and dtype must match).
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let i = self
            .index
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        self.vars[*i].set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.index.get(name).map(|&i| self.frozen[i]).unwrap_or(false)
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.names
            .iter()
            .zip(&self.vars)
            .zip(&self.frozen)
            .filter(|(_, f)| !**f)
            .map(|((n, v), _)| (n.as_str(), v))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var, bool)> {
        self.names
            .iter()
            .zip(&self.vars)
            .zip(&self.frozen)
            .map(|((n, v), f)| (n.as_str(), v, *f))
    }

    pub fn num_values(&self) -> usize {
        self.vars.iter().map(|v| v.elem_count()).sum()
    }

    fn values_f32(&self, i: usize) -> Result<Vec<f32>> {
        let t = self.vars[i].as_tensor().to_dtype(DType::F32)?.flatten_all()?;
        Ok(t.to_vec1()?)
    }

    fn subset_hash(&self, frozen: bool) -> Result<u64> {
        // name-sorted so the hash is comparable across containers that may
        // iterate parameters in a different order
        let mut idx: Vec<usize> = (0..self.names.len())
            .filter(|&i| self.frozen[i] == frozen)
            .collect();
        idx.sort_by(|&a, &b| self.names[a].cmp(&self.names[b]));
        let mut all = Vec::new();
        for i in idx {
            all.extend(self.values_f32(i)?);
        }
        Ok(hash_f32s(&all))
    }

    /// Hash of all frozen parameter bytes; the freeze invariant asserts this
    /// is unchanged by training.
    pub fn frozen_hash(&self) -> Result<u64> {
        self.subset_hash(true)
    }

    pub fn trainable_hash(&self) -> Result<u64> {
        self.subset_hash(false)
    }

    pub fn to_arrays(&self) -> Result<Vec<(String, RawArray)>> {
        let mut out = Vec::with_capacity(self.vars.len());
        for (i, name) in self.names.iter().enumerate() {
            out.push((
                name.clone(),
                RawArray::F32 {
                    shape: self.vars[i].shape().dims().to_vec(),
                    data: self.values_f32(i)?,
                },
            ));
        }
        Ok(out)
    }

    /// Load values by name from a raw-array dump. Every stored parameter must
    /// be present with a matching shape.
    pub fn load_arrays(&self, arrays: &[(String, RawArray)]) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let arr = crate::rawio::find(arrays, name)?;
            let shape = self.vars[i].shape().dims();
            if arr.shape() != shape {
                return Err(Error::Data(format!(
                    "parameter {name}: checkpoint shape {:?} != model shape {:?}",
                    arr.shape(),
                    shape
                )));
            }
            let t = Tensor::from_vec(arr.as_f32()?.to_vec(), shape, &self.dev)?;
            self.set(name, &t)?;
        }
        Ok(())
    }
}

/// PyTorch-style uniform init for a linear layer: U(-1/sqrt(in), 1/sqrt(in)).
pub fn linear_init(rng: &mut SeedRng, out_dim: usize, in_dim: usize) -> (Vec<f32>, Vec<f32>) {
    let bound = 1.0 / (in_dim as f32).sqrt();
    (
        uniform_vec(rng, out_dim * in_dim, -bound, bound),
        uniform_vec(rng, out_dim, -bound, bound),
    )
}

pub fn conv_init(rng: &mut SeedRng, c_out: usize, c_in: usize, k: usize) -> (Vec<f32>, Vec<f32>) {
    let fan_in = c_in * k;
    let bound = 1.0 / (fan_in as f32).sqrt();
    (
        uniform_vec(rng, c_out * c_in * k, -bound, bound),
        uniform_vec(rng, c_out, -bound, bound),
    )
}

/// Orthogonal-style init: random rows of the (c_out, c_in*kh*kw) matrix made
/// mutually orthonormal by Gram-Schmidt, then scaled.
pub fn orthogonal_rows(rng: &mut SeedRng, rows: usize, cols: usize, gain: f32) -> Vec<f32> {
    let mut m: Vec<Vec<f32>> = (0..rows)
        .map(|_| crate::rng::normal_vec(rng, cols))
        .collect();
    for i in 0..rows {
        for j in 0..i.min(cols) {
            let (a, b) = {
                let dot: f32 = m[i].iter().zip(&m[j]).map(|(x, y)| x * y).sum();
                let nj: f32 = m[j].iter().map(|x| x * x).sum();
                (dot, nj.max(1e-12))
            };
            let c = a / b;
            for k in 0..cols {
                let s = m[j][k];
                m[i][k] -= c * s;
            }
        }
        let n: f32 = m[i].iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
        for v in m[i].iter_mut() {
            *v = *v / n * gain;
        }
    }
    m.into_iter().flatten().collect()
}

/// A linear layer bound to store parameters.
#[derive(Clone)]
pub struct LinearP {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearP {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut SeedRng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let (w, b) = linear_init(rng, out_dim, in_dim);
        Ok(LinearP {
            w: store.add(&format!("{name}.weight"), &[out_dim, in_dim], w, false)?,
            b: store.add(&format!("{name}.bias"), &[out_dim], b, false)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w_t = self.w.t()?;
        let y = match x.dims().len() {
            2 => x.matmul(&w_t)?,
            3 => x.broadcast_matmul(&w_t)?,
            r => {
                return Err(Error::Shape(format!("linear expects rank 2 or 3, got {r}")));
            }
        };
        Ok(y.broadcast_add(&self.b)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn add_get_set_round_trip() {
        let mut store = ParamStore::new(DType::F32);
        store.add("w", &[2, 2], vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
        let t = store.get("w").unwrap();
        assert_eq!(t.dims(), &[2, 2]);
        let nv = Tensor::from_vec(vec![0f32, 0.0, 0.0, 0.0], &[2, 2], &Device::Cpu).unwrap();
        store.set("w", &nv).unwrap();
        let back: Vec<f32> = store.get("w").unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(back, vec![0.0; 4]);
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut store = ParamStore::new(DType::F32);
        store.add("w", &[1], vec![0.0], false).unwrap();
        assert!(store.add("w", &[1], vec![0.0], false).is_err());
    }

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let m = orthogonal_rows(&mut rng_from_seed(1), 4, 16, 1.0);
        for i in 0..4 {
            for j in 0..4 {
                let dot: f32 = (0..16).map(|k| m[i * 16 + k] * m[j * 16 + k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-4, "({i},{j}) dot {dot}");
            }
        }
    }

    #[test]
    fn trainable_excludes_frozen() {
        let mut store = ParamStore::new(DType::F32);
        store.add("a", &[1], vec![1.0], true).unwrap();
        store.add("b", &[1], vec![1.0], false).unwrap();
        let names: Vec<&str> = store.trainable().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["b"]);
    }
}
