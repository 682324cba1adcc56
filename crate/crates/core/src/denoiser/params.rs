//! Named, seeded trainable parameters.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug)]
struct Inner {
    seed: u64,
    dtype: DType,
    device: Device,
    vars: BTreeMap<String, Var>,
}

/// Shared parameter table; clones with different prefixes write to the same table.
///
/// Every tensor is initialized from its own ChaCha stream keyed by its full
/// name, so values do not depend on construction order.
#[derive(Debug, Clone)]
pub struct Params {
    inner: Arc<Mutex<Inner>>,
    prefix: String,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

impl Params {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Params {
            inner: Arc::new(Mutex::new(Inner {
                seed,
                dtype,
                device: device.clone(),
                vars: BTreeMap::new(),
            })),
            prefix: String::new(),
        }
    }

    /// Scope for a sub-module.
    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Params {
            inner: self.inner.clone(),
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.inner.lock().unwrap().dtype
    }

    pub fn device(&self) -> Device {
        self.inner.lock().unwrap().device.clone()
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn create(&self, name: &str, dims: &[usize], fill: impl Fn(&mut ChaCha8Rng) -> f64) -> Result<Tensor> {
        let full = self.full_name(name);
        let mut inner = self.inner.lock().unwrap();
        if inner.vars.contains_key(&full) {
            candle_core::bail!("parameter {full} defined twice");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(inner.seed);
        rng.set_stream(fnv1a(&full));
        let n: usize = dims.iter().product();
        let values: Vec<f64> = (0..n).map(|_| fill(&mut rng)).collect();
        let t = Tensor::from_vec(values, dims, &inner.device)?.to_dtype(inner.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        inner.vars.insert(full, var);
        Ok(out)
    }

    /// Uniform in [−bound, bound).
    pub fn uniform(&self, name: &str, dims: &[usize], bound: f64) -> Result<Tensor> {
        self.create(name, dims, |r| r.random_range(-bound..bound))
    }

    pub fn constant(&self, name: &str, dims: &[usize], value: f64) -> Result<Tensor> {
        self.create(name, dims, |_| value)
    }

    /// All variables sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.inner
            .lock()
            .unwrap()
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.inner.lock().unwrap().vars.get(name).cloned()
    }

    pub fn num_elements(&self) -> usize {
        self.inner.lock().unwrap().vars.values().map(|v| v.elem_count()).sum()
    }
}
