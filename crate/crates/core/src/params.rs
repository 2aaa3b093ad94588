//! Named parameters, initialisation and the SGD-with-momentum update.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TdmError};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub momentum: Tensor,
    /// Set once a backward pass has accumulated into `grad`.
    pub has_grad: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        let momentum = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
            momentum,
            has_grad: false,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Parameters keyed by dotted path (`tdm.L3.w`). Iteration order is the
/// lexicographic name order, which keeps checkpoints and updates stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(TdmError::Invalid(format!("duplicate parameter {}", name)));
        }
        self.params.insert(name.clone(), Parameter::new(name, value));
        Ok(())
    }

    /// Insert or overwrite, resetting grad and momentum.
    pub fn set(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        self.params.insert(name.clone(), Parameter::new(name, value));
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.params
            .get(name)
            .ok_or_else(|| TdmError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.params
            .get_mut(name)
            .ok_or_else(|| TdmError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.numel()).sum()
    }

    pub fn num_values_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .values()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.numel())
            .sum()
    }

    /// Copy every parameter under `prefix` from `other`, replacing local values.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) {
        for p in other.iter().filter(|p| p.name.starts_with(prefix)) {
            self.params.insert(p.name.clone(), p.clone());
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
            p.has_grad = false;
        }
    }

    pub fn reset_momentum(&mut self) {
        for p in self.params.values_mut() {
            p.momentum.fill(0.0);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|p| p.value.is_finite())
    }
}

/// `v <- mu * v + g; p <- p - lr * v`, then grads are zeroed.
pub fn sgd_step(store: &mut ParamStore, lr: Real, momentum: Real) -> Result<()> {
    if let Some(p) = store.iter().find(|p| !p.has_grad) {
        return Err(TdmError::MissingGrad(p.name.clone()));
    }
    for p in store.iter_mut() {
        let v = p.momentum.data_mut();
        let g = p.grad.data();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = momentum * *vi + *gi;
        }
        if lr != 0.0 {
            for (w, vi) in p.value.data_mut().iter_mut().zip(p.momentum.data()) {
                *w -= lr * *vi;
            }
        }
    }
    store.zero_grads();
    Ok(())
}

/// Deterministic per-tensor RNG derived from a run seed and a parameter name.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a over the name, mixed with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Centered uniform init with fan-in scaling, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
/// optionally multiplied by `gain`.
pub fn fan_in_uniform(shape: &[usize], fan_in: usize, gain: Real, seed: u64, name: &str) -> Tensor {
    let bound = gain * (6.0 / fan_in.max(1) as Real).sqrt();
    let mut rng = param_rng(seed, name);
    Tensor::uniform(shape, bound, &mut rng)
}

/// Add a conv layer `{prefix}.w` `[k, k, cin, cout]` and zero bias `{prefix}.b`.
pub fn add_conv(
    store: &mut ParamStore,
    prefix: &str,
    k: usize,
    cin: usize,
    cout: usize,
    gain: Real,
    seed: u64,
) -> Result<()> {
    let wname = format!("{}.w", prefix);
    let w = fan_in_uniform(&[k, k, cin, cout], k * k * cin, gain, seed, &wname);
    store.insert(wname, w)?;
    store.insert(format!("{}.b", prefix), Tensor::zeros(&[cout]))
}

/// Add a fully connected layer `{prefix}.w` `[out, in]` and zero bias.
pub fn add_linear(
    store: &mut ParamStore,
    prefix: &str,
    input: usize,
    output: usize,
    gain: Real,
    seed: u64,
) -> Result<()> {
    let wname = format!("{}.w", prefix);
    let w = fan_in_uniform(&[output, input], input, gain, seed, &wname);
    store.insert(wname, w)?;
    store.insert(format!("{}.b", prefix), Tensor::zeros(&[output]))
}
