//! Named parameters, linear layers and low-rank adapters.
//!
//! Layers hold parameter *indices*, not tensors. A forward pass binds the
//! whole [`ParamStore`] onto a tape (at any precision) and layers look their
//! weights up by index, so the same model code serves 32-bit training and
//! 64-bit gradient checks.

use crate::error::{mismatch, TensorError};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::{kernels, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor<f32>,
    pub frozen: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<f32>) -> usize {
        let name = name.into();
        assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value,
            frozen: false,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: usize) -> &Param {
        &self.params[id]
    }

    pub fn value(&self, id: usize) -> &Tensor<f32> {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor<f32> {
        &mut self.params[id].value
    }

    pub fn set_frozen(&mut self, id: usize, frozen: bool) {
        self.params[id].frozen = frozen;
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn values(&self) -> Vec<Tensor<f32>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn set_values(&mut self, values: Vec<Tensor<f32>>) {
        debug_assert_eq!(values.len(), self.params.len());
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v;
        }
    }

    /// Records every parameter as a tape leaf; frozen ones get no gradient.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.cast(), !p.frozen)).collect()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// `U(−1/√fan_in, 1/√fan_in)`, the usual fan-in scaled uniform init.
pub fn fan_in_uniform(rng: &mut RngStream, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| ((2.0 * rng.uniform() - 1.0) * bound) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

pub fn normal(rng: &mut RngStream, shape: &[usize], std: f64) -> Tensor<f32> {
    rng.gauss_sample::<f64>(shape).map(|v| v * std).cast()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoraIds {
    pub a: usize,
    pub b: usize,
    pub rank: usize,
}

/// `y = x·Wᵀ + b`, optionally plus a low-rank branch `(x·B)·Aᵀ`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Linear {
    pub name: String,
    pub w: usize,
    pub bias: Option<usize>,
    pub lora: Option<LoraIds>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Fan-in uniform weights and bias.
    pub fn new(store: &mut ParamStore, rng: &mut RngStream, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), fan_in_uniform(rng, &[d_out, d_in], d_in));
        let b = store.add(format!("{name}.b"), fan_in_uniform(rng, &[d_out], d_in));
        Linear {
            name: name.to_string(),
            w,
            bias: Some(b),
            lora: None,
            d_in,
            d_out,
        }
    }

    /// Bias-free projection with `N(0, std²)` weights.
    pub fn projection(store: &mut ParamStore, rng: &mut RngStream, name: &str, d_in: usize, d_out: usize, std: f64) -> Self {
        let w = store.add(format!("{name}.w"), normal(rng, &[d_out, d_in], std));
        Linear {
            name: name.to_string(),
            w,
            bias: None,
            lora: None,
            d_in,
            d_out,
        }
    }

    /// Attaches a rank-`k` adapter: `A ~ N(0, 0.02²)`, `B = 0`. The base weight
    /// and bias are frozen.
    pub fn attach_lora(&mut self, store: &mut ParamStore, rng: &mut RngStream, rank: usize) {
        let a = store.add(format!("{}.lora_a", self.name), normal(rng, &[self.d_out, rank], 0.02));
        let b = store.add(format!("{}.lora_b", self.name), Tensor::zeros(vec![self.d_in, rank]));
        store.set_frozen(self.w, true);
        if let Some(bias) = self.bias {
            store.set_frozen(bias, true);
        }
        self.lora = Some(LoraIds { a, b, rank });
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var, TensorError> {
        let mut y = tape.matmul_nt(x, p[self.w])?;
        if let Some(b) = self.bias {
            y = tape.add_bias(y, p[b])?;
        }
        if let Some(l) = self.lora {
            let xb = tape.matmul(x, p[l.b])?;
            let delta = tape.matmul_nt(xb, p[l.a])?;
            y = tape.add(y, delta)?;
        }
        Ok(y)
    }

    /// The adapter of this layer, if any, read out of the store.
    pub fn adapter(&self, store: &ParamStore) -> Option<LoraAdapter> {
        self.lora.map(|l| LoraAdapter {
            a: store.value(l.a).clone(),
            b: store.value(l.b).clone(),
            target: format!("{}.w", self.name),
        })
    }
}

/// Low-rank update `ΔW = A·Bᵀ` with `A: d_out×k`, `B: d_in×k`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub a: Tensor<f32>,
    pub b: Tensor<f32>,
    pub target: String,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    fn check(&self, w: &Tensor<f32>) -> Result<(), TensorError> {
        let ok = w.shape().len() == 2
            && self.a.shape().len() == 2
            && self.b.shape().len() == 2
            && self.a.rows() == w.rows()
            && self.b.rows() == w.cols()
            && self.a.cols() == self.b.cols();
        if ok {
            Ok(())
        } else {
            Err(mismatch("lora", w.shape(), &[self.a.rows(), self.b.rows(), self.a.cols()]))
        }
    }

    /// `ΔW = A·Bᵀ`, materialised.
    pub fn delta(&self) -> Tensor<f32> {
        let (m, n, k) = (self.a.rows(), self.b.rows(), self.a.cols());
        let data = kernels::matmul_nt(self.a.data(), self.b.data(), m, k, n);
        Tensor::new(vec![m, n], data).expect("adapter shapes")
    }
}

/// `x·(W + A·Bᵀ)ᵀ` for row inputs `x: n×d_in`, as `x·Wᵀ + (x·B)·Aᵀ`.
pub fn lora_apply(w: &Tensor<f32>, adapter: &LoraAdapter, x: &Tensor<f32>) -> Result<Tensor<f32>, TensorError> {
    adapter.check(w)?;
    if x.shape().len() != 2 || x.cols() != w.cols() {
        return Err(mismatch("lora_apply", w.shape(), x.shape()));
    }
    let (n, d_in, d_out, k) = (x.rows(), w.cols(), w.rows(), adapter.rank());
    let base = kernels::matmul_nt(x.data(), w.data(), n, d_in, d_out);
    let xb = kernels::matmul_nn(x.data(), adapter.b.data(), n, d_in, k);
    let delta = kernels::matmul_nt(&xb, adapter.a.data(), n, k, d_out);
    let out = base.iter().zip(&delta).map(|(u, v)| u + v).collect();
    Tensor::new(vec![n, d_out], out)
}

/// `W + A·Bᵀ`.
pub fn lora_merge(w: &Tensor<f32>, adapter: &LoraAdapter) -> Result<Tensor<f32>, TensorError> {
    adapter.check(w)?;
    let delta = adapter.delta();
    let data = w.data().iter().zip(delta.data()).map(|(u, v)| u + v).collect();
    Tensor::new(w.shape().to_vec(), data)
}
