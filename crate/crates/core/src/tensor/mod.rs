//! Dense f64 tensors, a tape-based reverse-mode autodiff graph, and the
//! optimizer pieces used to train the model.

mod check;
mod graph;
mod optim;

pub use check::{
    finite_diff_check, finite_diff_check_params, finite_diff_check_params_with_fault, finite_diff_check_with_fault,
};
pub use graph::{argmax_rows, Gradients, Graph, OpKind, Var};
pub use optim::{clip_grad_l2, AdamConfig, OptimizerState};

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{BmgfError, Result};

/// Row-major dense array of 64-bit floats with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&s| s == 0) {
            return Err(BmgfError::dim("tensor", format!("extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(BmgfError::dim(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n], grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value], grad: None }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data, grad: None }
    }

    /// 2-D tensor built from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(BmgfError::dim("tensor", "ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row `r` of a 2-D tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        match (on, self.grad.is_some()) {
            (true, false) => self.grad = Some(vec![0.0; self.data.len()]),
            (false, true) => self.grad = None,
            _ => {}
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub tensor: Tensor,
    /// Whether the L2 penalty applies (weights yes, biases and norm gains no).
    pub decay: bool,
}

/// How a freshly registered parameter is initialized.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    Normal(f64),
    Constant(f64),
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Parameter>,
}

/// Serialized form of one parameter.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        decay: bool,
        rng: &mut R,
    ) -> ParamId {
        assert!(!self.params.contains_key(name), "duplicate parameter {name}");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Constant(c) => vec![c; n],
        };
        let mut tensor = Tensor::new(shape.to_vec(), data).expect("positive extents");
        tensor.set_requires_grad(true);
        let (idx, _) = self.params.insert_full(name.to_string(), Parameter { tensor, decay });
        ParamId(idx)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params.get_index(id.0).unwrap().0
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.tensor)
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    /// Trainable parameters are the ones whose tensor carries a gradient.
    pub fn set_trainable(&mut self, id: ParamId, on: bool) {
        self.params[id.0].tensor.set_requires_grad(on);
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.params[id.0].tensor.requires_grad()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.tensor.zero_grad();
        }
    }

    /// Adds the parameter gradients of one backward pass into the stored grads.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (idx, p) in self.params.values_mut().enumerate() {
            if let (Some(dst), Some(src)) = (p.tensor.grad_mut(), grads.param(ParamId(idx))) {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }

    /// Like [`accumulate`](Self::accumulate) for gradients collected per
    /// parameter index.
    pub fn accumulate_raw(&mut self, grads: &[Option<Vec<f64>>]) {
        for (p, src) in self.params.values_mut().zip(grads) {
            if let (Some(dst), Some(src)) = (p.tensor.grad_mut(), src) {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }

    pub fn to_named_arrays(&self) -> Vec<NamedArray> {
        self.params
            .iter()
            .map(|(name, p)| NamedArray {
                name: name.clone(),
                shape: p.tensor.shape().to_vec(),
                values: p.tensor.data().to_vec(),
            })
            .collect()
    }

    /// Overwrites values from serialized arrays; names and shapes must match exactly.
    pub fn load_named_arrays(&mut self, arrays: &[NamedArray]) -> Result<()> {
        if arrays.len() != self.params.len() {
            return Err(BmgfError::Format(format!(
                "checkpoint has {} parameters, model expects {}",
                arrays.len(),
                self.params.len()
            )));
        }
        for arr in arrays {
            let p = self
                .params
                .get_mut(&arr.name)
                .ok_or_else(|| BmgfError::Format(format!("unexpected parameter {}", arr.name)))?;
            if p.tensor.shape() != arr.shape.as_slice() || p.tensor.numel() != arr.values.len() {
                return Err(BmgfError::Format(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    arr.name,
                    arr.shape,
                    p.tensor.shape()
                )));
            }
            p.tensor.data_mut().copy_from_slice(&arr.values);
        }
        Ok(())
    }
}
