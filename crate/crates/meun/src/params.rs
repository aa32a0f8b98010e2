//! Named trainable parameters and non-trainable buffers (batch-norm running
//! statistics), owned by a model and addressed by stable ids.

use std::collections::HashMap;

use crate::tensor::{Scalar, Tensor};

/// Learning-rate group for the two-group optimizer: the encoder trains at a
/// tenth of the rate of the freshly initialized parts.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LrGroup {
    Backbone,
    Head,
}

/// Handle to a trainable parameter in a [`ParamStore`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(pub(crate) usize);

/// Handle to a non-trainable buffer in a [`ParamStore`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct BufId(pub(crate) usize);

/// Named trainable tensor with its gradient accumulator and momentum buffer.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub momentum: Tensor<T>,
    pub group: LrGroup,
}

#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Registration-ordered parameter and buffer storage. Registration order is
/// the deterministic iteration, initialization, and checkpoint order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    buffers: Vec<Buffer<T>>,
    names: HashMap<String, ()>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
            names: HashMap::new(),
        }
    }

    fn claim_name(&mut self, name: &str) {
        assert!(
            self.names.insert(name.to_string(), ()).is_none(),
            "duplicate parameter name `{name}`"
        );
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>, group: LrGroup) -> ParamId {
        let name = name.into();
        self.claim_name(&name);
        let shape = value.shape();
        self.params.push(Param {
            name,
            value,
            grad: Tensor::zeros(shape),
            momentum: Tensor::zeros(shape),
            group,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn register_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufId {
        let name = name.into();
        self.claim_name(&name);
        self.buffers.push(Buffer { name, value });
        BufId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufId) -> &Buffer<T> {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufId) -> &mut Buffer<T> {
        &mut self.buffers[id.0]
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalar values.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }
}
