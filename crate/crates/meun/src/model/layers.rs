//! Layer building blocks: parameter initialization, conv+BN+ReLU units, and
//! the two-conv block used as the basic convolutional unit everywhere.

use rand_chacha::ChaCha8Rng;

use crate::params::{BufId, LrGroup, ParamId, ParamStore};
use crate::tensor::tape::{BnMode, Tape, Var};
use crate::tensor::{Scalar, Shape, Tensor, TensorError};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Train mode uses batch statistics and updates running buffers; eval mode
/// normalizes with the stored running statistics.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameter registration context used while building a model.
pub struct Init<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
    pub group: LrGroup,
}

impl<'a, T: Scalar> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng, group: LrGroup) -> Self {
        Init { store, rng, group }
    }

    /// Zero-mean uniform with bound sqrt(6 / fan_in).
    pub fn conv_weight(&mut self, name: String, c_out: usize, c_in: usize, k: usize) -> ParamId {
        let bound = (6.0 / (c_in * k * k) as f64).sqrt();
        let w = Tensor::rand_uniform(Shape::new(c_out, c_in, k, k), bound, self.rng);
        self.store.register(name, w, self.group)
    }

    pub fn zero_bias(&mut self, name: String, c_out: usize) -> ParamId {
        self.store.register(name, Tensor::zeros(Shape::vector(1, c_out)), self.group)
    }

    pub fn linear_weight(&mut self, name: String, c_out: usize, c_in: usize) -> ParamId {
        let bound = (6.0 / c_in as f64).sqrt();
        let w = Tensor::rand_uniform(Shape::vector(c_out, c_in), bound, self.rng);
        self.store.register(name, w, self.group)
    }
}

/// Per-pass forward context: the tape being recorded, the parameter store
/// the layers bind from (and whose running stats train mode updates), and
/// the mode.
pub struct Context<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub params: &'a mut ParamStore<T>,
    pub mode: Mode,
}

impl<'a, T: Scalar> Context<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, params: &'a mut ParamStore<T>, mode: Mode) -> Self {
        Context { tape, params, mode }
    }

    pub fn bind(&mut self, id: ParamId) -> Var {
        self.tape.bind_param(self.params, id)
    }
}

/// 3x3 (or 1x1) convolution without bias, batch norm, ReLU.
pub struct ConvBnRelu {
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: BufId,
    running_var: BufId,
    dilation: usize,
}

impl ConvBnRelu {
    pub fn new<T: Scalar>(
        init: &mut Init<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        dilation: usize,
    ) -> Self {
        let weight = init.conv_weight(format!("{name}.conv.weight"), c_out, c_in, k);
        let gamma = init
            .store
            .register(format!("{name}.bn.gamma"), Tensor::full(Shape::vector(1, c_out), T::one()), init.group);
        let beta = init
            .store
            .register(format!("{name}.bn.beta"), Tensor::zeros(Shape::vector(1, c_out)), init.group);
        let running_mean = init
            .store
            .register_buffer(format!("{name}.bn.running_mean"), Tensor::zeros(Shape::vector(1, c_out)));
        let running_var = init
            .store
            .register_buffer(format!("{name}.bn.running_var"), Tensor::full(Shape::vector(1, c_out), T::one()));
        ConvBnRelu { weight, gamma, beta, running_mean, running_var, dilation }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Context<T>, x: Var) -> Result<Var, TensorError> {
        let w = cx.bind(self.weight);
        let y = cx.tape.conv2d(x, w, None, self.dilation)?;
        let gamma = cx.bind(self.gamma);
        let beta = cx.bind(self.beta);
        let mode = match cx.mode {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval {
                mean: cx.params.buffer(self.running_mean).value.data().to_vec(),
                var: cx.params.buffer(self.running_var).value.data().to_vec(),
            },
        };
        let (y, stats) = cx.tape.batchnorm(y, gamma, beta, mode, T::from_f64(BN_EPS))?;
        if let Some(stats) = stats {
            let m = T::from_f64(BN_MOMENTUM);
            let keep = T::one() - m;
            let rm = cx.params.buffer_mut(self.running_mean);
            for (r, &b) in rm.value.data_mut().iter_mut().zip(stats.mean.iter()) {
                *r = keep * *r + m * b;
            }
            let rv = cx.params.buffer_mut(self.running_var);
            for (r, &b) in rv.value.data_mut().iter_mut().zip(stats.var.iter()) {
                *r = keep * *r + m * b;
            }
        }
        Ok(cx.tape.relu(y))
    }
}

/// The paper's basic convolutional unit: two conv+BN+ReLU layers in a row.
pub struct ConvBlock {
    first: ConvBnRelu,
    second: ConvBnRelu,
}

impl ConvBlock {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, c_in: usize, c_out: usize) -> Self {
        ConvBlock {
            first: ConvBnRelu::new(init, &format!("{name}.0"), c_in, c_out, 3, 1),
            second: ConvBnRelu::new(init, &format!("{name}.1"), c_out, c_out, 3, 1),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Context<T>, x: Var) -> Result<Var, TensorError> {
        let y = self.first.forward(cx, x)?;
        self.second.forward(cx, y)
    }
}

/// Plain convolution with bias, no normalization or activation; used by the
/// prediction heads where raw logits are needed.
pub struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    dilation: usize,
}

impl ConvLayer {
    pub fn new<T: Scalar>(
        init: &mut Init<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
    ) -> Self {
        ConvLayer {
            weight: init.conv_weight(format!("{name}.weight"), c_out, c_in, k),
            bias: init.zero_bias(format!("{name}.bias"), c_out),
            dilation: 1,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Context<T>, x: Var) -> Result<Var, TensorError> {
        let w = cx.bind(self.weight);
        let b = cx.bind(self.bias);
        cx.tape.conv2d(x, w, Some(b), self.dilation)
    }
}

/// Fully connected layer on `(n, c, 1, 1)` vectors.
pub struct LinearLayer {
    weight: ParamId,
    bias: ParamId,
}

impl LinearLayer {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, c_in: usize, c_out: usize) -> Self {
        LinearLayer {
            weight: init.linear_weight(format!("{name}.weight"), c_out, c_in),
            bias: init.zero_bias(format!("{name}.bias"), c_out),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Context<T>, x: Var) -> Result<Var, TensorError> {
        let w = cx.bind(self.weight);
        let b = cx.bind(self.bias);
        cx.tape.linear(x, w, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn squeeze_of_zero_input_is_spatially_uniform() {
        // eval mode with fresh running stats: conv(0) = 0, bn gives beta,
        // relu clips; every pixel of a channel ends up identical
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut init = Init::new(&mut store, &mut rng, LrGroup::Head);
        let layer = ConvBnRelu::new(&mut init, "squeeze", 3, 4, 1, 1);
        // give beta a mix of signs so the relu matters
        let beta = store.param_mut(layer.beta);
        beta.value.data_mut().copy_from_slice(&[0.5, -0.25, 0.0, 1.25]);

        let mut tape = Tape::new();
        let mut cx = Context::new(&mut tape, &mut store, Mode::Eval);
        let x = cx.tape.constant(Tensor::zeros(Shape::new(1, 3, 6, 6)));
        let y = layer.forward(&mut cx, x).unwrap();
        let out = tape.value(y);
        for (c, expect) in [0.5, 0.0, 0.0, 1.25].iter().enumerate() {
            for i in 0..36 {
                assert_eq!(out.at(0, c, i / 6, i % 6), *expect);
            }
        }
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut init = Init::new(&mut store, &mut rng, LrGroup::Head);
        let layer = ConvBnRelu::new(&mut init, "l", 2, 2, 3, 1);
        let before = store.buffer(layer.running_mean).value.clone();

        let mut tape = Tape::new();
        let mut cx = Context::new(&mut tape, &mut store, Mode::Train);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = cx.tape.constant(Tensor::rand_uniform(Shape::new(2, 2, 5, 5), 1.0, &mut rng));
        layer.forward(&mut cx, x).unwrap();
        assert_ne!(store.buffer(layer.running_mean).value.data(), before.data());

        // eval mode must leave the buffers alone
        let after_train = store.buffer(layer.running_mean).value.clone();
        let mut tape = Tape::new();
        let mut cx = Context::new(&mut tape, &mut store, Mode::Eval);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = cx.tape.constant(Tensor::rand_uniform(Shape::new(2, 2, 5, 5), 1.0, &mut rng));
        layer.forward(&mut cx, x).unwrap();
        assert_eq!(store.buffer(layer.running_mean).value.data(), after_train.data());
    }
}
