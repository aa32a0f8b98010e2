//! Finite-difference verification of every differentiable primitive.
//!
//! Each checked op gets a small seeded scenario: random inputs in [-1, 1]
//! (resampled away from kinks where the op is only piecewise smooth), a
//! random projection of the output so per-element errors cannot cancel, and
//! a central-difference sweep in double precision.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ops::Reduction;
use super::tape::{BnMode, Tape, Var};
use super::{Shape, Tensor, TensorError};

/// Default step for central differences.
pub const DEFAULT_EPS: f64 = 1e-3;
/// Pass threshold for primitive checks.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;

/// Every differentiable primitive, each with a fixed trial scenario.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CheckedOp {
    Conv2d,
    Conv2dDilated,
    Conv2dPointwise,
    MaxPool2,
    MaxPool2Ceil,
    UpsampleBilinear,
    UpsampleBilinearSame,
    UpsampleBilinearDown,
    BatchNormTrain,
    BatchNormEval,
    Relu,
    Sigmoid,
    Add,
    Mul,
    ConcatChannels,
    ChannelScale,
    ChannelScaleShared,
    GlobalAvgPool,
    Linear,
    Sum,
    ScaleConst,
    BceLossMean,
    BceLossSum,
    IouLoss,
    IouLossUnscaled,
}

impl CheckedOp {
    pub fn all() -> &'static [CheckedOp] {
        use CheckedOp::*;
        &[
            Conv2d,
            Conv2dDilated,
            Conv2dPointwise,
            MaxPool2,
            MaxPool2Ceil,
            UpsampleBilinear,
            UpsampleBilinearSame,
            UpsampleBilinearDown,
            BatchNormTrain,
            BatchNormEval,
            Relu,
            Sigmoid,
            Add,
            Mul,
            ConcatChannels,
            ChannelScale,
            ChannelScaleShared,
            GlobalAvgPool,
            Linear,
            Sum,
            ScaleConst,
            BceLossMean,
            BceLossSum,
            IouLoss,
            IouLossUnscaled,
        ]
    }

    pub fn name(&self) -> &'static str {
        use CheckedOp::*;
        match self {
            Conv2d => "conv2d",
            Conv2dDilated => "conv2d_dilated",
            Conv2dPointwise => "conv2d_1x1",
            MaxPool2 => "maxpool2",
            MaxPool2Ceil => "maxpool2_ceil",
            UpsampleBilinear => "upsample_bilinear",
            UpsampleBilinearSame => "upsample_bilinear_same",
            UpsampleBilinearDown => "upsample_bilinear_down",
            BatchNormTrain => "batchnorm2d_train",
            BatchNormEval => "batchnorm2d_eval",
            Relu => "relu",
            Sigmoid => "sigmoid",
            Add => "add",
            Mul => "mul",
            ConcatChannels => "concat_channels",
            ChannelScale => "channel_scale",
            ChannelScaleShared => "channel_scale_shared",
            GlobalAvgPool => "global_avg_pool",
            Linear => "linear",
            Sum => "sum",
            ScaleConst => "scale_const",
            BceLossMean => "bce_loss_mean",
            BceLossSum => "bce_loss_sum",
            IouLoss => "iou_loss",
            IouLossUnscaled => "iou_loss_unscaled",
        }
    }
}

impl FromStr for CheckedOp {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CheckedOp::all()
            .iter()
            .copied()
            .find(|op| op.name() == s)
            .ok_or_else(|| TensorError::UnknownOp(s.to_string()))
    }
}

type BuildFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>;

struct Scenario {
    inputs: Vec<Tensor<f64>>,
    build: BuildFn,
}

fn rand_t(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    Tensor::rand_uniform(shape, 1.0, rng)
}

/// Push values out of the |x| < margin band around the relu kink.
fn avoid_zero(mut t: Tensor<f64>, margin: f64) -> Tensor<f64> {
    for v in t.data_mut() {
        if v.abs() < margin {
            *v += if *v >= 0.0 { 2.0 * margin } else { -2.0 * margin };
        }
    }
    t
}

/// Well-separated values so a +-eps perturbation never flips a pool argmax:
/// a seeded shuffle of an evenly spaced grid.
fn separated(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n = shape.numel();
    let mut vals: Vec<f64> = (0..n)
        .map(|i| -1.0 + 2.0 * (i as f64 + 0.5) / n as f64)
        .collect();
    vals.shuffle(rng);
    Tensor::from_vec(shape, vals)
}

/// Probabilities bounded away from the log clamp and its steep tails.
fn probs(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    rand_t(rng, shape).map(|v| 0.5 + 0.4 * v)
}

fn binary_labels(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    rand_t(rng, shape).map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

/// Scalar loss: randomly weighted sum of the output map.
fn project(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Var {
    let r = tape.constant(weights.clone());
    let m = tape.mul(out, r).expect("projection shape");
    tape.sum(m)
}

fn scenario(op: CheckedOp, seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0105);
    use CheckedOp::*;
    match op {
        Conv2d => {
            let x = rand_t(&mut rng, Shape::new(2, 3, 5, 5));
            let w = rand_t(&mut rng, Shape::new(4, 3, 3, 3));
            let b = rand_t(&mut rng, Shape::vector(1, 4));
            let r = rand_t(&mut rng, Shape::new(2, 4, 5, 5));
            Scenario {
                inputs: vec![x, w, b],
                build: Box::new(move |tape, vars| {
                    let out = tape.conv2d(vars[0], vars[1], Some(vars[2]), 1).unwrap();
                    project(tape, out, &r)
                }),
            }
        }
        Conv2dDilated => {
            let x = rand_t(&mut rng, Shape::new(1, 2, 6, 6));
            let w = rand_t(&mut rng, Shape::new(3, 2, 3, 3));
            let r = rand_t(&mut rng, Shape::new(1, 3, 6, 6));
            Scenario {
                inputs: vec![x, w],
                build: Box::new(move |tape, vars| {
                    let out = tape.conv2d(vars[0], vars[1], None, 2).unwrap();
                    project(tape, out, &r)
                }),
            }
        }
        Conv2dPointwise => {
            let x = rand_t(&mut rng, Shape::new(2, 4, 4, 4));
            let w = rand_t(&mut rng, Shape::new(2, 4, 1, 1));
            let b = rand_t(&mut rng, Shape::vector(1, 2));
            let r = rand_t(&mut rng, Shape::new(2, 2, 4, 4));
            Scenario {
                inputs: vec![x, w, b],
                build: Box::new(move |tape, vars| {
                    let out = tape.conv2d(vars[0], vars[1], Some(vars[2]), 1).unwrap();
                    project(tape, out, &r)
                }),
            }
        }
        MaxPool2 | MaxPool2Ceil => {
            let ceil = op == MaxPool2Ceil;
            let (h, w): (usize, usize) = if ceil { (5, 7) } else { (6, 6) };
            let (oh, ow) = if ceil {
                (h.div_ceil(2), w.div_ceil(2))
            } else {
                (h / 2, w / 2)
            };
            let x = separated(&mut rng, Shape::new(2, 2, h, w));
            let r = rand_t(&mut rng, Shape::new(2, 2, oh, ow));
            Scenario {
                inputs: vec![x],
                build: Box::new(move |tape, vars| {
                    let out = tape.maxpool2(vars[0], ceil).unwrap();
                    project(tape, out, &r)
                }),
            }
        }
        UpsampleBilinear | UpsampleBilinearSame | UpsampleBilinearDown => {
            let x = rand_t(&mut rng, Shape::new(1, 3, 5, 4));
            let (oh, ow) = match op {
                UpsampleBilinear => (9, 7),
                UpsampleBilinearSame => (5, 4),
                _ => (2, 3),
            };
            let r = rand_t(&mut rng, Shape::new(1, 3, oh, ow));
            Scenario {
                inputs: vec![x],
                build: Box::new(move |tape, vars| {
                    let out = tape.upsample_bilinear(vars[0], oh, ow).unwrap();
                    project(tape, out, &r)
                }),
            }
        }
        BatchNormTrain | BatchNormEval => {
            let x = rand_t(&mut rng, Shape::new(2, 3, 4, 4));
            let gamma = rand_t(&mut rng, Shape::vector(1, 3));
            let beta = rand_t(&mut rng, Shape::vector(1, 3));
            let r = rand_t(&mut rng, Shape::new(2, 3, 4, 4));
            let eval_mean: Vec<f64> = (0..3).map(|_| 0.1).collect();
            let eval_var: Vec<f64> = (0..3).map(|_| 0.8).collect();
            let train = op == BatchNormTrain;
            Scenario {
                inputs: vec![x, gamma, beta],
                build: Box::new(move |tape, vars| {
                    let mode = if train {
                        BnMode::Train
                    } else {
                        BnMode::Eval { mean: eval_mean.clone(), var: eval_var.clone() }
                    };
                    let (out, _) = tape.batchnorm(vars[0], vars[1], vars[2], mode, 1e-5).unwrap();
                    project(tape, out, &r)
                }),
            }
        }
        Relu => {
            let x = avoid_zero(rand_t(&mut rng, Shape::new(2, 3, 4, 4)), 1e-2);
            let r = rand_t(&mut rng, Shape::new(2, 3, 4, 4));
            Scenario {
                inputs: vec![x],
                build: Box::new(move |tape, vars| {
                    let out = tape.relu(vars[0]);
                    project(tape, out, &r)
                }),
            }
        }
        Sigmoid => {
            let x = rand_t(&mut rng, Shape::new(2, 3, 4, 4));
            let r = rand_t(&mut rng, Shape::new(2, 3, 4, 4));
            Scenario {
                inputs: vec![x],
                build: Box::new(move |tape, vars| {
                    let out = tape.sigmoid(vars[0]);
                    project(tape, out, &r)
                }),
            }
        }
        Add | Mul => {
            let a = rand_t(&mut rng, Shape::new(2, 2, 3, 3));
            let b = rand_t(&mut rng, Shape::new(2, 2, 3, 3));
            let r = rand_t(&mut rng, Shape::new(2, 2, 3, 3));
            let is_add = op == Add;
            Scenario {
                inputs: vec![a, b],
                build: Box::new(move |tape, vars| {
                    let out = if is_add {
                        tape.add(vars[0], vars[1]).unwrap()
                    } else {
                        tape.mul(vars[0], vars[1]).unwrap()
                    };
                    project(tape, out, &r)
                }),
            }
        }
        ConcatChannels => {
            let a = rand_t(&mut rng, Shape::new(2, 1, 3, 3));
            let b = rand_t(&mut rng, Shape::new(2, 2, 3, 3));
            let c = rand_t(&mut rng, Shape::new(2, 3, 3, 3));
            let r = rand_t(&mut rng, Shape::new(2, 6, 3, 3));
            Scenario {
                inputs: vec![a, b, c],
                build: Box::new(move |tape, vars| {
                    let out = tape.concat_channels(vars).unwrap();
                    project(tape, out, &r)
                }),
            }
        }
        ChannelScale | ChannelScaleShared => {
            let shared = op == ChannelScaleShared;
            let x = rand_t(&mut rng, Shape::new(2, 3, 4, 4));
            let v = rand_t(&mut rng, Shape::vector(if shared { 1 } else { 2 }, 3));
            let r = rand_t(&mut rng, Shape::new(2, 3, 4, 4));
            Scenario {
                inputs: vec![x, v],
                build: Box::new(move |tape, vars| {
                    let out = tape.channel_scale(vars[0], vars[1]).unwrap();
                    project(tape, out, &r)
                }),
            }
        }
        GlobalAvgPool => {
            let x = rand_t(&mut rng, Shape::new(2, 3, 4, 5));
            let r = rand_t(&mut rng, Shape::vector(2, 3));
            Scenario {
                inputs: vec![x],
                build: Box::new(move |tape, vars| {
                    let out = tape.global_avg_pool(vars[0]).unwrap();
                    project(tape, out, &r)
                }),
            }
        }
        Linear => {
            let x = rand_t(&mut rng, Shape::vector(3, 4));
            let w = rand_t(&mut rng, Shape::vector(2, 4));
            let b = rand_t(&mut rng, Shape::vector(1, 2));
            let r = rand_t(&mut rng, Shape::vector(3, 2));
            Scenario {
                inputs: vec![x, w, b],
                build: Box::new(move |tape, vars| {
                    let out = tape.linear(vars[0], vars[1], vars[2]).unwrap();
                    project(tape, out, &r)
                }),
            }
        }
        Sum => {
            let x = rand_t(&mut rng, Shape::new(2, 2, 3, 3));
            Scenario {
                inputs: vec![x],
                build: Box::new(move |tape, vars| tape.sum(vars[0])),
            }
        }
        ScaleConst => {
            let x = rand_t(&mut rng, Shape::new(1, 2, 3, 3));
            let r = rand_t(&mut rng, Shape::new(1, 2, 3, 3));
            Scenario {
                inputs: vec![x],
                build: Box::new(move |tape, vars| {
                    let out = tape.scale_const(vars[0], -0.625);
                    project(tape, out, &r)
                }),
            }
        }
        BceLossMean | BceLossSum => {
            let p = probs(&mut rng, Shape::new(2, 1, 4, 4));
            let g = binary_labels(&mut rng, Shape::new(2, 1, 4, 4));
            let reduction = if op == BceLossMean { Reduction::Mean } else { Reduction::Sum };
            Scenario {
                inputs: vec![p],
                build: Box::new(move |tape, vars| {
                    tape.bce_loss(vars[0], g.clone(), reduction).unwrap()
                }),
            }
        }
        IouLoss | IouLossUnscaled => {
            let p = probs(&mut rng, Shape::new(2, 1, 4, 4));
            let g = binary_labels(&mut rng, Shape::new(2, 1, 4, 4));
            let hw = op == IouLoss;
            Scenario {
                inputs: vec![p],
                build: Box::new(move |tape, vars| {
                    tape.iou_loss(vars[0], g.clone(), hw).unwrap()
                }),
            }
        }
    }
}

/// Relative error between an analytic and a numeric gradient element.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Check one primitive against central finite differences. Returns the max
/// relative error over every element of every differentiable input.
pub fn grad_check(op: CheckedOp, eps: f64, seed: u64) -> f64 {
    grad_check_impl(op, eps, seed, None)
}

/// Same as [`grad_check`] by op-id string; unknown ids report a lookup error.
pub fn grad_check_by_name(name: &str, eps: f64, seed: u64) -> Result<f64, TensorError> {
    Ok(grad_check(CheckedOp::from_str(name)?, eps, seed))
}

pub(crate) fn grad_check_impl(
    op: CheckedOp,
    eps: f64,
    seed: u64,
    corrupt_analytic: Option<fn(&mut [f64])>,
) -> f64 {
    let sc = scenario(op, seed);

    // analytic pass
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = sc.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = (sc.build)(&mut tape, &vars);
    let grads = tape.backward(loss).expect("backward");
    let mut analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(sc.inputs.iter())
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    if let Some(c) = corrupt_analytic {
        for g in &mut analytic {
            c(g.data_mut());
        }
    }

    let eval = |inputs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = (sc.build)(&mut tape, &vars);
        tape.value(loss).item()
    };

    let mut max_err = 0.0f64;
    let mut work = sc.inputs.clone();
    for (ti, tensor) in sc.inputs.iter().enumerate() {
        for j in 0..tensor.numel() {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + eps;
            let plus = eval(&work);
            work[ti].data_mut()[j] = orig - eps;
            let minus = eval(&work);
            work[ti].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[ti].data()[j], numeric);
            if err > max_err {
                max_err = err;
            }
        }
    }
    max_err
}
