//! SGD with momentum, decoupled weight decay, and two learning-rate groups:
//! the backbone trains at a tenth of the rate of the freshly initialized
//! parts.

use crate::params::{LrGroup, ParamStore};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct SgdConfig {
    pub lr_head: f64,
    pub lr_backbone: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr_head: 3e-5,
            lr_backbone: 3e-6,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// One update: `v <- momentum * v + g`, then
/// `p <- p - lr * v - lr * weight_decay * p` (decay applied directly to the
/// parameter, not folded into the momentum buffer). Gradients are zeroed
/// afterwards.
pub fn step<T: Scalar>(store: &mut ParamStore<T>, cfg: &SgdConfig) {
    let momentum = T::from_f64(cfg.momentum);
    let decay = T::from_f64(cfg.weight_decay);
    for p in store.params_mut() {
        let lr = T::from_f64(match p.group {
            LrGroup::Backbone => cfg.lr_backbone,
            LrGroup::Head => cfg.lr_head,
        });
        for i in 0..p.value.numel() {
            let g = p.grad.data()[i];
            let v = momentum * p.momentum.data()[i] + g;
            p.momentum.data_mut()[i] = v;
            let w = p.value.data()[i];
            p.value.data_mut()[i] = w - lr * v - lr * decay * w;
        }
    }
    store.zero_grads();
}
