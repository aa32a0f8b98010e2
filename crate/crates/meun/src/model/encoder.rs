//! Backbone encoder. Two flavors share the same five-stage graph shape
//! (conv+BN+ReLU then a 2x2 pooling per stage, halving the spatial size):
//! a small configurable-width encoder for desk-scale training, and a
//! ResNet-50-shaped variant that only reproduces the stage channel counts.

use super::layers::{Context, ConvBnRelu, Init};
use crate::tensor::tape::Var;
use crate::tensor::{Scalar, TensorError};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum EncoderKind {
    Mini,
    Resnet50Shape,
}

/// Stage output channel counts of the ResNet-50-shaped contract.
pub const RESNET50_STAGE_CHANNELS: [usize; 5] = [64, 256, 512, 1024, 2048];

pub struct Encoder {
    stages: Vec<ConvBnRelu>,
    channels: [usize; 5],
}

impl Encoder {
    pub fn new<T: Scalar>(
        init: &mut Init<T>,
        kind: EncoderKind,
        mini_channels: [usize; 5],
    ) -> Self {
        let channels = match kind {
            EncoderKind::Mini => mini_channels,
            EncoderKind::Resnet50Shape => RESNET50_STAGE_CHANNELS,
        };
        let mut c_in = 3;
        let stages = (0..5)
            .map(|i| {
                let layer = ConvBnRelu::new(
                    init,
                    &format!("encoder.stage{}", i + 1),
                    c_in,
                    channels[i],
                    3,
                    1,
                );
                c_in = channels[i];
                layer
            })
            .collect();
        Encoder { stages, channels }
    }

    pub fn stage_channels(&self) -> [usize; 5] {
        self.channels
    }

    /// Five raw stage outputs; stage `i` (1-based) is at `input / 2^i`.
    pub fn forward<T: Scalar>(
        &self,
        cx: &mut Context<T>,
        image: Var,
    ) -> Result<[Var; 5], TensorError> {
        let mut outputs = [image; 5];
        let mut x = image;
        for (i, stage) in self.stages.iter().enumerate() {
            let y = stage.forward(cx, x)?;
            x = cx.tape.maxpool2(y, true)?;
            outputs[i] = x;
        }
        Ok(outputs)
    }
}
