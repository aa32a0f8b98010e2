//! Additional down-sampling module: pushes the deepest feature one pooling
//! further, weighs its channels by a squeeze-excitation style attention
//! vector, and resizes back so the result can be added to the deepest
//! feature.

use super::layers::{Context, ConvBlock, Init, LinearLayer};
use super::ModelError;
use crate::tensor::tape::Var;
use crate::tensor::Scalar;

pub struct Adm {
    block_a: ConvBlock,
    block_b: ConvBlock,
    fc_reduce: LinearLayer,
    fc_expand: LinearLayer,
}

impl Adm {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction).max(1);
        Adm {
            block_a: ConvBlock::new(init, &format!("{name}.block_a"), channels, channels),
            block_b: ConvBlock::new(init, &format!("{name}.block_b"), channels, channels),
            fc_reduce: LinearLayer::new(init, &format!("{name}.fc_reduce"), channels, hidden),
            fc_expand: LinearLayer::new(init, &format!("{name}.fc_expand"), hidden, channels),
        }
    }

    /// `b5` is the squeezed deepest feature; the output matches its shape.
    pub fn forward<T: Scalar>(&self, cx: &mut Context<T>, b5: Var) -> Result<Var, ModelError> {
        let (h, w) = cx.tape.shape(b5).spatial();
        if h == 1 && w == 1 {
            return Err(ModelError::AdmDegenerate);
        }
        let x = self.block_a.forward(cx, b5)?;
        let x = self.block_b.forward(cx, x)?;
        let down = cx.tape.maxpool2(x, true)?;

        let pooled = cx.tape.global_avg_pool(down)?;
        let v = self.fc_reduce.forward(cx, pooled)?;
        let v = cx.tape.relu(v);
        let v = self.fc_expand.forward(cx, v)?;
        let v = cx.tape.sigmoid(v);

        let scaled = cx.tape.channel_scale(down, v)?;
        Ok(cx.tape.upsample_bilinear(scaled, h, w)?)
    }
}
