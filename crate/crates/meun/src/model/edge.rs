//! Edge branch: extracts an edge feature from the highest-resolution
//! squeezed stage, predicts a full-resolution edge map, and hands
//! stage-aligned copies of the edge feature to the top four decoder stages.

use super::layers::{Context, ConvBlock, ConvLayer, Init};
use crate::tensor::tape::Var;
use crate::tensor::{Scalar, TensorError};

pub struct EdgeBranch {
    block_a: ConvBlock,
    block_b: ConvBlock,
    head: ConvLayer,
}

pub struct EdgeOutputs {
    /// Edge feature resized to the spatial size of stages 1..4.
    pub stage_features: [Var; 4],
    /// Full-resolution edge logits.
    pub logits: Var,
}

impl EdgeBranch {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, channels: usize) -> Self {
        EdgeBranch {
            block_a: ConvBlock::new(init, &format!("{name}.block_a"), channels, channels),
            block_b: ConvBlock::new(init, &format!("{name}.block_b"), channels, channels),
            head: ConvLayer::new(init, &format!("{name}.head"), channels, 1, 1),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        cx: &mut Context<T>,
        b1: Var,
        stage_sizes: [(usize, usize); 4],
        input_size: usize,
    ) -> Result<EdgeOutputs, TensorError> {
        let f = self.block_a.forward(cx, b1)?;
        let f = self.block_b.forward(cx, f)?;

        let logits_small = self.head.forward(cx, f)?;
        let logits = cx.tape.upsample_bilinear(logits_small, input_size, input_size)?;

        let mut stage_features = [f; 4];
        for (i, &(h, w)) in stage_sizes.iter().enumerate() {
            stage_features[i] = cx.tape.upsample_bilinear(f, h, w)?;
        }
        Ok(EdgeOutputs { stage_features, logits })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::layers::{Context, Init, Mode};
    use crate::params::{LrGroup, ParamStore};
    use crate::tensor::tape::Tape;
    use crate::tensor::{Shape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stage_features_match_requested_sizes() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut init = Init::new(&mut store, &mut rng, LrGroup::Head);
        let branch = EdgeBranch::new(&mut init, "edge", 8);

        let mut tape = Tape::new();
        let mut cx = Context::new(&mut tape, &mut store, Mode::Train);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b1 = cx.tape.constant(Tensor::rand_uniform(Shape::new(2, 8, 16, 16), 1.0, &mut rng));
        let sizes = [(16, 16), (8, 8), (4, 4), (2, 2)];
        let out = branch.forward(&mut cx, b1, sizes, 32).unwrap();

        assert_eq!(tape.shape(out.logits), Shape::new(2, 1, 32, 32));
        for (f, &(h, w)) in out.stage_features.iter().zip(sizes.iter()) {
            assert_eq!(tape.shape(*f), Shape::new(2, 8, h, w));
        }
    }
}
