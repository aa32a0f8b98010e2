//! U-shape edge network blocks. Three variants by input scale: deep and
//! shallow U-shapes for the large stages and a pooling-free dilated block
//! for the small ones, plus a plain two-conv block for the ablation that
//! switches the U-shape blocks off.

use super::layers::{Context, ConvBlock, ConvBnRelu, Init};
use super::ModelError;
use crate::tensor::tape::Var;
use crate::tensor::Scalar;

/// Which block implementation a decoder stage runs.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum UenVariant {
    Uen5,
    Uen4,
    UenA,
    Plain,
}

impl UenVariant {
    /// Stage-to-variant assignment, by 1-based stage index.
    pub fn for_stage(stage: usize, use_uen: bool) -> UenVariant {
        if !use_uen {
            return UenVariant::Plain;
        }
        match stage {
            1 => UenVariant::Uen5,
            2 | 3 => UenVariant::Uen4,
            4 | 5 => UenVariant::UenA,
            _ => panic!("stage index {stage} out of range"),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            UenVariant::Uen5 => "UEN_5",
            UenVariant::Uen4 => "UEN_4",
            UenVariant::UenA => "UEN_A",
            UenVariant::Plain => "plain",
        }
    }
}

/// U-shape block with `depth` poolings: an encoder column of conv+pool
/// steps, a dilated bottleneck, a decoder column that upsamples and fuses
/// the matching encoder output by concatenation, and a final fusion with
/// the full-scale encoder output.
pub struct UShape {
    enc: Vec<ConvBnRelu>, // enc[0] at full scale, then one per pooling
    bottleneck: ConvBnRelu,
    dec: Vec<ConvBnRelu>,
    fuse: ConvBnRelu,
    depth: usize,
}

impl UShape {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, channels: usize, depth: usize) -> Self {
        let enc = (0..=depth)
            .map(|i| ConvBnRelu::new(init, &format!("{name}.enc{i}"), channels, channels, 3, 1))
            .collect();
        let bottleneck =
            ConvBnRelu::new(init, &format!("{name}.bottleneck"), channels, channels, 3, 2);
        let dec = (0..depth)
            .map(|i| {
                ConvBnRelu::new(init, &format!("{name}.dec{i}"), 2 * channels, channels, 3, 1)
            })
            .collect();
        let fuse = ConvBnRelu::new(init, &format!("{name}.fuse"), 2 * channels, channels, 3, 1);
        UShape { enc, bottleneck, dec, fuse, depth }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Context<T>, x: Var) -> Result<Var, ModelError> {
        let (h, w) = cx.tape.shape(x).spatial();
        if self.depth == 3 && (h < 8 || w < 8) {
            return Err(ModelError::UenDepth { h, w });
        }

        let mut skips = Vec::with_capacity(self.depth + 1);
        let mut cur = self.enc[0].forward(cx, x)?;
        skips.push(cur);
        for enc in &self.enc[1..] {
            let pooled = cx.tape.maxpool2(cur, true)?;
            cur = enc.forward(cx, pooled)?;
            skips.push(cur);
        }

        cur = self.bottleneck.forward(cx, cur)?;

        // walk back up, consuming skips at each scale
        for (i, dec) in self.dec.iter().enumerate() {
            let skip = skips[self.depth - 1 - i];
            let (sh, sw) = cx.tape.shape(skip).spatial();
            let up = cx.tape.upsample_bilinear(cur, sh, sw)?;
            let cat = cx.tape.concat_channels(&[up, skip])?;
            cur = dec.forward(cx, cat)?;
        }

        let cat = cx.tape.concat_channels(&[cur, skips[0]])?;
        Ok(self.fuse.forward(cx, cat)?)
    }
}

/// Pooling-free block: one conv, three parallel dilated convs with rates
/// 1, 2, 4, and a conv that mixes the concatenated branches back down.
pub struct DilatedBlock {
    pre: ConvBnRelu,
    branches: [ConvBnRelu; 3],
    merge: ConvBnRelu,
}

/// Dilation rates of the three parallel branches.
pub const DILATED_BRANCH_RATES: [usize; 3] = [1, 2, 4];

impl DilatedBlock {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, channels: usize) -> Self {
        let pre = ConvBnRelu::new(init, &format!("{name}.pre"), channels, channels, 3, 1);
        let branches = [
            ConvBnRelu::new(init, &format!("{name}.branch1"), channels, channels, 3, DILATED_BRANCH_RATES[0]),
            ConvBnRelu::new(init, &format!("{name}.branch2"), channels, channels, 3, DILATED_BRANCH_RATES[1]),
            ConvBnRelu::new(init, &format!("{name}.branch4"), channels, channels, 3, DILATED_BRANCH_RATES[2]),
        ];
        let merge = ConvBnRelu::new(init, &format!("{name}.merge"), 3 * channels, channels, 3, 1);
        DilatedBlock { pre, branches, merge }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Context<T>, x: Var) -> Result<Var, ModelError> {
        let h = self.pre.forward(cx, x)?;
        let b1 = self.branches[0].forward(cx, h)?;
        let b2 = self.branches[1].forward(cx, h)?;
        let b3 = self.branches[2].forward(cx, h)?;
        let cat = cx.tape.concat_channels(&[b1, b2, b3])?;
        Ok(self.merge.forward(cx, cat)?)
    }
}

/// One decoder block, in whichever variant its stage is assigned.
pub enum UBlock {
    UShape(UShape),
    Dilated(DilatedBlock),
    Plain(ConvBlock),
}

impl UBlock {
    pub fn new<T: Scalar>(
        init: &mut Init<T>,
        name: &str,
        channels: usize,
        variant: UenVariant,
    ) -> Self {
        match variant {
            UenVariant::Uen5 => UBlock::UShape(UShape::new(init, name, channels, 3)),
            UenVariant::Uen4 => UBlock::UShape(UShape::new(init, name, channels, 2)),
            UenVariant::UenA => UBlock::Dilated(DilatedBlock::new(init, name, channels)),
            UenVariant::Plain => UBlock::Plain(ConvBlock::new(init, name, channels, channels)),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Context<T>, x: Var) -> Result<Var, ModelError> {
        match self {
            UBlock::UShape(b) => b.forward(cx, x),
            UBlock::Dilated(b) => b.forward(cx, x),
            UBlock::Plain(b) => Ok(b.forward(cx, x)?),
        }
    }

    pub fn variant(&self) -> UenVariant {
        match self {
            UBlock::UShape(b) if b.depth == 3 => UenVariant::Uen5,
            UBlock::UShape(_) => UenVariant::Uen4,
            UBlock::Dilated(_) => UenVariant::UenA,
            UBlock::Plain(_) => UenVariant::Plain,
        }
    }
}
