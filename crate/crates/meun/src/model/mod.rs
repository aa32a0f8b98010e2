//! The MEUN computation graph: encoder, channel squeeze, additional
//! down-sampling module, edge branch, the bottom-up chain of U-shape edge
//! blocks, per-stage prediction heads, and the united fusion head.

pub mod adm;
pub mod edge;
pub mod encoder;
pub mod layers;
pub mod uen;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::loss::SupervisedMaps;
use crate::params::{LrGroup, ParamStore};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor, TensorError};

use adm::Adm;
use edge::EdgeBranch;
pub use encoder::EncoderKind;
use encoder::Encoder;
pub use layers::Mode;
use layers::{Context, ConvBlock, ConvBnRelu, ConvLayer, Init};
pub use uen::UenVariant;
use uen::UBlock;

#[derive(Error, Debug)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error("wiring error at {stage}")]
    Wiring {
        stage: String,
        #[source]
        source: TensorError,
    },
    #[error("U-shape block with 3 poolings needs spatial >= 8, got {h}x{w}")]
    UenDepth { h: usize, w: usize },
    #[error("additional down-sampling is degenerate on a 1x1 deepest feature (config too small)")]
    AdmDegenerate,
}

impl From<TensorError> for ModelError {
    fn from(source: TensorError) -> Self {
        ModelError::Wiring { stage: "unattributed".into(), source }
    }
}

fn wire<R>(stage: &str, r: Result<R, TensorError>) -> Result<R, ModelError> {
    r.map_err(|source| ModelError::Wiring { stage: stage.to_string(), source })
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Square input resolution; must be divisible by 32.
    pub input_size: usize,
    /// Common channel width all stages are squeezed to.
    pub base_channels: usize,
    pub encoder: EncoderKind,
    /// Stage output channels of the mini encoder.
    pub mini_stage_channels: [usize; 5],
    /// Additional down-sampling module on the deepest stage.
    pub use_adm: bool,
    /// U-shape edge blocks; `false` swaps in plain two-conv blocks.
    pub use_uen: bool,
    /// Channel reduction of the attention bottleneck inside the ADM.
    pub adm_fc_reduction: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 224,
            base_channels: 128,
            encoder: EncoderKind::Mini,
            mini_stage_channels: [16, 32, 64, 64, 64],
            use_adm: true,
            use_uen: true,
            adm_fc_reduction: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return Err(ModelError::Config(format!(
                "input_size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        if self.base_channels < 8 {
            return Err(ModelError::Config(format!(
                "base_channels {} must be at least 8",
                self.base_channels
            )));
        }
        if self.adm_fc_reduction == 0 {
            return Err(ModelError::Config("adm_fc_reduction must be positive".into()));
        }
        Ok(())
    }

    /// Spatial size of stage `i` (1-based).
    pub fn stage_size(&self, stage: usize) -> usize {
        self.input_size >> stage
    }
}

/// Tape handles of the maps a forward pass produces.
pub struct ForwardMaps {
    pub edge_logits: Var,
    pub edge: Var,
    pub sal_logits: [Var; 5],
    pub sal: [Var; 5],
    pub united_logits: Var,
    pub united: Var,
}

impl ForwardMaps {
    pub fn supervised(&self) -> SupervisedMaps {
        SupervisedMaps { edge: self.edge, stages: self.sal, united: self.united }
    }
}

/// Materialized outputs: edge map, the five intermediate saliency maps from
/// the top (highest resolution) down, and the united map — all probabilities
/// at input resolution, with the raw logits kept alongside.
#[derive(Clone, Debug)]
pub struct ModelOutputs<T> {
    pub edge: Tensor<T>,
    pub sal: [Tensor<T>; 5],
    pub united: Tensor<T>,
    pub edge_logits: Tensor<T>,
    pub sal_logits: [Tensor<T>; 5],
    pub united_logits: Tensor<T>,
}

impl ForwardMaps {
    pub fn materialize<T: Scalar>(&self, tape: &Tape<T>) -> ModelOutputs<T> {
        let grab = |v: Var| tape.value(v).clone();
        ModelOutputs {
            edge: grab(self.edge),
            sal: self.sal.map(grab),
            united: grab(self.united),
            edge_logits: grab(self.edge_logits),
            sal_logits: self.sal_logits.map(grab),
            united_logits: grab(self.united_logits),
        }
    }
}

struct DecoderStage {
    inner: ConvBlock,
    outer: ConvBlock,
    block: UBlock,
    head_conv: ConvBnRelu,
    head_out: ConvLayer,
}

struct UnitedHead {
    mix: ConvLayer,
    out: ConvLayer,
}

/// Channel width of the united head's hidden mixing layer.
const UNITED_HIDDEN: usize = 16;

pub struct MeunModel<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    encoder: Encoder,
    squeeze: Vec<ConvBnRelu>,
    adm: Option<Adm>,
    adm_standin: Option<ConvBlock>,
    edge: EdgeBranch,
    stages: Vec<DecoderStage>,
    united: UnitedHead,
}

impl<T: Scalar> MeunModel<T> {
    /// Build a freshly initialized model; the same seed gives bit-identical
    /// parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bc = config.base_channels;

        let encoder = {
            let mut init = Init::new(&mut params, &mut rng, LrGroup::Backbone);
            Encoder::new(&mut init, config.encoder, config.mini_stage_channels)
        };

        let mut init = Init::new(&mut params, &mut rng, LrGroup::Head);
        let squeeze = (0..5)
            .map(|i| {
                ConvBnRelu::new(
                    &mut init,
                    &format!("squeeze.stage{}", i + 1),
                    encoder.stage_channels()[i],
                    bc,
                    1,
                    1,
                )
            })
            .collect();

        let adm = config
            .use_adm
            .then(|| Adm::new(&mut init, "adm", bc, config.adm_fc_reduction));
        let adm_standin =
            (!config.use_adm).then(|| ConvBlock::new(&mut init, "adm_standin", bc, bc));

        let edge = EdgeBranch::new(&mut init, "edge", bc);

        let stages = (1..=5)
            .map(|i| {
                let name = format!("decoder.stage{i}");
                DecoderStage {
                    inner: ConvBlock::new(&mut init, &format!("{name}.inner"), bc, bc),
                    outer: ConvBlock::new(&mut init, &format!("{name}.outer"), bc, bc),
                    block: UBlock::new(
                        &mut init,
                        &format!("{name}.uen"),
                        bc,
                        UenVariant::for_stage(i, config.use_uen),
                    ),
                    head_conv: ConvBnRelu::new(&mut init, &format!("{name}.head.0"), bc, bc, 3, 1),
                    head_out: ConvLayer::new(&mut init, &format!("{name}.head.1"), bc, 1, 3),
                }
            })
            .collect();

        let united = UnitedHead {
            mix: ConvLayer::new(&mut init, "united.mix", 5, UNITED_HIDDEN, 3),
            out: ConvLayer::new(&mut init, "united.out", UNITED_HIDDEN, 1, 1),
        };

        Ok(MeunModel {
            config,
            params,
            encoder,
            squeeze,
            adm,
            adm_standin,
            edge,
            stages,
            united,
        })
    }

    /// Variant of each decoder stage, 1-based stage order.
    pub fn stage_variants(&self) -> [UenVariant; 5] {
        let mut out = [UenVariant::Plain; 5];
        for (i, s) in self.stages.iter().enumerate() {
            out[i] = s.block.variant();
        }
        out
    }

    /// Run the network on an `(n, 3, S, S)` image batch.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        image: Tensor<T>,
        mode: Mode,
    ) -> Result<ForwardMaps, ModelError> {
        let s = image.shape();
        let size = self.config.input_size;
        if s.c != 3 || s.h != size || s.w != size {
            return Err(ModelError::Config(format!(
                "input shape {s} does not match (n, 3, {size}, {size})"
            )));
        }

        let cx = &mut Context::new(tape, &mut self.params, mode);
        let image = cx.tape.constant(image);

        let raw = wire("encoder", self.encoder.forward(cx, image))?;
        let mut pyramid = [raw[0]; 5];
        for i in 0..5 {
            pyramid[i] = wire(&format!("squeeze.stage{}", i + 1), self.squeeze[i].forward(cx, raw[i]))?;
        }

        let adm_out = match (&self.adm, &self.adm_standin) {
            (Some(adm), _) => adm.forward(cx, pyramid[4])?,
            (None, Some(standin)) => wire("adm_standin", standin.forward(cx, pyramid[4]))?,
            _ => unreachable!("one of adm/standin always exists"),
        };

        let stage_sizes: [(usize, usize); 4] = [
            (self.config.stage_size(1), self.config.stage_size(1)),
            (self.config.stage_size(2), self.config.stage_size(2)),
            (self.config.stage_size(3), self.config.stage_size(3)),
            (self.config.stage_size(4), self.config.stage_size(4)),
        ];
        let edge_out = wire("edge", self.edge.forward(cx, pyramid[0], stage_sizes, size))?;

        // bottom-up decoder: stage 5 fuses the ADM output, stages 4..1 fuse
        // the edge feature and the upsampled previous block output
        let mut uen_out = [image; 5];
        for i in (1..=5usize).rev() {
            let stage_name = format!("decoder.stage{i}");
            let st = &self.stages[i - 1];
            let inner = wire(&stage_name, st.inner.forward(cx, pyramid[i - 1]))?;
            let mut fused = if i == 5 {
                wire(&stage_name, cx.tape.add(inner, adm_out))?
            } else {
                let with_edge =
                    wire(&stage_name, cx.tape.add(inner, edge_out.stage_features[i - 1]))?;
                let target = self.config.stage_size(i);
                let up =
                    wire(&stage_name, cx.tape.upsample_bilinear(uen_out[i], target, target))?;
                wire(&stage_name, cx.tape.add(with_edge, up))?
            };
            fused = wire(&stage_name, st.outer.forward(cx, fused))?;
            uen_out[i - 1] = st.block.forward(cx, fused)?;
        }

        let mut sal_logits = [image; 5];
        let mut sal = [image; 5];
        for i in 0..5 {
            let name = format!("decoder.stage{}.head", i + 1);
            let h = wire(&name, self.stages[i].head_conv.forward(cx, uen_out[i]))?;
            let logits_small = wire(&name, self.stages[i].head_out.forward(cx, h))?;
            let logits = wire(&name, cx.tape.upsample_bilinear(logits_small, size, size))?;
            sal_logits[i] = logits;
            sal[i] = cx.tape.sigmoid(logits);
        }

        let cat = wire("united", cx.tape.concat_channels(&sal_logits))?;
        let mixed = wire("united", self.united.mix.forward(cx, cat))?;
        let mixed = cx.tape.relu(mixed);
        let united_logits = wire("united", self.united.out.forward(cx, mixed))?;
        let united = cx.tape.sigmoid(united_logits);

        let edge = cx.tape.sigmoid(edge_out.logits);

        Ok(ForwardMaps {
            edge_logits: edge_out.logits,
            edge,
            sal_logits,
            sal,
            united_logits,
            united,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{make_edge_label, total_loss, BinaryMask, LossOptions};
    use crate::tensor::Shape;
    use rand::Rng;

    fn small_config(input: usize) -> ModelConfig {
        ModelConfig {
            input_size: input,
            base_channels: 8,
            mini_stage_channels: [4, 8, 8, 8, 8],
            ..ModelConfig::default()
        }
    }

    fn rand_image(n: usize, size: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(Shape::new(n, 3, size, size), 1.0, &mut rng)
    }

    #[test]
    fn stage_sizes_halve() {
        let cfg = ModelConfig { input_size: 224, ..ModelConfig::default() };
        assert_eq!(
            (1..=5).map(|i| cfg.stage_size(i)).collect::<Vec<_>>(),
            vec![112, 56, 28, 14, 7]
        );
        let cfg = small_config(64);
        assert_eq!(
            (1..=5).map(|i| cfg.stage_size(i)).collect::<Vec<_>>(),
            vec![32, 16, 8, 4, 2]
        );
    }

    #[test]
    fn variant_assignment_follows_stage_index() {
        let model = MeunModel::<f32>::new(small_config(64), 0).unwrap();
        assert_eq!(
            model.stage_variants(),
            [
                UenVariant::Uen5,
                UenVariant::Uen4,
                UenVariant::Uen4,
                UenVariant::UenA,
                UenVariant::UenA
            ]
        );
        let plain = MeunModel::<f32>::new(
            ModelConfig { use_uen: false, ..small_config(64) },
            0,
        )
        .unwrap();
        assert_eq!(plain.stage_variants(), [UenVariant::Plain; 5]);
    }

    #[test]
    fn forward_emits_seven_full_resolution_maps() {
        let mut model = MeunModel::<f64>::new(small_config(64), 3).unwrap();
        let mut tape = Tape::new();
        let maps = model.forward(&mut tape, rand_image(2, 64, 5), Mode::Train).unwrap();
        let out = maps.materialize(&tape);
        let expect = Shape::new(2, 1, 64, 64);
        assert_eq!(out.edge.shape(), expect);
        assert_eq!(out.united.shape(), expect);
        for s in &out.sal {
            assert_eq!(s.shape(), expect);
        }
        for t in out.sal.iter().chain([&out.edge, &out.united]) {
            assert!(t.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn config_validation() {
        assert!(MeunModel::<f32>::new(small_config(65), 0).is_err());
        assert!(MeunModel::<f32>::new(
            ModelConfig { base_channels: 4, ..small_config(64) },
            0
        )
        .is_err());
    }

    #[test]
    fn rejects_wrong_input_size() {
        let mut model = MeunModel::<f32>::new(small_config(64), 0).unwrap();
        let mut tape = Tape::new();
        let bad = Tensor::zeros(Shape::new(1, 3, 32, 32));
        assert!(matches!(
            model.forward(&mut tape, bad, Mode::Eval),
            Err(ModelError::Config(_))
        ));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let img = rand_image(1, 64, 11).map(|v| v as f32);
        let run = || {
            let mut model = MeunModel::<f32>::new(small_config(64), 9).unwrap();
            let mut tape = Tape::new();
            let maps = model.forward(&mut tape, img.clone(), Mode::Eval).unwrap();
            maps.materialize(&tape)
        };
        let (a, b) = (run(), run());
        assert_eq!(a.united.data(), b.united.data());
        assert_eq!(a.edge.data(), b.edge.data());
    }

    #[test]
    fn ablation_parameter_counts_increase() {
        let base = MeunModel::<f32>::new(
            ModelConfig { use_adm: false, use_uen: false, ..small_config(64) },
            0,
        )
        .unwrap();
        let with_adm = MeunModel::<f32>::new(
            ModelConfig { use_adm: true, use_uen: false, ..small_config(64) },
            0,
        )
        .unwrap();
        let full = MeunModel::<f32>::new(small_config(64), 0).unwrap();
        let (a, b, c) = (
            base.params.num_values(),
            with_adm.params.num_values(),
            full.params.num_values(),
        );
        assert!(a < b && b < c, "expected {a} < {b} < {c}");
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let mut model = MeunModel::<f64>::new(small_config(64), 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let n = 2;
        let sal: Vec<BinaryMask> = (0..n)
            .map(|_| {
                let mut m = BinaryMask::zeros(64, 64);
                let (y0, x0) = (rng.gen_range(4..24), rng.gen_range(4..24));
                for y in y0..y0 + 20 {
                    for x in x0..x0 + 24 {
                        m.set(y, x, 1);
                    }
                }
                m
            })
            .collect();
        let edge: Vec<BinaryMask> = sal.iter().map(make_edge_label).collect();

        let mut tape = Tape::new();
        let maps = model.forward(&mut tape, rand_image(n, 64, 55), Mode::Train).unwrap();
        let (loss, _) =
            total_loss(&mut tape, &maps.supervised(), &sal, &edge, LossOptions::default()).unwrap();
        let grads = tape.backward(loss).unwrap();
        grads.accumulate_into(&mut model.params);

        for p in model.params.params() {
            assert!(
                p.grad.sq_norm() > 0.0,
                "parameter {} got zero gradient",
                p.name
            );
        }
    }

    #[test]
    fn zeroed_heads_emit_uniform_half_maps() {
        let mut model = MeunModel::<f64>::new(small_config(64), 13).unwrap();
        for p in model.params.params_mut() {
            let is_head = p.name.contains(".head.1.")
                || p.name.starts_with("united.")
                || p.name.starts_with("edge.head.");
            if is_head {
                p.value.fill(0.0);
            }
        }
        let mut tape = Tape::new();
        let maps = model.forward(&mut tape, rand_image(1, 64, 2), Mode::Train).unwrap();
        let out = maps.materialize(&tape);
        for map in out.sal.iter().chain([&out.united, &out.edge]) {
            assert!(map.data().iter().all(|&v| v == 0.5), "sigmoid of zero logits");
        }
    }

    #[test]
    fn mini_encoder_channels_follow_config() {
        let cfg = small_config(64);
        let model = MeunModel::<f32>::new(cfg.clone(), 0).unwrap();
        assert_eq!(model.encoder.stage_channels(), cfg.mini_stage_channels);
    }

    #[test]
    fn adm_errors_on_1x1_deepest_feature() {
        // input 32 -> deepest stage 1x1
        let mut model = MeunModel::<f32>::new(small_config(32), 0).unwrap();
        let mut tape = Tape::new();
        let img = Tensor::zeros(Shape::new(1, 3, 32, 32));
        assert!(matches!(
            model.forward(&mut tape, img, Mode::Eval),
            Err(ModelError::AdmDegenerate)
        ));
        // without the ADM the same config runs
        let mut model = MeunModel::<f32>::new(
            ModelConfig { use_adm: false, ..small_config(32) },
            0,
        )
        .unwrap();
        let mut tape = Tape::new();
        let img = Tensor::zeros(Shape::new(1, 3, 32, 32));
        assert!(model.forward(&mut tape, img, Mode::Eval).is_ok());
    }

    #[test]
    fn resnet50_shape_channels() {
        let model = MeunModel::<f32>::new(
            ModelConfig {
                encoder: EncoderKind::Resnet50Shape,
                base_channels: 8,
                input_size: 64,
                ..ModelConfig::default()
            },
            0,
        )
        .unwrap();
        assert_eq!(model.encoder.stage_channels(), [64, 256, 512, 1024, 2048]);
    }
}
