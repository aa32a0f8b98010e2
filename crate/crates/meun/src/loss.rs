//! Salient-edge label generation and the training objective: edge
//! cross-entropy, per-map BCE and soft-IoU, and the depth-weighted total.

use thiserror::Error;

use crate::tensor::ops::{bce_value, iou_value, Reduction};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Shape, Tensor, TensorError};

#[derive(Error, Debug)]
pub enum LossError {
    #[error("{map} shape {got} does not match labels {expect}")]
    LabelMismatch {
        map: &'static str,
        got: Shape,
        expect: Shape,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Strictly binary 2-D mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, values: Vec<u8>) -> Self {
        assert_eq!(values.len(), h * w, "mask data length");
        assert!(values.iter().all(|&v| v <= 1), "mask values must be 0 or 1");
        BinaryMask { h, w, values }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        BinaryMask { h, w, values: vec![0; h * w] }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.values[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        assert!(v <= 1);
        self.values[y * self.w + x] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_constant(&self) -> bool {
        let ones = self.count_ones();
        ones == 0 || ones == self.values.len()
    }

    /// Stack masks into an `(n, 1, h, w)` {0,1} tensor.
    pub fn to_tensor_batch<T: Scalar>(masks: &[BinaryMask]) -> Tensor<T> {
        assert!(!masks.is_empty());
        let (h, w) = (masks[0].h, masks[0].w);
        let mut data = Vec::with_capacity(masks.len() * h * w);
        for m in masks {
            assert_eq!((m.h, m.w), (h, w), "masks in a batch must share size");
            data.extend(m.values.iter().map(|&v| T::from_f64(v as f64)));
        }
        Tensor::from_vec(Shape::new(masks.len(), 1, h, w), data)
    }
}

/// Salient-edge ground truth from a saliency mask: squared forward
/// differences, a pixel is an edge wherever the gradient energy is nonzero.
/// The x255 for 8-bit image files happens only at serialization time.
pub fn make_edge_label(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.h, mask.w);
    let mut out = BinaryMask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let g = mask.get(y, x) as i32;
            let dx = if x + 1 < w { mask.get(y, x + 1) as i32 - g } else { 0 };
            let dy = if y + 1 < h { mask.get(y + 1, x) as i32 - g } else { 0 };
            if dx * dx + dy * dy > 0 {
                out.set(y, x, 1);
            }
        }
    }
    out
}

/// Edge map loss: pixelwise cross-entropy of the edge probabilities against
/// the generated edge labels. Pure value form.
pub fn edge_loss<T: Scalar>(
    edge_probs: &Tensor<T>,
    edge_labels: &[BinaryMask],
    reduction: Reduction,
) -> Result<f64, LossError> {
    let labels = BinaryMask::to_tensor_batch::<T>(edge_labels);
    check_labels("edge map", edge_probs.shape(), labels.shape())?;
    Ok(bce_value(edge_probs, &labels, reduction).as_f64())
}

/// Saliency BCE loss, pure value form.
pub fn bce_loss<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[BinaryMask],
    reduction: Reduction,
) -> Result<f64, LossError> {
    let labels = BinaryMask::to_tensor_batch::<T>(labels);
    check_labels("saliency map", probs.shape(), labels.shape())?;
    Ok(bce_value(probs, &labels, reduction).as_f64())
}

/// Soft-IoU loss, pure value form.
pub fn iou_loss<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[BinaryMask],
    hw_scaling: bool,
) -> Result<f64, LossError> {
    let labels = BinaryMask::to_tensor_batch::<T>(labels);
    check_labels("saliency map", probs.shape(), labels.shape())?;
    Ok(iou_value(probs, &labels, hw_scaling).as_f64())
}

fn check_labels(map: &'static str, got: Shape, expect: Shape) -> Result<(), LossError> {
    if got != expect {
        return Err(LossError::LabelMismatch { map, got, expect });
    }
    Ok(())
}

/// Options for the total training objective.
#[derive(Clone, Copy, Debug)]
pub struct LossOptions {
    pub reduction: Reduction,
    pub iou_hw_scaling: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions { reduction: Reduction::Mean, iou_hw_scaling: true }
    }
}

/// Per-term decomposition of the total loss. Components are tracked in f64
/// regardless of the training precision; `total` is their exact weighted sum.
#[derive(Clone, Debug, Default)]
pub struct LossBreakdown {
    pub edge: f64,
    pub bce_united: f64,
    pub iou_united: f64,
    pub bce_stage: [f64; 5],
    pub iou_stage: [f64; 5],
    pub total: f64,
}

impl LossBreakdown {
    /// Depth weight of intermediate map `i` (1-based): halves per level.
    pub fn stage_weight(i: usize) -> f64 {
        debug_assert!((1..=5).contains(&i));
        1.0 / f64::powi(2.0, i as i32 - 1)
    }

    /// Recompute the total from the stored components.
    pub fn resum(&self) -> f64 {
        let mut total = self.edge + self.bce_united + self.iou_united;
        for i in 0..5 {
            total += Self::stage_weight(i + 1) * (self.bce_stage[i] + self.iou_stage[i]);
        }
        total
    }

    fn log_fields(&self) -> String {
        let mut s = format!(
            "edge={:.6} bce_u={:.6} iou_u={:.6}",
            self.edge, self.bce_united, self.iou_united
        );
        for i in 0..5 {
            s.push_str(&format!(
                " bce_{}={:.6} iou_{}={:.6}",
                i + 1,
                self.bce_stage[i],
                i + 1,
                self.iou_stage[i]
            ));
        }
        s
    }

    /// One training-log line: `step total components...`.
    pub fn log_line(&self, step: usize) -> String {
        format!("step={} total={:.6} {}", step, self.total, self.log_fields())
    }
}

/// Probability maps the total loss supervises: one edge map, five
/// intermediate saliency maps ordered top (highest resolution) to bottom,
/// and the united map.
pub struct SupervisedMaps {
    pub edge: Var,
    pub stages: [Var; 5],
    pub united: Var,
}

/// Build the total objective on the tape:
/// edge + united BCE + united IoU + sum over stages of
/// `1/2^(i-1) * (BCE_i + IoU_i)`. Returns the scalar loss node and the f64
/// breakdown.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    maps: &SupervisedMaps,
    sal_labels: &[BinaryMask],
    edge_labels: &[BinaryMask],
    opts: LossOptions,
) -> Result<(Var, LossBreakdown), LossError> {
    let sal_t = BinaryMask::to_tensor_batch::<T>(sal_labels);
    let edge_t = BinaryMask::to_tensor_batch::<T>(edge_labels);

    check_labels("edge map", tape.shape(maps.edge), edge_t.shape())?;
    check_labels("united map", tape.shape(maps.united), sal_t.shape())?;
    for (i, &s) in maps.stages.iter().enumerate() {
        let _ = i;
        check_labels("stage saliency map", tape.shape(s), sal_t.shape())?;
    }

    let mut bd = LossBreakdown::default();

    let edge = tape.bce_loss(maps.edge, edge_t, opts.reduction)?;
    bd.edge = tape.value(edge).item().as_f64();
    let bce_u = tape.bce_loss(maps.united, sal_t.clone(), opts.reduction)?;
    bd.bce_united = tape.value(bce_u).item().as_f64();
    let iou_u = tape.iou_loss(maps.united, sal_t.clone(), opts.iou_hw_scaling)?;
    bd.iou_united = tape.value(iou_u).item().as_f64();

    let mut total = tape.add(edge, bce_u)?;
    total = tape.add(total, iou_u)?;

    for (i, &stage) in maps.stages.iter().enumerate() {
        let bce_i = tape.bce_loss(stage, sal_t.clone(), opts.reduction)?;
        bd.bce_stage[i] = tape.value(bce_i).item().as_f64();
        let iou_i = tape.iou_loss(stage, sal_t.clone(), opts.iou_hw_scaling)?;
        bd.iou_stage[i] = tape.value(iou_i).item().as_f64();
        let pair = tape.add(bce_i, iou_i)?;
        let weighted = tape.scale_const(pair, T::from_f64(LossBreakdown::stage_weight(i + 1)));
        total = tape.add(total, weighted)?;
    }

    bd.total = bd.resum();
    Ok((total, bd))
}
