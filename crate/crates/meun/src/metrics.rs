//! Evaluation measures for saliency maps: mean F-measure over the 255
//! integer thresholds, mean absolute error, structure-measure, and
//! enhanced-alignment measure, plus per-dataset report aggregation.
//!
//! All metrics are pure f64 functions of a real-valued prediction in [0, 1]
//! and a binary ground truth of the same size.

use std::fmt::Write as _;

use crate::loss::BinaryMask;

/// Real-valued 2-D saliency prediction in [0, 1].
#[derive(Clone, Debug)]
pub struct GrayMap {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl GrayMap {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), h * w, "gray map data length");
        assert!(
            data.iter().all(|&v| (0.0..=1.0).contains(&v)),
            "gray map values must lie in [0, 1]"
        );
        GrayMap { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    pub fn from_mask(mask: &BinaryMask) -> Self {
        GrayMap {
            h: mask.height(),
            w: mask.width(),
            data: mask.values().iter().map(|&v| v as f64).collect(),
        }
    }
}

fn check_pair(pred: &GrayMap, gt: &BinaryMask) {
    assert_eq!(
        (pred.h, pred.w),
        (gt.height(), gt.width()),
        "prediction and ground truth sizes differ"
    );
}

/// 8-bit quantization used by the thresholded metrics.
#[inline]
fn quantize(p: f64) -> u8 {
    (p * 255.0).round() as u8
}

/// Confusion counts at threshold `t` in 1..=255: a pixel is positive iff its
/// quantized prediction is >= t.
pub fn confusion_counts(
    pred: &GrayMap,
    gt: &BinaryMask,
    t: u8,
) -> (usize, usize, usize, usize) {
    check_pair(pred, gt);
    assert!(t >= 1, "threshold must be in 1..=255");
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &g) in pred.data.iter().zip(gt.values().iter()) {
        let pos = quantize(p) >= t;
        match (pos, g == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    (tp, fp, fn_, tn)
}

/// Weight putting more emphasis on precision in the F-measure.
pub const F_MEASURE_BETA_SQ: f64 = 0.3;

/// Mean of the F-measures over all 255 integer thresholds on the 8-bit
/// quantized prediction. An all-background ground truth scores 0 by the
/// zero-denominator rule.
pub fn mean_f_measure(pred: &GrayMap, gt: &BinaryMask) -> f64 {
    check_pair(pred, gt);
    // histogram per class, then suffix sums give every threshold at once
    let mut hist_fg = [0usize; 256];
    let mut hist_bg = [0usize; 256];
    for (&p, &g) in pred.data.iter().zip(gt.values().iter()) {
        if g == 1 {
            hist_fg[quantize(p) as usize] += 1;
        } else {
            hist_bg[quantize(p) as usize] += 1;
        }
    }
    let total_fg: usize = hist_fg.iter().sum();
    if total_fg == 0 {
        return 0.0;
    }

    let mut sum_f = 0.0;
    let (mut tp, mut fp) = (0usize, 0usize);
    // iterate t = 255 down to 1, growing the >= t counts incrementally
    for t in (1..=255usize).rev() {
        tp += hist_fg[t];
        fp += hist_bg[t];
        let fn_ = total_fg - tp;
        if tp + fp == 0 || tp + fn_ == 0 {
            continue; // F := 0
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / (tp + fn_) as f64;
        let denom = F_MEASURE_BETA_SQ * precision + recall;
        if denom == 0.0 {
            continue;
        }
        sum_f += (1.0 + F_MEASURE_BETA_SQ) * precision * recall / denom;
    }
    sum_f / 255.0
}

/// Mean absolute error between the prediction and the {0,1} ground truth.
pub fn mae(pred: &GrayMap, gt: &BinaryMask) -> f64 {
    check_pair(pred, gt);
    let sum: f64 = pred
        .data
        .iter()
        .zip(gt.values().iter())
        .map(|(&p, &g)| (p - g as f64).abs())
        .sum();
    sum / pred.data.len() as f64
}

/// Weight between the object and region terms of the structure measure.
pub const S_MEASURE_ALPHA: f64 = 0.5;

/// Structure measure: object-oriented plus region-oriented structural
/// similarity. Degenerate ground truths fall back to the mean prediction
/// conventions of the reference algorithm.
pub fn s_measure(pred: &GrayMap, gt: &BinaryMask) -> f64 {
    check_pair(pred, gt);
    let fg = gt.count_ones();
    let total = gt.values().len();
    let q = if fg == 0 {
        1.0 - mean(&pred.data)
    } else if fg == total {
        mean(&pred.data)
    } else {
        let so = s_object(pred, gt);
        let sr = s_region(pred, gt);
        (S_MEASURE_ALPHA * so + (1.0 - S_MEASURE_ALPHA) * sr).max(0.0)
    };
    q.clamp(0.0, 1.0)
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Sample standard deviation (n-1 normalization; 0 for fewer than 2 values).
fn sample_std(xs: &[f64], mu: f64) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let var = xs.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / (xs.len() - 1) as f64;
    var.sqrt()
}

fn object_score(values: &[f64]) -> f64 {
    let x = mean(values);
    let sigma = sample_std(values, x);
    2.0 * x / (x * x + 1.0 + sigma + f64::EPSILON)
}

fn s_object(pred: &GrayMap, gt: &BinaryMask) -> f64 {
    let mut fg_vals = Vec::new();
    let mut bg_vals = Vec::new();
    for (&p, &g) in pred.data.iter().zip(gt.values().iter()) {
        if g == 1 {
            fg_vals.push(p);
        } else {
            bg_vals.push(1.0 - p);
        }
    }
    let u = gt.count_ones() as f64 / gt.values().len() as f64;
    u * object_score(&fg_vals) + (1.0 - u) * object_score(&bg_vals)
}

/// 1-based centroid of the foreground, rounded as in the reference code.
fn centroid(gt: &BinaryMask) -> (usize, usize) {
    let (h, w) = (gt.height(), gt.width());
    let total = gt.count_ones();
    if total == 0 {
        return ((w as f64 / 2.0).round() as usize, (h as f64 / 2.0).round() as usize);
    }
    let mut sx = 0usize;
    let mut sy = 0usize;
    for y in 0..h {
        for x in 0..w {
            if gt.get(y, x) == 1 {
                sx += x + 1;
                sy += y + 1;
            }
        }
    }
    (
        (sx as f64 / total as f64).round() as usize,
        (sy as f64 / total as f64).round() as usize,
    )
}

/// The four quadrants of a map split at a 1-based centroid `(cx, cy)`:
/// each is (y range, x range).
type Quad = ((usize, usize), (usize, usize));

fn quadrants(h: usize, w: usize, cx: usize, cy: usize) -> [Quad; 4] {
    [
        ((0, cy), (0, cx)),
        ((0, cy), (cx, w)),
        ((cy, h), (0, cx)),
        ((cy, h), (cx, w)),
    ]
}

fn region_ssim(pred: &GrayMap, gt: &BinaryMask, quad: Quad) -> f64 {
    let ((y0, y1), (x0, x1)) = quad;
    let n = (y1 - y0) * (x1 - x0);
    if n == 0 {
        return 0.0;
    }
    let mut ps = Vec::with_capacity(n);
    let mut gs = Vec::with_capacity(n);
    for y in y0..y1 {
        for x in x0..x1 {
            ps.push(pred.get(y, x));
            gs.push(gt.get(y, x) as f64);
        }
    }
    let (mx, my) = (mean(&ps), mean(&gs));
    let norm = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxy = 0.0;
    for i in 0..n {
        let (dp, dg) = (ps[i] - mx, gs[i] - my);
        sx += dp * dp;
        sy += dg * dg;
        sxy += dp * dg;
    }
    sx /= norm;
    sy /= norm;
    sxy /= norm;

    let alpha = 4.0 * mx * my * sxy;
    let beta = (mx * mx + my * my) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + f64::EPSILON)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(pred: &GrayMap, gt: &BinaryMask) -> f64 {
    let (h, w) = (gt.height(), gt.width());
    let (cx, cy) = centroid(gt);
    let area = (h * w) as f64;
    let quads = quadrants(h, w, cx, cy);
    let weights = [
        (cx * cy) as f64 / area,
        ((w - cx) * cy) as f64 / area,
        (cx * (h - cy)) as f64 / area,
        ((w - cx) * (h - cy)) as f64 / area,
    ];
    quads
        .iter()
        .zip(weights.iter())
        .map(|(&q, &wt)| wt * region_ssim(pred, gt, q))
        .sum()
}

/// Binarization threshold applied to predictions inside the E-measure.
pub const E_MEASURE_THRESHOLD: f64 = 128.0 / 255.0;

/// Enhanced-alignment measure on the prediction binarized at a fixed
/// threshold. Degenerate ground truths use the reference conventions.
pub fn e_measure(pred: &GrayMap, gt: &BinaryMask) -> f64 {
    check_pair(pred, gt);
    let n = gt.values().len() as f64;
    let fg = gt.count_ones();
    let pred_bin: Vec<f64> = pred
        .data
        .iter()
        .map(|&p| if p >= E_MEASURE_THRESHOLD { 1.0 } else { 0.0 })
        .collect();

    if fg == 0 {
        return pred_bin.iter().map(|&p| 1.0 - p).sum::<f64>() / n;
    }
    if fg == gt.values().len() {
        return pred_bin.iter().sum::<f64>() / n;
    }

    let mu_g = fg as f64 / n;
    let mu_p = mean(&pred_bin);
    let mut sum = 0.0;
    for (&p, &g) in pred_bin.iter().zip(gt.values().iter()) {
        let dg = g as f64 - mu_g;
        let dp = p - mu_p;
        let denom = dg * dg + dp * dp;
        let xi = if denom == 0.0 { 0.0 } else { 2.0 * dg * dp / denom };
        let e = (1.0 + xi) * (1.0 + xi) / 4.0;
        sum += e;
    }
    sum / n
}

/// The four scores of one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricScores {
    pub mf: f64,
    pub mae: f64,
    pub sm: f64,
    pub em: f64,
}

pub fn evaluate(pred: &GrayMap, gt: &BinaryMask) -> MetricScores {
    MetricScores {
        mf: mean_f_measure(pred, gt),
        mae: mae(pred, gt),
        sm: s_measure(pred, gt),
        em: e_measure(pred, gt),
    }
}

/// Per-dataset evaluation report: per-image rows plus arithmetic-mean
/// aggregates, with bookkeeping for skipped and degenerate inputs.
#[derive(Clone, Debug, Default)]
pub struct MetricsReport {
    pub rows: Vec<(String, MetricScores)>,
    /// Image ids whose ground truth had no foreground (mF forced to 0).
    pub empty_gt: Vec<String>,
    /// Stems present on only one side of the pred/gt pairing.
    pub unmatched: Vec<String>,
}

impl MetricsReport {
    pub fn push(&mut self, id: String, scores: MetricScores, gt_empty: bool) {
        if gt_empty {
            self.empty_gt.push(id.clone());
        }
        self.rows.push((id, scores));
    }

    pub fn image_count(&self) -> usize {
        self.rows.len()
    }

    /// Arithmetic means over per-image scores, accumulated in index order.
    pub fn aggregate(&self) -> MetricScores {
        let n = self.rows.len().max(1) as f64;
        let mut sum = MetricScores { mf: 0.0, mae: 0.0, sm: 0.0, em: 0.0 };
        for (_, s) in &self.rows {
            sum.mf += s.mf;
            sum.mae += s.mae;
            sum.sm += s.sm;
            sum.em += s.em;
        }
        MetricScores { mf: sum.mf / n, mae: sum.mae / n, sm: sum.sm / n, em: sum.em / n }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,mF,MAE,Sm,Em\n");
        for (id, s) in &self.rows {
            let _ = writeln!(out, "{},{:.6},{:.6},{:.6},{:.6}", id, s.mf, s.mae, s.sm, s.em);
        }
        let a = self.aggregate();
        let _ = writeln!(out, "mean,{:.6},{:.6},{:.6},{:.6}", a.mf, a.mae, a.sm, a.em);
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<24} {:>8} {:>8} {:>8} {:>8}", "image", "mF", "MAE", "Sm", "Em");
        for (id, s) in &self.rows {
            let _ = writeln!(
                out,
                "{:<24} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                id, s.mf, s.mae, s.sm, s.em
            );
        }
        let a = self.aggregate();
        let _ = writeln!(
            out,
            "{:<24} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            "mean", a.mf, a.mae, a.sm, a.em
        );
        if !self.empty_gt.is_empty() {
            let _ = writeln!(
                out,
                "note: {} image(s) with empty ground truth scored mF = 0: {}",
                self.empty_gt.len(),
                self.empty_gt.join(", ")
            );
        }
        if !self.unmatched.is_empty() {
            let _ = writeln!(
                out,
                "warning: {} unmatched stem(s) skipped: {}",
                self.unmatched.len(),
                self.unmatched.join(", ")
            );
        }
        out
    }
}
