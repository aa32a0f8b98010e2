//! Score a directory of predictions against ground-truth masks and write a
//! CSV report. Per-image scoring may run in parallel (capped by
//! `MEUN_THREADS`); aggregation always happens in stem order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::CliError;
use crate::data::{load_image, load_mask, DataError};
use crate::metrics::{evaluate, GrayMap, MetricsReport};
use crate::tensor::{ops, Shape, Tensor};

fn list_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>, CliError> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(DataError::Io)? {
        let path = entry.map_err(DataError::Io)?.path();
        let is_netpbm = path
            .extension()
            .map(|e| e == "ppm" || e == "pgm")
            .unwrap_or(false);
        if path.is_file() && is_netpbm {
            out.insert(path.file_stem().unwrap().to_string_lossy().into_owned(), path);
        }
    }
    Ok(out)
}

/// Load a prediction as a gray map in [0, 1]; RGB inputs are averaged.
fn load_prediction(path: &Path) -> Result<GrayMap, CliError> {
    let img = load_image(path)?;
    let plane = img.h * img.w;
    let data = (0..plane)
        .map(|i| {
            (img.data[i] as f64 + img.data[plane + i] as f64 + img.data[2 * plane + i] as f64)
                / 3.0
        })
        .collect();
    Ok(GrayMap::new(img.h, img.w, data))
}

fn resize_to(pred: GrayMap, h: usize, w: usize) -> GrayMap {
    if (pred.height(), pred.width()) == (h, w) {
        return pred;
    }
    let t = Tensor::<f64>::from_vec(
        Shape::new(1, 1, pred.height(), pred.width()),
        pred.data().to_vec(),
    );
    let r = ops::upsample_bilinear(&t, h, w).expect("non-empty prediction");
    GrayMap::new(h, w, r.into_data())
}

/// Pair predictions and ground truths by stem, score each pair, and write
/// the CSV report. Unmatched stems are skipped and recorded.
pub fn cmd_eval(
    pred_dir: &Path,
    gt_dir: &Path,
    report_path: Option<&Path>,
) -> Result<MetricsReport, CliError> {
    let preds = list_stems(pred_dir)?;
    let gts = list_stems(gt_dir)?;

    let mut report = MetricsReport::default();
    for stem in preds.keys() {
        if !gts.contains_key(stem) {
            report.unmatched.push(format!("{stem} (prediction only)"));
        }
    }
    let matched: Vec<(&String, &PathBuf)> = gts
        .iter()
        .filter_map(|(stem, gt_path)| {
            if preds.contains_key(stem) {
                Some((stem, gt_path))
            } else {
                report.unmatched.push(format!("{stem} (ground truth only)"));
                None
            }
        })
        .collect();

    let score_one = |(stem, gt_path): &(&String, &PathBuf)| -> Result<_, CliError> {
        let gt = load_mask(gt_path)?;
        let pred = load_prediction(&preds[*stem])?;
        let pred = resize_to(pred, gt.height(), gt.width());
        Ok(((*stem).clone(), evaluate(&pred, &gt), gt.count_ones() == 0))
    };

    // optional thread cap; results come back in stem order either way
    let scored: Vec<_> = match thread_cap() {
        Some(threads) => rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool")
            .install(|| matched.par_iter().map(score_one).collect::<Result<_, _>>())?,
        None => matched.par_iter().map(score_one).collect::<Result<_, _>>()?,
    };
    for (stem, scores, empty) in scored {
        report.push(stem, scores, empty);
    }

    if let Some(path) = report_path {
        fs::write(path, report.to_csv()).map_err(DataError::Io)?;
    }
    Ok(report)
}

fn thread_cap() -> Option<usize> {
    std::env::var("MEUN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::netpbm::{encode, Pixmap};
    use tempfile::TempDir;

    fn write_gray(path: &Path, h: usize, w: usize, data: Vec<u8>) {
        fs::write(path, encode(&Pixmap::Gray { h, w, data })).unwrap();
    }

    #[test]
    fn identical_predictions_score_ideal_and_rows_match_pairs() {
        let dir = TempDir::new().unwrap();
        let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
        fs::create_dir_all(&pred).unwrap();
        fs::create_dir_all(&gt).unwrap();
        for stem in ["a", "b", "c"] {
            let mut data = vec![0u8; 64];
            for y in 2..5 {
                for x in 1..6 {
                    data[y * 8 + x] = 255;
                }
            }
            write_gray(&gt.join(format!("{stem}.pgm")), 8, 8, data.clone());
            write_gray(&pred.join(format!("{stem}.pgm")), 8, 8, data);
        }
        // one unmatched on each side
        write_gray(&pred.join("orphan.pgm"), 8, 8, vec![0; 64]);
        write_gray(&gt.join("lonely.pgm"), 8, 8, vec![255; 64]);

        let csv_path = dir.path().join("report.csv");
        let report = cmd_eval(&pred, &gt, Some(&csv_path)).unwrap();
        assert_eq!(report.image_count(), 3);
        assert_eq!(report.unmatched.len(), 2);
        let a = report.aggregate();
        assert_eq!((a.mf, a.mae, a.em), (1.0, 0.0, 1.0));
        assert!((a.sm - 1.0).abs() < 1e-9);

        let csv = fs::read_to_string(&csv_path).unwrap();
        assert_eq!(csv.lines().count(), 3 + 2, "header + rows + aggregate");
    }

    #[test]
    fn prediction_resized_to_gt_size() {
        let dir = TempDir::new().unwrap();
        let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
        fs::create_dir_all(&pred).unwrap();
        fs::create_dir_all(&gt).unwrap();
        write_gray(&gt.join("x.pgm"), 8, 8, vec![255; 64]);
        write_gray(&pred.join("x.pgm"), 4, 4, vec![255; 16]);
        let report = cmd_eval(&pred, &gt, None).unwrap();
        assert_eq!(report.rows[0].1.mae, 0.0);
    }
}
