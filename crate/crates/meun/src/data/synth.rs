//! Synthetic desk-scale datasets: bright filled rectangles and ellipses on
//! a darker textured background, with exact masks. Deterministic for a
//! given seed, down to the file bytes.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{netpbm, DataError, DatasetIndex};
use crate::loss::BinaryMask;

enum ShapeKind {
    Rect,
    Ellipse,
}

/// Generate `n` samples of `size x size` under `<root>/images` and
/// `<root>/masks`. Every mask has at least one foreground pixel and keeps a
/// one-pixel background border.
pub fn synth_dataset(
    root: &Path,
    seed: u64,
    n: usize,
    size: usize,
) -> Result<DatasetIndex, DataError> {
    if n == 0 {
        return Err(DataError::EmptyDataset);
    }
    assert!(size >= 16, "synthetic images need size >= 16");
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    fs::create_dir_all(&images_dir)?;
    fs::create_dir_all(&masks_dir)?;

    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let (image, mask) = render_sample(&mut rng, size);
        let stem = format!("synth_{i:04}");
        fs::write(
            images_dir.join(format!("{stem}.ppm")),
            netpbm::encode(&netpbm::Pixmap::Rgb { h: size, w: size, data: image }),
        )?;
        let mask_bytes: Vec<u8> = mask.values().iter().map(|&v| v * 255).collect();
        fs::write(
            masks_dir.join(format!("{stem}.pgm")),
            netpbm::encode(&netpbm::Pixmap::Gray { h: size, w: size, data: mask_bytes }),
        )?;
    }
    DatasetIndex::build(root)
}

fn render_sample(rng: &mut ChaCha8Rng, size: usize) -> (Vec<u8>, BinaryMask) {
    // background: directional gradient between two dark colors plus noise
    let c0: [f64; 3] = [rng.gen_range(0.0..90.0), rng.gen_range(0.0..90.0), rng.gen_range(0.0..90.0)];
    let c1: [f64; 3] = [rng.gen_range(0.0..90.0), rng.gen_range(0.0..90.0), rng.gen_range(0.0..90.0)];
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = angle.sin_cos();

    let mut image = vec![0u8; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let t = 0.5 + 0.5 * ((x as f64 * dx + y as f64 * dy) / (size as f64 * 1.5));
            let t = t.clamp(0.0, 1.0);
            for c in 0..3 {
                let base = c0[c] * (1.0 - t) + c1[c] * t;
                let noisy = (base + rng.gen_range(-10.0..10.0)).clamp(0.0, 110.0);
                image[(y * size + x) * 3 + c] = noisy as u8;
            }
        }
    }

    let mut mask = BinaryMask::zeros(size, size);
    let shapes = rng.gen_range(1..=3);
    for _ in 0..shapes {
        let kind = if rng.gen_bool(0.5) { ShapeKind::Rect } else { ShapeKind::Ellipse };
        let color: [u8; 3] = [
            rng.gen_range(150..=255),
            rng.gen_range(150..=255),
            rng.gen_range(150..=255),
        ];
        let half = size / 2;
        let hy = rng.gen_range(size / 10..=half / 2).max(3);
        let hx = rng.gen_range(size / 10..=half / 2).max(3);
        // keep a one-pixel border so the background never vanishes
        let cy = rng.gen_range(1 + hy..size - 1 - hy);
        let cx = rng.gen_range(1 + hx..size - 1 - hx);
        for y in cy - hy..=cy + hy {
            for x in cx - hx..=cx + hx {
                let inside = match kind {
                    ShapeKind::Rect => true,
                    ShapeKind::Ellipse => {
                        let fy = (y as f64 - cy as f64) / hy as f64;
                        let fx = (x as f64 - cx as f64) / hx as f64;
                        fy * fy + fx * fx <= 1.0
                    }
                };
                if inside {
                    mask.set(y, x, 1);
                    for c in 0..3 {
                        image[(y * size + x) * 3 + c] = color[c];
                    }
                }
            }
        }
    }
    debug_assert!(mask.count_ones() > 0);
    debug_assert!(mask.count_ones() < size * size);
    (image, mask)
}
