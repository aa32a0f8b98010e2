//! Image and mask loading, dataset indexing, preprocessing, synthetic data
//! generation, and the checkpoint format.

pub mod checkpoint;
pub mod netpbm;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::loss::BinaryMask;
use crate::tensor::{ops, Shape, Tensor};

#[derive(Error, Debug)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("unsupported bit depth: maxval {maxval} (only 255 is supported)")]
    UnsupportedDepth { maxval: u32 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("image `{stem}` has no matching mask")]
    MissingMask { stem: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint magic mismatch")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    BadVersion { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {context}")]
    Truncated { context: String },
    #[error("checkpoint entry `{name}` has shape {found}, model expects {expected}")]
    EntryShape { name: String, found: String, expected: String },
    #[error("checkpoint is missing entry `{name}`")]
    MissingEntry { name: String },
    #[error("checkpoint has unknown entry `{name}`")]
    UnknownEntry { name: String },
}

/// Per-channel normalization constants applied after scaling to [0, 1].
pub const CHANNEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Channel-major `(3, h, w)` real image.
#[derive(Clone, Debug)]
pub struct ImageArray {
    pub h: usize,
    pub w: usize,
    /// Channel-major values; length `3 * h * w`.
    pub data: Vec<f32>,
}

impl ImageArray {
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(Shape::new(1, 3, self.h, self.w), self.data.clone())
    }
}

/// One preprocessed training/eval example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: ImageArray,
    pub mask: BinaryMask,
}

/// Decode an image file into a `(3, h, w)` array scaled to [0, 1];
/// grayscale inputs are replicated across the three channels.
pub fn load_image(path: &Path) -> Result<ImageArray, DataError> {
    let bytes = fs::read(path)?;
    let pixmap = netpbm::decode(&bytes)?;
    Ok(image_from_pixmap(&pixmap))
}

pub fn image_from_pixmap(pixmap: &netpbm::Pixmap) -> ImageArray {
    let (h, w) = pixmap.size();
    let mut data = vec![0.0f32; 3 * h * w];
    match pixmap {
        netpbm::Pixmap::Gray { data: px, .. } => {
            for (i, &v) in px.iter().enumerate() {
                let f = v as f32 / 255.0;
                data[i] = f;
                data[h * w + i] = f;
                data[2 * h * w + i] = f;
            }
        }
        netpbm::Pixmap::Rgb { data: px, .. } => {
            for i in 0..h * w {
                for c in 0..3 {
                    data[c * h * w + i] = px[3 * i + c] as f32 / 255.0;
                }
            }
        }
    }
    ImageArray { h, w, data }
}

/// Decode a mask file and binarize at >= 128. RGB masks use their first
/// channel.
pub fn load_mask(path: &Path) -> Result<BinaryMask, DataError> {
    let bytes = fs::read(path)?;
    let pixmap = netpbm::decode(&bytes)?;
    let (h, w) = pixmap.size();
    let values = match &pixmap {
        netpbm::Pixmap::Gray { data, .. } => {
            data.iter().map(|&v| (v >= 128) as u8).collect()
        }
        netpbm::Pixmap::Rgb { data, .. } => {
            (0..h * w).map(|i| (data[3 * i] >= 128) as u8).collect()
        }
    };
    Ok(BinaryMask::new(h, w, values))
}

/// Write a probability map as an 8-bit grayscale file, `round(p * 255)`.
pub fn save_gray(path: &Path, h: usize, w: usize, probs: &[f32]) -> Result<(), DataError> {
    assert_eq!(probs.len(), h * w);
    let data = probs
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let bytes = netpbm::encode(&netpbm::Pixmap::Gray { h, w, data });
    fs::write(path, bytes)?;
    Ok(())
}

/// Bilinear resize of a channel-major image.
pub fn resize_image(image: &ImageArray, out_h: usize, out_w: usize) -> ImageArray {
    let t = image.to_tensor();
    let r = ops::upsample_bilinear(&t, out_h, out_w).expect("non-empty image");
    ImageArray { h: out_h, w: out_w, data: r.into_data() }
}

/// Nearest-neighbor resize of a binary mask (keeps values strictly binary).
pub fn resize_mask_nearest(mask: &BinaryMask, out_h: usize, out_w: usize) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    let mut out = BinaryMask::zeros(out_h, out_w);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for y in 0..out_h {
        let iy = (((y as f64 + 0.5) * sy) as usize).min(h - 1);
        for x in 0..out_w {
            let ix = (((x as f64 + 0.5) * sx) as usize).min(w - 1);
            out.set(y, x, mask.get(iy, ix));
        }
    }
    out
}

/// Resize an image to `target x target` and normalize its channels.
pub fn preprocess_image(image: &ImageArray, target: usize) -> Result<ImageArray, DataError> {
    if target == 0 || !target.is_multiple_of(32) {
        return Err(DataError::Config(format!(
            "target size {target} must be a positive multiple of 32"
        )));
    }
    let mut image = if (image.h, image.w) == (target, target) {
        image.clone()
    } else {
        resize_image(image, target, target)
    };
    for c in 0..3 {
        let (m, s) = (CHANNEL_MEAN[c], CHANNEL_STD[c]);
        for v in &mut image.data[c * target * target..(c + 1) * target * target] {
            *v = (*v - m) / s;
        }
    }
    Ok(image)
}

/// Resize to `target x target` and normalize the image channels.
pub fn preprocess(
    id: String,
    image: &ImageArray,
    mask: &BinaryMask,
    target: usize,
) -> Result<Sample, DataError> {
    let image = preprocess_image(image, target)?;
    let mask = if (mask.height(), mask.width()) == (target, target) {
        mask.clone()
    } else {
        resize_mask_nearest(mask, target, target)
    };
    Ok(Sample { id, image, mask })
}

/// Stem-matched (image, mask) pairs under `<root>/images` and
/// `<root>/masks`, in lexicographic stem order.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub entries: Vec<IndexEntry>,
}

#[derive(Clone, Debug)]
pub struct IndexEntry {
    pub stem: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

fn stem_of(path: &Path) -> Option<String> {
    path.file_stem().map(|s| s.to_string_lossy().into_owned())
}

fn list_by_stem(dir: &Path, exts: &[&str]) -> Result<Vec<(String, PathBuf)>, DataError> {
    let mut out = Vec::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let ext_ok = path
            .extension()
            .map(|e| exts.contains(&e.to_string_lossy().as_ref()))
            .unwrap_or(false);
        if path.is_file() && ext_ok {
            if let Some(stem) = stem_of(&path) {
                out.push((stem, path));
            }
        }
    }
    // sorted by stem, independent of directory enumeration order
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

impl DatasetIndex {
    pub fn build(root: &Path) -> Result<Self, DataError> {
        let images = list_by_stem(&root.join("images"), &["ppm", "pgm"])?;
        let masks = list_by_stem(&root.join("masks"), &["pgm", "ppm"])?;
        if images.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        let mask_by_stem: std::collections::BTreeMap<_, _> = masks.into_iter().collect();
        let mut entries = Vec::with_capacity(images.len());
        for (stem, image) in images {
            let mask = mask_by_stem
                .get(&stem)
                .cloned()
                .ok_or_else(|| DataError::MissingMask { stem: stem.clone() })?;
            entries.push(IndexEntry { stem, image, mask });
        }
        Ok(DatasetIndex { root: root.to_path_buf(), entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Load and preprocess every sample to `target x target`.
    pub fn load_preprocessed(&self, target: usize) -> Result<Vec<Sample>, DataError> {
        self.entries
            .iter()
            .map(|e| {
                let image = load_image(&e.image)?;
                let mask = load_mask(&e.mask)?;
                preprocess(e.stem.clone(), &image, &mask, target)
            })
            .collect()
    }
}

/// Stack preprocessed sample images into an `(n, 3, s, s)` batch tensor.
pub fn batch_images(samples: &[&Sample]) -> Tensor<f32> {
    assert!(!samples.is_empty());
    let (h, w) = (samples[0].image.h, samples[0].image.w);
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    for s in samples {
        assert_eq!((s.image.h, s.image.w), (h, w));
        data.extend_from_slice(&s.image.data);
    }
    Tensor::from_vec(Shape::new(samples.len(), 3, h, w), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn write_p5(path: &Path, h: usize, w: usize, data: &[u8]) {
        let bytes = netpbm::encode(&netpbm::Pixmap::Gray { h, w, data: data.to_vec() });
        fs::write(path, bytes).unwrap();
    }

    #[test]
    fn image_scaling_and_gray_replication() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("a.pgm");
        write_p5(&p, 1, 2, &[255, 0]);
        let img = load_image(&p).unwrap();
        assert_eq!(img.data, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn mask_threshold_rule() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("m.pgm");
        write_p5(&p, 1, 4, &[0, 127, 128, 255]);
        let mask = load_mask(&p).unwrap();
        assert_eq!(mask.values(), &[0, 0, 1, 1]);
    }

    #[test]
    fn preprocess_normalizes_and_keeps_mask_binary() {
        let gray = ImageArray { h: 64, w: 64, data: vec![0.5; 3 * 64 * 64] };
        let mut mask = BinaryMask::zeros(64, 64);
        mask.set(10, 10, 1);
        let s = preprocess("x".into(), &gray, &mask, 64).unwrap();
        for c in 0..3 {
            let expect = (0.5 - CHANNEL_MEAN[c]) / CHANNEL_STD[c];
            assert!((s.image.data[c * 64 * 64] - expect).abs() < 1e-6);
        }
        assert_eq!(s.mask, mask, "same-size mask passes through unchanged");

        let resized = preprocess("y".into(), &gray, &mask, 32).unwrap();
        assert!(resized.mask.values().iter().all(|&v| v <= 1));
    }

    #[test]
    fn preprocess_rejects_bad_target() {
        let gray = ImageArray { h: 8, w: 8, data: vec![0.0; 192] };
        let mask = BinaryMask::zeros(8, 8);
        assert!(matches!(
            preprocess("x".into(), &gray, &mask, 50),
            Err(DataError::Config(_))
        ));
    }

    #[test]
    fn index_is_sorted_and_validates_pairs() {
        let dir = TempDir::new().unwrap();
        fs::create_dir_all(dir.path().join("images")).unwrap();
        fs::create_dir_all(dir.path().join("masks")).unwrap();
        // create in non-lexicographic order
        for stem in ["zeta", "alpha", "mid"] {
            write_p5(&dir.path().join(format!("images/{stem}.pgm")), 2, 2, &[0; 4]);
            write_p5(&dir.path().join(format!("masks/{stem}.pgm")), 2, 2, &[255; 4]);
        }
        let idx = DatasetIndex::build(dir.path()).unwrap();
        let stems: Vec<_> = idx.entries.iter().map(|e| e.stem.as_str()).collect();
        assert_eq!(stems, vec!["alpha", "mid", "zeta"]);

        fs::remove_file(dir.path().join("masks/mid.pgm")).unwrap();
        assert!(matches!(
            DatasetIndex::build(dir.path()),
            Err(DataError::MissingMask { .. })
        ));
    }

    #[test]
    fn empty_root_is_an_error() {
        let dir = TempDir::new().unwrap();
        assert!(matches!(
            DatasetIndex::build(dir.path()),
            Err(DataError::EmptyDataset)
        ));
    }
}
