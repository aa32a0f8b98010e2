//! Batch inference: load a checkpoint, run eval-mode forward passes over a
//! directory of images, write 8-bit saliency maps.

use std::fs;
use std::path::{Path, PathBuf};

use super::CliError;
use crate::data::{checkpoint, load_image, preprocess_image, save_gray, DataError};
use crate::model::{MeunModel, Mode, ModelConfig};
use crate::tensor::tape::Tape;

#[derive(Clone, Copy, Debug, Default)]
pub struct InferOptions {
    /// Also write the five per-stage maps, suffixed `_s1`..`_s5`.
    pub emit_intermediates: bool,
    /// Also write the edge map, suffixed `_edge`.
    pub emit_edge: bool,
    /// Emit the top-stage map instead of the united fusion.
    pub use_last_stage: bool,
}

/// Returns the number of files written.
pub fn cmd_infer(
    config: &ModelConfig,
    checkpoint_path: &Path,
    input_dir: &Path,
    output_dir: &Path,
    opts: InferOptions,
) -> Result<usize, CliError> {
    config.validate()?;
    let mut model = MeunModel::<f32>::new(config.clone(), 0)?;
    checkpoint::load_into(&mut model.params, checkpoint_path)?;
    fs::create_dir_all(output_dir).map_err(DataError::Io)?;

    let mut inputs: Vec<(String, PathBuf)> = Vec::new();
    for entry in fs::read_dir(input_dir).map_err(DataError::Io)? {
        let path = entry.map_err(DataError::Io)?.path();
        let is_netpbm = path
            .extension()
            .map(|e| e == "ppm" || e == "pgm")
            .unwrap_or(false);
        if path.is_file() && is_netpbm {
            let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
            inputs.push((stem, path));
        }
    }
    inputs.sort_by(|a, b| a.0.cmp(&b.0));

    let size = config.input_size;
    let mut written = 0usize;
    for (stem, path) in inputs {
        let image = preprocess_image(&load_image(&path)?, size)?;
        let mut tape = Tape::new();
        let maps = model.forward(&mut tape, image.to_tensor(), Mode::Eval)?;
        let out = maps.materialize(&tape);

        let main = if opts.use_last_stage { &out.sal[0] } else { &out.united };
        save_gray(&output_dir.join(format!("{stem}.pgm")), size, size, main.data())?;
        written += 1;

        if opts.emit_intermediates {
            for (i, sal) in out.sal.iter().enumerate() {
                save_gray(
                    &output_dir.join(format!("{stem}_s{}.pgm", i + 1)),
                    size,
                    size,
                    sal.data(),
                )?;
                written += 1;
            }
        }
        if opts.emit_edge {
            save_gray(&output_dir.join(format!("{stem}_edge.pgm")), size, size, out.edge.data())?;
            written += 1;
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::synth_dataset;
    use crate::data::{load_mask, netpbm};
    use crate::model::ModelConfig;
    use crate::tensor::tape::Tape;
    use tempfile::TempDir;

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_size: 32,
            base_channels: 8,
            mini_stage_channels: [4, 8, 8, 8, 8],
            use_adm: false,
            ..ModelConfig::default()
        }
    }

    fn setup() -> (TempDir, std::path::PathBuf) {
        let dir = TempDir::new().unwrap();
        synth_dataset(&dir.path().join("ds"), 3, 2, 32).unwrap();
        let model = MeunModel::<f32>::new(tiny(), 8).unwrap();
        let ckpt = dir.path().join("m.ckpt");
        checkpoint::save(&model.params, &ckpt).unwrap();
        (dir, ckpt)
    }

    #[test]
    fn writes_one_united_map_per_input_or_seven_with_flags() {
        let (dir, ckpt) = setup();
        let inputs = dir.path().join("ds/images");

        let plain = cmd_infer(&tiny(), &ckpt, &inputs, &dir.path().join("out1"), InferOptions::default())
            .unwrap();
        assert_eq!(plain, 2);

        let all = cmd_infer(
            &tiny(),
            &ckpt,
            &inputs,
            &dir.path().join("out2"),
            InferOptions { emit_intermediates: true, emit_edge: true, use_last_stage: false },
        )
        .unwrap();
        assert_eq!(all, 2 * 7);
        for suffix in ["", "_s1", "_s2", "_s3", "_s4", "_s5", "_edge"] {
            assert!(dir.path().join(format!("out2/synth_0000{suffix}.pgm")).is_file());
        }
    }

    #[test]
    fn last_stage_flag_selects_the_top_prediction() {
        let (dir, ckpt) = setup();
        let inputs = dir.path().join("ds/images");
        cmd_infer(
            &tiny(),
            &ckpt,
            &inputs,
            &dir.path().join("out"),
            InferOptions { emit_intermediates: true, emit_edge: false, use_last_stage: true },
        )
        .unwrap();
        let main = std::fs::read(dir.path().join("out/synth_0000.pgm")).unwrap();
        let s1 = std::fs::read(dir.path().join("out/synth_0000_s1.pgm")).unwrap();
        assert_eq!(main, s1, "--use-last-stage emits the stage-1 map");
    }

    #[test]
    fn emitted_bytes_are_the_quantized_probabilities() {
        let (dir, ckpt) = setup();
        let inputs = dir.path().join("ds/images");
        cmd_infer(&tiny(), &ckpt, &inputs, &dir.path().join("out"), InferOptions::default())
            .unwrap();

        // recompute the united map directly and compare quantization
        let mut model = MeunModel::<f32>::new(tiny(), 0).unwrap();
        checkpoint::load_into(&mut model.params, &ckpt).unwrap();
        let first = dir.path().join("ds/images/synth_0000.ppm");
        let image = preprocess_image(&load_image(&first).unwrap(), 32).unwrap();
        let mut tape = Tape::new();
        let maps = model.forward(&mut tape, image.to_tensor(), crate::model::Mode::Eval).unwrap();
        let united = tape.value(maps.united).clone();

        let bytes = std::fs::read(dir.path().join("out/synth_0000.pgm")).unwrap();
        let netpbm::Pixmap::Gray { data, .. } = netpbm::decode(&bytes).unwrap() else {
            panic!("expected grayscale output");
        };
        for (&b, &p) in data.iter().zip(united.data().iter()) {
            assert_eq!(b, (p.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        // loading it back through the mask loader also works
        let _ = load_mask(&dir.path().join("out/synth_0000.pgm")).unwrap();
    }
}
