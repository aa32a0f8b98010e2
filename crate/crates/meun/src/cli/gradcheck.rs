//! Gradient verification entry point. Primitive scope sweeps every tape op;
//! model scope differentiates the full training objective of tiny configs
//! and compares a random subsample of parameter coordinates against central
//! finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::CliError;
use crate::loss::{make_edge_label, total_loss, BinaryMask, LossOptions};
use crate::model::{MeunModel, Mode, ModelConfig};
use crate::tensor::gradcheck::{grad_check, CheckedOp, DEFAULT_EPS, PRIMITIVE_TOLERANCE};
use crate::tensor::tape::Tape;
use crate::tensor::{Shape, Tensor};

/// Pass threshold for the full-model check.
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Minimum number of parameter coordinates the model scope samples.
pub const MODEL_COORDS: usize = 200;
/// Step for the full-model finite differences. The composed network is
/// dense with ReLU and pooling kinks at the 1e-3..1e-5 scale, so the model
/// scope needs a much smaller step than the per-primitive checks; double
/// precision keeps the difference quotient well above the rounding floor.
pub const MODEL_EPS: f64 = 1e-6;
/// Denominator floor for the model-scope relative error. A loss of order 1
/// evaluated in f64 bounds the difference quotient's accuracy near 1e-9, so
/// gradients far below this scale are compared absolutely (to 1e-3 of the
/// floor) instead of drowning in quantization noise.
pub const MODEL_SCALE_FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Scope {
    Primitives,
    Model,
}

impl std::str::FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "primitives" => Ok(Scope::Primitives),
            "model" => Ok(Scope::Model),
            other => Err(format!("unknown scope `{other}` (use primitives|model)")),
        }
    }
}

pub struct GradCheckRow {
    pub name: String,
    pub max_error: f64,
    pub threshold: f64,
}

pub struct GradCheckReport {
    pub rows: Vec<GradCheckRow>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.max_error < r.threshold)
    }
}

pub fn cmd_gradcheck(scope: Scope, seed: u64) -> Result<GradCheckReport, CliError> {
    let rows = match scope {
        Scope::Primitives => CheckedOp::all()
            .iter()
            .map(|&op| GradCheckRow {
                name: op.name().to_string(),
                max_error: grad_check(op, DEFAULT_EPS, seed),
                threshold: PRIMITIVE_TOLERANCE,
            })
            .collect(),
        Scope::Model => {
            // 32px puts the deepest stage at 1x1 where the ADM is degenerate
            // by contract, so the ADM path gets its own 64px check
            let tiny = ModelConfig {
                input_size: 32,
                base_channels: 8,
                mini_stage_channels: [4, 8, 8, 8, 8],
                use_adm: false,
                ..ModelConfig::default()
            };
            let adm_cover = ModelConfig {
                input_size: 64,
                use_adm: true,
                ..tiny.clone()
            };
            vec![
                GradCheckRow {
                    name: "model[32px, no adm]".into(),
                    max_error: model_grad_check(&tiny, seed, MODEL_COORDS)?,
                    threshold: MODEL_TOLERANCE,
                },
                GradCheckRow {
                    name: "model[64px, adm]".into(),
                    max_error: model_grad_check(&adm_cover, seed ^ 1, 120)?,
                    threshold: MODEL_TOLERANCE,
                },
            ]
        }
    };
    Ok(GradCheckReport { rows })
}

/// Random non-constant rectangle mask for the synthetic supervision target.
fn random_mask(rng: &mut ChaCha8Rng, size: usize) -> BinaryMask {
    let mut m = BinaryMask::zeros(size, size);
    let qh = rng.gen_range(size / 8..size / 3);
    let qw = rng.gen_range(size / 8..size / 3);
    let y0 = rng.gen_range(1..size - 2 * qh);
    let x0 = rng.gen_range(1..size - 2 * qw);
    for y in y0..y0 + 2 * qh {
        for x in x0..x0 + 2 * qw {
            m.set(y, x, 1);
        }
    }
    m
}

/// Max relative error between analytic parameter gradients of the total
/// loss and central finite differences, over a random coordinate subsample.
/// Everything runs in double precision.
pub fn model_grad_check(
    config: &ModelConfig,
    seed: u64,
    coords: usize,
) -> Result<f64, CliError> {
    let size = config.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6D6F_6465);
    // batch of 2 keeps train-mode batch norm well-defined at a 1x1 stage
    let image = Tensor::<f64>::rand_uniform(Shape::new(2, 3, size, size), 1.0, &mut rng);
    let sal = vec![random_mask(&mut rng, size), random_mask(&mut rng, size)];
    let edge: Vec<BinaryMask> = sal.iter().map(make_edge_label).collect();
    let opts = LossOptions::default();

    let mut model = MeunModel::<f64>::new(config.clone(), seed)?;

    // analytic gradients
    let mut tape = Tape::new();
    let maps = model.forward(&mut tape, image.clone(), Mode::Train)?;
    let (loss, _) = total_loss(&mut tape, &maps.supervised(), &sal, &edge, opts)?;
    let grads = tape.backward(loss)?;
    grads.accumulate_into(&mut model.params);

    // deterministic coordinate subsample across all parameters
    let sizes: Vec<usize> = model.params.params().iter().map(|p| p.value.numel()).collect();
    let total: usize = sizes.iter().sum();
    let coords = coords.min(total);
    let mut chosen = std::collections::BTreeSet::new();
    while chosen.len() < coords {
        chosen.insert(rng.gen_range(0..total));
    }

    let locate = |flat: usize| -> (usize, usize) {
        let mut rest = flat;
        for (pi, &n) in sizes.iter().enumerate() {
            if rest < n {
                return (pi, rest);
            }
            rest -= n;
        }
        unreachable!("flat index within total")
    };

    let eval_loss = |model: &mut MeunModel<f64>| -> Result<f64, CliError> {
        let mut tape = Tape::new();
        let maps = model.forward(&mut tape, image.clone(), Mode::Train)?;
        let (loss, _) = total_loss(&mut tape, &maps.supervised(), &sal, &edge, opts)?;
        Ok(tape.value(loss).item())
    };

    let eps = MODEL_EPS;
    let mut max_err = 0.0f64;
    for flat in chosen {
        let (pi, idx) = locate(flat);
        let analytic = model.params.params()[pi].grad.data()[idx];
        let orig = model.params.params()[pi].value.data()[idx];

        model.params.params_mut()[pi].value.data_mut()[idx] = orig + eps;
        let plus = eval_loss(&mut model)?;
        model.params.params_mut()[pi].value.data_mut()[idx] = orig - eps;
        let minus = eval_loss(&mut model)?;
        model.params.params_mut()[pi].value.data_mut()[idx] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let err = (analytic - numeric).abs()
            / (analytic.abs() + numeric.abs()).max(MODEL_SCALE_FLOOR);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_scope_passes() {
        let report = cmd_gradcheck(Scope::Primitives, 20260811).unwrap();
        assert_eq!(report.rows.len(), CheckedOp::all().len());
        for row in &report.rows {
            assert!(
                row.max_error < row.threshold,
                "{}: {:.3e}",
                row.name,
                row.max_error
            );
        }
        assert!(report.passed());
    }
}
