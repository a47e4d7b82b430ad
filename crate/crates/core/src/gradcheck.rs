//! Whole-model gradient check: analytic backprop against central finite
//! differences of the batch loss, reported per parameter tensor.
//!
//! A perturbation that flips the sign of any ReLU pre-activation straddles
//! a kink where the loss is not differentiable; such elements are skipped
//! and counted instead of compared.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{ArchSpec, ConvSpec, ModelState};
use crate::tensor::{relative_error, softmax_cross_entropy, Tensor};

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Magnitude below which gradients are compared absolutely rather than relatively.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

impl LayerCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

#[derive(Clone, Copy)]
enum Param {
    Conv(usize),
    ClassifierW,
    ClassifierB,
}

fn param_mut(model: &mut ModelState, p: Param) -> &mut Tensor {
    match p {
        Param::Conv(i) => model.bank_mut(i).weights_mut(),
        Param::ClassifierW => model.classifier_mut().0,
        Param::ClassifierB => model.classifier_mut().1,
    }
}

fn probe(model: &ModelState, batch: &Tensor, labels: &[usize]) -> Result<(f64, Vec<bool>)> {
    let logits = model.forward(batch)?;
    let (loss, _) = softmax_cross_entropy(&logits, labels)?;
    Ok((loss, model.relu_pattern(batch)?))
}

/// Compares every parameter gradient of `model` on `(batch, labels)`.
pub fn check_model_gradients(
    model: &ModelState,
    batch: &Tensor,
    labels: &[usize],
    eps: f64,
) -> Result<Vec<LayerCheck>> {
    let (_, _, grads) = model.loss_and_grads(batch, labels)?;
    let base_pattern = model.relu_pattern(batch)?;
    let mut params: Vec<(String, Param, &Tensor)> = grads
        .conv
        .iter()
        .enumerate()
        .map(|(i, g)| (format!("conv{i}"), Param::Conv(i), g))
        .collect();
    params.push(("classifier.weight".into(), Param::ClassifierW, &grads.classifier_w));
    params.push(("classifier.bias".into(), Param::ClassifierB, &grads.classifier_b));

    let mut work = model.clone();
    let mut out = Vec::with_capacity(params.len());
    for (name, p, analytic) in params {
        let mut check = LayerCheck {
            name,
            max_rel_error: 0.0,
            checked: 0,
            skipped_kinks: 0,
        };
        for (k, &a) in analytic.data().iter().enumerate() {
            let orig = param_mut(&mut work, p).data()[k];
            param_mut(&mut work, p).data_mut()[k] = orig + eps;
            let (plus, pat_plus) = probe(&work, batch, labels)?;
            param_mut(&mut work, p).data_mut()[k] = orig - eps;
            let (minus, pat_minus) = probe(&work, batch, labels)?;
            param_mut(&mut work, p).data_mut()[k] = orig;
            if pat_plus != base_pattern || pat_minus != base_pattern {
                check.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            check.max_rel_error = check.max_rel_error.max(relative_error(a, numeric, GRADCHECK_FLOOR));
            check.checked += 1;
        }
        out.push(check);
    }
    Ok(out)
}

/// A random small network (2–3 conv layers, at most 8 channels) with a
/// random batch, for seeded gradient checks.
pub fn random_case(seed: u64) -> Result<(ModelState, Tensor, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = rng.random_range(2..=3);
    let in_ch = rng.random_range(1..=3);
    let size = rng.random_range(5..=8);
    let classes = rng.random_range(2..=6);
    let mut convs = Vec::with_capacity(layers);
    let mut ch = in_ch;
    for _ in 0..layers {
        let out = rng.random_range(1..=8);
        let kernel = if rng.random_bool(0.7) { 3 } else { 1 };
        convs.push(ConvSpec {
            in_channels: ch,
            out_channels: out,
            kernel,
            stride: rng.random_range(1..=2),
            pad: if kernel == 3 { rng.random_range(0..=1) } else { 0 },
        });
        ch = out;
    }
    let arch = ArchSpec {
        input: [in_ch, size, size],
        convs,
        classes,
    };
    // fall back to stride 1 when the random strides shrink the map to nothing
    let arch = if arch.validate().is_ok() {
        arch
    } else {
        ArchSpec {
            convs: arch
                .convs
                .iter()
                .map(|c| ConvSpec {
                    stride: 1,
                    pad: 1,
                    kernel: 3,
                    ..*c
                })
                .collect(),
            ..arch
        }
    };
    let mut model = ModelState::build(&arch, rng.random())?;
    // non-zero bias so the head gradient is not trivially symmetric
    model
        .classifier_mut()
        .1
        .data_mut()
        .iter_mut()
        .for_each(|b| *b = rng.random_range(-0.5..0.5));
    let b = rng.random_range(1..=3);
    let mut shape = vec![b];
    shape.extend_from_slice(&arch.input);
    let batch = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
    let labels = (0..b).map(|_| rng.random_range(0..classes)).collect();
    Ok((model, batch, labels))
}

pub fn random_gradcheck(seed: u64) -> Result<Vec<LayerCheck>> {
    let (model, batch, labels) = random_case(seed)?;
    check_model_gradients(&model, &batch, &labels, GRADCHECK_EPS)
}
