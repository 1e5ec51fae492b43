//! Central finite differences against analytic gradients.

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::layers::{zero_grads, Mode, Parameters};
use crate::model::{Batch, Model};

/// Default central-difference step.
pub const STEP: f64 = 1e-5;
/// Largest accepted relative error per parameter group.
pub const TOLERANCE: f64 = 1e-5;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate `i`.
pub fn central_differences(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = f(&probe);
        probe[i] = orig - step;
        let down = f(&probe);
        probe[i] = orig;
        out.push((up - down) / (2.0 * step));
    }
    out
}

/// Gradient norms below this are indistinguishable from difference noise.
pub const NOISE_FLOOR: f64 = 1e-9;

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, and 0 when both norms are under
/// [`NOISE_FLOOR`] (for example a bias feeding a train-mode batch norm).
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&a, &b) in analytic.iter().zip(numeric) {
        diff += (a - b) * (a - b);
        na += a * a;
        nb += b * b;
    }
    let scale = libm::sqrt(na).max(libm::sqrt(nb));
    if scale < NOISE_FLOOR {
        0.0
    } else {
        libm::sqrt(diff) / scale
    }
}

/// Finite-difference verdict for one named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub size: usize,
    pub rel_error: f64,
    /// Some probe changed a fed-back argmax word, so the loss was not smooth
    /// around the checked point.
    pub discontinuous: bool,
    pub passed: bool,
}

/// Checks every parameter group of `model` on the train-mode total loss.
/// The gate stream is reseeded from `gate_seed` for every evaluation so all
/// probes see identical gate draws.
pub fn check_model(model: &Model, batch: &Batch, beta: f64, gate_seed: u64) -> Result<Vec<GroupCheck>> {
    let loss = |m: &Model| m.forward(batch, beta, &mut ChaCha8Rng::seed_from_u64(gate_seed), Mode::Train);
    let mut analytic = model.clone();
    zero_grads(&mut analytic);
    let base = loss(&analytic)?;
    analytic.backward(&base)?;
    let mut groups: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    analytic.visit_params("", &mut |name, p| {
        groups.push((String::from(name), p.value.data().to_vec(), p.grad.data().to_vec()))
    });
    let mut out = Vec::with_capacity(groups.len());
    for (name, value, grad) in groups {
        let mut discontinuous = false;
        let mut failure = None;
        let numeric = central_differences(&value, STEP, |w| {
            let mut probe = model.clone();
            probe.visit_params("", &mut |n, p| {
                if n == name {
                    p.value.data_mut().copy_from_slice(w);
                }
            });
            match loss(&probe) {
                Ok(pass) => {
                    discontinuous |= pass.guided.fed_words != base.guided.fed_words;
                    pass.losses.total
                }
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        let rel_error = relative_error(&grad, &numeric);
        out.push(GroupCheck {
            size: value.len(),
            passed: rel_error < TOLERANCE && !discontinuous,
            name,
            rel_error,
            discontinuous,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init;
    use crate::model::{ModelConfig, ModelKind};
    use crate::recurrent::CellKind;
    use crate::translator::WordLoss;
    use alloc::vec;

    #[test]
    fn differences_of_a_cubic() {
        let g = central_differences(&[1.0, -2.0], STEP, |x| x[0] * x[0] * x[0] + 3.0 * x[1]);
        assert!((g[0] - 3.0).abs() < 1e-9);
        assert!((g[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn relative_error_edges() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[1.1, 0.0]) - 0.1 / 1.1).abs() < 1e-12);
    }

    fn tiny_batch(r: &mut ChaCha8Rng) -> Batch {
        Batch::new(init::gaussian(r, &[3, 4], 1.0), &[vec![0, 3], vec![2], vec![1, 4, 5]], 6).unwrap()
    }

    fn perturbed(r: &mut ChaCha8Rng, config: ModelConfig) -> Model {
        let mut m = Model::new(r, config).unwrap();
        m.visit_params("", &mut |_, p| {
            let noise = init::gaussian(r, p.value.shape(), 0.3);
            p.value.add_assign(&noise).unwrap();
        });
        m
    }

    #[test]
    fn every_model_group_passes() {
        let variants = [
            (ModelKind::GuidedLogistic, CellKind::Lstm, false, false, WordLoss::Softmax, 0.5),
            (ModelKind::GuidedMoe, CellKind::BnLstm, true, true, WordLoss::Binary, 0.5),
            (ModelKind::GuidedLogistic, CellKind::BnLstm, true, false, WordLoss::Softmax, 0.0),
            (ModelKind::BaseMaxpool, CellKind::Lstm, false, true, WordLoss::Softmax, 1.0),
        ];
        for (i, &(kind, cell, bn_feature, bn_projection, word_loss, beta)) in variants.iter().enumerate() {
            let mut r = ChaCha8Rng::seed_from_u64(40 + i as u64);
            let mut c = ModelConfig::new(kind, 4, 6);
            c.embed_dim = 3;
            c.hidden = 5;
            c.cell = cell;
            c.bn_feature = bn_feature;
            c.bn_projection = bn_projection;
            c.word_loss = word_loss;
            let m = perturbed(&mut r, c);
            let batch = tiny_batch(&mut r);
            for g in check_model(&m, &batch, beta, 7).unwrap() {
                assert!(g.passed, "variant {i}: {g:?}");
            }
        }
    }
}
