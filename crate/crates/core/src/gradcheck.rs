//! Central finite differences for checking analytic gradients.
//!
//! Only forward evaluations go through here, so the check stays independent
//! of whatever backward pass it is compared against.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::harness::{forward_backward, LossKind, RunConfig};
use crate::losses::{sigmoid_loss_and_grads_unchecked, softmax_loss_and_grads_unchecked, LossGrads, LossParams};
use crate::math::{l2_normalize_rows, Matrix};
use crate::model::{DualEncoder, GroupSettings, ModelConfig};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Relative tolerance for analytic vs numeric agreement.
pub const FD_REL_TOL: f64 = 1e-6;
/// Denominator floor for [`relative_error`]. Central differences at
/// `h = 1e-5` carry roughly `1e-10` of absolute round-off on O(1) losses, so
/// entries much smaller than this floor are compared absolutely.
pub const FD_FLOOR: f64 = 1e-3;

/// `|a − n| / max(|a|, |n|, FD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Numeric gradient of `f` at `x` by central differences with step `h`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest [`relative_error`] over paired entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Outcome of one randomized gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub entries: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= FD_REL_TOL
    }
}

/// Deliberate corruption of analytic gradients, for testing the checker.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Fault {
    /// Added to the analytic `d_bias` before comparison.
    pub bias_grad_offset: f64,
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn loss_value(kind: LossKind, x: &Matrix, y: &Matrix, params: &LossParams) -> Result<(f64, LossGrads)> {
    match kind {
        LossKind::Sigmoid => {
            let (out, g) = sigmoid_loss_and_grads_unchecked(x, y, params, None)?;
            Ok((out.value, g))
        }
        LossKind::Softmax => {
            let (out, g) = softmax_loss_and_grads_unchecked(x, y, params.t_prime)?;
            Ok((out.value, g))
        }
    }
}

/// Compares the loss gradients w.r.t. normalized embeddings, `t′` and `b`
/// with central differences on a random instance drawn from `seed`.
pub fn check_loss_gradients(kind: LossKind, seed: u64, fault: Fault) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=6);
    let d = rng.random_range(2..=5);
    let zimg = l2_normalize_rows(&gaussian(n, d, &mut rng))?;
    let ztxt = l2_normalize_rows(&gaussian(n, d, &mut rng))?;
    let params = LossParams::new(rng.random_range(-1.0..1.5), rng.random_range(-4.0..4.0));

    let (_, g) = loss_value(kind, &zimg, &ztxt, &params)?;
    let mut analytic = g.d_zimg.as_slice().to_vec();
    analytic.extend_from_slice(g.d_ztxt.as_slice());
    analytic.push(g.d_t_prime);
    analytic.push(g.d_bias + fault.bias_grad_offset);

    let mut x0 = zimg.as_slice().to_vec();
    x0.extend_from_slice(ztxt.as_slice());
    x0.extend([params.t_prime, params.bias]);
    let split = n * d;
    let f = |v: &[f64]| {
        let x = Matrix::from_vec(n, d, v[..split].to_vec()).expect("shape");
        let y = Matrix::from_vec(n, d, v[split..2 * split].to_vec()).expect("shape");
        let p = LossParams::new(v[2 * split], v[2 * split + 1]);
        loss_value(kind, &x, &y, &p).expect("finite loss").0
    };
    let numeric = central_difference(f, &x0, FD_STEP);
    Ok(GradCheck {
        max_rel_error: max_relative_error(&analytic, &numeric),
        entries: analytic.len(),
    })
}

fn flat_params(model: &mut DualEncoder) -> Vec<f64> {
    let s = GroupSettings::default();
    model
        .param_groups(s, s, s)
        .into_iter()
        .flat_map(|g| g.params.into_iter().flat_map(|p| p.to_vec()))
        .collect()
}

fn set_params(model: &mut DualEncoder, values: &[f64]) {
    let s = GroupSettings::default();
    let mut it = values.iter();
    for group in model.param_groups(s, s, s) {
        for p in group.params {
            for slot in p.iter_mut() {
                *slot = *it.next().expect("parameter count");
            }
        }
    }
}

/// Raw tower outputs shorter than this make normalization curved enough
/// that `h = 1e-5` truncation error alone exceeds [`FD_REL_TOL`]; such
/// draws are rejected.
pub const MIN_RAW_NORM: f64 = 0.5;

type ModelInstance = (DualEncoder, Matrix, Vec<Vec<u32>>);

fn random_model_instance(rng: &mut ChaCha8Rng) -> Result<ModelInstance> {
    let n = rng.random_range(2..=5);
    let image_dim = rng.random_range(2..=4);
    let embed = rng.random_range(2..=4);
    let vocab = 7;
    let model_cfg = ModelConfig {
        image_layers: vec![image_dim, rng.random_range(2..=5), embed],
        vocab,
        bottleneck: 2,
        text_width: 3,
        text_hidden: vec![rng.random_range(2..=4)],
        disjoint_init: false,
    };
    let params = LossParams::new(rng.random_range(-1.0..1.5), rng.random_range(-4.0..4.0));
    let model = DualEncoder::new(&model_cfg, params, rng)?;
    let images = gaussian(n, image_dim, rng);
    let tokens: Vec<Vec<u32>> = (0..n)
        .map(|_| {
            let len = rng.random_range(1..=4);
            (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
        })
        .collect();
    Ok((model, images, tokens))
}

fn min_raw_norm((model, images, tokens): &ModelInstance) -> Result<f64> {
    let (img, _) = model.image.forward(images)?;
    let (txt, _) = model.text.forward(tokens)?;
    Ok(img
        .row_norms()
        .into_iter()
        .chain(txt.row_norms())
        .fold(f64::INFINITY, f64::min))
}

/// Compares end-to-end parameter gradients (both towers, normalization,
/// loss and its `t′`, `b`) with central differences on a small random model.
pub fn check_model_gradients(kind: LossKind, seed: u64, fault: Fault) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut model, images, tokens) = loop {
        let instance = random_model_instance(&mut rng)?;
        if min_raw_norm(&instance)? >= MIN_RAW_NORM {
            break instance;
        }
    };
    let cfg = RunConfig {
        loss: kind,
        ..Default::default()
    };
    let (_, grads) = forward_backward(&cfg, &model, &images, &tokens, 0)?;
    let mut analytic: Vec<f64> = grads.into_groups().into_iter().flatten().flatten().collect();
    *analytic.last_mut().expect("bias gradient") += fault.bias_grad_offset;

    let x0 = flat_params(&mut model);
    let mut probe = model.clone();
    let f = |v: &[f64]| {
        set_params(&mut probe, v);
        forward_backward(&cfg, &probe, &images, &tokens, 0)
            .expect("forward pass")
            .0
            .value
    };
    let numeric = central_difference(f, &x0, FD_STEP);
    Ok(GradCheck {
        max_rel_error: max_relative_error(&analytic, &numeric),
        entries: analytic.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_polynomial_gradient() {
        let f = |x: &[f64]| x[0] * x[0] * x[1] + 3.0 * x[1];
        let g = central_difference(f, &[2.0, -1.0], FD_STEP);
        assert!(max_relative_error(&[-4.0, 7.0], &g) < 1e-9);
    }

    #[test]
    fn bias_fault_is_caught() {
        let fault = Fault { bias_grad_offset: 1e-3 };
        for kind in [LossKind::Sigmoid, LossKind::Softmax] {
            assert!(check_loss_gradients(kind, 0, Fault::default()).unwrap().passed());
            assert!(!check_loss_gradients(kind, 0, fault).unwrap().passed());
            assert!(!check_model_gradients(kind, 0, fault).unwrap().passed());
        }
    }

    #[test]
    fn relative_error_floors_small_values() {
        assert_eq!(relative_error(1e-9, 0.0), 1e-6);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }
}
