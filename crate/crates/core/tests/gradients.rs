use siglab::gradcheck::{check_loss_gradients, check_model_gradients, Fault, FD_REL_TOL};
use siglab::harness::LossKind;

const INSTANCES: u64 = 25;

fn worst(check: impl Fn(u64) -> f64) -> f64 {
    (0..INSTANCES).map(check).fold(0.0, f64::max)
}

#[test]
fn sigmoid_loss_gradients() {
    let e = worst(|s| {
        check_loss_gradients(LossKind::Sigmoid, s, Fault::default())
            .unwrap()
            .max_rel_error
    });
    assert!(e <= FD_REL_TOL, "max relative error {e:e}");
}

#[test]
fn softmax_loss_gradients() {
    let e = worst(|s| {
        check_loss_gradients(LossKind::Softmax, s, Fault::default())
            .unwrap()
            .max_rel_error
    });
    assert!(e <= FD_REL_TOL, "max relative error {e:e}");
}

#[test]
fn sigmoid_end_to_end_gradients() {
    let e = worst(|s| {
        check_model_gradients(LossKind::Sigmoid, 100 + s, Fault::default())
            .unwrap()
            .max_rel_error
    });
    assert!(e <= FD_REL_TOL, "max relative error {e:e}");
}

#[test]
fn softmax_end_to_end_gradients() {
    let e = worst(|s| {
        check_model_gradients(LossKind::Softmax, 100 + s, Fault::default())
            .unwrap()
            .max_rel_error
    });
    assert!(e <= FD_REL_TOL, "max relative error {e:e}");
}

#[test]
fn checks_cover_every_parameter() {
    let c = check_model_gradients(LossKind::Sigmoid, 7, Fault::default()).unwrap();
    assert!(c.entries > 40);
}
