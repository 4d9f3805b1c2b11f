#[allow(dead_code)]
mod common;

use common::gradcheck::{self, Case};

fn assert_all(cases: Vec<Case>) {
    for c in cases {
        assert!(
            c.passed(),
            "{}: {} instances, worst relative error {:e}",
            c.name,
            c.instances,
            c.worst
        );
    }
}

#[test]
fn matmul_and_transpose() {
    assert_all(gradcheck::matmul_and_transpose());
}

#[test]
fn linear_with_and_without_bias() {
    assert_all(gradcheck::linear_with_and_without_bias());
}

#[test]
fn elementwise_ops() {
    assert_all(gradcheck::elementwise_ops());
}

#[test]
fn normalization_and_softmax() {
    assert_all(gradcheck::normalization_and_softmax());
}

#[test]
fn gather_and_select() {
    assert_all(gradcheck::gather_and_select());
}

#[test]
fn attention_with_masks() {
    assert_all(gradcheck::attention_with_masks());
}

#[test]
fn cross_entropy_primitive() {
    assert_all(gradcheck::cross_entropy_primitive());
}

#[test]
fn cross_entropy_loss_gradients() {
    assert_all(vec![gradcheck::cross_entropy_loss_gradients()]);
}

#[test]
fn mass_loss_gradients() {
    assert_all(vec![gradcheck::mass_loss_gradients()]);
}

#[test]
fn back_translation_loss_gradients() {
    assert_all(vec![gradcheck::back_translation_loss_gradients()]);
}

#[test]
fn cross_translation_loss_gradients() {
    assert_all(vec![gradcheck::cross_translation_loss_gradients()]);
}
