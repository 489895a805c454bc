mod common;

use common::{grad, FD_TOLERANCE};

fn check(name: &str, err: f64) {
    assert!(err <= FD_TOLERANCE, "{name}: relative error {err:.3e}");
}

#[test]
fn triplet_gradient() {
    check("triplet", grad::triplet());
}

#[test]
fn cross_entropy_gradient() {
    check("cross-entropy", grad::cross_entropy());
}

#[test]
fn contrastive_gradient_including_temperature() {
    check("contrastive", grad::contrastive());
}

#[test]
fn end_point_error_gradient_through_soft_argmax() {
    check("epe", grad::end_point_error());
}

#[test]
fn segmentation_gradient() {
    check("segmentation", grad::segmentation());
}

#[test]
fn adapter_and_branch_weight_gradients() {
    check("adapters", grad::adapters_and_alpha());
}
