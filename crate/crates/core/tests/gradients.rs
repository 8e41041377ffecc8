//! Finite-difference gradient checks, one test per op.

mod common;

use common::gradcheck;

#[test]
fn conv2d() {
    gradcheck::conv2d();
}

#[test]
fn maxpool() {
    gradcheck::maxpool();
}

#[test]
fn batchnorm_train() {
    gradcheck::batchnorm_train();
}

#[test]
fn batchnorm_infer() {
    gradcheck::batchnorm_infer();
}

#[test]
fn relu() {
    gradcheck::relu();
}

#[test]
fn softmax_cross_entropy() {
    gradcheck::softmax_cross_entropy();
}

#[test]
fn dropout_fixed_mask() {
    gradcheck::dropout_fixed_mask();
}

#[test]
fn gwap() {
    gradcheck::gwap();
}

#[test]
fn gap() {
    gradcheck::gap();
}

#[test]
fn linear() {
    gradcheck::linear();
}

#[test]
fn concat() {
    gradcheck::concat();
}

#[test]
fn fire_module() {
    gradcheck::fire_module();
}

#[test]
fn wap_head() {
    gradcheck::wap_head();
}

#[test]
fn gap_head() {
    gradcheck::gap_head();
}

#[test]
fn fc_head() {
    gradcheck::fc_head();
}

#[test]
fn softmax_xent_over_head() {
    gradcheck::softmax_xent_over_head();
}
