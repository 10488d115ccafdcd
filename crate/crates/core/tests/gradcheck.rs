//! Central finite-difference checks for every tape primitive.
//!
//! Each primitive is wrapped as `L(θ) = Σ R ⊙ f(θ)` with a fixed random
//! projection `R`, so every output element contributes to the gradient.

mod support;

use support::fd;

#[test]
fn matmul() {
    fd::matmul();
}

#[test]
fn bias_add() {
    fd::bias_add();
}

#[test]
fn tile_add() {
    fd::tile_add();
}

#[test]
fn add_and_mul() {
    fd::add_and_mul();
}

#[test]
fn scale_and_sum() {
    fd::scale_and_sum();
}

#[test]
fn relu() {
    fd::relu();
}

#[test]
fn gelu() {
    fd::gelu();
}

#[test]
fn layer_norm() {
    fd::layer_norm();
}

#[test]
fn embedding_lookup() {
    fd::embedding_lookup();
}

#[test]
fn self_attention() {
    fd::self_attention();
}

#[test]
fn mean_pool() {
    fd::mean_pool();
}

#[test]
fn softmax_cross_entropy() {
    fd::softmax_cross_entropy();
}

#[test]
fn mse() {
    fd::mse();
}

#[test]
fn composed_network() {
    fd::composed_network();
}
