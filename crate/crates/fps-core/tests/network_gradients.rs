//! Finite-difference gradient verification of the network building blocks
//! and the full forward pass on toy shapes.

use fps_core::hfsnet::{
    self, check_gradients, AttentionStageOp, CfasOp, FaiOp, FasOp, HfsnetOp, NetworkConfig,
};
use fps_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng)
}

#[test]
fn cfas_gradients_match_finite_differences() {
    let cfg = NetworkConfig::toy();
    let (params, buffers) = hfsnet::init_parameters(&cfg, 11).unwrap();
    let report = check_gradients(
        &CfasOp { prefix: "cnn.ublock.stem.cfas".into() },
        &params,
        &buffers,
        &rand_t(&[1, 8, 4, 4], 1),
        1e-6,
        0,
        0,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "worst {}: {}", report.worst_tensor, report.max_rel_err);
}

#[test]
fn fas_gradients_match_finite_differences() {
    let cfg = NetworkConfig::toy();
    let (params, buffers) = hfsnet::init_parameters(&cfg, 12).unwrap();
    let report = check_gradients(
        &FasOp { prefix: "cnn.ublock.fas".into(), cfg: cfg.clone() },
        &params,
        &buffers,
        &rand_t(&[2, 8, 4, 4], 2),
        1e-6,
        0,
        0,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-3, "worst {}: {}", report.worst_tensor, report.max_rel_err);
}

#[test]
fn fai_gradients_match_finite_differences() {
    let cfg = NetworkConfig::toy();
    let (mut params, buffers) = hfsnet::init_parameters(&cfg, 13).unwrap();
    // beta/gamma convs are zero-initialized; randomize so gradients flow
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for name in ["fai.s0.beta.w", "fai.s0.gamma.w"] {
        let shape = params.get(name).unwrap().shape().to_vec();
        params.set(name, Tensor::rand_uniform(&shape, -0.5, 0.5, &mut rng)).unwrap();
    }
    let report = check_gradients(
        &FaiOp {
            prefix: "fai.s0".into(),
            x_s: rand_t(&[1, 2, 8, 8], 4),
            m_s: rand_t(&[1, 8, 8, 8], 5),
        },
        &params,
        &buffers,
        &rand_t(&[1, 4, 4, 4], 6),
        1e-6,
        0,
        0,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "worst {}: {}", report.worst_tensor, report.max_rel_err);
}

#[test]
fn attention_stage_gradients_match_finite_differences() {
    let cfg = NetworkConfig::toy();
    let (params, buffers) = hfsnet::init_parameters(&cfg, 14).unwrap();
    let report = check_gradients(
        &AttentionStageOp { stage: 0, cfg: cfg.clone() },
        &params,
        &buffers,
        &rand_t(&[1, 4, 4, 4], 7),
        1e-6,
        24,
        99,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-3, "worst {}: {}", report.worst_tensor, report.max_rel_err);
}

#[test]
fn full_network_gradients_match_finite_differences() {
    let cfg = NetworkConfig::toy();
    let (params, buffers) = hfsnet::init_parameters(&cfg, 15).unwrap();
    let report = check_gradients(
        &HfsnetOp { cfg: cfg.clone() },
        &params,
        &buffers,
        &rand_t(&[1, 2, 16, 16], 8),
        1e-6,
        6,
        100,
    )
    .unwrap();
    assert!(
        report.max_rel_err < 1e-3,
        "worst {}: {} over {} probes",
        report.worst_tensor,
        report.max_rel_err,
        report.probes
    );
}
