//! Hot-path benchmarks: transforms, distance maps, perturbation, the network
//! forward pass and one full training step.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use fps_bench::{phantom_pairs, random_image};
use fps_core::hfsnet::{self, Mode, NetworkConfig};
use fps_core::kspace::{
    amplitude_spectrum, build_distance_map, fft2, perturb_image, DistanceMap, PerturbMode,
    PerturbationConfig,
};
use fps_core::phantom::DomainTag;
use fps_core::tensor::Tensor;
use fps_core::training::{train_step, TeacherStudentState, TrainConfig};

fn bench_kspace(c: &mut Criterion) {
    let img = random_image(1, 64, 64);
    c.bench_function("fft2_64", |b| b.iter(|| fft2(black_box(&img)).unwrap()));
    c.bench_function("amplitude_spectrum_64", |b| {
        b.iter(|| amplitude_spectrum(black_box(&img)).unwrap())
    });

    let syn: Vec<_> = (0..16).map(|s| random_image(s, 32, 32)).collect();
    let real: Vec<_> = (0..16).map(|s| random_image(100 + s, 32, 32)).collect();
    c.bench_function("distance_map_16x16imgs_32", |b| {
        b.iter(|| build_distance_map(black_box(&syn), black_box(&real)).unwrap())
    });

    let raw: Vec<f64> = (0..64 * 64).map(|k| (k % 31) as f64).collect();
    let dmap = DistanceMap::from_raw(64, 64, raw, (16, 16)).unwrap();
    let cfg = PerturbationConfig { mode: PerturbMode::FullSpectrum, epsilon: 1.0, seed: 5 };
    c.bench_function("perturb_full_spectrum_64", |b| {
        b.iter(|| perturb_image(black_box(&img), &dmap, &cfg).unwrap())
    });
}

fn toy_network() -> NetworkConfig {
    NetworkConfig {
        scales: 3,
        base_channels: 4,
        out_channels: 2,
        window_size: 4,
        attn_heads: 2,
        embed_dim: 4,
        patch_size: 2,
        fas_branches: 2,
        fas_kernels: vec![3, 5],
        fas_groups: 2,
    }
}

fn bench_network(c: &mut Criterion) {
    let cfg = toy_network();
    let (params, buffers) = hfsnet::init_parameters(&cfg, 3).unwrap();
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::rand_uniform(&[2, 2, 64, 64], -1.0, 1.0, &mut rng);
    c.bench_function("hfsnet_forward_b2_64", |b| {
        b.iter(|| {
            let mut buf = buffers.clone();
            hfsnet::hfsnet_forward(black_box(&x), &params, &mut buf, &cfg, Mode::Infer).unwrap()
        })
    });
}

fn bench_train_step(c: &mut Criterion) {
    let network = toy_network();
    let labeled = phantom_pairs(2, 64, DomainTag::Synthetic, 10);
    let unlabeled = phantom_pairs(2, 64, DomainTag::Real, 50);
    let raw: Vec<f64> = (0..64 * 64).map(|k| (k % 13) as f64 / 13.0).collect();
    let dmap = DistanceMap::from_raw(64, 64, raw, (2, 2)).unwrap();
    let cfg = TrainConfig {
        batch_size: 2,
        total_iterations: 1_000_000,
        lr_start: 1e-4,
        lr_end: 1e-6,
        lambda_freq: 0.1,
        perturbation: PerturbationConfig { mode: PerturbMode::FullSpectrum, epsilon: 1.0, seed: 1 },
        network,
        seed: 0,
        checkpoint_every: 0,
    };
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("train_step_b2_64", |b| {
        let mut state = TeacherStudentState::init(&cfg.network, 0).unwrap();
        b.iter(|| train_step(&mut state, &labeled, &unlabeled, &dmap, &cfg).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_kspace, bench_network, bench_train_step);
criterion_main!(benches);
