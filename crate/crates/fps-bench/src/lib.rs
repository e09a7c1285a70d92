//! Shared fixtures for the criterion benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fps_core::kspace::ComplexImage;
use fps_core::phantom::{self, SamplePair};

pub fn random_image(seed: u64, h: usize, w: usize) -> ComplexImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::Rng;
    let re: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let im: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    ComplexImage::from_planes(h, w, re, im).unwrap()
}

pub fn phantom_pairs(count: usize, size: usize, tag: phantom::DomainTag, seed0: u64) -> Vec<SamplePair> {
    (0..count)
        .map(|i| {
            let maps =
                phantom::generate_parameter_maps(seed0 + i as u64, size, size, 4, 0.3).unwrap();
            let input = phantom::forward_signal(&maps, &phantom::default_echoes()).unwrap();
            SamplePair {
                id: format!("bench{i}"),
                domain_tag: tag,
                input,
                target: maps,
            }
        })
        .collect()
}
