//! Unitary 2-D Fourier transforms, amplitude-spectrum statistics, per-frequency
//! 1-Wasserstein distance maps and frequency-domain perturbation of complex images.
//!
//! All transforms use the orthonormal (unitary) convention, so Parseval holds
//! exactly up to floating error and a one-hot spectrum entry maps to a plane
//! wave of unit l2 norm. Distance maps and perturbations index frequencies in
//! center-shifted order: DC sits at `(h/2, w/2)`.

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;

use crate::error::{FpsError, Result};

/// An H x W complex field stored as separate real and imaginary planes.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexImage {
    height: usize,
    width: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl ComplexImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        ComplexImage {
            height,
            width,
            re: vec![0.0; height * width],
            im: vec![0.0; height * width],
        }
    }

    /// Build from planes; dimensions must agree and values must be finite.
    pub fn from_planes(height: usize, width: usize, re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        if re.len() != height * width || im.len() != height * width {
            return Err(FpsError::shape(
                format!("{height}x{width} planes"),
                format!("re len {}, im len {}", re.len(), im.len()),
            ));
        }
        let img = ComplexImage { height, width, re, im };
        img.check_finite()?;
        Ok(img)
    }

    pub fn from_real(height: usize, width: usize, re: Vec<f64>) -> Result<Self> {
        let im = vec![0.0; re.len()];
        Self::from_planes(height, width, re, im)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        let idx = i * self.width + j;
        Complex64::new(self.re[idx], self.im[idx])
    }

    pub fn set(&mut self, i: usize, j: usize, v: Complex64) {
        let idx = i * self.width + j;
        self.re[idx] = v.re;
        self.im[idx] = v.im;
    }

    pub fn check_finite(&self) -> Result<()> {
        let ok = self.re.iter().chain(self.im.iter()).all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(FpsError::InvalidInput(
                "complex image contains non-finite values".into(),
            ))
        }
    }

    pub fn norm_l2(&self) -> f64 {
        self.re
            .iter()
            .zip(self.im.iter())
            .map(|(r, i)| r * r + i * i)
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_modulus(&self) -> f64 {
        self.re
            .iter()
            .zip(self.im.iter())
            .map(|(r, i)| (r * r + i * i).sqrt())
            .fold(0.0, f64::max)
    }

    fn to_buffer(&self) -> Vec<Complex64> {
        self.re
            .iter()
            .zip(self.im.iter())
            .map(|(&r, &i)| Complex64::new(r, i))
            .collect()
    }

    fn from_buffer(height: usize, width: usize, buf: &[Complex64]) -> Self {
        ComplexImage {
            height,
            width,
            re: buf.iter().map(|c| c.re).collect(),
            im: buf.iter().map(|c| c.im).collect(),
        }
    }
}

/// Per-frequency 1-Wasserstein distances between two corpora's amplitude
/// spectra, stored center-shifted alongside the min-max normalized form.
#[derive(Debug, Clone)]
pub struct DistanceMap {
    pub height: usize,
    pub width: usize,
    /// Raw distances, amplitude units, nonnegative.
    pub raw: Vec<f64>,
    /// `(raw - min) / (max - min + 1e-12)`, entrywise.
    pub normalized: Vec<f64>,
    /// Corpus sizes (synthetic, real) the map was built from.
    pub corpus_sizes: (usize, usize),
}

const NORM_TINY: f64 = 1e-12;

impl DistanceMap {
    pub fn from_raw(height: usize, width: usize, raw: Vec<f64>, corpus_sizes: (usize, usize)) -> Result<Self> {
        if raw.len() != height * width {
            return Err(FpsError::shape(
                format!("{height}x{width}"),
                format!("len {}", raw.len()),
            ));
        }
        if raw.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(FpsError::InvalidInput(
                "distance map entries must be finite and nonnegative".into(),
            ));
        }
        let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom = hi - lo + NORM_TINY;
        let normalized = raw.iter().map(|v| (v - lo) / denom).collect();
        Ok(DistanceMap { height, width, raw, normalized, corpus_sizes })
    }

    pub fn normalized_at(&self, i: usize, j: usize) -> f64 {
        self.normalized[i * self.width + j]
    }

    /// Rebuild from persisted planes without renormalizing, so a stored map
    /// round-trips bit for bit.
    pub fn from_stored(
        height: usize,
        width: usize,
        raw: Vec<f64>,
        normalized: Vec<f64>,
        corpus_sizes: (usize, usize),
    ) -> Result<Self> {
        if raw.len() != height * width || normalized.len() != height * width {
            return Err(FpsError::shape(
                format!("{height}x{width}"),
                format!("{} raw / {} normalized", raw.len(), normalized.len()),
            ));
        }
        Ok(DistanceMap { height, width, raw, normalized, corpus_sizes })
    }
}

/// How many frequencies perturb one image, and at what scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbMode {
    /// One frequency entry drawn uniformly; one plane wave added.
    SingleFrequency,
    /// Independent sign draw at every frequency entry.
    FullSpectrum,
}

#[derive(Debug, Clone)]
pub struct PerturbationConfig {
    pub mode: PerturbMode,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            mode: PerturbMode::FullSpectrum,
            epsilon: 1.0,
            seed: 0,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(FpsError::InvalidInput(format!(
                "perturbation epsilon must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

fn fft2_impl(img: &ComplexImage, inverse: bool) -> ComplexImage {
    let (h, w) = (img.height, img.width);
    let mut buf = img.to_buffer();
    let mut planner = FftPlanner::new();
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut col = vec![Complex64::default(); h];
    for j in 0..w {
        for i in 0..h {
            col[i] = buf[i * w + j];
        }
        col_fft.process(&mut col);
        for i in 0..h {
            buf[i * w + j] = col[i];
        }
    }
    let scale = 1.0 / ((h * w) as f64).sqrt();
    for v in buf.iter_mut() {
        *v *= scale;
    }
    ComplexImage::from_buffer(h, w, &buf)
}

/// Unitary forward 2-D FFT. `ifft2(fft2(x)) == x` and `||fft2(x)||_2 == ||x||_2`
/// up to floating error.
pub fn fft2(img: &ComplexImage) -> Result<ComplexImage> {
    img.check_finite()?;
    if img.height == 0 || img.width == 0 {
        return Err(FpsError::InvalidInput("empty image".into()));
    }
    Ok(fft2_impl(img, false))
}

/// Unitary inverse 2-D FFT.
pub fn ifft2(spec: &ComplexImage) -> Result<ComplexImage> {
    spec.check_finite()?;
    if spec.height == 0 || spec.width == 0 {
        return Err(FpsError::InvalidInput("empty image".into()));
    }
    Ok(fft2_impl(spec, true))
}

/// Center-shift index: moves DC from row/col 0 to row/col `n/2`.
#[inline]
pub fn shift_index(k: usize, n: usize) -> usize {
    (k + n / 2) % n
}

/// Inverse of `shift_index`.
#[inline]
pub fn unshift_index(k: usize, n: usize) -> usize {
    (k + n - n / 2) % n
}

/// Entrywise modulus of the unitary spectrum, center-shifted so DC sits at
/// `(h/2, w/2)`.
pub fn amplitude_spectrum(img: &ComplexImage) -> Result<Vec<f64>> {
    let spec = fft2(img)?;
    let (h, w) = (img.height, img.width);
    let mut amp = vec![0.0; h * w];
    for i in 0..h {
        let si = shift_index(i, h);
        for j in 0..w {
            let sj = shift_index(j, w);
            amp[si * w + sj] = spec.get(i, j).norm();
        }
    }
    Ok(amp)
}

/// Exact 1-Wasserstein distance between two empirical distributions: the area
/// between their CDFs. For equal-length samples this equals the mean absolute
/// difference of the sorted lists.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(FpsError::InvalidInput(
            "wasserstein1 requires non-empty sample lists".into(),
        ));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(FpsError::InvalidInput(
            "wasserstein1 requires finite samples".into(),
        ));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());

    let (n, m) = (sa.len() as f64, sb.len() as f64);
    let mut ia = 0usize;
    let mut ib = 0usize;
    let mut prev = f64::NAN;
    let mut area = 0.0;
    while ia < sa.len() || ib < sb.len() {
        let x = match (sa.get(ia), sb.get(ib)) {
            (Some(&va), Some(&vb)) => va.min(vb),
            (Some(&va), None) => va,
            (None, Some(&vb)) => vb,
            (None, None) => unreachable!(),
        };
        if prev.is_finite() && x > prev {
            let fa = ia as f64 / n;
            let fb = ib as f64 / m;
            area += (fa - fb).abs() * (x - prev);
        }
        while ia < sa.len() && sa[ia] <= x {
            ia += 1;
        }
        while ib < sb.len() && sb[ib] <= x {
            ib += 1;
        }
        prev = x;
    }
    Ok(area)
}

/// Per-frequency W1 distance between two corpora's center-shifted amplitude
/// spectra, min-max normalized per the `DistanceMap` contract.
pub fn build_distance_map(
    syn_corpus: &[ComplexImage],
    real_corpus: &[ComplexImage],
) -> Result<DistanceMap> {
    if syn_corpus.is_empty() || real_corpus.is_empty() {
        return Err(FpsError::InvalidInput(
            "both corpora must be non-empty".into(),
        ));
    }
    let (h, w) = (syn_corpus[0].height, syn_corpus[0].width);
    for img in syn_corpus.iter().chain(real_corpus.iter()) {
        if img.height != h || img.width != w {
            return Err(FpsError::shape(
                format!("{h}x{w}"),
                format!("{}x{}", img.height, img.width),
            ));
        }
    }
    let syn_amps: Vec<Vec<f64>> = syn_corpus
        .iter()
        .map(amplitude_spectrum)
        .collect::<Result<_>>()?;
    let real_amps: Vec<Vec<f64>> = real_corpus
        .iter()
        .map(amplitude_spectrum)
        .collect::<Result<_>>()?;

    let raw: Vec<f64> = (0..h * w)
        .into_par_iter()
        .map(|idx| {
            let sa: Vec<f64> = syn_amps.iter().map(|amp| amp[idx]).collect();
            let sb: Vec<f64> = real_amps.iter().map(|amp| amp[idx]).collect();
            wasserstein1(&sa, &sb).expect("non-empty finite samples")
        })
        .collect();

    DistanceMap::from_raw(h, w, raw, (syn_corpus.len(), real_corpus.len()))
}

/// Unit-norm plane wave: the unitary inverse FFT of a one-hot spectrum with its
/// nonzero entry at unshifted k-space index `(i, j)` (DC at `(0, 0)`). Every
/// pixel has modulus `1/sqrt(h*w)`.
pub fn plane_wave(i: usize, j: usize, height: usize, width: usize) -> Result<ComplexImage> {
    if i >= height || j >= width {
        return Err(FpsError::IndexOutOfRange { i, j, height, width });
    }
    let mut one_hot = ComplexImage::zeros(height, width);
    one_hot.set(i, j, Complex64::new(1.0, 0.0));
    let mut wave = ifft2(&one_hot)?;
    let norm = wave.norm_l2();
    if norm > 0.0 {
        for v in wave.re.iter_mut().chain(wave.im.iter_mut()) {
            *v /= norm;
        }
    }
    Ok(wave)
}

/// Distance-guided frequency perturbation. Signs are drawn from `cfg.seed`;
/// the result is deterministic for a fixed seed.
///
/// Single-frequency mode adds one plane wave scaled by `epsilon * d(i, j)`;
/// full-spectrum mode adds an independent `+/-1` draw at every entry, i.e.
/// `epsilon * r .* d` added to the image's k-space in the plane-wave basis.
pub fn perturb_image(
    img: &ComplexImage,
    dmap: &DistanceMap,
    cfg: &PerturbationConfig,
) -> Result<ComplexImage> {
    cfg.validate()?;
    let (h, w) = (img.height, img.width);
    if dmap.height != h || dmap.width != w {
        return Err(FpsError::shape(
            format!("{h}x{w}"),
            format!("{}x{}", dmap.height, dmap.width),
        ));
    }
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);

    match cfg.mode {
        PerturbMode::SingleFrequency => {
            // (si, sj) indexes the center-shifted distance map.
            let si = rng.random_range(0..h);
            let sj = rng.random_range(0..w);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let scale = cfg.epsilon * sign * dmap.normalized_at(si, sj);
            let wave = plane_wave(unshift_index(si, h), unshift_index(sj, w), h, w)?;
            let mut out = img.clone();
            for idx in 0..h * w {
                out.re[idx] += scale * wave.re[idx];
                out.im[idx] += scale * wave.im[idx];
            }
            Ok(out)
        }
        PerturbMode::FullSpectrum => {
            // Build the signed k-space field in unshifted order, then one
            // inverse transform gives the spatial perturbation. The input
            // image itself never round-trips through the FFT.
            let mut field = ComplexImage::zeros(h, w);
            for si in 0..h {
                for sj in 0..w {
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    let v = cfg.epsilon * sign * dmap.normalized_at(si, sj);
                    let ui = unshift_index(si, h);
                    let uj = unshift_index(sj, w);
                    field.re[ui * w + uj] = v;
                }
            }
            let delta = ifft2(&field)?;
            let mut out = img.clone();
            for idx in 0..h * w {
                out.re[idx] += delta.re[idx];
                out.im[idx] += delta.im[idx];
            }
            Ok(out)
        }
    }
}
