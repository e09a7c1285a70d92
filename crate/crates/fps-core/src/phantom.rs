//! Procedural paired data: quantitative parameter maps, a closed-form
//! multi-echo forward model producing stripe-modulated complex images, and a
//! controllable synthetic-to-"real" domain-shift simulator.
//!
//! Background pixels are exactly zero in all three maps; tissue pixels stay
//! inside the documented value envelopes.

use std::fs;
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FpsError, Result};
use crate::fpsd::{self, FpsdArray};
use crate::kspace::{fft2, ifft2, shift_index, ComplexImage};

/// T2 normalization scale in seconds; normalized targets are `t2 / T2_SCALE`
/// clipped to `[0, T2_NORM_MAX]`.
pub const T2_SCALE: f64 = 1.0;
pub const T2_NORM_MAX: f64 = 2.5;
/// ADC normalization scale in mm^2/s; normalized targets are `adc / ADC_SCALE`
/// clipped to `[0, 1]`.
pub const ADC_SCALE: f64 = 3.5e-3;

pub const T2_MIN: f64 = 0.02;
pub const T2_MAX: f64 = 2.5;
pub const ADC_MIN: f64 = 1e-4;
pub const ADC_MAX: f64 = 3.5e-3;
pub const M0_MAX: f64 = 1.5;

/// Ground-truth/predicted quantitative maps: T2 in seconds, ADC in mm^2/s,
/// M0 dimensionless.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterMaps {
    pub height: usize,
    pub width: usize,
    pub t2: Vec<f64>,
    pub adc: Vec<f64>,
    pub m0: Vec<f64>,
}

impl ParameterMaps {
    pub fn zeros(height: usize, width: usize) -> Self {
        let n = height * width;
        ParameterMaps {
            height,
            width,
            t2: vec![0.0; n],
            adc: vec![0.0; n],
            m0: vec![0.0; n],
        }
    }

    /// Tissue pixels (m0 > 0) must sit inside the value envelopes; background
    /// pixels are exactly zero everywhere.
    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        if self.t2.len() != n || self.adc.len() != n || self.m0.len() != n {
            return Err(FpsError::shape(
                format!("{}x{} maps", self.height, self.width),
                "inconsistent plane lengths".to_string(),
            ));
        }
        for idx in 0..n {
            let (t2, adc, m0) = (self.t2[idx], self.adc[idx], self.m0[idx]);
            if !t2.is_finite() || !adc.is_finite() || !m0.is_finite() {
                return Err(FpsError::InvalidInput("non-finite map value".into()));
            }
            if m0 == 0.0 {
                if t2 != 0.0 || adc != 0.0 {
                    return Err(FpsError::InvalidInput(format!(
                        "background pixel {idx} has nonzero t2/adc"
                    )));
                }
            } else {
                if !(T2_MIN..=T2_MAX).contains(&t2) {
                    return Err(FpsError::InvalidInput(format!("t2 {t2} outside envelope")));
                }
                if !(ADC_MIN..=ADC_MAX).contains(&adc) {
                    return Err(FpsError::InvalidInput(format!("adc {adc} outside envelope")));
                }
                if !(0.0..=M0_MAX).contains(&m0) {
                    return Err(FpsError::InvalidInput(format!("m0 {m0} outside envelope")));
                }
            }
        }
        Ok(())
    }

    /// Bounded regression targets: `[t2/T2_SCALE clipped, adc/ADC_SCALE clipped]`
    /// as a `(2, h, w)` stack.
    pub fn normalized_targets(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.t2.len());
        out.extend(self.t2.iter().map(|v| (v / T2_SCALE).clamp(0.0, T2_NORM_MAX)));
        out.extend(self.adc.iter().map(|v| (v / ADC_SCALE).clamp(0.0, 1.0)));
        out
    }
}

/// One echo of the forward model: decay weights plus an integer phase ramp
/// that writes the echo onto its own k-space carrier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EchoComponent {
    /// Echo time, seconds.
    pub te: f64,
    /// Diffusion weighting, s/mm^2.
    pub b: f64,
    /// Phase-ramp frequencies, cycles per field of view.
    pub ku: i64,
    pub kv: i64,
    pub weight: f64,
}

/// The default 4-echo scheme: two echo-time levels crossed with two diffusion
/// weightings, each on its own carrier.
pub fn default_echoes() -> Vec<EchoComponent> {
    vec![
        EchoComponent { te: 0.025, b: 0.0, ku: 0, kv: 0, weight: 1.0 },
        EchoComponent { te: 0.055, b: 0.0, ku: 16, kv: 0, weight: 1.0 },
        EchoComponent { te: 0.085, b: 1000.0, ku: 0, kv: 16, weight: 1.0 },
        EchoComponent { te: 0.115, b: 1000.0, ku: 16, kv: 16, weight: 1.0 },
    ]
}

/// Controls the synthetic-to-"real" gap: a low-frequency k-space gain, a
/// smooth multiplicative bias field and complex Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainShiftConfig {
    /// Multiplier applied to k-space entries within `lowfreq_radius` of DC.
    pub lowfreq_gain: f64,
    /// Radius as a fraction of Nyquist, in (0, 1].
    pub lowfreq_radius: f64,
    /// Noise std as a fraction of the max magnitude, per real/imag component.
    pub noise_sigma: f64,
    /// Amplitude of the unit-amplitude random low-order cosine mix.
    pub bias_strength: f64,
    pub seed: u64,
}

impl Default for DomainShiftConfig {
    fn default() -> Self {
        DomainShiftConfig {
            lowfreq_gain: 1.5,
            lowfreq_radius: 0.15,
            noise_sigma: 0.03,
            bias_strength: 0.15,
            seed: 0,
        }
    }
}

impl DomainShiftConfig {
    pub fn identity(seed: u64) -> Self {
        DomainShiftConfig {
            lowfreq_gain: 1.0,
            lowfreq_radius: 0.15,
            noise_sigma: 0.0,
            bias_strength: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lowfreq_gain.is_finite()
            && self.lowfreq_gain >= 0.0
            && self.lowfreq_radius.is_finite()
            && self.lowfreq_radius > 0.0
            && self.lowfreq_radius <= 1.0
            && self.noise_sigma.is_finite()
            && self.noise_sigma >= 0.0
            && self.bias_strength.is_finite()
            && self.bias_strength >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(FpsError::InvalidInput(format!("invalid domain shift config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainTag {
    Synthetic,
    Real,
}

impl DomainTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            DomainTag::Synthetic => "synthetic",
            DomainTag::Real => "real",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(DomainTag::Synthetic),
            "real" => Ok(DomainTag::Real),
            other => Err(FpsError::InvalidInput(format!("unknown domain tag {other}"))),
        }
    }
}

/// One (complex input, ground-truth maps) pair.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub id: String,
    pub domain_tag: DomainTag,
    pub input: ComplexImage,
    pub target: ParameterMaps,
}

/// Lesion annotation kept by the generator for ROI-level analysis.
#[derive(Debug, Clone)]
pub struct LesionInfo {
    /// Pixel indices of the lesion blob.
    pub mask: Vec<usize>,
    /// Pixel indices of the left-right mirrored region.
    pub mirror: Vec<usize>,
    /// Binary lesion class: 0 = adc-elevated, 1 = adc-reduced.
    pub class: u8,
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub maps: ParameterMaps,
    pub lesion: Option<LesionInfo>,
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    rot: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = y - self.cy;
        let dx = x - self.cx;
        let (s, c) = self.rot.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

// Tissue bands: (t2 range, adc range, m0 range)
const WM_BAND: ([f64; 2], [f64; 2], [f64; 2]) =
    ([0.07, 0.09], [0.7e-3, 0.8e-3], [0.62, 0.74]);
const GM_BAND: ([f64; 2], [f64; 2], [f64; 2]) =
    ([0.09, 0.11], [0.8e-3, 1.0e-3], [0.76, 0.88]);
const FLUID_BAND: ([f64; 2], [f64; 2], [f64; 2]) =
    ([0.5, 2.0], [2.5e-3, 3.2e-3], [0.95, 1.1]);

fn draw(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    rng.random_range(range[0]..range[1])
}

/// Full generator: head ellipse with tissue bands, optional extra blobs and an
/// optional lesion with a recorded mask, mirror region and binary class.
pub fn generate_phantom(
    seed: u64,
    height: usize,
    width: usize,
    n_shapes: usize,
    lesion_prob: f64,
) -> Result<Phantom> {
    if height < 16 || width < 16 {
        return Err(FpsError::InvalidInput(format!(
            "phantom dimensions must be >= 16, got {height}x{width}"
        )));
    }
    if n_shapes < 1 {
        return Err(FpsError::InvalidInput("n_shapes must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&lesion_prob) {
        return Err(FpsError::InvalidInput(format!(
            "lesion_prob must be in [0, 1], got {lesion_prob}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height as f64, width as f64);
    let head = Ellipse {
        cy: h / 2.0 + rng.random_range(-0.02..0.02) * h,
        cx: w / 2.0 + rng.random_range(-0.02..0.02) * w,
        ry: rng.random_range(0.36..0.42) * h,
        rx: rng.random_range(0.32..0.38) * w,
        rot: 0.0,
    };

    let mut maps = ParameterMaps::zeros(height, width);
    let wm = (draw(&mut rng, WM_BAND.0), draw(&mut rng, WM_BAND.1), draw(&mut rng, WM_BAND.2));
    for y in 0..height {
        for x in 0..width {
            if head.contains(y as f64, x as f64) {
                let idx = y * width + x;
                maps.t2[idx] = wm.0;
                maps.adc[idx] = wm.1;
                maps.m0[idx] = wm.2;
            }
        }
    }

    let paint = |maps: &mut ParameterMaps, region: &Ellipse, vals: (f64, f64, f64), head: &Ellipse| -> Vec<usize> {
        let mut mask = Vec::new();
        for y in 0..height {
            for x in 0..width {
                if head.contains(y as f64, x as f64) && region.contains(y as f64, x as f64) {
                    let idx = y * width + x;
                    maps.t2[idx] = vals.0;
                    maps.adc[idx] = vals.1;
                    maps.m0[idx] = vals.2;
                    mask.push(idx);
                }
            }
        }
        mask
    };

    // shape 2: cortical shell; shape 3: central fluid region; further shapes:
    // random blobs drawn from one of the tissue bands
    if n_shapes >= 2 {
        let gm = (draw(&mut rng, GM_BAND.0), draw(&mut rng, GM_BAND.1), draw(&mut rng, GM_BAND.2));
        let shell = rng.random_range(0.78..0.85);
        for y in 0..height {
            for x in 0..width {
                let inner = Ellipse {
                    ry: head.ry * shell,
                    rx: head.rx * shell,
                    ..Ellipse { cy: head.cy, cx: head.cx, ry: 0.0, rx: 0.0, rot: 0.0 }
                };
                if head.contains(y as f64, x as f64) && !inner.contains(y as f64, x as f64) {
                    let idx = y * width + x;
                    maps.t2[idx] = gm.0;
                    maps.adc[idx] = gm.1;
                    maps.m0[idx] = gm.2;
                }
            }
        }
    }
    if n_shapes >= 3 {
        let fluid = (
            draw(&mut rng, FLUID_BAND.0),
            draw(&mut rng, FLUID_BAND.1),
            draw(&mut rng, FLUID_BAND.2),
        );
        let ventricle = Ellipse {
            cy: head.cy + rng.random_range(-0.05..0.05) * h,
            cx: head.cx + rng.random_range(-0.05..0.05) * w,
            ry: rng.random_range(0.06..0.1) * h,
            rx: rng.random_range(0.1..0.16) * w,
            rot: rng.random_range(0.0..std::f64::consts::PI),
        };
        paint(&mut maps, &ventricle, fluid, &head);
    }
    for _ in 3..n_shapes {
        let band = match rng.random_range(0..3) {
            0 => WM_BAND,
            1 => GM_BAND,
            _ => FLUID_BAND,
        };
        let vals = (draw(&mut rng, band.0), draw(&mut rng, band.1), draw(&mut rng, band.2));
        let blob = Ellipse {
            cy: head.cy + rng.random_range(-0.25..0.25) * h,
            cx: head.cx + rng.random_range(-0.25..0.25) * w,
            ry: rng.random_range(0.03..0.09) * h,
            rx: rng.random_range(0.03..0.09) * w,
            rot: rng.random_range(0.0..std::f64::consts::PI),
        };
        paint(&mut maps, &blob, vals, &head);
    }

    let lesion = if rng.random_range(0.0..1.0) < lesion_prob {
        let class: u8 = if rng.random::<bool>() { 1 } else { 0 };
        // class 1: strongly reduced adc, moderate t2 rise (acute-like);
        // class 0: elevated adc, strong t2 rise
        let base_adc = wm.1;
        let (t2v, adcv) = if class == 1 {
            (
                rng.random_range(0.12..0.2),
                (base_adc * rng.random_range(0.45..0.65)).clamp(ADC_MIN, ADC_MAX),
            )
        } else {
            (
                rng.random_range(0.22..0.4),
                (base_adc * rng.random_range(1.5..2.2)).clamp(ADC_MIN, ADC_MAX),
            )
        };
        // keep the lesion off-center so its mirror lands in plain tissue
        let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let blob = Ellipse {
            cy: head.cy + rng.random_range(-0.12..0.12) * h,
            cx: head.cx + side * rng.random_range(0.12..0.2) * w,
            ry: rng.random_range(0.05..0.09) * h,
            rx: rng.random_range(0.05..0.09) * w,
            rot: rng.random_range(0.0..std::f64::consts::PI),
        };
        let m0v = rng.random_range(0.7..0.9);
        let mask = paint(&mut maps, &blob, (t2v, adcv, m0v), &head);
        let mirror: Vec<usize> = mask
            .iter()
            .map(|&idx| {
                let y = idx / width;
                let x = idx % width;
                let mx = (2.0 * head.cx - x as f64).round();
                let mx = mx.clamp(0.0, (width - 1) as f64) as usize;
                y * width + mx
            })
            .filter(|&idx| maps.m0[idx] > 0.0 && !mask.contains(&idx))
            .collect();
        Some(LesionInfo { mask, mirror, class })
    } else {
        None
    };

    maps.validate()?;
    Ok(Phantom { maps, lesion })
}

/// Generator entry point when only the maps matter.
pub fn generate_parameter_maps(
    seed: u64,
    height: usize,
    width: usize,
    n_shapes: usize,
    lesion_prob: f64,
) -> Result<ParameterMaps> {
    Ok(generate_phantom(seed, height, width, n_shapes, lesion_prob)?.maps)
}

/// Closed-form forward model: a weighted sum of decay-scaled phase-ramped
/// echoes. Echo k contributes
/// `weight * m0 * exp(-te/t2) * exp(-b*adc) * exp(2*pi*i*(ku*x/W + kv*y/H))`.
pub fn forward_signal(maps: &ParameterMaps, echoes: &[EchoComponent]) -> Result<ComplexImage> {
    if echoes.is_empty() {
        return Err(FpsError::Identifiability("no echoes supplied".into()));
    }
    for e in echoes {
        if !(e.te > 0.0) || e.b < 0.0 || !(e.weight > 0.0) {
            return Err(FpsError::InvalidInput(format!("invalid echo component {e:?}")));
        }
    }
    if echoes.len() >= 2 {
        let mut pairs: Vec<(u64, u64)> = echoes
            .iter()
            .map(|e| (e.te.to_bits(), e.b.to_bits()))
            .collect();
        pairs.sort_unstable();
        pairs.dedup();
        if pairs.len() < 2 {
            return Err(FpsError::Identifiability(
                "need >= 2 echoes with distinct (te, b) pairs".into(),
            ));
        }
    }
    maps.validate()?;

    let (height, width) = (maps.height, maps.width);
    let mut img = ComplexImage::zeros(height, width);
    for y in 0..height {
        for x in 0..width {
            let idx = y * width + x;
            let m0 = maps.m0[idx];
            if m0 == 0.0 {
                continue;
            }
            let mut acc = Complex64::default();
            for e in echoes {
                let decay = (-e.te / maps.t2[idx]).exp() * (-e.b * maps.adc[idx]).exp();
                let phase = 2.0
                    * std::f64::consts::PI
                    * (e.ku as f64 * x as f64 / width as f64
                        + e.kv as f64 * y as f64 / height as f64);
                acc += Complex64::from_polar(e.weight * m0 * decay, phase);
            }
            img.set(y, x, acc);
        }
    }
    Ok(img)
}

/// Standard-normal pair via Box-Muller.
fn gauss_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = 2.0 * std::f64::consts::PI * u2;
    (r * theta.cos(), r * theta.sin())
}

/// Applies, in order: a low-frequency k-space gain, a smooth positive
/// multiplicative bias field, and i.i.d. circularly-symmetric complex noise.
/// Each stage that is configured to identity is skipped entirely, so the
/// identity config is an exact no-op.
pub fn apply_domain_shift(img: &ComplexImage, cfg: &DomainShiftConfig) -> Result<ComplexImage> {
    cfg.validate()?;
    let (height, width) = (img.height(), img.width());
    let mut out = img.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    if cfg.lowfreq_gain != 1.0 {
        let mut spec = fft2(&out)?;
        let (cy, cx) = (height / 2, width / 2);
        for i in 0..height {
            for j in 0..width {
                let si = shift_index(i, height) as f64;
                let sj = shift_index(j, width) as f64;
                let di = (si - cy as f64) / (height as f64 / 2.0);
                let dj = (sj - cx as f64) / (width as f64 / 2.0);
                if (di * di + dj * dj).sqrt() <= cfg.lowfreq_radius {
                    let v = spec.get(i, j) * cfg.lowfreq_gain;
                    spec.set(i, j, v);
                }
            }
        }
        out = ifft2(&spec)?;
    }

    if cfg.bias_strength > 0.0 {
        // random low-order cosine mix, normalized to unit amplitude
        let mut terms = Vec::new();
        for m in 0..=2i64 {
            for n in 0..=2i64 {
                if m == 0 && n == 0 {
                    continue;
                }
                let amp: f64 = rng.random_range(-1.0..1.0);
                let phase: f64 = rng.random_range(0.0..2.0 * std::f64::consts::PI);
                terms.push((m, n, amp, phase));
            }
        }
        let mut field = vec![0.0; height * width];
        let mut peak = 0.0f64;
        for y in 0..height {
            for x in 0..width {
                let mut v = 0.0;
                for &(m, n, amp, phase) in &terms {
                    v += amp
                        * (2.0
                            * std::f64::consts::PI
                            * (m as f64 * x as f64 / width as f64
                                + n as f64 * y as f64 / height as f64)
                            + phase)
                            .cos();
                }
                field[y * width + x] = v;
                peak = peak.max(v.abs());
            }
        }
        if peak > 0.0 {
            for (idx, v) in field.iter().enumerate() {
                let gain = 1.0 + cfg.bias_strength * v / peak;
                let c = Complex64::new(out.re()[idx], out.im()[idx]) * gain;
                out.set(idx / width, idx % width, c);
            }
        }
    }

    if cfg.noise_sigma > 0.0 {
        let sigma = cfg.noise_sigma * out.max_modulus();
        for idx in 0..height * width {
            let (zr, zi) = gauss_pair(&mut rng);
            let c = Complex64::new(out.re()[idx] + sigma * zr, out.im()[idx] + sigma * zi);
            out.set(idx / width, idx % width, c);
        }
    }

    Ok(out)
}

fn input_array(img: &ComplexImage) -> FpsdArray {
    let mut values = Vec::with_capacity(2 * img.re().len());
    values.extend_from_slice(img.re());
    values.extend_from_slice(img.im());
    FpsdArray::f64(vec![2, img.height(), img.width()], values)
}

fn target_array(maps: &ParameterMaps) -> FpsdArray {
    let mut values = Vec::with_capacity(3 * maps.t2.len());
    values.extend_from_slice(&maps.t2);
    values.extend_from_slice(&maps.adc);
    values.extend_from_slice(&maps.m0);
    FpsdArray::f64(vec![3, maps.height, maps.width], values)
}

fn input_from_array(arr: &FpsdArray) -> Result<ComplexImage> {
    if arr.dims.len() != 3 || arr.dims[0] != 2 {
        return Err(FpsError::shape("[2, h, w]", format!("{:?}", arr.dims)));
    }
    let (h, w) = (arr.dims[1], arr.dims[2]);
    let n = h * w;
    ComplexImage::from_planes(h, w, arr.values[..n].to_vec(), arr.values[n..].to_vec())
}

fn target_from_array(arr: &FpsdArray) -> Result<ParameterMaps> {
    if arr.dims.len() != 3 || arr.dims[0] != 3 {
        return Err(FpsError::shape("[3, h, w]", format!("{:?}", arr.dims)));
    }
    let (h, w) = (arr.dims[1], arr.dims[2]);
    let n = h * w;
    Ok(ParameterMaps {
        height: h,
        width: w,
        t2: arr.values[..n].to_vec(),
        adc: arr.values[n..2 * n].to_vec(),
        m0: arr.values[2 * n..].to_vec(),
    })
}

/// Writes a dataset directory: `manifest.tsv` plus one input and one target
/// FPSD array per sample. Returns the number of pairs written.
pub fn write_dataset(pairs: &[SamplePair], path: &Path) -> Result<usize> {
    fs::create_dir_all(path)?;
    let mut manifest = String::from("id\tdomain\tinput\ttarget\n");
    for pair in pairs {
        let input_name = format!("{}.input.fpsd", pair.id);
        let target_name = format!("{}.target.fpsd", pair.id);
        fpsd::write_array(&path.join(&input_name), &input_array(&pair.input))?;
        fpsd::write_array(&path.join(&target_name), &target_array(&pair.target))?;
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            pair.id,
            pair.domain_tag.as_str(),
            input_name,
            target_name
        ));
    }
    fs::write(path.join("manifest.tsv"), manifest)?;
    Ok(pairs.len())
}

/// Reads a dataset directory written by [`write_dataset`].
pub fn read_dataset(path: &Path) -> Result<Vec<SamplePair>> {
    let manifest = fs::read_to_string(path.join("manifest.tsv"))?;
    let mut pairs = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        if lineno == 0 {
            if line != "id\tdomain\tinput\ttarget" {
                return Err(FpsError::Format {
                    offset: 0,
                    message: format!("bad manifest header: {line}"),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(FpsError::Format {
                offset: 0,
                message: format!("manifest line {} has {} fields", lineno + 1, fields.len()),
            });
        }
        let input = input_from_array(&fpsd::read_array(&path.join(fields[2]))?)?;
        let target = target_from_array(&fpsd::read_array(&path.join(fields[3]))?)?;
        pairs.push(SamplePair {
            id: fields[0].to_string(),
            domain_tag: DomainTag::parse(fields[1])?,
            input,
            target,
        });
    }
    Ok(pairs)
}
