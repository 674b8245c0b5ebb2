//! Hyperspectral cubes and spectral preprocessing.
//!
//! A [`HsiCube`] stores reflectance as `f32` in pixel-interleaved order
//! (`[H, W, B]`, bands innermost). Everything here is a pure function of its
//! inputs; randomized operations take explicit seeds.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::LabelMask;
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<f32>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::InvalidCube(format!(
                "dimensions {height}x{width}x{bands} must be positive"
            )));
        }
        if data.len() != height * width * bands {
            return Err(Error::InvalidCube(format!(
                "{height}x{width}x{bands} cube given {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidCube("non-finite reflectance".into()));
        }
        Ok(Self {
            height,
            width,
            bands,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.bands)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn band_count(&self) -> usize {
        self.bands
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, band: usize) -> f32 {
        self.data[(y * self.width + x) * self.bands + band]
    }

    pub fn spectrum(&self, y: usize, x: usize) -> &[f32] {
        let start = (y * self.width + x) * self.bands;
        &self.data[start..start + self.bands]
    }

    pub fn band(&self, band: usize) -> Vec<f32> {
        self.data.iter().skip(band).step_by(self.bands).copied().collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            vec![self.height, self.width, self.bands],
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("shape")
    }

    /// Appends `extra` zero bands, used to feed a derivative cube through an
    /// encoder sized for the magnitude cube.
    pub fn zero_padded(&self, extra: usize) -> HsiCube {
        let nb = self.bands + extra;
        let mut data = Vec::with_capacity(self.height * self.width * nb);
        for px in self.data.chunks(self.bands) {
            data.extend_from_slice(px);
            data.extend(std::iter::repeat_n(0.0, extra));
        }
        HsiCube { bands: nb, data, ..*self }
    }

    /// Band-wise concatenation of two cubes of equal spatial size.
    pub fn concat_bands(&self, other: &HsiCube) -> Result<HsiCube> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::SpatialMismatch(
                (self.height, self.width),
                (other.height, other.width),
            ));
        }
        let nb = self.bands + other.bands;
        let mut data = Vec::with_capacity(self.height * self.width * nb);
        for (a, b) in self.data.chunks(self.bands).zip(other.data.chunks(other.bands)) {
            data.extend_from_slice(a);
            data.extend_from_slice(b);
        }
        Ok(HsiCube { bands: nb, data, ..*self })
    }
}

/// Order and band step of a spectral finite difference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivativeSpec {
    pub order: usize,
    pub step: usize,
}

impl Default for DerivativeSpec {
    fn default() -> Self {
        Self { order: 1, step: 1 }
    }
}

impl DerivativeSpec {
    pub fn new(order: usize, step: usize) -> Result<Self> {
        let spec = Self { order, step };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.order) {
            return Err(Error::InvalidParameter(format!(
                "derivative order {} not in {{1, 2}}",
                self.order
            )));
        }
        if self.step == 0 {
            return Err(Error::InvalidParameter("derivative step must be positive".into()));
        }
        Ok(())
    }

    /// Bands consumed by the difference stencil.
    pub fn band_loss(&self) -> usize {
        self.order * self.step
    }

    pub fn output_bands(&self, bands: usize) -> Result<usize> {
        self.validate()?;
        if self.band_loss() >= bands {
            return Err(Error::InsufficientBands {
                order: self.order,
                step: self.step,
                bands,
            });
        }
        Ok(bands - self.band_loss())
    }
}

fn first_difference(data: &[f32], bands: usize, step: usize) -> Vec<f32> {
    let out_bands = bands - step;
    let denom = step as f32;
    let mut out = Vec::with_capacity(data.len() / bands * out_bands);
    for px in data.chunks(bands) {
        out.extend((0..out_bands).map(|b| (px[b + step] - px[b]) / denom));
    }
    out
}

/// Spectral finite difference along the band axis.
///
/// Order 1 gives `(I[b + step] - I[b]) / step`; order 2 applies the same
/// first difference to its own output, leaving `B - order * step` bands.
pub fn derivative(cube: &HsiCube, spec: DerivativeSpec) -> Result<HsiCube> {
    let out_bands = spec.output_bands(cube.bands)?;
    let mut data = first_difference(&cube.data, cube.bands, spec.step);
    let mut bands = cube.bands - spec.step;
    for _ in 1..spec.order {
        data = first_difference(&data, bands, spec.step);
        bands -= spec.step;
    }
    debug_assert_eq!(bands, out_bands);
    Ok(HsiCube {
        bands,
        data,
        ..*cube
    })
}

/// Per-band z-score with population standard deviation. Constant bands map
/// to zero.
pub fn normalize_bands(cube: &HsiCube) -> HsiCube {
    let b = cube.bands;
    let n = (cube.height * cube.width) as f64;
    let mut mean = vec![0.0f64; b];
    for px in cube.data.chunks(b) {
        for (m, &v) in mean.iter_mut().zip(px) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0f64; b];
    for px in cube.data.chunks(b) {
        for ((s, &v), m) in var.iter_mut().zip(px).zip(&mean) {
            *s += (v as f64 - m).powi(2);
        }
    }
    let std: Vec<f64> = var.iter().map(|s| (s / n).sqrt()).collect();
    let data = cube
        .data
        .chunks(b)
        .flat_map(|px| {
            px.iter().zip(&mean).zip(&std).map(|((&v, m), s)| {
                if *s > 0.0 {
                    ((v as f64 - m) / s) as f32
                } else {
                    0.0
                }
            })
        })
        .collect();
    HsiCube { data, ..*cube }
}

impl HsiCube {
    fn band_ranges(&self) -> Vec<(f32, f32)> {
        let mut ranges = vec![(f32::INFINITY, f32::NEG_INFINITY); self.bands];
        for px in self.data.chunks(self.bands) {
            for (r, &v) in ranges.iter_mut().zip(px) {
                r.0 = r.0.min(v);
                r.1 = r.1.max(v);
            }
        }
        ranges
    }
}

/// Mixed sensor degradation. Gaussian sigma and stripe amplitude are
/// fractions of each band's dynamic range (max - min).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub gaussian_sigma: f64,
    pub salt_pepper_rate: f64,
    pub stripe_amplitude: f64,
    pub stripe_fraction: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            gaussian_sigma: 0.05,
            salt_pepper_rate: 0.01,
            stripe_amplitude: 0.1,
            stripe_fraction: 0.05,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            gaussian_sigma: 0.0,
            salt_pepper_rate: 0.0,
            stripe_amplitude: 0.0,
            stripe_fraction: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.gaussian_sigma >= 0.0 && self.stripe_amplitude >= 0.0)
            || !unit(self.salt_pepper_rate)
            || !unit(self.stripe_fraction)
        {
            return Err(Error::InvalidParameter(format!("noise spec out of range: {self:?}")));
        }
        Ok(())
    }
}

/// Adds Gaussian noise, column stripes, then salt-and-pepper noise.
///
/// Salt-and-pepper replaces elements with the band minimum or maximum of the
/// input cube. A zeroed spec returns the input unchanged.
pub fn degrade(cube: &HsiCube, noise: &NoiseSpec) -> Result<HsiCube> {
    noise.validate()?;
    let mut rng = seeded(noise.seed, 0xde9);
    let ranges = cube.band_ranges();
    let b = cube.bands;
    let mut data = cube.data.clone();

    if noise.gaussian_sigma > 0.0 {
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        for px in data.chunks_mut(b) {
            for (v, (lo, hi)) in px.iter_mut().zip(&ranges) {
                let z: f64 = std_normal.sample(&mut rng);
                *v += (z * noise.gaussian_sigma * (hi - lo) as f64) as f32;
            }
        }
    }

    if noise.stripe_amplitude > 0.0 && noise.stripe_fraction > 0.0 {
        let w = cube.width;
        let count = (noise.stripe_fraction * w as f64).round() as usize;
        let mut cols: Vec<usize> = (0..w).collect();
        cols.shuffle(&mut rng);
        for &col in &cols[..count.min(w)] {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            for y in 0..cube.height {
                let px = &mut data[(y * w + col) * b..][..b];
                for (v, (lo, hi)) in px.iter_mut().zip(&ranges) {
                    *v += (sign * noise.stripe_amplitude * (hi - lo) as f64) as f32;
                }
            }
        }
    }

    if noise.salt_pepper_rate > 0.0 {
        for px in data.chunks_mut(b) {
            for (v, (lo, hi)) in px.iter_mut().zip(&ranges) {
                if rng.random::<f64>() < noise.salt_pepper_rate {
                    *v = if rng.random::<bool>() { *hi } else { *lo };
                }
            }
        }
    }

    HsiCube::new(cube.height, cube.width, b, data)
}

/// Parameters of a synthetic scene whose confusable class pairs share their
/// mean spectrum but differ in band-to-band oscillation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSceneSpec {
    pub class_count: u16,
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    /// One-based class labels; each class may appear in at most one pair.
    pub confusable_pairs: Vec<(u16, u16)>,
    pub magnitude_noise_sigma: f64,
    pub seed: u64,
    /// Side length of the square class regions.
    pub block: usize,
    /// Amplitude of the per-pixel spectral oscillation.
    pub oscillation: f64,
    /// Std of the per-pixel brightness offset shared by all bands.
    pub brightness_sigma: f64,
}

impl Default for SynthSceneSpec {
    fn default() -> Self {
        Self {
            class_count: 4,
            bands: 16,
            height: 32,
            width: 32,
            confusable_pairs: vec![(1, 2)],
            magnitude_noise_sigma: 0.01,
            seed: 0,
            block: 4,
            oscillation: 0.03,
            brightness_sigma: 0.05,
        }
    }
}

impl SynthSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 || self.class_count > 255 {
            return Err(Error::InvalidParameter(format!(
                "class_count {} not in 2..=255",
                self.class_count
            )));
        }
        if self.bands < 4 {
            return Err(Error::InvalidParameter("scene needs at least 4 bands".into()));
        }
        if self.height == 0 || self.width == 0 || self.block == 0 {
            return Err(Error::InvalidParameter("scene dimensions must be positive".into()));
        }
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.magnitude_noise_sigma)
            || !finite_nonneg(self.oscillation)
            || !finite_nonneg(self.brightness_sigma)
        {
            return Err(Error::InvalidParameter("noise levels must be finite and >= 0".into()));
        }
        let mut seen = vec![false; self.class_count as usize + 1];
        for &(a, b) in &self.confusable_pairs {
            for c in [a, b] {
                if c == 0 || c > self.class_count {
                    return Err(Error::InvalidParameter(format!("pair class {c} out of range")));
                }
                if seen[c as usize] {
                    return Err(Error::InvalidParameter(format!(
                        "class {c} appears in more than one pair position"
                    )));
                }
                seen[c as usize] = true;
            }
            if a == b {
                return Err(Error::InvalidParameter(format!("pair ({a}, {b}) is degenerate")));
            }
        }
        Ok(())
    }
}

/// Oscillation shape `k` at band `b`, unit RMS. Shape 0 alternates every
/// band; shape 1 is a period-8 sinusoid.
fn oscillation_shape(kind: usize, b: usize) -> f64 {
    match kind {
        0 => {
            if b % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        }
        _ => {
            std::f64::consts::SQRT_2
                * (2.0 * std::f64::consts::PI * b as f64 / 8.0 + std::f64::consts::PI / 8.0).sin()
        }
    }
}

/// Generates a blockwise labeled scene.
///
/// Square regions of side `block` are assigned classes round-robin in a
/// shuffled order, so every class is present and classes are near-balanced.
/// Each pixel is `base(class) + brightness + oscillation * sign * shape(class)
/// + noise`. Members of a confusable pair share `base` but use different
/// oscillation shapes. Within each class, pixels are paired and the second
/// pixel of a pair receives the negated sign, brightness and noise of the
/// first, so per-class mean spectra equal `base` exactly.
pub fn synth_scene(spec: &SynthSceneSpec) -> Result<(HsiCube, LabelMask)> {
    spec.validate()?;
    let (h, w, b) = (spec.height, spec.width, spec.bands);
    let rows = h.div_ceil(spec.block);
    let cols = w.div_ceil(spec.block);
    let c = spec.class_count as usize;
    if rows * cols < c {
        return Err(Error::InfeasibleSpec(format!(
            "{rows}x{cols} regions of side {} cannot hold {c} classes",
            spec.block
        )));
    }
    let mut rng = seeded(spec.seed, 0x5c3e);

    let mut order: Vec<usize> = (0..rows * cols).collect();
    order.shuffle(&mut rng);
    let mut region_class = vec![0u16; rows * cols];
    for (k, &r) in order.iter().enumerate() {
        region_class[r] = (k % c) as u16 + 1;
    }
    let labels: Vec<u16> = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            region_class[(y / spec.block) * cols + x / spec.block]
        })
        .collect();

    // Base spectra: a level, a linear tilt and one slow bump per group.
    let mut group_of: Vec<usize> = (0..=c).collect();
    let mut shape_of = vec![0usize; c + 1];
    for &(a, bb) in &spec.confusable_pairs {
        group_of[bb as usize] = a as usize;
        shape_of[bb as usize] = 1;
    }
    let bases: Vec<Vec<f64>> = (0..=c)
        .map(|_| {
            let level = rng.random_range(0.15..0.6);
            let tilt = rng.random_range(-0.15..0.15);
            let bump = rng.random_range(0.0..0.08);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (0..b)
                .map(|band| {
                    let t = band as f64 / (b - 1) as f64;
                    level + tilt * (t - 0.5) + bump * (std::f64::consts::PI * t + phase).sin()
                })
                .collect()
        })
        .collect();

    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = vec![0f32; h * w * b];
    for class in 1..=c {
        let base = &bases[group_of[class]];
        let shape: Vec<f64> = (0..b).map(|band| oscillation_shape(shape_of[class], band)).collect();
        let mut pixels: Vec<usize> = (0..h * w).filter(|&i| labels[i] as usize == class).collect();
        pixels.shuffle(&mut rng);
        for pair in pixels.chunks(2) {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let brightness = spec.brightness_sigma * noise.sample(&mut rng);
            let eps: Vec<f64> = (0..b)
                .map(|_| spec.magnitude_noise_sigma * noise.sample(&mut rng))
                .collect();
            // An unpaired last pixel carries only the base spectrum.
            let polarity: &[f64] = if pair.len() == 2 { &[1.0, -1.0] } else { &[0.0] };
            for (&p, &pol) in pair.iter().zip(polarity) {
                let px = &mut data[p * b..(p + 1) * b];
                for band in 0..b {
                    let dev = brightness + spec.oscillation * sign * shape[band] + eps[band];
                    px[band] = (base[band] + pol * dev) as f32;
                }
            }
        }
    }

    let cube = HsiCube::new(h, w, b, data)?;
    let mask = LabelMask::new(h, w, spec.class_count, labels)?;
    Ok((cube, mask))
}
