//! Simulated 4f correlator: SLM1 amplitude encoding, lens Fourier
//! transform, SLM2 point-wise kernel mask, inverse transform and camera
//! readout.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::field::{ComplexGrid, FrequencyField, SpatialField};
use crate::fourier::{centered_frequency, dft2_centered, idft2_centered};
use crate::rng::RngStream;

/// Camera noise level of the realistic preset. Frozen output of
/// `analysis::calibrate_noise_sigma` for the edge-detection study
/// (target mean SSIM 0.8, 100 MNIST test images, seed 0).
pub const REALISTIC_NOISE_SIGMA: f64 = 0.11;

/// ADC full scale of the realistic preset (signed readout spans ±this).
pub const REALISTIC_SATURATION: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlmConfig {
    pub bit_depth: u32,
    pub quantize: bool,
    pub value_range: (f64, f64),
}

impl Default for SlmConfig {
    fn default() -> Self {
        Self { bit_depth: 8, quantize: true, value_range: (0.0, 1.0) }
    }
}

impl SlmConfig {
    pub fn transparent() -> Self {
        Self { quantize: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=16).contains(&self.bit_depth) {
            return Err(Error::Config(format!("SLM bit_depth must be in [1, 16], got {}", self.bit_depth)));
        }
        let (lo, hi) = self.value_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!("SLM value_range must satisfy min < max, got ({lo}, {hi})")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Signed real part of the field.
    IdealReal,
    Magnitude,
    Intensity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub readout: Readout,
    pub noise_sigma: f64,
    /// ADC resolution; 0 disables quantization.
    pub bit_depth: u32,
    pub exposure_ms: f64,
    /// Full-scale value. `None` means the sensor never clips, which is
    /// only valid with the ADC disabled.
    pub saturation: Option<f64>,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            readout: Readout::IdealReal,
            noise_sigma: REALISTIC_NOISE_SIGMA,
            bit_depth: 8,
            exposure_ms: 20.0,
            saturation: Some(REALISTIC_SATURATION),
        }
    }
}

impl CameraConfig {
    pub fn transparent() -> Self {
        Self { noise_sigma: 0.0, bit_depth: 0, saturation: None, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if self.bit_depth > 16 {
            return Err(Error::Config(format!("camera bit_depth must be <= 16, got {}", self.bit_depth)));
        }
        if self.readout == Readout::IdealReal && self.bit_depth == 1 {
            return Err(Error::Config("signed readout needs at least 2 ADC bits".into()));
        }
        if !(self.exposure_ms.is_finite() && self.exposure_ms >= 0.0) {
            return Err(Error::Config(format!("exposure_ms must be >= 0, got {}", self.exposure_ms)));
        }
        match self.saturation {
            Some(s) if !(s.is_finite() && s > 0.0) => {
                Err(Error::Config(format!("saturation must be > 0, got {s}")))
            }
            None if self.bit_depth > 0 => Err(Error::Config("ADC quantization requires a finite saturation".into())),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceConfig {
    pub slm1: SlmConfig,
    pub slm2: SlmConfig,
    pub camera: CameraConfig,
    /// Sub-pixel shift `(dx, dy)` of the Fourier-plane mask, in pixels.
    pub misalignment: (f64, f64),
    pub slm_setup_ms: f64,
    pub per_kernel_passes: bool,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self::realistic()
    }
}

impl DeviceConfig {
    /// 8-bit SLMs, signed camera readout with an 8-bit ADC and calibrated
    /// read noise.
    pub fn realistic() -> Self {
        Self {
            slm1: SlmConfig::default(),
            slm2: SlmConfig::default(),
            camera: CameraConfig::default(),
            misalignment: (0.0, 0.0),
            slm_setup_ms: 25.0,
            per_kernel_passes: true,
        }
    }

    /// Reproduces the mathematical circular convolution exactly.
    pub fn transparent() -> Self {
        Self {
            slm1: SlmConfig::transparent(),
            slm2: SlmConfig::transparent(),
            camera: CameraConfig::transparent(),
            ..Self::realistic()
        }
    }

    pub fn with_noise_sigma(mut self, sigma: f64) -> Self {
        self.camera.noise_sigma = sigma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.slm1.validate()?;
        self.slm2.validate()?;
        self.camera.validate()?;
        let (dx, dy) = self.misalignment;
        if !(dx.abs() <= 2.0 && dy.abs() <= 2.0) {
            return Err(Error::Config(format!("misalignment must satisfy |dx|,|dy| <= 2, got ({dx}, {dy})")));
        }
        if !(self.slm_setup_ms.is_finite() && self.slm_setup_ms >= 0.0) {
            return Err(Error::Config(format!("slm_setup_ms must be >= 0, got {}", self.slm_setup_ms)));
        }
        Ok(())
    }
}

/// Rounds `v` to the nearest of `levels` uniformly spaced values over
/// `[lo, hi]` after clamping. Ties go toward +∞.
fn quantize_value(v: f64, lo: f64, hi: f64, levels: u64) -> f64 {
    let steps = (levels - 1) as f64;
    let clamped = v.clamp(lo, hi);
    let idx = ((clamped - lo) * steps / (hi - lo) + 0.5).floor().clamp(0.0, steps);
    lo + idx * (hi - lo) / steps
}

pub fn quantize(values: &[f64], cfg: &SlmConfig) -> Vec<f64> {
    if !cfg.quantize {
        return values.to_vec();
    }
    let (lo, hi) = cfg.value_range;
    let levels = 1u64 << cfg.bit_depth;
    values.iter().map(|&v| quantize_value(v, lo, hi, levels)).collect()
}

/// Amplitude-encodes an image on SLM1. Pixels must lie in [0, 1].
pub fn encode_input(image: &SpatialField, cfg: &SlmConfig) -> Result<SpatialField> {
    if let Some((i, v)) = image.values().iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Range(format!("pixel {i} = {v} outside [0, 1]")));
    }
    SpatialField::new(image.n(), quantize(image.values(), cfg))
}

/// SLM2 mask quantization: real and imaginary parts independently, each
/// over its own observed range.
fn quantize_spectrum(kernel_freq: &FrequencyField, cfg: &SlmConfig) -> Vec<Complex64> {
    let values = kernel_freq.values();
    if !cfg.quantize {
        return values.to_vec();
    }
    let component = |part: fn(&Complex64) -> f64| -> Vec<f64> {
        let raw: Vec<f64> = values.iter().map(part).collect();
        let (lo, hi) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if lo < hi {
            quantize(&raw, &SlmConfig { value_range: (lo, hi), ..cfg.clone() })
        } else {
            raw
        }
    };
    let re = component(|c| c.re);
    let im = component(|c| c.im);
    re.into_iter().zip(im).map(|(r, i)| Complex64::new(r, i)).collect()
}

pub fn apply_kernel(freq: &FrequencyField, kernel_freq: &FrequencyField, cfg: &SlmConfig) -> Result<FrequencyField> {
    if freq.n() != kernel_freq.n() {
        return Err(shape_err(format!("spectrum {} vs kernel {}", freq.n(), kernel_freq.n())));
    }
    let mask = quantize_spectrum(kernel_freq, cfg);
    let values = freq.values().iter().zip(&mask).map(|(a, b)| a * b).collect();
    FrequencyField::new(freq.n(), values)
}

fn adc(v: f64, cfg: &CameraConfig) -> f64 {
    let Some(sat) = cfg.saturation else { return v };
    match cfg.readout {
        Readout::IdealReal => {
            let clamped = v.clamp(-sat, sat);
            if cfg.bit_depth == 0 {
                return clamped;
            }
            // Symmetric mid-tread: 2^(b-1) - 1 codes each side of zero.
            let half = ((1u64 << (cfg.bit_depth - 1)) - 1) as f64;
            let step = sat / half;
            (clamped / step + 0.5).floor().clamp(-half, half) * step
        }
        Readout::Magnitude | Readout::Intensity => {
            let clamped = v.clamp(0.0, sat);
            if cfg.bit_depth == 0 {
                return clamped;
            }
            quantize_value(clamped, 0.0, sat, 1u64 << cfg.bit_depth)
        }
    }
}

/// Camera readout: detector map, additive Gaussian read noise, clipping
/// and ADC. No random draws are made when `noise_sigma == 0`.
pub fn capture(field: &ComplexGrid, cfg: &CameraConfig, rng: &mut RngStream) -> Result<SpatialField> {
    let values = field
        .values()
        .iter()
        .map(|v| {
            let mut x = match cfg.readout {
                Readout::IdealReal => v.re,
                Readout::Magnitude => v.norm(),
                Readout::Intensity => v.norm_sqr(),
            };
            if cfg.noise_sigma > 0.0 {
                x += rng.gaussian(cfg.noise_sigma);
            }
            adc(x, cfg)
        })
        .collect();
    SpatialField::new(field.n(), values)
}

/// Spectrum of the encoded input as it arrives at SLM2, including the
/// misalignment phase ramp.
pub fn input_spectrum(image: &SpatialField, cfg: &DeviceConfig) -> Result<FrequencyField> {
    let encoded = encode_input(image, &cfg.slm1)?;
    let mut freq = dft2_centered(&encoded)?;
    let (dx, dy) = cfg.misalignment;
    if dx != 0.0 || dy != 0.0 {
        let n = freq.n;
        for r in 0..n {
            let fv = centered_frequency(r, n);
            for c in 0..n {
                let fu = centered_frequency(c, n);
                let phase = -2.0 * std::f64::consts::PI * (dx * fu + dy * fv) / n as f64;
                freq.values[r * n + c] *= Complex64::from_polar(1.0, phase);
            }
        }
    }
    Ok(freq)
}

/// Device pass for one kernel given the prepared input spectrum.
pub fn device_pass(
    input_freq: &FrequencyField,
    kernel_freq: &FrequencyField,
    cfg: &DeviceConfig,
    rng: &mut RngStream,
) -> Result<SpatialField> {
    let masked = apply_kernel(input_freq, kernel_freq, &cfg.slm2)?;
    let mut out = idft2_centered(&masked)?;
    // Unitary transforms carry a factor n through the convolution theorem.
    let gain = out.n as f64;
    for v in out.values.iter_mut() {
        *v *= gain;
    }
    capture(&out, &cfg.camera, rng)
}

/// Full correlator pipeline for one kernel given in the spatial domain.
pub fn optical_convolve(
    image: &SpatialField,
    kernel_spatial: &SpatialField,
    cfg: &DeviceConfig,
    rng: &mut RngStream,
) -> Result<SpatialField> {
    image.ensure_same_shape(kernel_spatial)?;
    let input = input_spectrum(image, cfg)?;
    device_pass(&input, &dft2_centered(kernel_spatial)?, cfg, rng)
}

/// Direct-sum circular convolution,
/// `out(x, y) = Σ_{a,b} image(a, b) · kernel((x−a) mod n, (y−b) mod n)`.
pub fn reference_convolve(image: &SpatialField, kernel: &SpatialField) -> Result<SpatialField> {
    image.ensure_same_shape(kernel)?;
    let n = image.n();
    SpatialField::from_fn(n, |x, y| {
        let mut acc = 0.0;
        for a in 0..n {
            for b in 0..n {
                acc += image.get(a, b) * kernel.get((x + n - a) % n, (y + n - b) % n);
            }
        }
        acc
    })
}

/// Named spatial kernels used by the fidelity study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelPreset {
    /// 3×3 Laplacian `[[0,1,0],[1,-4,1],[0,1,0]]` centred on the origin.
    EdgeDetect,
    /// 5×5 Gaussian (σ = 1), unit sum, centred on the origin.
    Gaussian,
    Random,
}

impl KernelPreset {
    pub fn build(self, n: usize, rng: &mut RngStream) -> Result<SpatialField> {
        let wrap = |d: isize| ((d + n as isize) % n as isize) as usize;
        match self {
            KernelPreset::EdgeDetect => {
                let mut k = vec![0.0; n * n];
                k[0] = -4.0;
                for (dr, dc) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                    k[wrap(dr) * n + wrap(dc)] += 1.0;
                }
                SpatialField::new(n, k)
            }
            KernelPreset::Gaussian => {
                let mut k = vec![0.0; n * n];
                let mut total = 0.0;
                for dr in -2isize..=2 {
                    for dc in -2isize..=2 {
                        let w = (-((dr * dr + dc * dc) as f64) / 2.0).exp();
                        k[wrap(dr) * n + wrap(dc)] += w;
                        total += w;
                    }
                }
                k.iter_mut().for_each(|v| *v /= total);
                SpatialField::new(n, k)
            }
            KernelPreset::Random => {
                let bound = 1.0 / n as f64;
                SpatialField::from_fn(n, |_, _| rng.uniform(-bound, bound))
            }
        }
    }
}
