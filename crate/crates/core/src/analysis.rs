//! Device-fidelity (SSIM), multi-seed aggregation and latency modelling.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::field::SpatialField;
use crate::model::software_fft_convolve;
use crate::optics::{optical_convolve, DeviceConfig};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimConfig {
    /// Side of the square uniform window; odd, ≥ 3.
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    /// `None` uses max − min of the reference image.
    pub dynamic_range: Option<f64>,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { window: 7, k1: 0.01, k2: 0.03, dynamic_range: None }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::Config(format!("SSIM window must be odd and >= 3, got {}", self.window)));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0) {
            return Err(Error::Config("SSIM constants k1, k2 must be positive".into()));
        }
        Ok(())
    }
}

/// Mean SSIM over every full `window × window` placement. `a` is the
/// reference.
pub fn ssim(a: &SpatialField, b: &SpatialField, cfg: &SsimConfig) -> Result<f64> {
    a.ensure_same_shape(b)?;
    ssim_grid(a.values(), b.values(), a.n(), cfg)
}

/// [`ssim`] on raw square row-major grids of any side.
pub fn ssim_grid(a: &[f64], b: &[f64], side: usize, cfg: &SsimConfig) -> Result<f64> {
    cfg.validate()?;
    if a.len() != side * side || b.len() != side * side {
        return Err(shape_err(format!("grids must both hold {side}x{side} values")));
    }
    if side < cfg.window {
        return Err(shape_err(format!("image side {side} smaller than window {}", cfg.window)));
    }
    let range = cfg.dynamic_range.unwrap_or_else(|| {
        let (lo, hi) = a.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        hi - lo
    });
    let c1 = (cfg.k1 * range).powi(2);
    let c2 = (cfg.k2 * range).powi(2);
    let w = cfg.window;
    let count = (w * w) as f64;
    let places = side - w + 1;
    let mut total = 0.0;
    for r0 in 0..places {
        for c0 in 0..places {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in r0..r0 + w {
                for c in c0..c0 + w {
                    let (x, y) = (a[r * side + c], b[r * side + c]);
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let (ma, mb) = (sa / count, sb / count);
            let va = saa / count - ma * ma;
            let vb = sbb / count - mb * mb;
            let cov = sab / count - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            // 0/0 only occurs for identical flat windows with zero range.
            total += if den == 0.0 { 1.0 } else { num / den };
        }
    }
    Ok(total / (places * places) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample (n − 1) standard deviation; 0 for a single run.
    pub std: f64,
}

pub fn aggregate_runs(accuracies: &[f64]) -> Result<RunSummary> {
    if accuracies.is_empty() {
        return Err(Error::Config("no runs to aggregate".into()));
    }
    let n = accuracies.len() as f64;
    // Sorted summation keeps the result independent of input order.
    let mut sorted = accuracies.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / n;
    let std = if accuracies.len() > 1 {
        (sorted.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(RunSummary { accuracies: accuracies.to_vec(), mean, std })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyModel {
    pub slm_setup_ms: f64,
    pub exposure_ms: f64,
    pub os_overhead_ms: f64,
    /// Sequential device invocations per image (1 when all kernels share
    /// a frame).
    pub kernels_per_image: u32,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self { slm_setup_ms: 25.0, exposure_ms: 20.0, os_overhead_ms: 0.0, kernels_per_image: 1 }
    }
}

/// Images per second.
pub fn throughput(model: &LatencyModel) -> Result<f64> {
    let parts = [model.slm_setup_ms, model.exposure_ms, model.os_overhead_ms];
    if parts.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Domain("latencies must be finite and >= 0".into()));
    }
    let per_frame: f64 = parts.iter().sum();
    if per_frame <= 0.0 || model.kernels_per_image == 0 {
        return Err(Error::Domain("total latency per image must be positive".into()));
    }
    Ok(1000.0 / (model.kernels_per_image as f64 * per_frame))
}

/// Per-image SSIM between software and device convolution of each image
/// with `kernel`. Noise for image i is drawn from `seed`'s stream in order.
pub fn device_fidelity(
    images: &[SpatialField],
    kernel: &SpatialField,
    device: &DeviceConfig,
    ssim_cfg: &SsimConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = RngStream::new(seed);
    images
        .iter()
        .map(|img| {
            let reference = software_fft_convolve(img, kernel)?;
            let measured = optical_convolve(img, kernel, device, &mut rng)?;
            ssim(&reference, &measured, ssim_cfg)
        })
        .collect()
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

/// Bisects the camera noise level until the mean software-vs-device SSIM
/// hits `target` (within `tol`). Everything except `noise_sigma` is taken
/// from `base`.
pub fn calibrate_noise_sigma(
    images: &[SpatialField],
    kernel: &SpatialField,
    base: &DeviceConfig,
    ssim_cfg: &SsimConfig,
    target: f64,
    seed: u64,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Config("calibration needs at least one image".into()));
    }
    if !(0.0 < target && target < 1.0) {
        return Err(Error::Domain(format!("target SSIM must lie in (0, 1), got {target}")));
    }
    let score = |sigma: f64| -> Result<f64> {
        Ok(mean(&device_fidelity(images, kernel, &base.clone().with_noise_sigma(sigma), ssim_cfg, seed)?))
    };
    if score(0.0)? < target {
        return Err(Error::Domain("target SSIM unreachable even without noise".into()));
    }
    let (mut lo, mut hi) = (0.0, 0.05);
    while score(hi)? > target {
        lo = hi;
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::Domain("noise sweep diverged".into()));
        }
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if score(mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-5 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}
