//! Unitary, DC-centred 2-D discrete Fourier transforms.
//!
//! Both directions scale by `1/n` per axis so energy is preserved. Spectra
//! are stored with the zero-frequency bin at `(n/2, n/2)`, mirroring the
//! Fourier plane of the correlator. Because the transform is unitary, the
//! convolution theorem picks up a gain of `n`:
//! `conv(a, b) = n * idft(dft(a) ⊙ dft(b))`.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::field::{ComplexGrid, FrequencyField, SpatialField};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plans(n: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(n), p.plan_fft_inverse(n))
    })
}

/// In-place 2-D transform of a row-major n×n buffer, scaled by 1/n.
fn transform2(data: &mut [Complex64], n: usize, inverse: bool) {
    let (fwd, inv) = plans(n);
    let fft = if inverse { inv } else { fwd };
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    fft.process_with_scratch(data, &mut scratch);
    transpose(data, n);
    fft.process_with_scratch(data, &mut scratch);
    transpose(data, n);
    let scale = 1.0 / n as f64;
    for v in data.iter_mut() {
        *v *= scale;
    }
}

fn transpose(data: &mut [Complex64], n: usize) {
    for r in 0..n {
        for c in r + 1..n {
            data.swap(r * n + c, c * n + r);
        }
    }
}

/// Swaps quadrants so index 0 moves to n/2. Self-inverse for even n.
fn shift_quadrants(data: &mut [Complex64], n: usize) {
    let h = n / 2;
    for r in 0..h {
        for c in 0..n {
            let c2 = (c + h) % n;
            data.swap(r * n + c, (r + h) * n + c2);
        }
    }
}

/// Signed frequency of centred index `k` (DC at n/2).
pub fn centered_frequency(k: usize, n: usize) -> f64 {
    k as f64 - (n / 2) as f64
}

pub fn dft2_centered(field: &SpatialField) -> Result<FrequencyField> {
    let n = field.n();
    let mut data: Vec<Complex64> = field.values().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    if data.iter().any(|v| !v.re.is_finite()) {
        return Err(Error::InvalidField("non-finite input to dft2_centered".into()));
    }
    transform2(&mut data, n, false);
    shift_quadrants(&mut data, n);
    FrequencyField::new(n, data)
}

/// Centred forward transform of a complex spatial grid.
pub fn dft2_centered_complex(grid: &ComplexGrid) -> Result<FrequencyField> {
    if !grid.is_finite() {
        return Err(Error::InvalidField("non-finite input to dft2_centered".into()));
    }
    let n = grid.n();
    let mut data = grid.values().to_vec();
    transform2(&mut data, n, false);
    shift_quadrants(&mut data, n);
    FrequencyField::new(n, data)
}

pub fn idft2_centered(freq: &FrequencyField) -> Result<ComplexGrid> {
    if !freq.is_finite() {
        return Err(Error::InvalidField("non-finite input to idft2_centered".into()));
    }
    let n = freq.n();
    let mut data = freq.values().to_vec();
    shift_quadrants(&mut data, n);
    transform2(&mut data, n, true);
    ComplexGrid::new(n, data)
}

/// Circular convolution via the transform pair, real part only.
pub(crate) fn fft_convolve_spectra(image_freq: &FrequencyField, kernel_freq: &FrequencyField) -> Result<SpatialField> {
    let product = pointwise(image_freq, kernel_freq, false)?;
    let grid = idft2_centered(&product)?;
    let gain = image_freq.n() as f64;
    SpatialField::new(grid.n(), grid.values().iter().map(|v| v.re * gain).collect())
}

/// Circular cross-correlation `out[j] = Σ_x signal[x] · reference[x − j]`.
pub fn circular_cross_correlation(reference: &SpatialField, signal: &SpatialField) -> Result<SpatialField> {
    reference.ensure_same_shape(signal)?;
    let rf = dft2_centered(reference)?;
    let sf = dft2_centered(signal)?;
    let product = pointwise(&rf, &sf, true)?;
    let grid = idft2_centered(&product)?;
    let gain = reference.n() as f64;
    SpatialField::new(grid.n(), grid.values().iter().map(|v| v.re * gain).collect())
}

/// Element-wise product `a ⊙ b`, or `conj(a) ⊙ b` when `conjugate_left`.
pub(crate) fn pointwise(a: &FrequencyField, b: &FrequencyField, conjugate_left: bool) -> Result<FrequencyField> {
    if a.n() != b.n() {
        return Err(Error::Shape(format!("spectra {}x{} vs {}x{}", a.n(), a.n(), b.n(), b.n())));
    }
    let values = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| if conjugate_left { x.conj() * y } else { x * y })
        .collect();
    FrequencyField::new(a.n(), values)
}
