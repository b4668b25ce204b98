//! Hardware-in-the-loop training of a simulated 4f optical correlator.
//!
//! The correlator ([`optics`]) computes circular convolutions through a
//! Fourier-plane mask, with SLM quantization, camera noise and ADC
//! effects. A one-layer Fourier CNN ([`model`]) runs its convolution on
//! that device, and [`trainers`] updates it either by backpropagation
//! through a software model or by the forward-only PEPITA rule.

pub mod analysis;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod field;
pub mod fourier;
pub mod model;
pub mod optics;
pub mod rng;
pub mod trainers;

pub use analysis::{aggregate_runs, ssim, throughput, LatencyModel, RunSummary, SsimConfig};
pub use dataset::{DatasetSplit, LabeledImage};
pub use error::{Error, Result};
pub use field::{ComplexGrid, FrequencyField, SpatialField};
pub use fourier::{dft2_centered, idft2_centered};
pub use model::{ConvBackend, ForwardTrace, Hyperparams, ModelParams, Network};
pub use optics::{optical_convolve, reference_convolve, CameraConfig, DeviceConfig, Readout, SlmConfig};
pub use rng::RngStream;
pub use trainers::{AlgoConfig, Algorithm, FlopLedger, ProjectionF, Trainer, UpdateSet};
