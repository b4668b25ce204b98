//! Single Fourier-convolution-layer CNN: K full-size circular kernels,
//! ReLU, max-pool, fully connected softmax classifier.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::field::{read_block, write_matrix, FrequencyField, SpatialField, FIELD_MAGIC};
use crate::fourier::{dft2_centered, fft_convolve_spectra};
use crate::optics::{device_pass, encode_input, input_spectrum, reference_convolve, DeviceConfig};
use crate::rng::RngStream;
use crate::trainers::UpdateSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    SoftmaxCrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub kernels: usize,
    pub pool: usize,
    pub classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub activation: Activation,
    pub loss: LossKind,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            kernels: 8,
            pool: 2,
            classes: 10,
            epochs: 30,
            batch_size: 1,
            activation: Activation::Relu,
            loss: LossKind::SoftmaxCrossEntropy,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.pool == 0 || !n.is_multiple_of(self.pool) {
            return Err(Error::Config(format!("pool {} must divide n = {n}", self.pool)));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn feature_len(&self, n: usize) -> usize {
        self.kernels * (n / self.pool) * (n / self.pool)
    }
}

/// Learnable state. `fc_weights` is row-major `features × classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub kernels: Vec<SpatialField>,
    pub fc_weights: Vec<f64>,
    pub fc_bias: Vec<f64>,
    n: usize,
    classes: usize,
}

impl ModelParams {
    pub fn new(
        n: usize,
        classes: usize,
        kernels: Vec<SpatialField>,
        fc_weights: Vec<f64>,
        fc_bias: Vec<f64>,
    ) -> Result<Self> {
        let p = Self { kernels, fc_weights, fc_bias, n, classes };
        p.validate()?;
        Ok(p)
    }

    /// Kernels uniform(±1/n), FC weights uniform(±1/√fan_in), zero bias.
    pub fn init(hp: &Hyperparams, n: usize, rng: &mut RngStream) -> Result<Self> {
        hp.validate(n)?;
        let kb = 1.0 / n as f64;
        let kernels = (0..hp.kernels)
            .map(|_| SpatialField::from_fn(n, |_, _| rng.uniform(-kb, kb)))
            .collect::<Result<Vec<_>>>()?;
        let fan_in = hp.feature_len(n);
        let fb = 1.0 / (fan_in.max(1) as f64).sqrt();
        let fc_weights = (0..fan_in * hp.classes).map(|_| rng.uniform(-fb, fb)).collect();
        Self::new(n, hp.classes, kernels, fc_weights, vec![0.0; hp.classes])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn num_kernels(&self) -> usize {
        self.kernels.len()
    }

    pub fn feature_len(&self) -> usize {
        self.fc_weights.len() / self.classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.fc_bias.len() != self.classes || !self.fc_weights.len().is_multiple_of(self.classes) {
            return Err(shape_err("fc bias/weights inconsistent with class count"));
        }
        if let Some(k) = self.kernels.iter().find(|k| k.n() != self.n) {
            return Err(shape_err(format!("kernel is {}x{}, expected {}", k.n(), k.n(), self.n)));
        }
        if self.fc_weights.iter().chain(&self.fc_bias).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite classifier weight".into()));
        }
        for k in &self.kernels {
            k.ensure_finite()?;
        }
        Ok(())
    }

    /// Binary blocks (kernels, FC matrix, bias row) followed by a JSON
    /// manifest running to end of input.
    pub fn to_checkpoint(&self, manifest: &CheckpointManifest) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        for k in &self.kernels {
            k.write_to(&mut buf)?;
        }
        write_matrix(&mut buf, self.feature_len(), self.classes, &self.fc_weights)?;
        write_matrix(&mut buf, 1, self.classes, &self.fc_bias)?;
        serde_json::to_writer(&mut buf, manifest)?;
        Ok(buf)
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<(Self, CheckpointManifest)> {
        let mut cursor = bytes;
        let mut blocks = Vec::new();
        while cursor.len() >= 4 && cursor[..4] == FIELD_MAGIC {
            match read_block(&mut cursor)? {
                Some(b) => blocks.push(b),
                None => break,
            }
        }
        let manifest: CheckpointManifest = serde_json::from_slice(cursor)?;
        if blocks.len() != manifest.kernels + 2 {
            return Err(Error::Format(format!(
                "checkpoint has {} blocks, manifest expects {}",
                blocks.len(),
                manifest.kernels + 2
            )));
        }
        let (_, _, bias) = blocks.pop().unwrap().into_matrix()?;
        let (_, cols, fc) = blocks.pop().unwrap().into_matrix()?;
        let kernels = blocks.into_iter().map(|b| b.into_spatial()).collect::<Result<Vec<_>>>()?;
        if cols != manifest.classes {
            return Err(Error::Format("classifier width disagrees with manifest".into()));
        }
        let params = Self::new(manifest.n, manifest.classes, kernels, fc, bias)?;
        Ok((params, manifest))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kernels: usize,
    pub n: usize,
    pub classes: usize,
    pub seed: u64,
    pub epoch: usize,
}

/// Kernels plus their centred spectra, as loaded onto SLM2.
#[derive(Debug, Clone)]
pub struct KernelBank {
    pub spatial: Vec<SpatialField>,
    pub spectra: Vec<FrequencyField>,
}

/// Refresh after every parameter update, before the next device call.
pub fn kernel_to_frequency(params: &ModelParams) -> Result<KernelBank> {
    let spectra = params.kernels.iter().map(dft2_centered).collect::<Result<Vec<_>>>()?;
    Ok(KernelBank { spatial: params.kernels.clone(), spectra })
}

pub fn software_fft_convolve(image: &SpatialField, kernel: &SpatialField) -> Result<SpatialField> {
    image.ensure_same_shape(kernel)?;
    fft_convolve_spectra(&dft2_centered(image)?, &dft2_centered(kernel)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Device,
    Software,
    Oracle,
}

/// Where the convolution layer executes.
#[derive(Debug, Clone, PartialEq)]
pub enum ConvBackend {
    Device(DeviceConfig),
    Software,
    /// Direct O(n⁴) sum; for tests only.
    Oracle,
}

impl ConvBackend {
    pub fn from_kind(kind: BackendKind, device: &DeviceConfig) -> Self {
        match kind {
            BackendKind::Device => ConvBackend::Device(device.clone()),
            BackendKind::Software => ConvBackend::Software,
            BackendKind::Oracle => ConvBackend::Oracle,
        }
    }

    pub fn kind(&self) -> BackendKind {
        match self {
            ConvBackend::Device(_) => BackendKind::Device,
            ConvBackend::Software => BackendKind::Software,
            ConvBackend::Oracle => BackendKind::Oracle,
        }
    }

    /// True when repeated calls on the same inputs give identical outputs.
    pub fn is_noiseless(&self) -> bool {
        match self {
            ConvBackend::Device(cfg) => cfg.camera.noise_sigma == 0.0,
            _ => true,
        }
    }

    /// Input as seen by the convolution (SLM1 encoding on the device).
    pub fn encoded_input(&self, image: &SpatialField) -> Result<SpatialField> {
        match self {
            ConvBackend::Device(cfg) => encode_input(image, &cfg.slm1),
            _ => Ok(image.clone()),
        }
    }

    pub fn convolve(&self, image: &SpatialField, kernel: &SpatialField, rng: &mut RngStream) -> Result<SpatialField> {
        match self {
            ConvBackend::Device(cfg) => crate::optics::optical_convolve(image, kernel, cfg, rng),
            ConvBackend::Software => software_fft_convolve(image, kernel),
            ConvBackend::Oracle => reference_convolve(image, kernel),
        }
    }

    /// Per-image work shared by every kernel (SLM1 encoding and the lens
    /// transform on the device).
    pub fn prepare(&self, image: &SpatialField) -> Result<PreparedInput> {
        Ok(match self {
            ConvBackend::Device(cfg) => PreparedInput::Spectrum(input_spectrum(image, cfg)?),
            ConvBackend::Software => PreparedInput::Spectrum(dft2_centered(image)?),
            ConvBackend::Oracle => PreparedInput::Spatial(image.clone()),
        })
    }

    /// One kernel through the backend.
    pub fn convolve_prepared(
        &self,
        input: &PreparedInput,
        bank: &KernelBank,
        k: usize,
        rng: &mut RngStream,
    ) -> Result<SpatialField> {
        match (self, input) {
            (ConvBackend::Device(cfg), PreparedInput::Spectrum(f)) => device_pass(f, &bank.spectra[k], cfg, rng),
            (ConvBackend::Software, PreparedInput::Spectrum(f)) => fft_convolve_spectra(f, &bank.spectra[k]),
            (ConvBackend::Oracle, PreparedInput::Spatial(x)) => reference_convolve(x, &bank.spatial[k]),
            _ => Err(Error::Config("prepared input does not belong to this backend".into())),
        }
    }

    /// Convolves one image with every kernel in the bank, in bank order.
    pub fn convolve_bank(&self, image: &SpatialField, bank: &KernelBank, rng: &mut RngStream) -> Result<Vec<SpatialField>> {
        if let Some(k) = bank.spatial.first() {
            image.ensure_same_shape(k)?;
        }
        let input = self.prepare(image)?;
        (0..bank.spectra.len()).map(|k| self.convolve_prepared(&input, bank, k, rng)).collect()
    }
}

#[derive(Debug, Clone)]
pub enum PreparedInput {
    Spectrum(FrequencyField),
    Spatial(SpatialField),
}

/// Parameters together with the spectra currently loaded on the device.
#[derive(Debug, Clone)]
pub struct Network {
    pub hp: Hyperparams,
    params: ModelParams,
    bank: KernelBank,
}

impl Network {
    pub fn new(hp: Hyperparams, params: ModelParams) -> Result<Self> {
        hp.validate(params.n())?;
        if hp.feature_len(params.n()) != params.feature_len() || hp.classes != params.classes() {
            return Err(shape_err("hyperparameters disagree with parameter shapes"));
        }
        let bank = kernel_to_frequency(&params)?;
        Ok(Self { hp, params, bank })
    }

    pub fn init(hp: Hyperparams, n: usize, rng: &mut RngStream) -> Result<Self> {
        let params = ModelParams::init(&hp, n, rng)?;
        Self::new(hp, params)
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn bank(&self) -> &KernelBank {
        &self.bank
    }

    pub fn n(&self) -> usize {
        self.params.n()
    }

    pub fn forward(&self, image: &SpatialField, backend: &ConvBackend, rng: &mut RngStream) -> Result<ForwardTrace> {
        forward(&self.params, &self.bank, image, backend, &self.hp, rng)
    }

    /// Adam step followed by a refresh of the kernel spectra.
    pub fn apply(&mut self, state: &mut AdamState, updates: &UpdateSet) -> Result<()> {
        adam_step(&mut self.params, state, updates, &self.hp)?;
        self.bank = kernel_to_frequency(&self.params)?;
        Ok(())
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Captured convolution outputs z_hw, one per kernel.
    pub conv_out: Vec<SpatialField>,
    /// Activations h = ReLU(z_hw).
    pub act: Vec<SpatialField>,
    /// Pooled features, flattened in (kernel, row, col) order.
    pub pooled: Vec<f64>,
    /// For each pooled value, the flat n×n index of its maximum.
    pub pool_argmax: Vec<usize>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

pub(crate) struct Features {
    pub act: Vec<SpatialField>,
    pub pooled: Vec<f64>,
    pub pool_argmax: Vec<usize>,
}

/// ReLU then max-pool. Ties keep the first maximum in row-major order.
pub(crate) fn activate_and_pool(conv_out: &[SpatialField], pool: usize) -> Result<Features> {
    let mut act = Vec::with_capacity(conv_out.len());
    let mut pooled = Vec::new();
    let mut pool_argmax = Vec::new();
    for z in conv_out {
        let n = z.n();
        let h = SpatialField::new(n, z.values().iter().map(|&v| v.max(0.0)).collect())?;
        let m = n / pool;
        for pr in 0..m {
            for pc in 0..m {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for r in pr * pool..(pr + 1) * pool {
                    for c in pc * pool..(pc + 1) * pool {
                        let v = h.get(r, c);
                        if v > best {
                            best = v;
                            best_idx = r * n + c;
                        }
                    }
                }
                pooled.push(best);
                pool_argmax.push(best_idx);
            }
        }
        act.push(h);
    }
    Ok(Features { act, pooled, pool_argmax })
}

pub(crate) fn classifier(params: &ModelParams, pooled: &[f64]) -> Vec<f64> {
    let c = params.classes;
    let mut logits = params.fc_bias.clone();
    for (d, &p) in pooled.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let row = &params.fc_weights[d * c..(d + 1) * c];
        for (l, w) in logits.iter_mut().zip(row) {
            *l += w * p;
        }
    }
    logits
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn forward(
    params: &ModelParams,
    bank: &KernelBank,
    image: &SpatialField,
    backend: &ConvBackend,
    hp: &Hyperparams,
    rng: &mut RngStream,
) -> Result<ForwardTrace> {
    if image.n() != params.n() {
        return Err(shape_err(format!("image {} vs model {}", image.n(), params.n())));
    }
    if bank.spectra.len() != params.num_kernels() {
        return Err(shape_err("kernel bank out of sync with parameters"));
    }
    let m = params.n() / hp.pool;
    if hp.pool == 0 || !params.n().is_multiple_of(hp.pool) || params.num_kernels() * m * m != params.feature_len() {
        return Err(shape_err("pooling geometry does not match classifier width"));
    }
    let conv_out = backend.convolve_bank(image, bank, rng)?;
    let Features { act, pooled, pool_argmax } = activate_and_pool(&conv_out, hp.pool)?;
    let logits = classifier(params, &pooled);
    let probs = softmax(&logits);
    Ok(ForwardTrace { conv_out, act, pooled, pool_argmax, logits, probs })
}

/// Cross-entropy loss and output error `e = probs − onehot(label)`.
pub fn loss_and_error(trace: &ForwardTrace, label: usize) -> Result<(f64, Vec<f64>)> {
    let c = trace.probs.len();
    if label >= c {
        return Err(Error::Domain(format!("label {label} not in [0, {c})")));
    }
    let max = trace.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + trace.logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let loss = lse - trace.logits[label];
    let mut e = trace.probs.clone();
    e[label] -= 1.0;
    Ok((loss, e))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn zeros(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len] }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, bc1: f64, bc2: f64) {
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// Adam (β1 = 0.9, β2 = 0.999, ε = 1e-8) over every parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    kernels: Vec<Moments>,
    fc: Moments,
    bias: Moments,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            kernels: params.kernels.iter().map(|k| Moments::zeros(k.values().len())).collect(),
            fc: Moments::zeros(params.fc_weights.len()),
            bias: Moments::zeros(params.fc_bias.len()),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

pub fn adam_step(params: &mut ModelParams, state: &mut AdamState, updates: &UpdateSet, hp: &Hyperparams) -> Result<()> {
    updates.check_shapes(params)?;
    if state.kernels.len() != params.num_kernels() || state.fc.m.len() != params.fc_weights.len() {
        return Err(shape_err("optimizer state does not match parameters"));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let lr = hp.learning_rate;
    for ((k, g), mom) in params.kernels.iter_mut().zip(&updates.d_kernels).zip(&mut state.kernels) {
        mom.step(k.values_mut(), g, lr, bc1, bc2);
    }
    state.fc.step(&mut params.fc_weights, &updates.d_fc, lr, bc1, bc2);
    state.bias.step(&mut params.fc_bias, &updates.d_bias, lr, bc1, bc2);
    params.validate()
}
