//! Hardware-in-the-loop update rules.
//!
//! * `bp_update` backpropagates through a differentiable software model of
//!   the convolution, using the activations the device produced.
//! * `pepita_update` runs a second, input-modulated forward pass through
//!   the same backend and builds the update from the two activations.
//! * `mempepita_update` is the same rule with the standard pass recomputed
//!   kernel by kernel instead of retained.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::LabeledImage;
use crate::error::{shape_err, Error, Result};
use crate::field::{write_matrix, SpatialField};
use crate::fourier::circular_cross_correlation;
use crate::model::{activate_and_pool, argmax, loss_and_error, AdamState, ConvBackend, ForwardTrace, Hyperparams, ModelParams, Network};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    Bp,
    Pepita,
    Mempepita,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Bp => "bp",
            Algorithm::Pepita => "pepita",
            Algorithm::Mempepita => "mempepita",
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bp" => Ok(Algorithm::Bp),
            "pepita" => Ok(Algorithm::Pepita),
            "mempepita" => Ok(Algorithm::Mempepita),
            other => Err(Error::Config(format!("unknown algorithm {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PepitaConvRule {
    /// ΔW_k = (h_k − h_mod,k) ⊙ x_mod, O(n²) per kernel.
    #[default]
    Pointwise,
    /// ΔW_k = x_mod ⋆ (h_k − h_mod,k) via transforms, O(n² log n).
    Correlation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModulationSign {
    #[default]
    Minus,
    Plus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlgoConfig {
    pub algorithm: Algorithm,
    pub pepita_conv_rule: PepitaConvRule,
    pub f_scale: f64,
    pub modulation_sign: ModulationSign,
}

impl Default for AlgoConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Bp,
            pepita_conv_rule: PepitaConvRule::Pointwise,
            f_scale: 0.05,
            modulation_sign: ModulationSign::Minus,
        }
    }
}

impl AlgoConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        Self { algorithm, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f_scale.is_finite() && self.f_scale >= 0.0) {
            return Err(Error::Config(format!("f_scale must be >= 0, got {}", self.f_scale)));
        }
        Ok(())
    }
}

/// Fixed error projection F, row-major `n² × classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionF {
    n: usize,
    classes: usize,
    scale: f64,
    data: Vec<f64>,
}

impl ProjectionF {
    pub fn from_data(n: usize, classes: usize, scale: f64, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n * classes {
            return Err(shape_err(format!("projection needs {} entries, got {}", n * n * classes, data.len())));
        }
        Ok(Self { n, classes, scale, data })
    }

    pub fn zeros(n: usize, classes: usize) -> Self {
        Self { n, classes, scale: 0.0, data: vec![0.0; n * n * classes] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// `F · e`, one value per input pixel.
    pub fn project(&self, e: &[f64]) -> Result<Vec<f64>> {
        if e.len() != self.classes {
            return Err(shape_err(format!("error has {} classes, projection expects {}", e.len(), self.classes)));
        }
        Ok(self
            .data
            .chunks_exact(self.classes)
            .map(|row| row.iter().zip(e).map(|(f, e)| f * e).sum())
            .collect())
    }

    /// SHA-256 over the little-endian entries.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Entries i.i.d. uniform(±f_scale/n).
pub fn init_projection(n: usize, classes: usize, f_scale: f64, rng: &mut RngStream) -> Result<ProjectionF> {
    if n == 0 || classes == 0 {
        return Err(Error::Config("projection dimensions must be positive".into()));
    }
    let bound = f_scale / n as f64;
    let data = if bound > 0.0 {
        (0..n * n * classes).map(|_| rng.uniform(-bound, bound)).collect()
    } else {
        vec![0.0; n * n * classes]
    };
    ProjectionF::from_data(n, classes, f_scale, data)
}

/// Parameter updates (gradient-like; applied as W ← W − η·Adam(ΔW)).
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateSet {
    pub d_kernels: Vec<Vec<f64>>,
    pub d_fc: Vec<f64>,
    pub d_bias: Vec<f64>,
}

impl UpdateSet {
    pub fn zeros(params: &ModelParams) -> Self {
        Self {
            d_kernels: params.kernels.iter().map(|k| vec![0.0; k.values().len()]).collect(),
            d_fc: vec![0.0; params.fc_weights.len()],
            d_bias: vec![0.0; params.fc_bias.len()],
        }
    }

    pub fn check_shapes(&self, params: &ModelParams) -> Result<()> {
        let kernels_ok = self.d_kernels.len() == params.kernels.len()
            && self.d_kernels.iter().zip(&params.kernels).all(|(d, k)| d.len() == k.values().len());
        if !kernels_ok || self.d_fc.len() != params.fc_weights.len() || self.d_bias.len() != params.fc_bias.len() {
            return Err(shape_err("update set does not match parameter shapes"));
        }
        if self.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite parameter update".into()));
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.d_kernels.iter().flatten().chain(&self.d_fc).chain(&self.d_bias)
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|&v| v == 0.0)
    }

    pub fn max_abs_diff(&self, other: &UpdateSet) -> f64 {
        self.iter().zip(other.iter()).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    fn accumulate(&mut self, other: &UpdateSet) {
        for (a, b) in self.d_kernels.iter_mut().flatten().zip(other.d_kernels.iter().flatten()) {
            *a += b;
        }
        for (a, b) in self.d_fc.iter_mut().zip(&other.d_fc) {
            *a += b;
        }
        for (a, b) in self.d_bias.iter_mut().zip(&other.d_bias) {
            *a += b;
        }
    }

    fn scale(&mut self, s: f64) {
        self.d_kernels.iter_mut().flatten().chain(&mut self.d_fc).chain(&mut self.d_bias).for_each(|v| *v *= s);
    }

    /// Debug dump: one spatial block per kernel, then FC and bias matrices.
    pub fn write_to<W: std::io::Write>(&self, w: &mut W, n: usize) -> Result<()> {
        for d in &self.d_kernels {
            SpatialField::new(n, d.clone())?.write_to(w)?;
        }
        let classes = self.d_bias.len();
        write_matrix(w, self.d_fc.len() / classes.max(1), classes, &self.d_fc)?;
        write_matrix(w, 1, classes, &self.d_bias)
    }
}

/// Analytic counters; one element-wise operation = 1 flop, 2-D FFT =
/// 5·n²·log2(n).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopLedger {
    pub forward_flops: u64,
    pub update_flops: u64,
    pub fft_flops: u64,
    pub pointwise_flops: u64,
    pub passes: u64,
    /// Bytes of activations alive at once during an update (max over run).
    pub peak_activation_memory: u64,
}

impl FlopLedger {
    fn record_update(&mut self, cost: &UpdateCost) {
        self.update_flops += cost.fft + cost.pointwise;
        self.fft_flops += cost.fft;
        self.pointwise_flops += cost.pointwise;
        self.passes += cost.passes;
        self.peak_activation_memory = self.peak_activation_memory.max(cost.peak_bytes);
    }
}

pub fn fft2_flops(n: usize) -> u64 {
    if n < 2 {
        return 0;
    }
    (5.0 * (n * n) as f64 * (n as f64).log2()).round() as u64
}

struct UpdateCost {
    fft: u64,
    pointwise: u64,
    passes: u64,
    peak_bytes: u64,
}

fn update_cost(algo: &AlgoConfig, n: usize, kernels: usize, classes: usize) -> UpdateCost {
    let (n2, k, c) = (n as u64 * n as u64, kernels as u64, classes as u64);
    let m2 = (n as u64 / 2).pow(2);
    let features = k * m2;
    // FC outer product + weight apply, bias subtract + apply.
    let fc = 2 * (features * c + c);
    let f = fft2_flops(n);
    const WORD: u64 = 8;
    match (algo.algorithm, algo.pepita_conv_rule) {
        (Algorithm::Bp, _) => UpdateCost {
            // Per kernel: FFT(x), FFT(δz), IFFT, product, weight apply.
            fft: k * 3 * f,
            pointwise: k * 2 * n2 + fc,
            passes: 1,
            // x, z, h, pooled, one δ map
            peak_bytes: WORD * (2 * n2 + 2 * k * n2 + k * m2),
        },
        (alg, rule) => {
            let (fft, per_kernel) = match rule {
                // difference, product, weight apply
                PepitaConvRule::Pointwise => (0, 3 * n2),
                PepitaConvRule::Correlation => (3 * f, 3 * n2),
            };
            let (passes, peak) = if alg == Algorithm::Mempepita {
                // x, x_mod, h_mod, pooled_mod, one recomputed h_k
                (3, WORD * (3 * n2 + k * n2 + k * m2))
            } else {
                // x, x_mod, h, h_mod, pooled, pooled_mod
                (2, WORD * (2 * n2 + 2 * k * n2 + 2 * k * m2))
            };
            UpdateCost { fft: k * fft, pointwise: k * per_kernel + fc, passes, peak_bytes: peak }
        }
    }
}

/// Closed-form per-update counts, excluding the backpropagated error term
/// dL/dz_hw for BP.
pub fn count_flops(algo: &AlgoConfig, n: usize, kernels: usize, classes: usize) -> Result<FlopLedger> {
    if n < 2 || !(n.is_power_of_two() || n == 28) {
        return Err(Error::Domain(format!("n must be a power of two or 28, got {n}")));
    }
    let mut ledger = FlopLedger::default();
    ledger.record_update(&update_cost(algo, n, kernels, classes));
    Ok(ledger)
}

/// Digital flops of one forward pass (classifier, plus the convolution
/// when it runs in software).
fn forward_cost(backend: &ConvBackend, n: usize, kernels: usize, features: usize, classes: usize) -> u64 {
    let (n2, k) = ((n * n) as u64, kernels as u64);
    let conv = match backend {
        ConvBackend::Device(_) => 0,
        ConvBackend::Software => (k + 1) * fft2_flops(n) + 6 * k * n2,
        ConvBackend::Oracle => 2 * k * n2 * n2,
    };
    conv + 2 * (features * classes) as u64
}

pub fn modulated_input(image: &SpatialField, e: &[f64], projection: &ProjectionF, sign: ModulationSign) -> Result<SpatialField> {
    if projection.n() != image.n() {
        return Err(shape_err(format!("projection n={} vs image n={}", projection.n(), image.n())));
    }
    let fe = projection.project(e)?;
    let values = image
        .values()
        .iter()
        .zip(&fe)
        .map(|(&x, &p)| match sign {
            ModulationSign::Minus => (x - p).clamp(0.0, 1.0),
            ModulationSign::Plus => (x + p).clamp(0.0, 1.0),
        })
        .collect();
    SpatialField::new(image.n(), values)
}

fn check_trace(net: &Network, trace: &ForwardTrace, e: &[f64]) -> Result<()> {
    let p = net.params();
    if trace.act.len() != p.num_kernels() || trace.pooled.len() != p.feature_len() {
        return Err(shape_err("trace does not match the network"));
    }
    if e.len() != p.classes() {
        return Err(shape_err(format!("error has {} entries, expected {}", e.len(), p.classes())));
    }
    Ok(())
}

fn fc_updates(e: &[f64], features: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d_fc = features.iter().flat_map(|&p| e.iter().map(move |&ec| p * ec)).collect();
    (d_fc, e.to_vec())
}

fn pepita_conv_delta(
    h: &SpatialField,
    h_mod: &SpatialField,
    x_mod: &SpatialField,
    rule: PepitaConvRule,
) -> Result<Vec<f64>> {
    let diff: Vec<f64> = h.values().iter().zip(h_mod.values()).map(|(a, b)| a - b).collect();
    match rule {
        PepitaConvRule::Pointwise => Ok(diff.iter().zip(x_mod.values()).map(|(d, x)| d * x).collect()),
        PepitaConvRule::Correlation => {
            let diff = SpatialField::new(h.n(), diff)?;
            Ok(circular_cross_correlation(x_mod, &diff)?.into_values())
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn pepita_impl(
    net: &Network,
    image: &SpatialField,
    trace: &ForwardTrace,
    e: &[f64],
    projection: &ProjectionF,
    backend: &ConvBackend,
    cfg: &AlgoConfig,
    rng: &mut RngStream,
    ledger: &mut FlopLedger,
    recompute: bool,
) -> Result<UpdateSet> {
    check_trace(net, trace, e)?;
    let p = net.params();
    let x_mod = modulated_input(image, e, projection, cfg.modulation_sign)?;
    let mod_trace = net.forward(&x_mod, backend, rng)?;

    let d_kernels = if recompute {
        // Re-run the standard pass one kernel at a time.
        let input = backend.prepare(image)?;
        (0..p.num_kernels())
            .map(|k| {
                let z = backend.convolve_prepared(&input, net.bank(), k, rng)?;
                let h = activate_and_pool(std::slice::from_ref(&z), net.hp.pool)?.act.remove(0);
                pepita_conv_delta(&h, &mod_trace.act[k], &x_mod, cfg.pepita_conv_rule)
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        trace
            .act
            .iter()
            .zip(&mod_trace.act)
            .map(|(h, hm)| pepita_conv_delta(h, hm, &x_mod, cfg.pepita_conv_rule))
            .collect::<Result<Vec<_>>>()?
    };
    let (d_fc, d_bias) = fc_updates(e, &mod_trace.pooled);

    let forward = forward_cost(backend, p.n(), p.num_kernels(), p.feature_len(), p.classes());
    ledger.forward_flops += if recompute { 2 * forward } else { forward };
    let mut algo = cfg.clone();
    algo.algorithm = if recompute { Algorithm::Mempepita } else { Algorithm::Pepita };
    ledger.record_update(&update_cost(&algo, p.n(), p.num_kernels(), p.classes()));
    Ok(UpdateSet { d_kernels, d_fc, d_bias })
}

/// Two-pass forward-only update. `trace` must come from the standard
/// forward pass on the same image and parameters.
#[allow(clippy::too_many_arguments)]
pub fn pepita_update(
    net: &Network,
    image: &SpatialField,
    trace: &ForwardTrace,
    e: &[f64],
    projection: &ProjectionF,
    backend: &ConvBackend,
    cfg: &AlgoConfig,
    rng: &mut RngStream,
    ledger: &mut FlopLedger,
) -> Result<UpdateSet> {
    pepita_impl(net, image, trace, e, projection, backend, cfg, rng, ledger, false)
}

/// Same rule as [`pepita_update`], recomputing the standard activations
/// with a third pass. Only `e` is taken from `trace`.
#[allow(clippy::too_many_arguments)]
pub fn mempepita_update(
    net: &Network,
    image: &SpatialField,
    trace: &ForwardTrace,
    e: &[f64],
    projection: &ProjectionF,
    backend: &ConvBackend,
    cfg: &AlgoConfig,
    rng: &mut RngStream,
    ledger: &mut FlopLedger,
) -> Result<UpdateSet> {
    pepita_impl(net, image, trace, e, projection, backend, cfg, rng, ledger, true)
}

/// Backpropagation with the device trace and a software gradient of the
/// convolution: ΔW_k = x ⋆ δz_k.
pub fn bp_update(
    net: &Network,
    image: &SpatialField,
    trace: &ForwardTrace,
    e: &[f64],
    backend: &ConvBackend,
    ledger: &mut FlopLedger,
) -> Result<UpdateSet> {
    check_trace(net, trace, e)?;
    let p = net.params();
    let (n, c) = (p.n(), p.classes());
    let (d_fc, d_bias) = fc_updates(e, &trace.pooled);

    let d_pooled: Vec<f64> = p
        .fc_weights
        .chunks_exact(c)
        .map(|row| row.iter().zip(e).map(|(w, e)| w * e).sum())
        .collect();
    let x = backend.encoded_input(image)?;
    let per_kernel = d_pooled.len() / p.num_kernels().max(1);
    let d_kernels = trace
        .conv_out
        .iter()
        .enumerate()
        .map(|(k, z)| {
            let mut dz = vec![0.0; n * n];
            let window = k * per_kernel..(k + 1) * per_kernel;
            for (&idx, &g) in trace.pool_argmax[window.clone()].iter().zip(&d_pooled[window]) {
                if z.values()[idx] > 0.0 {
                    dz[idx] += g;
                }
            }
            let dz = SpatialField::new(n, dz)?;
            Ok(circular_cross_correlation(&x, &dz)?.into_values())
        })
        .collect::<Result<Vec<_>>>()?;

    ledger.record_update(&update_cost(&AlgoConfig::new(Algorithm::Bp), n, p.num_kernels(), c));
    Ok(UpdateSet { d_kernels, d_fc, d_bias })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    /// Cumulative ledger totals at the end of the epoch.
    pub update_flops: u64,
    pub passes: u64,
}

/// One seeded training run: network, optimizer, projection, backend and
/// independent random streams for training noise, evaluation noise and
/// sample order.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: Network,
    pub algo: AlgoConfig,
    pub backend: ConvBackend,
    pub ledger: FlopLedger,
    adam: AdamState,
    projection: ProjectionF,
    noise: RngStream,
    eval_noise: RngStream,
    order: RngStream,
    epoch: usize,
}

const STREAM_INIT: u64 = 0;
const STREAM_PROJECTION: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_ORDER: u64 = 3;
const STREAM_EVAL: u64 = 4;

impl Trainer {
    pub fn new(hp: Hyperparams, n: usize, algo: AlgoConfig, backend: ConvBackend, seed: u64) -> Result<Self> {
        algo.validate()?;
        let root = RngStream::new(seed);
        let net = Network::init(hp, n, &mut root.fork(STREAM_INIT))?;
        let projection = init_projection(n, net.hp.classes, algo.f_scale, &mut root.fork(STREAM_PROJECTION))?;
        Ok(Self::from_parts(net, algo, backend, projection, &root))
    }

    pub fn from_parts(net: Network, algo: AlgoConfig, backend: ConvBackend, projection: ProjectionF, root: &RngStream) -> Self {
        let adam = AdamState::new(net.params());
        Self {
            net,
            algo,
            backend,
            ledger: FlopLedger::default(),
            adam,
            projection,
            noise: root.fork(STREAM_NOISE),
            eval_noise: root.fork(STREAM_EVAL),
            order: root.fork(STREAM_ORDER),
            epoch: 0,
        }
    }

    pub fn projection(&self) -> &ProjectionF {
        &self.projection
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    fn update_for(&mut self, image: &SpatialField, trace: &ForwardTrace, e: &[f64]) -> Result<UpdateSet> {
        let Self { net, algo, backend, ledger, projection, noise, .. } = self;
        match algo.algorithm {
            Algorithm::Bp => bp_update(net, image, trace, e, backend, ledger),
            Algorithm::Pepita => pepita_update(net, image, trace, e, projection, backend, algo, noise, ledger),
            Algorithm::Mempepita => mempepita_update(net, image, trace, e, projection, backend, algo, noise, ledger),
        }
    }

    /// Shuffled pass over `data`: forward, loss, update rule, Adam step,
    /// kernel spectrum refresh.
    pub fn train_epoch(&mut self, data: &[LabeledImage]) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        self.order.shuffle(&mut order);

        let batch = self.net.hp.batch_size;
        let mut total_loss = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(batch) {
            let mut acc: Option<UpdateSet> = None;
            for &i in chunk {
                let sample = &data[i];
                let trace = self.net.forward(&sample.pixels, &self.backend, &mut self.noise)?;
                self.ledger.forward_flops += forward_cost(
                    &self.backend,
                    self.net.n(),
                    self.net.params().num_kernels(),
                    self.net.params().feature_len(),
                    self.net.hp.classes,
                );
                let (loss, e) = loss_and_error(&trace, sample.label)?;
                if !loss.is_finite() {
                    return Err(Error::Numerical(format!("non-finite loss at epoch {}", self.epoch + 1)));
                }
                total_loss += loss;
                if argmax(&trace.probs) == sample.label {
                    correct += 1;
                }
                let upd = self.update_for(&sample.pixels, &trace, &e)?;
                match acc.as_mut() {
                    Some(a) => a.accumulate(&upd),
                    None => acc = Some(upd),
                }
            }
            if let Some(mut upd) = acc {
                if chunk.len() > 1 {
                    upd.scale(1.0 / chunk.len() as f64);
                }
                self.net.apply(&mut self.adam, &upd)?;
            }
        }
        self.epoch += 1;
        Ok(EpochMetrics {
            epoch: self.epoch,
            train_loss: total_loss / data.len() as f64,
            train_acc: correct as f64 / data.len() as f64,
            update_flops: self.ledger.update_flops,
            passes: self.ledger.passes,
        })
    }

    /// Uses its own noise stream, so evaluating never changes training.
    pub fn evaluate(&mut self, data: &[LabeledImage]) -> Result<f64> {
        evaluate(&self.net, data, &self.backend, &mut self.eval_noise)
    }
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn evaluate(net: &Network, data: &[LabeledImage], backend: &ConvBackend, rng: &mut RngStream) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let mut correct = 0usize;
    for sample in data {
        let trace = net.forward(&sample.pixels, backend, rng)?;
        if argmax(&trace.probs) == sample.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{kernel_to_frequency, ModelParams};

    fn tiny_net(n: usize, k: usize, classes: usize, seed: u64) -> Network {
        let hp = Hyperparams { kernels: k, classes, ..Hyperparams::default() };
        Network::init(hp, n, &mut RngStream::new(seed)).unwrap()
    }

    fn image(n: usize, seed: u64) -> SpatialField {
        let mut rng = RngStream::new(seed);
        SpatialField::from_fn(n, |_, _| rng.uniform(0.0, 1.0)).unwrap()
    }

    #[test]
    fn projection_zero_scale_and_determinism() {
        let f = init_projection(4, 3, 0.0, &mut RngStream::new(1)).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
        let a = init_projection(6, 3, 0.05, &mut RngStream::new(9)).unwrap();
        let b = init_projection(6, 3, 0.05, &mut RngStream::new(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.checksum(), b.checksum());
        let bound = 0.05 / 6.0;
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn projection_entry_spread_matches_uniform_moments() {
        // Var of uniform(−b, b) is b²/3, so std = f_scale / (√3 · n).
        let n = 28;
        let classes = 128; // 28² · 128 ≈ 1.0e5 samples
        let f = init_projection(n, classes, 0.05, &mut RngStream::new(3)).unwrap();
        let m = f.data().iter().sum::<f64>() / f.data().len() as f64;
        let var = f.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / (f.data().len() - 1) as f64;
        let expect = 0.05 / (3f64.sqrt() * n as f64);
        assert!((var.sqrt() - expect).abs() / expect < 0.01, "{} vs {expect}", var.sqrt());
    }

    #[test]
    fn modulation_identities() {
        let x = image(4, 2);
        let f = init_projection(4, 3, 0.5, &mut RngStream::new(1)).unwrap();
        assert_eq!(modulated_input(&x, &[0.0; 3], &f, ModulationSign::Minus).unwrap(), x);
        assert_eq!(modulated_input(&x, &[0.3, -0.1, 0.2], &ProjectionF::zeros(4, 3), ModulationSign::Minus).unwrap(), x);
    }

    #[test]
    fn modulation_hand_evaluated() {
        // 2×2 image, 2 classes: F rows per pixel.
        let f = ProjectionF::from_data(2, 2, 1.0, vec![0.1, 0.2, -0.3, 0.4, 1.0, 0.0, -1.0, -1.0]).unwrap();
        let x = SpatialField::filled(2, 0.5).unwrap();
        let e = [0.5, -0.25];
        // F·e = [0.05 - 0.05, -0.15 - 0.1, 0.5, -0.5 + 0.25] = [0, -0.25, 0.5, -0.25]
        let minus = modulated_input(&x, &e, &f, ModulationSign::Minus).unwrap();
        let expect = [0.5, 0.75, 0.0, 0.75];
        for (a, b) in minus.values().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let plus = modulated_input(&x, &e, &f, ModulationSign::Plus).unwrap();
        let expect = [0.5, 0.25, 1.0, 0.25];
        for (a, b) in plus.values().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_error_gives_zero_updates() {
        let net = tiny_net(8, 2, 4, 1);
        let x = image(8, 2);
        let mut rng = RngStream::new(0);
        let tr = net.forward(&x, &ConvBackend::Software, &mut rng).unwrap();
        let e = vec![0.0; 4];
        let f = init_projection(8, 4, 0.05, &mut rng).unwrap();
        let mut ledger = FlopLedger::default();
        let cfg = AlgoConfig::new(Algorithm::Pepita);
        assert!(pepita_update(&net, &x, &tr, &e, &f, &ConvBackend::Software, &cfg, &mut rng, &mut ledger).unwrap().is_zero());
        assert!(bp_update(&net, &x, &tr, &e, &ConvBackend::Software, &mut ledger).unwrap().is_zero());
    }

    #[test]
    fn zero_projection_leaves_only_fc_update() {
        let net = tiny_net(8, 2, 4, 1);
        let x = image(8, 2);
        let mut rng = RngStream::new(0);
        let tr = net.forward(&x, &ConvBackend::Software, &mut rng).unwrap();
        let (_, e) = loss_and_error(&tr, 1).unwrap();
        let mut ledger = FlopLedger::default();
        let upd = pepita_update(
            &net,
            &x,
            &tr,
            &e,
            &ProjectionF::zeros(8, 4),
            &ConvBackend::Software,
            &AlgoConfig::new(Algorithm::Pepita),
            &mut rng,
            &mut ledger,
        )
        .unwrap();
        assert!(upd.d_kernels.iter().flatten().all(|&v| v == 0.0));
        let (expect_fc, _) = fc_updates(&e, &tr.pooled);
        assert_eq!(upd.d_fc, expect_fc);
        assert!(upd.d_fc.iter().any(|&v| v != 0.0));
        assert_eq!(upd.d_bias, e);
    }

    #[test]
    fn pepita_pointwise_matches_scripted_two_pass_oracle() {
        // 4×4 single kernel, 2 classes, software backend.
        let n = 4;
        let hp = Hyperparams { kernels: 1, classes: 2, ..Hyperparams::default() };
        let kernel = SpatialField::new(n, (0..16).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.1).collect()).unwrap();
        let fc: Vec<f64> = (0..8).map(|i| ((i % 3) as f64 - 1.0) * 0.2).collect();
        let params = ModelParams::new(n, 2, vec![kernel.clone()], fc.clone(), vec![0.05, -0.05]).unwrap();
        let net = Network::new(hp, params).unwrap();
        let x = SpatialField::new(n, (0..16).map(|i| ((i * 5 % 16) as f64) / 15.0).collect()).unwrap();
        let proj = ProjectionF::from_data(n, 2, 1.0, (0..32).map(|i| ((i % 7) as f64 - 3.0) * 0.05).collect()).unwrap();

        // Oracle: direct-sum convolution, explicit ReLU, explicit pool.
        let relu_conv = |img: &SpatialField| -> Vec<f64> {
            crate::optics::reference_convolve(img, &kernel).unwrap().values().iter().map(|v| v.max(0.0)).collect()
        };
        let pool = |h: &[f64]| -> Vec<f64> {
            let mut out = vec![];
            for pr in 0..2 {
                for pc in 0..2 {
                    let w = [h[pr * 8 + pc * 2], h[pr * 8 + pc * 2 + 1], h[pr * 8 + 4 + pc * 2], h[pr * 8 + 4 + pc * 2 + 1]];
                    out.push(w.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
                }
            }
            out
        };
        let h = relu_conv(&x);
        let p = pool(&h);
        let logits: Vec<f64> = (0..2).map(|c| [0.05, -0.05][c] + (0..4).map(|d| fc[d * 2 + c] * p[d]).sum::<f64>()).collect();
        let z = (logits[0].exp() + logits[1].exp()).ln();
        let e = [(logits[0] - z).exp() - 1.0, (logits[1] - z).exp()];
        let fe: Vec<f64> = (0..16).map(|i| proj.data()[i * 2] * e[0] + proj.data()[i * 2 + 1] * e[1]).collect();
        let x_mod: Vec<f64> = x.values().iter().zip(&fe).map(|(a, b)| (a - b).clamp(0.0, 1.0)).collect();
        let h_mod = relu_conv(&SpatialField::new(n, x_mod.clone()).unwrap());
        let expect: Vec<f64> = (0..16).map(|i| (h[i] - h_mod[i]) * x_mod[i]).collect();
        let p_mod = pool(&h_mod);

        let mut rng = RngStream::new(0);
        let tr = net.forward(&x, &ConvBackend::Software, &mut rng).unwrap();
        let (_, e_impl) = loss_and_error(&tr, 0).unwrap();
        let mut ledger = FlopLedger::default();
        let upd = pepita_update(&net, &x, &tr, &e_impl, &proj, &ConvBackend::Software, &AlgoConfig::new(Algorithm::Pepita), &mut rng, &mut ledger)
            .unwrap();
        for (a, b) in upd.d_kernels[0].iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!(expect.iter().any(|v| v.abs() > 1e-6));
        for (row, p) in upd.d_fc.chunks(2).zip(&p_mod) {
            for (g, ec) in row.iter().zip(&e) {
                assert!((g - ec * p).abs() < 1e-12);
            }
        }
        assert_eq!(ledger.passes, 2);
    }

    #[test]
    fn correlation_rule_runs_and_costs_ffts() {
        let net = tiny_net(8, 2, 4, 3);
        let x = image(8, 4);
        let mut rng = RngStream::new(0);
        let tr = net.forward(&x, &ConvBackend::Software, &mut rng).unwrap();
        let (_, e) = loss_and_error(&tr, 2).unwrap();
        let f = init_projection(8, 4, 0.5, &mut rng).unwrap();
        let cfg = AlgoConfig { pepita_conv_rule: PepitaConvRule::Correlation, ..AlgoConfig::new(Algorithm::Pepita) };
        let mut ledger = FlopLedger::default();
        let upd = pepita_update(&net, &x, &tr, &e, &f, &ConvBackend::Software, &cfg, &mut rng, &mut ledger).unwrap();
        assert!(upd.d_kernels.iter().flatten().any(|&v| v != 0.0));
        assert_eq!(ledger.fft_flops, 2 * 3 * fft2_flops(8));
    }

    #[test]
    fn ledger_increments_match_closed_form() {
        let net = tiny_net(8, 3, 10, 5);
        let x = image(8, 6);
        let mut rng = RngStream::new(0);
        let tr = net.forward(&x, &ConvBackend::Software, &mut rng).unwrap();
        let (_, e) = loss_and_error(&tr, 0).unwrap();
        let f = init_projection(8, 10, 0.05, &mut rng).unwrap();
        for alg in [Algorithm::Bp, Algorithm::Pepita, Algorithm::Mempepita] {
            let cfg = AlgoConfig::new(alg);
            let mut ledger = FlopLedger::default();
            match alg {
                Algorithm::Bp => bp_update(&net, &x, &tr, &e, &ConvBackend::Software, &mut ledger).map(|_| ()),
                Algorithm::Pepita => pepita_update(&net, &x, &tr, &e, &f, &ConvBackend::Software, &cfg, &mut rng, &mut ledger).map(|_| ()),
                Algorithm::Mempepita => mempepita_update(&net, &x, &tr, &e, &f, &ConvBackend::Software, &cfg, &mut rng, &mut ledger).map(|_| ()),
            }
            .unwrap();
            let closed = count_flops(&cfg, 8, 3, 10).unwrap();
            assert_eq!(ledger.update_flops, closed.update_flops, "{alg}");
            assert_eq!(ledger.passes, closed.passes);
            assert_eq!(ledger.peak_activation_memory, closed.peak_activation_memory);
        }
    }

    #[test]
    fn count_flops_domain_and_degenerate() {
        assert!(matches!(count_flops(&AlgoConfig::default(), 24, 8, 10), Err(Error::Domain(_))));
        assert!(count_flops(&AlgoConfig::default(), 28, 8, 10).is_ok());
        let bp = count_flops(&AlgoConfig::new(Algorithm::Bp), 64, 0, 10).unwrap();
        let pe = count_flops(&AlgoConfig::new(Algorithm::Pepita), 64, 0, 10).unwrap();
        assert_eq!(bp.update_flops, pe.update_flops);
        assert_eq!(bp.update_flops, 2 * 10);
    }

    #[test]
    fn pepita_count_quadruples() {
        let cfg = AlgoConfig::new(Algorithm::Pepita);
        let a = count_flops(&cfg, 64, 8, 10).unwrap().update_flops as f64;
        let b = count_flops(&cfg, 128, 8, 10).unwrap().update_flops as f64;
        assert!((b / a - 4.0).abs() < 0.01);
    }

    #[test]
    fn evaluate_single_correct_sample_and_empty() {
        let net = tiny_net(8, 1, 3, 2);
        let x = image(8, 1);
        let mut rng = RngStream::new(0);
        let tr = net.forward(&x, &ConvBackend::Software, &mut rng).unwrap();
        let label = argmax(&tr.probs);
        let data = vec![LabeledImage { pixels: x, label }];
        assert_eq!(evaluate(&net, &data, &ConvBackend::Software, &mut rng).unwrap(), 1.0);
        assert!(matches!(evaluate(&net, &[], &ConvBackend::Software, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn update_set_dump_is_readable() {
        let net = tiny_net(4, 2, 3, 0);
        let upd = UpdateSet::zeros(net.params());
        let mut buf = Vec::new();
        upd.write_to(&mut buf, 4).unwrap();
        let mut cursor = &buf[..];
        let mut blocks = 0;
        while crate::field::read_block(&mut cursor).unwrap().is_some() {
            blocks += 1;
        }
        assert_eq!(blocks, 4);
        let _ = kernel_to_frequency(net.params()).unwrap();
    }
}
