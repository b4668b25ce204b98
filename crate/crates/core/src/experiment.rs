//! Config-driven experiment runs producing CSV/JSON artifacts that
//! regenerate the training-curve, fidelity, accuracy and FLOP panels.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{aggregate_runs, calibrate_noise_sigma, device_fidelity, mean, throughput, LatencyModel, RunSummary, SsimConfig};
use crate::dataset::{load_mnist, subsample_pools, synthetic_corpus, DatasetSplit, LabeledImage, MNIST_SIDE};
use crate::error::{Error, Result};
use crate::field::SpatialField;
use crate::model::{BackendKind, CheckpointManifest, ConvBackend, Hyperparams, ModelParams, Network};
use crate::optics::{DeviceConfig, KernelPreset};
use crate::rng::RngStream;
use crate::trainers::{count_flops, evaluate, AlgoConfig, Algorithm, EpochMetrics, FlopLedger, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// IDX image/label files (optionally gzipped). Without them a
    /// synthetic corpus is used.
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Separate pool for the test draw; defaults to the training pool.
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub train_size: usize,
    pub test_size: usize,
    pub seeds: Vec<u64>,
    pub synthetic_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            images: None,
            labels: None,
            test_images: None,
            test_labels: None,
            train_size: 600,
            test_size: 100,
            seeds: vec![0, 1, 2, 3, 4],
            synthetic_count: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub device: DeviceConfig,
    pub hyper: Hyperparams,
    pub algo: AlgoConfig,
    pub data: DataConfig,
    pub backend: BackendKind,
    pub ssim: SsimConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            device: DeviceConfig::realistic(),
            hyper: Hyperparams::default(),
            algo: AlgoConfig::default(),
            data: DataConfig::default(),
            backend: BackendKind::Device,
            ssim: SsimConfig::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a TOML file; relative data paths resolve against its folder.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| crate::error::io_at(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.images, &mut cfg.data.labels, &mut cfg.data.test_images, &mut cfg.data.test_labels]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.device.validate()?;
        self.hyper.validate(MNIST_SIDE)?;
        self.algo.validate()?;
        self.ssim.validate()?;
        let d = &self.data;
        if d.images.is_some() != d.labels.is_some() || d.test_images.is_some() != d.test_labels.is_some() {
            return Err(Error::Config("image and label paths must be given together".into()));
        }
        if d.test_images.is_some() && d.images.is_none() {
            return Err(Error::Config("test pool given without a training pool".into()));
        }
        if d.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if d.train_size == 0 || d.test_size == 0 {
            return Err(Error::Config("train_size and test_size must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form (sorted keys), excluding the
    /// output directory.
    pub fn config_hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config is always serializable");
        if let Some(map) = value.as_object_mut() {
            map.remove("output_dir");
        }
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    pub fn conv_backend(&self) -> ConvBackend {
        ConvBackend::from_kind(self.backend, &self.device)
    }
}

/// Sample pools the per-seed splits are drawn from.
#[derive(Debug, Clone)]
pub struct DataPools {
    pub train: Vec<LabeledImage>,
    pub test: Option<Vec<LabeledImage>>,
}

impl DataPools {
    pub fn load(cfg: &DataConfig) -> Result<Self> {
        let train = match (&cfg.images, &cfg.labels) {
            (Some(i), Some(l)) => load_mnist(i, l)?,
            _ => synthetic_corpus(cfg.synthetic_count, 0)?,
        };
        let test = match (&cfg.test_images, &cfg.test_labels) {
            (Some(i), Some(l)) => Some(load_mnist(i, l)?),
            _ => None,
        };
        Ok(Self { train, test })
    }

    pub fn split(&self, cfg: &DataConfig, classes: usize, seed: u64) -> Result<DatasetSplit> {
        subsample_pools(&self.train, self.test.as_deref(), cfg.train_size, cfg.test_size, seed, classes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub config_hash: String,
    pub algorithm: Algorithm,
    pub backend: BackendKind,
    pub seed: u64,
    pub split_hash: String,
    pub epochs: Vec<EpochMetrics>,
    pub final_test_accuracy: f64,
    pub ledger: FlopLedger,
    pub projection_checksum: String,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub record: ResultRecord,
    pub params: ModelParams,
}

/// Trains one seed and evaluates on its test split.
pub fn run_seed(cfg: &ExperimentConfig, algo: &AlgoConfig, pools: &DataPools, seed: u64) -> Result<SeedRun> {
    let start = Instant::now();
    let split = pools.split(&cfg.data, cfg.hyper.classes, seed)?;
    let n = split.train[0].pixels.n();
    let mut trainer = Trainer::new(cfg.hyper.clone(), n, algo.clone(), cfg.conv_backend(), seed)?;
    let checksum = trainer.projection().checksum();
    let mut epochs = Vec::with_capacity(cfg.hyper.epochs);
    for _ in 0..cfg.hyper.epochs {
        epochs.push(trainer.train_epoch(&split.train)?);
    }
    if trainer.projection().checksum() != checksum {
        return Err(Error::Numerical("error projection changed during training".into()));
    }
    let final_test_accuracy = trainer.evaluate(&split.test)?;
    let record = ResultRecord {
        config_hash: cfg.config_hash(),
        algorithm: algo.algorithm,
        backend: cfg.backend,
        seed,
        split_hash: split.split_hash(),
        epochs,
        final_test_accuracy,
        ledger: trainer.ledger,
        projection_checksum: checksum,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    Ok(SeedRun { record, params: trainer.net.into_params() })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub runs: Vec<SeedRun>,
    pub summary: RunSummary,
}

/// All configured seeds for one algorithm, in parallel.
pub fn run_training(cfg: &ExperimentConfig, algo: &AlgoConfig, pools: &DataPools) -> Result<TrainOutcome> {
    let runs = cfg
        .data
        .seeds
        .par_iter()
        .map(|&seed| run_seed(cfg, algo, pools, seed))
        .collect::<Result<Vec<_>>>()?;
    let accs: Vec<f64> = runs.iter().map(|r| r.record.final_test_accuracy).collect();
    let summary = aggregate_runs(&accs)?;
    Ok(TrainOutcome { runs, summary })
}

pub const EPOCH_CSV_HEADER: [&str; 7] = ["epoch", "algorithm", "seed", "train_loss", "train_acc", "update_flops", "passes"];

pub fn epoch_csv(record: &ResultRecord) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(EPOCH_CSV_HEADER)?;
    for m in &record.epochs {
        w.write_record([
            m.epoch.to_string(),
            record.algorithm.to_string(),
            record.seed.to_string(),
            m.train_loss.to_string(),
            m.train_acc.to_string(),
            m.update_flops.to_string(),
            m.passes.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Writes via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub algorithm: Algorithm,
    pub backend: BackendKind,
    pub seeds: Vec<u64>,
    pub test_accuracy: RunSummary,
}

/// Writes `<algo>_seed<S>.{csv,json,ckpt}` per seed and `<algo>_summary.json`.
pub fn write_train_outputs(cfg: &ExperimentConfig, outcome: &TrainOutcome, dir: &Path) -> Result<TrainSummary> {
    let mut algorithm = cfg.algo.algorithm;
    for run in &outcome.runs {
        let r = &run.record;
        algorithm = r.algorithm;
        let stem = format!("{}_seed{}", r.algorithm, r.seed);
        write_atomic(&dir.join(format!("{stem}.csv")), &epoch_csv(r)?)?;
        write_json(&dir.join(format!("{stem}.json")), r)?;
        let manifest = CheckpointManifest {
            kernels: run.params.num_kernels(),
            n: run.params.n(),
            classes: run.params.classes(),
            seed: r.seed,
            epoch: r.epochs.len(),
        };
        write_atomic(&dir.join(format!("{stem}.ckpt")), &run.params.to_checkpoint(&manifest)?)?;
    }
    let summary = TrainSummary {
        config_hash: cfg.config_hash(),
        algorithm,
        backend: cfg.backend,
        seeds: cfg.data.seeds.clone(),
        test_accuracy: outcome.summary.clone(),
    };
    write_json(&dir.join(format!("{algorithm}_summary.json")), &summary)?;
    Ok(summary)
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    let pools = DataPools::load(&cfg.data)?;
    let outcome = run_training(cfg, &cfg.algo, &pools)?;
    write_train_outputs(cfg, &outcome, &cfg.output_dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub config_hash: String,
    pub backend: BackendKind,
    pub bp: RunSummary,
    pub pepita: RunSummary,
    /// BP mean minus PEPITA mean, in accuracy percentage points.
    pub gap_points: f64,
    pub split_hashes: Vec<String>,
    pub identical_splits: bool,
}

pub fn compare(cfg: &ExperimentConfig, pools: &DataPools) -> Result<(CompareReport, TrainOutcome, TrainOutcome)> {
    let bp_algo = AlgoConfig { algorithm: Algorithm::Bp, ..cfg.algo.clone() };
    let pe_algo = AlgoConfig { algorithm: Algorithm::Pepita, ..cfg.algo.clone() };
    let bp = run_training(cfg, &bp_algo, pools)?;
    let pe = run_training(cfg, &pe_algo, pools)?;
    let bp_hashes: Vec<String> = bp.runs.iter().map(|r| r.record.split_hash.clone()).collect();
    let pe_hashes: Vec<String> = pe.runs.iter().map(|r| r.record.split_hash.clone()).collect();
    let report = CompareReport {
        config_hash: cfg.config_hash(),
        backend: cfg.backend,
        bp: bp.summary.clone(),
        pepita: pe.summary.clone(),
        gap_points: 100.0 * (bp.summary.mean - pe.summary.mean),
        identical_splits: bp_hashes == pe_hashes,
        split_hashes: bp_hashes,
    };
    Ok((report, bp, pe))
}

pub fn cmd_compare(cfg: &ExperimentConfig) -> Result<CompareReport> {
    let pools = DataPools::load(&cfg.data)?;
    let (report, bp, pe) = compare(cfg, &pools)?;
    write_train_outputs(cfg, &bp, &cfg.output_dir)?;
    write_train_outputs(cfg, &pe, &cfg.output_dir)?;
    write_json(&cfg.output_dir.join("compare.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsimReport {
    pub config_hash: String,
    pub kernel: KernelPreset,
    pub noise_sigma: f64,
    pub calibrated: bool,
    pub images: usize,
    pub per_image: Vec<f64>,
    pub mean: f64,
    /// `(noise_sigma, mean SSIM)` pairs when a sweep was requested.
    pub sweep: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Default)]
pub struct SsimStudyOptions {
    /// Number of test images; defaults to the whole test split.
    pub count: Option<usize>,
    /// Calibrate noise to this mean SSIM before measuring.
    pub calibrate_to: Option<f64>,
    pub sweep: Vec<f64>,
}

/// Test images of the first seed's split.
pub fn study_images(cfg: &ExperimentConfig, pools: &DataPools, count: Option<usize>) -> Result<Vec<SpatialField>> {
    let seed = cfg.data.seeds[0];
    let split = pools.split(&cfg.data, cfg.hyper.classes, seed)?;
    let take = count.unwrap_or(split.test.len());
    if take > split.test.len() {
        return Err(Error::Config(format!("requested {take} images, test split has {}", split.test.len())));
    }
    Ok(split.test.into_iter().take(take).map(|s| s.pixels).collect())
}

pub fn ssim_study(cfg: &ExperimentConfig, pools: &DataPools, preset: KernelPreset, opts: &SsimStudyOptions) -> Result<SsimReport> {
    let images = study_images(cfg, pools, opts.count)?;
    let seed = cfg.data.seeds[0];
    let n = images[0].n();
    let kernel = preset.build(n, &mut RngStream::new(seed).fork(0xc0de))?;
    let mut device = cfg.device.clone();
    if let Some(target) = opts.calibrate_to {
        device.camera.noise_sigma = calibrate_noise_sigma(&images, &kernel, &device, &cfg.ssim, target, seed)?;
    }
    let per_image = device_fidelity(&images, &kernel, &device, &cfg.ssim, seed)?;
    let sweep = opts
        .sweep
        .iter()
        .map(|&s| {
            let d = device.clone().with_noise_sigma(s);
            Ok((s, mean(&device_fidelity(&images, &kernel, &d, &cfg.ssim, seed)?)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SsimReport {
        config_hash: cfg.config_hash(),
        kernel: preset,
        noise_sigma: device.camera.noise_sigma,
        calibrated: opts.calibrate_to.is_some(),
        images: images.len(),
        mean: mean(&per_image),
        per_image,
        sweep,
    })
}

pub fn cmd_ssim_study(cfg: &ExperimentConfig, preset: KernelPreset, opts: &SsimStudyOptions) -> Result<SsimReport> {
    let pools = DataPools::load(&cfg.data)?;
    let report = ssim_study(cfg, &pools, preset, opts)?;
    write_json(&cfg.output_dir.join("ssim_study.json"), &report)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["image", "ssim"])?;
    for (i, v) in report.per_image.iter().enumerate() {
        w.write_record([i.to_string(), v.to_string()])?;
    }
    write_atomic(&cfg.output_dir.join("ssim_per_image.csv"), &w.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopRow {
    pub n: usize,
    pub algorithm: Algorithm,
    pub update_flops: u64,
    pub fft_flops: u64,
    pub pointwise_flops: u64,
    pub passes: u64,
    pub peak_activation_memory: u64,
    pub bp_over_pepita: f64,
    /// BP counts leave out dL/dz_hw from downstream layers.
    pub excludes_downstream_error: bool,
}

pub const FLOP_CSV_HEADER: [&str; 9] = [
    "n",
    "algorithm",
    "update_flops",
    "fft_flops",
    "pointwise_flops",
    "passes",
    "peak_activation_memory",
    "bp_over_pepita",
    "excludes_downstream_error",
];

pub fn flop_table(ns: &[usize], kernels: usize, classes: usize, base: &AlgoConfig) -> Result<Vec<FlopRow>> {
    let mut rows = Vec::new();
    for &n in ns {
        let bp = count_flops(&AlgoConfig { algorithm: Algorithm::Bp, ..base.clone() }, n, kernels, classes)?;
        let pe = count_flops(&AlgoConfig { algorithm: Algorithm::Pepita, ..base.clone() }, n, kernels, classes)?;
        let ratio = bp.update_flops as f64 / pe.update_flops as f64;
        for (algorithm, l) in [(Algorithm::Bp, bp), (Algorithm::Pepita, pe)] {
            rows.push(FlopRow {
                n,
                algorithm,
                update_flops: l.update_flops,
                fft_flops: l.fft_flops,
                pointwise_flops: l.pointwise_flops,
                passes: l.passes,
                peak_activation_memory: l.peak_activation_memory,
                bp_over_pepita: ratio,
                excludes_downstream_error: algorithm == Algorithm::Bp,
            });
        }
    }
    Ok(rows)
}

pub fn flop_csv(rows: &[FlopRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(FLOP_CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.n.to_string(),
            r.algorithm.to_string(),
            r.update_flops.to_string(),
            r.fft_flops.to_string(),
            r.pointwise_flops.to_string(),
            r.passes.to_string(),
            r.peak_activation_memory.to_string(),
            r.bp_over_pepita.to_string(),
            r.excludes_downstream_error.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub model: LatencyModel,
    pub frame_ms: f64,
    pub images_per_second: f64,
}

pub fn cmd_throughput(model: &LatencyModel) -> Result<ThroughputReport> {
    let images_per_second = throughput(model)?;
    Ok(ThroughputReport {
        model: model.clone(),
        frame_ms: model.slm_setup_ms + model.exposure_ms + model.os_overhead_ms,
        images_per_second,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub seed: u64,
    pub checkpoint_epoch: usize,
    pub backend: BackendKind,
    pub test_accuracy: f64,
}

/// Evaluates a checkpoint on the test split of `seed`.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, seed: u64) -> Result<EvalReport> {
    let bytes = fs::read(checkpoint).map_err(|e| crate::error::io_at(checkpoint, e))?;
    let (params, manifest) = ModelParams::from_checkpoint(&bytes)?;
    let hp = Hyperparams { kernels: manifest.kernels, classes: manifest.classes, ..cfg.hyper.clone() };
    let net = Network::new(hp, params)?;
    let pools = DataPools::load(&cfg.data)?;
    let split = pools.split(&cfg.data, manifest.classes, seed)?;
    let mut rng = RngStream::new(seed).fork(0xe7a1);
    let test_accuracy = evaluate(&net, &split.test, &cfg.conv_backend(), &mut rng)?;
    Ok(EvalReport {
        config_hash: cfg.config_hash(),
        seed,
        checkpoint_epoch: manifest.epoch,
        backend: cfg.backend,
        test_accuracy,
    })
}
