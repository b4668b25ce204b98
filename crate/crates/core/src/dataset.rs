//! MNIST ingestion from IDX files, stratified subsampling and a
//! procedural fallback corpus.

use std::io::Read;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::field::SpatialField;
use crate::rng::RngStream;

pub const MNIST_SIDE: usize = 28;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: SpatialField,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdxKind {
    Images,
    Labels,
}

impl IdxKind {
    fn magic(self) -> u32 {
        match self {
            IdxKind::Images => IDX_IMAGES_MAGIC,
            IdxKind::Labels => IDX_LABELS_MAGIC,
        }
    }

    fn rank(self) -> usize {
        match self {
            IdxKind::Images => 3,
            IdxKind::Labels => 1,
        }
    }
}

/// Decoded unsigned-byte IDX tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    pub kind: IdxKind,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxTensor {
    pub fn count(&self) -> usize {
        self.dims[0]
    }
}

pub fn parse_idx(bytes: &[u8], expect: IdxKind) -> Result<IdxTensor> {
    let header_len = 4 + 4 * expect.rank();
    if bytes.len() < 4 {
        return Err(Error::Length { expected: header_len, found: bytes.len() });
    }
    let word = |i: usize| u32::from_be_bytes(bytes[i..i + 4].try_into().unwrap());
    let magic = word(0);
    if magic != expect.magic() {
        return Err(Error::Format(format!("bad IDX magic {magic:#010x}, expected {:#010x}", expect.magic())));
    }
    if bytes.len() < header_len {
        return Err(Error::Length { expected: header_len, found: bytes.len() });
    }
    let dims: Vec<usize> = (0..expect.rank()).map(|d| word(4 + 4 * d) as usize).collect();
    let payload = dims.iter().product::<usize>();
    let body = &bytes[header_len..];
    if body.len() < payload {
        return Err(Error::Length { expected: header_len + payload, found: bytes.len() });
    }
    if body.len() > payload {
        return Err(Error::Format(format!("{} trailing bytes after IDX payload", body.len() - payload)));
    }
    Ok(IdxTensor { kind: expect, dims, data: body.to_vec() })
}

pub fn encode_idx(tensor: &IdxTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * tensor.dims.len() + tensor.data.len());
    out.extend_from_slice(&tensor.kind.magic().to_be_bytes());
    for &d in &tensor.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&tensor.data);
    out
}

/// Reads an IDX file, transparently inflating gzip.
pub fn read_idx_file(path: &Path, expect: IdxKind) -> Result<IdxTensor> {
    let raw = std::fs::read(path).map_err(|e| crate::error::io_at(path, e))?;
    let bytes = if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        out
    } else {
        raw
    };
    parse_idx(&bytes, expect)
}

/// Pairs image and label tensors, scaling pixels by 1/255.
pub fn labeled_images(images: &IdxTensor, labels: &IdxTensor) -> Result<Vec<LabeledImage>> {
    if images.count() != labels.count() {
        return Err(Error::Format(format!("{} images but {} labels", images.count(), labels.count())));
    }
    let (rows, cols) = (images.dims[1], images.dims[2]);
    if rows != cols {
        return Err(Error::Format(format!("images must be square, got {rows}x{cols}")));
    }
    let side = rows;
    images
        .data
        .chunks_exact(side * side)
        .zip(&labels.data)
        .map(|(px, &label)| {
            let pixels = SpatialField::new(side, px.iter().map(|&b| b as f64 / 255.0).collect())?;
            Ok(LabeledImage { pixels, label: label as usize })
        })
        .collect()
}

pub fn load_mnist(images_path: &Path, labels_path: &Path) -> Result<Vec<LabeledImage>> {
    let images = read_idx_file(images_path, IdxKind::Images)?;
    let labels = read_idx_file(labels_path, IdxKind::Labels)?;
    labeled_images(&images, &labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
    pub seed: u64,
    /// Positions in the source pool(s), in split order.
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

impl DatasetSplit {
    /// Digest of the chosen indices; equal hashes mean equal splits.
    pub fn split_hash(&self) -> String {
        let mut h = Sha256::new();
        for i in self.train_indices.iter().chain([&usize::MAX]).chain(&self.test_indices) {
            h.update((*i as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn quotas(total: usize, classes: usize) -> Vec<usize> {
    (0..classes).map(|c| total / classes + usize::from(c < total % classes)).collect()
}

fn by_class(pool: &[LabeledImage], classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut out = vec![Vec::new(); classes];
    for (i, s) in pool.iter().enumerate() {
        out.get_mut(s.label)
            .ok_or_else(|| Error::Config(format!("label {} outside [0, {classes})", s.label)))?
            .push(i);
    }
    Ok(out)
}

/// Label-stratified draw of disjoint train and test sets from one pool.
pub fn subsample(full: &[LabeledImage], train_n: usize, test_n: usize, seed: u64) -> Result<DatasetSplit> {
    subsample_pools(full, None, train_n, test_n, seed, 10)
}

/// Stratified draw. With a separate `test_pool` the test set comes from
/// it; otherwise both sets come from `train_pool` without overlap.
pub fn subsample_pools(
    train_pool: &[LabeledImage],
    test_pool: Option<&[LabeledImage]>,
    train_n: usize,
    test_n: usize,
    seed: u64,
    classes: usize,
) -> Result<DatasetSplit> {
    let mut rng = RngStream::new(seed).fork(0x5e1ec7);
    let train_q = quotas(train_n, classes);
    let test_q = quotas(test_n, classes);
    let mut train_classes = by_class(train_pool, classes)?;
    let mut test_classes = match test_pool {
        Some(p) => Some(by_class(p, classes)?),
        None => None,
    };

    let mut train_indices = Vec::with_capacity(train_n);
    let mut test_indices = Vec::with_capacity(test_n);
    for c in 0..classes {
        let idx = &mut train_classes[c];
        rng.shuffle(idx);
        match test_classes.as_mut() {
            None => {
                if idx.len() < train_q[c] + test_q[c] {
                    return Err(Error::Config(format!(
                        "class {c} has {} samples, need {}",
                        idx.len(),
                        train_q[c] + test_q[c]
                    )));
                }
                train_indices.extend_from_slice(&idx[..train_q[c]]);
                test_indices.extend_from_slice(&idx[train_q[c]..train_q[c] + test_q[c]]);
            }
            Some(tc) => {
                let tidx = &mut tc[c];
                rng.shuffle(tidx);
                if idx.len() < train_q[c] || tidx.len() < test_q[c] {
                    return Err(Error::Config(format!("class {c} has too few samples")));
                }
                train_indices.extend_from_slice(&idx[..train_q[c]]);
                test_indices.extend_from_slice(&tidx[..test_q[c]]);
            }
        }
    }
    rng.shuffle(&mut train_indices);
    rng.shuffle(&mut test_indices);
    let test_src = test_pool.unwrap_or(train_pool);
    Ok(DatasetSplit {
        train: train_indices.iter().map(|&i| train_pool[i].clone()).collect(),
        test: test_indices.iter().map(|&i| test_src[i].clone()).collect(),
        seed,
        train_indices,
        test_indices,
    })
}

pub fn class_histogram(samples: &[LabeledImage], classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    for s in samples {
        if s.label < classes {
            h[s.label] += 1;
        }
    }
    h
}

/// Seven-segment masks (a, b, c, d, e, f, g) for digits 0–9.
const SEGMENTS: [[bool; 7]; 10] = [
    [true, true, true, true, true, true, false],
    [false, true, true, false, false, false, false],
    [true, true, false, true, true, false, true],
    [true, true, true, true, false, false, true],
    [false, true, true, false, false, true, true],
    [true, false, true, true, false, true, true],
    [true, false, true, true, true, true, true],
    [true, true, true, false, false, false, false],
    [true, true, true, true, true, true, true],
    [true, true, true, true, false, true, true],
];

fn segment_distance(px: f64, py: f64, (x0, y0): (f64, f64), (x1, y1): (f64, f64)) -> f64 {
    let (dx, dy) = (x1 - x0, y1 - y0);
    let t = (((px - x0) * dx + (py - y0) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    ((px - x0 - t * dx).powi(2) + (py - y0 - t * dy).powi(2)).sqrt()
}

/// Deterministic digit-like glyphs on a 28×28 canvas. Label `i % 10` for
/// the i-th sample; position, size, slant, stroke width and intensity
/// are jittered per sample.
pub fn synthetic_corpus(count: usize, seed: u64) -> Result<Vec<LabeledImage>> {
    if count == 0 {
        return Err(Error::Config("synthetic corpus needs count > 0".into()));
    }
    let mut rng = RngStream::new(seed).fork(0x5717);
    (0..count)
        .map(|i| {
            let label = i % 10;
            let cx = 14.0 + rng.uniform(-2.5, 2.5);
            let cy = 14.0 + rng.uniform(-2.0, 2.0);
            let half_w = rng.uniform(3.5, 5.5);
            let half_h = rng.uniform(7.0, 9.0);
            let slant = rng.uniform(-0.25, 0.25);
            let width = rng.uniform(1.0, 2.0);
            let ink = rng.uniform(0.75, 1.0);
            let p = |u: f64, v: f64| (cx + u * half_w - v * half_h * slant, cy + v * half_h);
            let segs = [
                (p(-1.0, -1.0), p(1.0, -1.0)),
                (p(1.0, -1.0), p(1.0, 0.0)),
                (p(1.0, 0.0), p(1.0, 1.0)),
                (p(-1.0, 1.0), p(1.0, 1.0)),
                (p(-1.0, 0.0), p(-1.0, 1.0)),
                (p(-1.0, -1.0), p(-1.0, 0.0)),
                (p(-1.0, 0.0), p(1.0, 0.0)),
            ];
            let active: Vec<_> = segs.iter().zip(SEGMENTS[label]).filter(|(_, on)| *on).map(|(s, _)| *s).collect();
            let pixels = SpatialField::from_fn(MNIST_SIDE, |r, c| {
                let (x, y) = (c as f64, r as f64);
                let d = active.iter().map(|&(a, b)| segment_distance(x, y, a, b)).fold(f64::INFINITY, f64::min);
                // Soft-edged stroke, quantized to 8 bits like real scans.
                let v = (ink * (1.0 - (d - width).max(0.0))).clamp(0.0, 1.0);
                (v * 255.0).round() / 255.0
            })?;
            Ok(LabeledImage { pixels, label })
        })
        .collect()
}
