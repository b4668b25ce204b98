//! Square real and complex grids, plus their flat binary layout.
//!
//! Binary layout (little-endian): a 16-byte header `b"F4FD"`, `u32 rows`,
//! `u32 kind`, `u32 cols`, followed by `rows * cols` row-major `f64`
//! values (complex kinds store interleaved `re, im` pairs). For square
//! fields `cols == rows == n`.

use std::io::{Read, Write};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

pub const FIELD_MAGIC: [u8; 4] = *b"F4FD";
pub const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum FieldKind {
    Spatial = 0,
    Frequency = 1,
    ComplexSpatial = 2,
    Matrix = 3,
}

impl FieldKind {
    fn from_u32(v: u32) -> Result<Self> {
        Ok(match v {
            0 => FieldKind::Spatial,
            1 => FieldKind::Frequency,
            2 => FieldKind::ComplexSpatial,
            3 => FieldKind::Matrix,
            other => return Err(Error::Format(format!("unknown field kind {other}"))),
        })
    }

    fn is_complex(self) -> bool {
        matches!(self, FieldKind::Frequency | FieldKind::ComplexSpatial)
    }
}

fn check_side(n: usize) -> Result<()> {
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::InvalidField(format!("side length must be even and >= 2, got {n}")));
    }
    Ok(())
}

/// Real n×n grid, row-major. All values finite; n even.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawReal")]
pub struct SpatialField {
    n: usize,
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct RawReal {
    n: usize,
    values: Vec<f64>,
}

impl TryFrom<RawReal> for SpatialField {
    type Error = Error;
    fn try_from(raw: RawReal) -> Result<Self> {
        SpatialField::new(raw.n, raw.values)
    }
}

impl SpatialField {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        check_side(n)?;
        if values.len() != n * n {
            return Err(shape_err(format!("expected {} values for n={n}, got {}", n * n, values.len())));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidField(format!("non-finite value at index {i}")));
        }
        Ok(Self { n, values })
    }

    pub fn zeros(n: usize) -> Result<Self> {
        Self::new(n, vec![0.0; n * n])
    }

    pub fn filled(n: usize, v: f64) -> Result<Self> {
        Self::new(n, vec![v; n * n])
    }

    /// Builds a field from `f(row, col)`.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                values.push(f(r, c));
            }
        }
        Self::new(n, values)
    }

    /// Unit impulse at `(row, col)`.
    pub fn impulse(n: usize, row: usize, col: usize) -> Result<Self> {
        Self::from_fn(n, |r, c| if r == row && c == col { 1.0 } else { 0.0 })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n + col]
    }

    /// Sum of squares.
    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub(crate) fn ensure_finite(&self) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numerical("field became non-finite".into()))
        }
    }

    pub fn ensure_same_shape(&self, other: &SpatialField) -> Result<()> {
        if self.n != other.n {
            return Err(shape_err(format!("{}x{} vs {}x{}", self.n, self.n, other.n, other.n)));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_block(w, FieldKind::Spatial, self.n, self.n, &self.values)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_LEN + 8 * self.values.len());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let block = read_block(&mut &bytes[..])?.ok_or_else(|| Error::Format("empty input".into()))?;
        block.into_spatial()
    }
}

/// Complex n×n grid in natural (uncentred) spatial order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexGrid {
    pub(crate) n: usize,
    pub(crate) values: Vec<Complex64>,
}

impl ComplexGrid {
    pub fn new(n: usize, values: Vec<Complex64>) -> Result<Self> {
        check_side(n)?;
        if values.len() != n * n {
            return Err(shape_err(format!("expected {} values for n={n}, got {}", n * n, values.len())));
        }
        Ok(Self { n, values })
    }

    pub fn zeros(n: usize) -> Result<Self> {
        Self::new(n, vec![Complex64::new(0.0, 0.0); n * n])
    }

    pub fn from_real(field: &SpatialField) -> Self {
        Self {
            n: field.n,
            values: field.values.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    /// Real part as a spatial field.
    pub fn real_part(&self) -> Result<SpatialField> {
        SpatialField::new(self.n, self.values.iter().map(|v| v.re).collect())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_block(w, FieldKind::ComplexSpatial, self.n, self.n, &interleave(&self.values))
    }
}

/// Complex n×n spectrum with the DC bin stored at `(n/2, n/2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyField {
    pub(crate) n: usize,
    pub(crate) values: Vec<Complex64>,
}

impl FrequencyField {
    pub fn new(n: usize, values: Vec<Complex64>) -> Result<Self> {
        let grid = ComplexGrid::new(n, values)?;
        Ok(Self { n, values: grid.values })
    }

    pub fn zeros(n: usize) -> Result<Self> {
        Self::new(n, vec![Complex64::new(0.0, 0.0); n * n])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    /// Value at centred frequency index `(row, col)`; DC is `(n/2, n/2)`.
    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.values[row * self.n + col]
    }

    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_block(w, FieldKind::Frequency, self.n, self.n, &interleave(&self.values))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_LEN + 16 * self.values.len());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let block = read_block(&mut &bytes[..])?.ok_or_else(|| Error::Format("empty input".into()))?;
        if block.kind != FieldKind::Frequency {
            return Err(Error::Format(format!("expected frequency block, found {:?}", block.kind)));
        }
        Self::new(block.rows, deinterleave(&block.data))
    }
}

fn interleave(values: &[Complex64]) -> Vec<f64> {
    values.iter().flat_map(|v| [v.re, v.im]).collect()
}

fn deinterleave(data: &[f64]) -> Vec<Complex64> {
    data.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect()
}

/// One decoded block of the binary layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub kind: FieldKind,
    pub rows: usize,
    pub cols: usize,
    /// Raw f64 payload; complex kinds are interleaved.
    pub data: Vec<f64>,
}

impl Block {
    pub fn into_spatial(self) -> Result<SpatialField> {
        if self.kind != FieldKind::Spatial {
            return Err(Error::Format(format!("expected spatial block, found {:?}", self.kind)));
        }
        SpatialField::new(self.rows, self.data)
    }

    pub fn into_matrix(self) -> Result<(usize, usize, Vec<f64>)> {
        if self.kind != FieldKind::Matrix {
            return Err(Error::Format(format!("expected matrix block, found {:?}", self.kind)));
        }
        Ok((self.rows, self.cols, self.data))
    }
}

pub fn write_block<W: Write>(w: &mut W, kind: FieldKind, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    let per = if kind.is_complex() { 2 } else { 1 };
    if data.len() != rows * cols * per {
        return Err(shape_err(format!("block payload {} does not match {rows}x{cols}", data.len())));
    }
    let to_u32 = |v: usize| u32::try_from(v).map_err(|_| Error::Range(format!("dimension {v} exceeds u32")));
    w.write_all(&FIELD_MAGIC)?;
    w.write_all(&to_u32(rows)?.to_le_bytes())?;
    w.write_all(&(kind as u32).to_le_bytes())?;
    w.write_all(&to_u32(cols)?.to_le_bytes())?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Writes a real row-major matrix block.
pub fn write_matrix<W: Write>(w: &mut W, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    write_block(w, FieldKind::Matrix, rows, cols, data)
}

/// Reads the next block. Returns `Ok(None)` at a clean end of input.
pub fn read_block<R: Read>(r: &mut R) -> Result<Option<Block>> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        let k = r.read(&mut header[got..])?;
        if k == 0 {
            break;
        }
        got += k;
    }
    if got == 0 {
        return Ok(None);
    }
    if got < HEADER_LEN {
        return Err(Error::Length { expected: HEADER_LEN, found: got });
    }
    parse_block_after_header(&header, r).map(Some)
}

pub(crate) fn parse_block_after_header<R: Read>(header: &[u8; HEADER_LEN], r: &mut R) -> Result<Block> {
    if header[..4] != FIELD_MAGIC {
        return Err(Error::Format("bad field magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
    let rows = word(4);
    let kind = FieldKind::from_u32(word(8) as u32)?;
    let cols = word(12);
    let count = rows * cols * if kind.is_complex() { 2 } else { 1 };
    let mut payload = vec![0u8; count * 8];
    let mut got = 0;
    while got < payload.len() {
        let k = r.read(&mut payload[got..])?;
        if k == 0 {
            return Err(Error::Length { expected: payload.len(), found: got });
        }
        got += k;
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Block { kind, rows, cols, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_odd_and_tiny_sides() {
        assert!(matches!(SpatialField::zeros(3), Err(Error::InvalidField(_))));
        assert!(matches!(SpatialField::zeros(0), Err(Error::InvalidField(_))));
        assert!(SpatialField::zeros(2).is_ok());
    }

    #[test]
    fn rejects_non_finite() {
        let err = SpatialField::new(2, vec![0.0, f64::NAN, 0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::InvalidField(_)));
    }

    #[test]
    fn header_is_sixteen_bytes() {
        let f = SpatialField::from_fn(4, |r, c| (r * 4 + c) as f64).unwrap();
        let bytes = f.to_bytes();
        assert_eq!(&bytes[..4], b"F4FD");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 0);
        assert_eq!(bytes.len(), 16 + 16 * 8);
        assert_eq!(f64::from_le_bytes(bytes[16 + 8 * 5..16 + 8 * 6].try_into().unwrap()), 5.0);
        assert_eq!(SpatialField::from_bytes(&bytes).unwrap(), f);
    }

    #[test]
    fn truncated_payload_is_length_error() {
        let bytes = SpatialField::zeros(4).unwrap().to_bytes();
        let err = SpatialField::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Length { .. }));
    }

    #[test]
    fn json_dump_validates() {
        let f = SpatialField::impulse(2, 0, 1).unwrap();
        let s = serde_json::to_string(&f).unwrap();
        assert_eq!(serde_json::from_str::<SpatialField>(&s).unwrap(), f);
        assert!(serde_json::from_str::<SpatialField>(r#"{"n":3,"values":[0,0,0,0,0,0,0,0,0]}"#).is_err());
    }

    #[test]
    fn frequency_round_trip() {
        let vals = (0..16).map(|i| Complex64::new(i as f64, -(i as f64) / 3.0)).collect();
        let f = FrequencyField::new(4, vals).unwrap();
        assert_eq!(FrequencyField::from_bytes(&f.to_bytes()).unwrap(), f);
    }
}
