//! Sparse delta payloads and their byte-exact wire encoding.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "FSRD"
//! 4       1     version (1)
//! 5       1     flags: bit0 = RLE bitmap, bit1 = dense (no bitmap section)
//! 6       4     rows   u32
//! 10      4     cols   u32
//! 14      4     nnz    u32
//! 18      ..    bitmap section
//! ..      4*nnz values, f32 IEEE-754, in row-major bitmap order
//! ```
//!
//! The raw bitmap is `ceil(rows*cols/8)` bytes, bit `i` stored in byte
//! `i / 8` at bit position `i % 8` (LSB first); padding bits are zero. The
//! RLE bitmap is a sequence of unsigned LEB128 run lengths alternating
//! zero-runs and one-runs, starting with a (possibly empty) zero-run, and
//! ending exactly when the runs cover `rows*cols` bits.
//!
//! In memory values stay `f64`; they are narrowed to `f32` only by
//! [`encode`].

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

pub const MAGIC: [u8; 4] = *b"FSRD";
pub const VERSION: u8 = 1;
pub const FLAG_RLE: u8 = 0b01;
pub const FLAG_DENSE: u8 = 0b10;
/// Fixed header size shared by [`encode`] and [`account`].
pub const HEADER_BYTES: usize = 18;
pub const VALUE_BYTES: usize = 4;
pub const BYTES_PER_MB: f64 = 1024.0 * 1024.0;

/// A matrix update carried as a positional bitmap plus packed kept values.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDelta {
    rows: usize,
    cols: usize,
    mask: Vec<bool>,
    values: Vec<f64>,
}

impl SparseDelta {
    pub fn new(rows: usize, cols: usize, mask: Vec<bool>, values: Vec<f64>) -> Result<Self> {
        if mask.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "bitmap of {} bits for a {rows}x{cols} delta",
                mask.len()
            )));
        }
        let popcount = mask.iter().filter(|&&b| b).count();
        if popcount != values.len() {
            return Err(Error::InvalidInput(format!(
                "bitmap marks {popcount} entries but {} values given",
                values.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            mask,
            values,
        })
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            mask: vec![false; rows * cols],
            values: Vec::new(),
        }
    }

    /// Every position marked, zeros included.
    pub fn from_dense(m: &DenseMatrix) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            mask: vec![true; m.len()],
            values: m.data().to_vec(),
        }
    }

    /// Marks only the nonzero entries of `m`.
    pub fn from_nonzero(m: &DenseMatrix) -> Self {
        Self::from_filter(m, |_, v| v != 0.0)
    }

    /// Keeps the entries for which `keep(flat_index, value)` holds, with
    /// their exact values.
    pub fn from_filter(m: &DenseMatrix, mut keep: impl FnMut(usize, f64) -> bool) -> Self {
        let mut mask = Vec::with_capacity(m.len());
        let mut values = Vec::new();
        for (i, &v) in m.data().iter().enumerate() {
            let k = keep(i, v);
            mask.push(k);
            if k {
                values.push(v);
            }
        }
        Self {
            rows: m.rows(),
            cols: m.cols(),
            mask,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn density(&self) -> f64 {
        if self.mask.is_empty() {
            0.0
        } else {
            self.nnz() as f64 / self.mask.len() as f64
        }
    }

    /// `(flat_index, value)` for every marked position.
    pub fn entries(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
            .zip(self.values.iter().copied())
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for (i, v) in self.entries() {
            out[(i / self.cols, i % self.cols)] = v;
        }
        out
    }

    /// Adds this delta into `target` in place.
    pub fn add_into(&self, target: &mut DenseMatrix) -> Result<()> {
        if target.shape() != self.shape() {
            return Err(Error::Shape {
                op: "sparse add",
                left: target.shape(),
                right: self.shape(),
            });
        }
        for (i, v) in self.entries() {
            target[(i / self.cols, i % self.cols)] += v;
        }
        Ok(())
    }

    /// Copy with every value rounded to `f32`, i.e. what survives the wire.
    pub fn narrowed(&self) -> Self {
        Self {
            values: self.values.iter().map(|&v| v as f32 as f64).collect(),
            ..self.clone()
        }
    }
}

/// Per-layer transmission unit: an optional update for each LoRA factor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerPayload {
    pub b: Option<SparseDelta>,
    pub a: Option<SparseDelta>,
}

impl LayerPayload {
    pub fn both(b: SparseDelta, a: SparseDelta) -> Self {
        Self { b: Some(b), a: Some(a) }
    }

    pub fn b_only(b: SparseDelta) -> Self {
        Self { b: Some(b), a: None }
    }

    pub fn a_only(a: SparseDelta) -> Self {
        Self { b: None, a: Some(a) }
    }

    pub fn parts(&self) -> impl Iterator<Item = &SparseDelta> {
        self.b.iter().chain(self.a.iter())
    }
}

/// What one client sends in a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub layers: Vec<LayerPayload>,
}

/// What the server broadcasts after a round.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDownload {
    pub round: u64,
    pub layers: Vec<LayerPayload>,
}

/// How the bitmap section is written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BitmapCoding {
    #[default]
    Raw,
    Rle,
    /// Whichever of raw and RLE is shorter.
    Auto,
}

fn to_u32(x: usize) -> Result<u32> {
    u32::try_from(x).map_err(|_| Error::Overflow(x))
}

fn write_header(out: &mut Vec<u8>, flags: u8, rows: usize, cols: usize, nnz: usize) -> Result<()> {
    let (rows, cols, nnz) = (to_u32(rows)?, to_u32(cols)?, to_u32(nnz)?);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(flags);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    out.extend_from_slice(&nnz.to_le_bytes());
    Ok(())
}

fn write_values(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Packs bits LSB-first into `ceil(len/8)` bytes.
pub fn pack_bitmap(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

/// Encodes a sparse delta with a raw (`use_rle = false`) or run-length
/// bitmap.
pub fn encode(delta: &SparseDelta, use_rle: bool) -> Result<Vec<u8>> {
    let bitmap = if use_rle {
        rle_bitmap(&delta.mask)
    } else {
        pack_bitmap(&delta.mask)
    };
    let flags = if use_rle { FLAG_RLE } else { 0 };
    let mut out = Vec::with_capacity(HEADER_BYTES + bitmap.len() + VALUE_BYTES * delta.nnz());
    write_header(&mut out, flags, delta.rows, delta.cols, delta.nnz())?;
    out.extend_from_slice(&bitmap);
    write_values(&mut out, &delta.values);
    Ok(out)
}

pub fn encode_with(delta: &SparseDelta, coding: BitmapCoding) -> Result<Vec<u8>> {
    match coding {
        BitmapCoding::Raw => encode(delta, false),
        BitmapCoding::Rle => encode(delta, true),
        BitmapCoding::Auto => {
            let raw = encode(delta, false)?;
            let rle = encode(delta, true)?;
            Ok(if rle.len() < raw.len() { rle } else { raw })
        }
    }
}

/// Dense payload: header with the dense flag, then every value. No bitmap.
pub fn encode_dense(m: &DenseMatrix) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_BYTES + VALUE_BYTES * m.len());
    write_header(&mut out, FLAG_DENSE, m.rows(), m.cols(), m.len())?;
    write_values(&mut out, m.data());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::TruncatedPayload { needed: n })?;
        if end > self.bytes.len() {
            return Err(Error::TruncatedPayload {
                needed: end - self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let s = self.take(4)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<SparseDelta> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() >= 4 && bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:02x?}", &bytes[..4])));
    }
    r.take(4)?;
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let flags = r.take(1)?[0];
    if flags & !(FLAG_RLE | FLAG_DENSE) != 0 || flags == FLAG_RLE | FLAG_DENSE {
        return Err(Error::Format(format!("unknown flags {flags:#04x}")));
    }
    let rows = r.u32()?;
    let cols = r.u32()?;
    let nnz = r.u32()?;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::CorruptPayload(format!("{rows}x{cols} overflows")))?;

    let mask = if flags & FLAG_DENSE != 0 {
        if nnz != n {
            return Err(Error::CorruptPayload(format!(
                "dense payload declares {nnz} values for {n} positions"
            )));
        }
        vec![true; n]
    } else if flags & FLAG_RLE != 0 {
        let (bits, used) = unrle_prefix(&bytes[r.pos..], n)?;
        r.pos += used;
        bits
    } else {
        let packed = r.take(n.div_ceil(8))?;
        let bits: Vec<bool> = (0..n).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
        if n % 8 != 0 && packed[n / 8] >> (n % 8) != 0 {
            return Err(Error::CorruptPayload("nonzero bitmap padding".into()));
        }
        bits
    };

    let popcount = mask.iter().filter(|&&b| b).count();
    if popcount != nnz {
        return Err(Error::CorruptPayload(format!(
            "header declares {nnz} values, bitmap marks {popcount}"
        )));
    }
    let raw = r.take(nnz * VALUE_BYTES)?;
    let values = raw
        .chunks_exact(VALUE_BYTES)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if r.pos != bytes.len() {
        return Err(Error::CorruptPayload(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(SparseDelta {
        rows,
        cols,
        mask,
        values,
    })
}

/// Closed-form byte cost of one payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ByteAccount {
    pub value_bytes: usize,
    pub bitmap_bytes: usize,
    pub header_bytes: usize,
    pub total_bytes: usize,
}

impl ByteAccount {
    pub fn value_mb(&self) -> f64 {
        self.value_bytes as f64 / BYTES_PER_MB
    }

    pub fn bitmap_mb(&self) -> f64 {
        self.bitmap_bytes as f64 / BYTES_PER_MB
    }

    pub fn total_mb(&self) -> f64 {
        self.total_bytes as f64 / BYTES_PER_MB
    }
}

/// Byte cost of transmitting a `rows x cols` matrix.
///
/// Dense payloads carry every value and no bitmap; sparse ones carry `nnz`
/// values plus, when `include_bitmap`, a raw bitmap. For any shape and
/// `nnz <= rows*cols` the total equals the length of the matching
/// [`encode`] (raw bitmap) or [`encode_dense`] output.
pub fn account(rows: usize, cols: usize, nnz: usize, dense: bool, include_bitmap: bool) -> ByteAccount {
    let n = rows * cols;
    debug_assert!(nnz <= n, "nnz {nnz} exceeds {n} positions");
    let (value_bytes, bitmap_bytes) = if dense {
        (n * VALUE_BYTES, 0)
    } else {
        let bitmap = if include_bitmap { n.div_ceil(8) } else { 0 };
        (nnz * VALUE_BYTES, bitmap)
    };
    ByteAccount {
        value_bytes,
        bitmap_bytes,
        header_bytes: HEADER_BYTES,
        total_bytes: value_bytes + bitmap_bytes + HEADER_BYTES,
    }
}

/// Alternating run lengths, zero-run first.
pub fn bitmap_runs(bits: &[bool]) -> Vec<u64> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut count = 0u64;
    for &b in bits {
        if b == current {
            count += 1;
        } else {
            runs.push(count);
            current = b;
            count = 1;
        }
    }
    if !bits.is_empty() {
        runs.push(count);
    }
    runs
}

fn write_leb128(out: &mut Vec<u8>, mut x: u64) {
    loop {
        let byte = (x & 0x7f) as u8;
        x >>= 7;
        if x == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

fn read_leb128(bytes: &[u8], pos: &mut usize) -> Result<u64> {
    let mut value = 0u64;
    for shift in (0..64).step_by(7) {
        let byte = *bytes.get(*pos).ok_or(Error::TruncatedPayload { needed: 1 })?;
        *pos += 1;
        let chunk = (byte & 0x7f) as u64;
        if shift == 63 && chunk > 1 {
            return Err(Error::CorruptPayload("run length overflows u64".into()));
        }
        value |= chunk << shift;
        if byte & 0x80 == 0 {
            return Ok(value);
        }
    }
    Err(Error::CorruptPayload("run length varint too long".into()))
}

/// Run-length encodes a bitmap.
pub fn rle_bitmap(bits: &[bool]) -> Vec<u8> {
    let mut out = Vec::new();
    for run in bitmap_runs(bits) {
        write_leb128(&mut out, run);
    }
    out
}

/// Inverse of [`rle_bitmap`]; the stream must describe exactly `len` bits
/// and nothing more.
pub fn unrle_bitmap(bytes: &[u8], len: usize) -> Result<Vec<bool>> {
    let (bits, used) = unrle_prefix(bytes, len)?;
    if used != bytes.len() {
        return Err(Error::CorruptPayload(format!(
            "{} bytes after the run-length stream",
            bytes.len() - used
        )));
    }
    Ok(bits)
}

fn unrle_prefix(bytes: &[u8], len: usize) -> Result<(Vec<bool>, usize)> {
    let mut bits = Vec::with_capacity(len);
    let mut pos = 0;
    let mut current = false;
    let mut first = true;
    while bits.len() < len {
        let run = read_leb128(bytes, &mut pos)?;
        if run == 0 && !first {
            return Err(Error::CorruptPayload("empty run after the first".into()));
        }
        let remaining = (len - bits.len()) as u64;
        if run > remaining {
            return Err(Error::CorruptPayload(format!(
                "run of {run} overshoots the {remaining} remaining bits"
            )));
        }
        bits.extend(std::iter::repeat_n(current, run as usize));
        current = !current;
        first = false;
    }
    Ok((bits, pos))
}
