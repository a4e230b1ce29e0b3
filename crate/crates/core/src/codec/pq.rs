//! Lorenzo prediction with linear quantization.
//!
//! Values are visited in row-major order. Each is predicted from already
//! reconstructed neighbours (missing neighbours count as zero), the
//! residual is quantized to `q = round((x - pred) / 2ε)` and the value is
//! reconstructed as `pred + 2ε·q`. Values whose code would reach the
//! quantizer capacity, or whose float32 reconstruction would miss the
//! bound, are stored verbatim.
//!
//! Stream layout (little-endian):
//!
//! ```text
//! "PQ01" | u8 dims_mode | f64 eps | u32 capacity | varint count | varint outliers | u32 crc(header)
//! huffman table | varint raw_len | varint deflated_len | deflated code bits
//! outliers × (u64 position, f32 value) | u32 crc(body)
//! ```

use rayon::prelude::*;

use super::huffman::{get_varint, put_varint, BitReader, BitWriter, CodeTable};
use super::{deflate_into, inflate_into, CodecScratch};
use crate::error::{Error, Result};
use crate::parallel;

pub const MAGIC: &[u8; 4] = b"PQ01";
pub const DEFAULT_CAPACITY: u32 = 1 << 15;
/// Fixed part of the header; element and outlier counts follow as varints.
const HEADER_FIXED: usize = 4 + 1 + 8 + 4;
const OUTLIER: i32 = i32::MIN;
const ENTROPY_LEVEL: u32 = 6;

/// Logical `(stack, rows, cols)` view of a shape: the last two axes are
/// the panel, every leading axis is folded into the stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub stack: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Layout {
    pub fn from_shape(shape: &[usize]) -> Self {
        match shape {
            [] => Layout {
                stack: 1,
                rows: 1,
                cols: 1,
            },
            [n] => Layout {
                stack: 1,
                rows: 1,
                cols: *n,
            },
            [lead @ .., r, c] => Layout {
                stack: lead.iter().product(),
                rows: *r,
                cols: *c,
            },
        }
    }

    pub fn len(&self) -> usize {
        self.stack * self.rows * self.cols
    }
}

#[inline]
fn quantize(x: f32, pred: f64, quantum: f64, eps: f64, capacity: i32) -> (i32, f32) {
    let xf = f64::from(x);
    let q = ((xf - pred) / quantum).round();
    if q.is_finite() && q.abs() < f64::from(capacity) {
        let recon = (pred + quantum * q) as f32;
        if recon.is_finite() && (xf - f64::from(recon)).abs() <= eps {
            return (q as i32, recon);
        }
    }
    (OUTLIER, x)
}

#[inline]
fn dequantize(q: i32, pred: f64, quantum: f64) -> f32 {
    (pred + quantum * f64::from(q)) as f32
}

/// Runs the predictor over one contiguous block treated as
/// `(planes, rows, cols)` with `order`-dimensional prediction.
/// `step(i, pred) -> recon` either quantizes or dequantizes element `i`.
#[inline]
fn lorenzo<F: FnMut(usize, f64) -> f32>(
    recon: &mut [f32],
    planes: usize,
    rows: usize,
    cols: usize,
    order: u8,
    mut step: F,
) {
    let plane = rows * cols;
    let at = |recon: &[f32], i: usize| f64::from(recon[i]);
    match order {
        1 => {
            let mut prev = 0.0f64;
            for i in 0..recon.len() {
                let v = step(i, prev);
                recon[i] = v;
                prev = f64::from(v);
            }
        }
        2 => {
            for p in 0..planes {
                for r in 0..rows {
                    for c in 0..cols {
                        let i = p * plane + r * cols + c;
                        let pred = match (r > 0, c > 0) {
                            (false, false) => 0.0,
                            (false, true) => at(recon, i - 1),
                            (true, false) => at(recon, i - cols),
                            (true, true) => {
                                at(recon, i - 1) + at(recon, i - cols) - at(recon, i - cols - 1)
                            }
                        };
                        recon[i] = step(i, pred);
                    }
                }
            }
        }
        _ => {
            for p in 0..planes {
                for r in 0..rows {
                    for c in 0..cols {
                        let i = p * plane + r * cols + c;
                        let get = |dz: usize, dy: usize, dx: usize| -> f64 {
                            if dz > p || dy > r || dx > c {
                                0.0
                            } else {
                                at(recon, i - dz * plane - dy * cols - dx)
                            }
                        };
                        let pred = get(0, 0, 1) + get(0, 1, 0) + get(1, 0, 0)
                            - get(0, 1, 1)
                            - get(1, 0, 1)
                            - get(1, 1, 0)
                            + get(1, 1, 1);
                        recon[i] = step(i, pred);
                    }
                }
            }
        }
    }
}

/// Quantizes `data` into `codes`, using `recon` as the reconstruction
/// buffer. Outlier positions get the `OUTLIER` sentinel.
fn quantize_all(
    data: &[f32],
    layout: Layout,
    dims_mode: u8,
    eps: f64,
    capacity: u32,
    threads: usize,
    codes: &mut [i32],
    recon: &mut [f32],
) {
    let quantum = 2.0 * eps;
    let cap = capacity as i32;
    let run = |data: &[f32], codes: &mut [i32], recon: &mut [f32], planes: usize, order: u8| {
        lorenzo(recon, planes, layout.rows, layout.cols, order, |i, pred| {
            let (q, v) = quantize(data[i], pred, quantum, eps, cap);
            codes[i] = q;
            v
        })
    };
    match dims_mode {
        2 if threads > 1 && layout.stack > 1 => {
            let plane = layout.rows * layout.cols;
            parallel::run(threads, || {
                data.par_chunks(plane)
                    .zip(codes.par_chunks_mut(plane))
                    .zip(recon.par_chunks_mut(plane))
                    .for_each(|((d, c), r)| run(d, c, r, 1, 2))
            });
        }
        2 => run(data, codes, recon, layout.stack, 2),
        3 => run(data, codes, recon, layout.stack, 3),
        _ => run(data, codes, recon, 1, 1),
    }
}

fn write_header(out: &mut Vec<u8>, dims_mode: u8, eps: f64, capacity: u32, n: u64, outliers: u64) {
    let start = out.len();
    out.extend_from_slice(MAGIC);
    out.push(dims_mode);
    out.extend_from_slice(&eps.to_le_bytes());
    out.extend_from_slice(&capacity.to_le_bytes());
    put_varint(out, n);
    put_varint(out, outliers);
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
}

/// Appends a complete stream to `out`.
pub(crate) fn encode(
    data: &[f32],
    shape: &[usize],
    dims_mode: u8,
    eps: f64,
    capacity: u32,
    threads: usize,
    scratch: &mut CodecScratch,
    out: &mut Vec<u8>,
) -> Result<()> {
    let layout = Layout::from_shape(shape);
    let n = data.len();
    if layout.len() != n {
        return Err(Error::Size {
            expected: layout.len() as u64,
            actual: n as u64,
            unit: "elements",
        });
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!(
            "error bound must be finite and > 0 for the predictive quantizer, got {eps}"
        )));
    }
    if capacity < 2 || capacity > (1 << 30) {
        return Err(Error::Config(format!("quantizer capacity {capacity} out of range")));
    }
    let CodecScratch {
        codes,
        recon,
        hist,
        bits,
        outliers,
        ..
    } = scratch;
    codes.clear();
    codes.resize(n, 0);
    recon.clear();
    recon.resize(n, 0.0);
    quantize_all(data, layout, dims_mode, eps, capacity, threads, codes, recon);

    // Symbols are q + capacity, in [1, 2·capacity - 1].
    let max_symbol = 2 * capacity - 1;
    hist.clear();
    hist.resize(max_symbol as usize + 1, 0);
    outliers.clear();
    for (i, &q) in codes.iter().enumerate() {
        if q == OUTLIER {
            outliers.push((i as u64, data[i]));
        } else {
            hist[(q + capacity as i32) as usize] += 1;
        }
    }
    let counts: Vec<(u32, u64)> = hist
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(s, &c)| (s as u32, c))
        .collect();
    let table = CodeTable::from_counts(&counts);
    let enc = table.encoder(max_symbol);

    bits.clear();
    bits.reserve((table.encoded_bits(&counts).div_ceil(8)) as usize);
    let mut w = BitWriter::new(bits);
    for &q in codes.iter() {
        if q != OUTLIER {
            let (code, len) = enc[(q + capacity as i32) as usize];
            w.put(code, len);
        }
    }
    w.finish();

    write_header(out, dims_mode, eps, capacity, n as u64, outliers.len() as u64);
    let body = out.len();
    table.write(out);
    put_varint(out, bits.len() as u64);
    let CodecScratch {
        bits,
        deflated,
        deflater,
        ..
    } = scratch;
    deflated.clear();
    deflate_into(deflater, ENTROPY_LEVEL, bits, deflated)?;
    put_varint(out, deflated.len() as u64);
    out.extend_from_slice(deflated);
    for &(pos, v) in scratch.outliers.iter() {
        out.extend_from_slice(&pos.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[body..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(())
}

/// Stream header fields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PqHeader {
    pub dims_mode: u8,
    pub eps: f64,
    pub capacity: u32,
    pub count: u64,
    pub outliers: u64,
}

pub fn read_header(bytes: &[u8]) -> Result<PqHeader> {
    parse_header(bytes).map(|(h, _)| h)
}

/// Parses and validates the header, returning it with its encoded length.
fn parse_header(bytes: &[u8]) -> Result<(PqHeader, usize)> {
    if bytes.len() < HEADER_FIXED + 6 {
        return Err(Error::corrupt("pq header", "truncated"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::corrupt("pq header", "bad magic"));
    }
    let mut cursor = &bytes[HEADER_FIXED..];
    let count = get_varint(&mut cursor).map_err(|_| Error::corrupt("pq header", "bad count"))?;
    let outliers =
        get_varint(&mut cursor).map_err(|_| Error::corrupt("pq header", "bad outlier count"))?;
    let len = bytes.len() - cursor.len();
    if cursor.len() < 4 {
        return Err(Error::corrupt("pq header", "truncated"));
    }
    let stored = u32::from_le_bytes(cursor[..4].try_into().unwrap());
    if crc32fast::hash(&bytes[..len]) != stored {
        return Err(Error::corrupt("pq header", "checksum mismatch"));
    }
    let h = PqHeader {
        dims_mode: bytes[4],
        eps: f64::from_le_bytes(bytes[5..13].try_into().unwrap()),
        capacity: u32::from_le_bytes(bytes[13..17].try_into().unwrap()),
        count,
        outliers,
    };
    if !(1..=3).contains(&h.dims_mode)
        || !(h.eps > 0.0 && h.eps.is_finite())
        || !(2..=1 << 30).contains(&h.capacity)
        || h.outliers > h.count
    {
        return Err(Error::corrupt("pq header", "field out of range"));
    }
    Ok((h, len + 4))
}

/// Decodes a full stream into `out`, which must have `count` elements.
pub(crate) fn decode(
    bytes: &[u8],
    shape: &[usize],
    threads: usize,
    scratch: &mut CodecScratch,
    out: &mut [f32],
) -> Result<PqHeader> {
    let (h, header_len) = parse_header(bytes)?;
    let layout = Layout::from_shape(shape);
    if h.count != out.len() as u64 || layout.len() != out.len() {
        return Err(Error::corrupt(
            "pq header",
            format!(
                "stream holds {} values, expected {}",
                h.count,
                out.len()
            ),
        ));
    }
    let body = &bytes[header_len..];
    if body.len() < 4 {
        return Err(Error::corrupt("pq body", "truncated"));
    }
    let (body, crc) = body.split_at(body.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(Error::corrupt("pq body", "checksum mismatch"));
    }
    let mut cursor = body;
    let max_symbol = 2 * h.capacity - 1;
    let table = CodeTable::read(&mut cursor, max_symbol)?;
    let raw_len = get_varint(&mut cursor)?;
    let deflated_len = get_varint(&mut cursor)? as usize;
    let coded = h.count - h.outliers;
    if deflated_len > cursor.len() || raw_len > coded.saturating_mul(3) + 8 {
        return Err(Error::corrupt("pq body", "code stream length out of range"));
    }
    let (deflated, rest) = cursor.split_at(deflated_len);
    if rest.len() as u64 != h.outliers * 12 {
        return Err(Error::corrupt("pq body", "outlier table length mismatch"));
    }
    let CodecScratch {
        codes,
        bits,
        inflater,
        outliers,
        ..
    } = scratch;
    inflate_into(inflater, deflated, raw_len as usize, bits)?;
    if coded > 0 && table.is_empty() {
        return Err(Error::corrupt("pq body", "empty code table"));
    }

    let n = out.len();
    codes.clear();
    codes.resize(n, 0);
    outliers.clear();
    for rec in rest.chunks_exact(12) {
        let pos = u64::from_le_bytes(rec[..8].try_into().unwrap());
        if pos >= n as u64 || outliers.last().is_some_and(|&(p, _)| pos <= p) {
            return Err(Error::corrupt("pq outliers", "positions out of order or range"));
        }
        codes[pos as usize] = OUTLIER;
        outliers.push((pos, f32::from_le_bytes(rec[8..].try_into().unwrap())));
    }
    let dec = table.decoder();
    let mut reader = BitReader::new(bits);
    let cap = h.capacity as i32;
    for c in codes.iter_mut() {
        if *c != OUTLIER {
            *c = dec.decode(&mut reader)? as i32 - cap;
        }
    }

    let quantum = 2.0 * h.eps;
    // Outliers are consumed in traversal order, which is increasing index
    // order within each block.
    let run = |codes: &[i32], out: &mut [f32], verbatim: &[(u64, f32)], planes: usize, order: u8| {
        let mut k = 0;
        lorenzo(out, planes, layout.rows, layout.cols, order, |i, pred| {
            if codes[i] == OUTLIER {
                k += 1;
                verbatim[k - 1].1
            } else {
                dequantize(codes[i], pred, quantum)
            }
        })
    };
    let outliers = &outliers[..];
    match h.dims_mode {
        2 if threads > 1 && layout.stack > 1 => {
            let plane = layout.rows * layout.cols;
            parallel::run(threads, || {
                codes
                    .par_chunks(plane)
                    .zip(out.par_chunks_mut(plane))
                    .enumerate()
                    .for_each(|(p, (c, o))| {
                        let lo = outliers.partition_point(|&(i, _)| i < (p * plane) as u64);
                        let hi = outliers.partition_point(|&(i, _)| i < ((p + 1) * plane) as u64);
                        run(c, o, &outliers[lo..hi], 1, 2)
                    })
            });
        }
        2 => run(codes, out, outliers, layout.stack, 2),
        3 => run(codes, out, outliers, layout.stack, 3),
        _ => run(codes, out, outliers, 1, 1),
    }
    Ok(h)
}
