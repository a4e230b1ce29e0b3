//! Pluggable float32 codecs: raw passthrough, deflate, and the
//! error-bounded predictive quantizer (`pq`).

pub mod huffman;
pub mod pq;

use std::fmt;
use std::str::FromStr;

use flate2::{Compress, Compression, Decompress, FlushCompress, FlushDecompress, Status};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    Absolute,
    ValueRangeRelative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBound {
    pub kind: BoundKind,
    pub value: f64,
}

impl ErrorBound {
    pub fn absolute(value: f64) -> Self {
        ErrorBound {
            kind: BoundKind::Absolute,
            value,
        }
    }

    pub fn relative(value: f64) -> Self {
        ErrorBound {
            kind: BoundKind::ValueRangeRelative,
            value,
        }
    }
}

/// Absolute bound for `data`: relative bounds scale by the value range.
pub fn resolve_bound(bound: &ErrorBound, data: &[f32]) -> Result<f64> {
    if !(bound.value >= 0.0 && bound.value.is_finite()) {
        return Err(Error::Config(format!(
            "error bound must be finite and >= 0, got {}",
            bound.value
        )));
    }
    match bound.kind {
        BoundKind::Absolute => Ok(bound.value),
        BoundKind::ValueRangeRelative => {
            if data.is_empty() {
                return Err(Error::Config(
                    "a value-range-relative bound needs nonempty data".into(),
                ));
            }
            let (lo, hi) = data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
            let eps = bound.value * (f64::from(hi) - f64::from(lo));
            if eps <= 0.0 {
                return Err(Error::Config(
                    "data has zero value range, so the relative error bound resolves to 0; use an absolute bound"
                        .into(),
                ));
            }
            Ok(eps)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "codec", rename_all = "snake_case")]
pub enum CodecId {
    Raw,
    Deflate { level: u32 },
    Pq { bound: ErrorBound, dims_mode: u8 },
}

impl CodecId {
    pub fn pq_absolute(eps: f64, dims_mode: u8) -> Self {
        CodecId::Pq {
            bound: ErrorBound::absolute(eps),
            dims_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            CodecId::Raw => Ok(()),
            CodecId::Deflate { level } if (1..=9).contains(&level) => Ok(()),
            CodecId::Deflate { level } => Err(Error::Config(format!(
                "deflate level must be 1..=9, got {level}"
            ))),
            CodecId::Pq { bound, dims_mode } => {
                if !(1..=3).contains(&dims_mode) {
                    return Err(Error::Config(format!(
                        "pq dims mode must be 1, 2 or 3, got {dims_mode}"
                    )));
                }
                if !(bound.value > 0.0 && bound.value.is_finite()) {
                    return Err(Error::Config(format!(
                        "pq error bound must be finite and > 0, got {}",
                        bound.value
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn is_lossless(&self) -> bool {
        !matches!(self, CodecId::Pq { .. })
    }
}

impl fmt::Display for CodecId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CodecId::Raw => write!(f, "raw"),
            CodecId::Deflate { level } => write!(f, "deflate:{level}"),
            CodecId::Pq { bound, dims_mode } => {
                let kind = match bound.kind {
                    BoundKind::Absolute => "abs",
                    BoundKind::ValueRangeRelative => "rel",
                };
                write!(f, "pq:{kind}={}:dims={dims_mode}", bound.value)
            }
        }
    }
}

impl FromStr for CodecId {
    type Err = Error;

    /// `raw`, `deflate[:L]`, or `pq[:abs=E|rel=E][:dims=D]`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let codec = match parts.next().unwrap_or("") {
            "raw" => CodecId::Raw,
            "deflate" => {
                let level = match parts.next() {
                    Some(l) => l
                        .parse()
                        .map_err(|_| Error::Config(format!("bad deflate level in '{s}'")))?,
                    None => 6,
                };
                CodecId::Deflate { level }
            }
            "pq" => {
                let mut bound = ErrorBound::absolute(90.0);
                let mut dims_mode = 3;
                for part in parts.by_ref() {
                    let (key, val) = part
                        .split_once('=')
                        .ok_or_else(|| Error::Config(format!("bad pq option '{part}'")))?;
                    let num = |v: &str| {
                        v.parse::<f64>()
                            .map_err(|_| Error::Config(format!("bad number '{v}' in '{s}'")))
                    };
                    match key {
                        "abs" => bound = ErrorBound::absolute(num(val)?),
                        "rel" => bound = ErrorBound::relative(num(val)?),
                        "dims" => dims_mode = num(val)? as u8,
                        _ => return Err(Error::Config(format!("unknown pq option '{key}'"))),
                    }
                }
                CodecId::Pq { bound, dims_mode }
            }
            other => return Err(Error::Config(format!("unknown codec '{other}'"))),
        };
        if parts.next().is_some() {
            return Err(Error::Config(format!("trailing codec options in '{s}'")));
        }
        codec.validate()?;
        Ok(codec)
    }
}

/// Reusable buffers for encoding and decoding. Once warmed up to the
/// largest input seen, further calls do not allocate.
#[derive(Default)]
pub struct CodecScratch {
    codes: Vec<i32>,
    recon: Vec<f32>,
    hist: Vec<u64>,
    bits: Vec<u8>,
    deflated: Vec<u8>,
    outliers: Vec<(u64, f32)>,
    bytes: Vec<u8>,
    deflater: Option<(u32, Compress)>,
    inflater: Option<Decompress>,
}

pub(crate) fn deflate_into(
    deflater: &mut Option<(u32, Compress)>,
    level: u32,
    input: &[u8],
    out: &mut Vec<u8>,
) -> Result<()> {
    if deflater.as_ref().map(|d| d.0) != Some(level) {
        *deflater = Some((level, Compress::new(Compression::new(level), false)));
    }
    let c = &mut deflater.as_mut().unwrap().1;
    c.reset();
    loop {
        if out.capacity() - out.len() < 64 {
            out.reserve(input.len() / 2 + 1024);
        }
        let consumed = c.total_in() as usize;
        let status = c
            .compress_vec(&input[consumed..], out, FlushCompress::Finish)
            .map_err(|e| Error::Config(format!("deflate failed: {e}")))?;
        if status == Status::StreamEnd {
            return Ok(());
        }
    }
}

/// Inflates exactly `expected` bytes into `out` (cleared first).
pub(crate) fn inflate_into(
    inflater: &mut Option<Decompress>,
    input: &[u8],
    expected: usize,
    out: &mut Vec<u8>,
) -> Result<()> {
    let d = inflater.get_or_insert_with(|| Decompress::new(false));
    d.reset(false);
    out.clear();
    out.reserve(expected + 1);
    loop {
        let consumed = d.total_in() as usize;
        let produced = out.len();
        let status = d
            .decompress_vec(&input[consumed..], out, FlushDecompress::Finish)
            .map_err(|e| Error::corrupt("deflate stream", e.to_string()))?;
        if out.len() > expected {
            return Err(Error::corrupt("deflate stream", "inflates past expected size"));
        }
        if status == Status::StreamEnd {
            break;
        }
        if d.total_in() as usize == consumed && out.len() == produced {
            return Err(Error::corrupt("deflate stream", "truncated"));
        }
    }
    if out.len() != expected || d.total_in() as usize != input.len() {
        return Err(Error::corrupt(
            "deflate stream",
            format!("inflated {} of {expected} bytes", out.len()),
        ));
    }
    Ok(())
}

fn shape_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(data_len: usize, shape: &[usize]) -> Result<()> {
    if shape_len(shape) != data_len {
        return Err(Error::Size {
            expected: shape_len(shape) as u64,
            actual: data_len as u64,
            unit: "elements",
        });
    }
    Ok(())
}

/// Stateful codec front end holding scratch buffers and a thread budget.
#[derive(Default)]
pub struct CodecWorkspace {
    scratch: CodecScratch,
    threads: usize,
}

impl CodecWorkspace {
    pub fn new(threads: usize) -> Self {
        CodecWorkspace {
            scratch: CodecScratch::default(),
            threads: threads.max(1),
        }
    }

    pub fn set_threads(&mut self, threads: usize) {
        self.threads = threads.max(1);
    }

    /// Values a pq stream will decode to, valid right after a pq encode.
    pub(crate) fn last_reconstruction(&self) -> &[f32] {
        &self.scratch.recon
    }

    /// Appends the encoded stream to `out`. Returns the absolute bound
    /// used, for lossy codecs.
    pub fn encode_into(
        &mut self,
        codec: &CodecId,
        data: &[f32],
        shape: &[usize],
        out: &mut Vec<u8>,
    ) -> Result<Option<f64>> {
        codec.validate()?;
        check_shape(data.len(), shape)?;
        match *codec {
            CodecId::Raw => {
                out.reserve(data.len() * 4);
                for v in data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                Ok(None)
            }
            CodecId::Deflate { level } => {
                let bytes = &mut self.scratch.bytes;
                bytes.clear();
                bytes.reserve(data.len() * 4);
                for v in data {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                deflate_into(&mut self.scratch.deflater, level, bytes, out)?;
                Ok(None)
            }
            CodecId::Pq { bound, dims_mode } => {
                let eps = resolve_bound(&bound, data)?;
                pq::encode(
                    data,
                    shape,
                    dims_mode,
                    eps,
                    pq::DEFAULT_CAPACITY,
                    self.threads,
                    &mut self.scratch,
                    out,
                )?;
                Ok(Some(eps))
            }
        }
    }

    /// Decodes into `out`, whose length must match `shape`.
    pub fn decode_into(
        &mut self,
        codec: &CodecId,
        bytes: &[u8],
        shape: &[usize],
        out: &mut [f32],
    ) -> Result<()> {
        codec.validate()?;
        check_shape(out.len(), shape)?;
        let fill_from = |raw: &[u8], out: &mut [f32]| {
            for (o, b) in out.iter_mut().zip(raw.chunks_exact(4)) {
                *o = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            }
        };
        match *codec {
            CodecId::Raw => {
                if bytes.len() != out.len() * 4 {
                    return Err(Error::corrupt(
                        "raw payload",
                        format!("{} bytes for {} values", bytes.len(), out.len()),
                    ));
                }
                fill_from(bytes, out);
            }
            CodecId::Deflate { .. } => {
                let CodecScratch {
                    bytes: raw,
                    inflater,
                    ..
                } = &mut self.scratch;
                inflate_into(inflater, bytes, out.len() * 4, raw)?;
                fill_from(raw, out);
            }
            CodecId::Pq { bound, dims_mode } => {
                let h = pq::decode(bytes, shape, self.threads, &mut self.scratch, out)?;
                if h.dims_mode != dims_mode {
                    return Err(Error::corrupt(
                        "pq header",
                        format!("dims mode {} where {dims_mode} was expected", h.dims_mode),
                    ));
                }
                if bound.kind == BoundKind::Absolute && h.eps != bound.value {
                    return Err(Error::corrupt(
                        "pq header",
                        format!("error bound {} where {} was expected", h.eps, bound.value),
                    ));
                }
            }
        }
        Ok(())
    }
}

pub fn encode(codec: &CodecId, data: &[f32], shape: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    CodecWorkspace::new(1).encode_into(codec, data, shape, &mut out)?;
    Ok(out)
}

pub fn decode(codec: &CodecId, bytes: &[u8], shape: &[usize]) -> Result<Vec<f32>> {
    let mut out = vec![0f32; shape_len(shape)];
    CodecWorkspace::new(1).decode_into(codec, bytes, shape, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pq(eps: f64, dims: u8) -> CodecId {
        CodecId::pq_absolute(eps, dims)
    }

    #[test]
    fn raw_bit_pattern() {
        assert_eq!(
            encode(&CodecId::Raw, &[1.0], &[1]).unwrap(),
            vec![0x00, 0x00, 0x80, 0x3f]
        );
    }

    #[test]
    fn deflate_constant_is_tiny() {
        let data = vec![3.25f32; 1 << 18];
        let bytes = encode(&CodecId::Deflate { level: 6 }, &data, &[data.len()]).unwrap();
        assert!(bytes.len() * 100 < data.len() * 4, "{} bytes", bytes.len());
        // Interoperates with an independent RFC 1951 decoder.
        let mut inflated = Vec::new();
        use std::io::Read;
        flate2::read::DeflateDecoder::new(&bytes[..])
            .read_to_end(&mut inflated)
            .unwrap();
        assert_eq!(inflated.len(), data.len() * 4);
        assert_eq!(
            decode(&CodecId::Deflate { level: 6 }, &bytes, &[data.len()]).unwrap(),
            data
        );
    }

    #[test]
    fn pq_one_dimensional_example() {
        let codec = pq(0.5, 1);
        let bytes = encode(&codec, &[0.0, 1.0, 1.2], &[3]).unwrap();
        assert_eq!(decode(&codec, &bytes, &[3]).unwrap(), vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn pq_two_dimensional_example_is_exact() {
        let codec = pq(0.25, 2);
        let bytes = encode(&codec, &[1.0; 4], &[2, 2]).unwrap();
        assert_eq!(decode(&codec, &bytes, &[2, 2]).unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn pq_rejects_zero_bound() {
        assert!(matches!(
            encode(&pq(0.0, 1), &[1.0], &[1]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn resolve_bound_cases() {
        let data: Vec<f32> = (0..=1000).map(|x| x as f32).collect();
        assert_eq!(resolve_bound(&ErrorBound::relative(1e-3), &data).unwrap(), 1.0);
        assert_eq!(resolve_bound(&ErrorBound::absolute(90.0), &[5.0]).unwrap(), 90.0);
        assert!(matches!(
            resolve_bound(&ErrorBound::relative(1e-3), &[7.0; 10]),
            Err(Error::Config(_))
        ));
        assert!(resolve_bound(&ErrorBound::relative(1e-3), &[]).is_err());
    }

    #[test]
    fn empty_inputs() {
        for codec in [CodecId::Raw, CodecId::Deflate { level: 1 }, pq(1.0, 3)] {
            let bytes = encode(&codec, &[], &[0]).unwrap();
            assert!(decode(&codec, &bytes, &[0]).unwrap().is_empty());
        }
        assert!(encode(&pq(1.0, 1), &[], &[0]).unwrap().starts_with(pq::MAGIC));
    }

    #[test]
    fn constant_stream_is_run_length_small() {
        for n in [4096usize, 65_536] {
            for dims in 1..=3 {
                let data = vec![123.456f32; n];
                let shape = [4, 16, n / 64];
                let bytes = encode(&pq(0.5, dims), &data, &shape).unwrap();
                assert!(bytes.len() <= n / 64, "n={n} dims={dims}: {} bytes", bytes.len());
            }
        }
    }

    #[test]
    fn corrupt_streams_fail() {
        let data: Vec<f32> = (0..500).map(|i| (i as f32 * 0.37).sin() * 100.0).collect();
        let codec = pq(0.1, 2);
        let bytes = encode(&codec, &data, &[5, 100]).unwrap();
        for pos in [0, 5, 20, 40, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x10;
            assert!(decode(&codec, &bad, &[5, 100]).unwrap_err().is_corruption());
        }
        assert!(decode(&codec, &bytes[..bytes.len() - 3], &[5, 100]).is_err());
        assert!(decode(&CodecId::Raw, &[0; 7], &[2]).unwrap_err().is_corruption());
    }

    #[test]
    fn decode_checks_codec_parameters() {
        let bytes = encode(&pq(1.0, 2), &[1.0, 2.0], &[2]).unwrap();
        assert!(decode(&pq(1.0, 3), &bytes, &[2]).is_err());
        assert!(decode(&pq(2.0, 2), &bytes, &[2]).is_err());
    }

    #[test]
    fn codec_parsing() {
        assert_eq!("raw".parse::<CodecId>().unwrap(), CodecId::Raw);
        assert_eq!(
            "deflate:9".parse::<CodecId>().unwrap(),
            CodecId::Deflate { level: 9 }
        );
        assert_eq!("pq".parse::<CodecId>().unwrap(), pq(90.0, 3));
        assert_eq!(
            "pq:rel=0.001:dims=2".parse::<CodecId>().unwrap(),
            CodecId::Pq {
                bound: ErrorBound::relative(0.001),
                dims_mode: 2
            }
        );
        assert!("deflate:0".parse::<CodecId>().is_err());
        assert!("pq:dims=4".parse::<CodecId>().is_err());
        assert!("zstd".parse::<CodecId>().is_err());
        let c = pq(45.0, 1);
        assert_eq!(c.to_string().parse::<CodecId>().unwrap(), c);
    }

    #[test]
    fn adversarial_alternation_hits_outliers() {
        let data: Vec<f32> = (0..4096)
            .map(|i| if i % 2 == 0 { 1e6 } else { -1e6 })
            .collect();
        for dims in 1..=3 {
            let codec = pq(0.01, dims);
            let bytes = encode(&codec, &data, &[4, 32, 32]).unwrap();
            let header = pq::read_header(&bytes).unwrap();
            assert!(header.outliers > 0);
            let out = decode(&codec, &bytes, &[4, 32, 32]).unwrap();
            for (a, b) in data.iter().zip(&out) {
                assert!((f64::from(*a) - f64::from(*b)).abs() <= 0.01);
            }
        }
    }

    fn arb_array() -> impl Strategy<Value = (Vec<f32>, [usize; 3])> {
        (1usize..4, 1usize..12, 1usize..12).prop_flat_map(|(s, r, c)| {
            (
                proptest::collection::vec(
                    prop_oneof![-1e4f32..1e4, -1e7f32..1e7, Just(0.0f32), -1.0f32..1.0],
                    s * r * c,
                ),
                Just([s, r, c]),
            )
        })
    }

    proptest! {
        #[test]
        fn pq_respects_bound((data, shape) in arb_array(), dims in 1u8..=3,
                             eps in prop_oneof![Just(90.0), Just(0.01), 1e-3f64..100.0]) {
            let codec = pq(eps, dims);
            let bytes = encode(&codec, &data, &shape).unwrap();
            let out = decode(&codec, &bytes, &shape).unwrap();
            for (a, b) in data.iter().zip(&out) {
                prop_assert!((f64::from(*a) - f64::from(*b)).abs() <= eps);
            }
            // Quantized output is a fixed point.
            let again = decode(&codec, &encode(&codec, &out, &shape).unwrap(), &shape).unwrap();
            prop_assert_eq!(again, out);
        }

        #[test]
        fn pq_is_deterministic_across_threads((data, shape) in arb_array(), dims in 1u8..=3, threads in 2usize..5) {
            let codec = pq(0.5, dims);
            let mut a = Vec::new();
            let mut b = Vec::new();
            CodecWorkspace::new(1).encode_into(&codec, &data, &shape, &mut a).unwrap();
            CodecWorkspace::new(threads).encode_into(&codec, &data, &shape, &mut b).unwrap();
            prop_assert_eq!(&a, &b);
            let mut x = vec![0f32; data.len()];
            let mut y = vec![0f32; data.len()];
            CodecWorkspace::new(1).decode_into(&codec, &a, &shape, &mut x).unwrap();
            CodecWorkspace::new(threads).decode_into(&codec, &a, &shape, &mut y).unwrap();
            prop_assert_eq!(x, y);
        }

        #[test]
        fn lossless_codecs_are_identity(data in proptest::collection::vec(any::<f32>(), 0..300), level in 1u32..=9) {
            for codec in [CodecId::Raw, CodecId::Deflate { level }] {
                let bytes = encode(&codec, &data, &[data.len()]).unwrap();
                let out = decode(&codec, &bytes, &[data.len()]).unwrap();
                let a: Vec<u32> = data.iter().map(|v| v.to_bits()).collect();
                let b: Vec<u32> = out.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(a, b);
            }
        }
    }
}
