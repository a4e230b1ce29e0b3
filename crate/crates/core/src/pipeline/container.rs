//! The `.rbsz` container: a checksummed header, peak table and chunk
//! directory followed by the chunk payloads.
//!
//! ```text
//! header    "RBSZ" | u16 version | u64 × 4 dims | u64 chunk_events
//!           | u32 roi window | f32 roi fill | u32 bin rows | u32 bin cols
//!           | codec background | codec roi | u64 raw_byte_size | u32 crc
//! peaks     u64 count | count × (u32 event, u16 panel, u16 row, u16 col) | u32 crc
//! directory u64 chunks | chunks × (u64 roi off, u64 roi len, u32 roi crc,
//!                                  u64 bg off, u64 bg len, u32 bg crc) | u32 crc
//! payloads  per chunk: roi payload, background payload
//! codec     u8 tag | u8 level | u8 bound kind | f64 bound | u8 dims_mode
//! ```
//!
//! Payload offsets are relative to the start of the payload region and
//! must tile it exactly, in order.

use std::ops::Range;

use crate::codec::{BoundKind, CodecId, ErrorBound};
use crate::error::{Error, Result};
use crate::frames::Dims4;
use crate::peakfind::{Peak, PeakList};

pub const MAGIC: &[u8; 4] = b"RBSZ";
pub const VERSION: u16 = 1;

const CODEC_LEN: usize = 12;
const PEAK_LEN: usize = 10;
const ENTRY_LEN: usize = 40;

/// Scalar configuration recorded in the container header.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContainerHeader {
    pub dims: Dims4,
    pub chunk_events: usize,
    pub roi_window: usize,
    pub roi_fill: f32,
    pub bin_rows: usize,
    pub bin_cols: usize,
    pub background: CodecId,
    pub roi_codec: CodecId,
    pub raw_byte_size: u64,
}

impl ContainerHeader {
    pub fn chunk_count(&self) -> usize {
        self.dims.events.div_ceil(self.chunk_events)
    }

    pub fn chunk_range(&self, k: usize) -> Range<usize> {
        let start = k * self.chunk_events;
        start..(start + self.chunk_events).min(self.dims.events)
    }

    fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::corrupt("header", detail));
        if self.dims.validate_geometry().is_err() {
            return bad(format!("invalid dims {}", self.dims));
        }
        if self.chunk_events == 0 {
            return bad("chunk_events is 0".into());
        }
        if self.roi_window == 0 || self.roi_window % 2 == 0 {
            return bad(format!("ROI window {}", self.roi_window));
        }
        if self.bin_rows == 0 || self.bin_cols == 0 {
            return bad("zero bin factor".into());
        }
        if self.background.validate().is_err() || self.roi_codec.validate().is_err() {
            return bad("invalid codec parameters".into());
        }
        if !self.roi_codec.is_lossless() {
            return bad("lossy ROI codec".into());
        }
        Ok(())
    }
}

/// Location and checksums of one chunk's payloads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkEntry {
    pub roi_offset: u64,
    pub roi_len: u64,
    pub roi_crc: u32,
    pub bg_offset: u64,
    pub bg_len: u64,
    pub bg_crc: u32,
}

/// A parsed, validated container. Section checksums are verified on
/// construction; payload checksums when a chunk is read.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedContainer {
    header: ContainerHeader,
    peaks: PeakList,
    directory: Vec<ChunkEntry>,
    bytes: Vec<u8>,
    payload_start: usize,
}

fn put_codec(out: &mut Vec<u8>, codec: &CodecId) {
    let (tag, level, kind, value, dims) = match *codec {
        CodecId::Raw => (0u8, 0u8, 0u8, 0.0f64, 0u8),
        CodecId::Deflate { level } => (1, level as u8, 0, 0.0, 0),
        CodecId::Pq { bound, dims_mode } => {
            let kind = match bound.kind {
                BoundKind::Absolute => 0,
                BoundKind::ValueRangeRelative => 1,
            };
            (2, 0, kind, bound.value, dims_mode)
        }
    };
    out.extend_from_slice(&[tag, level, kind]);
    out.extend_from_slice(&value.to_le_bytes());
    out.push(dims);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::corrupt(self.section, "truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::corrupt(self.section, format!("value {v} too large")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    /// Checks the CRC32 of everything from `start` to the cursor.
    fn check_crc(&mut self, start: usize) -> Result<()> {
        let computed = crc32fast::hash(&self.buf[start..self.pos]);
        if self.u32()? != computed {
            return Err(Error::corrupt(self.section, "checksum mismatch"));
        }
        Ok(())
    }

    fn codec(&mut self) -> Result<CodecId> {
        let b = self.take(CODEC_LEN)?;
        let value = f64::from_le_bytes(b[3..11].try_into().unwrap());
        let codec = match (b[0], b[2]) {
            (0, _) => CodecId::Raw,
            (1, _) => CodecId::Deflate { level: b[1].into() },
            (2, 0) => CodecId::pq_absolute(value, b[11]),
            (2, 1) => CodecId::Pq {
                bound: ErrorBound::relative(value),
                dims_mode: b[11],
            },
            (tag, kind) => {
                return Err(Error::corrupt(
                    self.section,
                    format!("unknown codec tag {tag}/{kind}"),
                ))
            }
        };
        Ok(codec)
    }
}

impl CompressedContainer {
    /// Assembles a container from its parts. Payloads are `(roi, background)`
    /// pairs in chunk order.
    pub(crate) fn assemble(
        header: ContainerHeader,
        peaks: PeakList,
        payloads: &[(Vec<u8>, Vec<u8>)],
    ) -> Result<Self> {
        let d = header.dims;
        if d.events > u32::MAX as usize
            || d.panels > 1 << 16
            || d.rows > 1 << 16
            || d.cols > 1 << 16
        {
            return Err(Error::Geometry(format!(
                "dims {d} exceed the container's peak coordinate range"
            )));
        }
        let payload_len: usize = payloads.iter().map(|(r, b)| r.len() + b.len()).sum();
        let mut out = Vec::with_capacity(
            128 + peaks.len() * PEAK_LEN + payloads.len() * ENTRY_LEN + payload_len,
        );

        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [d.events, d.panels, d.rows, d.cols, header.chunk_events] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&(header.roi_window as u32).to_le_bytes());
        out.extend_from_slice(&header.roi_fill.to_le_bytes());
        out.extend_from_slice(&(header.bin_rows as u32).to_le_bytes());
        out.extend_from_slice(&(header.bin_cols as u32).to_le_bytes());
        put_codec(&mut out, &header.background);
        put_codec(&mut out, &header.roi_codec);
        out.extend_from_slice(&header.raw_byte_size.to_le_bytes());
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());

        let start = out.len();
        out.extend_from_slice(&(peaks.len() as u64).to_le_bytes());
        for p in peaks.peaks() {
            out.extend_from_slice(&(p.event as u32).to_le_bytes());
            out.extend_from_slice(&(p.panel as u16).to_le_bytes());
            out.extend_from_slice(&(p.row as u16).to_le_bytes());
            out.extend_from_slice(&(p.col as u16).to_le_bytes());
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());

        let start = out.len();
        let mut directory = Vec::with_capacity(payloads.len());
        let mut offset = 0u64;
        out.extend_from_slice(&(payloads.len() as u64).to_le_bytes());
        for (roi, bg) in payloads {
            let e = ChunkEntry {
                roi_offset: offset,
                roi_len: roi.len() as u64,
                roi_crc: crc32fast::hash(roi),
                bg_offset: offset + roi.len() as u64,
                bg_len: bg.len() as u64,
                bg_crc: crc32fast::hash(bg),
            };
            offset = e.bg_offset + e.bg_len;
            out.extend_from_slice(&e.roi_offset.to_le_bytes());
            out.extend_from_slice(&e.roi_len.to_le_bytes());
            out.extend_from_slice(&e.roi_crc.to_le_bytes());
            out.extend_from_slice(&e.bg_offset.to_le_bytes());
            out.extend_from_slice(&e.bg_len.to_le_bytes());
            out.extend_from_slice(&e.bg_crc.to_le_bytes());
            directory.push(e);
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());

        let payload_start = out.len();
        for (roi, bg) in payloads {
            out.extend_from_slice(roi);
            out.extend_from_slice(bg);
        }
        Ok(CompressedContainer {
            header,
            peaks,
            directory,
            bytes: out,
            payload_start,
        })
    }

    /// Parses and validates a serialized container.
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let mut r = Reader {
            buf: &bytes,
            pos: 0,
            section: "header",
        };
        if r.take(4)? != MAGIC {
            return Err(Error::corrupt("header", "bad magic"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: VERSION,
            });
        }
        let dims = Dims4 {
            events: r.usize()?,
            panels: r.usize()?,
            rows: r.usize()?,
            cols: r.usize()?,
        };
        let chunk_events = r.usize()?;
        let roi_window = r.u32()? as usize;
        let roi_fill = f32::from_bits(r.u32()?);
        let bin_rows = r.u32()? as usize;
        let bin_cols = r.u32()? as usize;
        let background = r.codec()?;
        let roi_codec = r.codec()?;
        let raw_byte_size = r.u64()?;
        r.check_crc(0)?;
        let header = ContainerHeader {
            dims,
            chunk_events,
            roi_window,
            roi_fill,
            bin_rows,
            bin_cols,
            background,
            roi_codec,
            raw_byte_size,
        };
        header.validate()?;

        r.section = "peak table";
        let start = r.pos;
        let count = r.usize()?;
        if count > r.remaining() / PEAK_LEN {
            return Err(Error::corrupt("peak table", "count exceeds section size"));
        }
        let mut peaks = Vec::with_capacity(count);
        for _ in 0..count {
            let event = r.u32()? as usize;
            let panel = r.u16()? as usize;
            let row = r.u16()? as usize;
            let col = r.u16()? as usize;
            peaks.push(Peak::at(event, panel, row, col));
        }
        r.check_crc(start)?;
        let sorted = peaks.windows(2).all(|w| w[0].key() < w[1].key());
        let peaks = PeakList::new(peaks, dims)
            .ok()
            .filter(|_| sorted)
            .ok_or_else(|| Error::corrupt("peak table", "peaks unsorted or out of range"))?;

        r.section = "directory";
        let start = r.pos;
        let chunks = r.usize()?;
        if chunks != header.chunk_count() || chunks > r.remaining() / ENTRY_LEN {
            return Err(Error::corrupt(
                "directory",
                format!("{chunks} chunks for {} events", dims.events),
            ));
        }
        let mut directory = Vec::with_capacity(chunks);
        for _ in 0..chunks {
            directory.push(ChunkEntry {
                roi_offset: r.u64()?,
                roi_len: r.u64()?,
                roi_crc: r.u32()?,
                bg_offset: r.u64()?,
                bg_len: r.u64()?,
                bg_crc: r.u32()?,
            });
        }
        r.check_crc(start)?;
        let payload_start = r.pos;
        let mut expected = 0u64;
        for e in &directory {
            let tiled = e.roi_offset == expected
                && e.roi_len > 0
                && e.bg_offset == e.roi_offset.saturating_add(e.roi_len)
                && e.bg_len > 0;
            if !tiled {
                return Err(Error::corrupt("directory", "payload offsets do not tile"));
            }
            expected = e.bg_offset.saturating_add(e.bg_len);
        }
        if expected != r.remaining() as u64 {
            return Err(Error::corrupt(
                "payload",
                format!(
                    "directory describes {expected} payload bytes, found {}",
                    r.remaining()
                ),
            ));
        }
        Ok(CompressedContainer {
            header,
            peaks,
            directory,
            bytes,
            payload_start,
        })
    }

    pub fn header(&self) -> &ContainerHeader {
        &self.header
    }

    pub fn peaks(&self) -> &PeakList {
        &self.peaks
    }

    pub fn directory(&self) -> &[ChunkEntry] {
        &self.directory
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    fn payload(&self, offset: u64, len: u64, crc: u32, section: &'static str) -> Result<&[u8]> {
        let start = self.payload_start + offset as usize;
        let data = &self.bytes[start..start + len as usize];
        if crc32fast::hash(data) != crc {
            return Err(Error::corrupt(section, "checksum mismatch"));
        }
        Ok(data)
    }

    /// Checksum-verified ROI payload of chunk `k`.
    pub fn roi_payload(&self, k: usize) -> Result<&[u8]> {
        let e = self.entry(k)?;
        self.payload(e.roi_offset, e.roi_len, e.roi_crc, "roi payload")
    }

    /// Checksum-verified background payload of chunk `k`.
    pub fn background_payload(&self, k: usize) -> Result<&[u8]> {
        let e = self.entry(k)?;
        self.payload(e.bg_offset, e.bg_len, e.bg_crc, "background payload")
    }

    fn entry(&self, k: usize) -> Result<ChunkEntry> {
        self.directory.get(k).copied().ok_or_else(|| {
            Error::Index(format!("chunk {k} of {}", self.directory.len()))
        })
    }
}
