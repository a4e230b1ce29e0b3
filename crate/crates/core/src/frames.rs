//! In-memory model for detector event batches.
//!
//! Frames are stored as a dense row-major 4D tensor
//! `events × panels × rows × cols` (columns fastest). Merged 3D layouts
//! are represented with `panels == 1`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extents of a batch of detector events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims4 {
    pub events: usize,
    pub panels: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Dims4 {
    /// Validated constructor. Every extent must be at least one.
    pub fn new(events: usize, panels: usize, rows: usize, cols: usize) -> Result<Self> {
        let dims = Dims4 {
            events,
            panels,
            rows,
            cols,
        };
        if events == 0 {
            return Err(Error::Geometry(format!("{dims}: events must be >= 1")));
        }
        dims.validate_geometry()?;
        Ok(dims)
    }

    /// Geometry check that tolerates zero events. Empty batches show up
    /// after non-hit rejection discards everything.
    pub fn validate_geometry(&self) -> Result<()> {
        if self.panels == 0 || self.rows == 0 || self.cols == 0 {
            return Err(Error::Geometry(format!(
                "{self}: panels, rows and cols must be >= 1"
            )));
        }
        self.checked_len()
            .map(|_| ())
            .ok_or_else(|| Error::Geometry(format!("{self}: element count overflows u64")))
    }

    fn checked_len(&self) -> Option<usize> {
        let n = (self.events as u64)
            .checked_mul(self.panels as u64)?
            .checked_mul(self.rows as u64)?
            .checked_mul(self.cols as u64)?;
        usize::try_from(n).ok()
    }

    pub fn len(&self) -> usize {
        self.events * self.panels * self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn panel_len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn event_len(&self) -> usize {
        self.panels * self.panel_len()
    }

    /// Same frame geometry with a different event count.
    pub fn with_events(&self, events: usize) -> Dims4 {
        Dims4 { events, ..*self }
    }

    #[inline]
    pub fn offset(&self, event: usize, panel: usize, row: usize, col: usize) -> usize {
        ((event * self.panels + panel) * self.rows + row) * self.cols + col
    }
}

impl std::fmt::Display for Dims4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.events, self.panels, self.rows, self.cols
        )
    }
}

impl std::str::FromStr for Dims4 {
    type Err = Error;

    /// Parses `E,P,R,C`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| Error::Config(format!("bad dims '{s}': {e}")))?;
        match parts.as_slice() {
            [e, p, r, c] => Dims4::new(*e, *p, *r, *c),
            _ => Err(Error::Config(format!(
                "bad dims '{s}': expected E,P,R,C"
            ))),
        }
    }
}

/// Raw detector readout, 16-bit unsigned per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawFrameSet {
    dims: Dims4,
    values: Vec<u16>,
}

impl RawFrameSet {
    pub fn new(dims: Dims4, values: Vec<u16>) -> Result<Self> {
        dims.validate_geometry()?;
        if values.len() != dims.len() {
            return Err(Error::Size {
                expected: dims.len() as u64,
                actual: values.len() as u64,
                unit: "elements",
            });
        }
        Ok(RawFrameSet { dims, values })
    }

    pub fn dims(&self) -> Dims4 {
        self.dims
    }

    pub fn values(&self) -> &[u16] {
        &self.values
    }

    pub fn byte_size(&self) -> u64 {
        2 * self.values.len() as u64
    }

    /// Little-endian serialization, the inverse of [`ingest_raw`].
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Decodes a headerless little-endian `u16` stream.
pub fn ingest_raw(bytes: &[u8], dims: Dims4) -> Result<RawFrameSet> {
    dims.validate_geometry()?;
    let expected = 2 * dims.len() as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::Size {
            expected,
            actual: bytes.len() as u64,
            unit: "bytes",
        });
    }
    let values = bytes
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    RawFrameSet::new(dims, values)
}

/// Per-pixel pedestal and gain for one event's panel geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    panels: usize,
    rows: usize,
    cols: usize,
    pedestal: Vec<f32>,
    gain: Vec<f32>,
}

impl Calibration {
    pub fn new(
        panels: usize,
        rows: usize,
        cols: usize,
        pedestal: Vec<f32>,
        gain: Vec<f32>,
    ) -> Result<Self> {
        let n = panels * rows * cols;
        if pedestal.len() != n || gain.len() != n {
            return Err(Error::Geometry(format!(
                "calibration arrays have {} / {} values, geometry ({panels}, {rows}, {cols}) needs {n}",
                pedestal.len(),
                gain.len()
            )));
        }
        if let Some(i) = gain.iter().position(|g| !g.is_finite() || *g == 0.0) {
            return Err(Error::Config(format!(
                "gain[{i}] = {} must be finite and nonzero",
                gain[i]
            )));
        }
        if let Some(i) = pedestal.iter().position(|p| !p.is_finite()) {
            return Err(Error::Config(format!("pedestal[{i}] is not finite")));
        }
        Ok(Calibration {
            panels,
            rows,
            cols,
            pedestal,
            gain,
        })
    }

    /// Zero pedestal, unit gain.
    pub fn identity(panels: usize, rows: usize, cols: usize) -> Self {
        let n = panels * rows * cols;
        Calibration {
            panels,
            rows,
            cols,
            pedestal: vec![0.0; n],
            gain: vec![1.0; n],
        }
    }

    pub fn pedestal(&self) -> &[f32] {
        &self.pedestal
    }

    pub fn gain(&self) -> &[f32] {
        &self.gain
    }
}

/// Calibrated float32 frames plus the raw byte size they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct EventBatch {
    dims: Dims4,
    values: Vec<f32>,
    raw_byte_size: u64,
}

impl EventBatch {
    /// Wraps already calibrated data. The raw size is taken to be two
    /// bytes per element, the uint16 convention every ratio is reported in.
    pub fn new(dims: Dims4, values: Vec<f32>) -> Result<Self> {
        let raw = 2 * values.len() as u64;
        Self::with_raw_size(dims, values, raw)
    }

    pub fn with_raw_size(dims: Dims4, values: Vec<f32>, raw_byte_size: u64) -> Result<Self> {
        dims.validate_geometry()?;
        if values.len() != dims.len() {
            return Err(Error::Size {
                expected: dims.len() as u64,
                actual: values.len() as u64,
                unit: "elements",
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Config(format!("value at index {i} is not finite")));
        }
        Ok(EventBatch {
            dims,
            values,
            raw_byte_size,
        })
    }

    /// Internal constructor for values that are finite by construction.
    pub(crate) fn from_parts(dims: Dims4, values: Vec<f32>, raw_byte_size: u64) -> Self {
        debug_assert_eq!(values.len(), dims.len());
        EventBatch {
            dims,
            values,
            raw_byte_size,
        }
    }

    pub fn empty_like(dims: Dims4) -> Self {
        EventBatch {
            dims: dims.with_events(0),
            values: Vec::new(),
            raw_byte_size: 0,
        }
    }

    pub fn dims(&self) -> Dims4 {
        self.dims
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn raw_byte_size(&self) -> u64 {
        self.raw_byte_size
    }

    pub fn event(&self, e: usize) -> &[f32] {
        let n = self.dims.event_len();
        &self.values[e * n..(e + 1) * n]
    }

    /// Events `[start, end)` as a slice.
    pub fn events(&self, start: usize, end: usize) -> &[f32] {
        let n = self.dims.event_len();
        &self.values[start * n..end * n]
    }

    pub fn panel(&self, e: usize, p: usize) -> &[f32] {
        let n = self.dims.panel_len();
        let start = (e * self.dims.panels + p) * n;
        &self.values[start..start + n]
    }

    #[inline]
    pub fn get(&self, e: usize, p: usize, r: usize, c: usize) -> f32 {
        self.values[self.dims.offset(e, p, r, c)]
    }

    /// Copies out a contiguous range of events as a new batch. The raw
    /// size is scaled with the event count.
    pub fn slice_events(&self, start: usize, end: usize) -> EventBatch {
        let values = self.events(start, end).to_vec();
        let raw = if self.dims.events == 0 {
            0
        } else {
            self.raw_byte_size * (end - start) as u64 / self.dims.events as u64
        };
        EventBatch::from_parts(self.dims.with_events(end - start), values, raw)
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Wraps calibrated float data with the uint16 raw-size convention.
pub fn identity_batch(values: Vec<f32>, dims: Dims4) -> Result<EventBatch> {
    EventBatch::new(dims, values)
}

/// Pedestal-subtract then gain-multiply, per pixel, for every event.
pub fn calibrate(raw: &RawFrameSet, cal: &Calibration) -> Result<EventBatch> {
    let d = raw.dims();
    if (cal.panels, cal.rows, cal.cols) != (d.panels, d.rows, d.cols) {
        return Err(Error::Geometry(format!(
            "calibration geometry ({}, {}, {}) does not match frames {d}",
            cal.panels, cal.rows, cal.cols
        )));
    }
    let frame = d.event_len();
    let mut out = vec![0f32; raw.values.len()];
    out.par_chunks_mut(frame.max(1))
        .zip(raw.values.par_chunks(frame.max(1)))
        .for_each(|(dst, src)| {
            for (((o, &r), &p), &g) in dst.iter_mut().zip(src).zip(&cal.pedestal).zip(&cal.gain) {
                *o = (f32::from(r) - p) * g;
            }
        });
    let batch = EventBatch::from_parts(d, out, raw.byte_size());
    if let Some(i) = batch.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Config(format!(
            "calibrated value at index {i} overflowed to a non-finite number"
        )));
    }
    Ok(batch)
}

/// Decodes a little-endian float32 stream.
pub fn f32_from_le_bytes(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Size {
            expected: (bytes.len() / 4 * 4) as u64,
            actual: bytes.len() as u64,
            unit: "bytes (multiple of 4)",
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}
