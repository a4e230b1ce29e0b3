//! Region-of-interest extraction and restoration.
//!
//! Each peak anchors a square `window × window` block taken from its own
//! panel. Positions that fall off the panel hold the fill value and are
//! never written back. Restoration overwrites the background with the
//! in-bounds block pixels, which makes ROI pixels bit-exact after any
//! lossy treatment of the background.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::{Dims4, EventBatch};
use crate::parallel;
use crate::peakfind::PeakList;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiSpec {
    /// Odd edge length of the preserved block.
    pub window: usize,
    /// Value stored for block positions outside the panel.
    pub fill: f32,
    /// Total ROI pixels above which the parallel path is taken.
    pub parallel_threshold: usize,
    pub threads: usize,
}

impl Default for RoiSpec {
    fn default() -> Self {
        RoiSpec {
            window: 17,
            fill: 0.0,
            parallel_threshold: 65_536,
            threads: 1,
        }
    }
}

impl RoiSpec {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::Config(format!(
                "ROI window must be odd and >= 1, got {}",
                self.window
            )));
        }
        if self.threads == 0 {
            return Err(Error::Config("ROI threads must be >= 1".into()));
        }
        Ok(())
    }

    pub fn block_len(&self) -> usize {
        self.window * self.window
    }

    fn use_parallel(&self, n_blocks: usize) -> bool {
        self.threads > 1 && n_blocks * self.block_len() > self.parallel_threshold
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Anchor {
    pub event: usize,
    pub panel: usize,
    pub row: usize,
    pub col: usize,
}

/// Blocks extracted around each anchor, in anchor order.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiBuffer {
    pub spec: RoiSpec,
    pub anchors: Vec<Anchor>,
    pub blocks: Vec<f32>,
}

impl RoiBuffer {
    pub fn block(&self, k: usize) -> &[f32] {
        let n = self.spec.block_len();
        &self.blocks[k * n..(k + 1) * n]
    }

    /// Size of the uncoded block payload.
    pub fn payload_bytes(&self) -> usize {
        self.blocks.len() * 4
    }
}

/// Narrow loop counters when every extent fits in 16 bits; the generated
/// code is otherwise identical.
macro_rules! block_copy {
    ($name:ident, $idx:ty) => {
        fn $name(
            src: &[f32],
            dims: Dims4,
            base: usize,
            anchor: (usize, usize),
            window: usize,
            fill: f32,
            dst: &mut [f32],
        ) {
            let w = window as $idx;
            let half = (window / 2) as isize;
            let (rows, cols) = (dims.rows as isize, dims.cols as isize);
            let c_start = anchor.1 as isize - half;
            let lo = (-c_start).clamp(0, window as isize) as usize;
            let hi = (cols - c_start).clamp(0, window as isize) as usize;
            let mut dr: $idx = 0;
            while dr < w {
                let r = anchor.0 as isize - half + dr as isize;
                let line = &mut dst[dr as usize * window..(dr as usize + 1) * window];
                if r < 0 || r >= rows || lo >= hi {
                    line.fill(fill);
                } else {
                    let row_start = base + r as usize * dims.cols;
                    let c0 = (c_start + lo as isize) as usize;
                    line[..lo].fill(fill);
                    line[lo..hi].copy_from_slice(&src[row_start + c0..row_start + c0 + (hi - lo)]);
                    line[hi..].fill(fill);
                }
                dr += 1;
            }
        }
    };
}

block_copy!(copy_block_narrow, u16);
block_copy!(copy_block_wide, usize);

fn fits_narrow(dims: Dims4, window: usize) -> bool {
    let limit = u16::MAX as usize;
    window < limit && dims.rows < limit && dims.cols < limit
}

/// Panel base offset. Merged 3D frames skip the panel term.
#[inline]
fn plane_base(dims: Dims4, a: &Anchor) -> usize {
    if dims.panels == 1 {
        a.event * dims.rows * dims.cols
    } else {
        (a.event * dims.panels + a.panel) * dims.rows * dims.cols
    }
}

fn check_anchor(dims: Dims4, a: &Anchor) -> Result<()> {
    if a.event >= dims.events || a.panel >= dims.panels || a.row >= dims.rows || a.col >= dims.cols
    {
        return Err(Error::Index(format!("anchor {a:?} outside batch {dims}")));
    }
    Ok(())
}

/// Copies the window around every peak into a contiguous block buffer.
pub fn extract(batch: &EventBatch, peaks: &PeakList, spec: &RoiSpec) -> Result<RoiBuffer> {
    let anchors: Vec<Anchor> = peaks
        .peaks()
        .iter()
        .map(|p| Anchor {
            event: p.event,
            panel: p.panel,
            row: p.row,
            col: p.col,
        })
        .collect();
    extract_anchors(batch.values(), batch.dims(), anchors, spec)
}

/// Extraction over a raw value slice; used by the pipeline on chunk views.
pub fn extract_anchors(
    values: &[f32],
    dims: Dims4,
    anchors: Vec<Anchor>,
    spec: &RoiSpec,
) -> Result<RoiBuffer> {
    let mut blocks = vec![0f32; anchors.len() * spec.block_len()];
    extract_into(values, dims, &anchors, spec, &mut blocks)?;
    Ok(RoiBuffer {
        spec: *spec,
        anchors,
        blocks,
    })
}

/// Fills `blocks` (exactly `anchors.len() * window²` long) without
/// allocating.
pub fn extract_into(
    values: &[f32],
    dims: Dims4,
    anchors: &[Anchor],
    spec: &RoiSpec,
    blocks: &mut [f32],
) -> Result<()> {
    spec.validate()?;
    if values.len() != dims.len() {
        return Err(Error::Geometry(format!(
            "{} values for dims {dims}",
            values.len()
        )));
    }
    if blocks.len() != anchors.len() * spec.block_len() {
        return Err(Error::Size {
            expected: (anchors.len() * spec.block_len()) as u64,
            actual: blocks.len() as u64,
            unit: "block elements",
        });
    }
    for a in anchors {
        check_anchor(dims, a)?;
    }
    if anchors.is_empty() {
        return Ok(());
    }
    let narrow = fits_narrow(dims, spec.window);
    let copy = |(a, dst): (&Anchor, &mut [f32])| {
        let base = plane_base(dims, a);
        if narrow {
            copy_block_narrow(values, dims, base, (a.row, a.col), spec.window, spec.fill, dst);
        } else {
            copy_block_wide(values, dims, base, (a.row, a.col), spec.window, spec.fill, dst);
        }
    };
    let n = spec.block_len();
    if spec.use_parallel(anchors.len()) {
        parallel::run(spec.threads, || {
            anchors
                .par_iter()
                .zip(blocks.par_chunks_mut(n))
                .for_each(copy)
        });
    } else {
        anchors.iter().zip(blocks.chunks_mut(n)).for_each(copy);
    }
    Ok(())
}

/// Writes the in-bounds pixels of every block over a copy of `background`.
pub fn restore(background: &EventBatch, rois: &RoiBuffer) -> Result<EventBatch> {
    let dims = background.dims();
    let mut values = background.values().to_vec();
    restore_into(&mut values, dims, rois)?;
    Ok(EventBatch::from_parts(
        dims,
        values,
        background.raw_byte_size(),
    ))
}

/// In-place restoration. Work is split by panel, so overlapping blocks
/// within a panel are always written by the same worker in anchor order.
pub fn restore_into(values: &mut [f32], dims: Dims4, rois: &RoiBuffer) -> Result<()> {
    rois.spec.validate()?;
    if values.len() != dims.len() {
        return Err(Error::Geometry(format!(
            "{} values for dims {dims}",
            values.len()
        )));
    }
    if rois.blocks.len() != rois.anchors.len() * rois.spec.block_len() {
        return Err(Error::Geometry("ROI block buffer length does not match anchors".into()));
    }
    for a in &rois.anchors {
        check_anchor(dims, a).map_err(|e| Error::Geometry(e.to_string()))?;
    }
    if rois
        .anchors
        .windows(2)
        .any(|w| (w[0].event, w[0].panel) > (w[1].event, w[1].panel))
    {
        return Err(Error::Geometry("ROI anchors must be sorted by event and panel".into()));
    }
    if rois.anchors.is_empty() {
        return Ok(());
    }
    let plane_len = dims.panel_len();
    let anchors = &rois.anchors;
    let write_plane = |(plane, dst): (usize, &mut [f32])| {
        let (e, p) = (plane / dims.panels, plane % dims.panels);
        let lo = anchors.partition_point(|a| (a.event, a.panel) < (e, p));
        let hi = anchors.partition_point(|a| (a.event, a.panel) <= (e, p));
        for k in lo..hi {
            write_block(dst, dims, &anchors[k], rois.spec.window, rois.block(k));
        }
    };
    if rois.spec.use_parallel(anchors.len()) {
        parallel::run(rois.spec.threads, || {
            values
                .par_chunks_mut(plane_len)
                .enumerate()
                .for_each(write_plane)
        });
    } else {
        values.chunks_mut(plane_len).enumerate().for_each(write_plane);
    }
    Ok(())
}

fn write_block(plane: &mut [f32], dims: Dims4, a: &Anchor, window: usize, block: &[f32]) {
    let half = (window / 2) as isize;
    let (rows, cols) = (dims.rows as isize, dims.cols as isize);
    let c_start = a.col as isize - half;
    let lo = (-c_start).clamp(0, window as isize) as usize;
    let hi = (cols - c_start).clamp(0, window as isize) as usize;
    if lo >= hi {
        return;
    }
    for dr in 0..window {
        let r = a.row as isize - half + dr as isize;
        if r < 0 || r >= rows {
            continue;
        }
        let start = r as usize * dims.cols + (c_start + lo as isize) as usize;
        plane[start..start + (hi - lo)].copy_from_slice(&block[dr * window + lo..dr * window + hi]);
    }
}

/// Axis-aligned box addressing the trailing `rank` axes of a batch; any
/// leading axes are spanned in full.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperRect {
    lower: Vec<usize>,
    upper: Vec<usize>,
}

impl HyperRect {
    pub fn new(lower: Vec<usize>, upper: Vec<usize>) -> Result<Self> {
        if lower.is_empty() || lower.len() > 4 || lower.len() != upper.len() {
            return Err(Error::Config(format!(
                "hyper-rectangle rank must be 1..=4 with matching bounds, got {} / {}",
                lower.len(),
                upper.len()
            )));
        }
        if lower.iter().zip(&upper).any(|(l, u)| l >= u) {
            return Err(Error::Config(format!(
                "hyper-rectangle needs lower < upper on every axis: {lower:?} .. {upper:?}"
            )));
        }
        Ok(HyperRect { lower, upper })
    }

    pub fn rank(&self) -> usize {
        self.lower.len()
    }

    /// Full-rank bounds clamped to `dims`, or `None` if nothing remains.
    fn clamp(&self, dims: Dims4) -> Option<([usize; 4], [usize; 4])> {
        let ext = [dims.events, dims.panels, dims.rows, dims.cols];
        let mut lo = [0usize; 4];
        let mut hi = ext;
        let skip = 4 - self.rank();
        for k in 0..self.rank() {
            lo[skip + k] = self.lower[k].min(ext[skip + k]);
            hi[skip + k] = self.upper[k].min(ext[skip + k]);
        }
        (0..4).all(|a| lo[a] < hi[a]).then_some((lo, hi))
    }
}

/// Concatenated rect contents plus the clamped bounds they came from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RectPayload {
    pub manifest: Vec<([usize; 4], [usize; 4])>,
    pub values: Vec<f32>,
    /// Rects dropped because clamping left them empty.
    pub skipped: usize,
}

impl RectPayload {
    /// `u32 count`, then four `(lower, upper)` u32 pairs per rect.
    pub fn manifest_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(4 + self.manifest.len() * 32);
        out.extend_from_slice(&to_u32(self.manifest.len())?.to_le_bytes());
        for (lo, hi) in &self.manifest {
            for a in 0..4 {
                out.extend_from_slice(&to_u32(lo[a])?.to_le_bytes());
                out.extend_from_slice(&to_u32(hi[a])?.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn parse_manifest(bytes: &[u8]) -> Result<Vec<([usize; 4], [usize; 4])>> {
        let word = |i: usize| -> Result<usize> {
            bytes
                .get(4 * i..4 * i + 4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
                .ok_or_else(|| Error::corrupt("rect manifest", "truncated"))
        };
        let n = word(0)?;
        if bytes.len() != 4 + 32 * n {
            return Err(Error::corrupt(
                "rect manifest",
                format!("{} bytes for {n} rects", bytes.len()),
            ));
        }
        let mut out = Vec::with_capacity(n);
        for r in 0..n {
            let mut lo = [0; 4];
            let mut hi = [0; 4];
            for a in 0..4 {
                lo[a] = word(1 + r * 8 + 2 * a)?;
                hi[a] = word(2 + r * 8 + 2 * a)?;
            }
            out.push((lo, hi));
        }
        Ok(out)
    }
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Config(format!("index {v} does not fit in u32")))
}

fn for_each_rect_row(
    dims: Dims4,
    (lo, hi): &([usize; 4], [usize; 4]),
    mut f: impl FnMut(std::ops::Range<usize>),
) {
    for e in lo[0]..hi[0] {
        for p in lo[1]..hi[1] {
            for r in lo[2]..hi[2] {
                let start = dims.offset(e, p, r, lo[3]);
                f(start..start + (hi[3] - lo[3]));
            }
        }
    }
}

/// Copies each clamped rect in row-major order; empty rects are skipped.
pub fn extract_rects(batch: &EventBatch, rects: &[HyperRect]) -> RectPayload {
    let dims = batch.dims();
    let mut payload = RectPayload::default();
    for rect in rects {
        match rect.clamp(dims) {
            Some(bounds) => {
                for_each_rect_row(dims, &bounds, |range| {
                    payload.values.extend_from_slice(&batch.values()[range])
                });
                payload.manifest.push(bounds);
            }
            None => payload.skipped += 1,
        }
    }
    if payload.skipped > 0 {
        log::warn!("{} hyper-rectangles empty after clamping", payload.skipped);
    }
    payload
}

/// Inverse of [`extract_rects`] onto `target`.
pub fn restore_rects(target: &EventBatch, payload: &RectPayload) -> Result<EventBatch> {
    let dims = target.dims();
    let mut values = target.values().to_vec();
    let mut cursor = 0usize;
    for (lo, hi) in &payload.manifest {
        if (0..4).any(|a| lo[a] >= hi[a])
            || hi[0] > dims.events
            || hi[1] > dims.panels
            || hi[2] > dims.rows
            || hi[3] > dims.cols
        {
            return Err(Error::Geometry(format!(
                "rect {lo:?}..{hi:?} outside target {dims}"
            )));
        }
        let need: usize = (0..4).map(|a| hi[a] - lo[a]).product();
        if cursor + need > payload.values.len() {
            return Err(Error::Geometry("rect payload shorter than its manifest".into()));
        }
        for_each_rect_row(dims, &(*lo, *hi), |range| {
            let n = range.len();
            values[range].copy_from_slice(&payload.values[cursor..cursor + n]);
            cursor += n;
        });
    }
    if cursor != payload.values.len() {
        return Err(Error::Geometry("rect payload longer than its manifest".into()));
    }
    Ok(EventBatch::from_parts(dims, values, target.raw_byte_size()))
}
