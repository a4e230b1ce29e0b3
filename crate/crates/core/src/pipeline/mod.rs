//! The ROIBIN compressor: lossless ROI blocks around peaks plus a binned,
//! lossily coded background, chunked over events.

mod container;

pub use container::{ChunkEntry, CompressedContainer, ContainerHeader, MAGIC, VERSION};

use std::ops::Range;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binning::{self, BinSpec};
use crate::codec::{CodecId, CodecWorkspace};
use crate::error::{Error, Result};
use crate::frames::{Dims4, EventBatch};
use crate::parallel;
use crate::peakfind::PeakList;
use crate::roi::{self, Anchor, RoiBuffer, RoiSpec};

/// Thread counts per stage. `tasks` is the number of chunks processed
/// concurrently; `roi_codec > 1` overlaps ROI coding with the background
/// branch of each chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(default)]
pub struct StageThreads {
    pub tasks: usize,
    pub roi: usize,
    pub bin: usize,
    pub codec: usize,
    pub roi_codec: usize,
}

impl Default for StageThreads {
    fn default() -> Self {
        StageThreads {
            tasks: 1,
            roi: 1,
            bin: 1,
            codec: 1,
            roi_codec: 1,
        }
    }
}

impl StageThreads {
    pub fn uniform(n: usize) -> Self {
        StageThreads {
            tasks: n,
            roi: n,
            bin: n,
            codec: n,
            roi_codec: n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.tasks, self.roi, self.bin, self.codec, self.roi_codec];
        if all.contains(&0) {
            return Err(Error::Config(format!("thread counts must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoibinConfig {
    pub roi: RoiSpec,
    pub bin: BinSpec,
    pub background: CodecId,
    pub roi_codec: CodecId,
    pub chunk_events: usize,
    /// Overrides the `threads` fields of `roi` and `bin`.
    pub threads: StageThreads,
    /// Decode-side error statistics in the report; costs one debin per chunk.
    pub measure_errors: bool,
}

impl Default for RoibinConfig {
    fn default() -> Self {
        RoibinConfig {
            roi: RoiSpec::default(),
            bin: BinSpec::default(),
            background: CodecId::pq_absolute(90.0, 3),
            roi_codec: CodecId::Deflate { level: 6 },
            chunk_events: 16,
            threads: StageThreads::default(),
            measure_errors: true,
        }
    }
}

impl RoibinConfig {
    pub fn validate(&self) -> Result<()> {
        self.roi.validate()?;
        self.bin.validate()?;
        self.background.validate()?;
        self.roi_codec.validate()?;
        self.threads.validate()?;
        if !self.roi_codec.is_lossless() {
            return Err(Error::Config("the ROI codec must be raw or deflate".into()));
        }
        if self.chunk_events == 0 {
            return Err(Error::Config("chunk_events must be >= 1".into()));
        }
        Ok(())
    }

    fn roi_spec(&self) -> RoiSpec {
        RoiSpec {
            threads: self.threads.roi,
            ..self.roi
        }
    }

    fn bin_spec(&self) -> BinSpec {
        BinSpec {
            threads: self.threads.bin,
            ..self.bin
        }
    }
}

/// Cumulative per-stage wall time in seconds, summed over chunks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub roi: f64,
    pub roi_codec: f64,
    pub bin: f64,
    pub codec: f64,
    pub verify: f64,
    /// End-to-end wall time of the call.
    pub total: f64,
}

impl StageTimes {
    fn add(&mut self, other: &StageTimes) {
        self.roi += other.roi;
        self.roi_codec += other.roi_codec;
        self.bin += other.bin;
        self.codec += other.codec;
        self.verify += other.verify;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub compressed_bytes: u64,
    /// Two bytes per element of the compressed batch.
    pub raw_bytes: u64,
    /// `raw_bytes / compressed_bytes`; absent for an empty batch.
    pub cr: Option<f64>,
    pub chunks: usize,
    pub peaks: usize,
    pub roi_payload_bytes: u64,
    pub background_payload_bytes: u64,
    pub times: StageTimes,
    pub threads: StageThreads,
    /// Largest resolved absolute bound over all chunks (lossy codecs).
    pub error_bound: Option<f64>,
    pub max_binned_error: Option<f64>,
    pub max_raw_error: Option<f64>,
}

/// Contiguous event ranges of at most `chunk_events` events.
pub fn chunk_ranges(events: usize, chunk_events: usize) -> impl Iterator<Item = Range<usize>> {
    let step = chunk_events.max(1);
    (0..events)
        .step_by(step)
        .map(move |s| s..(s + step).min(events))
}

/// Event-range views over a batch.
pub fn chunk_iter(
    batch: &EventBatch,
    chunk_events: usize,
) -> impl Iterator<Item = (Range<usize>, &[f32])> {
    chunk_ranges(batch.dims().events, chunk_events).map(move |r| {
        let v = batch.events(r.start, r.end);
        (r, v)
    })
}

/// Reusable per-task buffers.
#[derive(Default)]
struct TaskScratch {
    codec: CodecWorkspace,
    roi_codec: CodecWorkspace,
    rois: Option<RoiBuffer>,
    binned: Vec<f32>,
    full: Vec<f32>,
}

struct ChunkOutput {
    roi: Vec<u8>,
    background: Vec<u8>,
    eps: Option<f64>,
    max_binned_error: f64,
    max_raw_error: f64,
    times: StageTimes,
}

fn chunk_anchors(peaks: &PeakList, range: &Range<usize>, anchors: &mut Vec<Anchor>) {
    anchors.clear();
    anchors.extend(
        peaks.peaks()[peaks.event_range(range.start, range.end)]
            .iter()
            .map(|p| Anchor {
                event: p.event - range.start,
                panel: p.panel,
                row: p.row,
                col: p.col,
            }),
    );
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (f64::from(*x) - f64::from(*y)).abs())
        .fold(0.0, f64::max)
}

fn shape_of(d: Dims4) -> [usize; 4] {
    [d.events, d.panels, d.rows, d.cols]
}

fn encode_roi(ws: &mut CodecWorkspace, codec: &CodecId, rois: &RoiBuffer) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(4 + rois.blocks.len());
    out.extend_from_slice(&(rois.anchors.len() as u32).to_le_bytes());
    ws.encode_into(codec, &rois.blocks, &[rois.blocks.len()], &mut out)?;
    Ok(out)
}

fn encode_chunk(
    batch: &EventBatch,
    peaks: &PeakList,
    range: &Range<usize>,
    cfg: &RoibinConfig,
    s: &mut TaskScratch,
) -> Result<ChunkOutput> {
    let mut times = StageTimes::default();
    let cdims = batch.dims().with_events(range.len());
    let values = batch.events(range.start, range.end);
    let roi_spec = cfg.roi_spec();
    let bin_spec = cfg.bin_spec();

    let t = Instant::now();
    let TaskScratch {
        codec,
        roi_codec,
        rois,
        binned,
        full,
    } = s;
    let rb = rois.get_or_insert_with(|| RoiBuffer {
        spec: roi_spec,
        anchors: Vec::new(),
        blocks: Vec::new(),
    });
    rb.spec = roi_spec;
    chunk_anchors(peaks, range, &mut rb.anchors);
    rb.blocks.resize(rb.anchors.len() * roi_spec.block_len(), 0.0);
    roi::extract_into(values, cdims, &rb.anchors, &roi_spec, &mut rb.blocks)?;
    times.roi = t.elapsed().as_secs_f64();

    codec.set_threads(cfg.threads.codec);
    let bdims = bin_spec.binned_dims(cdims);
    let rb_ref: &RoiBuffer = rb;
    let mut roi_branch = || {
        let t = Instant::now();
        encode_roi(roi_codec, &cfg.roi_codec, rb_ref).map(|b| (b, t.elapsed()))
    };
    let mut background_branch = || -> Result<(Vec<u8>, Option<f64>, Duration, Duration)> {
        let t = Instant::now();
        binned.resize(bdims.len(), 0.0);
        binning::bin_into(values, cdims, &bin_spec, binned)?;
        let bin_time = t.elapsed();
        let t = Instant::now();
        let mut out = Vec::new();
        let eps = codec.encode_into(&cfg.background, binned, &shape_of(bdims), &mut out)?;
        Ok((out, eps, bin_time, t.elapsed()))
    };
    let (roi_res, bg_res) = if cfg.threads.roi_codec > 1 {
        parallel::run(2, || rayon::join(roi_branch, background_branch))
    } else {
        (roi_branch(), background_branch())
    };
    let (roi_bytes, roi_time) = roi_res?;
    let (bg_bytes, eps, bin_time, codec_time) = bg_res?;
    times.roi_codec = roi_time.as_secs_f64();
    times.bin = bin_time.as_secs_f64();
    times.codec = codec_time.as_secs_f64();

    let (mut max_binned_error, mut max_raw_error) = (0.0, 0.0);
    if cfg.measure_errors {
        let t = Instant::now();
        let recon = if cfg.background.is_lossless() {
            &binned[..]
        } else {
            codec.last_reconstruction()
        };
        max_binned_error = max_abs_diff(binned, recon);
        full.resize(cdims.len(), 0.0);
        binning::debin_into(recon, cdims, &bin_spec, full)?;
        roi::restore_into(full, cdims, rb)?;
        max_raw_error = max_abs_diff(values, full);
        times.verify = t.elapsed().as_secs_f64();
    }
    Ok(ChunkOutput {
        roi: roi_bytes,
        background: bg_bytes,
        eps,
        max_binned_error,
        max_raw_error,
        times,
    })
}

fn check_peaks(batch: &EventBatch, peaks: &PeakList) -> Result<()> {
    let d = batch.dims();
    if let Some(p) = peaks.peaks().iter().find(|p| {
        p.event >= d.events || p.panel >= d.panels || p.row >= d.rows || p.col >= d.cols
    }) {
        return Err(Error::Index(format!("peak {:?} outside batch {d}", p.key())));
    }
    Ok(())
}

/// Runs `f` over the chunk indices, `tasks` at a time, keeping chunk order
/// and attaching the chunk index to any error.
fn for_chunks<T: Send>(
    chunks: usize,
    tasks: usize,
    f: impl Fn(usize, &mut TaskScratch) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let tag = |k: usize, r: Result<T>| {
        r.map_err(|e| Error::Chunk {
            chunk: k,
            source: Box::new(e),
        })
    };
    if tasks > 1 && chunks > 1 {
        parallel::run(tasks, || {
            (0..chunks)
                .into_par_iter()
                .map_init(TaskScratch::default, |s, k| tag(k, f(k, s)))
                .collect()
        })
    } else {
        let mut s = TaskScratch::default();
        (0..chunks).map(|k| tag(k, f(k, &mut s))).collect()
    }
}

/// Compresses a batch given its peaks.
pub fn compress(
    batch: &EventBatch,
    peaks: &PeakList,
    cfg: &RoibinConfig,
) -> Result<(CompressedContainer, CompressionReport)> {
    let start = Instant::now();
    cfg.validate()?;
    check_peaks(batch, peaks)?;
    let dims = batch.dims();
    let ranges: Vec<Range<usize>> = chunk_ranges(dims.events, cfg.chunk_events).collect();
    let outputs = for_chunks(ranges.len(), cfg.threads.tasks, |k, s| {
        encode_chunk(batch, peaks, &ranges[k], cfg, s)
    })?;

    let header = ContainerHeader {
        dims,
        chunk_events: cfg.chunk_events,
        roi_window: cfg.roi.window,
        roi_fill: cfg.roi.fill,
        bin_rows: cfg.bin.factor_rows,
        bin_cols: cfg.bin.factor_cols,
        background: cfg.background,
        roi_codec: cfg.roi_codec,
        raw_byte_size: batch.raw_byte_size(),
    };
    let mut times = StageTimes::default();
    let mut error_bound: Option<f64> = None;
    let (mut max_binned, mut max_raw) = (0.0f64, 0.0f64);
    let mut payloads = Vec::with_capacity(outputs.len());
    for o in outputs {
        times.add(&o.times);
        if let Some(e) = o.eps {
            error_bound = Some(error_bound.map_or(e, |b| b.max(e)));
        }
        max_binned = max_binned.max(o.max_binned_error);
        max_raw = max_raw.max(o.max_raw_error);
        payloads.push((o.roi, o.background));
    }
    let roi_payload_bytes = payloads.iter().map(|p| p.0.len() as u64).sum();
    let background_payload_bytes = payloads.iter().map(|p| p.1.len() as u64).sum();
    let container = CompressedContainer::assemble(header, peaks.clone(), &payloads)?;
    times.total = start.elapsed().as_secs_f64();

    let raw_bytes = 2 * dims.len() as u64;
    let compressed_bytes = container.len() as u64;
    let measured = cfg.measure_errors && dims.events > 0;
    let report = CompressionReport {
        compressed_bytes,
        raw_bytes,
        cr: (raw_bytes > 0).then(|| raw_bytes as f64 / compressed_bytes as f64),
        chunks: ranges.len(),
        peaks: peaks.len(),
        roi_payload_bytes,
        background_payload_bytes,
        times,
        threads: cfg.threads,
        error_bound,
        max_binned_error: measured.then_some(max_binned),
        max_raw_error: measured.then_some(max_raw),
    };
    Ok((container, report))
}

fn decode_chunk(
    c: &CompressedContainer,
    k: usize,
    threads: &StageThreads,
    s: &mut TaskScratch,
    out: &mut [f32],
) -> Result<()> {
    let h = c.header();
    let range = h.chunk_range(k);
    let cdims = h.dims.with_events(range.len());
    let bin_spec = BinSpec {
        factor_rows: h.bin_rows,
        factor_cols: h.bin_cols,
        threads: threads.bin,
    };
    let roi_spec = RoiSpec {
        window: h.roi_window,
        fill: h.roi_fill,
        threads: threads.roi,
        ..RoiSpec::default()
    };
    let bdims = bin_spec.binned_dims(cdims);

    let bg = c.background_payload(k)?;
    let roi_bytes = c.roi_payload(k)?;
    s.codec.set_threads(threads.codec);
    s.binned.resize(bdims.len(), 0.0);
    s.codec
        .decode_into(&h.background, bg, &shape_of(bdims), &mut s.binned)?;
    binning::debin_into(&s.binned, cdims, &bin_spec, out)?;

    let TaskScratch {
        roi_codec, rois, ..
    } = s;
    let rb = {
        let rb = rois.get_or_insert_with(|| RoiBuffer {
            spec: roi_spec,
            anchors: Vec::new(),
            blocks: Vec::new(),
        });
        rb.spec = roi_spec;
        rb
    };
    chunk_anchors(c.peaks(), &range, &mut rb.anchors);
    if roi_bytes.len() < 4
        || u32::from_le_bytes(roi_bytes[..4].try_into().unwrap()) as usize != rb.anchors.len()
    {
        return Err(Error::corrupt(
            "roi payload",
            "block count disagrees with the peak table",
        ));
    }
    let n = rb.anchors.len() * roi_spec.block_len();
    rb.blocks.resize(n, 0.0);
    roi_codec.decode_into(&h.roi_codec, &roi_bytes[4..], &[n], &mut rb.blocks)?;
    roi::restore_into(out, cdims, rb)
}

/// Reconstructs the full batch.
pub fn decompress(container: &CompressedContainer) -> Result<EventBatch> {
    decompress_with(container, &StageThreads::default())
}

pub fn decompress_with(c: &CompressedContainer, threads: &StageThreads) -> Result<EventBatch> {
    threads.validate()?;
    let h = *c.header();
    let mut values = vec![0f32; h.dims.len()];
    let chunk_len = h.chunk_events * h.dims.event_len();
    if !values.is_empty() {
        let slots: Vec<std::sync::Mutex<&mut [f32]>> = values
            .chunks_mut(chunk_len)
            .map(std::sync::Mutex::new)
            .collect();
        for_chunks(slots.len(), threads.tasks, |k, s| {
            let mut slot = slots[k].lock().unwrap();
            decode_chunk(c, k, threads, s, &mut slot)
        })?;
    }
    Ok(EventBatch::from_parts(h.dims, values, h.raw_byte_size))
}

/// Decodes only the chunk holding `event`.
pub fn decompress_event(c: &CompressedContainer, event: usize) -> Result<EventBatch> {
    let h = c.header();
    if event >= h.dims.events {
        return Err(Error::Index(format!(
            "event {event} of {}",
            h.dims.events
        )));
    }
    let k = event / h.chunk_events;
    let range = h.chunk_range(k);
    let cdims = h.dims.with_events(range.len());
    let mut chunk = vec![0f32; cdims.len()];
    let mut s = TaskScratch::default();
    decode_chunk(c, k, &StageThreads::default(), &mut s, &mut chunk).map_err(|e| {
        Error::Chunk {
            chunk: k,
            source: Box::new(e),
        }
    })?;
    let el = h.dims.event_len();
    let local = event - range.start;
    let values = chunk[local * el..(local + 1) * el].to_vec();
    let raw = h.raw_byte_size / h.dims.events as u64;
    Ok(EventBatch::from_parts(h.dims.with_events(1), values, raw))
}
