//! Bragg peak detection and non-hit rejection.
//!
//! A pixel is a peak candidate when it is the maximum of the square window
//! centred on it (ties go to the smallest `(row, col)`) and reaches
//! `max_threshold`. Its peak region is the 4-connected set of pixels above
//! `member_floor` reachable from it without leaving that window. The peak
//! is kept when the region size, its summed intensity and its
//! signal-to-noise ratio against the remaining window pixels all pass.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::{Dims4, EventBatch};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakFinderParams {
    /// Odd edge length of the local-maximum window.
    pub window: usize,
    /// Candidates need at least this value (ADU).
    pub max_threshold: f64,
    /// Region members must exceed this value (ADU).
    pub member_floor: f64,
    /// Summed region intensity must exceed this value (ADU).
    pub total_floor: f64,
    /// Signal-to-noise ratio must exceed this value.
    pub snr_floor: f64,
    pub min_pixels: usize,
    pub max_pixels: usize,
}

impl Default for PeakFinderParams {
    fn default() -> Self {
        PeakFinderParams {
            window: 7,
            max_threshold: 300.0,
            member_floor: 0.0,
            total_floor: 600.0,
            snr_floor: 10.0,
            min_pixels: 2,
            max_pixels: 30,
        }
    }
}

impl PeakFinderParams {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::Config(format!(
                "peak window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if self.min_pixels > self.max_pixels {
            return Err(Error::Config(format!(
                "min_pixels {} exceeds max_pixels {}",
                self.min_pixels, self.max_pixels
            )));
        }
        let finite = [
            self.max_threshold,
            self.member_floor,
            self.total_floor,
            self.snr_floor,
        ]
        .iter()
        .all(|t| t.is_finite());
        if !finite {
            return Err(Error::Config("peak thresholds must be finite".into()));
        }
        Ok(())
    }
}

/// One detected (or externally supplied) peak.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub event: usize,
    pub panel: usize,
    pub row: usize,
    pub col: usize,
    #[serde(rename = "total")]
    pub total_intensity: f64,
    #[serde(rename = "npix")]
    pub n_pixels: usize,
    pub snr: f64,
}

impl Peak {
    /// A bare coordinate with no statistics attached.
    pub fn at(event: usize, panel: usize, row: usize, col: usize) -> Self {
        Peak {
            event,
            panel,
            row,
            col,
            total_intensity: 0.0,
            n_pixels: 0,
            snr: 0.0,
        }
    }

    pub fn key(&self) -> (usize, usize, usize, usize) {
        (self.event, self.panel, self.row, self.col)
    }
}

/// Peaks sorted by `(event, panel, row, col)` with per-event counts.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PeakList {
    peaks: Vec<Peak>,
    per_event_counts: Vec<usize>,
}

impl PeakList {
    /// Sorts the peaks and checks them against the batch geometry.
    /// Duplicate coordinates are rejected.
    pub fn new(mut peaks: Vec<Peak>, dims: Dims4) -> Result<Self> {
        peaks.sort_by_key(Peak::key);
        if let Some(w) = peaks.windows(2).find(|w| w[0].key() == w[1].key()) {
            return Err(Error::Config(format!("duplicate peak at {:?}", w[0].key())));
        }
        let mut counts = vec![0usize; dims.events];
        for p in &peaks {
            if p.event >= dims.events
                || p.panel >= dims.panels
                || p.row >= dims.rows
                || p.col >= dims.cols
            {
                return Err(Error::Index(format!(
                    "peak {:?} outside batch {dims}",
                    p.key()
                )));
            }
            counts[p.event] += 1;
        }
        Ok(PeakList {
            peaks,
            per_event_counts: counts,
        })
    }

    pub fn empty(events: usize) -> Self {
        PeakList {
            peaks: Vec::new(),
            per_event_counts: vec![0; events],
        }
    }

    pub fn peaks(&self) -> &[Peak] {
        &self.peaks
    }

    pub fn per_event_counts(&self) -> &[usize] {
        &self.per_event_counts
    }

    pub fn len(&self) -> usize {
        self.peaks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.peaks.is_empty()
    }

    /// Index range into `peaks()` covering events `[start, end)`.
    pub fn event_range(&self, start: usize, end: usize) -> std::ops::Range<usize> {
        let lo = self.peaks.partition_point(|p| p.event < start);
        let hi = self.peaks.partition_point(|p| p.event < end);
        lo..hi
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for p in &self.peaks {
            wtr.serialize(p)?;
        }
        if self.peaks.is_empty() {
            wtr.write_record(["event", "panel", "row", "col", "total", "npix", "snr"])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads the `event,panel,row,col,total,npix,snr` CSV form.
    pub fn read_csv<R: Read>(r: R, dims: Dims4) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let peaks = rdr
            .deserialize::<Peak>()
            .collect::<std::result::Result<Vec<_>, _>>()?;
        PeakList::new(peaks, dims)
    }
}

/// Runs the detector over every panel of every event.
pub fn find_peaks(batch: &EventBatch, params: &PeakFinderParams) -> Result<PeakList> {
    params.validate()?;
    let dims = batch.dims();
    if params.window > dims.rows || params.window > dims.cols {
        return Err(Error::Geometry(format!(
            "peak window {} larger than panel {}x{}",
            params.window, dims.rows, dims.cols
        )));
    }
    let planes = dims.events * dims.panels;
    let per_plane: Vec<Vec<Peak>> = (0..planes)
        .into_par_iter()
        .map(|plane| {
            let (e, p) = (plane / dims.panels, plane % dims.panels);
            let mut scratch = Scratch::new(params.window);
            let mut found = Vec::new();
            scan_panel(
                batch.panel(e, p),
                dims.rows,
                dims.cols,
                params,
                &mut scratch,
                |row, col, total, npix, snr| {
                    found.push(Peak {
                        event: e,
                        panel: p,
                        row,
                        col,
                        total_intensity: total,
                        n_pixels: npix,
                        snr,
                    })
                },
            );
            found
        })
        .collect();
    let mut counts = vec![0usize; dims.events];
    let mut peaks = Vec::with_capacity(per_plane.iter().map(Vec::len).sum());
    for (plane, found) in per_plane.into_iter().enumerate() {
        counts[plane / dims.panels] += found.len();
        peaks.extend(found);
    }
    Ok(PeakList {
        peaks,
        per_event_counts: counts,
    })
}

struct Scratch {
    in_region: Vec<bool>,
    stack: Vec<(usize, usize)>,
}

impl Scratch {
    fn new(window: usize) -> Self {
        Scratch {
            in_region: vec![false; window * window],
            stack: Vec::with_capacity(window * window),
        }
    }
}

fn scan_panel(
    panel: &[f32],
    rows: usize,
    cols: usize,
    params: &PeakFinderParams,
    scratch: &mut Scratch,
    mut emit: impl FnMut(usize, usize, f64, usize, f64),
) {
    let half = params.window / 2;
    for r in 0..rows {
        for c in 0..cols {
            let v = panel[r * cols + c];
            if f64::from(v) < params.max_threshold {
                continue;
            }
            let (r0, r1) = (r.saturating_sub(half), (r + half + 1).min(rows));
            let (c0, c1) = (c.saturating_sub(half), (c + half + 1).min(cols));
            if !is_window_max(panel, cols, r, c, r0..r1, c0..c1) {
                continue;
            }
            if let Some((total, npix, snr)) =
                measure(panel, cols, r, c, (r0, r1, c0, c1), params, scratch)
            {
                emit(r, c, total, npix, snr);
            }
        }
    }
}

/// Strict maximum of the window, with ties won by the earliest pixel in
/// row-major order.
fn is_window_max(
    panel: &[f32],
    cols: usize,
    r: usize,
    c: usize,
    rows: std::ops::Range<usize>,
    cs: std::ops::Range<usize>,
) -> bool {
    let v = panel[r * cols + c];
    for rr in rows {
        let line = &panel[rr * cols..(rr + 1) * cols];
        for cc in cs.clone() {
            let u = line[cc];
            if u > v || (u == v && (rr, cc) < (r, c)) {
                return false;
            }
        }
    }
    true
}

fn measure(
    panel: &[f32],
    cols: usize,
    r: usize,
    c: usize,
    (r0, r1, c0, c1): (usize, usize, usize, usize),
    params: &PeakFinderParams,
    scratch: &mut Scratch,
) -> Option<(f64, usize, f64)> {
    let ww = c1 - c0;
    let local = |rr: usize, cc: usize| (rr - r0) * ww + (cc - c0);
    let mask = &mut scratch.in_region[..(r1 - r0) * ww];
    mask.fill(false);
    let stack = &mut scratch.stack;
    stack.clear();

    let above = |rr: usize, cc: usize| f64::from(panel[rr * cols + cc]) > params.member_floor;
    if above(r, c) {
        mask[local(r, c)] = true;
        stack.push((r, c));
    }
    let mut total = 0.0f64;
    let mut npix = 0usize;
    while let Some((rr, cc)) = stack.pop() {
        total += f64::from(panel[rr * cols + cc]);
        npix += 1;
        let mut visit = |nr: usize, nc: usize| {
            let k = local(nr, nc);
            if !mask[k] && above(nr, nc) {
                mask[k] = true;
                stack.push((nr, nc));
            }
        };
        if rr > r0 {
            visit(rr - 1, cc);
        }
        if rr + 1 < r1 {
            visit(rr + 1, cc);
        }
        if cc > c0 {
            visit(rr, cc - 1);
        }
        if cc + 1 < c1 {
            visit(rr, cc + 1);
        }
    }
    if npix < params.min_pixels || npix > params.max_pixels || total <= params.total_floor {
        return None;
    }

    // Background statistics over the window pixels outside the region,
    // summed in row-major order.
    let mut n_bg = 0usize;
    let mut sum = 0.0f64;
    for rr in r0..r1 {
        for cc in c0..c1 {
            if !mask[local(rr, cc)] {
                sum += f64::from(panel[rr * cols + cc]);
                n_bg += 1;
            }
        }
    }
    let (mean, sigma) = if n_bg == 0 {
        (0.0, 0.0)
    } else {
        let mean = sum / n_bg as f64;
        let mut ss = 0.0f64;
        for rr in r0..r1 {
            for cc in c0..c1 {
                if !mask[local(rr, cc)] {
                    let d = f64::from(panel[rr * cols + cc]) - mean;
                    ss += d * d;
                }
            }
        }
        (mean, (ss / n_bg as f64).sqrt())
    };
    let snr = if sigma == 0.0 {
        f64::INFINITY
    } else {
        let snr = (total - npix as f64 * mean) / (sigma * (npix as f64).sqrt());
        if snr <= params.snr_floor {
            return None;
        }
        snr
    };
    Some((total, npix, snr))
}

/// Result of dropping events with too few peaks.
#[derive(Debug, Clone)]
pub struct NhrOutcome {
    pub batch: EventBatch,
    pub peaks: PeakList,
    /// `kept[new_index] == original_index`.
    pub kept: Vec<usize>,
}

/// Keeps only events with at least `min_peaks` peaks.
pub fn non_hit_rejection(
    batch: &EventBatch,
    peaks: &PeakList,
    min_peaks: usize,
) -> Result<NhrOutcome> {
    let dims = batch.dims();
    if peaks.per_event_counts.len() != dims.events {
        return Err(Error::Geometry(format!(
            "peak list covers {} events, batch has {}",
            peaks.per_event_counts.len(),
            dims.events
        )));
    }
    let kept: Vec<usize> = (0..dims.events)
        .filter(|&e| peaks.per_event_counts[e] >= min_peaks)
        .collect();
    let mut remap = vec![usize::MAX; dims.events];
    for (new, &old) in kept.iter().enumerate() {
        remap[old] = new;
    }
    let mut values = Vec::with_capacity(kept.len() * dims.event_len());
    for &e in &kept {
        values.extend_from_slice(batch.event(e));
    }
    let raw = if dims.events == 0 {
        0
    } else {
        batch.raw_byte_size() * kept.len() as u64 / dims.events as u64
    };
    let new_dims = dims.with_events(kept.len());
    let new_peaks: Vec<Peak> = peaks
        .peaks
        .iter()
        .filter(|p| remap[p.event] != usize::MAX)
        .map(|p| Peak {
            event: remap[p.event],
            ..*p
        })
        .collect();
    let counts = kept.iter().map(|&e| peaks.per_event_counts[e]).collect();
    Ok(NhrOutcome {
        batch: EventBatch::from_parts(new_dims, values, raw),
        peaks: PeakList {
            peaks: new_peaks,
            per_event_counts: counts,
        },
        kept,
    })
}

/// Compression ratio attributable to non-hit rejection alone.
pub fn nhr_ratio(total_events: u64, kept_events: u64) -> Result<f64> {
    if kept_events == 0 {
        return Err(Error::UndefinedRatio(
            "no events kept by non-hit rejection".into(),
        ));
    }
    if kept_events > total_events {
        return Err(Error::Config(format!(
            "kept events {kept_events} exceed total {total_events}"
        )));
    }
    Ok(total_events as f64 / kept_events as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn panel_batch(rows: usize, cols: usize, vals: Vec<f32>) -> EventBatch {
        EventBatch::new(Dims4::new(1, 1, rows, cols).unwrap(), vals).unwrap()
    }

    fn blob_panel() -> EventBatch {
        let mut v = vec![0f32; 81];
        let blob = [[10.0, 20.0, 10.0], [20.0, 500.0, 20.0], [10.0, 20.0, 10.0]];
        for (dr, row) in blob.iter().enumerate() {
            for (dc, &x) in row.iter().enumerate() {
                v[(3 + dr) * 9 + 3 + dc] = x;
            }
        }
        panel_batch(9, 9, v)
    }

    #[test]
    fn centered_blob_is_one_peak() {
        let list = find_peaks(&blob_panel(), &PeakFinderParams::default()).unwrap();
        assert_eq!(list.len(), 1);
        let p = list.peaks()[0];
        assert_eq!((p.row, p.col), (4, 4));
        assert_eq!(p.total_intensity, 620.0);
        assert_eq!(p.n_pixels, 9);
        assert!(p.snr.is_infinite());
        assert_eq!(list.per_event_counts(), &[1]);
    }

    #[test]
    fn single_pixel_is_too_small() {
        let mut v = vec![0f32; 81];
        v[40] = 400.0;
        let list = find_peaks(&panel_batch(9, 9, v), &PeakFinderParams::default()).unwrap();
        assert!(list.is_empty());
    }

    #[test]
    fn zero_panel_has_no_peaks() {
        let list =
            find_peaks(&panel_batch(9, 9, vec![0.0; 81]), &PeakFinderParams::default()).unwrap();
        assert!(list.is_empty());
    }

    #[test]
    fn plateau_yields_single_candidate() {
        let mut v = vec![0f32; 81];
        for k in [39, 40, 41] {
            v[k] = 400.0;
        }
        let list = find_peaks(&panel_batch(9, 9, v), &PeakFinderParams::default()).unwrap();
        assert_eq!(list.len(), 1);
        assert_eq!((list.peaks()[0].row, list.peaks()[0].col), (4, 3));
        assert_eq!(list.peaks()[0].n_pixels, 3);
    }

    #[test]
    fn window_larger_than_panel() {
        let b = panel_batch(5, 5, vec![0.0; 25]);
        assert!(matches!(
            find_peaks(&b, &PeakFinderParams::default()),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn snr_threshold_applies_with_noisy_background() {
        // Checkerboard of negative values stays out of the region but gives
        // the background a large spread: snr is roughly 7.
        let mut v: Vec<f32> = (0..81)
            .map(|i| if (i / 9 + i % 9) % 2 == 0 { -500.0 } else { -10.0 })
            .collect();
        v[40] = 1000.0;
        v[41] = 900.0;
        let b = panel_batch(9, 9, v);
        assert!(find_peaks(&b, &PeakFinderParams::default()).unwrap().is_empty());
        let relaxed = PeakFinderParams {
            snr_floor: 5.0,
            ..Default::default()
        };
        let list = find_peaks(&b, &relaxed).unwrap();
        assert_eq!(list.len(), 1);
        let p = list.peaks()[0];
        assert_eq!(p.n_pixels, 2);
        assert!(p.snr > 5.0 && p.snr < 10.0, "snr {}", p.snr);
    }

    #[test]
    fn raising_threshold_never_adds_peaks() {
        let b = blob_panel();
        let mut params = PeakFinderParams::default();
        let base = find_peaks(&b, &params).unwrap().len();
        params.max_threshold = 600.0;
        assert!(find_peaks(&b, &params).unwrap().len() <= base);
    }

    #[test]
    fn nhr_filters_and_remaps() {
        let dims = Dims4::new(3, 1, 4, 4).unwrap();
        let batch = EventBatch::new(dims, (0..48).map(|x| x as f32).collect()).unwrap();
        let mut peaks = Vec::new();
        for (e, n) in [(0usize, 12usize), (1, 0), (2, 10)] {
            for k in 0..n {
                peaks.push(Peak::at(e, 0, k / 4, k % 4));
            }
        }
        let list = PeakList::new(peaks, dims).unwrap();
        let out = non_hit_rejection(&batch, &list, 10).unwrap();
        assert_eq!(out.kept, vec![0, 2]);
        assert_eq!(out.batch.dims().events, 2);
        assert_eq!(out.batch.event(1), batch.event(2));
        assert_eq!(out.batch.raw_byte_size(), 2 * 32);
        assert_eq!(out.peaks.per_event_counts(), &[12, 10]);
        assert!(out.peaks.peaks().iter().skip(12).all(|p| p.event == 1));

        let all = non_hit_rejection(&batch, &list, 0).unwrap();
        assert_eq!(all.kept, vec![0, 1, 2]);
        assert_eq!(all.batch, batch);

        let none = non_hit_rejection(&batch, &list, 100).unwrap();
        assert!(none.kept.is_empty());
        assert_eq!(none.batch.dims().events, 0);
        assert!(none.peaks.is_empty());
    }

    #[test]
    fn nhr_ratio_values() {
        assert!((nhr_ratio(4_326_979, 744_150).unwrap() - 5.81).abs() <= 0.01);
        assert!((nhr_ratio(248_024, 77_120).unwrap() - 3.22).abs() <= 0.01);
        assert_eq!(nhr_ratio(7, 7).unwrap(), 1.0);
        assert!(matches!(nhr_ratio(7, 0), Err(Error::UndefinedRatio(_))));
    }

    #[test]
    fn csv_roundtrip() {
        let list = find_peaks(&blob_panel(), &PeakFinderParams::default()).unwrap();
        let mut buf = Vec::new();
        list.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("event,panel,row,col,total,npix,snr\n"));
        let back = PeakList::read_csv(&buf[..], blob_panel().dims()).unwrap();
        assert_eq!(back, list);
    }

    #[test]
    fn csv_rejects_out_of_range() {
        let text = "event,panel,row,col,total,npix,snr\n0,0,20,0,1,1,1\n";
        let dims = Dims4::new(1, 1, 9, 9).unwrap();
        assert!(matches!(
            PeakList::read_csv(text.as_bytes(), dims),
            Err(Error::Index(_))
        ));
    }
}
