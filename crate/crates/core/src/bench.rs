//! Synthetic diffraction frames and the grid-search and throughput
//! harnesses.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binning::BinSpec;
use crate::codec::CodecId;
use crate::error::{Error, Result};
use crate::frames::{Dims4, EventBatch};
use crate::peakfind::{Peak, PeakList};
use crate::pipeline::{self, RoibinConfig, StageThreads};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Noise {
    /// Normal with mean and variance equal to the background mean.
    Gaussian,
    /// Uniform on `[0, 2·mean)`.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub dims: Dims4,
    /// Inclusive range of spots per event.
    pub peaks_per_event: (usize, usize),
    /// Inclusive range of spot amplitudes (ADU above background).
    pub amplitude: (f32, f32),
    /// Gaussian spot width in pixels.
    pub sigma: f32,
    pub background_mean: f32,
    pub noise: Noise,
    /// Minimum Chebyshev distance between spots on one panel.
    pub min_separation: usize,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            dims: Dims4 {
                events: 4,
                panels: 1,
                rows: 256,
                cols: 256,
            },
            peaks_per_event: (10, 30),
            amplitude: (500.0, 5000.0),
            sigma: 1.5,
            background_mean: 20.0,
            noise: Noise::Gaussian,
            min_separation: 34,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate_geometry()?;
        let bad = |m: String| Err(Error::Generation(m));
        if self.peaks_per_event.0 > self.peaks_per_event.1 {
            return bad(format!("peak count range {:?} is empty", self.peaks_per_event));
        }
        let (lo, hi) = self.amplitude;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
            return bad(format!("amplitude range {:?} is invalid", self.amplitude));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("spot sigma {} is invalid", self.sigma));
        }
        if !(self.background_mean >= 0.0 && self.background_mean.is_finite()) {
            return bad(format!("background mean {} is invalid", self.background_mean));
        }
        Ok(())
    }
}

/// Places up to `n` spot centres per event with the requested separation.
fn place(params: &SynthParams, rng: &mut ChaCha8Rng, n: usize) -> Result<Vec<(usize, usize, usize)>> {
    let d = params.dims;
    let sep = params.min_separation;
    let mut spots: Vec<(usize, usize, usize)> = Vec::with_capacity(n);
    let attempts = 200 * (n + 1);
    let mut tries = 0;
    while spots.len() < n {
        tries += 1;
        if tries > attempts {
            return Err(Error::Generation(format!(
                "could not place {n} spots {sep} px apart on {} panels of {}x{}",
                d.panels, d.rows, d.cols
            )));
        }
        let p = rng.random_range(0..d.panels);
        let r = rng.random_range(0..d.rows);
        let c = rng.random_range(0..d.cols);
        let clear = spots
            .iter()
            .all(|&(q, y, x)| q != p || y.abs_diff(r).max(x.abs_diff(c)) >= sep);
        if clear {
            spots.push((p, r, c));
        }
    }
    spots.sort_unstable();
    Ok(spots)
}

fn fill_event(params: &SynthParams, event: usize, out: &mut [f32]) -> Result<Vec<Peak>> {
    let d = params.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(event as u64);
    let mu = params.background_mean;
    match params.noise {
        Noise::Gaussian => {
            let normal = Normal::new(mu, mu.sqrt())
                .map_err(|e| Error::Generation(format!("noise distribution: {e}")))?;
            out.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        }
        Noise::Uniform => out
            .iter_mut()
            .for_each(|v| *v = rng.random_range(0.0..=2.0 * mu)),
    }
    let (lo, hi) = params.peaks_per_event;
    let n = rng.random_range(lo..=hi);
    let spots = place(params, &mut rng, n)?;
    let s2 = 2.0 * params.sigma * params.sigma;
    let reach = (4.0 * params.sigma).ceil() as isize;
    let mut peaks = Vec::with_capacity(spots.len());
    for (p, r, c) in spots {
        let amp = rng.random_range(params.amplitude.0..=params.amplitude.1);
        let plane = &mut out[p * d.panel_len()..(p + 1) * d.panel_len()];
        for dr in -reach..=reach {
            for dc in -reach..=reach {
                let (y, x) = (r as isize + dr, c as isize + dc);
                if y < 0 || x < 0 || y >= d.rows as isize || x >= d.cols as isize {
                    continue;
                }
                let w = (-((dr * dr + dc * dc) as f32) / s2).exp();
                plane[y as usize * d.cols + x as usize] += amp * w;
            }
        }
        let mut peak = Peak::at(event, p, r, c);
        peak.total_intensity = f64::from(amp);
        peaks.push(peak);
    }
    Ok(peaks)
}

/// Noise field plus Gaussian spots; returns the batch and the planted
/// spot centres. Every event draws from its own seeded stream, so the
/// output does not depend on thread scheduling.
pub fn generate(params: &SynthParams) -> Result<(EventBatch, PeakList)> {
    params.validate()?;
    let d = params.dims;
    let mut values = vec![0f32; d.len()];
    let mut planted = Vec::new();
    if d.events > 0 {
        let per_event: Vec<Vec<Peak>> = values
            .par_chunks_mut(d.event_len())
            .enumerate()
            .map(|(e, ev)| fill_event(params, e, ev))
            .collect::<Result<_>>()?;
        planted = per_event.into_iter().flatten().collect();
    }
    let batch = EventBatch::new(d, values)?;
    let peaks = PeakList::new(planted, d)?;
    Ok((batch, peaks))
}

/// Planted spots that have a detection within `radius` pixels on the same
/// event and panel, divided by the number planted.
pub fn recall(planted: &PeakList, found: &PeakList, radius: usize) -> f64 {
    if planted.is_empty() {
        return 1.0;
    }
    let hit = planted
        .peaks()
        .iter()
        .filter(|p| {
            found.peaks()[found.event_range(p.event, p.event + 1)]
                .iter()
                .any(|f| {
                    f.panel == p.panel
                        && f.row.abs_diff(p.row) <= radius
                        && f.col.abs_diff(p.col) <= radius
                })
        })
        .count();
    hit as f64 / planted.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMode {
    /// Every combination of the three axes.
    Full,
    /// Each axis swept with the others held at `center`.
    Sweeps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchPlan {
    pub binning: Vec<usize>,
    pub tolerance: Vec<f64>,
    pub dims: Vec<u8>,
    pub mode: GridMode,
    /// `(binning, tolerance, dims)` held fixed by the other sweeps.
    pub center: (usize, f64, u8),
}

impl Default for GridSearchPlan {
    fn default() -> Self {
        GridSearchPlan {
            binning: vec![1, 2, 3],
            tolerance: vec![10.0, 45.0, 90.0],
            dims: vec![1, 2, 3],
            mode: GridMode::Sweeps,
            center: (2, 10.0, 3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    /// Which axis varies in this row (`binning`, `tolerance`, `dims`, or
    /// `full`).
    pub sweep: String,
    pub binning: usize,
    pub tolerance: f64,
    pub dims: u8,
    pub cr: f64,
    pub compressed_bytes: u64,
}

impl GridSearchPlan {
    pub fn validate(&self) -> Result<()> {
        if self.binning.is_empty() || self.tolerance.is_empty() || self.dims.is_empty() {
            return Err(Error::Config("grid axes must be nonempty".into()));
        }
        Ok(())
    }

    /// Cells in output order, labelled by sweep.
    pub fn cells(&self) -> Vec<(String, usize, f64, u8)> {
        let (cb, ct, cd) = self.center;
        match self.mode {
            GridMode::Full => {
                let mut v = Vec::new();
                for &b in &self.binning {
                    for &t in &self.tolerance {
                        for &d in &self.dims {
                            v.push(("full".to_string(), b, t, d));
                        }
                    }
                }
                v
            }
            GridMode::Sweeps => {
                let mut v: Vec<_> = self
                    .binning
                    .iter()
                    .map(|&b| ("binning".to_string(), b, ct, cd))
                    .collect();
                v.extend(self.tolerance.iter().map(|&t| ("tolerance".to_string(), cb, t, cd)));
                v.extend(self.dims.iter().map(|&d| ("dims".to_string(), cb, ct, d)));
                v
            }
        }
    }
}

/// Compresses once per distinct cell; everything but binning, tolerance
/// and dims comes from `base`.
pub fn run_grid(
    plan: &GridSearchPlan,
    data: &EventBatch,
    peaks: &PeakList,
    base: &RoibinConfig,
) -> Result<Vec<GridCell>> {
    plan.validate()?;
    let cells = plan.cells();
    let mut memo: Vec<((usize, u64, u8), (f64, u64))> = Vec::new();
    let mut out = Vec::with_capacity(cells.len());
    for (sweep, b, t, d) in cells {
        let key = (b, t.to_bits(), d);
        let (cr, bytes) = match memo.iter().find(|(k, _)| *k == key) {
            Some((_, v)) => *v,
            None => {
                let cfg = RoibinConfig {
                    bin: BinSpec::new(b, b),
                    background: CodecId::pq_absolute(t, d),
                    measure_errors: false,
                    ..*base
                };
                let (c, report) = pipeline::compress(data, peaks, &cfg)?;
                let cr = report
                    .cr
                    .ok_or_else(|| Error::UndefinedRatio("grid over an empty batch".into()))?;
                log::info!("grid bin {b}x{b} tol {t} dims {d}: cr {cr:.3}");
                memo.push((key, (cr, c.len() as u64)));
                (cr, c.len() as u64)
            }
        };
        out.push(GridCell {
            sweep,
            binning: b,
            tolerance: t,
            dims: d,
            cr,
            compressed_bytes: bytes,
        });
    }
    Ok(out)
}

pub fn write_grid_csv<W: Write>(cells: &[GridCell], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for c in cells {
        wtr.serialize(c)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputEntry {
    pub label: String,
    pub threads: StageThreads,
    pub cr: Option<f64>,
    pub raw_bytes: u64,
    pub compressed_bytes: u64,
    pub reps: usize,
    /// Median over repetitions, in raw uint16 GB per second.
    pub compress_gbps: f64,
    pub decompress_gbps: f64,
    pub compress_seconds: Vec<f64>,
    pub decompress_seconds: Vec<f64>,
    /// `(max - min) / median` of the compression times.
    pub dispersion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub tasks: usize,
    pub seconds: f64,
    pub gbps: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub entries: Vec<ThroughputEntry>,
    pub scaling: Vec<ScalingPoint>,
    pub cores: usize,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn gbps(bytes: u64, seconds: f64) -> f64 {
    bytes as f64 / 1e9 / seconds.max(1e-12)
}

/// Times compression and decompression of `data` under each
/// configuration, then sweeps task counts 1, 2, 4, … up to the core count
/// with the first configuration.
pub fn run_throughput(
    cfgs: &[(String, RoibinConfig)],
    data: &EventBatch,
    peaks: &PeakList,
    reps: usize,
) -> Result<ThroughputReport> {
    if reps < 3 {
        return Err(Error::Config(format!("throughput needs >= 3 repetitions, got {reps}")));
    }
    let raw = 2 * data.dims().len() as u64;
    let mut entries = Vec::with_capacity(cfgs.len());
    for (label, cfg) in cfgs {
        let cfg = RoibinConfig {
            measure_errors: false,
            ..*cfg
        };
        let mut reference: Option<Vec<u8>> = None;
        let mut ct = Vec::with_capacity(reps);
        let mut dt = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t = Instant::now();
            let (c, _) = pipeline::compress(data, peaks, &cfg)?;
            ct.push(t.elapsed().as_secs_f64());
            let t = Instant::now();
            pipeline::decompress_with(&c, &cfg.threads)?;
            dt.push(t.elapsed().as_secs_f64());
            match &reference {
                None => reference = Some(c.into_bytes()),
                Some(r) if r[..] != c.as_bytes()[..] => {
                    return Err(Error::Config(format!(
                        "configuration '{label}' produced differing containers across repetitions"
                    )))
                }
                Some(_) => {}
            }
        }
        let compressed = reference.map_or(0, |r| r.len() as u64);
        let mc = median(&ct);
        entries.push(ThroughputEntry {
            label: label.clone(),
            threads: cfg.threads,
            cr: (compressed > 0 && raw > 0).then(|| raw as f64 / compressed as f64),
            raw_bytes: raw,
            compressed_bytes: compressed,
            reps,
            compress_gbps: gbps(raw, mc),
            decompress_gbps: gbps(raw, median(&dt)),
            dispersion: (ct.iter().cloned().fold(f64::MIN, f64::max)
                - ct.iter().cloned().fold(f64::MAX, f64::min))
                / mc.max(1e-12),
            compress_seconds: ct,
            decompress_seconds: dt,
        });
    }

    let cores = crate::parallel::available_cores();
    let mut scaling = Vec::new();
    if let Some((_, base)) = cfgs.first() {
        let mut tasks = 1;
        let mut t1 = None;
        while tasks <= cores.max(1) {
            let cfg = RoibinConfig {
                threads: StageThreads { tasks, ..base.threads },
                measure_errors: false,
                ..*base
            };
            let times: Vec<f64> = (0..reps)
                .map(|_| {
                    let t = Instant::now();
                    pipeline::compress(data, peaks, &cfg).map(|_| t.elapsed().as_secs_f64())
                })
                .collect::<Result<_>>()?;
            let m = median(&times);
            let base_t = *t1.get_or_insert(m);
            scaling.push(ScalingPoint {
                tasks,
                seconds: m,
                gbps: gbps(raw, m),
                speedup: base_t / m.max(1e-12),
            });
            tasks *= 2;
        }
    }
    Ok(ThroughputReport {
        entries,
        scaling,
        cores,
    })
}

impl ThroughputReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([
            "label",
            "tasks",
            "roi",
            "bin",
            "codec",
            "roi_codec",
            "cr",
            "compress_gbps",
            "decompress_gbps",
            "reps",
            "dispersion",
        ])?;
        for e in &self.entries {
            let t = e.threads;
            wtr.write_record([
                e.label.clone(),
                t.tasks.to_string(),
                t.roi.to_string(),
                t.bin.to_string(),
                t.codec.to_string(),
                t.roi_codec.to_string(),
                e.cr.map_or_else(String::new, |c| format!("{c:.4}")),
                format!("{:.6}", e.compress_gbps),
                format!("{:.6}", e.decompress_gbps),
                e.reps.to_string(),
                format!("{:.4}", e.dispersion),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}
