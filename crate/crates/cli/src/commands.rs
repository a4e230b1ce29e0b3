//! Subcommand bodies.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use roibin::bench::{self, GridMode, GridSearchPlan, SynthParams};
use roibin::binning::BinSpec;
use roibin::codec::{self, CodecId};
use roibin::frames::{self, Calibration, Dims4, EventBatch};
use roibin::metrics::{self, MetricReport, PairedIntensities, Scale};
use roibin::peakfind::{self, PeakList};
use roibin::pipeline::{self, CompressedContainer, CompressionReport, RoibinConfig, StageThreads};
use roibin::tuner::{self, Axis, HostInfo, TuneBudget, TuneRecord, TuneSpace};

use crate::failure::Failure;
use crate::settings::{Effective, Layer};
use crate::{
    BenchArgs, CompressArgs, DecompressArgs, FrameArgs, GridArgs, MetricFormat, MetricsArgs,
    PipelineArgs, SampleFormat, SynthArgs, SynthParamArgs, TableFormat, TuneArgs,
};

const DEFAULT_SYNTH_DIMS: Dims4 = Dims4 {
    events: 16,
    panels: 1,
    rows: 512,
    cols: 512,
};

fn read_file(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| Failure::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, bytes).map_err(|e| Failure::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::io(path, e))
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("reports serialize");
    match path {
        Some(p) => write_file(p, format!("{text}\n").as_bytes()),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn ctx(path: &Path) -> String {
    path.display().to_string()
}

fn load_frames(a: &FrameArgs) -> Result<EventBatch, Failure> {
    let (Some(input), Some(dims)) = (&a.input, a.dims) else {
        return Err(Failure::Usage("--input and --dims are required".into()));
    };
    let bytes = read_file(input)?;
    let raw = frames::ingest_raw(&bytes, dims).map_err(|e| Failure::lib(&ctx(input), e))?;
    let cal = match (&a.pedestal, &a.gain) {
        (Some(p), Some(g)) => {
            let ped = frames::f32_from_le_bytes(&read_file(p)?).map_err(|e| Failure::lib(&ctx(p), e))?;
            let gain = frames::f32_from_le_bytes(&read_file(g)?).map_err(|e| Failure::lib(&ctx(g), e))?;
            Calibration::new(dims.panels, dims.rows, dims.cols, ped, gain)
                .map_err(|e| Failure::Data(format!("calibration: {e}")))?
        }
        _ => Calibration::identity(dims.panels, dims.rows, dims.cols),
    };
    frames::calibrate(&raw, &cal).map_err(|e| Failure::Data(format!("calibration: {e}")))
}

fn read_peaks(path: &Path, dims: Dims4) -> Result<PeakList, Failure> {
    let f = File::open(path).map_err(|e| Failure::io(path, e))?;
    PeakList::read_csv(BufReader::new(f), dims).map_err(|e| match e {
        roibin::Error::Io(_) => Failure::lib(&ctx(path), e),
        e => Failure::Data(format!("{}: {e}", path.display())),
    })
}

fn read_container(path: &Path) -> Result<CompressedContainer, Failure> {
    CompressedContainer::from_bytes(read_file(path)?).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Serialize)]
struct NhrSummary {
    min_peaks: usize,
    total_events: usize,
    kept_events: usize,
    /// Savings from dropped events; never folded into `cr`.
    ratio: Option<f64>,
}

struct Prepared {
    batch: EventBatch,
    peaks: PeakList,
    peaks_source: String,
    nhr: Option<NhrSummary>,
}

/// Peaks from the CSV, then the fallback, then the peak finder; followed
/// by non-hit rejection when configured.
fn prepare(
    batch: EventBatch,
    csv: Option<&Path>,
    fallback: Option<(PeakList, &str)>,
    eff: &Effective,
) -> Result<Prepared, Failure> {
    let (peaks, peaks_source) = match (csv, fallback) {
        (Some(p), _) => (read_peaks(p, batch.dims())?, format!("csv {}", p.display())),
        (None, Some((p, source))) => (p, source.to_string()),
        (None, None) => (
            peakfind::find_peaks(&batch, &eff.peakfind).map_err(|e| Failure::lib("peak finding", e))?,
            "peakfind".to_string(),
        ),
    };
    log::info!("{} peaks over {} events ({peaks_source})", peaks.len(), batch.dims().events);
    let Some(min) = eff.nhr else {
        return Ok(Prepared {
            batch,
            peaks,
            peaks_source,
            nhr: None,
        });
    };
    let out = peakfind::non_hit_rejection(&batch, &peaks, min).map_err(|e| Failure::lib("non-hit rejection", e))?;
    let total = batch.dims().events;
    let kept = out.kept.len();
    log::info!("non-hit rejection kept {kept} of {total} events");
    Ok(Prepared {
        batch: out.batch,
        peaks: out.peaks,
        peaks_source,
        nhr: Some(NhrSummary {
            min_peaks: min,
            total_events: total,
            kept_events: kept,
            ratio: peakfind::nhr_ratio(total as u64, kept as u64).ok(),
        }),
    })
}

/// Identifies what a tuning result was measured on, apart from threads.
fn config_key(dims: Dims4, cfg: &RoibinConfig) -> String {
    format!(
        "dims={},{},{},{};bin={}x{};background={};roi={}/{};window={};chunk={}",
        dims.events,
        dims.panels,
        dims.rows,
        dims.cols,
        cfg.bin.factor_rows,
        cfg.bin.factor_cols,
        cfg.background,
        cfg.roi_codec,
        cfg.roi.fill,
        cfg.roi.window,
        cfg.chunk_events
    )
}

#[derive(Serialize)]
struct CompressOutput<'a> {
    format_version: u16,
    command: &'static str,
    config: &'a Effective,
    input: String,
    peaks_source: &'a str,
    tuned_threads: Option<StageThreads>,
    nhr: Option<NhrSummary>,
    report: &'a CompressionReport,
}

pub fn compress(a: CompressArgs) -> Result<(), Failure> {
    let cfg_path = a.pipeline.config.as_deref();
    let mut eff = Layer::stack(&a.pipeline.layer, None, cfg_path)?.resolve()?;
    let (batch, stored, input) = match &a.container {
        Some(path) => {
            let c = read_container(path)?;
            let b = pipeline::decompress_with(&c, &eff.pipeline.threads)
                .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
            (b, Some(c.peaks().clone()), format!("container {}", path.display()))
        }
        None => {
            let b = load_frames(&a.frames)?;
            let input = a.frames.input.as_deref().map(ctx).unwrap_or_default();
            (b, None, format!("raw {input}"))
        }
    };
    let prep = prepare(
        batch,
        a.frames.peaks.as_deref(),
        stored.map(|p| (p, "container")),
        &eff,
    )?;

    let mut tuned = None;
    if let Some(path) = &a.tune_cache {
        if path.exists() {
            let rec = TuneRecord::load(path).map_err(|e| Failure::lib(&format!("tune cache {}", ctx(path)), e))?;
            let key = config_key(prep.batch.dims(), &eff.pipeline);
            if rec.reusable_for(&HostInfo::current(), &rec.space, &key) {
                log::info!("using tuned threads {:?}", rec.threads);
                tuned = Some(rec.threads);
                eff = Layer::stack(&a.pipeline.layer, tuned, cfg_path)?.resolve()?;
            } else {
                log::warn!("tune cache {} does not match this host or configuration; ignored", ctx(path));
            }
        } else {
            log::warn!("tune cache {} not found; run `roibin tune` first", ctx(path));
        }
    }

    let (container, report) = pipeline::compress(&prep.batch, &prep.peaks, &eff.pipeline)
        .map_err(|e| Failure::lib("compress", e))?;
    write_file(&a.out, container.as_bytes())?;
    match report.cr {
        Some(cr) => eprintln!("roibin: {} -> {} bytes, cr {cr:.3}", report.raw_bytes, report.compressed_bytes),
        None => eprintln!("roibin: empty batch, {} bytes", report.compressed_bytes),
    }
    let out = CompressOutput {
        format_version: pipeline::VERSION,
        command: "compress",
        config: &eff,
        input,
        peaks_source: &prep.peaks_source,
        tuned_threads: tuned,
        nhr: prep.nhr,
        report: &report,
    };
    write_json(&out, a.report.as_deref())
}

pub fn decompress(a: DecompressArgs) -> Result<(), Failure> {
    let c = read_container(&a.input)?;
    let batch = match a.event {
        Some(k) => pipeline::decompress_event(&c, k).map_err(|e| match e {
            roibin::Error::Index(m) => Failure::Usage(format!("--event: {m}")),
            e => Failure::Data(format!("{}: {e}", ctx(&a.input))),
        })?,
        None => {
            let threads = StageThreads {
                tasks: a.threads.max(1),
                ..StageThreads::default()
            };
            pipeline::decompress_with(&c, &threads).map_err(|e| Failure::Data(format!("{}: {e}", ctx(&a.input))))?
        }
    };
    write_file(&a.out, &batch.to_le_bytes())?;
    if let Some(p) = &a.peaks_out {
        let mut w = create(p)?;
        c.peaks().write_csv(&mut w).map_err(|e| Failure::lib(&ctx(p), e))?;
        w.flush().map_err(|e| Failure::io(p, e))?;
    }
    eprintln!("roibin: decoded {} events", batch.dims().events);
    Ok(())
}

#[derive(Serialize)]
struct TuneOutput<'a> {
    reused: bool,
    cache: String,
    config: &'a Effective,
    winner: &'a [usize],
    objective_seconds: f64,
    threads: StageThreads,
}

pub fn tune(a: TuneArgs) -> Result<(), Failure> {
    let cfg_path = a.pipeline.config.as_deref();
    let eff = Layer::stack(&a.pipeline.layer, None, cfg_path)?.resolve()?;
    let batch = load_frames(&a.frames)?;
    let prep = prepare(batch, a.frames.peaks.as_deref(), None, &eff)?;
    let dims = prep.batch.dims();
    let chunks = dims.events.div_ceil(eff.pipeline.chunk_events).max(1);
    let max_tasks = a.max_tasks.unwrap_or(chunks.min(40)).max(1);
    let max_threads = a.max_threads.max(1);
    let space = TuneSpace::new(vec![
        Axis::new(tuner::TASKS, 1, max_tasks),
        Axis::new("roi", 1, max_threads),
        Axis::new("bin", 1, max_threads),
        Axis::new("codec", 1, max_threads),
        Axis::new("roi_codec", 1, max_threads),
    ])
    .map_err(|e| Failure::lib("tune space", e))?;
    let key = config_key(dims, &eff.pipeline);
    let host = HostInfo::current();

    if !a.force && a.tune_cache.exists() {
        match TuneRecord::load(&a.tune_cache) {
            Ok(rec) if rec.reusable_for(&host, &space, &key) => {
                eprintln!("roibin: reusing cached tuning from {}", ctx(&a.tune_cache));
                return write_json(
                    &TuneOutput {
                        reused: true,
                        cache: ctx(&a.tune_cache),
                        config: &eff,
                        winner: &rec.winner,
                        objective_seconds: rec.objective,
                        threads: rec.threads,
                    },
                    None,
                );
            }
            Ok(_) => log::info!("cached tuning does not match; re-tuning"),
            Err(e) => log::warn!("unreadable tune cache {}: {e}; re-tuning", ctx(&a.tune_cache)),
        }
    }

    let mut budget = TuneBudget::for_space(&space);
    if let Some(n) = a.budget {
        budget.max_evals = n;
    }
    budget.repeats = a.repeats;
    budget.validate().map_err(|e| Failure::lib("tune budget", e))?;
    let (threads, allocations) = tuner::tune_pipeline(
        &space,
        &budget,
        &prep.batch,
        &prep.peaks,
        &eff.pipeline,
        a.seed,
        a.runs,
    )
    .map_err(|e| Failure::lib("tune", e))?;
    let winner = space_assignment(&space, threads);
    let objective = allocations
        .iter()
        .filter(|t| t.assignment == winner)
        .map(|t| t.objective)
        .fold(f64::INFINITY, f64::min);
    let record = TuneRecord {
        version: pipeline::VERSION,
        space,
        budget,
        seed: a.seed,
        host,
        config_key: key,
        trials: allocations.into_iter().flat_map(|t| t.trials).collect(),
        winner: winner.clone(),
        objective,
        threads,
    };
    record
        .save(&a.tune_cache)
        .map_err(|e| Failure::lib(&format!("tune cache {}", ctx(&a.tune_cache)), e))?;
    eprintln!("roibin: tuned threads {threads:?} ({objective:.4} s)");
    write_json(
        &TuneOutput {
            reused: false,
            cache: ctx(&a.tune_cache),
            config: &eff,
            winner: &winner,
            objective_seconds: objective,
            threads,
        },
        None,
    )
}

/// Inverse of `TuneSpace::to_threads` for the axes this CLI builds.
fn space_assignment(space: &TuneSpace, t: StageThreads) -> Vec<usize> {
    space
        .axes
        .iter()
        .map(|ax| match ax.name.as_str() {
            tuner::TASKS => t.tasks,
            "roi" => t.roi,
            "bin" => t.bin,
            "codec" => t.codec,
            _ => t.roi_codec,
        })
        .collect()
}

fn synth_params(dims: Dims4, s: &SynthParamArgs) -> SynthParams {
    SynthParams {
        dims,
        peaks_per_event: s.peaks_per_event,
        amplitude: s.amplitude,
        sigma: s.sigma,
        background_mean: s.background,
        noise: s.noise.into(),
        min_separation: s.separation,
        seed: s.seed,
    }
}

/// Frames from `--input`, or synthetic frames with their planted peaks.
fn bench_data(frames: &FrameArgs, synth: &SynthParamArgs, pipe: &PipelineArgs) -> Result<(Effective, Prepared), Failure> {
    let eff = Layer::stack(&pipe.layer, None, pipe.config.as_deref())?.resolve()?;
    if frames.input.is_some() {
        let batch = load_frames(frames)?;
        let prep = prepare(batch, frames.peaks.as_deref(), None, &eff)?;
        return Ok((eff, prep));
    }
    let params = synth_params(frames.dims.unwrap_or(DEFAULT_SYNTH_DIMS), synth);
    let (batch, planted) = bench::generate(&params).map_err(|e| Failure::lib("synthetic data", e))?;
    let prep = prepare(batch, frames.peaks.as_deref(), Some((planted, "planted")), &eff)?;
    Ok((eff, prep))
}

#[derive(Serialize)]
struct BenchOutput<'a> {
    config: &'a Effective,
    dims: Dims4,
    peaks: usize,
    deflate9_whole_frame_cr: Option<f64>,
    throughput: &'a bench::ThroughputReport,
}

pub fn bench(a: BenchArgs) -> Result<(), Failure> {
    let (eff, prep) = bench_data(&a.frames, &a.synth, &a.pipeline)?;
    let lossless = RoibinConfig {
        bin: BinSpec::new(1, 1),
        background: CodecId::Deflate { level: 6 },
        ..eff.pipeline
    };
    let cfgs = vec![("roibin".to_string(), eff.pipeline), ("lossless".to_string(), lossless)];
    let report = bench::run_throughput(&cfgs, &prep.batch, &prep.peaks, a.reps)
        .map_err(|e| Failure::lib("bench", e))?;
    for s in &report.scaling {
        eprintln!(
            "roibin: tasks {:>3}  {:.4} s  {:.4} GB/s  speedup {:.2}",
            s.tasks, s.seconds, s.gbps, s.speedup
        );
    }
    match a.format {
        TableFormat::Csv => report
            .write_csv(std::io::stdout().lock())
            .map_err(|e| Failure::lib("stdout", e)),
        TableFormat::Json => {
            let values = prep.batch.values();
            let dims = prep.batch.dims();
            let deflated = codec::encode(
                &CodecId::Deflate { level: 9 },
                values,
                &[dims.events, dims.panels, dims.rows, dims.cols],
            )
            .map_err(|e| Failure::lib("deflate baseline", e))?;
            let cr = metrics::compression_ratio(2 * values.len() as u64, deflated.len() as u64).ok();
            write_json(
                &BenchOutput {
                    config: &eff,
                    dims,
                    peaks: prep.peaks.len(),
                    deflate9_whole_frame_cr: cr,
                    throughput: &report,
                },
                None,
            )
        }
    }
}

#[derive(Serialize)]
struct GridOutput<'a> {
    config: &'a Effective,
    plan: &'a GridSearchPlan,
    cells: &'a [bench::GridCell],
}

pub fn grid(a: GridArgs) -> Result<(), Failure> {
    let (eff, prep) = bench_data(&a.frames, &a.synth, &a.pipeline)?;
    let plan = GridSearchPlan {
        mode: if a.full { GridMode::Full } else { GridMode::Sweeps },
        ..GridSearchPlan::default()
    };
    let cells = bench::run_grid(&plan, &prep.batch, &prep.peaks, &eff.pipeline).map_err(|e| Failure::lib("grid", e))?;
    match a.format {
        TableFormat::Csv => bench::write_grid_csv(&cells, std::io::stdout().lock()).map_err(|e| Failure::lib("stdout", e)),
        TableFormat::Json => write_json(
            &GridOutput {
                config: &eff,
                plan: &plan,
                cells: &cells,
            },
            None,
        ),
    }
}

fn read_intensities(path: &PathBuf) -> Result<Vec<f64>, Failure> {
    let f = File::open(path).map_err(|e| Failure::io(path, e))?;
    metrics::read_values(BufReader::new(f)).map_err(|e| match e {
        roibin::Error::Io(_) => Failure::lib(&ctx(path), e),
        e => Failure::Data(format!("{}: {e}", path.display())),
    })
}

pub fn metrics(a: MetricsArgs) -> Result<(), Failure> {
    let scale = match a.scale.as_str() {
        "auto" => Scale::Auto,
        s => Scale::Explicit(
            s.parse()
                .map_err(|_| Failure::Usage(format!("--scale must be 'auto' or a number, got '{s}'")))?,
        ),
    };
    let i1 = read_intensities(&a.first)?;
    let i2 = read_intensities(&a.second)?;
    let pair = PairedIntensities::new(i1, i2).map_err(|e| Failure::Data(format!("metrics: {e}")))?;
    let report = MetricReport::compute(&pair, scale).map_err(|e| Failure::Data(format!("metrics: {e}")))?;
    match a.format {
        MetricFormat::Table => {
            print!("{}", report.to_table());
            Ok(())
        }
        MetricFormat::Json => write_json(&report, None),
    }
}

pub fn synth(a: SynthArgs) -> Result<(), Failure> {
    let params = synth_params(a.dims, &a.synth);
    let (batch, planted) = bench::generate(&params).map_err(|e| Failure::lib("synthetic data", e))?;
    let bytes = match a.format {
        SampleFormat::F32 => batch.to_le_bytes(),
        SampleFormat::U16 => batch
            .values()
            .iter()
            .flat_map(|v| (v.round().clamp(0.0, f32::from(u16::MAX)) as u16).to_le_bytes())
            .collect(),
    };
    write_file(&a.out, &bytes)?;
    if let Some(p) = &a.peaks_out {
        let mut w = create(p)?;
        planted.write_csv(&mut w).map_err(|e| Failure::lib(&ctx(p), e))?;
        w.flush().map_err(|e| Failure::io(p, e))?;
    }
    eprintln!("roibin: wrote {} events with {} spots", a.dims.events, planted.len());
    Ok(())
}
