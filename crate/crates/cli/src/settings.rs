//! Layered configuration: flags over config file over `ROIBIN_*`
//! environment variables over built-in defaults.

use std::path::Path;

use clap::Args;
use serde::{Deserialize, Serialize};

use roibin::binning::BinSpec;
use roibin::codec::{CodecId, ErrorBound};
use roibin::peakfind::PeakFinderParams;
use roibin::pipeline::{RoibinConfig, StageThreads};

use crate::failure::Failure;

pub const ENV_PREFIX: &str = "ROIBIN_";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(default, deny_unknown_fields)]
pub struct ThreadLayer {
    /// Chunks compressed concurrently
    #[arg(long = "threads-tasks", id = "threads_tasks", value_name = "N")]
    pub tasks: Option<usize>,
    /// Threads for ROI extraction and restore
    #[arg(long = "threads-roi", id = "threads_roi", value_name = "N")]
    pub roi: Option<usize>,
    /// Threads for binning
    #[arg(long = "threads-bin", id = "threads_bin", value_name = "N")]
    pub bin: Option<usize>,
    /// Threads for the background codec
    #[arg(long = "threads-codec", id = "threads_codec", value_name = "N")]
    pub codec: Option<usize>,
    /// Values above 1 overlap ROI coding with the background branch
    #[arg(long = "threads-roi-codec", id = "threads_roi_codec", value_name = "N")]
    pub roi_codec: Option<usize>,
}

impl ThreadLayer {
    fn over(self, lower: ThreadLayer) -> ThreadLayer {
        ThreadLayer {
            tasks: self.tasks.or(lower.tasks),
            roi: self.roi.or(lower.roi),
            bin: self.bin.or(lower.bin),
            codec: self.codec.or(lower.codec),
            roi_codec: self.roi_codec.or(lower.roi_codec),
        }
    }

    pub fn from_threads(t: StageThreads) -> ThreadLayer {
        ThreadLayer {
            tasks: Some(t.tasks),
            roi: Some(t.roi),
            bin: Some(t.bin),
            codec: Some(t.codec),
            roi_codec: Some(t.roi_codec),
        }
    }

    fn resolve(&self) -> StageThreads {
        let d = StageThreads::default();
        StageThreads {
            tasks: self.tasks.unwrap_or(d.tasks),
            roi: self.roi.unwrap_or(d.roi),
            bin: self.bin.unwrap_or(d.bin),
            codec: self.codec.unwrap_or(d.codec),
            roi_codec: self.roi_codec.unwrap_or(d.roi_codec),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(default, deny_unknown_fields)]
pub struct PeakLayer {
    /// Peak-finder local-maximum window (odd)
    #[arg(long = "pf-window", id = "pf_window", value_name = "PX")]
    pub window: Option<usize>,
    /// Peak-finder local-maximum threshold (ADU)
    #[arg(long = "pf-max-threshold", id = "pf_max_threshold", value_name = "ADU")]
    pub max_threshold: Option<f64>,
    /// Peak-finder member pixel floor (ADU, exclusive)
    #[arg(long = "pf-member-floor", id = "pf_member_floor", value_name = "ADU")]
    pub member_floor: Option<f64>,
    /// Peak-finder total intensity floor (ADU, exclusive)
    #[arg(long = "pf-total-floor", id = "pf_total_floor", value_name = "ADU")]
    pub total_floor: Option<f64>,
    /// Peak-finder signal-to-noise floor (exclusive)
    #[arg(long = "pf-snr-floor", id = "pf_snr_floor", value_name = "RATIO")]
    pub snr_floor: Option<f64>,
    #[arg(long = "pf-min-pixels", id = "pf_min_pixels", value_name = "N")]
    pub min_pixels: Option<usize>,
    #[arg(long = "pf-max-pixels", id = "pf_max_pixels", value_name = "N")]
    pub max_pixels: Option<usize>,
}

impl PeakLayer {
    fn over(self, lower: PeakLayer) -> PeakLayer {
        PeakLayer {
            window: self.window.or(lower.window),
            max_threshold: self.max_threshold.or(lower.max_threshold),
            member_floor: self.member_floor.or(lower.member_floor),
            total_floor: self.total_floor.or(lower.total_floor),
            snr_floor: self.snr_floor.or(lower.snr_floor),
            min_pixels: self.min_pixels.or(lower.min_pixels),
            max_pixels: self.max_pixels.or(lower.max_pixels),
        }
    }

    fn resolve(&self) -> PeakFinderParams {
        let d = PeakFinderParams::default();
        PeakFinderParams {
            window: self.window.unwrap_or(d.window),
            max_threshold: self.max_threshold.unwrap_or(d.max_threshold),
            member_floor: self.member_floor.unwrap_or(d.member_floor),
            total_floor: self.total_floor.unwrap_or(d.total_floor),
            snr_floor: self.snr_floor.unwrap_or(d.snr_floor),
            min_pixels: self.min_pixels.unwrap_or(d.min_pixels),
            max_pixels: self.max_pixels.unwrap_or(d.max_pixels),
        }
    }
}

/// One configuration source. Every field is optional so layers can be
/// stacked; the config file uses the same names, with `[threads]` and
/// `[peakfind]` sections.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(default, deny_unknown_fields)]
pub struct Layer {
    /// Background bin factors, `FRxFC` or `F`
    #[arg(long, value_name = "FRxFC")]
    pub bin: Option<String>,
    /// Background codec: pq, raw or deflate:L
    #[arg(long, value_name = "CODEC")]
    pub codec: Option<String>,
    /// Absolute error bound for pq
    #[arg(long, value_name = "X", conflicts_with = "rel_error")]
    pub abs_error: Option<f64>,
    /// Value-range-relative error bound for pq
    #[arg(long, value_name = "X")]
    pub rel_error: Option<f64>,
    /// Lorenzo predictor dimensionality for pq
    #[arg(long, value_name = "D")]
    pub pq_dims: Option<u8>,
    /// Lossless codec for ROI blocks: raw or deflate:L
    #[arg(long, value_name = "CODEC")]
    pub roi_codec: Option<String>,
    /// Events per independently decodable chunk
    #[arg(long, value_name = "N")]
    pub chunk: Option<usize>,
    /// Edge length of the lossless block around each peak
    #[arg(long, value_name = "W")]
    pub roi_window: Option<usize>,
    /// Value for ROI block pixels outside the panel
    #[arg(long, value_name = "V")]
    pub roi_fill: Option<f32>,
    /// Drop events with fewer than MIN peaks before compressing
    #[arg(long, value_name = "MIN")]
    pub nhr: Option<usize>,
    /// Decode-side error measurement in the report
    #[arg(long, value_name = "BOOL")]
    pub measure_errors: Option<bool>,
    #[command(flatten)]
    pub threads: ThreadLayer,
    #[command(flatten)]
    pub peakfind: PeakLayer,
}

/// Fully resolved settings, recorded verbatim in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Effective {
    pub pipeline: RoibinConfig,
    pub peakfind: PeakFinderParams,
    pub nhr: Option<usize>,
}

impl Layer {
    /// Field-wise overlay with `self` taking priority. The two error-bound
    /// kinds are one setting: whichever layer names either wins both.
    pub fn over(self, lower: Layer) -> Layer {
        let (abs_error, rel_error) = if self.abs_error.is_some() || self.rel_error.is_some() {
            (self.abs_error, self.rel_error)
        } else {
            (lower.abs_error, lower.rel_error)
        };
        Layer {
            bin: self.bin.or(lower.bin),
            codec: self.codec.or(lower.codec),
            abs_error,
            rel_error,
            pq_dims: self.pq_dims.or(lower.pq_dims),
            roi_codec: self.roi_codec.or(lower.roi_codec),
            chunk: self.chunk.or(lower.chunk),
            roi_window: self.roi_window.or(lower.roi_window),
            roi_fill: self.roi_fill.or(lower.roi_fill),
            nhr: self.nhr.or(lower.nhr),
            measure_errors: self.measure_errors.or(lower.measure_errors),
            threads: self.threads.over(lower.threads),
            peakfind: self.peakfind.over(lower.peakfind),
        }
    }

    pub fn from_toml_file(path: &Path) -> Result<Layer, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Io(format!("config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))
    }

    /// Reads `ROIBIN_*` variables through `get`.
    pub fn from_env(get: impl Fn(&str) -> Option<String>) -> Result<Layer, Failure> {
        fn parse<T: std::str::FromStr>(
            get: &impl Fn(&str) -> Option<String>,
            key: &str,
        ) -> Result<Option<T>, Failure> {
            let name = format!("{ENV_PREFIX}{key}");
            match get(&name) {
                None => Ok(None),
                Some(v) => v
                    .trim()
                    .parse()
                    .map(Some)
                    .map_err(|_| Failure::Usage(format!("environment {name}='{v}' is not valid"))),
            }
        }
        let g = &get;
        Ok(Layer {
            bin: parse(g, "BIN")?,
            codec: parse(g, "CODEC")?,
            abs_error: parse(g, "ABS_ERROR")?,
            rel_error: parse(g, "REL_ERROR")?,
            pq_dims: parse(g, "PQ_DIMS")?,
            roi_codec: parse(g, "ROI_CODEC")?,
            chunk: parse(g, "CHUNK")?,
            roi_window: parse(g, "ROI_WINDOW")?,
            roi_fill: parse(g, "ROI_FILL")?,
            nhr: parse(g, "NHR")?,
            measure_errors: parse(g, "MEASURE_ERRORS")?,
            threads: ThreadLayer {
                tasks: parse(g, "THREADS_TASKS")?,
                roi: parse(g, "THREADS_ROI")?,
                bin: parse(g, "THREADS_BIN")?,
                codec: parse(g, "THREADS_CODEC")?,
                roi_codec: parse(g, "THREADS_ROI_CODEC")?,
            },
            peakfind: PeakLayer {
                window: parse(g, "PEAKFIND_WINDOW")?,
                max_threshold: parse(g, "PEAKFIND_MAX_THRESHOLD")?,
                member_floor: parse(g, "PEAKFIND_MEMBER_FLOOR")?,
                total_floor: parse(g, "PEAKFIND_TOTAL_FLOOR")?,
                snr_floor: parse(g, "PEAKFIND_SNR_FLOOR")?,
                min_pixels: parse(g, "PEAKFIND_MIN_PIXELS")?,
                max_pixels: parse(g, "PEAKFIND_MAX_PIXELS")?,
            },
        })
    }

    /// Stacks flags, tuned threads, config file and environment in
    /// priority order.
    pub fn stack(
        flags: &Layer,
        tuned: Option<StageThreads>,
        config: Option<&Path>,
    ) -> Result<Layer, Failure> {
        let env = Layer::from_env(|k| std::env::var(k).ok())?;
        let file = match config {
            Some(p) => Layer::from_toml_file(p)?,
            None => Layer::default(),
        };
        let tuned = Layer {
            threads: tuned.map(ThreadLayer::from_threads).unwrap_or_default(),
            ..Layer::default()
        };
        Ok(flags.clone().over(tuned.over(file.over(env))))
    }

    pub fn resolve(&self) -> Result<Effective, Failure> {
        let usage = |e: roibin::Error| Failure::Usage(e.to_string());
        let d = RoibinConfig::default();
        let bin = match &self.bin {
            Some(s) => parse_bin(s)?,
            None => d.bin,
        };
        let mut background = match &self.codec {
            Some(s) => s.parse::<CodecId>().map_err(usage)?,
            None => d.background,
        };
        match &mut background {
            CodecId::Pq { bound, dims_mode } => {
                if let Some(x) = self.abs_error {
                    *bound = ErrorBound::absolute(x);
                }
                if let Some(x) = self.rel_error {
                    *bound = ErrorBound::relative(x);
                }
                if let Some(m) = self.pq_dims {
                    *dims_mode = m;
                }
            }
            other => {
                if self.abs_error.is_some() || self.rel_error.is_some() || self.pq_dims.is_some() {
                    log::warn!("error bound and pq dims settings are ignored by the {other} codec");
                }
            }
        }
        let roi_codec = match &self.roi_codec {
            Some(s) => s.parse::<CodecId>().map_err(usage)?,
            None => d.roi_codec,
        };
        let mut roi = d.roi;
        if let Some(w) = self.roi_window {
            roi.window = w;
        }
        if let Some(f) = self.roi_fill {
            roi.fill = f;
        }
        let pipeline = RoibinConfig {
            roi,
            bin,
            background,
            roi_codec,
            chunk_events: self.chunk.unwrap_or(d.chunk_events),
            threads: self.threads.resolve(),
            measure_errors: self.measure_errors.unwrap_or(d.measure_errors),
        };
        pipeline.validate().map_err(usage)?;
        let peakfind = self.peakfind.resolve();
        peakfind.validate().map_err(usage)?;
        Ok(Effective {
            pipeline,
            peakfind,
            nhr: self.nhr,
        })
    }
}

/// `FRxFC` or a single factor for both axes.
pub fn parse_bin(s: &str) -> Result<BinSpec, Failure> {
    let bad = || Failure::Usage(format!("bad bin factors '{s}', expected FRxFC"));
    let (r, c) = match s.split_once(['x', 'X']) {
        Some((r, c)) => (r, c),
        None => (s, s),
    };
    let r = r.trim().parse().map_err(|_| bad())?;
    let c = c.trim().parse().map_err(|_| bad())?;
    Ok(BinSpec::new(r, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn env(pairs: &[(&str, &str)]) -> Layer {
        let m: HashMap<String, String> = pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Layer::from_env(|k| m.get(k).cloned()).unwrap()
    }

    #[test]
    fn precedence_is_flags_file_env_default() {
        let env = env(&[("ROIBIN_CHUNK", "4"), ("ROIBIN_BIN", "3x3"), ("ROIBIN_THREADS_TASKS", "2")]);
        let file: Layer = toml::from_str("chunk = 8\n[threads]\ntasks = 3\n").unwrap();
        let flags = Layer {
            chunk: Some(12),
            ..Layer::default()
        };
        let e = flags.over(file.over(env)).resolve().unwrap();
        assert_eq!(e.pipeline.chunk_events, 12);
        assert_eq!(e.pipeline.threads.tasks, 3);
        assert_eq!(e.pipeline.bin, BinSpec::new(3, 3));
        assert_eq!(e.pipeline.threads.roi, 1);
    }

    #[test]
    fn bound_kinds_override_as_one_setting() {
        let file = Layer {
            rel_error: Some(1e-3),
            ..Layer::default()
        };
        let flags = Layer {
            abs_error: Some(10.0),
            ..Layer::default()
        };
        let e = flags.over(file.clone()).resolve().unwrap();
        assert_eq!(e.pipeline.background, CodecId::pq_absolute(10.0, 3));
        let e = Layer::default().over(file).resolve().unwrap();
        assert!(matches!(
            e.pipeline.background,
            CodecId::Pq { bound, .. } if bound == ErrorBound::relative(1e-3)
        ));
    }

    #[test]
    fn defaults_match_library() {
        let e = Layer::default().resolve().unwrap();
        assert_eq!(e.pipeline, RoibinConfig::default());
        assert_eq!(e.peakfind, PeakFinderParams::default());
        assert_eq!(e.nhr, None);
    }

    #[test]
    fn bad_values_are_usage_errors() {
        for l in [
            Layer {
                bin: Some("2y".into()),
                ..Layer::default()
            },
            Layer {
                codec: Some("zstd".into()),
                ..Layer::default()
            },
            Layer {
                chunk: Some(0),
                ..Layer::default()
            },
            Layer {
                pq_dims: Some(4),
                ..Layer::default()
            },
        ] {
            assert!(matches!(l.resolve(), Err(Failure::Usage(_))), "{l:?}");
        }
        let m = |k: &str| (k == "ROIBIN_CHUNK").then(|| "many".to_string());
        assert!(matches!(Layer::from_env(m), Err(Failure::Usage(_))));
        assert!(toml::from_str::<Layer>("colour = 1").is_err());
    }

    #[test]
    fn bin_forms() {
        assert_eq!(parse_bin("2x3").unwrap(), BinSpec::new(2, 3));
        assert_eq!(parse_bin("3").unwrap(), BinSpec::new(3, 3));
    }
}
