//! Compression and data-quality metrics.
//!
//! Reductions run sequentially with compensated summation so results do
//! not depend on thread counts and stay accurate on long arrays.

use std::fmt::Write as _;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Neumaier-compensated running sum.
#[derive(Debug, Default, Clone, Copy)]
struct Sum {
    s: f64,
    c: f64,
}

impl Sum {
    fn add(&mut self, x: f64) {
        let t = self.s + x;
        if self.s.abs() >= x.abs() {
            self.c += (self.s - t) + x;
        } else {
            self.c += (x - t) + self.s;
        }
        self.s = t;
    }

    fn value(&self) -> f64 {
        self.s + self.c
    }
}

fn sum(it: impl Iterator<Item = f64>) -> f64 {
    let mut s = Sum::default();
    it.for_each(|x| s.add(x));
    s.value()
}

fn check_pair(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Metric(format!("{what}: lengths differ ({a} vs {b})")));
    }
    if a == 0 {
        return Err(Error::Metric(format!("{what}: empty input")));
    }
    Ok(())
}

/// `raw_bytes / compressed_bytes`.
pub fn compression_ratio(raw_bytes: u64, compressed_bytes: u64) -> Result<f64> {
    if compressed_bytes == 0 {
        return Err(Error::UndefinedRatio("compressed size is zero".into()));
    }
    Ok(raw_bytes as f64 / compressed_bytes as f64)
}

/// Peak signal-to-noise ratio in dB, with the value range of `orig` as
/// the peak. Identical inputs give `+inf`; a constant `orig` with nonzero
/// error gives `-inf`.
pub fn psnr<T: Copy + Into<f64>>(orig: &[T], recon: &[T]) -> Result<f64> {
    check_pair(orig.len(), recon.len(), "psnr")?;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in orig {
        let v = v.into();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let sq = sum(orig.iter().zip(recon).map(|(&a, &b)| {
        let d = a.into() - b.into();
        d * d
    }));
    let rmse = (sq / orig.len() as f64).sqrt();
    if rmse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let range = hi - lo;
    if range == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(20.0 * (range / rmse).log10())
}

pub const MPE_FLOOR: f64 = 1e-6;

/// Mean percentage error over elements with `|orig| > floor`; `None` when
/// no element passes the floor.
pub fn mpe<T: Copy + Into<f64>>(orig: &[T], recon: &[T], floor: f64) -> Result<Option<f64>> {
    if orig.len() != recon.len() {
        return Err(Error::Metric(format!(
            "mpe: lengths differ ({} vs {})",
            orig.len(),
            recon.len()
        )));
    }
    let mut total = Sum::default();
    let mut n = 0usize;
    for (&a, &b) in orig.iter().zip(recon) {
        let (a, b) = (a.into(), b.into());
        if a.abs() > floor {
            total.add(100.0 * (a - b).abs() / a.abs());
            n += 1;
        }
    }
    Ok((n > 0).then(|| total.value() / n as f64))
}

/// Intensities of two half datasets, paired by reflection.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedIntensities {
    i1: Vec<f64>,
    i2: Vec<f64>,
}

impl PairedIntensities {
    pub fn new(i1: Vec<f64>, i2: Vec<f64>) -> Result<Self> {
        check_pair(i1.len(), i2.len(), "paired intensities")?;
        if i1.iter().chain(&i2).any(|v| !v.is_finite()) {
            return Err(Error::Metric("paired intensities contain non-finite values".into()));
        }
        Ok(PairedIntensities { i1, i2 })
    }

    pub fn i1(&self) -> &[f64] {
        &self.i1
    }

    pub fn i2(&self) -> &[f64] {
        &self.i2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Auto,
    Explicit(f64),
}

/// The scale factor `k` used for `rsplit`; `Auto` is the least-squares
/// fit `Σ(I1·I2) / Σ(I2²)`.
pub fn resolve_scale(p: &PairedIntensities, scale: Scale) -> Result<f64> {
    match scale {
        Scale::Explicit(k) if k.is_finite() => Ok(k),
        Scale::Explicit(k) => Err(Error::Metric(format!("scale factor {k} is not finite"))),
        Scale::Auto => {
            let den = sum(p.i2.iter().map(|b| b * b));
            if den == 0.0 {
                return Err(Error::Metric("auto scale: second half dataset is all zero".into()));
            }
            Ok(sum(p.i1.iter().zip(&p.i2).map(|(a, b)| a * b)) / den)
        }
    }
}

/// `2^(-1/2) · Σ|I1 − k·I2| / (0.5 · Σ(I1 + k·I2))`.
pub fn rsplit(p: &PairedIntensities, scale: Scale) -> Result<f64> {
    let k = resolve_scale(p, scale)?;
    let num = sum(p.i1.iter().zip(&p.i2).map(|(a, b)| (a - k * b).abs()));
    let den = 0.5 * sum(p.i1.iter().zip(&p.i2).map(|(a, b)| a + k * b));
    if den == 0.0 {
        return Err(Error::Metric("rsplit: denominator is zero".into()));
    }
    Ok(std::f64::consts::FRAC_1_SQRT_2 * num / den)
}

/// Pearson correlation between the half datasets.
pub fn cc_half(p: &PairedIntensities) -> Result<f64> {
    let n = p.i1.len() as f64;
    let m1 = sum(p.i1.iter().copied()) / n;
    let m2 = sum(p.i2.iter().copied()) / n;
    let cov = sum(p.i1.iter().zip(&p.i2).map(|(a, b)| (a - m1) * (b - m2)));
    let v1 = sum(p.i1.iter().map(|a| (a - m1) * (a - m1)));
    let v2 = sum(p.i2.iter().map(|b| (b - m2) * (b - m2)));
    if v1 == 0.0 || v2 == 0.0 {
        return Err(Error::Metric("cc_half: zero variance".into()));
    }
    Ok(cov / (v1 * v2).sqrt())
}

/// `Σ| |F_obs| − |F_calc| | / Σ|F_obs|`.
pub fn r_factor(f_obs: &[f64], f_calc: &[f64]) -> Result<f64> {
    check_pair(f_obs.len(), f_calc.len(), "r_factor")?;
    let den = sum(f_obs.iter().map(|f| f.abs()));
    if den == 0.0 {
        return Err(Error::Metric("r_factor: observed amplitudes sum to zero".into()));
    }
    let num = sum(f_obs.iter().zip(f_calc).map(|(o, c)| (o.abs() - c.abs()).abs()));
    Ok(num / den)
}

/// Largest absolute elementwise difference and its first index.
pub fn max_errors<T: Copy + Into<f64>>(orig: &[T], recon: &[T]) -> Result<(f64, usize)> {
    if orig.len() != recon.len() {
        return Err(Error::Metric(format!(
            "max_errors: lengths differ ({} vs {})",
            orig.len(),
            recon.len()
        )));
    }
    let mut best = (0.0, 0);
    for (i, (&a, &b)) in orig.iter().zip(recon).enumerate() {
        let d = (a.into() - b.into()).abs();
        if d > best.0 {
            best = (d, i);
        }
    }
    Ok(best)
}

/// Reads one number per line. Blank lines are skipped and a non-numeric
/// first line is taken as a header.
pub fn read_values<R: BufRead>(r: R) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let field = line.split(',').next().unwrap_or("").trim();
        if field.is_empty() {
            continue;
        }
        match field.parse::<f64>() {
            Ok(v) => out.push(v),
            Err(_) if i == 0 => {}
            Err(_) => {
                return Err(Error::Metric(format!(
                    "line {}: '{field}' is not a number",
                    i + 1
                )))
            }
        }
    }
    Ok(out)
}

/// Quality summary for a pair of intensity arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub scale: f64,
    pub rsplit: Option<f64>,
    pub cc_half: Option<f64>,
    pub r_factor: Option<f64>,
    pub psnr_db: Option<f64>,
    pub mpe_percent: Option<f64>,
    pub max_abs_error: f64,
    pub max_abs_error_index: usize,
}

impl MetricReport {
    /// Every metric that is defined for the inputs; undefined ones are
    /// left empty rather than failing the report.
    pub fn compute(p: &PairedIntensities, scale: Scale) -> Result<Self> {
        let k = resolve_scale(p, scale).unwrap_or(1.0);
        let (max_abs_error, max_abs_error_index) = max_errors(p.i1(), p.i2())?;
        Ok(MetricReport {
            n: p.i1.len(),
            scale: k,
            rsplit: rsplit(p, Scale::Explicit(k)).ok(),
            cc_half: cc_half(p).ok(),
            r_factor: r_factor(p.i1(), p.i2()).ok(),
            psnr_db: psnr(p.i1(), p.i2()).ok(),
            mpe_percent: mpe(p.i1(), p.i2(), MPE_FLOOR)?,
            max_abs_error,
            max_abs_error_index,
        })
    }

    /// Two aligned columns: metric name and value.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"));
        let rows = [
            ("n", self.n.to_string()),
            ("scale_k", format!("{:.6}", self.scale)),
            ("rsplit", fmt(self.rsplit)),
            ("cc_half", fmt(self.cc_half)),
            ("r_factor", fmt(self.r_factor)),
            ("psnr_db", fmt(self.psnr_db)),
            ("mpe_percent", fmt(self.mpe_percent)),
            (
                "max_abs_error",
                format!("{:.6} @ {}", self.max_abs_error, self.max_abs_error_index),
            ),
        ];
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let mut s = String::new();
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<width$}  {v:>16}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(a: &[f64], b: &[f64]) -> PairedIntensities {
        PairedIntensities::new(a.to_vec(), b.to_vec()).unwrap()
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(compression_ratio(200, 100).unwrap(), 2.0);
        assert_eq!(compression_ratio(2 * 1000, 4 * 1000).unwrap(), 0.5);
        assert!(matches!(compression_ratio(5, 0), Err(Error::UndefinedRatio(_))));
    }

    #[test]
    fn psnr_examples() {
        assert_eq!(psnr(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), f64::INFINITY);
        let v = psnr(&[0.0, 2.0], &[0.0, 1.0]).unwrap();
        assert!((v - 9.0309).abs() < 1e-4, "{v}");
        let orig = [0.0, 3.0, 10.0, 7.0];
        let recon: Vec<f64> = orig.iter().map(|x| x + 0.25).collect();
        let v = psnr(&orig, &recon).unwrap();
        assert!((v - 20.0 * (10.0f64 / 0.25).log10()).abs() < 1e-12);
        assert_eq!(psnr(&[4.0, 4.0], &[4.0, 5.0]).unwrap(), f64::NEG_INFINITY);
        assert!(psnr::<f64>(&[], &[]).is_err());
    }

    #[test]
    fn mpe_examples() {
        assert_eq!(mpe(&[3.0, 4.0], &[3.0, 4.0], MPE_FLOOR).unwrap(), Some(0.0));
        assert_eq!(mpe(&[100.0], &[90.0], MPE_FLOOR).unwrap(), Some(10.0));
        assert_eq!(mpe(&[0.0], &[5.0], MPE_FLOOR).unwrap(), None);
    }

    #[test]
    fn rsplit_examples() {
        assert_eq!(rsplit(&pair(&[1.0, 5.0], &[1.0, 5.0]), Scale::Explicit(1.0)).unwrap(), 0.0);
        let v = rsplit(&pair(&[2.0], &[1.0]), Scale::Explicit(1.0)).unwrap();
        assert!((v - 0.4714).abs() < 1e-4, "{v}");
        let i2 = [1.0, 3.0, 7.5];
        let i1: Vec<f64> = i2.iter().map(|x| 2.0 * x).collect();
        let p = pair(&i1, &i2);
        assert_eq!(resolve_scale(&p, Scale::Auto).unwrap(), 2.0);
        assert_eq!(rsplit(&p, Scale::Auto).unwrap(), 0.0);
        assert!(rsplit(&pair(&[1.0], &[-1.0]), Scale::Explicit(1.0)).is_err());
    }

    #[test]
    fn cc_examples() {
        let a = [1.0, 2.0, 3.0];
        assert!((cc_half(&pair(&a, &a)).unwrap() - 1.0).abs() < 1e-15);
        assert!((cc_half(&pair(&a, &[-1.0, -2.0, -3.0])).unwrap() + 1.0).abs() < 1e-15);
        let v = cc_half(&pair(&a, &[1.0, 2.0, 4.0])).unwrap();
        assert!((v - 0.9820).abs() < 1e-4, "{v}");
        assert!(cc_half(&pair(&[1.0, 1.0], &[1.0, 2.0])).is_err());
    }

    #[test]
    fn r_factor_examples() {
        assert_eq!(r_factor(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((r_factor(&[10.0], &[8.0]).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(r_factor(&[10.0], &[-10.0]).unwrap(), 0.0);
        assert!(r_factor(&[0.0], &[1.0]).is_err());
    }

    #[test]
    fn max_error_examples() {
        assert_eq!(max_errors(&[1.0f32, 2.0], &[1.0, 2.0]).unwrap(), (0.0, 0));
        assert_eq!(max_errors(&[1.0, 2.0, 3.0], &[1.0, 2.5, 3.0]).unwrap(), (0.5, 1));
    }

    #[test]
    fn value_reader() {
        let text = "intensity\n1.5\n\n-2\n3e2\n";
        assert_eq!(read_values(text.as_bytes()).unwrap(), vec![1.5, -2.0, 300.0]);
        assert!(read_values("1\nx\n".as_bytes()).is_err());
    }

    #[test]
    fn report_table_has_all_rows() {
        let r = MetricReport::compute(&pair(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), Scale::Auto).unwrap();
        assert_eq!(r.rsplit, Some(0.0));
        assert_eq!(r.cc_half, Some(1.0));
        assert_eq!(r.to_table().lines().count(), 8);
    }

    fn arb_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..50).prop_flat_map(|n| {
            (
                proptest::collection::vec(1.0f64..1e4, n),
                proptest::collection::vec(1.0f64..1e4, n),
            )
        })
    }

    proptest! {
        #[test]
        fn rsplit_is_scale_consistent((a, b) in arb_pair(), s in 0.01f64..100.0, k in 0.5f64..2.0) {
            let base = rsplit(&pair(&a, &b), Scale::Explicit(k)).unwrap();
            let sa: Vec<f64> = a.iter().map(|x| x * s).collect();
            let sb: Vec<f64> = b.iter().map(|x| x * s).collect();
            let scaled = rsplit(&pair(&sa, &sb), Scale::Explicit(k)).unwrap();
            prop_assert!((base - scaled).abs() <= 1e-12 * base.abs().max(1e-300) + 1e-15);
        }

        #[test]
        fn cc_is_affine_invariant((a, b) in arb_pair(), s in 0.01f64..100.0, t in -1e3f64..1e3) {
            let p = pair(&a, &b);
            prop_assume!(cc_half(&p).is_ok());
            let base = cc_half(&p).unwrap();
            let ta: Vec<f64> = a.iter().map(|x| s * x + t).collect();
            let moved = cc_half(&pair(&ta, &b)).unwrap();
            prop_assert!((base - moved).abs() < 1e-9);
        }

        #[test]
        fn r_factor_nonnegative((a, b) in arb_pair()) {
            prop_assert_eq!(r_factor(&a, &a).unwrap(), 0.0);
            prop_assert!(r_factor(&a, &b).unwrap() >= 0.0);
        }

        #[test]
        fn psnr_falls_as_error_grows(orig in proptest::collection::vec(-1e3f64..1e3, 2..40), c1 in 0.01f64..10.0, extra in 0.01f64..10.0) {
            prop_assume!(orig.iter().any(|&x| x != orig[0]));
            let r1: Vec<f64> = orig.iter().map(|x| x + c1).collect();
            let r2: Vec<f64> = orig.iter().map(|x| x + c1 + extra).collect();
            prop_assert!(psnr(&orig, &r1).unwrap() > psnr(&orig, &r2).unwrap());
        }

        #[test]
        fn max_errors_matches_scan(a in proptest::collection::vec(-1e3f64..1e3, 0..60), seed in any::<u64>()) {
            let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x + ((seed >> (i % 60)) & 7) as f64).collect();
            let (m, i) = max_errors(&a, &b).unwrap();
            let mut best = (0.0f64, 0usize);
            for j in 0..a.len() {
                let d = (a[j] - b[j]).abs();
                if d > best.0 { best = (d, j); }
            }
            prop_assert_eq!((m, i), best);
        }
    }
}
