//! 2D block-mean binning of panels and replication back to full size.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::{Dims4, EventBatch};
use crate::parallel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinSpec {
    pub factor_rows: usize,
    pub factor_cols: usize,
    pub threads: usize,
}

impl Default for BinSpec {
    fn default() -> Self {
        BinSpec {
            factor_rows: 2,
            factor_cols: 2,
            threads: 1,
        }
    }
}

impl BinSpec {
    pub fn new(factor_rows: usize, factor_cols: usize) -> Self {
        BinSpec {
            factor_rows,
            factor_cols,
            threads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.factor_rows == 0 || self.factor_cols == 0 {
            return Err(Error::Config("bin factors must be >= 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("bin threads must be >= 1".into()));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.factor_rows == 1 && self.factor_cols == 1
    }

    /// Binned geometry for `source`: rows and cols ceiling-divided.
    pub fn binned_dims(&self, source: Dims4) -> Dims4 {
        Dims4 {
            rows: source.rows.div_ceil(self.factor_rows),
            cols: source.cols.div_ceil(self.factor_cols),
            ..source
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinnedBatch {
    pub dims: Dims4,
    pub values: Vec<f32>,
    pub source_dims: Dims4,
}

/// Averages each `factor_rows × factor_cols` window of every panel.
pub fn bin(batch: &EventBatch, spec: &BinSpec) -> Result<BinnedBatch> {
    spec.validate()?;
    let source_dims = batch.dims();
    let dims = spec.binned_dims(source_dims);
    let mut values = vec![0f32; dims.len()];
    bin_into(batch.values(), source_dims, spec, &mut values)?;
    Ok(BinnedBatch {
        dims,
        values,
        source_dims,
    })
}

/// Binning into a caller-provided buffer of `binned_dims(source).len()`.
pub fn bin_into(src: &[f32], source: Dims4, spec: &BinSpec, out: &mut [f32]) -> Result<()> {
    spec.validate()?;
    let dims = spec.binned_dims(source);
    if src.len() != source.len() || out.len() != dims.len() {
        return Err(Error::Geometry(format!(
            "binning {} values of {source} into {} slots, expected {}",
            src.len(),
            out.len(),
            dims.len()
        )));
    }
    if out.is_empty() {
        return Ok(());
    }
    if spec.is_identity() {
        out.copy_from_slice(src);
        return Ok(());
    }
    let (fr, fc) = (spec.factor_rows, spec.factor_cols);
    let src_plane = source.panel_len();
    let cols = source.cols;
    // One task per output row: each reads a disjoint band of source rows.
    let bin_row = |(k, line): (usize, &mut [f32])| {
        let plane = k / dims.rows;
        let br = k % dims.rows;
        let panel = &src[plane * src_plane..(plane + 1) * src_plane];
        let r0 = br * fr;
        let r1 = (r0 + fr).min(source.rows);
        for (bc, o) in line.iter_mut().enumerate() {
            let c0 = bc * fc;
            let c1 = (c0 + fc).min(cols);
            let mut sum = 0.0f64;
            for r in r0..r1 {
                for &v in &panel[r * cols + c0..r * cols + c1] {
                    sum += f64::from(v);
                }
            }
            *o = (sum / ((r1 - r0) * (c1 - c0)) as f64) as f32;
        }
    };
    if spec.threads > 1 {
        parallel::run(spec.threads, || {
            out.par_chunks_mut(dims.cols).enumerate().for_each(bin_row)
        });
    } else {
        out.chunks_mut(dims.cols).enumerate().for_each(bin_row);
    }
    Ok(())
}

/// Expands a binned batch by replicating each bin over its source pixels.
pub fn debin(binned: &BinnedBatch, spec: &BinSpec) -> Result<EventBatch> {
    let mut values = vec![0f32; binned.source_dims.len()];
    debin_into(&binned.values, binned.source_dims, spec, &mut values)?;
    let raw = 2 * values.len() as u64;
    Ok(EventBatch::from_parts(binned.source_dims, values, raw))
}

pub fn debin_into(binned: &[f32], source: Dims4, spec: &BinSpec, out: &mut [f32]) -> Result<()> {
    spec.validate()?;
    let dims = spec.binned_dims(source);
    if binned.len() != dims.len() || out.len() != source.len() {
        return Err(Error::Geometry(format!(
            "debinning {} values to {source}: expected {} binned values",
            binned.len(),
            dims.len()
        )));
    }
    if out.is_empty() {
        return Ok(());
    }
    if spec.is_identity() {
        out.copy_from_slice(binned);
        return Ok(());
    }
    let (fr, fc) = (spec.factor_rows, spec.factor_cols);
    let expand_row = |(k, line): (usize, &mut [f32])| {
        let plane = k / source.rows;
        let br = (k % source.rows) / fr;
        let brow = &binned[(plane * dims.rows + br) * dims.cols..][..dims.cols];
        for (chunk, &v) in line.chunks_mut(fc).zip(brow) {
            chunk.fill(v);
        }
    };
    if spec.threads > 1 {
        parallel::run(spec.threads, || {
            out.par_chunks_mut(source.cols)
                .enumerate()
                .for_each(expand_row)
        });
    } else {
        out.chunks_mut(source.cols).enumerate().for_each(expand_row);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn batch(rows: usize, cols: usize, v: Vec<f32>) -> EventBatch {
        EventBatch::new(Dims4::new(1, 1, rows, cols).unwrap(), v).unwrap()
    }

    #[test]
    fn mean_of_full_bin() {
        let b = bin(&batch(2, 2, vec![1.0, 3.0, 5.0, 7.0]), &BinSpec::new(2, 2)).unwrap();
        assert_eq!(b.values, vec![4.0]);
        assert_eq!((b.dims.rows, b.dims.cols), (1, 1));
    }

    #[test]
    fn partial_edge_bin() {
        let b = bin(&batch(1, 3, vec![1.0, 2.0, 9.0]), &BinSpec::new(1, 2)).unwrap();
        assert_eq!(b.values, vec![1.5, 9.0]);
        let back = debin(&b, &BinSpec::new(1, 2)).unwrap();
        assert_eq!(back.values(), &[1.5, 1.5, 9.0]);
    }

    #[test]
    fn replication() {
        let binned = BinnedBatch {
            dims: Dims4::new(1, 1, 1, 1).unwrap(),
            values: vec![4.0],
            source_dims: Dims4::new(1, 1, 2, 2).unwrap(),
        };
        assert_eq!(
            debin(&binned, &BinSpec::new(2, 2)).unwrap().values(),
            &[4.0; 4]
        );
    }

    #[test]
    fn debin_rejects_inconsistent_dims() {
        let binned = BinnedBatch {
            dims: Dims4::new(1, 1, 1, 1).unwrap(),
            values: vec![4.0],
            source_dims: Dims4::new(1, 1, 4, 4).unwrap(),
        };
        assert!(matches!(
            debin(&binned, &BinSpec::new(2, 2)),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn never_mixes_panels() {
        let dims = Dims4::new(2, 2, 2, 2).unwrap();
        let vals: Vec<f32> = (0..16).map(|i| (i / 4) as f32).collect();
        let b = bin(&EventBatch::new(dims, vals).unwrap(), &BinSpec::new(2, 2)).unwrap();
        assert_eq!(b.values, vec![0.0, 1.0, 2.0, 3.0]);
    }

    fn arb_batch() -> impl Strategy<Value = EventBatch> {
        (1usize..3, 1usize..3, 1usize..13, 1usize..13).prop_flat_map(|(e, p, r, c)| {
            let dims = Dims4::new(e, p, r, c).unwrap();
            proptest::collection::vec(-1e5f32..1e5, dims.len())
                .prop_map(move |v| EventBatch::new(dims, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn identity_factor_is_bitwise(b in arb_batch()) {
            let spec = BinSpec::new(1, 1);
            let binned = bin(&b, &spec).unwrap();
            let back = debin(&binned, &spec).unwrap();
            prop_assert_eq!(back.values(), b.values());
        }

        #[test]
        fn bin_of_debin_recovers_bins(b in arb_batch(), fr in 1usize..4, fc in 1usize..4) {
            let spec = BinSpec::new(fr, fc);
            let binned = bin(&b, &spec).unwrap();
            let again = bin(&debin(&binned, &spec).unwrap(), &spec).unwrap();
            for (x, y) in binned.values.iter().zip(&again.values) {
                prop_assert!((x - y).abs() <= 1e-6 * x.abs().max(1e-30));
            }
        }

        #[test]
        fn full_bins_conserve_sum(b in arb_batch(), fr in 1usize..4, fc in 1usize..4) {
            let spec = BinSpec::new(fr, fc);
            let binned = bin(&b, &spec).unwrap();
            let d = b.dims();
            let (full_r, full_c) = (d.rows / fr, d.cols / fc);
            for plane in 0..d.events * d.panels {
                let (e, p) = (plane / d.panels, plane % d.panels);
                let mut src_sum = 0.0f64;
                let mut abs_sum = 0.0f64;
                for r in 0..full_r * fr {
                    for c in 0..full_c * fc {
                        src_sum += f64::from(b.get(e, p, r, c));
                        abs_sum += f64::from(b.get(e, p, r, c)).abs();
                    }
                }
                let mut bin_sum = 0.0f64;
                for br in 0..full_r {
                    for bc in 0..full_c {
                        let k = (plane * binned.dims.rows + br) * binned.dims.cols + bc;
                        bin_sum += f64::from(binned.values[k]) * (fr * fc) as f64;
                    }
                }
                prop_assert!((src_sum - bin_sum).abs() <= 1e-6 * abs_sum.max(1.0));
            }
        }

        #[test]
        fn thread_count_does_not_change_bytes(b in arb_batch(), threads in 2usize..5) {
            let serial = BinSpec::new(3, 2);
            let par = BinSpec { threads, ..serial };
            let x = bin(&b, &serial).unwrap();
            let y = bin(&b, &par).unwrap();
            prop_assert_eq!(&x.values, &y.values);
            prop_assert_eq!(debin(&x, &serial).unwrap(), debin(&y, &par).unwrap());
        }
    }
}
