//! Groupwise round-to-nearest quantization.

use super::{assemble, fit_grids, QuantConfig, QuantizedMatrix, Quantizer};
use crate::bitpack::check_bits;
use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

/// Snaps every weight to the nearest point of its group's min-max grid.
#[derive(Clone, Copy, Debug, Default)]
pub struct Rtn;

impl Quantizer for Rtn {
    fn name(&self) -> &'static str {
        "rtn"
    }

    fn quantize(
        &self,
        w: &DenseMatrix,
        _calib: Option<&DenseMatrix>,
        cfg: &QuantConfig,
    ) -> Result<QuantizedMatrix> {
        quantize_rtn(w, cfg.bits, cfg.group_size)
    }

    fn matvec(&self, q: &QuantizedMatrix, v: &[f64]) -> Result<Vec<f64>> {
        q.matvec_fused(v)
    }

    fn rmatvec(&self, q: &QuantizedMatrix, u: &[f64]) -> Result<Vec<f64>> {
        q.rmatvec_fused(u)
    }
}

/// Round-to-nearest with per-(row, group) scale `(max-min)/(2^b-1)` and zero `min`.
///
/// A flat group gets scale 1 and all-zero codes. `group_size = None` uses
/// one group per row.
pub fn quantize_rtn(
    w: &DenseMatrix,
    bits: u8,
    group_size: Option<usize>,
) -> Result<QuantizedMatrix> {
    check_bits(bits)?;
    let group = QuantConfig {
        bits,
        group_size,
        damping: 0.0,
    }
    .resolve_group(w.cols())?;
    if !w.is_finite() {
        return Err(Error::Numeric("cannot quantize non-finite weights".into()));
    }
    let grids = fit_grids(w, bits, group);
    let gpr = w.cols() / group;
    let mut codes = Vec::with_capacity(w.len());
    for r in 0..w.rows() {
        for (c, &v) in w.row(r).iter().enumerate() {
            codes.push(grids[r * gpr + c / group].code(v));
        }
    }
    assemble(w.rows(), w.cols(), bits, group, &codes, &grids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitpack::SUPPORTED_BITS;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_aligned_row() {
        let w = DenseMatrix::from_rows(&[[0.0, 1.0, 2.0, 3.0]]).unwrap();
        let q = quantize_rtn(&w, 2, Some(4)).unwrap();
        assert_eq!(q.zeros(), &[0.0]);
        assert_eq!(q.scales(), &[1.0]);
        assert_eq!(q.codes().unpack(), vec![0, 1, 2, 3]);
        assert_eq!(q.dequantize(), w);
    }

    #[test]
    fn flat_row() {
        let w = DenseMatrix::from_rows(&[[2.5, 2.5, 2.5], [-0.75, -0.75, -0.75]]).unwrap();
        let q = quantize_rtn(&w, 3, None).unwrap();
        assert_eq!(q.scales(), &[1.0, 1.0]);
        assert!(q.codes().unpack().iter().all(|&c| c == 0));
        assert_eq!(q.dequantize(), w);
    }

    #[test]
    fn grid_aligned_roundtrip_exact() {
        // w = s*code + z with f32-exact s, z and both grid ends present.
        let w =
            DenseMatrix::from_rows(&[[-1.0, -0.5, 0.5, 0.0, -0.25, -0.75, -1.0, 0.75]]).unwrap();
        let q = quantize_rtn(&w, 3, None).unwrap();
        assert_eq!(q.scales(), &[0.25]);
        assert_eq!(q.dequantize(), w);
    }

    #[test]
    fn group_must_divide_cols() {
        let w = DenseMatrix::zeros(2, 6);
        assert!(matches!(
            quantize_rtn(&w, 4, Some(4)),
            Err(Error::Config(_))
        ));
        assert!(matches!(quantize_rtn(&w, 5, None), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_non_finite() {
        let w = DenseMatrix::from_rows(&[[0.0, f64::NAN]]).unwrap();
        assert!(matches!(quantize_rtn(&w, 4, None), Err(Error::Numeric(_))));
    }

    #[test]
    fn requantizing_dequantized_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &bits in &SUPPORTED_BITS {
            for group in [8, 16] {
                let w = DenseMatrix::randn(6, 16, 1.0, &mut rng);
                let q = quantize_rtn(&w, bits, Some(group)).unwrap();
                let q2 = quantize_rtn(&q.dequantize(), bits, Some(group)).unwrap();
                assert_eq!(q.codes(), q2.codes(), "bits {bits} group {group}");
            }
        }
    }

    #[test]
    fn pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = DenseMatrix::randn(4, 8, 1.0, &mut rng);
        assert_eq!(
            quantize_rtn(&w, 3, Some(4)).unwrap(),
            quantize_rtn(&w, 3, Some(4)).unwrap()
        );
    }

    proptest! {
        #[test]
        fn error_within_half_step(
            seed in 0u64..10_000,
            bits in prop::sample::select(SUPPORTED_BITS.to_vec()),
            group in prop::sample::select(vec![1usize, 2, 4, 8, 16]),
            spread in 1e-3f64..1e3,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = DenseMatrix::randn(3, 16, spread, &mut rng);
            let q = quantize_rtn(&w, bits, Some(group)).unwrap();
            let wh = q.dequantize();
            for r in 0..3 {
                for c in 0..16 {
                    let err = (w.get(r, c) - wh.get(r, c)).abs();
                    prop_assert!(err <= q.scale(r, c) / 2.0 * (1.0 + 1e-12));
                    prop_assert!(q.code(r, c) < 1 << bits);
                }
            }
        }
    }
}
