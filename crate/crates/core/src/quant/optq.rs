//! OPTQ-style error-feedback quantization.
//!
//! Columns are quantized left to right. After rounding column `j`, its
//! rounding error is scaled by the inverse-Hessian pivot and pushed into the
//! columns not yet quantized, using `H = XᵀX + λ·mean(diag XᵀX)·I` from the
//! calibration inputs `X`. The sweep uses the upper Cholesky factor `U` of
//! `H⁻¹` (`H⁻¹ = UᵀU`): row `j` of `U` carries the same coefficients as row
//! `j` of the inverse Hessian restricted to the columns still unquantized.

use super::{assemble, fit_grids, QuantConfig, QuantizedMatrix, Quantizer};
use crate::bitpack::check_bits;
use crate::error::{Error, Result};
use crate::tensor::{cholesky, spd_inverse, DenseMatrix};

/// Default damping, as a fraction of the mean Hessian diagonal.
pub const DEFAULT_DAMPING: f64 = 0.01;

#[derive(Clone, Copy, Debug, Default)]
pub struct Optq;

impl Quantizer for Optq {
    fn name(&self) -> &'static str {
        "optq"
    }

    fn quantize(
        &self,
        w: &DenseMatrix,
        calib: Option<&DenseMatrix>,
        cfg: &QuantConfig,
    ) -> Result<QuantizedMatrix> {
        let calib = calib.ok_or_else(|| Error::config("optq needs calibration inputs"))?;
        quantize_optq(w, calib, cfg.bits, cfg.group_size, cfg.damping)
    }

    fn matvec(&self, q: &QuantizedMatrix, v: &[f64]) -> Result<Vec<f64>> {
        q.matvec_fused(v)
    }

    fn rmatvec(&self, q: &QuantizedMatrix, u: &[f64]) -> Result<Vec<f64>> {
        q.rmatvec_fused(u)
    }
}

/// Damped Hessian proxy `XᵀX + λ·mean(diag XᵀX)·I`.
pub(crate) fn hessian_proxy(calib: &DenseMatrix, damping: f64) -> DenseMatrix {
    let mut h = calib
        .transpose()
        .matmul(calib)
        .expect("square by construction");
    let n = h.rows();
    let mean_diag = (0..n).map(|i| h.get(i, i)).sum::<f64>() / n as f64;
    let damp = damping * mean_diag;
    for i in 0..n {
        h.set(i, i, h.get(i, i) + damp);
    }
    h
}

/// Quantizes `w` (rows = outputs, cols = inputs) against calibration rows `calib`.
///
/// Grids are fitted on the original `w` before the sweep, so codes are
/// directly comparable with [`super::quantize_rtn`].
pub fn quantize_optq(
    w: &DenseMatrix,
    calib: &DenseMatrix,
    bits: u8,
    group_size: Option<usize>,
    damping: f64,
) -> Result<QuantizedMatrix> {
    check_bits(bits)?;
    let group = QuantConfig {
        bits,
        group_size,
        damping,
    }
    .resolve_group(w.cols())?;
    if calib.cols() != w.cols() {
        return Err(Error::dim(format!(
            "calibration has {} features, weights have {} columns",
            calib.cols(),
            w.cols()
        )));
    }
    if calib.rows() == 0 {
        return Err(Error::dim("calibration set is empty"));
    }
    if !(damping >= 0.0) {
        return Err(Error::config(format!(
            "damping must be non-negative, got {damping}"
        )));
    }
    if !w.is_finite() || !calib.is_finite() {
        return Err(Error::Numeric(
            "non-finite weights or calibration inputs".into(),
        ));
    }

    let h = hessian_proxy(calib, damping);
    let h_inv = spd_inverse(&h)?;
    let upper = cholesky(&h_inv)?.transpose();

    let grids = fit_grids(w, bits, group);
    let gpr = w.cols() / group;
    let cols = w.cols();
    let mut work = w.clone();
    let mut codes = vec![0u32; w.len()];

    for j in 0..cols {
        let pivot = upper.get(j, j);
        let tail = &upper.row(j)[j + 1..];
        for r in 0..w.rows() {
            let grid = &grids[r * gpr + j / group];
            let row = work.row_mut(r);
            let code = grid.code(row[j]);
            codes[r * cols + j] = code;
            let err = (row[j] - grid.value(code)) / pivot;
            if err != 0.0 {
                for (wk, &hk) in row[j + 1..].iter_mut().zip(tail) {
                    *wk -= err * hk;
                }
            }
        }
    }
    assemble(w.rows(), cols, bits, group, &codes, &grids)
}

#[cfg(test)]
mod tests {
    use super::super::{proxy_loss, quantize_rtn};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Reference sweep: full inverse Hessian, downdated after every column.
    fn optq_downdate_oracle(
        w: &DenseMatrix,
        calib: &DenseMatrix,
        bits: u8,
        damping: f64,
    ) -> Vec<u32> {
        let grids = fit_grids(w, bits, w.cols());
        let mut h_inv = spd_inverse(&hessian_proxy(calib, damping)).unwrap();
        let mut work = w.clone();
        let n = w.cols();
        let mut codes = vec![0; w.len()];
        for j in 0..n {
            let d = h_inv.get(j, j);
            for r in 0..w.rows() {
                let g = &grids[r];
                let code = g.code(work.get(r, j));
                codes[r * n + j] = code;
                let err = (work.get(r, j) - g.value(code)) / d;
                for k in j + 1..n {
                    work.set(r, k, work.get(r, k) - err * h_inv.get(j, k));
                }
            }
            let col: Vec<f64> = (0..n).map(|i| h_inv.get(i, j)).collect();
            for a in 0..n {
                for b in 0..n {
                    h_inv.set(a, b, h_inv.get(a, b) - col[a] * col[b] / d);
                }
            }
        }
        codes
    }

    pub(crate) fn correlated_calib(
        rng: &mut ChaCha8Rng,
        samples: usize,
        dim: usize,
    ) -> DenseMatrix {
        let z = DenseMatrix::randn(samples, dim, 1.0, rng);
        let mix = DenseMatrix::randn(dim, dim, 1.0 / (dim as f64).sqrt(), rng);
        let shared = DenseMatrix::randn(samples, 1, 1.0, rng);
        let x = z.matmul(&mix).unwrap();
        DenseMatrix::from_fn(samples, dim, |i, j| x.get(i, j) + 0.8 * shared.get(i, 0))
    }

    #[test]
    fn cholesky_sweep_matches_downdate_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for bits in [2, 3, 4] {
            let w = DenseMatrix::randn(6, 12, 1.0, &mut rng);
            let x = correlated_calib(&mut rng, 40, 12);
            let q = quantize_optq(&w, &x, bits, None, 0.01).unwrap();
            assert_eq!(q.codes().unpack(), optq_downdate_oracle(&w, &x, bits, 0.01));
        }
    }

    #[test]
    fn on_grid_weights_match_rtn() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w0 = DenseMatrix::randn(4, 8, 1.0, &mut rng);
        let w = quantize_rtn(&w0, 3, None).unwrap().dequantize();
        let x = correlated_calib(&mut rng, 20, 8);
        let rtn = quantize_rtn(&w, 3, None).unwrap();
        let optq = quantize_optq(&w, &x, 3, None, 0.01).unwrap();
        assert_eq!(optq.codes(), rtn.codes());
    }

    #[test]
    fn single_entry_matches_rtn() {
        let w = DenseMatrix::from_rows(&[[0.37]]).unwrap();
        let x = DenseMatrix::from_rows(&[[2.0]]).unwrap();
        assert_eq!(
            quantize_optq(&w, &x, 4, None, 0.01).unwrap(),
            quantize_rtn(&w, 4, None).unwrap()
        );
    }

    #[test]
    fn diagonal_hessian_degenerates_to_rtn() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = DenseMatrix::randn(5, 8, 1.0, &mut rng);
        let mut e = DenseMatrix::zeros(1, 8);
        e.set(0, 3, 1.0);
        let q = quantize_optq(&w, &e, 3, None, 0.01).unwrap();
        assert_eq!(q, quantize_rtn(&w, 3, None).unwrap());
    }

    #[test]
    fn beats_rtn_on_correlated_inputs() {
        let mut wins = 0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = DenseMatrix::randn(16, 16, 1.0, &mut rng);
            let x = correlated_calib(&mut rng, 64, 16);
            let o = proxy_loss(&w, &quantize_optq(&w, &x, 3, None, 0.01).unwrap(), &x).unwrap();
            let r = proxy_loss(&w, &quantize_rtn(&w, 3, None).unwrap(), &x).unwrap();
            wins += usize::from(o < r);
        }
        assert!(wins >= 18, "optq strictly better in only {wins}/20");
    }

    #[test]
    fn errors() {
        let w = DenseMatrix::zeros(2, 4);
        assert!(matches!(
            quantize_optq(&w, &DenseMatrix::zeros(3, 5), 4, None, 0.01),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            quantize_optq(&w, &DenseMatrix::zeros(0, 4), 4, None, 0.01),
            Err(Error::Dimension(_))
        ));
        // all-zero calibration leaves nothing to damp with
        assert!(matches!(
            quantize_optq(&w, &DenseMatrix::zeros(3, 4), 4, None, 0.01),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            Optq.quantize(&w, None, &QuantConfig::new(4)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let w = DenseMatrix::randn(4, 8, 1.0, &mut rng);
        let x = correlated_calib(&mut rng, 16, 8);
        assert_eq!(
            quantize_optq(&w, &x, 3, Some(4), 0.01).unwrap(),
            quantize_optq(&w, &x, 3, Some(4), 0.01).unwrap()
        );
    }
}
