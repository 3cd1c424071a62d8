//! Quantized weight storage and the quantizer interface.
//!
//! A [`QuantizedMatrix`] stores b-bit codes packed with [`crate::bitpack`]
//! plus one scale and zero per (row, column-group). Dequantization is the
//! affine map `w = s · code + z`, broadcast over each group.
//!
//! Scales and zeros are held as `f64` but always carry values exactly
//! representable in `f32`, so that checkpoints (which store them as `f32`)
//! roundtrip bit-exactly.

mod optq;
mod rtn;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bitpack::{check_bits, PackedCodes};
use crate::error::{Error, Result};
use crate::tensor::{dot, DenseMatrix};

pub use optq::{quantize_optq, Optq, DEFAULT_DAMPING};
pub use rtn::{quantize_rtn, Rtn};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedMatrix {
    rows: usize,
    cols: usize,
    group_size: usize,
    codes: PackedCodes,
    scales: Vec<f64>,
    zeros: Vec<f64>,
}

impl QuantizedMatrix {
    /// Assembles a matrix from parts, checking every structural invariant.
    ///
    /// `scales` and `zeros` are laid out row-major over `(row, group)`.
    pub fn new(
        rows: usize,
        cols: usize,
        group_size: usize,
        codes: PackedCodes,
        scales: Vec<f64>,
        zeros: Vec<f64>,
    ) -> Result<Self> {
        check_bits(codes.bits())?;
        if group_size == 0 || !cols.is_multiple_of(group_size) {
            return Err(Error::config(format!(
                "group size {group_size} does not divide {cols} columns"
            )));
        }
        if codes.count() != rows * cols {
            return Err(Error::Format(format!(
                "{} codes for a {rows}x{cols} matrix",
                codes.count()
            )));
        }
        let groups = rows * (cols / group_size);
        if scales.len() != groups || zeros.len() != groups {
            return Err(Error::Format(format!(
                "expected {groups} scales and zeros, found {} and {}",
                scales.len(),
                zeros.len()
            )));
        }
        if let Some(s) = scales.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::Format(format!(
                "scale {s} is not strictly positive and finite"
            )));
        }
        if let Some(z) = zeros.iter().find(|z| !z.is_finite()) {
            return Err(Error::Format(format!("zero point {z} is not finite")));
        }
        Ok(Self {
            rows,
            cols,
            group_size,
            codes,
            scales,
            zeros,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn bits(&self) -> u8 {
        self.codes.bits()
    }

    #[inline]
    pub fn group_size(&self) -> usize {
        self.group_size
    }

    #[inline]
    pub fn groups_per_row(&self) -> usize {
        self.cols / self.group_size
    }

    pub fn codes(&self) -> &PackedCodes {
        &self.codes
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn zeros(&self) -> &[f64] {
        &self.zeros
    }

    #[inline]
    pub fn code(&self, row: usize, col: usize) -> u32 {
        self.codes.get(row * self.cols + col)
    }

    #[inline]
    pub fn scale(&self, row: usize, col: usize) -> f64 {
        self.scales[row * self.groups_per_row() + col / self.group_size]
    }

    #[inline]
    pub fn zero(&self, row: usize, col: usize) -> f64 {
        self.zeros[row * self.groups_per_row() + col / self.group_size]
    }

    /// Full high-precision materialization, freshly allocated.
    pub fn dequantize(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            self.fill_row(r, out.row_mut(r));
        }
        out
    }

    /// One row of the materialization; allocates only `cols` values.
    pub fn dequantize_row(&self, row: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.cols];
        self.dequantize_row_into(row, &mut out)?;
        Ok(out)
    }

    pub fn dequantize_row_into(&self, row: usize, out: &mut [f64]) -> Result<()> {
        if row >= self.rows {
            return Err(Error::Index(format!(
                "row {row} of a {}-row matrix",
                self.rows
            )));
        }
        if out.len() != self.cols {
            return Err(Error::dim(format!(
                "row buffer of {} for {} columns",
                out.len(),
                self.cols
            )));
        }
        self.fill_row(row, out);
        Ok(())
    }

    fn fill_row(&self, row: usize, out: &mut [f64]) {
        let gpr = self.groups_per_row();
        let base = row * self.cols;
        for g in 0..gpr {
            let s = self.scales[row * gpr + g];
            let z = self.zeros[row * gpr + g];
            for c in g * self.group_size..(g + 1) * self.group_size {
                out[c] = s * self.codes.get(base + c) as f64 + z;
            }
        }
    }

    /// `Ŵ·v` computed from codes directly; no row is materialized.
    pub fn matvec_fused(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::dim(format!(
                "matvec with {} entries for {} columns",
                v.len(),
                self.cols
            )));
        }
        let gpr = self.groups_per_row();
        let group_sums: Vec<f64> = v.chunks(self.group_size).map(|c| c.iter().sum()).collect();
        let mut out = vec![0.0; self.rows];
        for (r, o) in out.iter_mut().enumerate() {
            let base = r * self.cols;
            let mut acc = 0.0;
            for g in 0..gpr {
                let mut cv = 0.0;
                for c in g * self.group_size..(g + 1) * self.group_size {
                    cv += self.codes.get(base + c) as f64 * v[c];
                }
                acc += self.scales[r * gpr + g] * cv + self.zeros[r * gpr + g] * group_sums[g];
            }
            *o = acc;
        }
        Ok(out)
    }

    /// `uᵀ·Ŵ` (length `cols`) computed from codes directly.
    pub fn rmatvec_fused(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.rows {
            return Err(Error::dim(format!(
                "rmatvec with {} entries for {} rows",
                u.len(),
                self.rows
            )));
        }
        let gpr = self.groups_per_row();
        let mut out = vec![0.0; self.cols];
        for (r, &ur) in u.iter().enumerate() {
            if ur == 0.0 {
                continue;
            }
            let base = r * self.cols;
            for g in 0..gpr {
                let s = ur * self.scales[r * gpr + g];
                let z = ur * self.zeros[r * gpr + g];
                for c in g * self.group_size..(g + 1) * self.group_size {
                    out[c] += s * self.codes.get(base + c) as f64 + z;
                }
            }
        }
        Ok(out)
    }

    /// Bytes of packed codes plus `f32` scales and zeros.
    pub fn storage_bytes(&self) -> usize {
        self.codes.byte_len() + 8 * self.scales.len()
    }

    /// Bytes of a full `f64` materialization.
    pub fn materialized_bytes(&self) -> usize {
        self.rows * self.cols * std::mem::size_of::<f64>()
    }

    /// SHA-256 over shape, bit width, packed words, scales and zeros.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        self.hash_into(&mut h);
        h.finalize().into()
    }

    pub(crate) fn hash_into(&self, h: &mut Sha256) {
        h.update((self.rows as u64).to_le_bytes());
        h.update((self.cols as u64).to_le_bytes());
        h.update([self.bits()]);
        h.update((self.group_size as u64).to_le_bytes());
        for w in self.codes.words() {
            h.update(w.to_le_bytes());
        }
        for v in self.scales.iter().chain(&self.zeros) {
            h.update(v.to_bits().to_le_bytes());
        }
    }
}

/// Settings shared by all quantizers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u8,
    /// Columns per scale/zero group; `None` means one group per row.
    pub group_size: Option<usize>,
    /// OPTQ damping as a fraction of the mean Hessian diagonal.
    pub damping: f64,
}

impl QuantConfig {
    pub fn new(bits: u8) -> Self {
        Self {
            bits,
            group_size: None,
            damping: DEFAULT_DAMPING,
        }
    }

    pub fn with_group_size(mut self, g: usize) -> Self {
        self.group_size = Some(g);
        self
    }

    pub fn resolve_group(&self, cols: usize) -> Result<usize> {
        let g = self.group_size.unwrap_or(cols);
        if g == 0 || !cols.is_multiple_of(g) {
            return Err(Error::config(format!(
                "group size {g} does not divide {cols} columns"
            )));
        }
        Ok(g)
    }
}

/// A black-box weight quantizer.
///
/// Implementations only need `quantize`. `matvec`/`rmatvec` are the
/// quantizer-supplied products used by the matvec materialization strategy;
/// the defaults dequantize one row at a time.
pub trait Quantizer: Send + Sync {
    fn name(&self) -> &'static str;

    fn quantize(
        &self,
        w: &DenseMatrix,
        calib: Option<&DenseMatrix>,
        cfg: &QuantConfig,
    ) -> Result<QuantizedMatrix>;

    fn matvec(&self, q: &QuantizedMatrix, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != q.cols() {
            return Err(Error::dim(format!(
                "matvec with {} entries for {} columns",
                v.len(),
                q.cols()
            )));
        }
        let mut row = vec![0.0; q.cols()];
        (0..q.rows())
            .map(|r| {
                q.dequantize_row_into(r, &mut row)?;
                Ok(dot(&row, v))
            })
            .collect()
    }

    fn rmatvec(&self, q: &QuantizedMatrix, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != q.rows() {
            return Err(Error::dim(format!(
                "rmatvec with {} entries for {} rows",
                u.len(),
                q.rows()
            )));
        }
        let mut row = vec![0.0; q.cols()];
        let mut out = vec![0.0; q.cols()];
        for (r, &ur) in u.iter().enumerate() {
            q.dequantize_row_into(r, &mut row)?;
            for (o, w) in out.iter_mut().zip(&row) {
                *o += ur * w;
            }
        }
        Ok(out)
    }
}

/// Looks up a quantizer by its CLI name (`rtn` or `optq`).
pub fn quantizer_by_name(name: &str) -> Result<Arc<dyn Quantizer>> {
    match name {
        "rtn" => Ok(Arc::new(Rtn)),
        "optq" => Ok(Arc::new(Optq)),
        other => Err(Error::config(format!(
            "unknown quantizer {other:?}; expected \"rtn\" or \"optq\""
        ))),
    }
}

/// Calibration proxy loss `‖X·Wᵀ − X·Ŵᵀ‖²_F`.
pub fn proxy_loss(w: &DenseMatrix, q: &QuantizedMatrix, calib: &DenseMatrix) -> Result<f64> {
    let diff = w.sub(&q.dequantize())?;
    Ok(calib.matmul_t(&diff)?.frobenius_sq())
}

fn f32_down(x: f64) -> f64 {
    let f = x as f32;
    if (f as f64) > x {
        f.next_down() as f64
    } else {
        f as f64
    }
}

fn f32_up(x: f64) -> f64 {
    let f = x as f32;
    if (f as f64) < x {
        f.next_up() as f64
    } else {
        f as f64
    }
}

/// Min-max affine grid for one group, snapped outward to `f32` values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Grid {
    pub scale: f64,
    pub zero: f64,
    pub max_code: u32,
}

impl Grid {
    pub fn fit(values: &[f64], bits: u8) -> Grid {
        let max_code = (1u32 << bits) - 1;
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let zero = f32_down(lo);
        let scale = if hi == lo {
            1.0
        } else {
            f32_up((hi - zero) / max_code as f64)
        };
        Grid {
            scale,
            zero,
            max_code,
        }
    }

    #[inline]
    pub fn code(&self, w: f64) -> u32 {
        ((w - self.zero) / self.scale)
            .round()
            .clamp(0.0, self.max_code as f64) as u32
    }

    #[inline]
    pub fn value(&self, code: u32) -> f64 {
        self.scale * code as f64 + self.zero
    }
}

/// Fits one grid per (row, group) of `w`, returned row-major.
pub(crate) fn fit_grids(w: &DenseMatrix, bits: u8, group: usize) -> Vec<Grid> {
    let mut grids = Vec::with_capacity(w.rows() * w.cols() / group);
    for r in 0..w.rows() {
        for chunk in w.row(r).chunks(group) {
            grids.push(Grid::fit(chunk, bits));
        }
    }
    grids
}

pub(crate) fn assemble(
    rows: usize,
    cols: usize,
    bits: u8,
    group: usize,
    codes: &[u32],
    grids: &[Grid],
) -> Result<QuantizedMatrix> {
    let packed = PackedCodes::pack(codes, bits)?;
    let scales = grids.iter().map(|g| g.scale).collect();
    let zeros = grids.iter().map(|g| g.zero).collect();
    QuantizedMatrix::new(rows, cols, group, packed, scales, zeros)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn example() -> QuantizedMatrix {
        let codes = PackedCodes::pack(&[0, 1, 2, 3], 2).unwrap();
        QuantizedMatrix::new(2, 2, 2, codes, vec![0.5, 1.0], vec![-1.0, 0.0]).unwrap()
    }

    #[test]
    fn dequantize_hand_example() {
        let w = example().dequantize();
        assert_eq!(
            w,
            DenseMatrix::from_rows(&[[-1.0, -0.5], [2.0, 3.0]]).unwrap()
        );
    }

    #[test]
    fn identity_scaling_gives_codes() {
        let codes = PackedCodes::pack(&[1, 5, 7, 0, 3, 2], 3).unwrap();
        let q = QuantizedMatrix::new(2, 3, 3, codes, vec![1.0; 2], vec![0.0; 2]).unwrap();
        assert_eq!(q.dequantize().as_slice(), &[1.0, 5.0, 7.0, 0.0, 3.0, 2.0]);
    }

    #[test]
    fn dequantize_rows() {
        let q = example();
        assert_eq!(q.dequantize_row(0).unwrap(), vec![-1.0, -0.5]);
        let full = q.dequantize();
        let cat: Vec<f64> = (0..2).flat_map(|r| q.dequantize_row(r).unwrap()).collect();
        assert_eq!(cat, full.as_slice());
        assert!(matches!(q.dequantize_row(2), Err(Error::Index(_))));
    }

    #[test]
    fn single_row_matrix() {
        let codes = PackedCodes::pack(&[3, 0, 1, 2], 2).unwrap();
        let q = QuantizedMatrix::new(1, 4, 2, codes, vec![0.25, 2.0], vec![1.0, -3.0]).unwrap();
        assert_eq!(q.dequantize_row(0).unwrap(), q.dequantize().as_slice());
    }

    #[test]
    fn constructor_validates() {
        let codes = PackedCodes::pack(&[0, 1, 2, 3], 2).unwrap();
        assert!(
            QuantizedMatrix::new(2, 2, 2, codes.clone(), vec![0.0, 1.0], vec![0.0; 2]).is_err()
        );
        assert!(QuantizedMatrix::new(2, 2, 3, codes.clone(), vec![1.0; 2], vec![0.0; 2]).is_err());
        assert!(QuantizedMatrix::new(2, 2, 1, codes, vec![1.0; 2], vec![0.0; 2]).is_err());
    }

    fn random_q(seed: u64, rows: usize, cols: usize, bits: u8) -> QuantizedMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = DenseMatrix::randn(rows, cols, 1.0, &mut rng);
        quantize_rtn(&w, bits, Some(cols / 2)).unwrap()
    }

    #[test]
    fn matvec_zero_and_basis() {
        let q = random_q(1, 5, 6, 3);
        assert!(q.matvec_fused(&[0.0; 6]).unwrap().iter().all(|&v| v == 0.0));
        let dense = q.dequantize();
        for j in 0..6 {
            let mut e = vec![0.0; 6];
            e[j] = 1.0;
            let col: Vec<f64> = (0..5).map(|i| dense.get(i, j)).collect();
            assert_eq!(q.matvec_fused(&e).unwrap(), col);
            assert_eq!(Rtn.matvec(&q, &e).unwrap(), col);
        }
    }

    struct RowOnly;
    impl Quantizer for RowOnly {
        fn name(&self) -> &'static str {
            "row-only"
        }
        fn quantize(
            &self,
            w: &DenseMatrix,
            _: Option<&DenseMatrix>,
            cfg: &QuantConfig,
        ) -> Result<QuantizedMatrix> {
            quantize_rtn(w, cfg.bits, cfg.group_size)
        }
    }

    #[test]
    fn matvec_hooks_match_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..10 {
            let q = random_q(seed, 7, 8, [2, 3, 4, 8][seed as usize % 4]);
            let v = DenseMatrix::randn(8, 1, 1.0, &mut rng);
            let u = DenseMatrix::randn(1, 7, 1.0, &mut rng);
            let dense = q.dequantize();
            let want = dense.matmul(&v).unwrap();
            let want_t = u.matmul(&dense).unwrap();
            for (got, got_t) in [
                (
                    q.matvec_fused(v.as_slice()).unwrap(),
                    q.rmatvec_fused(u.as_slice()).unwrap(),
                ),
                (
                    RowOnly.matvec(&q, v.as_slice()).unwrap(),
                    RowOnly.rmatvec(&q, u.as_slice()).unwrap(),
                ),
            ] {
                let got = DenseMatrix::new(7, 1, got).unwrap();
                let got_t = DenseMatrix::new(1, 8, got_t).unwrap();
                assert!(got.max_rel_err(&want, 1e-12) <= 1e-10);
                assert!(got_t.max_rel_err(&want_t, 1e-12) <= 1e-10);
            }
        }
        let q = random_q(0, 3, 4, 4);
        assert!(matches!(
            q.matvec_fused(&[1.0; 3]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            RowOnly.matvec(&q, &[1.0; 3]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn grid_snaps_to_f32() {
        let g = Grid::fit(&[0.1, 0.7, -0.3], 3);
        assert_eq!(g.zero, g.zero as f32 as f64);
        assert_eq!(g.scale, g.scale as f32 as f64);
        assert!(g.zero <= -0.3);
        assert!(g.value(7) >= 0.7 - 1e-15);
    }

    #[test]
    fn unknown_quantizer_name() {
        assert!(quantizer_by_name("rtn").is_ok());
        assert!(quantizer_by_name("optq").is_ok());
        assert!(matches!(quantizer_by_name("quip"), Err(Error::Config(_))));
    }
}
