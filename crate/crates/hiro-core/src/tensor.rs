//! Dense row-major matrices and symmetric per-dimension bounds.
//!
//! Everything is `f64`. The desk-scale networks here are small enough that
//! value precision is worth more than SIMD width, and double precision keeps
//! finite-difference gradient checks meaningful at tight tolerances.

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Shape(format!(
                    "ragged rows: expected width {c}, found {}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: r,
            cols: c,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// y = W x, accumulation in ascending column order.
    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.cols, "matvec: x len vs cols");
        assert_eq!(out.len(), self.rows, "matvec: out len vs rows");
        for (r, o) in out.iter_mut().enumerate() {
            let row = self.row(r);
            let mut acc = 0.0;
            for (w, xv) in row.iter().zip(x) {
                acc = w.mul_add(*xv, acc);
            }
            *o = acc;
        }
    }

    /// out = Wᵀ u, accumulation in ascending row order.
    pub fn matvec_transposed(&self, u: &[f64], out: &mut [f64]) {
        assert_eq!(u.len(), self.rows, "matvec_transposed: u len vs rows");
        assert_eq!(out.len(), self.cols, "matvec_transposed: out len vs cols");
        out.fill(0.0);
        for (r, uv) in u.iter().enumerate() {
            let row = self.row(r);
            for (o, w) in out.iter_mut().zip(row) {
                *o = uv.mul_add(*w, *o);
            }
        }
    }

    /// self += scale * (u ⊗ v): rank-one update used for weight gradients.
    /// Plain multiply-then-add (not fused) so that accumulating rank-one
    /// updates matches summing separately computed outer products bit-exactly.
    pub fn add_outer_scaled(&mut self, u: &[f64], v: &[f64], scale: f64) {
        assert_eq!(u.len(), self.rows, "add_outer_scaled: u len vs rows");
        assert_eq!(v.len(), self.cols, "add_outer_scaled: v len vs cols");
        for (r, uv) in u.iter().enumerate() {
            let s = scale * uv;
            let row = self.row_mut(r);
            for (w, vv) in row.iter_mut().zip(v) {
                *w += s * vv;
            }
        }
    }

    /// self += scale * other (shapes must match). Unfused, see above.
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) {
        assert!(self.same_shape(other), "add_scaled: shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Symmetric per-dimension range [-half_width, half_width].
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    half_width: Vec<f64>,
}

impl Bounds {
    pub fn new(half_width: Vec<f64>) -> Result<Self> {
        if half_width.is_empty() {
            return Err(Error::InvalidArgument("bounds: empty".into()));
        }
        if half_width.iter().any(|h| !h.is_finite() || *h <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "bounds: half widths must be finite and positive, got {half_width:?}"
            )));
        }
        Ok(Bounds { half_width })
    }

    /// Same half width in every dimension.
    pub fn uniform(dim: usize, half_width: f64) -> Result<Self> {
        Self::new(vec![half_width; dim])
    }

    pub fn dim(&self) -> usize {
        self.half_width.len()
    }

    pub fn half_widths(&self) -> &[f64] {
        &self.half_width
    }

    pub fn clip(&self, v: &mut [f64]) {
        assert_eq!(v.len(), self.dim(), "clip: dim mismatch");
        for (x, h) in v.iter_mut().zip(&self.half_width) {
            *x = x.clamp(-h, *h);
        }
    }

    pub fn clipped(&self, v: &[f64]) -> Vec<f64> {
        let mut out = v.to_vec();
        self.clip(&mut out);
        out
    }

    pub fn contains(&self, v: &[f64]) -> bool {
        v.len() == self.dim()
            && v.iter()
                .zip(&self.half_width)
                .all(|(x, h)| *x >= -h && *x <= *h)
    }

    /// Per-dimension scaling of the half widths (target-noise sigmas etc.).
    pub fn scaled(&self, factor: f64) -> Vec<f64> {
        self.half_width.iter().map(|h| h * factor).collect()
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot: length mismatch");
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc = x.mul_add(*y, acc);
    }
    acc
}
