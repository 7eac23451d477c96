//! Small dense complex linear algebra kernels.
//!
//! The matrices handled here are at most a few hundred on a side (covariance
//! matrices, per-depth forward models), so straightforward loops over ndarray
//! storage are adequate and keep results bit-reproducible.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Pivots below this fraction of the largest diagonal entry are treated as zero.
const PIVOT_RTOL: f64 = 1e-13;

/// Lower-triangular Cholesky factor `L` of a Hermitian positive-definite matrix
/// `H = L L^H`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Array2<Complex64>,
}

impl Cholesky {
    /// Factor a Hermitian positive-definite matrix. Only the lower triangle is read.
    pub fn factor(a: ArrayView2<'_, Complex64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "cholesky needs a square matrix, got {}x{}",
                n,
                a.ncols()
            )));
        }
        let scale = (0..n).map(|i| a[[i, i]].re.abs()).fold(0.0_f64, f64::max);
        if n > 0 && !(scale.is_finite() && scale > 0.0) {
            return Err(Error::NotPositiveDefinite);
        }
        let mut l = Array2::<Complex64>::zeros((n, n));
        for j in 0..n {
            let mut d = a[[j, j]].re;
            for k in 0..j {
                d -= l[[j, k]].norm_sqr();
            }
            if !(d > PIVOT_RTOL * scale) {
                return Err(Error::NotPositiveDefinite);
            }
            let djj = d.sqrt();
            l[[j, j]] = Complex64::new(djj, 0.0);
            for i in (j + 1)..n {
                let mut s = a[[i, j]];
                for k in 0..j {
                    s -= l[[i, k]] * l[[j, k]].conj();
                }
                l[[i, j]] = s / djj;
            }
        }
        Ok(Self { l })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn factor_matrix(&self) -> &Array2<Complex64> {
        &self.l
    }

    /// Solve `H x = b`.
    pub fn solve(&self, b: ArrayView1<'_, Complex64>) -> Array1<Complex64> {
        let mut x = b.to_owned();
        self.solve_in_place(x.as_slice_mut().expect("owned vector is contiguous"));
        x
    }

    /// Solve `H x = b`, overwriting `b` with `x`.
    pub fn solve_in_place(&self, b: &mut [Complex64]) {
        let n = self.dim();
        assert_eq!(b.len(), n, "right-hand side length");
        let l = &self.l;
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= l[[i, k]] * b[k];
            }
            b[i] = s / l[[i, i]].re;
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= l[[k, i]].conj() * b[k];
            }
            b[i] = s / l[[i, i]].re;
        }
    }

    /// Solve `H X = B` column by column.
    pub fn solve_matrix(&self, b: ArrayView2<'_, Complex64>) -> Array2<Complex64> {
        let mut out = Array2::<Complex64>::zeros(b.raw_dim());
        let mut col = vec![Complex64::new(0.0, 0.0); b.nrows()];
        for j in 0..b.ncols() {
            for (c, v) in col.iter_mut().zip(b.column(j)) {
                *c = *v;
            }
            self.solve_in_place(&mut col);
            for (o, v) in out.column_mut(j).iter_mut().zip(&col) {
                *o = *v;
            }
        }
        out
    }
}

/// `A^H A` computed entry by entry.
pub fn gram(a: ArrayView2<'_, Complex64>) -> Array2<Complex64> {
    let k = a.ncols();
    let mut g = Array2::<Complex64>::zeros((k, k));
    for i in 0..k {
        for j in 0..k {
            g[[i, j]] = column_inner(a, i, a, j);
        }
    }
    g
}

/// `sum_m conj(a[m, i]) * b[m, j]`, accumulated in increasing `m`.
#[inline]
pub fn column_inner(
    a: ArrayView2<'_, Complex64>,
    i: usize,
    b: ArrayView2<'_, Complex64>,
    j: usize,
) -> Complex64 {
    let mut s = Complex64::new(0.0, 0.0);
    for m in 0..a.nrows() {
        s += a[[m, i]].conj() * b[[m, j]];
    }
    s
}

/// `A x`
pub fn matvec(a: ArrayView2<'_, Complex64>, x: &[Complex64], out: &mut [Complex64]) {
    debug_assert_eq!(a.ncols(), x.len());
    debug_assert_eq!(a.nrows(), out.len());
    for (i, row) in a.outer_iter().enumerate() {
        let mut s = Complex64::new(0.0, 0.0);
        for (r, v) in row.iter().zip(x) {
            s += r * v;
        }
        out[i] = s;
    }
}

/// `A^H y`
pub fn matvec_h(a: ArrayView2<'_, Complex64>, y: &[Complex64], out: &mut [Complex64]) {
    debug_assert_eq!(a.nrows(), y.len());
    debug_assert_eq!(a.ncols(), out.len());
    out.iter_mut().for_each(|o| *o = Complex64::new(0.0, 0.0));
    for (row, yi) in a.outer_iter().zip(y) {
        for (o, r) in out.iter_mut().zip(row.iter()) {
            *o += r.conj() * yi;
        }
    }
}

/// Conjugate inner product `x^H y`.
#[inline]
pub fn dotc(x: &[Complex64], y: &[Complex64]) -> Complex64 {
    x.iter()
        .zip(y)
        .fold(Complex64::new(0.0, 0.0), |s, (a, b)| s + a.conj() * b)
}

pub fn norm_sqr(x: &[Complex64]) -> f64 {
    x.iter().map(|v| v.norm_sqr()).sum()
}

/// Largest eigenvalue of `A^H A` (squared spectral norm of `A`), by power
/// iteration from a fixed start vector.
pub fn spectral_norm_sqr(a: ArrayView2<'_, Complex64>) -> f64 {
    let (p, k) = a.dim();
    if p == 0 || k == 0 {
        return 0.0;
    }
    let mut v: Vec<Complex64> = (0..k)
        .map(|i| Complex64::new(1.0 + 0.1 * (i as f64).sin(), 0.05 * (i as f64).cos()))
        .collect();
    let mut av = vec![Complex64::new(0.0, 0.0); p];
    let mut w = vec![Complex64::new(0.0, 0.0); k];
    let mut estimate = 0.0;
    for _ in 0..500 {
        let nv = norm_sqr(&v).sqrt();
        if nv == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= nv);
        matvec(a, &v, &mut av);
        matvec_h(a, &av, &mut w);
        let next = dotc(&v, &w).re;
        std::mem::swap(&mut v, &mut w);
        if (next - estimate).abs() <= 1e-12 * next.abs() {
            estimate = next;
            break;
        }
        estimate = next;
    }
    estimate
}

/// Frobenius norm of `A - I`.
pub fn distance_from_identity(a: ArrayView2<'_, Complex64>) -> f64 {
    let mut s = 0.0;
    for ((i, j), v) in a.indexed_iter() {
        let target = if i == j { 1.0 } else { 0.0 };
        s += (v - Complex64::new(target, 0.0)).norm_sqr();
    }
    s.sqrt()
}

/// `A B^H`
pub fn mul_adjoint(a: ArrayView2<'_, Complex64>, b: ArrayView2<'_, Complex64>) -> Array2<Complex64> {
    let (n, _) = a.dim();
    let m = b.nrows();
    let mut out = Array2::<Complex64>::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let mut s = Complex64::new(0.0, 0.0);
            for (x, y) in a.row(i).iter().zip(b.row(j)) {
                s += x * y.conj();
            }
            out[[i, j]] = s;
        }
    }
    out
}
