//! Array geometry, steering vectors, Butler beams and emission decimation.
//!
//! All indices are 0-based. Element `m` of an `M`-element probe sits at
//! `p_m = (m - (M-1)/2) * pitch`, so the aperture is symmetric about the origin.

use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear-array probe and acquisition constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeGeometry {
    pub num_elements: usize,
    /// Element pitch in meters.
    pub pitch: f64,
    /// Transducer center frequency in Hz.
    pub center_frequency: f64,
    /// RF sampling frequency in Hz.
    pub sampling_frequency: f64,
    /// Speed of sound in m/s.
    pub sound_speed: f64,
}

impl ProbeGeometry {
    pub fn new(
        num_elements: usize,
        pitch: f64,
        center_frequency: f64,
        sampling_frequency: f64,
        sound_speed: f64,
    ) -> Result<Self> {
        let geom = Self {
            num_elements,
            pitch,
            center_frequency,
            sampling_frequency,
            sound_speed,
        };
        geom.validate()?;
        Ok(geom)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_elements < 2 {
            return Err(Error::InvalidParameter(format!(
                "probe needs at least 2 elements, got {}",
                self.num_elements
            )));
        }
        let positive = [
            ("pitch", self.pitch),
            ("center_frequency", self.center_frequency),
            ("sampling_frequency", self.sampling_frequency),
            ("sound_speed", self.sound_speed),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if self.sampling_frequency <= 2.0 * self.center_frequency {
            return Err(Error::InvalidParameter(format!(
                "sampling frequency {} Hz does not exceed twice the center frequency {} Hz",
                self.sampling_frequency, self.center_frequency
            )));
        }
        Ok(())
    }

    /// `c / f0`
    pub fn wavelength(&self) -> f64 {
        self.sound_speed / self.center_frequency
    }

    /// Pitch in wavelengths. Equals 0.5 for a half-wavelength array.
    pub fn spacing_ratio(&self) -> f64 {
        self.pitch / self.wavelength()
    }

    pub fn element_positions(&self) -> Vec<f64> {
        element_positions(self)
    }

    /// Depth spacing of one RF sample (two-way travel), in meters.
    pub fn sample_depth_step(&self) -> f64 {
        self.sound_speed / (2.0 * self.sampling_frequency)
    }
}

/// Lateral element positions, symmetric about zero.
pub fn element_positions(geom: &ProbeGeometry) -> Vec<f64> {
    let m = geom.num_elements;
    let half = (m as f64 - 1.0) / 2.0;
    (0..m).map(|i| (i as f64 - half) * geom.pitch).collect()
}

/// Far-field manifold vector for a half-wavelength array: entry `m` is
/// `exp(-j m pi sin(theta))`.
pub fn steering_vector(theta: f64, m: usize) -> Array1<Complex64> {
    steering_vector_spaced(theta, m, 0.5)
}

/// Manifold vector for arbitrary element spacing, given as pitch / wavelength.
/// The per-element phase step is `2 pi (pitch / wavelength) sin(theta)`.
pub fn steering_vector_spaced(theta: f64, m: usize, spacing_ratio: f64) -> Array1<Complex64> {
    let step = 2.0 * PI * spacing_ratio * theta.sin();
    Array1::from_iter((0..m).map(|i| Complex64::from_polar(1.0, -(i as f64) * step)))
}

/// `M x K` matrix whose columns are the half-wavelength manifold vectors.
pub fn steering_matrix(angles: &[f64], m: usize) -> Array2<Complex64> {
    steering_matrix_spaced(angles, m, 0.5)
}

pub fn steering_matrix_spaced(angles: &[f64], m: usize, spacing_ratio: f64) -> Array2<Complex64> {
    let mut a = Array2::<Complex64>::zeros((m, angles.len()));
    for (k, &theta) in angles.iter().enumerate() {
        a.column_mut(k).assign(&steering_vector_spaced(theta, m, spacing_ratio));
    }
    a
}

/// `K` angles uniformly spaced over `[-half_angle, half_angle]`.
pub fn uniform_angles(k: usize, half_angle: f64) -> Vec<f64> {
    if k == 1 {
        return vec![0.0];
    }
    (0..k)
        .map(|i| -half_angle + 2.0 * half_angle * i as f64 / (k - 1) as f64)
        .collect()
}

/// `M x M` Butler matrix, `b_mn = exp(j (2 pi / M) (m - 1/2) n) / sqrt(M)`.
pub fn butler_matrix(m: usize) -> Array2<Complex64> {
    let scale = 1.0 / (m as f64).sqrt();
    Array2::from_shape_fn((m, m), |(row, col)| {
        let phase = 2.0 * PI / m as f64 * (row as f64 - 0.5) * col as f64;
        Complex64::from_polar(scale, phase)
    })
}

/// Signed spatial frequency (in DFT bins, wrapped to `[-M/2, M/2)`) of Butler beam `row`.
pub fn butler_beam_order(row: usize, m: usize) -> f64 {
    let mut f = row as f64 - 0.5;
    let half = m as f64 / 2.0;
    while f >= half {
        f -= m as f64;
    }
    while f < -half {
        f += m as f64;
    }
    f
}

/// Rows of the `M x M` Butler matrix for the `dim` beams closest to broadside,
/// kept in increasing row order. `dim` is clamped to `M`.
pub fn butler_lowest_beams(m: usize, dim: usize) -> Array2<Complex64> {
    let dim = dim.min(m);
    let full = butler_matrix(m);
    let mut rows: Vec<usize> = (0..m).collect();
    rows.sort_by(|&a, &b| {
        butler_beam_order(a, m)
            .abs()
            .total_cmp(&butler_beam_order(b, m).abs())
            .then(a.cmp(&b))
    });
    let mut keep: Vec<usize> = rows.into_iter().take(dim).collect();
    keep.sort_unstable();
    let mut out = Array2::<Complex64>::zeros((dim, m));
    for (i, &r) in keep.iter().enumerate() {
        out.row_mut(i).assign(&full.row(r));
    }
    out
}

/// Beamspace decimation over emissions: keeps every `K/P`-th of `K` emissions,
/// starting with emission 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decimation {
    k: usize,
    p: usize,
}

impl Decimation {
    pub fn new(k: usize, p: usize) -> Result<Self> {
        if p == 0 || k == 0 {
            return Err(Error::InvalidParameter(format!(
                "decimation needs K >= 1 and P >= 1, got K={k}, P={p}"
            )));
        }
        if !k.is_multiple_of(p) {
            return Err(Error::InvalidParameter(format!(
                "P={p} does not divide K={k}; the decimation factor must be an integer"
            )));
        }
        Ok(Self { k, p })
    }

    /// Decimation from `K` and the factor `K/P`.
    pub fn with_factor(k: usize, factor: usize) -> Result<Self> {
        if factor == 0 || !k.is_multiple_of(factor) {
            return Err(Error::InvalidParameter(format!(
                "decimation factor {factor} does not divide K={k}"
            )));
        }
        Self::new(k, k / factor)
    }

    pub fn full_len(&self) -> usize {
        self.k
    }

    pub fn kept_len(&self) -> usize {
        self.p
    }

    pub fn factor(&self) -> usize {
        self.k / self.p
    }

    /// Emission indices kept, strictly increasing.
    pub fn selected(&self) -> Vec<usize> {
        (0..self.p).map(|i| i * self.factor()).collect()
    }

    pub fn is_selected(&self, k: usize) -> bool {
        k < self.k && k.is_multiple_of(self.factor())
    }

    /// `D^H v`
    pub fn apply<T: Copy>(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.k {
            return Err(Error::DimensionMismatch(format!(
                "decimation expects length {}, got {}",
                self.k,
                v.len()
            )));
        }
        Ok(self.selected().into_iter().map(|j| v[j]).collect())
    }

    /// The `K x P` 0/1 matrix `D`.
    pub fn matrix(&self) -> Array2<f64> {
        let mut d = Array2::<f64>::zeros((self.k, self.p));
        for (i, j) in self.selected().into_iter().enumerate() {
            d[[j, i]] = 1.0;
        }
        d
    }
}

/// `K x P` decimation matrix with column `i` selecting row `(K/P) i`.
pub fn decimation_matrix(k: usize, p: usize) -> Result<Array2<f64>> {
    Ok(Decimation::new(k, p)?.matrix())
}

/// Steering quantities shared by the beamformers for one angle grid.
#[derive(Debug, Clone)]
pub struct SteeringSet {
    pub angles: Vec<f64>,
    /// Pitch over wavelength used to build the manifold.
    pub spacing_ratio: f64,
    /// `M x K`
    pub a: Array2<Complex64>,
    /// `M x P`, the columns of `a` kept by `decimation`.
    pub a_bs: Array2<Complex64>,
    pub decimation: Decimation,
    pub butler: Option<Array2<Complex64>>,
}

impl SteeringSet {
    pub fn new(
        angles: &[f64],
        m: usize,
        spacing_ratio: f64,
        decimation: Decimation,
        with_butler: bool,
    ) -> Result<Self> {
        if angles.is_empty() {
            return Err(Error::InvalidParameter("steering set needs at least one angle".into()));
        }
        if decimation.full_len() != angles.len() {
            return Err(Error::DimensionMismatch(format!(
                "decimation over {} emissions but {} angles",
                decimation.full_len(),
                angles.len()
            )));
        }
        let a = steering_matrix_spaced(angles, m, spacing_ratio);
        let sel = decimation.selected();
        let mut a_bs = Array2::<Complex64>::zeros((m, sel.len()));
        for (i, &j) in sel.iter().enumerate() {
            a_bs.column_mut(i).assign(&a.column(j));
        }
        Ok(Self {
            angles: angles.to_vec(),
            spacing_ratio,
            a,
            a_bs,
            decimation,
            butler: with_butler.then(|| butler_matrix(m)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{distance_from_identity, mul_adjoint};

    fn close(a: Complex64, b: Complex64, tol: f64) -> bool {
        (a - b).norm() < tol
    }

    #[test]
    fn positions_small_arrays() {
        let wl = 1540.0 / 3e6;
        let g = ProbeGeometry::new(3, wl / 2.0, 3e6, 100e6, 1540.0).unwrap();
        let p = g.element_positions();
        assert!((p[0] + wl / 2.0).abs() < 1e-15);
        assert_eq!(p[1], 0.0);
        assert!((p[2] - wl / 2.0).abs() < 1e-15);

        let g = ProbeGeometry::new(2, 1.0, 3e6, 100e6, 1540.0).unwrap();
        assert_eq!(g.element_positions(), vec![-0.5, 0.5]);
    }

    #[test]
    fn positions_table_pitch() {
        let g = ProbeGeometry::new(64, 256e-6, 3e6, 100e6, 1540.0).unwrap();
        let p = g.element_positions();
        assert!((p[0] + 8.064e-3).abs() < 1e-12);
        assert!((p[63] - 8.064e-3).abs() < 1e-12);
        for m in 0..64 {
            assert_eq!(p[m] + p[63 - m], 0.0);
        }
    }

    #[test]
    fn geometry_validation() {
        assert!(ProbeGeometry::new(1, 1e-4, 3e6, 100e6, 1540.0).is_err());
        assert!(ProbeGeometry::new(8, 0.0, 3e6, 100e6, 1540.0).is_err());
        assert!(ProbeGeometry::new(8, 1e-4, 3e6, 6e6, 1540.0).is_err());
        assert!(ProbeGeometry::new(8, 1e-4, 3e6, 6.1e6, 1540.0).is_ok());
    }

    #[test]
    fn steering_vector_examples() {
        let one = Complex64::new(1.0, 0.0);
        assert!(steering_vector(0.0, 4).iter().all(|&v| close(v, one, 1e-15)));
        let v = steering_vector(PI / 2.0, 2);
        assert!(v[0] == one && close(v[1], Complex64::new(-1.0, 0.0), 1e-15));
        let v = steering_vector(PI / 6.0, 2);
        assert!(close(v[1], Complex64::new(0.0, -1.0), 1e-15));
    }

    #[test]
    fn steering_matrix_examples() {
        let a = steering_matrix(&[0.0], 3);
        assert_eq!(a.dim(), (3, 1));
        assert!(a.iter().all(|v| *v == Complex64::new(1.0, 0.0)));
        let a = steering_matrix(&[0.0, PI / 2.0], 2);
        assert!(close(a[[1, 1]], Complex64::new(-1.0, 0.0), 1e-15));
        assert_eq!(a[[1, 0]], Complex64::new(1.0, 0.0));

        let angles = uniform_angles(65, 30f64.to_radians());
        let a = steering_matrix(&angles, 32);
        assert_eq!(a.ncols(), 65);
        assert!(a.iter().all(|v| (v.norm() - 1.0).abs() < 1e-14));
        assert!(a.row(0).iter().all(|v| *v == Complex64::new(1.0, 0.0)));
    }

    #[test]
    fn butler_small_cases() {
        let b1 = butler_matrix(1);
        assert_eq!(b1[[0, 0]], Complex64::new(1.0, 0.0));
        let b2 = butler_matrix(2);
        assert!(distance_from_identity(mul_adjoint(b2.view(), b2.view()).view()) < 1e-12);
        let b8 = butler_matrix(8);
        assert!(b8.iter().all(|v| (v.norm() - 1.0 / 8f64.sqrt()).abs() < 1e-15));
    }

    #[test]
    fn butler_unitary_up_to_64() {
        for m in 1..=64 {
            let b = butler_matrix(m);
            let err = distance_from_identity(mul_adjoint(b.view(), b.view()).view());
            assert!(err < 1e-10, "M={m}: {err}");
        }
    }

    #[test]
    fn lowest_beams_straddle_broadside() {
        let b = butler_lowest_beams(8, 2);
        let full = butler_matrix(8);
        // rows 0 and 1 have orders -1/2 and +1/2
        assert_eq!(b.row(0), full.row(0));
        assert_eq!(b.row(1), full.row(1));
        assert_eq!(butler_lowest_beams(8, 33).nrows(), 8);
    }

    #[test]
    fn decimation_examples() {
        let d = decimation_matrix(4, 4).unwrap();
        assert_eq!(d, Array2::<f64>::eye(4));
        let d = Decimation::new(4, 2).unwrap();
        assert_eq!(d.selected(), vec![0, 2]);
        let d = Decimation::new(260, 52).unwrap();
        assert_eq!(d.factor(), 5);
        assert_eq!(d.selected().len(), 52);
        assert!(Decimation::new(64, 5).is_err());
        assert!(Decimation::with_factor(64, 5).is_err());
        assert_eq!(d.apply(&(0..260).collect::<Vec<_>>()).unwrap()[51], 255);
    }

    #[test]
    fn decimation_is_a_partial_isometry() {
        for (k, p) in [(4, 2), (65, 13), (260, 52), (12, 12)] {
            let d = decimation_matrix(k, p).unwrap();
            assert_eq!(d.t().dot(&d), Array2::<f64>::eye(p));
            for col in d.columns() {
                assert_eq!(col.iter().filter(|&&v| v == 1.0).count(), 1);
            }
        }
    }

    #[test]
    fn beamspaced_steering_matches_decimated_adjoint() {
        let angles = uniform_angles(20, 0.3);
        let set = SteeringSet::new(&angles, 16, 0.5, Decimation::new(20, 4).unwrap(), true).unwrap();
        let d = set.decimation.matrix();
        // A_BS^H = D^H A^H
        let ah = set.a.t().mapv(|v| v.conj());
        let dh_ah = d.t().mapv(|v| Complex64::new(v, 0.0)).dot(&ah);
        let abs_h = set.a_bs.t().mapv(|v| v.conj());
        assert_eq!(dh_ah, abs_h);
        assert!(set.butler.is_some());
    }
}
