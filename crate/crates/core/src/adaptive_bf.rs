//! Capon-type adaptive beamformers and the iterative adaptive approach (IAA).
//!
//! * MV: element-space Capon on each scanline with subaperture smoothing,
//!   temporal averaging and diagonal loading.
//! * BS-Capon: the same filter after a Butler (DFT) beamspace transform.
//! * Multibeam Capon: one covariance per depth estimated across all emissions
//!   after phase-shift compensation, steered to every scan direction.
//! * IAA: nonparametric amplitude estimation over the scan directions.
//!
//! Every matrix solve goes through a Cholesky factorization; an indefinite
//! covariance is reported, never pseudo-inverted.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::RawDataCube;
use crate::classic_bf::{ImageGrid, ImageKind, Provenance, RfImage};
use crate::error::{Error, Result};
use crate::geometry::{butler_beam_order, butler_lowest_beams};
use crate::linalg::{dotc, Cholesky};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// A loaded sample covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    pub r: Array2<Complex64>,
    /// Relative loading `Delta`; `Delta * trace / size` was added to the diagonal.
    pub loading: f64,
    pub subaperture: usize,
    pub half_window: usize,
}

/// Spatial and temporal smoothing settings of the element-space Capon filters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MvParams {
    /// Subaperture length `L`.
    pub subaperture: usize,
    /// Samples averaged on each side of the current depth.
    pub half_window: usize,
    /// `Delta` in `R + Delta trace(R) / L I`.
    pub loading: f64,
}

impl MvParams {
    /// `L = M/8` (at least 1), 11 depth samples, `Delta = 1 / (10 L)`.
    pub fn defaults(m: usize) -> Self {
        let l = (m / 8).max(1);
        Self {
            subaperture: l,
            half_window: 5,
            loading: 1.0 / (10.0 * l as f64),
        }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if self.subaperture == 0 || self.subaperture > m {
            return Err(Error::InvalidParameter(format!(
                "subaperture length must be in 1..={m}, got {}",
                self.subaperture
            )));
        }
        if !(self.loading >= 0.0 && self.loading.is_finite()) {
            return Err(Error::InvalidParameter(format!("loading must be nonnegative, got {}", self.loading)));
        }
        Ok(())
    }
}

/// Smoothed covariance of the channel data `y` (`M x N`) around depth `n`:
/// average of `y_l[n'] y_l[n']^H` over the `M - L + 1` subapertures `l` and
/// the depths `n' in [n - T, n + T]` clipped to the record, plus loading.
pub fn estimate_covariance(y: ArrayView2<'_, Complex64>, n: usize, params: &MvParams) -> Result<CovarianceEstimate> {
    let (m, len) = y.dim();
    params.validate(m)?;
    if n >= len {
        return Err(Error::OutOfRange { index: n, len });
    }
    let l = params.subaperture;
    let lo = n.saturating_sub(params.half_window);
    let hi = (n + params.half_window).min(len - 1);
    let mut r = Array2::<Complex64>::zeros((l, l));
    for t in lo..=hi {
        accumulate_subapertures(y.column(t), l, &mut r);
    }
    let count = ((hi - lo + 1) * (m - l + 1)) as f64;
    r.mapv_inplace(|v| v / count);
    add_loading(&mut r, params.loading);
    Ok(CovarianceEstimate {
        r,
        loading: params.loading,
        subaperture: l,
        half_window: params.half_window,
    })
}

/// `acc += sum_l y[l..l+L] y[l..l+L]^H`
fn accumulate_subapertures(y: ArrayView1<'_, Complex64>, l: usize, acc: &mut Array2<Complex64>) {
    let m = y.len();
    for s in 0..=(m - l) {
        for i in 0..l {
            let yi = y[s + i];
            for j in 0..l {
                acc[[i, j]] += yi * y[s + j].conj();
            }
        }
    }
}

/// `R += Delta trace(R) / size I`
fn add_loading(r: &mut Array2<Complex64>, delta: f64) {
    let size = r.nrows();
    if size == 0 || delta == 0.0 {
        return;
    }
    let tr: f64 = (0..size).map(|i| r[[i, i]].re).sum();
    let eps = delta * tr / size as f64;
    for i in 0..size {
        r[[i, i]] += eps;
    }
}

/// Capon weights `w = R^-1 a / (a^H R^-1 a)`.
pub fn mv_weights(r: ArrayView2<'_, Complex64>, a: &[Complex64]) -> Result<Vec<Complex64>> {
    if r.nrows() != a.len() {
        return Err(Error::DimensionMismatch(format!(
            "covariance is {}x{}, steering vector has {} entries",
            r.nrows(),
            r.ncols(),
            a.len()
        )));
    }
    let ch = Cholesky::factor(r)?;
    Ok(capon_from_factor(&ch, a))
}

fn capon_from_factor(ch: &Cholesky, a: &[Complex64]) -> Vec<Complex64> {
    let mut ria = a.to_vec();
    ch.solve_in_place(&mut ria);
    let denom = dotc(a, &ria).re;
    ria.iter().map(|v| v / denom).collect()
}

/// Sum of all subaperture vectors at one depth, divided by their count.
fn mean_subaperture(y: ArrayView1<'_, Complex64>, l: usize) -> Vec<Complex64> {
    let m = y.len();
    let count = (m - l + 1) as f64;
    (0..l)
        .map(|i| (0..=(m - l)).map(|s| y[s + i]).sum::<Complex64>() / count)
        .collect()
}

/// Element-space or beamspace Capon over one scanline of compensated data
/// (`M x N`). With `transform = Some(B)` (`N_b x L`) the covariance, the data
/// and the constraint vector are all mapped through `B`; the constraint is
/// `B 1`, so a unitary `B` gives exactly the element-space output.
pub fn capon_scanline(
    y: ArrayView2<'_, Complex64>,
    params: &MvParams,
    transform: Option<&Array2<Complex64>>,
) -> Result<Vec<Complex64>> {
    let (m, len) = y.dim();
    params.validate(m)?;
    let l = params.subaperture;
    if let Some(b) = transform {
        if b.ncols() != l || b.nrows() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "beamspace transform must be N_b x {l}, got {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
    }
    let per_depth: Vec<Array2<Complex64>> = (0..len)
        .map(|t| {
            let mut c = Array2::<Complex64>::zeros((l, l));
            accumulate_subapertures(y.column(t), l, &mut c);
            c
        })
        .collect();
    let ones = vec![Complex64::new(1.0, 0.0); l];
    let constraint = match transform {
        Some(b) => b.dot(&Array1::from(ones.clone())).to_vec(),
        None => ones,
    };
    let t_half = params.half_window;
    let mut out = vec![ZERO; len];
    for (n, o) in out.iter_mut().enumerate() {
        let lo = n.saturating_sub(t_half);
        let hi = (n + t_half).min(len - 1);
        let mut r = Array2::<Complex64>::zeros((l, l));
        for c in &per_depth[lo..=hi] {
            r += c;
        }
        let count = ((hi - lo + 1) * (m - l + 1)) as f64;
        r.mapv_inplace(|v| v / count);
        let ybar = mean_subaperture(y.column(n), l);
        let (r, ybar) = match transform {
            Some(b) => (b.dot(&r).dot(&b.t().mapv(|v| v.conj())), b.dot(&Array1::from(ybar)).to_vec()),
            None => (r, ybar),
        };
        let mut r = r;
        add_loading(&mut r, params.loading);
        if r.iter().all(|v| *v == ZERO) {
            continue;
        }
        let w = mv_weights(r.view(), &constraint)?;
        *o = dotc(&w, &ybar);
    }
    Ok(out)
}

fn check_compensated(cube: &RawDataCube, grid: &ImageGrid) -> Result<()> {
    if !cube.is_compensated {
        return Err(Error::State("adaptive beamforming needs a delay-compensated cube".into()));
    }
    if grid.num_lines() != cube.num_emissions() {
        return Err(Error::DimensionMismatch(format!(
            "grid has {} lines, cube has {} emissions",
            grid.num_lines(),
            cube.num_emissions()
        )));
    }
    Ok(())
}

fn assemble(rows: Vec<Vec<Complex64>>, n: usize, provenance: Provenance, grid: ImageGrid) -> RfImage {
    let mut data = Array2::<Complex64>::zeros((rows.len(), n));
    for (k, row) in rows.into_iter().enumerate() {
        data.row_mut(k).assign(&Array1::from(row));
    }
    RfImage {
        data,
        kind: ImageKind::Rf,
        provenance,
        grid,
    }
}

/// Element-space Capon image.
pub fn mv_beamform(cube: &RawDataCube, params: &MvParams, grid: ImageGrid) -> Result<RfImage> {
    check_compensated(cube, &grid)?;
    let rows = (0..cube.num_emissions())
        .into_par_iter()
        .map(|k| capon_scanline(cube.emission(k), params, None))
        .collect::<Result<Vec<_>>>()?;
    let prov = Provenance::new("mv", cube.num_emissions())
        .with("subaperture", params.subaperture)
        .with("half_window", params.half_window)
        .with("loading", params.loading);
    Ok(assemble(rows, cube.num_samples(), prov, grid))
}

/// Butler beamspace Capon image; `n_beams` keeps the beams nearest broadside.
pub fn bs_capon_beamform(cube: &RawDataCube, params: &MvParams, n_beams: Option<usize>, grid: ImageGrid) -> Result<RfImage> {
    check_compensated(cube, &grid)?;
    let l = params.subaperture;
    let dim = n_beams.unwrap_or(l).min(l);
    if dim == 0 {
        return Err(Error::InvalidParameter("beamspace needs at least one beam".into()));
    }
    let b = butler_lowest_beams(l, dim);
    let rows = (0..cube.num_emissions())
        .into_par_iter()
        .map(|k| capon_scanline(cube.emission(k), params, Some(&b)))
        .collect::<Result<Vec<_>>>()?;
    let prov = Provenance::new("bs_capon", cube.num_emissions())
        .with("subaperture", params.subaperture)
        .with("half_window", params.half_window)
        .with("loading", params.loading)
        .with("beams", dim);
    Ok(assemble(rows, cube.num_samples(), prov, grid))
}

/// Far-field manifold referenced to the array center,
/// `v_theta[m] = exp(j beta (m - c) sin(theta))`, as an `M x K` matrix.
///
/// After delay compensation on scanline `k`, a reflector in direction `u`
/// leaves the phase `exp(-j beta (m - c) (u_k - u))` on element `m`;
/// multiplying by `v_{theta_k}` turns every emission into a snapshot of the
/// same manifold.
pub fn centered_manifold(angles: &[f64], m: usize, spacing_ratio: f64) -> Array2<Complex64> {
    let beta = 2.0 * std::f64::consts::PI * spacing_ratio;
    let c = (m as f64 - 1.0) / 2.0;
    Array2::from_shape_fn((m, angles.len()), |(i, k)| {
        Complex64::from_polar(1.0, beta * (i as f64 - c) * angles[k].sin())
    })
}

/// Phase-shift compensated snapshots: row `k` is `y_k[n] .* v_{theta_k}`.
pub fn phase_compensate(cube: &RawDataCube, n: usize, manifold: &Array2<Complex64>) -> Array2<Complex64> {
    let (k, m, _) = cube.data.dim();
    Array2::from_shape_fn((k, m), |(kk, mm)| cube.data[[kk, mm, n]] * manifold[[mm, kk]])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultibeamParams {
    /// Relative diagonal loading, `R + loading trace(R) / size I`.
    pub loading: f64,
    /// Butler beamspace dimension; values at or above `M` keep the full space.
    pub beams: usize,
}

impl Default for MultibeamParams {
    fn default() -> Self {
        Self { loading: 0.01, beams: 33 }
    }
}

/// Capon output for every direction, given the covariance.
/// `manifold` is `D x K` and `snapshots` is `K x D`; output `k` is
/// `w_k^H s_k` with `w_k` steered to column `k`.
pub fn multibeam_capon_with_covariance(
    r: ArrayView2<'_, Complex64>,
    manifold: ArrayView2<'_, Complex64>,
    snapshots: ArrayView2<'_, Complex64>,
) -> Result<Vec<Complex64>> {
    let ch = Cholesky::factor(r)?;
    Ok((0..manifold.ncols())
        .map(|k| {
            let v = manifold.column(k).to_vec();
            let w = capon_from_factor(&ch, &v);
            dotc(&w, &snapshots.row(k).to_vec())
        })
        .collect())
}

/// Multibeam Capon at one depth. `snapshots` (`K x M`) are phase compensated
/// and `manifold` (`M x K`) is the centered manifold of the scan directions.
pub fn multibeam_capon_scanline(
    snapshots: ArrayView2<'_, Complex64>,
    manifold: ArrayView2<'_, Complex64>,
    params: &MultibeamParams,
) -> Result<Vec<Complex64>> {
    let (k, m) = snapshots.dim();
    if manifold.dim() != (m, k) {
        return Err(Error::DimensionMismatch(format!(
            "manifold is {:?}, snapshots are {k}x{m}",
            manifold.dim()
        )));
    }
    let (s, v) = if params.beams < m {
        let b = butler_lowest_beams(m, params.beams);
        (snapshots.dot(&b.t()), b.dot(&manifold))
    } else {
        (snapshots.to_owned(), manifold.to_owned())
    };
    let d = s.ncols();
    let mut r = Array2::<Complex64>::zeros((d, d));
    for row in s.outer_iter() {
        for i in 0..d {
            for j in 0..d {
                r[[i, j]] += row[i] * row[j].conj();
            }
        }
    }
    r.mapv_inplace(|x| x / k as f64);
    add_loading(&mut r, params.loading);
    if r.iter().all(|x| *x == ZERO) {
        return Ok(vec![ZERO; k]);
    }
    multibeam_capon_with_covariance(r.view(), v.view(), s.view())
}

pub fn multibeam_capon_beamform(
    cube: &RawDataCube,
    angles_at: &(dyn Fn(usize) -> Vec<f64> + Sync),
    spacing_ratio: f64,
    params: &MultibeamParams,
    grid: ImageGrid,
) -> Result<RfImage> {
    check_compensated(cube, &grid)?;
    let (k, m, n) = cube.data.dim();
    let cols = (0..n)
        .into_par_iter()
        .map(|t| {
            let v = centered_manifold(&angles_at(t), m, spacing_ratio);
            let s = phase_compensate(cube, t, &v);
            multibeam_capon_scanline(s.view(), v.view(), params)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut data = Array2::<Complex64>::zeros((k, n));
    for (t, col) in cols.into_iter().enumerate() {
        for (kk, v) in col.into_iter().enumerate() {
            data[[kk, t]] = v;
        }
    }
    let prov = Provenance::new("multibeam_capon", k)
        .with("loading", params.loading)
        .with("beams", params.beams.min(m));
    Ok(RfImage {
        data,
        kind: ImageKind::Rf,
        provenance: prov,
        grid,
    })
}

/// Diagonal source powers of the IAA covariance model.
#[derive(Debug, Clone, PartialEq)]
pub struct IaaState {
    pub powers: Vec<f64>,
    pub iteration: usize,
    /// Set when a model covariance needed emergency loading.
    pub loaded: bool,
}

impl IaaState {
    pub fn amplitudes(&self) -> Vec<f64> {
        self.powers.iter().map(|p| p.sqrt()).collect()
    }
}

const IAA_EMERGENCY_LOADING: f64 = 1e-10;

/// Matched-filter powers `mean_l |v_k^H y_l|^2 / |v_k|^4`.
pub fn iaa_initial(snapshots: ArrayView2<'_, Complex64>, manifold: ArrayView2<'_, Complex64>) -> IaaState {
    let l = snapshots.nrows().max(1) as f64;
    let powers = manifold
        .columns()
        .into_iter()
        .map(|v| {
            let v = v.to_vec();
            let vv = dotc(&v, &v).re;
            snapshots
                .outer_iter()
                .map(|y| (dotc(&v, &y.to_vec()) / vv).norm_sqr())
                .sum::<f64>()
                / l
        })
        .collect();
    IaaState {
        powers,
        iteration: 0,
        loaded: false,
    }
}

/// One IAA update: `R = V diag(P) V^H`, then for every direction
/// `x_{k,l} = v_k^H R^-1 y_l / (v_k^H R^-1 v_k)` and `P_k = mean_l |x_{k,l}|^2`.
pub fn iaa_step(state: &IaaState, snapshots: ArrayView2<'_, Complex64>, manifold: ArrayView2<'_, Complex64>) -> Result<IaaState> {
    let (m, k) = manifold.dim();
    if state.powers.len() != k || snapshots.ncols() != m {
        return Err(Error::DimensionMismatch(format!(
            "IAA with {} powers, manifold {m}x{k}, snapshots of length {}",
            state.powers.len(),
            snapshots.ncols()
        )));
    }
    let mut r = Array2::<Complex64>::zeros((m, m));
    for (col, &p) in manifold.columns().into_iter().zip(&state.powers) {
        if p == 0.0 {
            continue;
        }
        for i in 0..m {
            let vi = col[i] * p;
            for j in 0..m {
                r[[i, j]] += vi * col[j].conj();
            }
        }
    }
    let tr: f64 = (0..m).map(|i| r[[i, i]].re).sum();
    if tr == 0.0 {
        return Ok(IaaState {
            powers: vec![0.0; k],
            iteration: state.iteration + 1,
            loaded: state.loaded,
        });
    }
    let mut loaded = state.loaded;
    let ch = match Cholesky::factor(r.view()) {
        Ok(ch) => ch,
        Err(Error::NotPositiveDefinite) => {
            log::warn!("IAA model covariance is singular; adding relative loading {IAA_EMERGENCY_LOADING}");
            loaded = true;
            add_loading(&mut r, IAA_EMERGENCY_LOADING);
            Cholesky::factor(r.view())?
        }
        Err(e) => return Err(e),
    };
    let l = snapshots.nrows().max(1) as f64;
    let snaps: Vec<Vec<Complex64>> = snapshots.outer_iter().map(|y| y.to_vec()).collect();
    let powers = manifold
        .columns()
        .into_iter()
        .map(|v| {
            let v = v.to_vec();
            let mut rv = v.clone();
            ch.solve_in_place(&mut rv);
            let denom = dotc(&v, &rv).re;
            snaps.iter().map(|y| (dotc(&rv, y) / denom).norm_sqr()).sum::<f64>() / l
        })
        .collect();
    Ok(IaaState {
        powers,
        iteration: state.iteration + 1,
        loaded,
    })
}

/// IAA at one depth: `snapshots` is `L x M` (a single row is allowed),
/// `manifold` is `M x K`.
pub fn iaa_scanline(snapshots: ArrayView2<'_, Complex64>, manifold: ArrayView2<'_, Complex64>, iterations: usize) -> Result<IaaState> {
    if iterations == 0 {
        return Err(Error::InvalidParameter("IAA needs at least one iteration".into()));
    }
    let mut state = iaa_initial(snapshots, manifold);
    for _ in 0..iterations {
        state = iaa_step(&state, snapshots, manifold)?;
    }
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IaaParams {
    pub iterations: usize,
    /// Butler beamspace dimension, as for multibeam Capon.
    pub beams: usize,
}

impl Default for IaaParams {
    fn default() -> Self {
        Self { iterations: 15, beams: 33 }
    }
}

/// Number of lowest-order Butler beams covering the directions `angles`: a
/// beam of order `f` points at `sin(theta) = f / (M pitch / wavelength)`, and
/// one extra beam of margin is kept on each side.
pub fn covering_beams(angles: &[f64], m: usize, spacing_ratio: f64) -> usize {
    let u = angles.iter().map(|a| a.sin().abs()).fold(0.0, f64::max);
    let reach = m as f64 * spacing_ratio * u + 1.0;
    (0..m).filter(|&r| butler_beam_order(r, m).abs() <= reach).count().max(1)
}

/// IAA image: at each depth the phase-compensated emissions are the
/// snapshots and the scan directions the grid. Pixels hold `sqrt(P_k)`.
///
/// The snapshots are first reduced to the Butler beams covering the scan
/// directions at that depth (at most `beams`). Energy outside those beams
/// cannot be explained by the direction grid, and left in place it is
/// amplified by the near-null space of the model covariance.
pub fn iaa_beamform(
    cube: &RawDataCube,
    angles_at: &(dyn Fn(usize) -> Vec<f64> + Sync),
    spacing_ratio: f64,
    params: &IaaParams,
    grid: ImageGrid,
) -> Result<RfImage> {
    check_compensated(cube, &grid)?;
    let (k, m, n) = cube.data.dim();
    let cols = (0..n)
        .into_par_iter()
        .map(|t| {
            let angles = angles_at(t);
            let v = centered_manifold(&angles, m, spacing_ratio);
            let s = phase_compensate(cube, t, &v);
            let dim = params.beams.min(covering_beams(&angles, m, spacing_ratio));
            let (s, v) = if dim < m {
                let b = butler_lowest_beams(m, dim);
                (s.dot(&b.t()), b.dot(&v))
            } else {
                (s, v)
            };
            iaa_scanline(s.view(), v.view(), params.iterations)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut data = Array2::<Complex64>::zeros((k, n));
    let mut loaded = 0;
    for (t, st) in cols.into_iter().enumerate() {
        loaded += st.loaded as usize;
        for (kk, a) in st.amplitudes().into_iter().enumerate() {
            data[[kk, t]] = Complex64::new(a, 0.0);
        }
    }
    if loaded > 0 {
        log::warn!("IAA needed emergency loading at {loaded} of {n} depths");
    }
    let prov = Provenance::new("iaa", k)
        .with("iterations", params.iterations)
        .with("beams", params.beams.min(m));
    Ok(RfImage {
        data,
        kind: ImageKind::Rf,
        provenance: prov,
        grid,
    })
}
