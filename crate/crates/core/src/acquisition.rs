//! Scan geometry, analytic-signal conversion and dynamic receive focusing.
//!
//! Time zero is the transmit instant. Depth `z` maps to the RF sample
//! `round(2 z fs / c)`, so a compensated cube and the images derived from it
//! share one axial grid: sample `n` sits at depth `(n0 + n) c / (2 fs)`.

use ndarray::{Array3, ArrayView2, Axis};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ProbeGeometry;

/// Scanline layout of the focused emissions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScanLines {
    /// Lines through the array center at the given angles (radians from the axis).
    Sector { angles: Vec<f64> },
    /// Lines parallel to the axis at the given lateral positions (meters).
    /// The steering angle of a point is `atan2(x_k, z)` and so varies with depth.
    Linear { lateral: Vec<f64> },
}

/// How the transmit time of flight from the probe to a point is modeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransmitModel {
    /// Wave launched from the array center: `tau_tx = |s| / c`.
    #[default]
    Spherical,
    /// Virtual source at the transmit focus `F_k` of emission `k`:
    /// `tau_tx = (|F_k| +- |s - F_k|) / c`, with `+` beyond the focus.
    FocalPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanPlan {
    pub lines: ScanLines,
    /// Meters. Range along the line for sector scans, axial depth for linear scans.
    pub depth_start: f64,
    pub depth_end: f64,
    pub focus_depth: f64,
    #[serde(default)]
    pub transmit: TransmitModel,
}

impl ScanPlan {
    pub fn sector(angles: Vec<f64>, depth_start: f64, depth_end: f64, focus_depth: f64) -> Result<Self> {
        let plan = Self {
            lines: ScanLines::Sector { angles },
            depth_start,
            depth_end,
            focus_depth,
            transmit: TransmitModel::Spherical,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn linear(lateral: Vec<f64>, depth_start: f64, depth_end: f64, focus_depth: f64) -> Result<Self> {
        let plan = Self {
            lines: ScanLines::Linear { lateral },
            depth_start,
            depth_end,
            focus_depth,
            transmit: TransmitModel::Spherical,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// `k` lines uniformly spread over `[-half_angle, half_angle]`.
    pub fn uniform_sector(k: usize, half_angle: f64, depth_start: f64, depth_end: f64, focus_depth: f64) -> Result<Self> {
        Self::sector(crate::geometry::uniform_angles(k, half_angle), depth_start, depth_end, focus_depth)
    }

    pub fn uniform_linear(k: usize, half_width: f64, depth_start: f64, depth_end: f64, focus_depth: f64) -> Result<Self> {
        Self::linear(crate::geometry::uniform_angles(k, half_width), depth_start, depth_end, focus_depth)
    }

    pub fn with_transmit(mut self, transmit: TransmitModel) -> Self {
        self.transmit = transmit;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positions = self.line_positions();
        if positions.is_empty() {
            return Err(Error::InvalidParameter("scan plan needs at least one line".into()));
        }
        if positions.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("scanline positions must be finite".into()));
        }
        if positions.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter("scanline positions must be strictly increasing".into()));
        }
        if let ScanLines::Sector { angles } = &self.lines {
            if angles.iter().any(|a| a.abs() >= std::f64::consts::FRAC_PI_2) {
                return Err(Error::InvalidParameter("sector angles must lie strictly inside (-90, 90) degrees".into()));
            }
        }
        if !(self.depth_start > 0.0 && self.depth_end > self.depth_start && self.depth_end.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "depth range must satisfy 0 < start < end, got [{}, {}]",
                self.depth_start, self.depth_end
            )));
        }
        if !(self.focus_depth > 0.0 && self.focus_depth.is_finite()) {
            return Err(Error::InvalidParameter("focus depth must be positive".into()));
        }
        Ok(())
    }

    pub fn num_lines(&self) -> usize {
        self.line_positions().len()
    }

    /// Angles (sector) or lateral positions (linear).
    pub fn line_positions(&self) -> &[f64] {
        match &self.lines {
            ScanLines::Sector { angles } => angles,
            ScanLines::Linear { lateral } => lateral,
        }
    }

    pub fn is_sector(&self) -> bool {
        matches!(self.lines, ScanLines::Sector { .. })
    }

    /// Index of the first depth sample, counted from the transmit instant.
    pub fn first_sample_index(&self, geom: &ProbeGeometry) -> usize {
        (self.depth_start / geom.sample_depth_step()).round() as usize
    }

    /// `N = ceil((depth_end - depth_start) 2 fs / c)`
    pub fn num_samples(&self, geom: &ProbeGeometry) -> usize {
        ((self.depth_end - self.depth_start) / geom.sample_depth_step()).ceil() as usize
    }

    /// Depth (or range) of image sample `n`.
    pub fn depth(&self, geom: &ProbeGeometry, n: usize) -> f64 {
        (self.first_sample_index(geom) + n) as f64 * geom.sample_depth_step()
    }

    /// Cartesian `(x, z)` of the point at `depth` on scanline `k`.
    pub fn point(&self, k: usize, depth: f64) -> (f64, f64) {
        match &self.lines {
            ScanLines::Sector { angles } => (depth * angles[k].sin(), depth * angles[k].cos()),
            ScanLines::Linear { lateral } => (lateral[k], depth),
        }
    }

    /// Direction of the point at `depth` on line `k`, seen from the array center.
    pub fn steering_angle(&self, k: usize, depth: f64) -> f64 {
        match &self.lines {
            ScanLines::Sector { angles } => angles[k],
            ScanLines::Linear { lateral } => lateral[k].atan2(depth),
        }
    }

    /// Steering angles of all lines at `depth`.
    pub fn steering_angles(&self, depth: f64) -> Vec<f64> {
        (0..self.num_lines()).map(|k| self.steering_angle(k, depth)).collect()
    }

    /// Transmit time of flight of emission `k` to the point `s = (x, z)`.
    pub fn transmit_delay(&self, k: usize, s: (f64, f64), sound_speed: f64) -> f64 {
        let r = s.0.hypot(s.1);
        match self.transmit {
            TransmitModel::Spherical => r / sound_speed,
            TransmitModel::FocalPoint => {
                let f = self.point(k, self.focus_depth);
                let rf = f.0.hypot(f.1);
                let d = (s.0 - f.0).hypot(s.1 - f.1);
                if r >= rf {
                    (rf + d) / sound_speed
                } else {
                    (rf - d) / sound_speed
                }
            }
        }
    }

    /// Round-trip time from emission `k` to `s` and back to the element at `x_elem`.
    pub fn round_trip(&self, k: usize, s: (f64, f64), x_elem: f64, sound_speed: f64) -> f64 {
        self.transmit_delay(k, s, sound_speed) + (s.0 - x_elem).hypot(s.1) / sound_speed
    }

    /// Sample range `(first, len)` a raw record must cover so that every
    /// compensation time, widened by `half_duration` seconds, falls inside it.
    pub fn record_window(&self, geom: &ProbeGeometry, half_duration: f64) -> (usize, usize) {
        let xs = geom.element_positions();
        let n_last = self.num_samples(geom).saturating_sub(1);
        let mut t_min = f64::INFINITY;
        let mut t_max = f64::NEG_INFINITY;
        for k in 0..self.num_lines() {
            for n in [0, n_last] {
                let q = self.point(k, self.depth(geom, n));
                for &x in &xs {
                    let t = self.round_trip(k, q, x, geom.sound_speed);
                    t_min = t_min.min(t);
                    t_max = t_max.max(t);
                }
            }
        }
        let fs = geom.sampling_frequency;
        let first = ((t_min - half_duration) * fs).floor().max(0.0) as usize;
        let last = ((t_max + half_duration) * fs).ceil() as usize + 1;
        (first, last - first + 1)
    }
}

/// Channel data of all emissions, stored as `(K, M, N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataCube {
    pub data: Array3<Complex64>,
    pub fs: f64,
    /// Time of sample 0 in seconds after transmit.
    pub t0: f64,
    pub is_compensated: bool,
    pub is_analytic: bool,
}

impl RawDataCube {
    /// All-zero real cube with `K` emissions, `M` channels and `N` samples.
    pub fn zeros(k: usize, m: usize, n: usize, fs: f64, t0: f64) -> Self {
        Self {
            data: Array3::zeros((k, m, n)),
            fs,
            t0,
            is_compensated: false,
            is_analytic: false,
        }
    }

    pub fn num_emissions(&self) -> usize {
        self.data.dim().0
    }

    pub fn num_elements(&self) -> usize {
        self.data.dim().1
    }

    pub fn num_samples(&self) -> usize {
        self.data.dim().2
    }

    /// `M x N` data of emission `k`.
    pub fn emission(&self, k: usize) -> ArrayView2<'_, Complex64> {
        self.data.index_axis(Axis(0), k)
    }

    /// A cube holding only the listed emissions, in the order given.
    pub fn select_emissions(&self, ks: &[usize]) -> Result<Self> {
        let k_all = self.num_emissions();
        if let Some(&bad) = ks.iter().find(|&&k| k >= k_all) {
            return Err(Error::OutOfRange { index: bad, len: k_all });
        }
        Ok(Self {
            data: self.data.select(Axis(0), ks),
            ..self.clone_header()
        })
    }

    fn clone_header(&self) -> Self {
        Self {
            data: Array3::zeros((0, 0, 0)),
            fs: self.fs,
            t0: self.t0,
            is_compensated: self.is_compensated,
            is_analytic: self.is_analytic,
        }
    }

    /// Largest imaginary magnitude; zero for a real cube.
    pub fn max_imag(&self) -> f64 {
        self.data.iter().map(|v| v.im.abs()).fold(0.0, f64::max)
    }
}

/// Discrete analytic signal of every channel: FFT, zero the negative
/// frequencies, double the positive ones, inverse FFT.
pub fn analytic_signal(cube: &RawDataCube) -> Result<RawDataCube> {
    if cube.is_analytic {
        return Err(Error::State("cube is already analytic".into()));
    }
    let n = cube.num_samples();
    let mut out = cube.clone();
    out.is_analytic = true;
    if n == 0 || cube.num_emissions() == 0 || cube.num_elements() == 0 {
        return Ok(out);
    }
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mask = analytic_mask(n);
    let scale = 1.0 / n as f64;

    let slab = cube.num_elements() * n;
    let buf = out.data.as_slice_mut().expect("standard layout");
    buf.par_chunks_mut(slab).for_each(|emission| {
        let mut scratch = vec![Complex64::new(0.0, 0.0); fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len())];
        for ch in emission.chunks_mut(n) {
            for v in ch.iter_mut() {
                v.im = 0.0;
            }
            fwd.process_with_scratch(ch, &mut scratch);
            for (v, h) in ch.iter_mut().zip(&mask) {
                *v *= h * scale;
            }
            inv.process_with_scratch(ch, &mut scratch);
        }
    });
    Ok(out)
}

/// One-sided spectral weights: 1 at DC (and Nyquist for even `n`), 2 on
/// positive bins, 0 on negative bins.
fn analytic_mask(n: usize) -> Vec<f64> {
    let mut h = vec![0.0; n];
    h[0] = 1.0;
    if n.is_multiple_of(2) {
        h[n / 2] = 1.0;
        h[1..n / 2].iter_mut().for_each(|v| *v = 2.0);
    } else {
        h[1..n.div_ceil(2)].iter_mut().for_each(|v| *v = 2.0);
    }
    h
}

/// Dynamic receive focusing. Output sample `(k, m, n)` is channel `m` of
/// emission `k` read at the round-trip time to the point at depth `n` on
/// scanline `k`, linearly interpolated. Times outside the record read as zero.
pub fn compensate_delays(cube: &RawDataCube, geom: &ProbeGeometry, scan: &ScanPlan) -> Result<RawDataCube> {
    compensate_lines(cube, geom, scan, &(0..scan.num_lines()).collect::<Vec<_>>())
}

/// Like [`compensate_delays`] for a cube whose emission `i` belongs to scanline
/// `lines[i]`. Used to focus a decimated acquisition without touching the
/// dropped emissions.
pub fn compensate_lines(cube: &RawDataCube, geom: &ProbeGeometry, scan: &ScanPlan, lines: &[usize]) -> Result<RawDataCube> {
    if cube.is_compensated {
        return Err(Error::State("cube is already delay compensated".into()));
    }
    if cube.num_elements() != geom.num_elements {
        return Err(Error::DimensionMismatch(format!(
            "cube has {} channels, probe has {} elements",
            cube.num_elements(),
            geom.num_elements
        )));
    }
    if cube.num_emissions() != lines.len() {
        return Err(Error::DimensionMismatch(format!(
            "cube has {} emissions, expected {}",
            cube.num_emissions(),
            lines.len()
        )));
    }
    if let Some(&bad) = lines.iter().find(|&&k| k >= scan.num_lines()) {
        return Err(Error::OutOfRange { index: bad, len: scan.num_lines() });
    }
    if (cube.fs - geom.sampling_frequency).abs() > 1e-9 * geom.sampling_frequency {
        return Err(Error::DimensionMismatch(format!(
            "cube sampled at {} Hz, probe at {} Hz",
            cube.fs, geom.sampling_frequency
        )));
    }

    let m_count = geom.num_elements;
    let n_out = scan.num_samples(geom);
    let n_in = cube.num_samples();
    let xs = geom.element_positions();
    let c = geom.sound_speed;
    let fs = cube.fs;
    let depths: Vec<f64> = (0..n_out).map(|n| scan.depth(geom, n)).collect();

    let mut data = Array3::<Complex64>::zeros((lines.len(), m_count, n_out));
    let out = data.as_slice_mut().expect("standard layout");
    out.par_chunks_mut(m_count * n_out).enumerate().for_each(|(i, slab)| {
        let k = lines[i];
        let raw = cube.emission(i);
        for (m, row) in slab.chunks_mut(n_out).enumerate() {
            let x = xs[m];
            let view = raw.row(m);
            let owned;
            let ch = match view.as_slice() {
                Some(s) => s,
                None => {
                    owned = view.to_vec();
                    &owned[..]
                }
            };
            for (n, v) in row.iter_mut().enumerate() {
                let q = scan.point(k, depths[n]);
                let t = scan.round_trip(k, q, x, c);
                *v = interpolate(ch, (t - cube.t0) * fs, n_in);
            }
        }
    });
    let first = scan.first_sample_index(geom);
    Ok(RawDataCube {
        data,
        fs,
        t0: first as f64 / fs,
        is_compensated: true,
        is_analytic: cube.is_analytic,
    })
}

#[inline]
fn interpolate(ch: &[Complex64], pos: f64, n: usize) -> Complex64 {
    if n == 0 || !(pos >= 0.0) || pos > (n - 1) as f64 {
        return Complex64::new(0.0, 0.0);
    }
    let i = pos.floor() as usize;
    if i + 1 >= n {
        return ch[i];
    }
    let frac = pos - i as f64;
    ch[i] * (1.0 - frac) + ch[i + 1] * frac
}
