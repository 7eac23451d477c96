//! Image-quality metrics on envelope images: CNR, SNR, resolution gain, and
//! the profile/peak measurements used to compare beamformers.
//!
//! Region statistics use every pixel whose center falls inside the region,
//! with population standard deviations.

use std::collections::VecDeque;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::classic_bf::{ImageKind, RfImage};
use crate::error::{Error, Result};

/// Regions with fewer pixels than this trigger a warning.
pub const MIN_REGION_PIXELS: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegionSpec {
    Rect {
        /// Lateral center, meters.
        x: f64,
        /// Axial center, meters.
        z: f64,
        half_width: f64,
        half_height: f64,
    },
    Disc {
        x: f64,
        z: f64,
        radius: f64,
    },
}

impl RegionSpec {
    pub fn contains(&self, px: f64, pz: f64) -> bool {
        match *self {
            RegionSpec::Rect {
                x,
                z,
                half_width,
                half_height,
            } => (px - x).abs() <= half_width && (pz - z).abs() <= half_height,
            RegionSpec::Disc { x, z, radius } => (px - x).hypot(pz - z) <= radius,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            RegionSpec::Rect {
                x,
                z,
                half_width,
                half_height,
            } => x.is_finite() && z.is_finite() && half_width > 0.0 && half_height > 0.0,
            RegionSpec::Disc { x, z, radius } => x.is_finite() && z.is_finite() && radius > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("malformed region {self:?}")))
        }
    }
}

fn require_envelope(img: &RfImage) -> Result<()> {
    if img.kind != ImageKind::Envelope {
        return Err(Error::State(format!("metrics need an envelope image, got {:?}", img.kind)));
    }
    Ok(())
}

/// `(row, sample)` indices of the pixels inside `region`.
pub fn region_pixels(img: &RfImage, region: &RegionSpec) -> Result<Vec<(usize, usize)>> {
    region.validate()?;
    let (k, n) = img.data.dim();
    let mut out = Vec::new();
    for row in 0..k {
        for t in 0..n {
            let (x, z) = img.grid.position(row, t);
            if region.contains(x, z) {
                out.push((row, t));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidParameter(format!("region {region:?} contains no pixels of the image")));
    }
    if out.len() < MIN_REGION_PIXELS {
        log::warn!(
            "region {region:?} holds only {} pixels; statistics will be noisy",
            out.len()
        );
    }
    Ok(out)
}

/// Population mean and standard deviation of the envelope over a region.
pub fn region_stats(img: &RfImage, region: &RegionSpec) -> Result<(f64, f64)> {
    require_envelope(img)?;
    let px = region_pixels(img, region)?;
    Ok(mean_std(px.iter().map(|&(r, t)| img.data[[r, t]].norm())))
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `|mu_1 - mu_2| / sqrt(sigma_1^2 + sigma_2^2)`
pub fn cnr(env: &RfImage, r1: &RegionSpec, r2: &RegionSpec) -> Result<f64> {
    require_envelope(env)?;
    let p1 = region_pixels(env, r1)?;
    let p2 = region_pixels(env, r2)?;
    let set: std::collections::HashSet<_> = p1.iter().collect();
    if p2.iter().any(|p| set.contains(p)) {
        return Err(Error::InvalidParameter("CNR regions overlap; they must be disjoint".into()));
    }
    let (m1, s1) = mean_std(p1.iter().map(|&(r, t)| env.data[[r, t]].norm()));
    let (m2, s2) = mean_std(p2.iter().map(|&(r, t)| env.data[[r, t]].norm()));
    let denom = (s1 * s1 + s2 * s2).sqrt();
    if denom == 0.0 {
        return Err(Error::Degenerate("both CNR regions have zero variance".into()));
    }
    Ok((m1 - m2).abs() / denom)
}

/// `mu / sigma` over a homogeneous region.
pub fn snr(env: &RfImage, r: &RegionSpec) -> Result<f64> {
    let (m, s) = region_stats(env, r)?;
    if s == 0.0 {
        return Err(Error::Degenerate("SNR region has zero variance".into()));
    }
    Ok(m / s)
}

/// Number of lags in the main lobe of the normalized 2-D autocorrelation of
/// the zero-mean envelope: the 4-connected set around lag 0 where the
/// normalized value exceeds 0.5 (-3 dB in power).
pub fn autocorrelation_area(env: &RfImage) -> Result<usize> {
    require_envelope(env)?;
    let (k, n) = env.data.dim();
    let mag = env.magnitudes();
    let mean = mag.sum() / (k * n).max(1) as f64;
    let centered = mag.mapv(|v| v - mean);
    let energy: f64 = centered.iter().map(|v| v * v).sum();
    if !(energy > 0.0) || k == 0 || n == 0 {
        return Err(Error::Degenerate("image has zero variance; autocorrelation undefined".into()));
    }
    let acf = autocorrelation(&centered);
    let (pk, pn) = acf.dim();
    let norm = acf[[0, 0]];
    let mut seen = Array2::<bool>::from_elem((pk, pn), false);
    let mut queue = VecDeque::from([(0usize, 0usize)]);
    seen[[0, 0]] = true;
    let mut count = 0;
    // Lags live on a torus of size (pk, pn); padding guarantees no wraparound
    // within +-(k-1, n-1).
    let wrap = |i: usize, d: isize, len: usize| ((i as isize + d).rem_euclid(len as isize)) as usize;
    while let Some((i, j)) = queue.pop_front() {
        count += 1;
        for (di, dj) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
            let (a, b) = (wrap(i, di, pk), wrap(j, dj, pn));
            let lag_i = if a > pk / 2 { pk - a } else { a };
            let lag_j = if b > pn / 2 { pn - b } else { b };
            if lag_i >= k || lag_j >= n || seen[[a, b]] {
                continue;
            }
            seen[[a, b]] = true;
            if acf[[a, b]] / norm > 0.5 {
                queue.push_back((a, b));
            }
        }
    }
    Ok(count)
}

/// Linear (non-circular) autocorrelation via zero-padded FFTs. Entry `(i, j)`
/// holds lag `(i, j)` with negative lags wrapped to the end.
fn autocorrelation(x: &Array2<f64>) -> Array2<f64> {
    let (k, n) = x.dim();
    let pk = (2 * k - 1).next_power_of_two();
    let pn = (2 * n - 1).next_power_of_two();
    let mut buf = Array2::<Complex64>::zeros((pk, pn));
    for ((i, j), v) in x.indexed_iter() {
        buf[[i, j]] = Complex64::new(*v, 0.0);
    }
    let mut planner = FftPlanner::<f64>::new();
    fft2(&mut buf, &mut planner, false);
    buf.mapv_inplace(|v| Complex64::new(v.norm_sqr(), 0.0));
    fft2(&mut buf, &mut planner, true);
    let scale = 1.0 / (pk * pn) as f64;
    buf.mapv(|v| v.re * scale)
}

fn fft2(buf: &mut Array2<Complex64>, planner: &mut FftPlanner<f64>, inverse: bool) {
    let (r, c) = buf.dim();
    let row_fft = if inverse { planner.plan_fft_inverse(c) } else { planner.plan_fft_forward(c) };
    for mut row in buf.rows_mut() {
        let mut v = row.to_vec();
        row_fft.process(&mut v);
        row.assign(&ndarray::Array1::from(v));
    }
    let col_fft = if inverse { planner.plan_fft_inverse(r) } else { planner.plan_fft_forward(r) };
    for mut col in buf.columns_mut() {
        let mut v = col.to_vec();
        col_fft.process(&mut v);
        col.assign(&ndarray::Array1::from(v));
    }
}

/// `area(reference) / area(test)`; above 1 means the test image is sharper.
pub fn resolution_gain(reference: &RfImage, test: &RfImage) -> Result<f64> {
    if reference.data.dim() != test.data.dim() {
        return Err(Error::DimensionMismatch(format!(
            "reference is {:?}, test is {:?}",
            reference.data.dim(),
            test.data.dim()
        )));
    }
    Ok(autocorrelation_area(reference)? as f64 / autocorrelation_area(test)? as f64)
}

/// Lateral envelope profile at one depth.
#[derive(Debug, Clone, PartialEq)]
pub struct LateralProfile {
    /// Lateral position of each scanline at the profile depth, meters.
    pub lateral: Vec<f64>,
    /// Mean envelope over the averaged depths.
    pub amplitude: Vec<f64>,
}

/// Floor used when converting zero amplitudes to dB.
pub const PROFILE_FLOOR_DB: f64 = -300.0;

impl LateralProfile {
    /// dB relative to the profile maximum.
    pub fn db(&self) -> Vec<f64> {
        let peak = self.amplitude.iter().copied().fold(0.0, f64::max);
        self.amplitude
            .iter()
            .map(|&a| {
                if peak > 0.0 && a > 0.0 {
                    (20.0 * (a / peak).log10()).max(PROFILE_FLOOR_DB)
                } else if peak > 0.0 {
                    PROFILE_FLOOR_DB
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Mean of `average_n` lateral rows centered on the sample nearest `depth`.
/// The window is clipped to the image.
pub fn lateral_profile(env: &RfImage, depth: f64, average_n: usize) -> Result<LateralProfile> {
    require_envelope(env)?;
    let n = env.num_samples();
    let pos = (depth - env.grid.depth0) / env.grid.depth_step;
    if !(pos >= -0.5 && pos < n as f64 - 0.5) {
        return Err(Error::InvalidParameter(format!(
            "depth {depth} m lies outside the image ({} to {} m)",
            env.grid.depth(0),
            env.grid.depth(n.saturating_sub(1))
        )));
    }
    let center = pos.round() as usize;
    let avg = average_n.max(1);
    let lo = center.saturating_sub((avg - 1) / 2);
    let hi = (lo + avg - 1).min(n - 1);
    let count = (hi - lo + 1) as f64;
    let amplitude = (0..env.num_lines())
        .map(|k| (lo..=hi).map(|t| env.data[[k, t]].norm()).sum::<f64>() / count)
        .collect();
    let lateral = (0..env.num_lines()).map(|k| env.grid.lateral(k, center)).collect();
    Ok(LateralProfile { lateral, amplitude })
}

/// Width of the lobe around `peak` at half its amplitude (-6 dB), with linear
/// interpolation of the crossings. A lobe reaching the profile edge is
/// measured to the edge.
pub fn mainlobe_width(profile: &LateralProfile, peak: usize) -> f64 {
    let a = &profile.amplitude;
    let x = &profile.lateral;
    let half = 0.5 * a[peak];
    let mut left = x[0];
    for i in (0..peak).rev() {
        if a[i] <= half {
            let f = (a[i + 1] - half) / (a[i + 1] - a[i]);
            left = x[i + 1] + f * (x[i] - x[i + 1]);
            break;
        }
    }
    let mut right = x[a.len() - 1];
    for i in peak + 1..a.len() {
        if a[i] <= half {
            let f = (a[i - 1] - half) / (a[i - 1] - a[i]);
            right = x[i - 1] + f * (x[i] - x[i - 1]);
            break;
        }
    }
    right - left
}

/// Index of the largest amplitude within `[lo, hi]`.
pub fn argmax_in(profile: &LateralProfile, lo: usize, hi: usize) -> usize {
    (lo..=hi.min(profile.amplitude.len() - 1))
        .max_by(|&i, &j| profile.amplitude[i].total_cmp(&profile.amplitude[j]).then(j.cmp(&i)))
        .unwrap_or(lo)
}

/// Local-maximum search on an envelope image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakSearch {
    /// Peaks below this level relative to the image maximum are ignored.
    pub threshold_db: f64,
    /// Neighborhood half sizes in scanlines and depth samples.
    pub half_lines: usize,
    pub half_samples: usize,
}

/// Pixels that are the maximum of their neighborhood (ties go to the first
/// pixel in row-major order) and above the threshold, strongest first.
pub fn find_peaks(env: &RfImage, search: &PeakSearch) -> Result<Vec<(usize, usize)>> {
    require_envelope(env)?;
    let mag = env.magnitudes();
    let (k, n) = mag.dim();
    let peak = mag.iter().copied().fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Ok(Vec::new());
    }
    let floor = peak * 10f64.powf(search.threshold_db / 20.0);
    let mut out = Vec::new();
    for r in 0..k {
        for t in 0..n {
            let v = mag[[r, t]];
            if v < floor || v == 0.0 {
                continue;
            }
            let mut is_max = true;
            'scan: for rr in r.saturating_sub(search.half_lines)..=(r + search.half_lines).min(k - 1) {
                for tt in t.saturating_sub(search.half_samples)..=(t + search.half_samples).min(n - 1) {
                    let w = mag[[rr, tt]];
                    if w > v || (w == v && (rr, tt) < (r, t)) {
                        is_max = false;
                        break 'scan;
                    }
                }
            }
            if is_max {
                out.push((r, t));
            }
        }
    }
    out.sort_by(|a, b| mag[[b.0, b.1]].total_cmp(&mag[[a.0, a.1]]));
    Ok(out)
}

/// Radius of a dark inclusion read off a lateral profile: starting at the
/// scanline nearest `center`, walk outward on each side until the profile
/// (dB relative to its maximum) first reaches `threshold_db`; the radius is
/// half the distance between the two interpolated crossings.
pub fn inclusion_radius(profile: &LateralProfile, center: f64, threshold_db: f64) -> f64 {
    let db = profile.db();
    let x = &profile.lateral;
    let c = (0..x.len())
        .min_by(|&i, &j| (x[i] - center).abs().total_cmp(&(x[j] - center).abs()))
        .unwrap_or(0);
    if db[c] >= threshold_db {
        return 0.0;
    }
    let cross = |i: usize, j: usize| {
        // db[i] < threshold <= db[j]
        let f = (threshold_db - db[i]) / (db[j] - db[i]);
        x[i] + f * (x[j] - x[i])
    };
    let mut left = x[0];
    for i in (0..c).rev() {
        if db[i] >= threshold_db {
            left = cross(i + 1, i);
            break;
        }
    }
    let mut right = x[x.len() - 1];
    if let Some(i) = (c + 1..x.len()).find(|&i| db[i] >= threshold_db) {
        right = cross(i - 1, i);
    }
    0.5 * (right - left)
}
