//! Point-scatterer media and a linear pulse-echo channel simulator.
//!
//! Each scatterer contributes `amplitude * pulse(t - tau_tx - tau_rx)` to every
//! channel, with straight-ray times of flight, no attenuation, no spreading
//! loss and no element directivity. The pulse is evaluated at continuous time,
//! so sub-sample delays are exact.

use std::f64::consts::PI;

use ndarray::Array3;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{RawDataCube, ScanLines, ScanPlan, TransmitModel};
use crate::error::{Error, Result};
use crate::geometry::ProbeGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scatterer {
    /// Lateral position, meters.
    pub x: f64,
    /// Axial position, meters. Must be positive.
    pub z: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phantom {
    pub seed: u64,
    #[serde(default)]
    pub scatterers: Vec<Scatterer>,
}

impl Phantom {
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.scatterers.iter().enumerate() {
            if !(s.z > 0.0 && s.x.is_finite() && s.z.is_finite() && s.amplitude.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "scatterer {i} at ({}, {}) with amplitude {} is not valid",
                    s.x, s.z, s.amplitude
                )));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let p: Phantom = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }
}

/// Hann-windowed cosine burst centered on `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationPulse {
    pub cycles: u32,
    pub f0: f64,
    pub fs: f64,
    /// The pulse sampled at `fs` on `[-T/2, T/2]`, `T = cycles / f0`.
    pub samples: Vec<f64>,
}

impl ExcitationPulse {
    pub fn new(cycles: u32, f0: f64, fs: f64) -> Result<Self> {
        if cycles == 0 || !(f0 > 0.0) || !(fs > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "pulse needs cycles >= 1 and positive frequencies, got {cycles}, {f0}, {fs}"
            )));
        }
        let mut pulse = Self {
            cycles,
            f0,
            fs,
            samples: Vec::new(),
        };
        let half = (pulse.half_duration() * fs).floor() as i64;
        pulse.samples = (-half..=half).map(|i| pulse.value_at(i as f64 / fs)).collect();
        Ok(pulse)
    }

    pub fn from_probe(geom: &ProbeGeometry, cycles: u32) -> Result<Self> {
        Self::new(cycles, geom.center_frequency, geom.sampling_frequency)
    }

    pub fn duration(&self) -> f64 {
        self.cycles as f64 / self.f0
    }

    pub fn half_duration(&self) -> f64 {
        0.5 * self.duration()
    }

    #[inline]
    pub fn value_at(&self, t: f64) -> f64 {
        let d = self.duration();
        if t.abs() > 0.5 * d {
            return 0.0;
        }
        0.5 * (1.0 + (2.0 * PI * t / d).cos()) * (2.0 * PI * self.f0 * t).cos()
    }
}

/// Five equal reflectors: two laterally separated pairs and one centered target.
pub fn point_reflector_phantom() -> Phantom {
    let mm = 1e-3;
    let at = |x: f64, z: f64| Scatterer {
        x: x * mm,
        z: z * mm,
        amplitude: 1.0,
    };
    Phantom {
        seed: 0,
        scatterers: vec![at(-2.0, 63.0), at(2.0, 63.0), at(0.0, 65.0), at(-2.0, 68.0), at(2.0, 68.0)],
    }
}

/// Speckle region with an anechoic disc.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CystSpec {
    pub radius: f64,
    /// Center depth of the cyst.
    pub depth: f64,
    #[serde(default)]
    pub lateral: f64,
    pub n_scatterers: usize,
    /// Scatterers are drawn uniformly in `[-half_width, half_width] x [z_min, z_max]`.
    pub half_width: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl CystSpec {
    /// Region of `1.5 x radius` margin around the disc on every side.
    pub fn around(radius: f64, depth: f64, n_scatterers: usize) -> Self {
        Self {
            radius,
            depth,
            lateral: 0.0,
            n_scatterers,
            half_width: 2.5 * radius,
            z_min: depth - 2.5 * radius,
            z_max: depth + 2.5 * radius,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius < self.depth) {
            return Err(Error::InvalidParameter(format!(
                "cyst radius {} must be positive and smaller than its depth {}",
                self.radius, self.depth
            )));
        }
        if self.n_scatterers == 0 {
            return Err(Error::InvalidParameter("cyst phantom needs at least one scatterer".into()));
        }
        if !(self.z_min > 0.0 && self.z_max > self.z_min && self.half_width > 0.0) {
            return Err(Error::InvalidParameter("cyst scatterer region is empty or not below the probe".into()));
        }
        Ok(())
    }
}

/// Uniformly placed scatterers with standard normal amplitudes; those inside
/// the disc get amplitude 0.
pub fn cyst_phantom(spec: &CystSpec, seed: u64) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r2 = spec.radius * spec.radius;
    let scatterers = (0..spec.n_scatterers)
        .map(|_| {
            let x = rng.random_range(-spec.half_width..=spec.half_width);
            let z = rng.random_range(spec.z_min..=spec.z_max);
            let a: f64 = rng.sample(StandardNormal);
            let inside = (x - spec.lateral).powi(2) + (z - spec.depth).powi(2) <= r2;
            Scatterer {
                x,
                z,
                amplitude: if inside { 0.0 } else { a },
            }
        })
        .collect();
    Ok(Phantom { seed, scatterers })
}

/// Vessel cross-section: anechoic lumen inside a hyperechoic wall, in speckle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VesselSpec {
    pub lumen_radius: f64,
    pub wall_thickness: f64,
    pub depth: f64,
    /// Amplitude multiplier of wall scatterers.
    pub wall_gain: f64,
    pub n_scatterers: usize,
    pub half_width: f64,
    pub z_min: f64,
    pub z_max: f64,
}

pub fn vessel_phantom(spec: &VesselSpec, seed: u64) -> Result<Phantom> {
    if !(spec.lumen_radius > 0.0 && spec.wall_thickness >= 0.0 && spec.lumen_radius + spec.wall_thickness < spec.depth) {
        return Err(Error::InvalidParameter("vessel must lie below the probe with a positive lumen".into()));
    }
    if spec.n_scatterers == 0 || !(spec.z_min > 0.0 && spec.z_max > spec.z_min && spec.half_width > 0.0) {
        return Err(Error::InvalidParameter("vessel scatterer region is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outer = spec.lumen_radius + spec.wall_thickness;
    let scatterers = (0..spec.n_scatterers)
        .map(|_| {
            let x = rng.random_range(-spec.half_width..=spec.half_width);
            let z = rng.random_range(spec.z_min..=spec.z_max);
            let a: f64 = rng.sample(StandardNormal);
            let r = x.hypot(z - spec.depth);
            let gain = if r <= spec.lumen_radius {
                0.0
            } else if r <= outer {
                spec.wall_gain
            } else {
                1.0
            };
            Scatterer { x, z, amplitude: a * gain }
        })
        .collect();
    Ok(Phantom { seed, scatterers })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SimulationOptions {
    /// Additive white Gaussian noise at this cube-level SNR (dB); `None` is noise free.
    pub noise_snr_db: Option<f64>,
    pub seed: u64,
}

/// Raw RF channel data of every emission in `scan`.
///
/// The record covers every time the delay compensation will read, widened by
/// half a pulse. Scatterers farther than half a pulse outside the depth range
/// are skipped. Range is measured from the array center for sector scans and
/// as axial depth for linear scans.
pub fn simulate_raw(
    phantom: &Phantom,
    geom: &ProbeGeometry,
    pulse: &ExcitationPulse,
    scan: &ScanPlan,
    opts: &SimulationOptions,
) -> Result<RawDataCube> {
    geom.validate()?;
    scan.validate()?;
    phantom.validate()?;
    if (pulse.fs - geom.sampling_frequency).abs() > 1e-9 * geom.sampling_frequency {
        return Err(Error::InvalidParameter("pulse and probe sampling rates differ".into()));
    }
    let half = pulse.half_duration();
    let (first, len) = scan.record_window(geom, half);
    let k_count = scan.num_lines();
    let m_count = geom.num_elements;

    let margin = half * geom.sound_speed / 2.0;
    let active: Vec<Scatterer> = phantom
        .scatterers
        .iter()
        .filter(|s| {
            let d = match scan.lines {
                ScanLines::Sector { .. } => s.x.hypot(s.z),
                ScanLines::Linear { .. } => s.z,
            };
            s.amplitude != 0.0 && d >= scan.depth_start - margin && d <= scan.depth_end + margin
        })
        .copied()
        .collect();

    let fs = geom.sampling_frequency;
    let t0 = first as f64 / fs;
    let mut data = Array3::<Complex64>::zeros((k_count, m_count, len));
    let slab_len = m_count * len;
    let buf = data.as_slice_mut().expect("standard layout");

    let render = |k: usize, slab: &mut [Complex64]| {
        let xs = geom.element_positions();
        slab.par_chunks_mut(len).enumerate().for_each(|(m, ch)| {
            for s in &active {
                let tau = scan.round_trip(k, (s.x, s.z), xs[m], geom.sound_speed);
                let lo = ((tau - half) * fs).ceil() as i64 - first as i64;
                let hi = ((tau + half) * fs).floor() as i64 - first as i64;
                let lo = lo.max(0) as usize;
                if hi < 0 {
                    continue;
                }
                let hi = (hi as usize).min(len - 1);
                for (i, v) in ch.iter_mut().enumerate().take(hi + 1).skip(lo) {
                    v.re += s.amplitude * pulse.value_at(t0 + i as f64 / fs - tau);
                }
            }
        });
    };

    match scan.transmit {
        // Every emission sees the same wavefield; render once and copy.
        TransmitModel::Spherical => {
            let (head, tail) = buf.split_at_mut(slab_len);
            render(0, head);
            tail.par_chunks_mut(slab_len).for_each(|slab| slab.copy_from_slice(head));
        }
        TransmitModel::FocalPoint => {
            buf.chunks_mut(slab_len).enumerate().for_each(|(k, slab)| render(k, slab));
        }
    }

    if let Some(snr_db) = opts.noise_snr_db {
        let power = buf.iter().map(|v| v.norm_sqr()).sum::<f64>() / buf.len().max(1) as f64;
        let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
        if sigma > 0.0 {
            add_noise(buf, slab_len, sigma, opts.seed);
        }
    }

    Ok(RawDataCube {
        data,
        fs,
        t0,
        is_compensated: false,
        is_analytic: false,
    })
}

/// White Gaussian noise, one independent ChaCha stream per emission so the
/// result does not depend on scheduling.
fn add_noise(buf: &mut [Complex64], slab_len: usize, sigma: f64, seed: u64) {
    buf.par_chunks_mut(slab_len).enumerate().for_each(|(k, slab)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        for v in slab.iter_mut() {
            let g: f64 = rng.sample(StandardNormal);
            v.re += sigma * g;
        }
    });
}
