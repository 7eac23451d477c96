//! Envelope detection, log compression and B-mode export.
//!
//! Images stay on the (scanline, depth) acquisition grid; no scan conversion
//! is done. Physical extents travel in the metadata sidecar.

use ndarray::Array2;
use num_complex::Complex64;
use serde::Serialize;

use crate::classic_bf::{ImageGrid, ImageKind, Provenance, RfImage};
use crate::error::{Error, Result};

pub const DEFAULT_DYNAMIC_RANGE_DB: f64 = 60.0;

/// Pixel-wise modulus.
pub fn envelope(img: &RfImage) -> Result<RfImage> {
    if img.kind != ImageKind::Rf {
        return Err(Error::State(format!("envelope needs an rf image, got {:?}", img.kind)));
    }
    Ok(RfImage {
        data: img.data.mapv(|v| Complex64::new(v.norm(), 0.0)),
        kind: ImageKind::Envelope,
        provenance: img.provenance.clone(),
        grid: img.grid.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BModeImage {
    /// dB relative to the brightest pixel, in `[-dynamic_range, 0]`; rows are scanlines.
    pub pixels: Array2<f64>,
    pub dynamic_range: f64,
    pub grid: ImageGrid,
    pub provenance: Provenance,
}

/// `20 log10(env / max env)`, clamped below at `-dynamic_range`.
pub fn log_compress(env: &RfImage, dynamic_range: f64) -> Result<BModeImage> {
    if env.kind != ImageKind::Envelope {
        return Err(Error::State(format!("log compression needs an envelope image, got {:?}", env.kind)));
    }
    if !(dynamic_range > 0.0 && dynamic_range.is_finite()) {
        return Err(Error::InvalidParameter(format!("dynamic range must be positive, got {dynamic_range}")));
    }
    let mag = env.magnitudes();
    let peak = mag.iter().copied().fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Err(Error::Degenerate("envelope is all zero; nothing to normalize by".into()));
    }
    let pixels = mag.mapv(|v| {
        let db = 20.0 * (v / peak).log10();
        if db.is_nan() || db < -dynamic_range {
            -dynamic_range
        } else {
            db
        }
    });
    Ok(BModeImage {
        pixels,
        dynamic_range,
        grid: env.grid.clone(),
        provenance: env.provenance.clone(),
    })
}

/// Envelope plus log compression in one call.
pub fn bmode(img: &RfImage, dynamic_range: f64) -> Result<BModeImage> {
    log_compress(&envelope(img)?, dynamic_range)
}

#[derive(Debug, Serialize)]
struct Sidecar<'a> {
    width: usize,
    height: usize,
    dynamic_range_db: f64,
    lateral_min_m: f64,
    lateral_max_m: f64,
    depth_min_m: f64,
    depth_max_m: f64,
    provenance: &'a Provenance,
}

impl BModeImage {
    /// Binary 8-bit PGM with depth running down and scanlines across;
    /// `-dynamic_range` maps to 0 and 0 dB to 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let (k, n) = self.pixels.dim();
        let mut out = format!("P5\n{k} {n}\n255\n").into_bytes();
        out.reserve(k * n);
        for t in 0..n {
            for line in 0..k {
                let v = (self.pixels[[line, t]] + self.dynamic_range) / self.dynamic_range;
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }

    /// Metadata describing the PGM: size, extents, dynamic range, provenance.
    pub fn sidecar_toml(&self) -> Result<String> {
        let (k, n) = self.pixels.dim();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for line in 0..k {
            for t in [0, n.saturating_sub(1)] {
                let x = self.grid.lateral(line, t);
                lo = lo.min(x);
                hi = hi.max(x);
            }
        }
        let side = Sidecar {
            width: k,
            height: n,
            dynamic_range_db: self.dynamic_range,
            lateral_min_m: lo,
            lateral_max_m: hi,
            depth_min_m: self.grid.depth(0),
            depth_max_m: self.grid.depth(n.saturating_sub(1)),
            provenance: &self.provenance,
        };
        toml::to_string(&side).map_err(|e| Error::Format(e.to_string()))
    }
}
