//! Delay-and-sum beamforming and the beamformed image container.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{RawDataCube, ScanLines, ScanPlan};
use crate::error::{Error, Result};
use crate::geometry::ProbeGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageKind {
    Rf,
    Envelope,
    Bmode,
}

impl ImageKind {
    pub fn code(self) -> u8 {
        match self {
            ImageKind::Rf => 0,
            ImageKind::Envelope => 1,
            ImageKind::Bmode => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(ImageKind::Rf),
            1 => Some(ImageKind::Envelope),
            2 => Some(ImageKind::Bmode),
            _ => None,
        }
    }
}

/// Where an image came from. Deliberately excludes timing so that image files
/// are reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub method: String,
    pub params: BTreeMap<String, String>,
    pub emissions_used: usize,
}

impl Provenance {
    pub fn new(method: &str, emissions_used: usize) -> Self {
        Self {
            method: method.to_string(),
            params: BTreeMap::new(),
            emissions_used,
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.params.insert(key.to_string(), value.to_string());
        self
    }
}

/// Physical placement of image rows (scanlines) and columns (depth samples).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    /// One entry per image row.
    pub lines: ScanLines,
    pub depth0: f64,
    pub depth_step: f64,
}

impl ImageGrid {
    pub fn from_scan(scan: &ScanPlan, geom: &ProbeGeometry) -> Self {
        Self {
            lines: scan.lines.clone(),
            depth0: scan.depth(geom, 0),
            depth_step: geom.sample_depth_step(),
        }
    }

    /// Grid restricted to the listed scanlines.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let pick = |v: &[f64]| rows.iter().map(|&i| v[i]).collect();
        Self {
            lines: match &self.lines {
                ScanLines::Sector { angles } => ScanLines::Sector { angles: pick(angles) },
                ScanLines::Linear { lateral } => ScanLines::Linear { lateral: pick(lateral) },
            },
            depth0: self.depth0,
            depth_step: self.depth_step,
        }
    }

    pub fn num_lines(&self) -> usize {
        match &self.lines {
            ScanLines::Sector { angles } => angles.len(),
            ScanLines::Linear { lateral } => lateral.len(),
        }
    }

    pub fn depth(&self, n: usize) -> f64 {
        self.depth0 + n as f64 * self.depth_step
    }

    /// Cartesian `(x, z)` of pixel `(row, n)`.
    pub fn position(&self, row: usize, n: usize) -> (f64, f64) {
        let d = self.depth(n);
        match &self.lines {
            ScanLines::Sector { angles } => (d * angles[row].sin(), d * angles[row].cos()),
            ScanLines::Linear { lateral } => (lateral[row], d),
        }
    }

    /// Lateral coordinate of row `row` at depth sample `n`.
    pub fn lateral(&self, row: usize, n: usize) -> f64 {
        self.position(row, n).0
    }

    /// Approximate pixel area in m^2 (arc length times depth step for sectors).
    pub fn pixel_area(&self, row: usize, n: usize) -> f64 {
        let spacing = |v: &[f64]| -> f64 {
            match v.len() {
                0 | 1 => 0.0,
                len => {
                    let lo = row.saturating_sub(1);
                    let hi = (row + 1).min(len - 1);
                    (v[hi] - v[lo]) / (hi - lo) as f64
                }
            }
        };
        match &self.lines {
            ScanLines::Sector { angles } => self.depth(n) * spacing(angles) * self.depth_step,
            ScanLines::Linear { lateral } => spacing(lateral) * self.depth_step,
        }
    }
}

/// A beamformed image: rows are scanlines, columns are depth samples.
#[derive(Debug, Clone, PartialEq)]
pub struct RfImage {
    pub data: Array2<Complex64>,
    pub kind: ImageKind,
    pub provenance: Provenance,
    pub grid: ImageGrid,
}

impl RfImage {
    pub fn num_lines(&self) -> usize {
        self.data.nrows()
    }

    pub fn num_samples(&self) -> usize {
        self.data.ncols()
    }

    /// Real view of the pixel magnitudes; for envelope images this is the data.
    pub fn magnitudes(&self) -> Array2<f64> {
        self.data.mapv(|v| v.norm())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Apodization {
    #[default]
    None,
    Hanning,
    Hamming,
}

impl Apodization {
    pub fn name(self) -> &'static str {
        match self {
            Apodization::None => "none",
            Apodization::Hanning => "hanning",
            Apodization::Hamming => "hamming",
        }
    }
}

/// Receive weights normalized to unit sum, so `w^T 1 = 1`.
///
/// The Hanning window is the variant without zero end points,
/// `0.5 (1 - cos(2 pi (m + 1) / (M + 1)))`.
pub fn das_weights(m: usize, apod: Apodization) -> Vec<f64> {
    let raw: Vec<f64> = match apod {
        Apodization::None => vec![1.0; m],
        Apodization::Hanning => (0..m)
            .map(|i| 0.5 * (1.0 - (2.0 * PI * (i + 1) as f64 / (m + 1) as f64).cos()))
            .collect(),
        Apodization::Hamming if m == 1 => vec![1.0],
        Apodization::Hamming => (0..m)
            .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (m - 1) as f64).cos())
            .collect(),
    };
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / sum).collect()
}

/// `s_k[n] = w^T y_k[n]` for every emission of a compensated cube.
pub fn das_beamform(cube: &RawDataCube, apod: Apodization, grid: ImageGrid) -> Result<RfImage> {
    if !cube.is_compensated {
        return Err(Error::State("delay-and-sum needs a delay-compensated cube".into()));
    }
    if grid.num_lines() != cube.num_emissions() {
        return Err(Error::DimensionMismatch(format!(
            "grid has {} lines, cube has {} emissions",
            grid.num_lines(),
            cube.num_emissions()
        )));
    }
    let (k, m, n) = cube.data.dim();
    let w = das_weights(m, apod);
    let mut data = Array2::<Complex64>::zeros((k, n));
    if n > 0 {
        let out = data.as_slice_mut().expect("standard layout");
        out.par_chunks_mut(n).enumerate().for_each(|(line, row)| {
            let y = cube.emission(line);
            for (ch, wm) in y.outer_iter().zip(&w) {
                for (o, v) in row.iter_mut().zip(ch.iter()) {
                    *o += v * *wm;
                }
            }
        });
    }
    Ok(RfImage {
        data,
        kind: ImageKind::Rf,
        provenance: Provenance::new("das", k).with("apodization", apod.name()),
        grid,
    })
}

/// Row of the image at depth sample `n`, one value per scanline.
pub fn extract_lateral_scanline(img: &RfImage, n: usize) -> Result<Vec<Complex64>> {
    if n >= img.num_samples() {
        return Err(Error::OutOfRange {
            index: n,
            len: img.num_samples(),
        });
    }
    Ok(img.data.column(n).to_vec())
}
