//! Binary and text file formats.
//!
//! Raw cube (`USRF`), little endian:
//!
//! ```text
//! magic "USRF" | version u32 | M u32 | N u32 | K u32 | fs f64 | t0 f64
//! flags u32 (bit 0 complex, bit 1 compensated, bit 2 analytic) | layout u32 (0 = channel-major)
//! samples: for m, for k, for n: f32 (real) or f32 re, f32 im (complex)
//! ```
//!
//! Samples are stored as f32, so reading a cube produces f32-representable
//! values and writing it again reproduces the file byte for byte.
//!
//! Image (`USIM`) keeps f64 so beamformed images round-trip exactly:
//!
//! ```text
//! magic "USIM" | version u32 | K u32 | N u32 | kind u32 | line kind u32 (0 sector, 1 linear)
//! depth0 f64 | depth_step f64 | K line positions f64
//! provenance length u32 | provenance TOML bytes
//! samples: for k, for n: f64 re, f64 im
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3};
use num_complex::Complex64;

use crate::acquisition::{RawDataCube, ScanLines};
use crate::classic_bf::{ImageGrid, ImageKind, Provenance, RfImage};
use crate::error::{Error, Result};
use crate::metrics::LateralProfile;

const CUBE_MAGIC: &[u8; 4] = b"USRF";
const IMAGE_MAGIC: &[u8; 4] = b"USIM";
const VERSION: u32 = 1;

const FLAG_COMPLEX: u32 = 1;
const FLAG_COMPENSATED: u32 = 2;
const FLAG_ANALYTIC: u32 = 4;
const LAYOUT_CHANNEL_MAJOR: u32 = 0;

/// Header fields of a raw cube file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CubeHeader {
    pub num_elements: usize,
    pub num_samples: usize,
    pub num_emissions: usize,
    pub fs: f64,
    pub t0: f64,
    pub complex: bool,
    pub is_compensated: bool,
    pub is_analytic: bool,
}

const CUBE_HEADER_LEN: usize = 4 + 4 * 4 + 8 * 2 + 4 * 2;

pub fn encode_cube(cube: &RawDataCube) -> Vec<u8> {
    let (k, m, n) = cube.data.dim();
    let complex = cube.is_analytic || cube.max_imag() != 0.0;
    let mut flags = 0;
    if complex {
        flags |= FLAG_COMPLEX;
    }
    if cube.is_compensated {
        flags |= FLAG_COMPENSATED;
    }
    if cube.is_analytic {
        flags |= FLAG_ANALYTIC;
    }
    let per = if complex { 8 } else { 4 };
    let mut out = Vec::with_capacity(CUBE_HEADER_LEN + k * m * n * per);
    out.extend_from_slice(CUBE_MAGIC);
    for v in [VERSION, m as u32, n as u32, k as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&cube.fs.to_le_bytes());
    out.extend_from_slice(&cube.t0.to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&LAYOUT_CHANNEL_MAJOR.to_le_bytes());
    for mi in 0..m {
        for ki in 0..k {
            for ni in 0..n {
                let v = cube.data[[ki, mi, ni]];
                out.extend_from_slice(&(v.re as f32).to_le_bytes());
                if complex {
                    out.extend_from_slice(&(v.im as f32).to_le_bytes());
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("file truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != want {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(want)
            )));
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn read_cube_header(r: &mut Reader<'_>) -> Result<CubeHeader> {
    r.magic(CUBE_MAGIC)?;
    let m = r.u32()? as usize;
    let n = r.u32()? as usize;
    let k = r.u32()? as usize;
    let fs = r.f64()?;
    let t0 = r.f64()?;
    let flags = r.u32()?;
    let layout = r.u32()?;
    if layout != LAYOUT_CHANNEL_MAJOR {
        return Err(Error::Format(format!("unknown layout {layout}")));
    }
    if flags & !(FLAG_COMPLEX | FLAG_COMPENSATED | FLAG_ANALYTIC) != 0 {
        return Err(Error::Format(format!("unknown flags {flags:#x}")));
    }
    if !(fs > 0.0 && fs.is_finite() && t0.is_finite()) {
        return Err(Error::Format(format!("bad timing fs={fs} t0={t0}")));
    }
    Ok(CubeHeader {
        num_elements: m,
        num_samples: n,
        num_emissions: k,
        fs,
        t0,
        complex: flags & FLAG_COMPLEX != 0,
        is_compensated: flags & FLAG_COMPENSATED != 0,
        is_analytic: flags & FLAG_ANALYTIC != 0,
    })
}

pub fn decode_cube_header(bytes: &[u8]) -> Result<CubeHeader> {
    read_cube_header(&mut Reader { buf: bytes, pos: 0 })
}

pub fn decode_cube(bytes: &[u8]) -> Result<RawDataCube> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let h = read_cube_header(&mut r)?;
    let (k, m, n) = (h.num_emissions, h.num_elements, h.num_samples);
    let per = if h.complex { 8 } else { 4 };
    let expected = k
        .checked_mul(m)
        .and_then(|v| v.checked_mul(n))
        .and_then(|v| v.checked_mul(per))
        .ok_or_else(|| Error::Format("cube dimensions overflow".into()))?;
    if bytes.len() - r.pos != expected {
        return Err(Error::Format(format!(
            "payload is {} bytes, header implies {expected}",
            bytes.len() - r.pos
        )));
    }
    let mut data = Array3::<Complex64>::zeros((k, m, n));
    for mi in 0..m {
        for ki in 0..k {
            for ni in 0..n {
                let re = r.f32()? as f64;
                let im = if h.complex { r.f32()? as f64 } else { 0.0 };
                data[[ki, mi, ni]] = Complex64::new(re, im);
            }
        }
    }
    r.finish()?;
    Ok(RawDataCube {
        data,
        fs: h.fs,
        t0: h.t0,
        is_compensated: h.is_compensated,
        is_analytic: h.is_analytic,
    })
}

pub fn encode_image(img: &RfImage) -> Result<Vec<u8>> {
    let (k, n) = img.data.dim();
    if img.grid.num_lines() != k {
        return Err(Error::DimensionMismatch(format!(
            "image has {k} rows but its grid has {} lines",
            img.grid.num_lines()
        )));
    }
    let prov = toml::to_string(&img.provenance).map_err(|e| Error::Format(e.to_string()))?;
    let (line_kind, positions) = match &img.grid.lines {
        ScanLines::Sector { angles } => (0u32, angles),
        ScanLines::Linear { lateral } => (1u32, lateral),
    };
    let mut out = Vec::with_capacity(64 + 8 * k + prov.len() + 16 * k * n);
    out.extend_from_slice(IMAGE_MAGIC);
    for v in [VERSION, k as u32, n as u32, img.kind.code() as u32, line_kind] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&img.grid.depth0.to_le_bytes());
    out.extend_from_slice(&img.grid.depth_step.to_le_bytes());
    for p in positions {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out.extend_from_slice(&(prov.len() as u32).to_le_bytes());
    out.extend_from_slice(prov.as_bytes());
    for v in img.data.iter() {
        out.extend_from_slice(&v.re.to_le_bytes());
        out.extend_from_slice(&v.im.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_image(bytes: &[u8]) -> Result<RfImage> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.magic(IMAGE_MAGIC)?;
    let k = r.u32()? as usize;
    let n = r.u32()? as usize;
    let code = r.u32()?;
    let kind = u8::try_from(code)
        .ok()
        .and_then(ImageKind::from_code)
        .ok_or_else(|| Error::Format(format!("unknown image kind {code}")))?;
    let line_kind = r.u32()?;
    let depth0 = r.f64()?;
    let depth_step = r.f64()?;
    let positions = (0..k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let lines = match line_kind {
        0 => ScanLines::Sector { angles: positions },
        1 => ScanLines::Linear { lateral: positions },
        other => return Err(Error::Format(format!("unknown line kind {other}"))),
    };
    let plen = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(plen)?).map_err(|e| Error::Format(e.to_string()))?;
    let provenance: Provenance = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
    if bytes.len() - r.pos != k * n * 16 {
        return Err(Error::Format(format!(
            "payload is {} bytes, header implies {}",
            bytes.len() - r.pos,
            k * n * 16
        )));
    }
    let mut data = Array2::<Complex64>::zeros((k, n));
    for v in data.iter_mut() {
        *v = Complex64::new(r.f64()?, r.f64()?);
    }
    r.finish()?;
    Ok(RfImage {
        data,
        kind,
        provenance,
        grid: ImageGrid {
            lines,
            depth0,
            depth_step,
        },
    })
}

/// `lateral_m,amplitude,db` rows.
pub fn profile_csv(p: &LateralProfile) -> String {
    let mut s = String::from("lateral_m,amplitude,db\n");
    for ((x, a), d) in p.lateral.iter().zip(&p.amplitude).zip(p.db()) {
        s.push_str(&format!("{x},{a},{d}\n"));
    }
    s
}

/// One row of a metrics or comparison table. Missing values print empty.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsRow {
    pub method: String,
    pub cnr: Option<f64>,
    pub snr: Option<f64>,
    pub rg: Option<f64>,
    pub emissions_used: usize,
    pub wall_time_s: Option<f64>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `method,emissions_used,cnr,snr,rg`; carries no timing so that it is
/// reproducible byte for byte.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from("method,emissions_used,cnr,snr,rg\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.method,
            r.emissions_used,
            cell(r.cnr),
            cell(r.snr),
            cell(r.rg)
        ));
    }
    s
}

/// Comparison table with a trailing wall-time column.
pub fn compare_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from("method,emissions_used,cnr,snr,rg,wall_time_s\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.method,
            r.emissions_used,
            cell(r.cnr),
            cell(r.snr),
            cell(r.rg),
            cell(r.wall_time_s)
        ));
    }
    s
}

/// Parses a table written by [`metrics_csv`] or [`compare_csv`].
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let timed = match header.as_slice() {
        ["method", "emissions_used", "cnr", "snr", "rg"] => false,
        ["method", "emissions_used", "cnr", "snr", "rg", "wall_time_s"] => true,
        _ => return Err(Error::Format(format!("unrecognized metrics header {header:?}"))),
    };
    let num = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| Error::Format(format!("bad number {s:?}")))
        }
    };
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != header.len() {
                return Err(Error::Format(format!("row {l:?} has {} fields", f.len())));
            }
            Ok(MetricsRow {
                method: f[0].to_string(),
                emissions_used: f[1].parse().map_err(|_| Error::Format(format!("bad count {:?}", f[1])))?,
                cnr: num(f[2])?,
                snr: num(f[3])?,
                rg: num(f[4])?,
                wall_time_s: if timed { num(f[5])? } else { None },
            })
        })
        .collect()
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidParameter(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.partial", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn write_cube(path: &Path, cube: &RawDataCube) -> Result<()> {
    write_atomic(path, &encode_cube(cube))
}

pub fn read_cube(path: &Path) -> Result<RawDataCube> {
    decode_cube(&fs::read(path)?)
}

pub fn write_image(path: &Path, img: &RfImage) -> Result<()> {
    write_atomic(path, &encode_image(img)?)
}

pub fn read_image(path: &Path) -> Result<RfImage> {
    decode_image(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(complex: bool) -> RawDataCube {
        let mut c = RawDataCube::zeros(3, 2, 5, 4e7, 1.5e-6);
        for ((k, m, n), v) in c.data.indexed_iter_mut() {
            let re = (k * 100 + m * 10 + n) as f64 * 0.1;
            *v = Complex64::new(re, if complex { -re / 3.0 } else { 0.0 });
        }
        c.is_analytic = complex;
        c
    }

    #[test]
    fn cube_round_trip_is_byte_exact() {
        for complex in [false, true] {
            let bytes = encode_cube(&cube(complex));
            let back = decode_cube(&bytes).unwrap();
            assert_eq!(encode_cube(&back), bytes);
            assert_eq!(back.is_analytic, complex);
            let h = decode_cube_header(&bytes).unwrap();
            assert_eq!((h.num_elements, h.num_samples, h.num_emissions), (2, 5, 3));
            assert_eq!(h.complex, complex);
            for (a, b) in back.data.iter().zip(cube(complex).data.iter()) {
                assert_eq!(a.re, b.re as f32 as f64);
                assert_eq!(a.im, b.im as f32 as f64);
            }
        }
    }

    #[test]
    fn cube_layout_is_channel_major() {
        let c = cube(false);
        let bytes = encode_cube(&c);
        // Second stored sample is channel 0, emission 0, sample 1; the
        // sixth starts emission 1 of channel 0.
        let at = |i: usize| f32::from_le_bytes(bytes[CUBE_HEADER_LEN + 4 * i..][..4].try_into().unwrap());
        assert_eq!(at(1), c.data[[0, 0, 1]].re as f32);
        assert_eq!(at(5), c.data[[1, 0, 0]].re as f32);
        assert_eq!(at(15), c.data[[0, 1, 0]].re as f32);
    }

    #[test]
    fn corrupt_cubes_are_rejected() {
        let bytes = encode_cube(&cube(true));
        assert!(decode_cube(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_cube(&bad), Err(Error::Format(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_cube(&extra).is_err());
    }

    #[test]
    fn image_round_trip_is_exact() {
        let img = RfImage {
            data: Array2::from_shape_fn((3, 4), |(k, n)| Complex64::new(k as f64 / 7.0, -(n as f64).sqrt())),
            kind: ImageKind::Rf,
            provenance: Provenance::new("bp", 13).with("reg_lambda", 0.5),
            grid: ImageGrid {
                lines: ScanLines::Sector {
                    angles: vec![-0.1, 0.0, 0.1],
                },
                depth0: 0.05,
                depth_step: 7.7e-6,
            },
        };
        let bytes = encode_image(&img).unwrap();
        let back = decode_image(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!(encode_image(&back).unwrap(), bytes);
        assert!(decode_image(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn metrics_csv_round_trip() {
        let rows = vec![
            MetricsRow {
                method: "das".into(),
                cnr: Some(1.25),
                snr: Some(1.9),
                rg: Some(1.0),
                emissions_used: 65,
                wall_time_s: Some(0.5),
            },
            MetricsRow {
                method: "bp".into(),
                cnr: Some(0.1 + 0.2),
                snr: None,
                rg: None,
                emissions_used: 13,
                wall_time_s: None,
            },
        ];
        let text = compare_csv(&rows);
        assert_eq!(parse_metrics_csv(&text).unwrap(), rows);
        let plain = parse_metrics_csv(&metrics_csv(&rows)).unwrap();
        assert_eq!(plain[0].wall_time_s, None);
        assert_eq!(plain[1].cnr, Some(0.1 + 0.2));
        assert!(parse_metrics_csv("a,b\n").is_err());
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
