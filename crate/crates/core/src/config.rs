//! Experiment configuration: one TOML file describing the probe, the scan,
//! the phantom, the beamformer and its parameters, and the evaluation.
//!
//! Unknown keys are rejected everywhere. Parameters of the selected method
//! are validated before anything is computed.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::acquisition::ScanPlan;
use crate::adaptive_bf::{IaaParams, MultibeamParams, MvParams};
use crate::classic_bf::Apodization;
use crate::error::{Error, Result};
use crate::geometry::{Decimation, ProbeGeometry};
use crate::inverse_bf::SolveConfig;
use crate::metrics::RegionSpec;
use crate::phantom::{cyst_phantom, point_reflector_phantom, vessel_phantom, CystSpec, Phantom, Scatterer, VesselSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Das,
    Mv,
    BsCapon,
    MultibeamCapon,
    Iaa,
    Bp,
    Ls,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Das,
        Method::Mv,
        Method::BsCapon,
        Method::MultibeamCapon,
        Method::Iaa,
        Method::Bp,
        Method::Ls,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Das => "das",
            Method::Mv => "mv",
            Method::BsCapon => "bs_capon",
            Method::MultibeamCapon => "multibeam_capon",
            Method::Iaa => "iaa",
            Method::Bp => "bp",
            Method::Ls => "ls",
        }
    }

    pub fn is_inverse(self) -> bool {
        matches!(self, Method::Bp | Method::Ls)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}; expected one of das, mv, bs_capon, multibeam_capon, iaa, bp, ls")))
    }
}

/// Scattering medium.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhantomSpec {
    /// No scatterers: the simulated cube is all zero.
    Empty,
    /// The five-reflector layout around 65 mm.
    PointReflectors,
    Points { scatterers: Vec<Scatterer> },
    Cyst(CystSpec),
    Vessel(VesselSpec),
}

impl PhantomSpec {
    pub fn build(&self, seed: u64) -> Result<Phantom> {
        let p = match self {
            PhantomSpec::Empty => Phantom {
                seed,
                scatterers: Vec::new(),
            },
            PhantomSpec::PointReflectors => Phantom {
                seed,
                ..point_reflector_phantom()
            },
            PhantomSpec::Points { scatterers } => Phantom {
                seed,
                scatterers: scatterers.clone(),
            },
            PhantomSpec::Cyst(spec) => cyst_phantom(spec, seed)?,
            PhantomSpec::Vessel(spec) => vessel_phantom(spec, seed)?,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSettings {
    #[serde(default = "default_cycles")]
    pub pulse_cycles: u32,
    /// Cube-level SNR of additive white noise; absent means noise free.
    #[serde(default)]
    pub noise_snr_db: Option<f64>,
}

fn default_cycles() -> u32 {
    2
}

impl Default for SimulationSettings {
    fn default() -> Self {
        Self {
            pulse_cycles: 2,
            noise_snr_db: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DasSettings {
    #[serde(default = "default_apodization")]
    pub apodization: Apodization,
}

fn default_apodization() -> Apodization {
    Apodization::Hanning
}

impl Default for DasSettings {
    fn default() -> Self {
        Self {
            apodization: default_apodization(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BsCaponSettings {
    /// Butler beams kept; absent keeps the full subaperture space.
    #[serde(default)]
    pub beams: Option<usize>,
}

/// Regularized inversion of the decimated DAS scanline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InverseSettings {
    pub reg_lambda: f64,
    /// `K / P`: one emission in this many is used.
    #[serde(default = "default_factor")]
    pub decimation_factor: usize,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_factor() -> usize {
    5
}
fn default_max_iters() -> usize {
    5000
}
fn default_tol() -> f64 {
    1e-8
}

impl InverseSettings {
    pub fn new(reg_lambda: f64) -> Self {
        Self {
            reg_lambda,
            decimation_factor: default_factor(),
            max_iters: default_max_iters(),
            tol: default_tol(),
        }
    }

    pub fn solve_config(&self, method: Method) -> SolveConfig {
        let base = if method == Method::Bp {
            SolveConfig::bp(self.reg_lambda)
        } else {
            SolveConfig::ls(self.reg_lambda)
        };
        SolveConfig {
            max_iters: self.max_iters,
            tol: self.tol,
            ..base
        }
    }

    pub fn decimation(&self, k: usize) -> Result<Decimation> {
        Decimation::with_factor(k, self.decimation_factor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagingSettings {
    #[serde(default = "default_dr")]
    pub dynamic_range_db: f64,
}

fn default_dr() -> f64 {
    crate::imaging::DEFAULT_DYNAMIC_RANGE_DB
}

impl Default for ImagingSettings {
    fn default() -> Self {
        Self {
            dynamic_range_db: default_dr(),
        }
    }
}

/// CNR uses `|mu_1 - mu_2| / sqrt(s_1^2 + s_2^2)` on `speckle` (R1) and
/// `target` (R2); SNR is taken on `speckle`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionPair {
    pub speckle: RegionSpec,
    pub target: RegionSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSettings {
    pub depth: f64,
    #[serde(default = "default_average")]
    pub average_n: usize,
}

fn default_average() -> usize {
    15
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSettings {
    #[serde(default)]
    pub regions: Option<RegionPair>,
    #[serde(default)]
    pub profile: Option<ProfileSettings>,
    /// Methods run by `compare`; empty means all.
    #[serde(default)]
    pub compare: Vec<Method>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSettings {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputSettings {
    fn default() -> Self {
        Self { dir: default_out() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub method: Method,
    pub probe: ProbeGeometry,
    pub scan: ScanPlan,
    pub phantom: PhantomSpec,
    #[serde(default)]
    pub simulation: SimulationSettings,
    #[serde(default)]
    pub das: DasSettings,
    /// Absent means [`MvParams::defaults`] for the probe.
    #[serde(default)]
    pub mv: Option<MvParams>,
    #[serde(default)]
    pub bs_capon: BsCaponSettings,
    #[serde(default)]
    pub multibeam_capon: MultibeamParams,
    #[serde(default)]
    pub iaa: IaaParams,
    pub bp: InverseSettings,
    pub ls: InverseSettings,
    #[serde(default)]
    pub imaging: ImagingSettings,
    #[serde(default)]
    pub evaluation: EvaluationSettings,
    #[serde(default)]
    pub output: OutputSettings,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn mv_params(&self) -> MvParams {
        self.mv.unwrap_or_else(|| MvParams::defaults(self.probe.num_elements))
    }

    /// Probe, scan and phantom checks plus those of `self.method`.
    pub fn validate(&self) -> Result<()> {
        self.probe.validate().map_err(to_config)?;
        self.scan.validate().map_err(to_config)?;
        if self.simulation.pulse_cycles == 0 {
            return Err(Error::Config("pulse_cycles must be at least 1".into()));
        }
        if let Some(snr) = self.simulation.noise_snr_db {
            if !snr.is_finite() {
                return Err(Error::Config(format!("noise_snr_db must be finite, got {snr}")));
            }
        }
        if !(self.imaging.dynamic_range_db > 0.0 && self.imaging.dynamic_range_db.is_finite()) {
            return Err(Error::Config("dynamic_range_db must be positive".into()));
        }
        if let Some(p) = &self.evaluation.profile {
            if p.average_n == 0 {
                return Err(Error::Config("profile average_n must be at least 1".into()));
            }
        }
        self.validate_method(self.method)
    }

    pub fn validate_method(&self, method: Method) -> Result<()> {
        let m = self.probe.num_elements;
        let k = self.scan.num_lines();
        let r = match method {
            Method::Das => Ok(()),
            Method::Mv => self.mv_params().validate(m),
            Method::BsCapon => {
                let p = self.mv_params();
                p.validate(m)?;
                match self.bs_capon.beams {
                    Some(0) => Err(Error::InvalidParameter("bs_capon needs at least one beam".into())),
                    Some(b) if b > p.subaperture => Err(Error::InvalidParameter(format!(
                        "bs_capon beams {b} exceed the subaperture length {}",
                        p.subaperture
                    ))),
                    _ => Ok(()),
                }
            }
            Method::MultibeamCapon => {
                let p = &self.multibeam_capon;
                if p.beams == 0 || !(p.loading >= 0.0 && p.loading.is_finite()) {
                    Err(Error::InvalidParameter("multibeam_capon needs beams >= 1 and loading >= 0".into()))
                } else {
                    Ok(())
                }
            }
            Method::Iaa => {
                if self.iaa.iterations == 0 || self.iaa.beams == 0 {
                    Err(Error::InvalidParameter("iaa needs iterations >= 1 and beams >= 1".into()))
                } else {
                    Ok(())
                }
            }
            Method::Bp | Method::Ls => {
                let s = if method == Method::Bp { &self.bp } else { &self.ls };
                s.decimation(k)?;
                s.solve_config(method).validate()?;
                if method == Method::Bp && !(s.reg_lambda > 0.0) {
                    Err(Error::InvalidParameter("bp needs reg_lambda > 0".into()))
                } else {
                    Ok(())
                }
            }
        };
        r.map_err(|e| Error::Config(format!("{method}: {e}")))
    }

    pub fn preset(name: &str) -> Result<Self> {
        let cfg = match name {
            "point_scatterers" => point_scatterers(),
            "cyst" => cyst(),
            "point_scatterers_desk" => point_scatterers_desk(),
            "cyst_desk" => cyst_desk(),
            "carotid_desk" => carotid_desk(),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; available: {}",
                    PRESETS.join(", ")
                )))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn to_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

pub const PRESETS: [&str; 5] = [
    "point_scatterers",
    "cyst",
    "point_scatterers_desk",
    "cyst_desk",
    "carotid_desk",
];

const MM: f64 = 1e-3;

fn low_frequency_probe(m: usize) -> ProbeGeometry {
    ProbeGeometry {
        num_elements: m,
        pitch: 256e-6,
        center_frequency: 3e6,
        sampling_frequency: 100e6,
        sound_speed: 1540.0,
    }
}

/// Half-width of the sector scans.
const SECTOR_HALF_ANGLE_DEG: f64 = 20.0;

fn sector(k: usize, start: f64, end: f64, focus: f64) -> ScanPlan {
    ScanPlan::uniform_sector(k, SECTOR_HALF_ANGLE_DEG.to_radians(), start, end, focus).expect("valid preset scan")
}

fn base(name: &str, probe: ProbeGeometry, scan: ScanPlan, phantom: PhantomSpec, bp: f64, ls: f64) -> ExperimentConfig {
    ExperimentConfig {
        name: name.to_string(),
        seed: 1,
        method: Method::Das,
        probe,
        scan,
        phantom,
        simulation: SimulationSettings::default(),
        das: DasSettings::default(),
        mv: None,
        bs_capon: BsCaponSettings::default(),
        multibeam_capon: MultibeamParams::default(),
        iaa: IaaParams::default(),
        bp: InverseSettings::new(bp),
        ls: InverseSettings::new(ls),
        imaging: ImagingSettings::default(),
        evaluation: EvaluationSettings::default(),
        output: OutputSettings::default(),
    }
}

fn cyst_regions(radius: f64, depth: f64) -> RegionPair {
    // Equal squares: one inside the cyst, one in speckle at the same depth.
    let half = 0.5 * radius;
    RegionPair {
        target: RegionSpec::Rect {
            x: 0.0,
            z: depth,
            half_width: half,
            half_height: half,
        },
        speckle: RegionSpec::Rect {
            x: 2.4 * radius,
            z: depth,
            half_width: half,
            half_height: half,
        },
    }
}

/// Full-size point-reflector experiment: 64 elements, 260 emissions.
pub fn point_scatterers() -> ExperimentConfig {
    let mut c = base(
        "point_scatterers",
        low_frequency_probe(64),
        sector(260, 60.0 * MM, 71.0 * MM, 65.0 * MM),
        PhantomSpec::PointReflectors,
        0.5,
        0.7,
    );
    c.evaluation.profile = Some(ProfileSettings {
        depth: 65.0 * MM,
        average_n: 1,
    });
    c
}

/// Full-size cyst experiment: 5 mm radius at 80 mm in speckle.
pub fn cyst() -> ExperimentConfig {
    let spec = CystSpec {
        half_width: 32.0 * MM,
        z_min: 72.0 * MM,
        z_max: 88.0 * MM,
        ..CystSpec::around(5.0 * MM, 80.0 * MM, 50_000)
    };
    let mut c = base(
        "cyst",
        low_frequency_probe(64),
        sector(260, 74.0 * MM, 86.0 * MM, 80.0 * MM),
        PhantomSpec::Cyst(spec),
        0.5,
        1.0,
    );
    c.evaluation.regions = Some(cyst_regions(5.0 * MM, 80.0 * MM));
    c.evaluation.profile = Some(ProfileSettings {
        depth: 80.0 * MM,
        average_n: 15,
    });
    c
}

/// Reduced point-reflector experiment: 32 elements, 65 emissions.
pub fn point_scatterers_desk() -> ExperimentConfig {
    let mut c = point_scatterers();
    c.name = "point_scatterers_desk".into();
    c.probe = low_frequency_probe(32);
    c.scan = sector(65, 60.0 * MM, 71.0 * MM, 65.0 * MM);
    c
}

/// Reduced cyst experiment: 32 elements, 65 emissions.
pub fn cyst_desk() -> ExperimentConfig {
    let mut c = cyst();
    c.name = "cyst_desk".into();
    c.probe = low_frequency_probe(32);
    c.scan = sector(65, 74.0 * MM, 86.0 * MM, 80.0 * MM);
    if let PhantomSpec::Cyst(spec) = &mut c.phantom {
        spec.n_scatterers = 12_000;
    }
    c
}

/// Reduced vessel scan with a high-frequency linear-array probe.
pub fn carotid_desk() -> ExperimentConfig {
    let probe = ProbeGeometry {
        num_elements: 32,
        pitch: 110e-6,
        center_frequency: 7e6,
        sampling_frequency: 40e6,
        sound_speed: 1540.0,
    };
    let scan = ScanPlan::uniform_linear(65, 5.0 * MM, 6.0 * MM, 17.0 * MM, 11.5 * MM).expect("valid preset scan");
    let vessel = VesselSpec {
        lumen_radius: 3.0 * MM,
        wall_thickness: 0.6 * MM,
        depth: 11.5 * MM,
        wall_gain: 4.0,
        n_scatterers: 6_000,
        half_width: 6.0 * MM,
        z_min: 5.0 * MM,
        z_max: 18.0 * MM,
    };
    let mut c = base("carotid_desk", probe, scan, PhantomSpec::Vessel(vessel), 0.5, 1.0);
    c.evaluation.regions = Some(RegionPair {
        target: RegionSpec::Rect {
            x: 0.0,
            z: 11.5 * MM,
            half_width: 1.5 * MM,
            half_height: 1.5 * MM,
        },
        speckle: RegionSpec::Rect {
            x: 0.0,
            z: 7.2 * MM,
            half_width: 1.5 * MM,
            half_height: 0.6 * MM,
        },
    });
    c
}
