//! End-to-end runs: simulate, beamform with any method, evaluate.

use std::time::{Duration, Instant};

use crate::acquisition::{analytic_signal, compensate_delays, compensate_lines, RawDataCube};
use crate::adaptive_bf::{bs_capon_beamform, iaa_beamform, multibeam_capon_beamform, mv_beamform};
use crate::classic_bf::{das_beamform, Apodization, ImageGrid, RfImage};
use crate::config::{ExperimentConfig, Method};
use crate::error::{Error, Result};
use crate::imaging::envelope;
use crate::inverse_bf::{inverse_beamform_decimated, InverseModel};
use crate::io::MetricsRow;
use crate::metrics::{cnr, resolution_gain, snr};
use crate::phantom::{simulate_raw, ExcitationPulse, Phantom, SimulationOptions};

#[derive(Debug, Clone)]
pub struct Simulation {
    pub phantom: Phantom,
    pub cube: RawDataCube,
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<Simulation> {
    cfg.validate()?;
    let phantom = cfg.phantom.build(cfg.seed)?;
    let pulse = ExcitationPulse::from_probe(&cfg.probe, cfg.simulation.pulse_cycles)?;
    let opts = SimulationOptions {
        noise_snr_db: cfg.simulation.noise_snr_db,
        seed: cfg.seed,
    };
    let cube = simulate_raw(&phantom, &cfg.probe, &pulse, &cfg.scan, &opts)?;
    Ok(Simulation { phantom, cube })
}

/// The raw cube must come from the configured probe and scan.
pub fn check_cube(cfg: &ExperimentConfig, cube: &RawDataCube) -> Result<()> {
    let (k, m, n) = cube.data.dim();
    let fs = cfg.probe.sampling_frequency;
    if m != cfg.probe.num_elements
        || k != cfg.scan.num_lines()
        || (cube.fs - fs).abs() > 1e-9 * fs
        || n == 0
    {
        return Err(Error::DimensionMismatch(format!(
            "raw cube (K={k}, M={m}, N={n}, fs={}) does not match the configuration (K={}, M={}, fs={fs})",
            cube.fs,
            cfg.scan.num_lines(),
            cfg.probe.num_elements
        )));
    }
    if cube.is_analytic || cube.is_compensated {
        return Err(Error::State("expected a raw (real, uncompensated) cube".into()));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Beamformed {
    pub image: RfImage,
    /// Compute time from raw cube to RF image, excluding any I/O.
    pub wall_time: Duration,
    /// Depth samples where the l1 solver hit its iteration cap.
    pub nonconverged_depths: Vec<usize>,
}

/// Steering angles of every line at depth sample `n` of the image grid.
fn angles_at(cfg: &ExperimentConfig) -> impl Fn(usize) -> Vec<f64> + Sync + '_ {
    move |n| cfg.scan.steering_angles(cfg.scan.depth(&cfg.probe, n))
}

/// Runs `method` on a raw cube. The inverse methods read only the kept
/// emissions, so the dropped ones never influence their output.
pub fn beamform(cfg: &ExperimentConfig, method: Method, raw: &RawDataCube) -> Result<Beamformed> {
    cfg.validate_method(method)?;
    check_cube(cfg, raw)?;
    let grid = ImageGrid::from_scan(&cfg.scan, &cfg.probe);
    let start = Instant::now();
    if method.is_inverse() {
        return beamform_inverse(cfg, method, raw, grid, start);
    }
    let cube = compensate_delays(&analytic_signal(raw)?, &cfg.probe, &cfg.scan)?;
    let ratio = cfg.probe.spacing_ratio();
    let image = match method {
        Method::Das => das_beamform(&cube, cfg.das.apodization, grid)?,
        Method::Mv => mv_beamform(&cube, &cfg.mv_params(), grid)?,
        Method::BsCapon => bs_capon_beamform(&cube, &cfg.mv_params(), cfg.bs_capon.beams, grid)?,
        Method::MultibeamCapon => multibeam_capon_beamform(&cube, &angles_at(cfg), ratio, &cfg.multibeam_capon, grid)?,
        Method::Iaa => iaa_beamform(&cube, &angles_at(cfg), ratio, &cfg.iaa, grid)?,
        Method::Bp | Method::Ls => unreachable!(),
    };
    Ok(Beamformed {
        image,
        wall_time: start.elapsed(),
        nonconverged_depths: Vec::new(),
    })
}

fn beamform_inverse(
    cfg: &ExperimentConfig,
    method: Method,
    raw: &RawDataCube,
    grid: ImageGrid,
    start: Instant,
) -> Result<Beamformed> {
    let settings = if method == Method::Bp { &cfg.bp } else { &cfg.ls };
    let k = cfg.scan.num_lines();
    let d = settings.decimation(k)?;
    let solve = settings.solve_config(method);
    let m = cfg.probe.num_elements;
    let ratio = cfg.probe.spacing_ratio();
    let model = if cfg.scan.is_sector() {
        InverseModel::fixed(&cfg.scan.steering_angles(cfg.scan.depth_start), m, ratio, &d, &solve)?
    } else {
        let n = cfg.scan.num_samples(&cfg.probe);
        let f = angles_at(cfg);
        InverseModel::per_depth(&(0..n).map(f).collect::<Vec<_>>(), m, ratio, &d, &solve)?
    };

    let kept = d.selected();
    let sub = raw.select_emissions(&kept)?;
    let cube = compensate_lines(&analytic_signal(&sub)?, &cfg.probe, &cfg.scan, &kept)?;
    // The model is built on unweighted channel sums.
    let z = das_beamform(&cube, Apodization::None, grid.subset(&kept))?;
    let out = inverse_beamform_decimated(&z, grid, &model)?;
    Ok(Beamformed {
        image: out.image,
        wall_time: start.elapsed(),
        nonconverged_depths: out.nonconverged_depths,
    })
}

/// A metric that is undefined on this image (zero variance) becomes an empty
/// cell; any other failure is an error.
fn defined(method: &str, name: &str, v: Result<f64>) -> Result<Option<f64>> {
    match v {
        Ok(v) => Ok(Some(v)),
        Err(Error::Degenerate(msg)) => {
            log::warn!("{method}: {name} undefined ({msg})");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// CNR and SNR on the configured regions (when present) and RG against
/// `reference` (when given). Both images are envelope detected here.
pub fn evaluate(cfg: &ExperimentConfig, image: &RfImage, reference: Option<&RfImage>) -> Result<MetricsRow> {
    let env = envelope(image)?;
    let method = &image.provenance.method;
    let (c, s) = match &cfg.evaluation.regions {
        Some(r) => (
            defined(method, "CNR", cnr(&env, &r.speckle, &r.target))?,
            defined(method, "SNR", snr(&env, &r.speckle))?,
        ),
        None => (None, None),
    };
    let rg = match reference {
        Some(reference) => defined(method, "RG", resolution_gain(&envelope(reference)?, &env))?,
        None => None,
    };
    Ok(MetricsRow {
        method: image.provenance.method.clone(),
        cnr: c,
        snr: s,
        rg,
        emissions_used: image.provenance.emissions_used,
        wall_time_s: None,
    })
}

/// Beamforms with every listed method and evaluates each against the DAS
/// image. All parameters are validated before any beamforming starts.
pub fn compare(cfg: &ExperimentConfig, raw: &RawDataCube, methods: &[Method]) -> Result<Vec<(Beamformed, MetricsRow)>> {
    let methods: Vec<Method> = if methods.is_empty() {
        Method::ALL.to_vec()
    } else {
        methods.to_vec()
    };
    for &m in &methods {
        cfg.validate_method(m)?;
    }
    check_cube(cfg, raw)?;
    let das = beamform(cfg, Method::Das, raw)?;
    let mut out = Vec::with_capacity(methods.len());
    for &m in &methods {
        let b = if m == Method::Das { das.clone() } else { beamform(cfg, m, raw)? };
        let mut row = evaluate(cfg, &b.image, Some(&das.image))?;
        row.wall_time_s = Some(b.wall_time.as_secs_f64());
        out.push((b, row));
    }
    Ok(out)
}
