//! Beamforming as a per-depth regularized inverse problem.
//!
//! At every depth sample `n` the lateral DAS scanline obeys
//! `s[n] = A^H A x[n] + g[n]`. Keeping only `P` of the `K` emissions gives
//! `z[n] = D^H s[n] = G x[n] + D^H g[n]` with `G = A_BS^H A` (`P x K`), and
//! `x[n]` is recovered from
//!
//! ```text
//! min_x ||z - G x||_2^2 + lambda * R(x),   R = ||x||_1 (basis pursuit) or ||x||_2^2 (Tikhonov)
//! ```
//!
//! Depths are solved independently and the solutions stacked into an image.

use std::fmt;

use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classic_bf::{ImageGrid, ImageKind, Provenance, RfImage};
use crate::error::{Error, Result};
use crate::geometry::{steering_matrix_spaced, Decimation};
use crate::linalg::{column_inner, norm_sqr, spectral_norm_sqr, Cholesky};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prior {
    /// l1 penalty, solved as basis pursuit denoising.
    LaplacianL1,
    /// Squared l2 penalty, solved in closed form.
    GaussianL2,
}

impl fmt::Display for Prior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Prior::LaplacianL1 => "laplacian_l1",
            Prior::GaussianL2 => "gaussian_l2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveConfig {
    pub reg_lambda: f64,
    pub prior: Prior,
    /// Iteration cap of the l1 solver.
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Stop once an accepted l1 step lowers the objective by less than this
    /// fraction.
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_max_iters() -> usize {
    5000
}

fn default_tol() -> f64 {
    1e-8
}

impl SolveConfig {
    pub fn bp(reg_lambda: f64) -> Self {
        Self {
            reg_lambda,
            prior: Prior::LaplacianL1,
            max_iters: default_max_iters(),
            tol: default_tol(),
        }
    }

    pub fn ls(reg_lambda: f64) -> Self {
        Self {
            reg_lambda,
            prior: Prior::GaussianL2,
            max_iters: default_max_iters(),
            tol: default_tol(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.reg_lambda >= 0.0 && self.reg_lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "reg_lambda must be finite and nonnegative, got {}",
                self.reg_lambda
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// `G = A_BS^H A` together with the emission selection that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardModel {
    /// `P x K`
    pub g: Array2<Complex64>,
    pub decimation: Decimation,
}

impl ForwardModel {
    pub fn num_unknowns(&self) -> usize {
        self.g.ncols()
    }

    pub fn num_observations(&self) -> usize {
        self.g.nrows()
    }
}

/// Row `i` of `G` is row `(K/P) i` of `A^H A`, summed in the same order so the
/// two agree exactly.
pub fn build_forward_model(a: ArrayView2<'_, Complex64>, d: &Decimation) -> Result<ForwardModel> {
    if a.ncols() != d.full_len() {
        return Err(Error::DimensionMismatch(format!(
            "steering matrix has {} columns, decimation expects {}",
            a.ncols(),
            d.full_len()
        )));
    }
    let sel = d.selected();
    let k = a.ncols();
    let g = Array2::from_shape_fn((sel.len(), k), |(i, j)| column_inner(a, sel[i], a, j));
    Ok(ForwardModel {
        g,
        decimation: d.clone(),
    })
}

/// `z = D^H s`
pub fn decimate_observation(s: &[Complex64], d: &Decimation) -> Result<Vec<Complex64>> {
    d.apply(s)
}

/// Result of an l1 solve.
#[derive(Debug, Clone, PartialEq)]
pub struct BpSolution {
    pub x: Vec<Complex64>,
    pub objective: f64,
    pub iterations: usize,
    /// False when `max_iters` ran out first; `x` is then the best iterate.
    pub converged: bool,
    /// Objective after every accepted step, when requested.
    pub trace: Option<Vec<f64>>,
}

/// `||z - G x||^2 + lambda ||x||_1`
pub fn bp_objective(z: &[Complex64], g: ArrayView2<'_, Complex64>, x: &[Complex64], lambda: f64) -> f64 {
    let mut r = vec![ZERO; z.len()];
    crate::linalg::matvec(g, x, &mut r);
    let fit: f64 = r.iter().zip(z).map(|(a, b)| (b - a).norm_sqr()).sum();
    fit + lambda * x.iter().map(|v| v.norm()).sum::<f64>()
}

/// Basis pursuit denoising, `min ||z - G x||^2 + lambda ||x||_1`.
pub fn bp_solve(z: &[Complex64], g: ArrayView2<'_, Complex64>, cfg: &SolveConfig) -> Result<BpSolution> {
    bp_solve_traced(z, g, cfg, false)
}

pub fn bp_solve_traced(
    z: &[Complex64],
    g: ArrayView2<'_, Complex64>,
    cfg: &SolveConfig,
    trace: bool,
) -> Result<BpSolution> {
    cfg.validate()?;
    if !(cfg.reg_lambda > 0.0) {
        return Err(Error::InvalidParameter("basis pursuit needs reg_lambda > 0".into()));
    }
    if g.nrows() != z.len() {
        return Err(Error::DimensionMismatch(format!(
            "G has {} rows, observation has {} entries",
            g.nrows(),
            z.len()
        )));
    }
    let k = g.ncols();
    let q = Array2::from_shape_fn((k, k), |(i, j)| column_inner(g, i, g, j));
    let mut b = vec![ZERO; k];
    crate::linalg::matvec_h(g, z, &mut b);
    let lipschitz = 2.0 * spectral_norm_sqr(g) * LIPSCHITZ_MARGIN;
    Ok(fista(&ComplexGram(&q), &b, norm_sqr(z), lipschitz, cfg, trace))
}

/// Power iteration approaches the top eigenvalue from below; the margin keeps
/// the step inside the stable range.
const LIPSCHITZ_MARGIN: f64 = 1.001;

/// Hermitian `K x K` operator `Q = G^H G` acting on complex vectors.
trait Gram: Sync {
    fn apply(&self, x: &[Complex64], out: &mut [Complex64]);
}

struct ComplexGram<'a>(&'a Array2<Complex64>);

impl Gram for ComplexGram<'_> {
    fn apply(&self, x: &[Complex64], out: &mut [Complex64]) {
        crate::linalg::matvec(self.0.view(), x, out);
    }
}

struct RealGram<'a>(&'a Array2<f64>);

impl Gram for RealGram<'_> {
    fn apply(&self, x: &[Complex64], out: &mut [Complex64]) {
        for (row, o) in self.0.outer_iter().zip(out.iter_mut()) {
            let (mut re, mut im) = (0.0, 0.0);
            for (q, v) in row.iter().zip(x) {
                re += q * v.re;
                im += q * v.im;
            }
            *o = Complex64::new(re, im);
        }
    }
}

#[inline]
fn soft_threshold(v: Complex64, tau: f64) -> Complex64 {
    let mag = v.norm();
    if mag <= tau {
        ZERO
    } else {
        v * (1.0 - tau / mag)
    }
}

/// `||z||^2 - 2 Re(x^H b) + Re(x^H Q x) + lambda ||x||_1`, given `Qx`.
fn objective(zz: f64, b: &[Complex64], x: &[Complex64], qx: &[Complex64], lambda: f64) -> f64 {
    let mut lin = 0.0;
    let mut quad = 0.0;
    let mut l1 = 0.0;
    for ((xi, bi), qi) in x.iter().zip(b).zip(qx) {
        lin += (xi.conj() * bi).re;
        quad += (xi.conj() * qi).re;
        l1 += xi.norm();
    }
    (zz - 2.0 * lin + quad).max(0.0) + lambda * l1
}

/// Accelerated proximal gradient with complex soft thresholding and
/// function-value restart. A candidate that raises the objective is discarded
/// and momentum is reset, so accepted iterates never get worse.
///
/// Works in the Gram domain: with `Q = G^H G` and `b = G^H z`, the gradient
/// of the fit is `2 (Q x - b)`. `Q y` is carried along linearly with the
/// momentum, so each step costs one product with `Q`.
fn fista<Q: Gram>(q: &Q, b: &[Complex64], zz: f64, lipschitz: f64, cfg: &SolveConfig, trace: bool) -> BpSolution {
    let k = b.len();
    let lambda = cfg.reg_lambda;
    let gmax = b.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let mut trace_buf = trace.then(|| vec![zz]);
    // Zero is optimal exactly when every |(G^H z)_j| <= lambda / 2.
    if lambda >= 2.0 * gmax || lipschitz <= 0.0 {
        return BpSolution {
            x: vec![ZERO; k],
            objective: zz,
            iterations: 0,
            converged: true,
            trace: trace_buf,
        };
    }
    let step = 1.0 / lipschitz;
    let tau = lambda * step;

    let mut x = vec![ZERO; k];
    let mut qx = vec![ZERO; k];
    let mut j = zz;
    let mut y = x.clone();
    let mut qy = qx.clone();
    let mut t = 1.0_f64;
    let mut cand = vec![ZERO; k];
    let mut qc = vec![ZERO; k];
    let mut restarted = true;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        iterations += 1;
        for i in 0..k {
            let grad = 2.0 * (qy[i] - b[i]);
            cand[i] = soft_threshold(y[i] - grad * step, tau);
        }
        q.apply(&cand, &mut qc);
        let jc = objective(zz, b, &cand, &qc, lambda);

        if jc > j {
            if restarted {
                // A plain proximal step from x cannot go uphill beyond rounding.
                converged = true;
                break;
            }
            y.copy_from_slice(&x);
            qy.copy_from_slice(&qx);
            t = 1.0;
            restarted = true;
            continue;
        }

        let decrease = (j - jc) / j.max(f64::MIN_POSITIVE);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let mom = (t - 1.0) / t_next;
        for i in 0..k {
            y[i] = cand[i] + (cand[i] - x[i]) * mom;
            qy[i] = qc[i] + (qc[i] - qx[i]) * mom;
        }
        std::mem::swap(&mut x, &mut cand);
        std::mem::swap(&mut qx, &mut qc);
        j = jc;
        t = t_next;
        restarted = false;
        if let Some(tr) = trace_buf.as_mut() {
            tr.push(j);
        }
        if decrease < cfg.tol {
            converged = true;
            break;
        }
    }
    BpSolution {
        x,
        objective: j,
        iterations,
        converged,
        trace: trace_buf,
    }
}

/// Tikhonov solution `x = (G^H G + lambda I)^-1 G^H z`, by Cholesky.
pub fn ls_solve(z: &[Complex64], g: ArrayView2<'_, Complex64>, cfg: &SolveConfig) -> Result<Vec<Complex64>> {
    cfg.validate()?;
    if g.nrows() != z.len() {
        return Err(Error::DimensionMismatch(format!(
            "G has {} rows, observation has {} entries",
            g.nrows(),
            z.len()
        )));
    }
    let k = g.ncols();
    let mut h = Array2::from_shape_fn((k, k), |(i, j)| column_inner(g, i, g, j));
    for i in 0..k {
        h[[i, i]] += cfg.reg_lambda;
    }
    let ch = Cholesky::factor(h.view())?;
    let mut x = vec![ZERO; k];
    crate::linalg::matvec_h(g, z, &mut x);
    ch.solve_in_place(&mut x);
    Ok(x)
}

/// Per-depth operator in the array-centered phase reference.
///
/// With `phi_j = exp(j beta c sin(theta_j))`, `beta = 2 pi pitch / wavelength`
/// and `c = (M - 1) / 2`, the model factors as `G = Phi_sel G_c Phi^H` where
/// `G_c[i, j] = sum_m cos(beta (m - c) (u_sel(i) - u_j))` is real. A DAS
/// scanline of point reflectors, whose phase is referenced to the array
/// center, equals `G_c x / M`, so the solvers run on `G_c / M`: a reflector
/// sitting on a scanline then has the amplitude of its DAS peak.
#[derive(Debug, Clone)]
struct DepthOperator {
    /// `P x K`, real.
    g: Array2<f64>,
    /// `G^T G` for basis pursuit, with `G = G_c / M`.
    q: Option<Array2<f64>>,
    lipschitz: f64,
    /// `(G^T G + lambda I)^-1 G^T` for Tikhonov.
    w: Option<Array2<f64>>,
}

/// Centered model `G_c` from the complex forward model.
pub fn centered_operator(model: &ForwardModel, angles: &[f64], spacing_ratio: f64, m: usize) -> Result<Array2<f64>> {
    let k = model.num_unknowns();
    if angles.len() != k {
        return Err(Error::DimensionMismatch(format!("{} angles for {} unknowns", angles.len(), k)));
    }
    let beta = 2.0 * std::f64::consts::PI * spacing_ratio;
    let c = (m as f64 - 1.0) / 2.0;
    let phi: Vec<Complex64> = angles.iter().map(|a| Complex64::from_polar(1.0, beta * c * a.sin())).collect();
    let sel = model.decimation.selected();
    let scale = m as f64;
    let mut out = Array2::<f64>::zeros(model.g.raw_dim());
    for ((i, j), v) in model.g.indexed_iter() {
        let r = phi[sel[i]].conj() * v * phi[j];
        if r.im.abs() > 1e-9 * scale {
            return Err(Error::State(format!(
                "forward model is not real in the centered reference (imaginary part {} at ({i}, {j}))",
                r.im
            )));
        }
        out[[i, j]] = r.re;
    }
    Ok(out)
}

impl DepthOperator {
    fn new(g: Array2<f64>, cfg: &SolveConfig) -> Result<Self> {
        match cfg.prior {
            Prior::LaplacianL1 => {
                let gc = g.mapv(|v| Complex64::new(v, 0.0));
                let lipschitz = 2.0 * spectral_norm_sqr(gc.view()) * LIPSCHITZ_MARGIN;
                Ok(Self {
                    q: Some(g.t().dot(&g)),
                    g,
                    lipschitz,
                    w: None,
                })
            }
            Prior::GaussianL2 => {
                // (G^T G + lambda I)^-1 G^T = G^T (G G^T + lambda I)^-1, which
                // only needs a P x P factorization.
                let p = g.nrows();
                let mut h = g.dot(&g.t()).mapv(|v| Complex64::new(v, 0.0));
                for i in 0..p {
                    h[[i, i]] += cfg.reg_lambda;
                }
                let ch = Cholesky::factor(h.view())?;
                let gc = g.mapv(|v| Complex64::new(v, 0.0));
                let w = ch.solve_matrix(gc.view()).t().mapv(|v| v.re);
                Ok(Self {
                    g,
                    q: None,
                    lipschitz: 0.0,
                    w: Some(w),
                })
            }
        }
    }

    fn solve(&self, z: &[Complex64], cfg: &SolveConfig) -> (Vec<Complex64>, bool) {
        if let Some(w) = &self.w {
            return (real_matvec(w, z), true);
        }
        let q = self.q.as_ref().expect("l1 operator carries its Gram matrix");
        let b = real_matvec_t(&self.g, z);
        let sol = fista(&RealGram(q), &b, norm_sqr(z), self.lipschitz, cfg, false);
        (sol.x, sol.converged)
    }
}

fn real_matvec(a: &Array2<f64>, x: &[Complex64]) -> Vec<Complex64> {
    a.outer_iter()
        .map(|row| {
            row.iter()
                .zip(x)
                .fold(ZERO, |s, (r, v)| Complex64::new(s.re + r * v.re, s.im + r * v.im))
        })
        .collect()
}

fn real_matvec_t(a: &Array2<f64>, y: &[Complex64]) -> Vec<Complex64> {
    let mut out = vec![ZERO; a.ncols()];
    for (row, yi) in a.outer_iter().zip(y) {
        for (o, r) in out.iter_mut().zip(row.iter()) {
            o.re += r * yi.re;
            o.im += r * yi.im;
        }
    }
    out
}

/// Operators for every depth of an image, prepared once and shared.
#[derive(Debug, Clone)]
pub struct InverseModel {
    ops: Vec<DepthOperator>,
    /// Either one operator for all depths or one per depth.
    per_depth: bool,
    decimation: Decimation,
    cfg: SolveConfig,
}

impl InverseModel {
    /// Fixed angle grid (sector scan): one operator serves every depth.
    pub fn fixed(angles: &[f64], m: usize, spacing_ratio: f64, decimation: &Decimation, cfg: &SolveConfig) -> Result<Self> {
        cfg.validate()?;
        let op = Self::operator(angles, m, spacing_ratio, decimation, cfg)?;
        Ok(Self {
            ops: vec![op],
            per_depth: false,
            decimation: decimation.clone(),
            cfg: *cfg,
        })
    }

    /// Depth-dependent angle grids (linear scan): `angles[n]` holds the
    /// steering angles of all lines at depth sample `n`.
    pub fn per_depth(
        angles: &[Vec<f64>],
        m: usize,
        spacing_ratio: f64,
        decimation: &Decimation,
        cfg: &SolveConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let ops = angles
            .par_iter()
            .map(|a| Self::operator(a, m, spacing_ratio, decimation, cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ops,
            per_depth: true,
            decimation: decimation.clone(),
            cfg: *cfg,
        })
    }

    fn operator(angles: &[f64], m: usize, spacing_ratio: f64, decimation: &Decimation, cfg: &SolveConfig) -> Result<DepthOperator> {
        if cfg.prior == Prior::LaplacianL1 && !(cfg.reg_lambda > 0.0) {
            return Err(Error::InvalidParameter("basis pursuit needs reg_lambda > 0".into()));
        }
        let a = steering_matrix_spaced(angles, m, spacing_ratio);
        let model = build_forward_model(a.view(), decimation)?;
        let g = centered_operator(&model, angles, spacing_ratio, m)? / m as f64;
        DepthOperator::new(g, cfg)
    }

    pub fn config(&self) -> &SolveConfig {
        &self.cfg
    }

    pub fn decimation(&self) -> &Decimation {
        &self.decimation
    }

    fn op(&self, n: usize) -> &DepthOperator {
        if self.per_depth {
            &self.ops[n]
        } else {
            &self.ops[0]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InverseOutcome {
    pub image: RfImage,
    /// Depth samples where the l1 solver hit its iteration cap.
    pub nonconverged_depths: Vec<usize>,
}

/// Invert a full `K x N` DAS image. Only the rows kept by the decimation are
/// read.
pub fn inverse_beamform(das: &RfImage, model: &InverseModel) -> Result<InverseOutcome> {
    let d = &model.decimation;
    if das.num_lines() != d.full_len() {
        return Err(Error::DimensionMismatch(format!(
            "DAS image has {} lines, model expects {}",
            das.num_lines(),
            d.full_len()
        )));
    }
    let sel = d.selected();
    let z = das.data.select(ndarray::Axis(0), &sel);
    inverse_from_observations(z.view(), das.grid.clone(), model)
}

/// Invert an already decimated `P x N` DAS image whose row `i` is scanline
/// `(K/P) i`; `grid` describes the full `K`-line output.
pub fn inverse_beamform_decimated(z_img: &RfImage, grid: ImageGrid, model: &InverseModel) -> Result<InverseOutcome> {
    if z_img.num_lines() != model.decimation.kept_len() {
        return Err(Error::DimensionMismatch(format!(
            "decimated image has {} lines, model keeps {}",
            z_img.num_lines(),
            model.decimation.kept_len()
        )));
    }
    inverse_from_observations(z_img.data.view(), grid, model)
}

/// Observations are divided by their largest modulus before solving and the
/// solutions multiplied back, so `reg_lambda` acts on a fixed data scale.
fn inverse_from_observations(z: ArrayView2<'_, Complex64>, grid: ImageGrid, model: &InverseModel) -> Result<InverseOutcome> {
    let d = &model.decimation;
    let (p, n_depth) = z.dim();
    if model.per_depth && model.ops.len() != n_depth {
        return Err(Error::DimensionMismatch(format!(
            "model prepared for {} depths, image has {}",
            model.ops.len(),
            n_depth
        )));
    }
    if grid.num_lines() != d.full_len() {
        return Err(Error::DimensionMismatch(format!(
            "output grid has {} lines, model solves for {}",
            grid.num_lines(),
            d.full_len()
        )));
    }
    let k = d.full_len();
    let scale = z.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let cfg = model.cfg;

    let columns: Vec<(Vec<Complex64>, bool)> = (0..n_depth)
        .into_par_iter()
        .map(|n| {
            if scale == 0.0 {
                return (vec![ZERO; k], true);
            }
            let zn: Vec<Complex64> = (0..p).map(|i| z[[i, n]] / scale).collect();
            let (x, ok) = model.op(n).solve(&zn, &cfg);
            (x.into_iter().map(|v| v * scale).collect(), ok)
        })
        .collect();

    let mut data = Array2::<Complex64>::zeros((k, n_depth));
    let mut nonconverged = Vec::new();
    for (n, (x, ok)) in columns.into_iter().enumerate() {
        for (j, v) in x.into_iter().enumerate() {
            data[[j, n]] = v;
        }
        if !ok {
            nonconverged.push(n);
        }
    }
    if !nonconverged.is_empty() {
        log::warn!(
            "l1 solver reached max_iters={} at {} of {} depths",
            cfg.max_iters,
            nonconverged.len(),
            n_depth
        );
    }
    let method = match cfg.prior {
        Prior::LaplacianL1 => "bp",
        Prior::GaussianL2 => "ls",
    };
    let mut provenance = Provenance::new(method, d.kept_len())
        .with("reg_lambda", cfg.reg_lambda)
        .with("prior", cfg.prior)
        .with("decimation_factor", d.factor());
    if cfg.prior == Prior::LaplacianL1 {
        provenance = provenance.with("max_iters", cfg.max_iters).with("tol", cfg.tol);
    }
    Ok(InverseOutcome {
        image: RfImage {
            data,
            kind: ImageKind::Rf,
            provenance,
            grid,
        },
        nonconverged_depths: nonconverged,
    })
}
