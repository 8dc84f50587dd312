//! Deterministic solvers for the four limit equations on the periodic unit
//! interval:
//!
//! * plain heat equation           `∂_t ρ   = ½Δρ`
//! * linear colored equation       `∂_t ρ_c = ½∇·[(λ∇ρ_c + ρ_c∇ρ)/(λ+ρ)]`
//!   against a prescribed total-density background ρ(t,x),
//! * quasi-linear colored system   `∂_t ρ̃  = ½∇·[D(ρ̃)∇ρ̃]`,
//! * driven colored system         `∂_t ρ̃  = ½∇·[D(ρ̃)∇ρ̃] − ∇·[A(ρ̃)·w]`
//!   with the effective drift `w_c = b_c + (1/λ)·Σ_k γ_{ck} ρ_k`.
//!
//! All solvers share one conservative finite-volume discretization: uniform
//! cell-centered grid, face densities by arithmetic means of the two adjacent
//! cells, fluxes accumulated face-by-face so per-color mass is conserved to
//! rounding and the colored fluxes sum to the scalar heat flux identically
//! (discrete closure). The explicit scheme is forward Euler under a CFL
//! bound; the semi-implicit option treats the `λ/(λ+ρ)` diffusion backward
//! in time with coefficients lagged to the previous step (useful when λ is
//! small), keeping the cross term explicit.
//!
//! The skew orientation of the swap bias Γ is fixed so that the optimizer
//! construction in the rate module satisfies `w_c = ∇U_c` exactly; with this
//! convention Σ_c of the driven equations reduces to
//! `∂_t ρ = ½Δρ − ∇·(Σ_c b_c ρ_c)` — the Γ contribution cancels in the total
//! by skew-symmetry.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ColorField, FieldTrajectory};
use crate::model::ModelParams;

/// Time discretization of the parabolic solvers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    /// Forward Euler; requires `dt ≤ dx²` (diffusion coefficient ≤ ½).
    Explicit,
    /// Backward Euler on the `λ/(λ+ρ)` diffusion with lagged coefficients;
    /// cross terms stay explicit.
    SemiImplicit,
}

/// Configuration shared by all solvers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PdeConfig {
    /// Number of grid cells K.
    pub grid: usize,
    /// Time-step upper bound; `None` chooses `0.9·dx²` (explicit CFL with
    /// safety factor). The effective step divides the frame interval evenly
    /// and never exceeds this bound.
    pub dt: Option<f64>,
    /// Horizon T ≥ 0.
    pub t_end: f64,
    /// Number of recorded frames including t=0 (≥ 2 when T > 0).
    pub frames: usize,
    pub scheme: Scheme,
    pub params: ModelParams,
}

impl PdeConfig {
    /// Explicit-scheme stability bound `dx²` (max diffusion coefficient ½).
    pub fn cfl_limit(&self) -> f64 {
        let dx = 1.0 / self.grid as f64;
        dx * dx
    }

    /// # Errors
    /// `Config` for structural problems, `Cfl` when an explicit step exceeds
    /// its stability bound.
    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 {
            return Err(Error::Config("grid needs at least 2 cells".into()));
        }
        if !self.t_end.is_finite() || self.t_end < 0.0 {
            return Err(Error::Config(format!("bad horizon {}", self.t_end)));
        }
        if self.t_end > 0.0 && self.frames < 2 {
            return Err(Error::Config("need at least 2 frames for T > 0".into()));
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0) || !dt.is_finite() {
                return Err(Error::Config(format!("bad dt {dt}")));
            }
            if self.scheme == Scheme::Explicit && dt > self.cfl_limit() {
                return Err(Error::Cfl {
                    dt,
                    limit: self.cfl_limit(),
                    k: self.grid,
                });
            }
        }
        Ok(())
    }

    fn dt_target(&self) -> f64 {
        self.dt.unwrap_or(0.9 * self.cfl_limit())
    }
}

/// Uniform stepping plan: `dt` divides the interval between recorded frames
/// exactly, and is the largest such value not exceeding the requested bound.
#[derive(Debug, Clone, Copy)]
pub(crate) struct StepPlan {
    pub dt: f64,
    pub steps_per_frame: usize,
    pub frames: usize,
    pub frame_dt: f64,
}

pub(crate) fn plan_steps(t_end: f64, frames: usize, dt_bound: f64) -> Result<StepPlan> {
    if t_end == 0.0 {
        return Ok(StepPlan {
            dt: dt_bound,
            steps_per_frame: 0,
            frames: 1,
            frame_dt: 0.0,
        });
    }
    if frames < 2 {
        return Err(Error::Config("need at least 2 frames for T > 0".into()));
    }
    let frame_dt = t_end / (frames - 1) as f64;
    let steps_per_frame = (frame_dt / dt_bound).ceil().max(1.0) as usize;
    Ok(StepPlan {
        dt: frame_dt / steps_per_frame as f64,
        steps_per_frame,
        frames,
        frame_dt,
    })
}

/// Per-color drift `b̃` and skew-symmetric swap bias `Γ̃`, both smooth
/// functions of (t, x) that vanish for `t ≤ η`.
#[derive(Clone)]
pub struct Perturbation {
    m: usize,
    eta: f64,
    b: Vec<Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>>,
    /// Entries (c1, c2) with c1 < c2 in lexicographic order.
    gamma_upper: Vec<Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>>,
    active: bool,
}

impl std::fmt::Debug for Perturbation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Perturbation")
            .field("m", &self.m)
            .field("eta", &self.eta)
            .field("active", &self.active)
            .finish()
    }
}

impl Perturbation {
    /// The zero perturbation (drives nothing; solvers skip its evaluation,
    /// so the driven solver reproduces the undriven one bitwise).
    pub fn none(m: usize) -> Self {
        Perturbation {
            m,
            eta: f64::INFINITY,
            b: Vec::new(),
            gamma_upper: Vec::new(),
            active: false,
        }
    }

    /// Builds a perturbation from per-color drifts and the strict upper
    /// triangle of Γ (row-major: (0,1), (0,2), …, (1,2), …). The lower
    /// triangle is derived by skew-symmetry, the diagonal is zero.
    pub fn new(
        b: Vec<Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>>,
        gamma_upper: Vec<Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>>,
        eta: f64,
    ) -> Result<Self> {
        let m = b.len();
        if m == 0 {
            return Err(Error::Config("perturbation needs at least one color".into()));
        }
        if gamma_upper.len() != m * (m - 1) / 2 {
            return Err(Error::Config(format!(
                "expected {} strict-upper-triangle entries of Gamma, got {}",
                m * (m - 1) / 2,
                gamma_upper.len()
            )));
        }
        if !(eta >= 0.0) {
            return Err(Error::Config(format!("bad activation time {eta}")));
        }
        Ok(Perturbation {
            m,
            eta,
            b,
            gamma_upper,
            active: true,
        })
    }

    /// Validates a full m×m matrix of closures for skew-symmetry by pointwise
    /// sampling, then stores its upper triangle. Non-skew input is a domain
    /// error.
    pub fn from_matrix(
        b: Vec<Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>>,
        gamma: Vec<Vec<Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>>>,
        eta: f64,
        t_probe: f64,
    ) -> Result<Self> {
        let m = b.len();
        if gamma.len() != m || gamma.iter().any(|row| row.len() != m) {
            return Err(Error::Config("Gamma must be m×m".into()));
        }
        // Pointwise skew check on a deterministic probe set.
        for probe in 0..32 {
            let t = t_probe * (probe % 8) as f64 / 7.0;
            let x = (probe as f64 + 0.5) / 32.0;
            for i in 0..m {
                let dii = gamma[i][i](t, x);
                if dii != 0.0 {
                    return Err(Error::Domain(format!(
                        "Gamma[{i}][{i}]({t},{x}) = {dii}, diagonal must vanish"
                    )));
                }
                for j in (i + 1)..m {
                    let gij = gamma[i][j](t, x);
                    let gji = gamma[j][i](t, x);
                    if (gij + gji).abs() > 1e-12 * (1.0 + gij.abs().max(gji.abs())) {
                        return Err(Error::Domain(format!(
                            "Gamma not skew-symmetric at (t={t}, x={x}): [{i}][{j}]={gij}, [{j}][{i}]={gji}"
                        )));
                    }
                }
            }
        }
        let mut upper = Vec::with_capacity(m * (m - 1) / 2);
        for i in 0..m {
            for j in (i + 1)..m {
                upper.push(gamma[i][j].clone());
            }
        }
        Perturbation::new(b, upper, eta)
    }

    pub fn colors(&self) -> usize {
        self.m
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn is_zero(&self) -> bool {
        !self.active
    }

    /// Whether the drive contributes at time `t` (it vanishes on [0, η]).
    #[inline]
    pub fn is_active(&self, t: f64) -> bool {
        self.active && t > self.eta
    }

    /// Drift component b_c(t, x).
    pub fn drift(&self, c: usize, t: f64, x: f64) -> f64 {
        if !self.is_active(t) {
            return 0.0;
        }
        self.drift_ungated(c, t, x)
    }

    /// Drift b_c(t, x) without the time gate — the right-continuous extension
    /// for quadratures that clip their time domain to [η, T] explicitly.
    pub fn drift_ungated(&self, c: usize, t: f64, x: f64) -> f64 {
        if !self.active {
            return 0.0;
        }
        (self.b[c])(t, x)
    }

    /// Swap-bias entry γ_{c1,c2}(t, x), with the sign convention fixed by the
    /// stored upper triangle.
    pub fn gamma(&self, c1: usize, c2: usize, t: f64, x: f64) -> f64 {
        if !self.is_active(t) {
            return 0.0;
        }
        self.gamma_ungated(c1, c2, t, x)
    }

    /// γ_{c1,c2}(t, x) without the time gate (see [`Self::drift_ungated`]).
    pub fn gamma_ungated(&self, c1: usize, c2: usize, t: f64, x: f64) -> f64 {
        if c1 == c2 || !self.active {
            return 0.0;
        }
        let (i, j, sign) = if c1 < c2 { (c1, c2, 1.0) } else { (c2, c1, -1.0) };
        // Index of (i, j) in the row-major strict upper triangle.
        let idx = i * self.m - i * (i + 1) / 2 + (j - i - 1);
        sign * (self.gamma_upper[idx])(t, x)
    }

    /// Effective drift `w_c = b_c + (1/λ)Σ_k γ_{ck} ρ_k` at one point, given
    /// the local color densities.
    pub fn effective_drift(&self, c: usize, t: f64, x: f64, rho: &[f64], lambda: f64) -> f64 {
        if !self.is_active(t) {
            return 0.0;
        }
        let mut w = (self.b[c])(t, x);
        for (k, &rk) in rho.iter().enumerate() {
            if k != c {
                w += self.gamma(c, k, t, x) * rk / lambda;
            }
        }
        w
    }
}

/// Half the divergence of the colored diffusive flux, `½∇·[D(ρ̃)∇ρ̃]`,
/// evaluated with the solvers' face scheme. `total` supplies the total
/// density entering D (the solvers pass either the summed state or a
/// prescribed background sampled on the same grid). Shared with the rate
/// module so the rate's residual measures against the exact discrete
/// operator the solvers integrate.
pub(crate) fn colored_diffusion_divergence(
    values: &[Vec<f64>],
    total: &[f64],
    lambda: f64,
    dx: f64,
    out: &mut [Vec<f64>],
) {
    let m = values.len();
    let k = total.len();
    let inv_dx = 1.0 / dx;
    for row in out.iter_mut() {
        row.iter_mut().for_each(|v| *v = 0.0);
    }
    for f in 0..k {
        let l = f;
        let r = if f + 1 == k { 0 } else { f + 1 };
        let tot_face = 0.5 * (total[l] + total[r]);
        let grad_tot = (total[r] - total[l]) * inv_dx;
        let denom = lambda + tot_face;
        for c in 0..m {
            let grad_c = (values[c][r] - values[c][l]) * inv_dx;
            let face_c = 0.5 * (values[c][l] + values[c][r]);
            // Diffusive flux −½(λ∇ρ_c + ρ_c∇ρ)/(λ+ρ); out accumulates −∇·F.
            let flux = -0.5 * (lambda * grad_c + face_c * grad_tot) / denom;
            out[c][l] -= flux * inv_dx;
            out[c][r] += flux * inv_dx;
        }
    }
}

/// Divergence of the advective drive flux `[A(ρ̃)·w]_c`, accumulated into
/// `out` with the −∇· sign (so `out` collects the full right-hand side).
fn drive_divergence(
    values: &[Vec<f64>],
    total: &[f64],
    pert: &Perturbation,
    t: f64,
    lambda: f64,
    dx: f64,
    rho_face: &mut [f64],
    out: &mut [Vec<f64>],
) {
    let m = values.len();
    let k = total.len();
    let inv_dx = 1.0 / dx;
    for f in 0..k {
        let l = f;
        let r = if f + 1 == k { 0 } else { f + 1 };
        let x_face = ((f + 1) % k) as f64 * dx;
        let tot_face = 0.5 * (total[l] + total[r]);
        let denom = lambda + tot_face;
        for (c, rf) in rho_face.iter_mut().enumerate() {
            *rf = 0.5 * (values[c][l] + values[c][r]);
        }
        // w_c at the face, then [A·w]_c = ρ_c(λw_c + Σ_k ρ_k w_k)/(λ+ρ).
        let mut rho_dot_w = 0.0;
        let mut w = [0.0f64; 8];
        debug_assert!(m <= 8);
        for c in 0..m {
            let wc = pert.effective_drift(c, t, x_face, &rho_face[..m], lambda);
            w[c] = wc;
            rho_dot_w += rho_face[c] * wc;
        }
        for c in 0..m {
            let flux = rho_face[c] * (lambda * w[c] + rho_dot_w) / denom;
            out[c][l] -= flux * inv_dx;
            out[c][r] += flux * inv_dx;
        }
    }
}

/// Cyclic tridiagonal solve (Thomas + Sherman–Morrison correction for the
/// periodic wrap). `sub[i]`, `diag[i]`, `sup[i]` are the coefficients of
/// `x[i−1]`, `x[i]`, `x[i+1]` in row i (indices mod n).
fn solve_cyclic_tridiag(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    assert!(n >= 3, "cyclic tridiagonal systems need n ≥ 3");
    let gamma = -diag[0];
    // Modified diagonal removes the wrap entries via a rank-one update.
    let mut dmod = diag.to_vec();
    dmod[0] -= gamma;
    dmod[n - 1] -= sub[0] * sup[n - 1] / gamma;

    let thomas = |d: &[f64], b: &[f64]| -> Vec<f64> {
        let mut c = vec![0.0; n];
        let mut x = vec![0.0; n];
        c[0] = sup[0] / d[0];
        x[0] = b[0] / d[0];
        for i in 1..n {
            let denom = d[i] - sub[i] * c[i - 1];
            if i + 1 < n {
                c[i] = sup[i] / denom;
            }
            x[i] = (b[i] - sub[i] * x[i - 1]) / denom;
        }
        for i in (0..n - 1).rev() {
            x[i] -= c[i] * x[i + 1];
        }
        x
    };

    let y = thomas(&dmod, rhs);
    let mut u = vec![0.0; n];
    u[0] = gamma;
    u[n - 1] = sup[n - 1];
    let z = thomas(&dmod, &u);
    let factor = (y[0] + sub[0] * y[n - 1] / gamma) / (1.0 + z[0] + sub[0] * z[n - 1] / gamma);
    (0..n).map(|i| y[i] - factor * z[i]).collect()
}

/// Negativity policy: abort when any cell dips below −1e-12 or the total
/// clipped mass exceeds 1e-10; otherwise clip to zero and restore the color
/// mass by rescaling.
const NEG_ABORT_VALUE: f64 = -1e-12;
const NEG_ABORT_TOTAL: f64 = 1e-10;

fn enforce_nonnegative(values: &mut [Vec<f64>], dx: f64, t: f64) -> Result<()> {
    for (c, row) in values.iter_mut().enumerate() {
        let mut clipped = 0.0;
        let mut min = 0.0f64;
        for v in row.iter() {
            if *v < 0.0 {
                clipped -= *v * dx;
                min = min.min(*v);
            }
        }
        if clipped == 0.0 {
            continue;
        }
        if min < NEG_ABORT_VALUE || clipped > NEG_ABORT_TOTAL {
            return Err(Error::Numerics(format!(
                "color {c} went negative at t={t:.6e}: min {min:.3e}, clipped mass {clipped:.3e}"
            )));
        }
        let mass_before: f64 = row.iter().sum::<f64>() * dx;
        for v in row.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let mass_after: f64 = row.iter().sum::<f64>() * dx;
        if mass_after > 0.0 {
            let scale = mass_before / mass_after;
            row.iter_mut().for_each(|v| *v *= scale);
        }
    }
    Ok(())
}

/// Where the total density entering the mobility factors comes from.
enum TotalSource<'a> {
    /// Σ_c of the evolving colors (quasi-linear system).
    SelfSum,
    /// A prescribed scalar background trajectory (linear colored equation).
    Background(&'a FieldTrajectory),
}

/// One shared explicit/semi-implicit time loop for every colored solver.
fn run_colored(
    initial: &ColorField,
    config: &PdeConfig,
    source: TotalSource<'_>,
    pert: &Perturbation,
) -> Result<FieldTrajectory> {
    config.validate()?;
    let grid = initial.grid();
    if grid.cells() != config.grid {
        return Err(Error::Config(format!(
            "initial field has {} cells, config wants {}",
            grid.cells(),
            config.grid
        )));
    }
    let m = initial.colors();
    if m != config.params.colors() {
        return Err(Error::Config(format!(
            "initial field has {m} colors, params have {}",
            config.params.colors()
        )));
    }
    initial.check_nonnegative(0.0)?;
    if pert.active && pert.colors() != m {
        return Err(Error::Config(format!(
            "perturbation has {} colors, field has {m}",
            pert.colors()
        )));
    }
    if let TotalSource::Background(bg) = &source {
        if bg.colors() != 1 {
            return Err(Error::Config("background must be a scalar trajectory".into()));
        }
        if bg.grid().cells() != grid.cells() {
            return Err(Error::Config("background grid mismatch".into()));
        }
        if bg.horizon() + 1e-12 < config.t_end {
            return Err(Error::Config(format!(
                "background horizon {} shorter than t_end {}",
                bg.horizon(),
                config.t_end
            )));
        }
        // Consistency of the initial split with the background's start.
        let total0 = initial.total();
        let bg0 = bg.frame(0).values(0);
        let worst = total0
            .iter()
            .zip(bg0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        if worst > 1e-8 {
            return Err(Error::Domain(format!(
                "sum of initial colors differs from background(0) by {worst:.3e} (L∞)"
            )));
        }
    }

    let plan = plan_steps(config.t_end, config.frames.max(1), config.dt_target())?;
    let k = grid.cells();
    let dx = grid.dx();
    let lambda = config.params.lambda();

    let mut values: Vec<Vec<f64>> = (0..m).map(|c| initial.values(c).to_vec()).collect();
    let mut rhs = vec![vec![0.0; k]; m];
    let mut total = vec![0.0; k];
    let mut rho_face = vec![0.0; m];
    let mut frames = Vec::with_capacity(plan.frames);
    let mut times = Vec::with_capacity(plan.frames);
    frames.push(ColorField::from_values(grid, values.clone())?);
    times.push(0.0);

    // Scratch for the semi-implicit tridiagonal factorization.
    let (mut a_face, mut sub, mut diag, mut sup) = if config.scheme == Scheme::SemiImplicit {
        (vec![0.0; k], vec![0.0; k], vec![0.0; k], vec![0.0; k])
    } else {
        (Vec::new(), Vec::new(), Vec::new(), Vec::new())
    };

    for frame_idx in 1..plan.frames {
        let frame_start = (frame_idx - 1) as f64 * plan.frame_dt;
        for s in 0..plan.steps_per_frame {
            let t = frame_start + s as f64 * plan.dt;
            // Total density entering the mobility factors at this step.
            match &source {
                TotalSource::SelfSum => {
                    total.iter_mut().for_each(|v| *v = 0.0);
                    for row in &values {
                        for (tv, v) in total.iter_mut().zip(row) {
                            *tv += *v;
                        }
                    }
                }
                TotalSource::Background(bg) => bg.interp_cells(0, t, &mut total),
            }

            // The drive acts over the window (t, t+dt]; judge activation and
            // evaluate the time argument at the midpoint so a drive switching
            // on at η = t₀ is not silently dropped from the straddling step.
            let t_mid = t + 0.5 * plan.dt;
            match config.scheme {
                Scheme::Explicit => {
                    colored_diffusion_divergence(&values, &total, lambda, dx, &mut rhs);
                    if pert.is_active(t_mid) {
                        drive_divergence(
                            &values, &total, pert, t_mid, lambda, dx, &mut rho_face, &mut rhs,
                        );
                    }
                    for c in 0..m {
                        for (v, r) in values[c].iter_mut().zip(&rhs[c]) {
                            *v += plan.dt * r;
                        }
                    }
                }
                Scheme::SemiImplicit => {
                    // Explicit part: cross-diffusion flux −½ρ_c∇ρ/(λ+ρ) and
                    // the drive; the λ-diffusion goes implicit with the face
                    // coefficient a = ½λ/(λ+ρ) frozen at this step's total.
                    for row in rhs.iter_mut() {
                        row.iter_mut().for_each(|v| *v = 0.0);
                    }
                    let inv_dx = 1.0 / dx;
                    for f in 0..k {
                        let l = f;
                        let r = if f + 1 == k { 0 } else { f + 1 };
                        let tot_face = 0.5 * (total[l] + total[r]);
                        let grad_tot = (total[r] - total[l]) * inv_dx;
                        let denom = lambda + tot_face;
                        a_face[f] = 0.5 * lambda / denom;
                        for c in 0..m {
                            let face_c = 0.5 * (values[c][l] + values[c][r]);
                            let flux = -0.5 * face_c * grad_tot / denom;
                            rhs[c][l] -= flux * inv_dx;
                            rhs[c][r] += flux * inv_dx;
                        }
                    }
                    if pert.is_active(t_mid) {
                        drive_divergence(
                            &values, &total, pert, t_mid, lambda, dx, &mut rho_face, &mut rhs,
                        );
                    }
                    // (I − dt·∇·a∇) ρ^{n+1} = ρ^n + dt·explicit, per color;
                    // the matrix is color-independent, factor once per step.
                    let r_coef = plan.dt / (dx * dx);
                    for i in 0..k {
                        let prev = if i == 0 { k - 1 } else { i - 1 };
                        sub[i] = -r_coef * a_face[prev];
                        sup[i] = -r_coef * a_face[i];
                        diag[i] = 1.0 + r_coef * (a_face[i] + a_face[prev]);
                    }
                    for c in 0..m {
                        let b: Vec<f64> = values[c]
                            .iter()
                            .zip(&rhs[c])
                            .map(|(v, r)| v + plan.dt * r)
                            .collect();
                        values[c] = solve_cyclic_tridiag(&sub, &diag, &sup, &b);
                    }
                }
            }
            enforce_nonnegative(&mut values, dx, t + plan.dt)?;
        }
        frames.push(ColorField::from_values(grid, values.clone())?);
        times.push(frame_idx as f64 * plan.frame_dt);
    }
    FieldTrajectory::new(times, frames)
}

/// Heat equation `∂_t ρ = ½Δρ` for a scalar density of unit mass.
pub fn solve_heat(initial: &ColorField, config: &PdeConfig) -> Result<FieldTrajectory> {
    config.validate()?;
    if initial.colors() != 1 {
        return Err(Error::Config("solve_heat expects a single-color field".into()));
    }
    let grid = initial.grid();
    if grid.cells() != config.grid {
        return Err(Error::Config(format!(
            "initial field has {} cells, config wants {}",
            grid.cells(),
            config.grid
        )));
    }
    initial.check_nonnegative(0.0)?;
    let mass = initial.mass(0);
    if (mass - 1.0).abs() > 1e-8 {
        return Err(Error::Mass {
            found: mass,
            expected: 1.0,
            tol: 1e-8,
        });
    }

    let plan = plan_steps(config.t_end, config.frames.max(1), config.dt_target())?;
    let k = grid.cells();
    let dx = grid.dx();
    let inv_dx = 1.0 / dx;
    let mut rho = initial.values(0).to_vec();
    let mut rhs = vec![0.0; k];
    let mut frames = Vec::with_capacity(plan.frames);
    let mut times = Vec::with_capacity(plan.frames);
    frames.push(ColorField::from_values(grid, vec![rho.clone()])?);
    times.push(0.0);

    for frame_idx in 1..plan.frames {
        for _ in 0..plan.steps_per_frame {
            match config.scheme {
                Scheme::Explicit => {
                    rhs.iter_mut().for_each(|v| *v = 0.0);
                    for f in 0..k {
                        let l = f;
                        let r = if f + 1 == k { 0 } else { f + 1 };
                        // Heat flux −½∇ρ in the same face form as the
                        // colored solvers.
                        let flux = -0.5 * (rho[r] - rho[l]) * inv_dx;
                        rhs[l] -= flux * inv_dx;
                        rhs[r] += flux * inv_dx;
                    }
                    for (v, r) in rho.iter_mut().zip(&rhs) {
                        *v += plan.dt * r;
                    }
                }
                Scheme::SemiImplicit => {
                    let r_coef = 0.5 * plan.dt / (dx * dx);
                    let sub = vec![-r_coef; k];
                    let sup = vec![-r_coef; k];
                    let diag = vec![1.0 + 2.0 * r_coef; k];
                    rho = solve_cyclic_tridiag(&sub, &diag, &sup, &rho);
                }
            }
            let mut wrapped = [std::mem::take(&mut rho)];
            enforce_nonnegative(&mut wrapped, dx, 0.0)?;
            rho = std::mem::replace(&mut wrapped[0], Vec::new());
        }
        frames.push(ColorField::from_values(grid, vec![rho.clone()])?);
        times.push(frame_idx as f64 * plan.frame_dt);
    }
    FieldTrajectory::new(times, frames)
}

/// Linear colored equation against a prescribed total-density background.
pub fn solve_colored_linear(
    initial: &ColorField,
    background: &FieldTrajectory,
    config: &PdeConfig,
) -> Result<FieldTrajectory> {
    run_colored(
        initial,
        config,
        TotalSource::Background(background),
        &Perturbation::none(initial.colors()),
    )
}

/// Quasi-linear colored system `∂_t ρ̃ = ½∇·[D(ρ̃)∇ρ̃]`.
pub fn solve_colored_system(initial: &ColorField, config: &PdeConfig) -> Result<FieldTrajectory> {
    solve_perturbed_system(initial, &Perturbation::none(initial.colors()), config)
}

/// Driven colored system; the zero perturbation takes the identical code
/// path as [`solve_colored_system`], reproducing it bitwise.
pub fn solve_perturbed_system(
    initial: &ColorField,
    pert: &Perturbation,
    config: &PdeConfig,
) -> Result<FieldTrajectory> {
    let total_mass = initial.total_mass();
    if (total_mass - 1.0).abs() > 1e-8 {
        return Err(Error::Mass {
            found: total_mass,
            expected: 1.0,
            tol: 1e-8,
        });
    }
    run_colored(initial, config, TotalSource::SelfSum, pert)
}
