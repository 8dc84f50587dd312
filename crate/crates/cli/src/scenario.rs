//! Declarative scenario files.
//!
//! A scenario is one experiment in a versioned TOML schema: model parameters,
//! analytic initial data, an optional particle run, an optional field solve,
//! an optional gradient drive, and a list of pass/fail comparisons carrying
//! their own tolerances (no tolerance is ever hard-coded in the runner).
//!
//! [`Scenario::resolve`] validates every cross-field constraint and fills all
//! defaults, producing a [`Plan`] of ready-to-run core configurations plus a
//! canonicalized scenario. The canonical scenario re-serializes to the exact
//! TOML written as `scenario.resolved.toml`; its bytes are the scenario
//! fingerprint, and re-running that file reproduces every output bitwise.

use std::f64::consts::TAU;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use swapdiff_core::grid::{ColorField, Grid};
use swapdiff_core::pde::{PdeConfig, Scheme};
use swapdiff_core::rate::GradientControl;
use swapdiff_core::sim::{
    InitialLaw, LocalTimeEstimator, RecordOptions, SimConfig,
};
use swapdiff_core::{Error, ModelParams, Result};

/// Version tag every scenario file must carry.
pub const SCHEMA_VERSION: u32 = 1;

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

// ---------------------------------------------------------------------------
// Schema
// ---------------------------------------------------------------------------

/// Top-level scenario document. Field order matters for TOML serialization:
/// scalars first, then tables, then the comparison array.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    /// Output subdirectory name; restricted to `[A-Za-z0-9._-]`.
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    /// Root seed; replicas derive their own seeds from it.
    #[serde(default)]
    pub seed: u64,
    /// Number of particle-run replicas (0 = no particle runs).
    #[serde(default)]
    pub replicas: usize,
    /// Optional output root override baked into the scenario itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub params: ParamsSpec,
    pub initial: InitialSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pde: Option<PdeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<PerturbationSpec>,
    #[serde(default, rename = "comparison", skip_serializing_if = "Vec::is_empty")]
    pub comparisons: Vec<ComparisonSpec>,
}

/// `[params]`: swap intensity λ and the per-color mass fractions (sum 1).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSpec {
    pub lambda: f64,
    pub masses: Vec<f64>,
}

/// `[initial]`: analytic initial color densities, shared by the particle run
/// and the field solve so both discretize the same continuum datum.
///
/// Kinds:
/// * `uniform` — `ρ_c ≡ masses[c]`.
/// * `cosine-mix` (two colors) — total `1 + a·cos(2πkx)` split by the smooth
///   fraction `½ + b·sin(2πkx)`; requires masses `[0.5, 0.5]`.
/// * `step-coloring` — total `1 + a·cos(2πkx)`; color `c` keeps the total on
///   the arc `[c/m, (c+1)/m)` and is zero elsewhere.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_amplitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fraction_amplitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<usize>,
}

/// `[sim]`: particle-run shape. The time step is `dt_factor / n²`, so the
/// accuracy guard `0.1/n²` corresponds to `dt_factor = 0.1` at every size.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    pub n: usize,
    pub dt_factor: f64,
    pub t_end: f64,
    /// Recorded frames, endpoints included.
    pub frames: usize,
    /// Pair collision-time estimator: `bridge` (default) or `band`.
    #[serde(default = "default_estimator")]
    pub estimator: String,
    /// Band half-width; required by (and only by) the band estimator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band_eps: Option<f64>,
    /// Cells of the recorded empirical-field grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field_grid: Option<usize>,
    /// Box-kernel width of the recorded fields (must be ≥ one PDE cell when
    /// the fields are compared against a solve).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field_window: Option<f64>,
    /// Exact per-color particle counts; derived from the masses when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color_counts: Option<Vec<usize>>,
    /// Half-width for per-label window-density integrals.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density_window: Option<f64>,
    /// Label singled out by tagged-particle diagnostics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tagged: Option<usize>,
    /// Extra recordings: `positions`, `lifted`, `ledger-snapshots`,
    /// `swap-events`. Comparisons add what they need; the resolved list is
    /// sorted and deduplicated.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub track: Vec<String>,
}

/// `[pde]`: field-solve shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeSpec {
    pub grid: usize,
    pub t_end: f64,
    /// Recorded frames, endpoints included.
    pub frames: usize,
    /// `explicit` (default) or `semi-implicit`.
    #[serde(default = "default_scheme")]
    pub scheme: String,
    /// Time-step bound; the stability default is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
}

/// `[perturbation]`: a gradient drive `U_c(t,x) = a_c·e(t)·sin(2πkx)` with a
/// smooth activation `e` (quintic smoothstep over `[eta, eta+ramp]`, constant
/// 1 afterwards; `ramp = 0` switches on hard at `eta`). The drive enters the
/// solves through the cost-optimal control construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub kind: String,
    /// One amplitude applied to every color, or one per color.
    pub amplitudes: Vec<f64>,
    #[serde(default = "default_mode")]
    pub mode: usize,
    /// Activation time; the drive is supported on `(eta, T]`.
    #[serde(default)]
    pub eta: f64,
    /// Smooth ramp length after `eta`.
    #[serde(default)]
    pub ramp: f64,
}

/// `[[comparison]]`: one pass/fail check. The schema is flat; which fields a
/// kind requires (and which it forbids) is enforced at resolution, so a
/// misplaced tolerance is a config error rather than silently ignored.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonSpec {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l1_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linf_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skip_initial_frames: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub require_refinement_decrease: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rel_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_point_iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_low: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_high: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observer: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_from: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_to: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_residual: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
}

fn default_estimator() -> String {
    "bridge".into()
}

fn default_scheme() -> String {
    "explicit".into()
}

fn default_mode() -> usize {
    1
}

// ---------------------------------------------------------------------------
// Resolved plan
// ---------------------------------------------------------------------------

/// Typed, fully-validated comparison ready to execute.
#[derive(Debug, Clone)]
pub enum ComparisonPlan {
    /// Replica-averaged empirical fields against the quasi-linear solve:
    /// per-frame per-color L¹/L∞, pass on the declared tolerances over the
    /// frames after `skip_initial_frames`.
    SimVsPde {
        l1_tol: Option<f64>,
        linf_tol: Option<f64>,
        skip_initial_frames: usize,
    },
    /// Dynamic rate of the (undriven) solve stays at its discretization
    /// floor, optionally re-checked under one grid/time refinement.
    RateZero {
        rate_tol: f64,
        require_refinement_decrease: bool,
    },
    /// Dynamic rate of the driven solve against the quadratic cost of its
    /// cost-optimal controls.
    RateCostMatch { rel_tol: f64, fixed_point_iters: usize },
    /// Late-time growth rate of pooled lifted-displacement variance against
    /// the stationary prediction `λ/(λ+1)`.
    TaggedVariance { rel_tol: f64 },
    /// Window-density vs collision-ledger residual shrinks from `n_low` to
    /// `n_high` particles.
    ReplacementResidual {
        n_low: usize,
        n_high: usize,
        eps: f64,
        observer: usize,
        target: usize,
        t_from: f64,
        t_to: f64,
        max_residual: Option<f64>,
    },
    /// Fraction of labels oscillating by ≥ `eps` within a window ≤ `delta`.
    Tightness { eps: f64, delta: f64, tol: f64 },
    /// Color sum of the quasi-linear solve against an independent scalar
    /// heat solve of the same total.
    PdeClosure { linf_tol: f64 },
}

impl ComparisonPlan {
    pub fn kind(&self) -> &'static str {
        match self {
            ComparisonPlan::SimVsPde { .. } => "sim_vs_pde",
            ComparisonPlan::RateZero { .. } => "rate_zero",
            ComparisonPlan::RateCostMatch { .. } => "rate_cost_match",
            ComparisonPlan::TaggedVariance { .. } => "tagged_variance",
            ComparisonPlan::ReplacementResidual { .. } => "replacement_residual",
            ComparisonPlan::Tightness { .. } => "tightness",
            ComparisonPlan::PdeClosure { .. } => "pde_closure",
        }
    }

    fn needs_base_runs(&self) -> bool {
        matches!(
            self,
            ComparisonPlan::SimVsPde { .. }
                | ComparisonPlan::TaggedVariance { .. }
                | ComparisonPlan::Tightness { .. }
        )
    }
}

/// Everything the runner needs: canonical scenario plus core configurations.
#[derive(Debug, Clone)]
pub struct Plan {
    pub scenario: Scenario,
    pub params: ModelParams,
    /// Ready-to-run particle configuration (seeded with the scenario seed).
    pub sim: Option<SimConfig>,
    pub pde: Option<PdeConfig>,
    /// Initial data discretized on the solve grid.
    pub pde_initial: Option<ColorField>,
    pub comparisons: Vec<ComparisonPlan>,
}

impl Plan {
    /// Gradient controls of the `[perturbation]` section, rebuilt on demand
    /// (closures are not clonable state).
    pub fn gradient_controls(&self) -> Option<Vec<GradientControl>> {
        let pert = self.scenario.perturbation.as_ref()?;
        Some(build_controls(pert))
    }

    /// Whether any comparison consumes the shared replica runs.
    pub fn wants_base_runs(&self) -> bool {
        self.comparisons.iter().any(ComparisonPlan::needs_base_runs)
    }
}

// ---------------------------------------------------------------------------
// Parsing and canonical serialization
// ---------------------------------------------------------------------------

impl Scenario {
    /// Parse a scenario document. Malformed TOML and schema violations are
    /// configuration errors (caller mistakes), not internal failures.
    pub fn from_toml_str(text: &str) -> Result<Scenario> {
        let scenario: Scenario =
            toml::from_str(text).map_err(|e| config_err(format!("scenario file: {e}")))?;
        if scenario.schema_version != SCHEMA_VERSION {
            return Err(config_err(format!(
                "scenario schema version {} not supported (expected {SCHEMA_VERSION})",
                scenario.schema_version
            )));
        }
        Ok(scenario)
    }

    /// Canonical TOML of a resolved scenario; the fingerprint hashes these
    /// bytes. Serialization of a resolved scenario is deterministic, and
    /// resolving its output parses back to the identical document.
    pub fn canonical_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(format!("scenario encode: {e}")))
    }
}

// ---------------------------------------------------------------------------
// Resolution
// ---------------------------------------------------------------------------

const TRACK_KINDS: [&str; 4] = ["ledger-snapshots", "lifted", "positions", "swap-events"];

fn validate_name(name: &str) -> Result<()> {
    if name.is_empty() {
        return Err(config_err("scenario name must be nonempty"));
    }
    if !name
        .chars()
        .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
    {
        return Err(config_err(format!(
            "scenario name '{name}' may only use letters, digits, '.', '_', '-'"
        )));
    }
    Ok(())
}

fn validate_params(spec: &ParamsSpec) -> Result<ModelParams> {
    let sum: f64 = spec.masses.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(config_err(format!(
            "[params] masses must sum to 1, got {sum:.12}"
        )));
    }
    ModelParams::new(spec.lambda, spec.masses.clone())
}

/// Quintic smoothstep: 0 below 0, 1 above 1, C² monotone bridge between.
fn smoothstep5(u: f64) -> f64 {
    if u <= 0.0 {
        0.0
    } else if u >= 1.0 {
        1.0
    } else {
        u * u * u * (10.0 + u * (-15.0 + 6.0 * u))
    }
}

fn build_controls(pert: &PerturbationSpec) -> Vec<GradientControl> {
    let k = pert.mode as f64;
    let eta = pert.eta;
    let ramp = pert.ramp;
    pert.amplitudes
        .iter()
        .map(|&a| {
            let grad = move |t: f64, x: f64| {
                let e = if ramp > 0.0 {
                    smoothstep5((t - eta) / ramp)
                } else if t > eta {
                    1.0
                } else {
                    0.0
                };
                a * e * TAU * k * (TAU * k * x).cos()
            };
            GradientControl::new(Arc::new(grad), eta)
        })
        .collect()
}

struct InitialState<'a> {
    spec: &'a InitialSpec,
    masses: &'a [f64],
}

impl InitialSpec {
    fn resolve(&mut self, m: usize) -> Result<()> {
        let forbid = |field: &Option<f64>, name: &str, kind: &str| -> Result<()> {
            if field.is_some() {
                return Err(config_err(format!(
                    "[initial] kind '{kind}' does not take '{name}'"
                )));
            }
            Ok(())
        };
        match self.kind.as_str() {
            "uniform" => {
                forbid(&self.total_amplitude, "total_amplitude", "uniform")?;
                forbid(&self.fraction_amplitude, "fraction_amplitude", "uniform")?;
                if self.mode.is_some() {
                    return Err(config_err("[initial] kind 'uniform' does not take 'mode'"));
                }
            }
            "cosine-mix" => {
                if m != 2 {
                    return Err(config_err(format!(
                        "[initial] cosine-mix needs exactly 2 colors, got {m}"
                    )));
                }
                let ta = self
                    .total_amplitude
                    .ok_or_else(|| config_err("[initial] cosine-mix needs 'total_amplitude'"))?;
                let fa = self.fraction_amplitude.ok_or_else(|| {
                    config_err("[initial] cosine-mix needs 'fraction_amplitude'")
                })?;
                if !(ta.abs() < 1.0) {
                    return Err(config_err(format!(
                        "[initial] total_amplitude must satisfy |a| < 1 for positivity, got {ta}"
                    )));
                }
                if !(fa.abs() < 0.5) {
                    return Err(config_err(format!(
                        "[initial] fraction_amplitude must satisfy |b| < 0.5 for positivity, got {fa}"
                    )));
                }
                self.mode = Some(self.mode.unwrap_or(1));
            }
            "step-coloring" => {
                forbid(&self.fraction_amplitude, "fraction_amplitude", "step-coloring")?;
                let ta = self
                    .total_amplitude
                    .ok_or_else(|| config_err("[initial] step-coloring needs 'total_amplitude'"))?;
                if !(ta.abs() < 1.0) {
                    return Err(config_err(format!(
                        "[initial] total_amplitude must satisfy |a| < 1 for positivity, got {ta}"
                    )));
                }
                self.mode = Some(self.mode.unwrap_or(1));
            }
            other => {
                return Err(config_err(format!(
                    "[initial] unknown kind '{other}' (expected uniform, cosine-mix, or step-coloring)"
                )));
            }
        }
        if let Some(mode) = self.mode {
            if mode == 0 {
                return Err(config_err("[initial] mode must be ≥ 1"));
            }
        }
        Ok(())
    }

    /// Whether the total density is identically 1 (the stationary law).
    pub fn is_uniform(&self) -> bool {
        self.kind == "uniform"
    }
}

impl InitialState<'_> {
    /// Discretize on `grid` by cell-center evaluation (the step split zeroes
    /// whole cells so the color sum stays exactly the total), then check the
    /// per-color masses against the declared `[params] masses`.
    fn field(&self, grid: Grid) -> Result<ColorField> {
        let m = self.masses.len();
        let spec = self.spec;
        let field = match spec.kind.as_str() {
            "uniform" => {
                let masses = self.masses.to_vec();
                ColorField::from_fn(grid, m, move |c, _| masses[c])
            }
            "cosine-mix" => {
                let ta = spec.total_amplitude.expect("resolved");
                let fa = spec.fraction_amplitude.expect("resolved");
                let k = spec.mode.expect("resolved") as f64;
                ColorField::from_fn(grid, 2, move |c, x| {
                    let total = 1.0 + ta * (TAU * k * x).cos();
                    let frac = 0.5 + fa * (TAU * k * x).sin();
                    total * if c == 0 { frac } else { 1.0 - frac }
                })
            }
            "step-coloring" => {
                let ta = spec.total_amplitude.expect("resolved");
                let k = spec.mode.expect("resolved") as f64;
                let m_f = m as f64;
                ColorField::from_fn(grid, m, move |c, x| {
                    if (x * m_f).floor() as usize == c {
                        1.0 + ta * (TAU * k * x).cos()
                    } else {
                        0.0
                    }
                })
            }
            _ => unreachable!("kinds validated during resolution"),
        };
        for (c, &mass) in self.masses.iter().enumerate() {
            let got = field.mass(c);
            if (got - mass).abs() > 1e-8 {
                return Err(config_err(format!(
                    "[initial] color {c} carries mass {got:.10} on a {}-cell grid, but [params] \
                     declares {mass}; adjust masses or the initial data",
                    grid.cells()
                )));
            }
        }
        Ok(field)
    }
}

/// Deterministic largest-remainder apportionment of `n` particles to masses.
fn apportion_counts(masses: &[f64], n: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = masses.iter().map(|&r| (r * n as f64).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..masses.len()).collect();
    // Stable sort by descending fractional remainder, index as tiebreak.
    order.sort_by(|&a, &b| {
        let fa = masses[a] * n as f64 - (masses[a] * n as f64).floor();
        let fb = masses[b] * n as f64 - (masses[b] * n as f64).floor();
        fb.partial_cmp(&fa).expect("finite remainders").then(a.cmp(&b))
    });
    for i in 0..n.saturating_sub(assigned) {
        counts[order[i % order.len()]] += 1;
    }
    counts
}

impl SimSpec {
    fn resolve(&mut self, m: usize, masses: &[f64]) -> Result<()> {
        if self.n < 2 {
            return Err(config_err(format!("[sim] needs n ≥ 2, got {}", self.n)));
        }
        if !(self.dt_factor > 0.0) || !self.dt_factor.is_finite() {
            return Err(config_err(format!(
                "[sim] dt_factor must be positive, got {}",
                self.dt_factor
            )));
        }
        if !(self.t_end > 0.0) || !self.t_end.is_finite() {
            return Err(config_err(format!(
                "[sim] t_end must be positive, got {}",
                self.t_end
            )));
        }
        if self.frames < 2 {
            return Err(config_err(format!(
                "[sim] needs frames ≥ 2, got {}",
                self.frames
            )));
        }
        match self.estimator.as_str() {
            "bridge" => {
                if self.band_eps.is_some() {
                    return Err(config_err(
                        "[sim] band_eps only applies to the band estimator",
                    ));
                }
            }
            "band" => {
                let eps = self
                    .band_eps
                    .ok_or_else(|| config_err("[sim] band estimator needs band_eps"))?;
                if !(eps > 0.0 && eps < 0.5) {
                    return Err(config_err(format!(
                        "[sim] band_eps must lie in (0, 0.5), got {eps}"
                    )));
                }
            }
            other => {
                return Err(config_err(format!(
                    "[sim] unknown estimator '{other}' (expected bridge or band)"
                )));
            }
        }
        match (self.field_grid, self.field_window) {
            (None, None) => {}
            (Some(k), Some(w)) => {
                if k < 2 {
                    return Err(config_err("[sim] field_grid must be ≥ 2"));
                }
                if !(w > 0.0 && w < 1.0) {
                    return Err(config_err(format!(
                        "[sim] field_window must lie in (0, 1), got {w}"
                    )));
                }
            }
            _ => {
                return Err(config_err(
                    "[sim] field_grid and field_window must be given together",
                ));
            }
        }
        match &self.color_counts {
            Some(counts) => {
                if counts.len() != m {
                    return Err(config_err(format!(
                        "[sim] color_counts has {} entries for {m} colors",
                        counts.len()
                    )));
                }
                let sum: usize = counts.iter().sum();
                if sum != self.n {
                    return Err(config_err(format!(
                        "[sim] color_counts sums to {sum}, expected n = {}",
                        self.n
                    )));
                }
            }
            None => self.color_counts = Some(apportion_counts(masses, self.n)),
        }
        if let Some(w) = self.density_window {
            if !(w > 0.0 && w < 0.5) {
                return Err(config_err(format!(
                    "[sim] density_window must lie in (0, 0.5), got {w}"
                )));
            }
        }
        if let Some(tag) = self.tagged {
            if tag >= self.n {
                return Err(config_err(format!(
                    "[sim] tagged label {tag} out of range for n = {}",
                    self.n
                )));
            }
        }
        for entry in &self.track {
            if !TRACK_KINDS.contains(&entry.as_str()) {
                return Err(config_err(format!(
                    "[sim] unknown track entry '{entry}' (expected one of {TRACK_KINDS:?})"
                )));
            }
        }
        self.track.sort();
        self.track.dedup();
        Ok(())
    }

    fn track_has(&self, kind: &str) -> bool {
        self.track.iter().any(|t| t == kind)
    }

    fn require_track(&mut self, kind: &str) {
        if !self.track_has(kind) {
            self.track.push(kind.to_string());
            self.track.sort();
        }
    }

    /// Effective step `dt_factor / n²` for a given particle count.
    pub fn dt_for(&self, n: usize) -> f64 {
        self.dt_factor / (n as f64 * n as f64)
    }

    fn estimator_enum(&self) -> LocalTimeEstimator {
        match self.estimator.as_str() {
            "band" => LocalTimeEstimator::Band {
                eps: self.band_eps.expect("validated"),
            },
            _ => LocalTimeEstimator::Bridge,
        }
    }

    fn record_options(&self) -> RecordOptions {
        let mut record = RecordOptions::new(self.frames);
        if let (Some(k), Some(w)) = (self.field_grid, self.field_window) {
            record = record.with_fields(k, w);
        }
        if self.track_has("ledger-snapshots") {
            record = record.with_ledger_snapshots();
        }
        if self.track_has("positions") {
            record = record.with_positions();
        }
        if self.track_has("lifted") {
            record = record.with_lifted();
        }
        if self.track_has("swap-events") {
            record = record.with_swap_events();
        }
        if let Some(w) = self.density_window {
            record = record.with_density_window(w);
        }
        record
    }

    /// Core configuration for this spec at particle count `n` (the spec's own
    /// `n` for base runs; overridden by the replacement comparison).
    fn sim_config(
        &self,
        n: usize,
        params: &ModelParams,
        masses: &[f64],
        initial: &InitialState<'_>,
        seed: u64,
    ) -> Result<SimConfig> {
        let color_counts = if n == self.n {
            self.color_counts.clone().expect("resolved")
        } else {
            apportion_counts(masses, n)
        };
        let field_cells = self.field_grid.unwrap_or(256);
        let initial_field = initial.field(Grid::new(field_cells.max(16))?)?;
        let tagged = self.tagged.filter(|&t| t < n);
        Ok(SimConfig {
            params: params.clone(),
            n,
            dt: self.dt_for(n),
            t_end: self.t_end,
            seed,
            initial_law: InitialLaw::IidDensity(initial_field),
            color_counts,
            estimator: self.estimator_enum(),
            tagged,
            record: self.record_options(),
        })
    }
}

impl PdeSpec {
    fn resolve(&self) -> Result<()> {
        if self.grid < 4 {
            return Err(config_err(format!(
                "[pde] needs grid ≥ 4, got {}",
                self.grid
            )));
        }
        if !(self.t_end > 0.0) || !self.t_end.is_finite() {
            return Err(config_err(format!(
                "[pde] t_end must be positive, got {}",
                self.t_end
            )));
        }
        if self.frames < 2 {
            return Err(config_err(format!(
                "[pde] needs frames ≥ 2, got {}",
                self.frames
            )));
        }
        if !matches!(self.scheme.as_str(), "explicit" | "semi-implicit") {
            return Err(config_err(format!(
                "[pde] unknown scheme '{}' (expected explicit or semi-implicit)",
                self.scheme
            )));
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0) || !dt.is_finite() {
                return Err(config_err(format!("[pde] dt must be positive, got {dt}")));
            }
        }
        Ok(())
    }

    fn scheme_enum(&self) -> Scheme {
        match self.scheme.as_str() {
            "semi-implicit" => Scheme::SemiImplicit,
            _ => Scheme::Explicit,
        }
    }

    /// Core configuration; `refine` doubles the grid and halves the frame
    /// spacing (for refinement-decrease checks).
    pub fn pde_config(&self, params: &ModelParams, refine: bool) -> PdeConfig {
        let (grid, frames) = if refine {
            (self.grid * 2, self.frames * 2 - 1)
        } else {
            (self.grid, self.frames)
        };
        PdeConfig {
            grid,
            dt: self.dt,
            t_end: self.t_end,
            frames,
            scheme: self.scheme_enum(),
            params: params.clone(),
        }
    }
}

impl PerturbationSpec {
    fn resolve(&mut self, m: usize) -> Result<()> {
        if self.kind != "gradient-sine" {
            return Err(config_err(format!(
                "[perturbation] unknown kind '{}' (expected gradient-sine)",
                self.kind
            )));
        }
        if self.amplitudes.len() != 1 && self.amplitudes.len() != m {
            return Err(config_err(format!(
                "[perturbation] needs 1 or {m} amplitudes, got {}",
                self.amplitudes.len()
            )));
        }
        if self.amplitudes.iter().any(|a| !a.is_finite()) {
            return Err(config_err("[perturbation] amplitudes must be finite"));
        }
        if self.amplitudes.iter().all(|&a| a == 0.0) {
            return Err(config_err("[perturbation] needs a nonzero amplitude"));
        }
        if self.mode == 0 {
            return Err(config_err("[perturbation] mode must be ≥ 1"));
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(config_err(format!(
                "[perturbation] eta must be ≥ 0, got {}",
                self.eta
            )));
        }
        if !(self.ramp >= 0.0) || !self.ramp.is_finite() {
            return Err(config_err(format!(
                "[perturbation] ramp must be ≥ 0, got {}",
                self.ramp
            )));
        }
        Ok(())
    }
}

fn comparison_plan(spec: &ComparisonSpec, index: usize) -> Result<ComparisonPlan> {
    // Reject fields that do not belong to the declared kind, so a typo in a
    // tolerance never silently relaxes a check.
    let allowed: &[&str] = match spec.kind.as_str() {
        "sim_vs_pde" => &["l1_tol", "linf_tol", "skip_initial_frames"],
        "rate_zero" => &["rate_tol", "require_refinement_decrease"],
        "rate_cost_match" => &["rel_tol", "fixed_point_iters"],
        "tagged_variance" => &["rel_tol"],
        "replacement_residual" => &[
            "n_low",
            "n_high",
            "eps",
            "observer",
            "target",
            "t_from",
            "t_to",
            "max_residual",
        ],
        "tightness" => &["eps", "delta", "tol"],
        "pde_closure" => &["linf_tol"],
        other => {
            return Err(config_err(format!(
                "comparison #{index}: unknown kind '{other}'"
            )));
        }
    };
    let present: [(&str, bool); 16] = [
        ("l1_tol", spec.l1_tol.is_some()),
        ("linf_tol", spec.linf_tol.is_some()),
        ("skip_initial_frames", spec.skip_initial_frames.is_some()),
        ("rate_tol", spec.rate_tol.is_some()),
        (
            "require_refinement_decrease",
            spec.require_refinement_decrease.is_some(),
        ),
        ("rel_tol", spec.rel_tol.is_some()),
        ("fixed_point_iters", spec.fixed_point_iters.is_some()),
        ("n_low", spec.n_low.is_some()),
        ("n_high", spec.n_high.is_some()),
        ("eps", spec.eps.is_some()),
        ("observer", spec.observer.is_some()),
        ("target", spec.target.is_some()),
        ("t_from", spec.t_from.is_some()),
        ("t_to", spec.t_to.is_some()),
        ("max_residual", spec.max_residual.is_some()),
        ("delta", spec.delta.is_some()),
    ];
    for (name, is_set) in present {
        if is_set && !allowed.contains(&name) {
            return Err(config_err(format!(
                "comparison #{index} ({}): field '{name}' does not apply",
                spec.kind
            )));
        }
    }
    if spec.tol.is_some() && !allowed.contains(&"tol") && spec.kind != "tightness" {
        return Err(config_err(format!(
            "comparison #{index} ({}): field 'tol' does not apply",
            spec.kind
        )));
    }

    let require = |opt: Option<f64>, name: &str| {
        opt.ok_or_else(|| {
            config_err(format!("comparison #{index} ({}): needs '{name}'", spec.kind))
        })
    };
    let positive = |v: f64, name: &str| -> Result<f64> {
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(config_err(format!(
                "comparison #{index} ({}): '{name}' must be positive, got {v}",
                spec.kind
            )))
        }
    };

    Ok(match spec.kind.as_str() {
        "sim_vs_pde" => {
            if spec.l1_tol.is_none() && spec.linf_tol.is_none() {
                return Err(config_err(format!(
                    "comparison #{index} (sim_vs_pde): needs l1_tol and/or linf_tol"
                )));
            }
            if let Some(t) = spec.l1_tol {
                positive(t, "l1_tol")?;
            }
            if let Some(t) = spec.linf_tol {
                positive(t, "linf_tol")?;
            }
            ComparisonPlan::SimVsPde {
                l1_tol: spec.l1_tol,
                linf_tol: spec.linf_tol,
                skip_initial_frames: spec.skip_initial_frames.unwrap_or(0),
            }
        }
        "rate_zero" => ComparisonPlan::RateZero {
            rate_tol: positive(require(spec.rate_tol, "rate_tol")?, "rate_tol")?,
            require_refinement_decrease: spec.require_refinement_decrease.unwrap_or(false),
        },
        "rate_cost_match" => ComparisonPlan::RateCostMatch {
            rel_tol: positive(require(spec.rel_tol, "rel_tol")?, "rel_tol")?,
            fixed_point_iters: spec.fixed_point_iters.unwrap_or(3),
        },
        "tagged_variance" => ComparisonPlan::TaggedVariance {
            rel_tol: positive(require(spec.rel_tol, "rel_tol")?, "rel_tol")?,
        },
        "replacement_residual" => {
            let n_low = spec.n_low.ok_or_else(|| {
                config_err(format!("comparison #{index} (replacement_residual): needs 'n_low'"))
            })?;
            let n_high = spec.n_high.ok_or_else(|| {
                config_err(format!("comparison #{index} (replacement_residual): needs 'n_high'"))
            })?;
            if n_low < 2 || n_high <= n_low {
                return Err(config_err(format!(
                    "comparison #{index} (replacement_residual): needs 2 ≤ n_low < n_high, got {n_low}, {n_high}"
                )));
            }
            let eps = positive(require(spec.eps, "eps")?, "eps")?;
            if eps >= 0.5 {
                return Err(config_err(format!(
                    "comparison #{index} (replacement_residual): eps must be < 0.5, got {eps}"
                )));
            }
            if let Some(t) = spec.max_residual {
                positive(t, "max_residual")?;
            }
            ComparisonPlan::ReplacementResidual {
                n_low,
                n_high,
                eps,
                observer: spec.observer.unwrap_or(0),
                target: spec.target.unwrap_or(0),
                t_from: spec.t_from.unwrap_or(0.0),
                t_to: spec.t_to.unwrap_or(f64::NAN), // filled against [sim] below
                max_residual: spec.max_residual,
            }
        }
        "tightness" => {
            let eps = positive(require(spec.eps, "eps")?, "eps")?;
            let delta = positive(require(spec.delta, "delta")?, "delta")?;
            let tol = require(spec.tol, "tol")?;
            if !(tol >= 0.0) {
                return Err(config_err(format!(
                    "comparison #{index} (tightness): tol must be ≥ 0, got {tol}"
                )));
            }
            ComparisonPlan::Tightness { eps, delta, tol }
        }
        "pde_closure" => ComparisonPlan::PdeClosure {
            linf_tol: positive(require(spec.linf_tol, "linf_tol")?, "linf_tol")?,
        },
        _ => unreachable!("kind validated above"),
    })
}

impl Scenario {
    /// Validate everything, fill defaults, and build the execution plan. The
    /// scenario inside the returned plan is canonical: serializing it yields
    /// the resolved manifest, and resolving that manifest is a fixed point.
    pub fn resolve(mut self) -> Result<Plan> {
        validate_name(&self.name)?;
        let params = validate_params(&self.params)?;
        let m = params.colors();
        let masses = self.params.masses.clone();

        self.initial.resolve(m)?;
        if let Some(sim) = &mut self.sim {
            sim.resolve(m, &masses)?;
        }
        if let Some(pde) = &self.pde {
            pde.resolve()?;
        }
        if let Some(pert) = &mut self.perturbation {
            pert.resolve(m)?;
        }

        // Typed comparisons plus their cross-section requirements.
        let mut plans = Vec::with_capacity(self.comparisons.len());
        for (index, spec) in self.comparisons.iter().enumerate() {
            plans.push(comparison_plan(spec, index)?);
        }
        let sim_t_end = self.sim.as_ref().map(|s| s.t_end);
        for (index, plan) in plans.iter_mut().enumerate() {
            let needs_sim = matches!(
                plan,
                ComparisonPlan::SimVsPde { .. }
                    | ComparisonPlan::TaggedVariance { .. }
                    | ComparisonPlan::ReplacementResidual { .. }
                    | ComparisonPlan::Tightness { .. }
            );
            let needs_pde = matches!(
                plan,
                ComparisonPlan::SimVsPde { .. }
                    | ComparisonPlan::RateZero { .. }
                    | ComparisonPlan::RateCostMatch { .. }
                    | ComparisonPlan::PdeClosure { .. }
            );
            if needs_sim {
                if self.sim.is_none() {
                    return Err(config_err(format!(
                        "comparison #{index} ({}) needs a [sim] section",
                        plan.kind()
                    )));
                }
                if self.replicas == 0 {
                    return Err(config_err(format!(
                        "comparison #{index} ({}) needs replicas ≥ 1",
                        plan.kind()
                    )));
                }
            }
            if needs_pde && self.pde.is_none() {
                return Err(config_err(format!(
                    "comparison #{index} ({}) needs a [pde] section",
                    plan.kind()
                )));
            }
            if matches!(plan, ComparisonPlan::RateCostMatch { .. }) && self.perturbation.is_none() {
                return Err(config_err(format!(
                    "comparison #{index} (rate_cost_match) needs a [perturbation] section"
                )));
            }
            match plan {
                ComparisonPlan::SimVsPde { .. } => {
                    let sim = self.sim.as_ref().expect("checked");
                    let pde = self.pde.as_ref().expect("checked");
                    let (grid, window) = match (sim.field_grid, sim.field_window) {
                        (Some(g), Some(w)) => (g, w),
                        _ => {
                            return Err(config_err(format!(
                                "comparison #{index} (sim_vs_pde): [sim] must set field_grid and field_window"
                            )));
                        }
                    };
                    if grid != pde.grid {
                        return Err(config_err(format!(
                            "comparison #{index} (sim_vs_pde): field_grid {grid} must equal [pde] grid {}",
                            pde.grid
                        )));
                    }
                    let dx = 1.0 / pde.grid as f64;
                    if window + 1e-12 < dx {
                        return Err(config_err(format!(
                            "comparison #{index} (sim_vs_pde): field_window {window} is narrower than one \
                             [pde] cell ({dx}); the empirical kernel must not out-resolve the solve"
                        )));
                    }
                    if (sim.t_end - pde.t_end).abs() > 1e-12 || sim.frames != pde.frames {
                        return Err(config_err(format!(
                            "comparison #{index} (sim_vs_pde): [sim] and [pde] must share t_end and frames"
                        )));
                    }
                }
                ComparisonPlan::TaggedVariance { .. } => {
                    if !self.initial.is_uniform() {
                        return Err(config_err(format!(
                            "comparison #{index} (tagged_variance): the stationary prediction needs \
                             [initial] kind 'uniform'"
                        )));
                    }
                    self.sim.as_mut().expect("checked").require_track("lifted");
                }
                ComparisonPlan::Tightness { delta, .. } => {
                    let sim = self.sim.as_mut().expect("checked");
                    let spacing = sim.t_end / (sim.frames - 1) as f64;
                    if spacing > *delta + 1e-12 {
                        return Err(config_err(format!(
                            "comparison #{index} (tightness): frame spacing {spacing} exceeds delta {delta}; \
                             record more frames"
                        )));
                    }
                    sim.require_track("lifted");
                }
                ComparisonPlan::ReplacementResidual {
                    observer,
                    target,
                    t_from,
                    t_to,
                    ..
                } => {
                    if *observer >= m || *target >= m {
                        return Err(config_err(format!(
                            "comparison #{index} (replacement_residual): colors ({observer}, {target}) \
                             out of range for {m} colors"
                        )));
                    }
                    let t_end = sim_t_end.expect("checked");
                    if t_to.is_nan() {
                        *t_to = t_end;
                    }
                    if !(*t_from >= 0.0) || !(*t_to <= t_end + 1e-12) || *t_from >= *t_to {
                        return Err(config_err(format!(
                            "comparison #{index} (replacement_residual): needs 0 ≤ t_from < t_to ≤ t_end, \
                             got {t_from}, {t_to}"
                        )));
                    }
                }
                _ => {}
            }
        }
        // Canonicalize t_to in the serialized spec as well, so the resolved
        // manifest is explicit about the window actually used.
        for (spec, plan) in self.comparisons.iter_mut().zip(&plans) {
            if let ComparisonPlan::ReplacementResidual { t_from, t_to, observer, target, .. } = plan {
                spec.t_from = Some(*t_from);
                spec.t_to = Some(*t_to);
                spec.observer = Some(*observer);
                spec.target = Some(*target);
            }
            if let ComparisonPlan::SimVsPde { skip_initial_frames, .. } = plan {
                spec.skip_initial_frames = Some(*skip_initial_frames);
            }
            if let ComparisonPlan::RateZero { require_refinement_decrease, .. } = plan {
                spec.require_refinement_decrease = Some(*require_refinement_decrease);
            }
            if let ComparisonPlan::RateCostMatch { fixed_point_iters, .. } = plan {
                spec.fixed_point_iters = Some(*fixed_point_iters);
            }
        }

        let initial_state = InitialState {
            spec: &self.initial,
            masses: &masses,
        };
        let pde_config = self.pde.as_ref().map(|p| p.pde_config(&params, false));
        let pde_initial = match (&self.pde, &pde_config) {
            (Some(_), Some(cfg)) => Some(initial_state.field(Grid::new(cfg.grid)?)?),
            _ => None,
        };
        if let Some(cfg) = &pde_config {
            cfg.validate()?;
        }
        let sim_config = match &self.sim {
            Some(spec) => {
                let cfg = spec.sim_config(spec.n, &params, &masses, &initial_state, self.seed)?;
                cfg.validate()?;
                Some(cfg)
            }
            None => None,
        };

        Ok(Plan {
            params,
            sim: sim_config,
            pde: pde_config,
            pde_initial,
            comparisons: plans,
            scenario: self,
        })
    }

}

// ---------------------------------------------------------------------------
// Derived configurations for comparisons
// ---------------------------------------------------------------------------

impl Plan {
    /// Configuration for one leg of the replacement comparison: the base
    /// `[sim]` shape at a different particle count, with window densities at
    /// `eps` and ledger snapshots forced on, and heavyweight recordings
    /// dropped. The seed is offset by the leg index so the two legs (and the
    /// base runs) draw independent replica streams.
    pub fn replacement_config(&self, n: usize, eps: f64, leg: u64) -> Result<SimConfig> {
        let spec = self
            .scenario
            .sim
            .as_ref()
            .ok_or_else(|| config_err("replacement comparison needs a [sim] section"))?;
        let initial = InitialState {
            spec: &self.scenario.initial,
            masses: &self.scenario.params.masses,
        };
        let mut cfg = spec.sim_config(
            n,
            &self.params,
            &self.scenario.params.masses,
            &initial,
            self.scenario.seed ^ (0x5EED_0000 + leg),
        )?;
        cfg.tagged = None;
        cfg.record = RecordOptions::new(spec.frames)
            .with_ledger_snapshots()
            .with_density_window(eps);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Refined solve configuration (doubled grid, halved frame spacing) plus
    /// its initial data, for the refinement-decrease check.
    pub fn refined_pde(&self) -> Result<(PdeConfig, ColorField)> {
        let spec = self
            .scenario
            .pde
            .as_ref()
            .ok_or_else(|| config_err("refinement check needs a [pde] section"))?;
        let cfg = spec.pde_config(&self.params, true);
        cfg.validate()?;
        let initial = InitialState {
            spec: &self.scenario.initial,
            masses: &self.scenario.params.masses,
        };
        let field = initial.field(Grid::new(cfg.grid)?)?;
        Ok((cfg, field))
    }
}

// ---------------------------------------------------------------------------
// Builtins
// ---------------------------------------------------------------------------

/// Embedded scenarios, exercisable by name from the command line.
pub const BUILTINS: [(&str, &str); 7] = [
    ("closure", include_str!("../builtins/closure.toml")),
    ("hydro-quick", include_str!("../builtins/hydro-quick.toml")),
    ("rate-zero", include_str!("../builtins/rate-zero.toml")),
    ("rate-cost", include_str!("../builtins/rate-cost.toml")),
    ("tagged-quick", include_str!("../builtins/tagged-quick.toml")),
    (
        "replacement-quick",
        include_str!("../builtins/replacement-quick.toml"),
    ),
    (
        "tightness-quick",
        include_str!("../builtins/tightness-quick.toml"),
    ),
];

/// Source text of a builtin scenario, if `name` names one.
pub fn builtin(name: &str) -> Option<&'static str> {
    BUILTINS.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}
