//! Statistics derived from particle states and run records: windowed local
//! densities, kernel-smoothed empirical fields, drift-corrected trajectories,
//! driving-noise reconstruction, ledger-vs-density replacement residuals,
//! modulus-of-continuity tightness fractions, replica-averaged fields,
//! tagged-particle variance fits, and swap-rate calibration.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{circ_dist, lift_forward, ColorField, FieldTrajectory, Grid};
use crate::sim::{LocalTimeLedger, ParticleSystemState, RunRecord};

/// Windowed one-color density seen by one particle,
/// `(1/(2Nε)) · #{ j : c_j = c, d(x_j, x_i) ≤ ε }`.
///
/// The count includes the observing particle itself when its color matches.
/// A color index no particle carries simply yields `0`.
///
/// # Errors
/// `Domain` unless `0 < ε < 1/4`; `Config` when `label` is out of range.
pub fn local_density(
    state: &ParticleSystemState,
    label: usize,
    color: usize,
    eps: f64,
) -> Result<f64> {
    let n = state.n();
    if label >= n {
        return Err(Error::Config(format!(
            "label {label} out of range for {n} particles"
        )));
    }
    if !(eps > 0.0 && eps < 0.25) {
        return Err(Error::Domain(format!(
            "window half-width must satisfy 0 < ε < 1/4, got {eps}"
        )));
    }
    let center = state.position_of_label(label);
    let mut count = 0usize;
    for (rank, &x) in state.positions().iter().enumerate() {
        if state.color_of_rank(rank) == color && circ_dist(x, center) <= eps {
            count += 1;
        }
    }
    Ok(count as f64 / (2.0 * n as f64 * eps))
}

/// Box-kernel-smoothed empirical color fields of a configuration, each
/// particle depositing mass `1/N` with the given kernel width.
///
/// # Errors
/// `Config` when `bandwidth` is below one cell or ≥ 1, or when some particle
/// carries a color ≥ `colors`.
pub fn empirical_color_field(
    state: &ParticleSystemState,
    colors: usize,
    cells: usize,
    bandwidth: f64,
) -> Result<ColorField> {
    let grid = Grid::new(cells)?;
    if !(bandwidth >= grid.dx() && bandwidth < 1.0) {
        return Err(Error::Config(format!(
            "field bandwidth {bandwidth} must lie in [dx = {}, 1)",
            grid.dx()
        )));
    }
    let n = state.n();
    let mut field = ColorField::zeros(grid, colors);
    for (rank, &x) in state.positions().iter().enumerate() {
        let c = state.color_of_rank(rank);
        if c >= colors {
            return Err(Error::Config(format!(
                "particle color {c} out of range for {colors} colors"
            )));
        }
        field.deposit(c, x, bandwidth, 1.0 / n as f64);
    }
    Ok(field)
}

/// Drift-corrected position
/// `z_i = x_i + (1/(N(λ+1))) Σ_{j≠i} ν(x_j − x_i)` with `ν` the forward
/// (counterclockwise) circular displacement in `[0, 1)`.
///
/// In the stationary regime the increments of `z_i` are driftless, which
/// makes `z` the natural coordinate for diffusivity estimates.
///
/// # Errors
/// `Domain` unless `λ > 0` and finite; `Config` when `label` is out of range.
pub fn adjusted_position(state: &ParticleSystemState, label: usize, lambda: f64) -> Result<f64> {
    let n = state.n();
    if label >= n {
        return Err(Error::Config(format!(
            "label {label} out of range for {n} particles"
        )));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Domain(format!(
            "swap intensity must be positive and finite, got {lambda}"
        )));
    }
    let my_rank = state.rank_of_label(label);
    let x = state.positions()[my_rank];
    let mut sum = 0.0;
    for (rank, &y) in state.positions().iter().enumerate() {
        if rank != my_rank {
            sum += lift_forward(y - x);
        }
    }
    Ok(x + sum / (n as f64 * (lambda + 1.0)))
}

/// Reconstruct the driving noise of one label at the current time,
/// `B_i = (lifted position of i) + (signed collision time of i)`.
///
/// The signed ledger accrues `+Δℓ` when the label is the lower particle of
/// an accruing face and `−Δℓ` when it is the upper one, while collisions
/// push the lower particle down (and the upper one up) by exactly the
/// face's contact occupation density, so adding the signed total undoes
/// every collision push and leaves the label's underlying Brownian driver.
///
/// Valid only when lift tracking was active for every step taken (the
/// [`crate::sim::simulate`] driver activates it via
/// `record.lifted = true` or a tagged label).
///
/// # Errors
/// `Config` when `label` is out of range for either argument.
pub fn driving_noise(
    state: &ParticleSystemState,
    ledger: &LocalTimeLedger,
    label: usize,
) -> Result<f64> {
    if label >= state.n() || label >= ledger.n() {
        return Err(Error::Config(format!(
            "label {label} out of range for {} particles",
            state.n()
        )));
    }
    Ok(state.lifted()[label] + ledger.signed(label))
}

/// Per-frame reconstruction of one label's driving noise from a run that
/// recorded both lifted trajectories and ledger snapshots.
///
/// # Errors
/// `Config` when either recording is missing or `label` is out of range.
pub fn driving_noise_frames(record: &RunRecord, label: usize) -> Result<Vec<f64>> {
    let lifted = record.lifted.as_ref().ok_or_else(|| {
        Error::Config("driving-noise reconstruction needs recorded lifted trajectories".into())
    })?;
    let snaps = record.ledger_snapshots.as_ref().ok_or_else(|| {
        Error::Config("driving-noise reconstruction needs recorded ledger snapshots".into())
    })?;
    if label >= record.config.n {
        return Err(Error::Config(format!(
            "label {label} out of range for {} particles",
            record.config.n
        )));
    }
    debug_assert_eq!(lifted.len(), snaps.len());
    Ok(lifted
        .iter()
        .zip(snaps)
        .map(|(frame, snap)| frame[label] + snap.signed[label])
        .collect())
}

/// Mean absolute gap, over the particles of color `observer`, between the
/// window-density integral `∫ ρ_{ε,i}^{(target)} dt` and the same-color
/// collision-time ledger increment, both taken between the recorded frames
/// nearest `t_from` and `t_to`:
///
/// `(1/N) Σ_{i : c_i = observer} | Δ∫ρ_{ε,i}^{(target)} − ΔA_i^{(target)} |`.
///
/// With the band collision-time estimator at the same `ε` the two
/// accumulations are algebraically identical and the residual is exactly
/// zero; any other pairing measures how well the window density stands in
/// for the ledger.
///
/// # Errors
/// `Config` when the run did not accumulate window densities at this `ε` or
/// ledger snapshots, when a color is out of range, or when the two times
/// resolve to the same frame; `Domain` when a time is outside the record.
pub fn replacement_residual(
    record: &RunRecord,
    observer: usize,
    target: usize,
    eps: f64,
    t_from: f64,
    t_to: f64,
) -> Result<f64> {
    let m = record.config.params.colors();
    if observer >= m || target >= m {
        return Err(Error::Config(format!(
            "color pair ({observer}, {target}) out of range for {m} colors"
        )));
    }
    let window = record.config.record.density_window.ok_or_else(|| {
        Error::Config("run did not accumulate window-density integrals".into())
    })?;
    if (window - eps).abs() > 1e-12 {
        return Err(Error::Config(format!(
            "run accumulated window densities at ε = {window}, not the requested ε = {eps}"
        )));
    }
    let densities = record
        .density_integrals
        .as_ref()
        .expect("window-density recording always stores integrals");
    let snaps = record.ledger_snapshots.as_ref().ok_or_else(|| {
        Error::Config("replacement residual needs recorded ledger snapshots".into())
    })?;
    let i1 = record.frame_nearest(t_from)?;
    let i2 = record.frame_nearest(t_to)?;
    if i1 >= i2 {
        return Err(Error::Config(format!(
            "times {t_from} and {t_to} must resolve to increasing frames, got {i1} and {i2}"
        )));
    }
    let n = record.config.n;
    let mut sum = 0.0;
    for label in 0..n {
        if record.final_state.color_of_label(label) != observer {
            continue;
        }
        let k = label * m + target;
        let d_inc = densities[i2][k] - densities[i1][k];
        let a_inc = snaps[i2].per_color[k] - snaps[i1].per_color[k];
        sum += (d_inc - a_inc).abs();
    }
    Ok(sum / n as f64)
}

/// Fraction of labels whose lifted trajectory oscillates by at least `ε`
/// within some recorded time window of length ≤ `δ`.
///
/// Conventions for the degenerate thresholds: `ε = 0` gives `1` (every path
/// oscillates by at least nothing) and then `δ = 0` gives `0` (no window).
///
/// # Errors
/// `Domain` for negative or non-finite thresholds; `Config` when lifted
/// trajectories were not recorded, fewer than two frames exist, or the frame
/// spacing is coarser than `δ` (the statistic would be blind).
pub fn tightness_statistic(record: &RunRecord, eps: f64, delta: f64) -> Result<f64> {
    if !(eps >= 0.0 && eps.is_finite()) || !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::Domain(format!(
            "oscillation thresholds must be finite and nonnegative, got ε = {eps}, δ = {delta}"
        )));
    }
    if eps == 0.0 {
        return Ok(1.0);
    }
    if delta == 0.0 {
        return Ok(0.0);
    }
    let lifted = record.lifted.as_ref().ok_or_else(|| {
        Error::Config("tightness statistic needs recorded lifted trajectories".into())
    })?;
    let times = &record.times;
    if times.len() < 2 {
        return Err(Error::Config(
            "tightness statistic needs at least two recorded frames".into(),
        ));
    }
    let frame_dt = times[1] - times[0];
    if frame_dt > delta * (1.0 + 1e-9) + 1e-15 {
        return Err(Error::Config(format!(
            "frame spacing {frame_dt} is coarser than the window δ = {delta}; record more frames"
        )));
    }
    let n = record.config.n;
    let reach = delta * (1.0 + 1e-9) + 1e-15;
    let mut oscillating = 0usize;
    for label in 0..n {
        'window: for (a, &ta) in times.iter().enumerate() {
            let base = lifted[a][label];
            for (b, &tb) in times.iter().enumerate().skip(a + 1) {
                if tb - ta > reach {
                    break;
                }
                if (lifted[b][label] - base).abs() >= eps {
                    oscillating += 1;
                    break 'window;
                }
            }
        }
    }
    Ok(oscillating as f64 / n as f64)
}

/// Replica average of recorded empirical fields, frame by frame.
///
/// # Errors
/// `Config` when `records` is empty, some record lacks fields, or the
/// records disagree on frame times, grid, or colors.
pub fn mean_fields(records: &[RunRecord]) -> Result<FieldTrajectory> {
    let first = records
        .first()
        .ok_or_else(|| Error::Config("replica average needs at least one run".into()))?;
    let template = first
        .fields
        .as_ref()
        .ok_or_else(|| Error::Config("replica average needs recorded fields".into()))?;
    let times = template.times().to_vec();
    let grid = template.grid();
    let m = template.colors();
    let weight = 1.0 / records.len() as f64;
    let mut frames: Vec<ColorField> = (0..times.len())
        .map(|_| ColorField::zeros(grid, m))
        .collect();
    for record in records {
        let fields = record
            .fields
            .as_ref()
            .ok_or_else(|| Error::Config("replica average needs recorded fields".into()))?;
        if fields.times().len() != times.len()
            || fields
                .times()
                .iter()
                .zip(&times)
                .any(|(a, b)| (a - b).abs() > 1e-12 * b.abs().max(1.0))
        {
            return Err(Error::Config(
                "replica runs disagree on recorded frame times".into(),
            ));
        }
        for (mean, frame) in frames.iter_mut().zip(fields.frames()) {
            mean.accumulate(frame, weight)?;
        }
    }
    FieldTrajectory::new(times, frames)
}

/// Least-squares line through the late-time variance curve of lifted
/// displacements, pooled over replicas (and over labels unless a tagged
/// label restricts the pool).
#[derive(Debug, Clone, Serialize)]
pub struct VarianceFit {
    /// Fitted variance growth rate (the empirical long-run diffusivity).
    pub slope: f64,
    /// Fitted intercept (absorbs short-time transients).
    pub intercept: f64,
    /// Stationary-theory growth rate `λ/(λ+1)` for comparison.
    pub predicted_slope: f64,
    /// `(time, pooled displacement variance)` points the line was fitted to
    /// (the frames in the second half of the horizon).
    pub points: Vec<(f64, f64)>,
    /// Displacement samples entering each variance point.
    pub samples_per_frame: usize,
}

/// Fit the growth rate of `Var[x_i(t) − x_i(0)]` (lifted coordinates) over
/// the second half of the horizon and compare with the stationary prediction
/// `λ/(λ+1)`.
///
/// Displacements are pooled over all replicas; when the first record tags a
/// label, only that label enters, otherwise all labels do. Every record must
/// start from the i.i.d. uniform law — the prediction is a statement about
/// the stationary regime.
///
/// # Errors
/// `Domain` when some record did not start from the uniform law; `Config`
/// when records are missing, lack lifted trajectories, disagree on shape, or
/// leave fewer than two frames in the fit window.
pub fn tagged_variance_fit(records: &[RunRecord]) -> Result<VarianceFit> {
    let first = records
        .first()
        .ok_or_else(|| Error::Config("variance fit needs at least one run".into()))?;
    let times = &first.times;
    let n = first.config.n;
    let lambda = first.config.params.lambda();
    for record in records {
        if !record.uniform_start {
            return Err(Error::Domain(
                "variance fit requires runs started from the i.i.d. uniform law".into(),
            ));
        }
        if record.lifted.is_none() {
            return Err(Error::Config(
                "variance fit needs recorded lifted trajectories".into(),
            ));
        }
        if record.config.n != n
            || record.times.len() != times.len()
            || record
                .times
                .iter()
                .zip(times)
                .any(|(a, b)| (a - b).abs() > 1e-12 * b.abs().max(1.0))
        {
            return Err(Error::Config(
                "variance fit needs replicas of identical shape".into(),
            ));
        }
    }
    let labels: Vec<usize> = match first.config.tagged {
        Some(l) => vec![l],
        None => (0..n).collect(),
    };
    let horizon = *times.last().expect("runs record at least one frame");
    let start = horizon / 2.0 - 1e-12;
    let window: Vec<usize> = (0..times.len()).filter(|&k| times[k] >= start).collect();
    if window.len() < 2 {
        return Err(Error::Config(
            "variance fit needs at least two frames in the late-time window".into(),
        ));
    }
    let samples = records.len() * labels.len();
    let mut points = Vec::with_capacity(window.len());
    for &k in &window {
        let mut sum = 0.0;
        let mut sq = 0.0;
        for record in records {
            let lifted = record.lifted.as_ref().expect("checked above");
            for &l in &labels {
                let d = lifted[k][l] - lifted[0][l];
                sum += d;
                sq += d * d;
            }
        }
        let mean = sum / samples as f64;
        points.push((times[k], sq / samples as f64 - mean * mean));
    }
    let tb = points.iter().map(|p| p.0).sum::<f64>() / points.len() as f64;
    let vb = points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
    let mut cov = 0.0;
    let mut var = 0.0;
    for &(t, v) in &points {
        cov += (t - tb) * (v - vb);
        var += (t - tb) * (t - tb);
    }
    let slope = cov / var;
    Ok(VarianceFit {
        slope,
        intercept: vb - slope * tb,
        predicted_slope: lambda / (lambda + 1.0),
        points,
        samples_per_frame: samples,
    })
}

/// Observed swap rate per unit of accumulated pair local time, against the
/// nominal intensity `λN`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SwapCalibration {
    /// Total swaps divided by total pair local time.
    pub observed_rate: f64,
    /// Nominal thinning intensity `λN`.
    pub expected_rate: f64,
    /// Poisson standard error of the observed rate.
    pub standard_error: f64,
    /// Total swap events across the records.
    pub swaps: u64,
    /// Total pair local time across the records.
    pub exposure: f64,
}

/// Pool swap counts and pair local time over the records and compare the
/// empirical rate with the nominal intensity `λN`.
///
/// # Errors
/// `Config` when `records` is empty or the records disagree on `λN`;
/// `Domain` when no pair local time accumulated.
pub fn swap_calibration(records: &[RunRecord]) -> Result<SwapCalibration> {
    let first = records
        .first()
        .ok_or_else(|| Error::Config("swap calibration needs at least one run".into()))?;
    let expected_rate = first.config.params.lambda() * first.config.n as f64;
    let mut swaps = 0u64;
    let mut exposure = 0.0;
    for record in records {
        let rate = record.config.params.lambda() * record.config.n as f64;
        if (rate - expected_rate).abs() > 1e-9 * expected_rate.max(1.0) {
            return Err(Error::Config(
                "swap calibration needs records with identical nominal intensity λN".into(),
            ));
        }
        swaps += record.swaps.total();
        exposure += record.ledger.total_pair_local_time();
    }
    if exposure <= 0.0 {
        return Err(Error::Domain(
            "no pair local time accumulated; the swap rate is undefined".into(),
        ));
    }
    Ok(SwapCalibration {
        observed_rate: swaps as f64 / exposure,
        expected_rate,
        standard_error: (swaps.max(1) as f64).sqrt() / exposure,
        swaps,
        exposure,
    })
}
