//! Uniform periodic grids on the unit circle and gridded color densities.
//!
//! All fields live on a cell-centered grid of `K` cells: cell `k` covers
//! `[k/K, (k+1)/K)` with center `x_k = (k+½)/K`. Spatial arithmetic is
//! modulo 1 with increasing `x` as the fixed orientation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps a real number into the fundamental domain `[0, 1)`.
#[inline]
pub fn wrap_unit(x: f64) -> f64 {
    let y = x - x.floor();
    // `1.0 - 1e-17` rounds to 1.0 under `floor` subtraction; clamp the edge.
    if y >= 1.0 {
        0.0
    } else {
        y
    }
}

/// Signed circular difference: the representative of `d` in `[-½, ½)`.
#[inline]
pub fn circ_signed(d: f64) -> f64 {
    let y = wrap_unit(d);
    if y >= 0.5 {
        y - 1.0
    } else {
        y
    }
}

/// Unsigned circular distance between two points of the unit circle.
#[inline]
pub fn circ_dist(a: f64, b: f64) -> f64 {
    circ_signed(a - b).abs()
}

/// The representative of `d` in `[0, 1)`, i.e. the lift `ν(u) = u` applied
/// to a circle displacement measured clockwise (increasing `x`).
#[inline]
pub fn lift_forward(d: f64) -> f64 {
    wrap_unit(d)
}

/// A uniform cell-centered periodic grid on `[0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    cells: usize,
}

impl Grid {
    pub fn new(cells: usize) -> Result<Self> {
        if cells < 2 {
            return Err(Error::Config(format!(
                "grid needs at least 2 cells, got {cells}"
            )));
        }
        Ok(Grid { cells })
    }

    #[inline]
    pub fn cells(&self) -> usize {
        self.cells
    }

    #[inline]
    pub fn dx(&self) -> f64 {
        1.0 / self.cells as f64
    }

    /// Center of cell `k`.
    #[inline]
    pub fn center(&self, k: usize) -> f64 {
        (k as f64 + 0.5) * self.dx()
    }

    /// Index of the cell containing `x` (after wrapping into `[0,1)`).
    #[inline]
    pub fn cell_of(&self, x: f64) -> usize {
        let k = (wrap_unit(x) * self.cells as f64) as usize;
        k.min(self.cells - 1)
    }

    pub fn centers(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.cells).map(move |k| self.center(k))
    }
}

/// `m` non-negative densities sampled at the cell centers of one [`Grid`].
///
/// `values[c][k]` is the density of color `c` in cell `k`; the per-color
/// mass is `dx·Σ_k values[c][k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorField {
    grid: Grid,
    values: Vec<Vec<f64>>,
}

impl ColorField {
    /// An all-zero field with `m` colors.
    pub fn zeros(grid: Grid, m: usize) -> Self {
        ColorField {
            grid,
            values: vec![vec![0.0; grid.cells()]; m],
        }
    }

    /// Builds a field from explicit per-color cell values.
    pub fn from_values(grid: Grid, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("color field needs at least one color".into()));
        }
        for (c, v) in values.iter().enumerate() {
            if v.len() != grid.cells() {
                return Err(Error::Config(format!(
                    "color {c} has {} cells, grid has {}",
                    v.len(),
                    grid.cells()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Domain(format!("color {c} has non-finite values")));
            }
        }
        Ok(ColorField { grid, values })
    }

    /// Samples `f(color, x)` at cell centers.
    pub fn from_fn(grid: Grid, m: usize, f: impl Fn(usize, f64) -> f64) -> Self {
        let values = (0..m)
            .map(|c| grid.centers().map(|x| f(c, x)).collect())
            .collect();
        ColorField { grid, values }
    }

    /// Cell averages of `f(color, ·)` by composite midpoint quadrature with
    /// `sub` points per cell. Exact cell averaging matters for discontinuous
    /// profiles whose coarse- and fine-grid representations must agree.
    pub fn from_fn_averaged(grid: Grid, m: usize, sub: usize, f: impl Fn(usize, f64) -> f64) -> Self {
        let dx = grid.dx();
        let values = (0..m)
            .map(|c| {
                (0..grid.cells())
                    .map(|k| {
                        let a = k as f64 * dx;
                        (0..sub)
                            .map(|j| f(c, a + (j as f64 + 0.5) * dx / sub as f64))
                            .sum::<f64>()
                            / sub as f64
                    })
                    .collect()
            })
            .collect();
        ColorField { grid, values }
    }

    #[inline]
    pub fn grid(&self) -> Grid {
        self.grid
    }

    #[inline]
    pub fn colors(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn values(&self, c: usize) -> &[f64] {
        &self.values[c]
    }

    #[inline]
    pub fn values_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.values[c]
    }

    /// Pointwise total density `ρ = Σ_c ρ_c`.
    pub fn total(&self) -> Vec<f64> {
        let mut t = vec![0.0; self.grid.cells()];
        for v in &self.values {
            for (tk, vk) in t.iter_mut().zip(v) {
                *tk += vk;
            }
        }
        t
    }

    /// Mass of one color: `dx·Σ_k values[c][k]`.
    pub fn mass(&self, c: usize) -> f64 {
        self.values[c].iter().sum::<f64>() * self.grid.dx()
    }

    /// Total mass over all colors.
    pub fn total_mass(&self) -> f64 {
        (0..self.colors()).map(|c| self.mass(c)).sum()
    }

    pub fn min_value(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|v| v.iter().copied())
            .fold(f64::INFINITY, f64::min)
    }

    /// Periodic linear interpolation between cell centers.
    pub fn eval(&self, c: usize, x: f64) -> f64 {
        let k = self.grid.cells();
        let dx = self.grid.dx();
        // Position in units of cells, measured from the first center.
        let s = wrap_unit(x) / dx - 0.5;
        let i0 = s.floor();
        let w = s - i0;
        let i0 = ((i0 as i64).rem_euclid(k as i64)) as usize;
        let i1 = (i0 + 1) % k;
        self.values[c][i0] * (1.0 - w) + self.values[c][i1] * w
    }

    /// Exact restriction to a coarser grid by cell averaging. The coarse
    /// cell count must divide the fine one.
    pub fn restrict(&self, coarse: Grid) -> Result<ColorField> {
        let kf = self.grid.cells();
        let kc = coarse.cells();
        if kf % kc != 0 {
            return Err(Error::Config(format!(
                "cannot restrict K={kf} onto K={kc}: not a divisor"
            )));
        }
        let r = kf / kc;
        let values = self
            .values
            .iter()
            .map(|v| {
                (0..kc)
                    .map(|k| v[k * r..(k + 1) * r].iter().sum::<f64>() / r as f64)
                    .collect()
            })
            .collect();
        Ok(ColorField {
            grid: coarse,
            values,
        })
    }

    /// Per-color `L¹` distance `∫|ρ_c − σ_c|dx` to another field on the same
    /// grid.
    pub fn l1_distance(&self, other: &ColorField) -> Result<Vec<f64>> {
        self.check_same_shape(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y).abs())
                    .sum::<f64>()
                    * self.grid.dx()
            })
            .collect())
    }

    /// Per-color `L∞` distance to another field on the same grid.
    pub fn linf_distance(&self, other: &ColorField) -> Result<Vec<f64>> {
        self.check_same_shape(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max)
            })
            .collect())
    }

    fn check_same_shape(&self, other: &ColorField) -> Result<()> {
        if self.grid != other.grid || self.colors() != other.colors() {
            return Err(Error::Domain(format!(
                "field shape mismatch: K={} m={} vs K={} m={}",
                self.grid.cells(),
                self.colors(),
                other.grid.cells(),
                other.colors()
            )));
        }
        Ok(())
    }

    /// Verifies `values ≥ -tol` everywhere.
    pub fn check_nonnegative(&self, tol: f64) -> Result<()> {
        let min = self.min_value();
        if min < -tol {
            return Err(Error::Domain(format!(
                "negative density {min:.3e} beyond tolerance {tol:.1e}"
            )));
        }
        Ok(())
    }

    /// Spreads `mass` uniformly over the circular arc of length `width`
    /// centered at `x`, adding the overlapped fraction to each cell value
    /// (box-kernel deposition).
    pub fn deposit(&mut self, c: usize, x: f64, width: f64, mass: f64) {
        let k = self.grid.cells();
        let dx = self.grid.dx();
        debug_assert!(width > 0.0 && width <= 1.0);
        let lo = x - 0.5 * width;
        let hi = x + 0.5 * width;
        let density = mass / (width * dx);
        let first = (lo / dx).floor();
        let mut cell_lo = first * dx;
        let mut idx = (first as i64).rem_euclid(k as i64) as usize;
        while cell_lo < hi {
            let overlap = (cell_lo + dx).min(hi) - cell_lo.max(lo);
            if overlap > 0.0 {
                self.values[c][idx] += density * overlap;
            }
            cell_lo += dx;
            idx += 1;
            if idx == k {
                idx = 0;
            }
        }
    }

    /// Adds `scale · other` pointwise (same shape required).
    pub fn accumulate(&mut self, other: &ColorField, scale: f64) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
        Ok(())
    }
}

/// A time-indexed sequence of [`ColorField`] frames on one common grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldTrajectory {
    times: Vec<f64>,
    frames: Vec<ColorField>,
}

impl FieldTrajectory {
    pub fn new(times: Vec<f64>, frames: Vec<ColorField>) -> Result<Self> {
        if times.is_empty() || times.len() != frames.len() {
            return Err(Error::Config(format!(
                "trajectory needs matching nonempty times/frames, got {}/{}",
                times.len(),
                frames.len()
            )));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("trajectory times must strictly increase".into()));
        }
        let g = frames[0].grid();
        let m = frames[0].colors();
        if frames.iter().any(|f| f.grid() != g || f.colors() != m) {
            return Err(Error::Config("trajectory frames must share grid and colors".into()));
        }
        Ok(FieldTrajectory { times, frames })
    }

    #[inline]
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    #[inline]
    pub fn frames(&self) -> &[ColorField] {
        &self.frames
    }

    #[inline]
    pub fn frame(&self, i: usize) -> &ColorField {
        &self.frames[i]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.times.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    #[inline]
    pub fn grid(&self) -> Grid {
        self.frames[0].grid()
    }

    #[inline]
    pub fn colors(&self) -> usize {
        self.frames[0].colors()
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Index of the last frame with `times[i] <= t` (clamped to valid range).
    pub fn frame_index_at(&self, t: f64) -> usize {
        match self
            .times
            .binary_search_by(|v| v.partial_cmp(&t).unwrap())
        {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) => i - 1,
        }
    }

    /// Linear time interpolation of color `c` at `(t, x)`; clamps `t` to the
    /// recorded range.
    pub fn eval(&self, c: usize, t: f64, x: f64) -> f64 {
        if self.len() == 1 {
            return self.frames[0].eval(c, x);
        }
        let i = self.frame_index_at(t).min(self.len() - 2);
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        self.frames[i].eval(c, x) * (1.0 - w) + self.frames[i + 1].eval(c, x) * w
    }

    /// Linear time interpolation of whole-cell values of color `c` at `t`,
    /// written into `out`.
    pub fn interp_cells(&self, c: usize, t: f64, out: &mut [f64]) {
        if self.len() == 1 {
            out.copy_from_slice(self.frames[0].values(c));
            return;
        }
        let i = self.frame_index_at(t).min(self.len() - 2);
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        let a = self.frames[i].values(c);
        let b = self.frames[i + 1].values(c);
        for (o, (x, y)) in out.iter_mut().zip(a.iter().zip(b)) {
            *o = x * (1.0 - w) + y * w;
        }
    }

    /// Keeps every `stride`-th frame; `(len−1)` must be divisible by
    /// `stride` so the final frame is retained.
    pub fn subsample(&self, stride: usize) -> Result<FieldTrajectory> {
        if stride == 0 || (self.len() - 1) % stride != 0 {
            return Err(Error::Config(format!(
                "cannot subsample {} frames by stride {stride}",
                self.len()
            )));
        }
        let idx: Vec<usize> = (0..self.len()).step_by(stride).collect();
        FieldTrajectory::new(
            idx.iter().map(|&i| self.times[i]).collect(),
            idx.iter().map(|&i| self.frames[i].clone()).collect(),
        )
    }

    /// Exact cell-average restriction of every frame onto a coarser grid.
    pub fn restrict(&self, coarse: Grid) -> Result<FieldTrajectory> {
        FieldTrajectory::new(
            self.times.clone(),
            self.frames
                .iter()
                .map(|f| f.restrict(coarse))
                .collect::<Result<_>>()?,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_and_distance() {
        assert_eq!(wrap_unit(1.25), 0.25);
        assert_eq!(wrap_unit(-0.25), 0.75);
        assert_eq!(wrap_unit(3.0), 0.0);
        assert!((circ_dist(0.1, 0.9) - 0.2).abs() < 1e-15);
        assert!((circ_signed(0.9 - 0.1) - (-0.2)).abs() < 1e-15);
        // The lift keeps forward displacements in [0,1).
        assert!((lift_forward(0.7 - 0.2) - 0.5).abs() < 1e-15);
        assert!((lift_forward(0.2 - 0.7) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn wrap_edge_stays_in_domain() {
        let x = 1.0 - 1e-17; // rounds to 1.0 in f64 subtraction
        let w = wrap_unit(x);
        assert!((0.0..1.0).contains(&w));
        assert!((0.0..1.0).contains(&wrap_unit(-1e-20)));
    }

    #[test]
    fn grid_cells_and_centers() {
        let g = Grid::new(4).unwrap();
        assert_eq!(g.dx(), 0.25);
        assert_eq!(g.center(0), 0.125);
        assert_eq!(g.cell_of(0.999_999_9), 3);
        assert_eq!(g.cell_of(1.0), 0);
        assert!(Grid::new(1).is_err());
    }

    #[test]
    fn mass_and_total() {
        let g = Grid::new(8).unwrap();
        let f = ColorField::from_fn(g, 2, |c, _x| if c == 0 { 1.5 } else { 0.5 });
        assert!((f.mass(0) - 1.5).abs() < 1e-15);
        assert!((f.mass(1) - 0.5).abs() < 1e-15);
        assert!((f.total_mass() - 2.0).abs() < 1e-15);
        assert!(f.total().iter().all(|&t| (t - 2.0).abs() < 1e-15));
    }

    #[test]
    fn deposit_box_kernel_conserves_mass() {
        let g = Grid::new(16).unwrap();
        let mut f = ColorField::zeros(g, 1);
        // Deposit across the wrap boundary.
        f.deposit(0, 0.99, 0.05, 0.25);
        f.deposit(0, 0.5, 0.3, 0.75);
        assert!((f.mass(0) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn deposit_at_center_with_cell_width_fills_one_cell() {
        let g = Grid::new(4).unwrap();
        let mut f = ColorField::zeros(g, 1);
        f.deposit(0, g.center(2), g.dx(), 0.25);
        let v = f.values(0);
        assert!((v[2] - 1.0).abs() < 1e-14);
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 0.0);
        assert_eq!(v[3], 0.0);
    }

    #[test]
    fn restriction_averages_cells() {
        let fine = Grid::new(8).unwrap();
        let coarse = Grid::new(4).unwrap();
        let f = ColorField::from_values(
            fine,
            vec![(0..8).map(|k| k as f64).collect::<Vec<_>>()],
        )
        .unwrap();
        let r = f.restrict(coarse).unwrap();
        assert_eq!(r.values(0), &[0.5, 2.5, 4.5, 6.5]);
        assert!((r.mass(0) - f.mass(0)).abs() < 1e-14);
        assert!(f.restrict(Grid::new(3).unwrap()).is_err());
    }

    #[test]
    fn linear_interpolation_is_exact_for_linear_data() {
        let g = Grid::new(64).unwrap();
        // Periodic tent: exactly piecewise linear between centers.
        let f = ColorField::from_fn(g, 1, |_, x| 1.0 - 2.0 * (x - 0.5).abs());
        for &x in &[0.2, 0.31, 0.6004, 0.75] {
            let exact = 1.0 - 2.0 * (x - 0.5_f64).abs();
            assert!((f.eval(0, x) - exact).abs() < 1e-12, "x={x}");
        }
    }

    #[test]
    fn trajectory_validation_and_interp() {
        let g = Grid::new(4).unwrap();
        let f0 = ColorField::from_fn(g, 1, |_, _| 0.0);
        let f1 = ColorField::from_fn(g, 1, |_, _| 1.0);
        let tr = FieldTrajectory::new(vec![0.0, 1.0], vec![f0.clone(), f1.clone()]).unwrap();
        assert!((tr.eval(0, 0.25, 0.3) - 0.25).abs() < 1e-15);
        assert_eq!(tr.frame_index_at(-1.0), 0);
        assert_eq!(tr.frame_index_at(2.0), 1);
        assert!(FieldTrajectory::new(vec![0.0, 0.0], vec![f0.clone(), f1.clone()]).is_err());
        assert!(FieldTrajectory::new(vec![0.0], vec![]).is_err());
    }

    #[test]
    fn subsample_keeps_endpoints() {
        let g = Grid::new(4).unwrap();
        let frames: Vec<_> = (0..5)
            .map(|i| ColorField::from_fn(g, 1, move |_, _| i as f64))
            .collect();
        let times = vec![0.0, 0.1, 0.2, 0.3, 0.4];
        let tr = FieldTrajectory::new(times, frames).unwrap();
        let sub = tr.subsample(2).unwrap();
        assert_eq!(sub.len(), 3);
        assert_eq!(sub.times(), &[0.0, 0.2, 0.4]);
        assert!(tr.subsample(3).is_err());
    }
}
