//! Space-time grids, sampled fields and the mixed-norm calculus.
//!
//! A [`SpaceTimeGrid`] discretizes `[0, T] x [-L, L]^d` with `num_time_steps + 1`
//! time levels and `num_space_points` uniformly spaced nodes per axis. A
//! [`GridField`] stores one block of samples per component; inside a block the
//! time index varies slowest and spatial axis 0 fastest.

mod derivative;
mod field;
pub mod io;
mod norms;

pub use derivative::{gradient, grid_derivative, hessian, Axis};
pub use field::{GridField, Shape};
pub use norms::{
    check_exponent_condition, mixed_norm, sobolev_norm, sup_norm, ExponentCheck,
    MixedNormExponents,
};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Uniform discretization of `[0, horizon] x [-half_width, half_width]^dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeGrid {
    horizon: f64,
    num_time_steps: usize,
    dim: usize,
    half_width: f64,
    num_space_points: usize,
}

impl SpaceTimeGrid {
    pub fn new(
        horizon: f64,
        num_time_steps: usize,
        dim: usize,
        half_width: f64,
        num_space_points: usize,
    ) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(LabError::InvalidGrid(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        if num_time_steps == 0 {
            return Err(LabError::InvalidGrid("num_time_steps must be positive".into()));
        }
        if dim == 0 {
            return Err(LabError::InvalidGrid("dim must be positive".into()));
        }
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(LabError::InvalidGrid(format!(
                "half_width must be positive and finite, got {half_width}"
            )));
        }
        if num_space_points < 2 {
            return Err(LabError::InvalidGrid(
                "num_space_points must be at least 2".into(),
            ));
        }
        let slice = (num_space_points as u128).checked_pow(dim as u32);
        match slice {
            Some(s) if s * (num_time_steps as u128 + 1) < (1u128 << 40) => {}
            _ => {
                return Err(LabError::InvalidGrid(format!(
                    "grid with {num_space_points}^{dim} x {} nodes is too large",
                    num_time_steps + 1
                )))
            }
        }
        Ok(Self {
            horizon,
            num_time_steps,
            dim,
            half_width,
            num_space_points,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn num_time_steps(&self) -> usize {
        self.num_time_steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn num_space_points(&self) -> usize {
        self.num_space_points
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.num_time_steps as f64
    }

    pub fn h(&self) -> f64 {
        2.0 * self.half_width / (self.num_space_points - 1) as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt()
    }

    pub fn coord(&self, j: usize) -> f64 {
        -self.half_width + j as f64 * self.h()
    }

    pub fn num_times(&self) -> usize {
        self.num_time_steps + 1
    }

    /// Number of spatial nodes in one time slice.
    pub fn slice_len(&self) -> usize {
        self.num_space_points.pow(self.dim as u32)
    }

    pub fn node_count(&self) -> usize {
        self.num_times() * self.slice_len()
    }

    /// Flat offset between neighbours along a spatial axis.
    pub fn stride(&self, axis: usize) -> usize {
        self.num_space_points.pow(axis as u32)
    }

    pub fn node(&self, time_index: usize, spatial_index: usize) -> usize {
        time_index * self.slice_len() + spatial_index
    }

    /// Splits a flat spatial index into per-axis indices.
    pub fn spatial_multi_index(&self, mut flat: usize, out: &mut [usize]) {
        let n = self.num_space_points;
        for slot in out.iter_mut().take(self.dim) {
            *slot = flat % n;
            flat /= n;
        }
    }

    pub fn spatial_point(&self, flat: usize, out: &mut [f64]) {
        let n = self.num_space_points;
        let mut rest = flat;
        for slot in out.iter_mut().take(self.dim) {
            *slot = self.coord(rest % n);
            rest /= n;
        }
    }

    /// True when any axis index sits on the box boundary.
    pub fn is_spatial_boundary(&self, flat: usize) -> bool {
        let n = self.num_space_points;
        let mut rest = flat;
        for _ in 0..self.dim {
            let j = rest % n;
            if j == 0 || j == n - 1 {
                return true;
            }
            rest /= n;
        }
        false
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().all(|&v| v.abs() <= self.half_width)
    }

    /// Same spatial grid and number of time steps on a new horizon.
    pub fn with_horizon(&self, horizon: f64) -> Result<Self> {
        Self::new(
            horizon,
            self.num_time_steps,
            self.dim,
            self.half_width,
            self.num_space_points,
        )
    }

    pub fn with_time_steps(&self, num_time_steps: usize) -> Result<Self> {
        Self::new(
            self.horizon,
            num_time_steps,
            self.dim,
            self.half_width,
            self.num_space_points,
        )
    }

    /// Same time discretization and box, different spatial resolution.
    pub fn with_space_points(&self, num_space_points: usize) -> Result<Self> {
        Self::new(
            self.horizon,
            self.num_time_steps,
            self.dim,
            self.half_width,
            num_space_points,
        )
    }

    /// Locates `x` in the spatial lattice: lower index and fractional offset per axis.
    /// Points outside the box are clamped onto it.
    pub(crate) fn locate_space(&self, x: f64) -> (usize, f64) {
        let h = self.h();
        let n = self.num_space_points;
        let s = ((x + self.half_width) / h).clamp(0.0, (n - 1) as f64);
        let j = (s.floor() as usize).min(n - 2);
        (j, s - j as f64)
    }

    pub(crate) fn locate_time(&self, t: f64) -> (usize, f64) {
        let nt = self.num_time_steps;
        let s = (t / self.dt()).clamp(0.0, nt as f64);
        let i = (s.floor() as usize).min(nt - 1);
        (i, s - i as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nodes_are_reproducible_from_parameters() {
        let g = SpaceTimeGrid::new(2.0, 8, 1, 1.5, 7).unwrap();
        assert_eq!(g.dt(), 0.25);
        assert_eq!(g.h(), 0.5);
        assert_eq!(g.time(3), 3.0 * (2.0 / 8.0));
        assert_eq!(g.coord(0), -1.5);
        assert_eq!(g.coord(6), -1.5 + 6.0 * 0.5);
        assert_eq!(g.node_count(), 9 * 7);
    }

    #[test]
    fn rejects_degenerate_parameters() {
        assert!(SpaceTimeGrid::new(0.0, 4, 1, 1.0, 5).is_err());
        assert!(SpaceTimeGrid::new(1.0, 0, 1, 1.0, 5).is_err());
        assert!(SpaceTimeGrid::new(1.0, 4, 0, 1.0, 5).is_err());
        assert!(SpaceTimeGrid::new(1.0, 4, 1, -1.0, 5).is_err());
        assert!(SpaceTimeGrid::new(1.0, 4, 1, 1.0, 1).is_err());
    }

    #[test]
    fn multi_index_and_boundary() {
        let g = SpaceTimeGrid::new(1.0, 2, 2, 1.0, 4).unwrap();
        let mut idx = [0usize; 2];
        g.spatial_multi_index(1 + 4 * 2, &mut idx);
        assert_eq!(idx, [1, 2]);
        assert!(!g.is_spatial_boundary(1 + 4 * 2));
        assert!(g.is_spatial_boundary(3 + 4 * 2));
        assert!(g.is_spatial_boundary(1));
        let mut p = [0.0; 2];
        g.spatial_point(1 + 4 * 2, &mut p);
        assert_eq!(p, [g.coord(1), g.coord(2)]);
    }

    #[test]
    fn locate_clamps_to_box() {
        let g = SpaceTimeGrid::new(1.0, 4, 1, 1.0, 5).unwrap();
        assert_eq!(g.locate_space(-3.0), (0, 0.0));
        assert_eq!(g.locate_space(1.0), (3, 1.0));
        let (j, w) = g.locate_space(0.25);
        assert_eq!(j, 2);
        assert!((w - 0.5).abs() < 1e-15);
        assert_eq!(g.locate_time(1.0), (3, 1.0));
    }
}
