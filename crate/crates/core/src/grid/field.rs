use serde::{Deserialize, Serialize};

use super::SpaceTimeGrid;
use crate::error::{LabError, Result};

/// Pointwise value type of a field. Matrix entries are stored column-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Scalar,
    Vector { len: usize },
    Matrix { rows: usize, cols: usize },
    /// Third-order tensor, e.g. the Hessian of a vector field.
    Tensor3 { a: usize, b: usize, c: usize },
}

impl Shape {
    pub fn vector(len: usize) -> Self {
        Shape::Vector { len }
    }

    pub fn matrix(rows: usize, cols: usize) -> Self {
        Shape::Matrix { rows, cols }
    }

    pub fn components(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector { len } => len,
            Shape::Matrix { rows, cols } => rows * cols,
            Shape::Tensor3 { a, b, c } => a * b * c,
        }
    }

    /// Shape obtained by appending one index of extent `d` (a spatial derivative).
    pub fn with_trailing(&self, d: usize) -> Result<Shape> {
        Ok(match *self {
            Shape::Scalar => Shape::Vector { len: d },
            Shape::Vector { len } => Shape::Matrix { rows: len, cols: d },
            Shape::Matrix { rows, cols } => Shape::Tensor3 {
                a: rows,
                b: cols,
                c: d,
            },
            Shape::Tensor3 { .. } => {
                return Err(LabError::ShapeMismatch(
                    "cannot differentiate a third-order tensor field".into(),
                ))
            }
        })
    }

    /// Column-major component index of matrix entry `(i, j)`.
    pub fn matrix_index(rows: usize, i: usize, j: usize) -> usize {
        i + rows * j
    }
}

/// Samples of a scalar, vector, matrix or tensor function on every grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    grid: SpaceTimeGrid,
    shape: Shape,
    samples: Vec<f64>,
}

impl GridField {
    pub fn new(grid: SpaceTimeGrid, shape: Shape, samples: Vec<f64>) -> Result<Self> {
        let expected = grid.node_count() * shape.components();
        if samples.len() != expected {
            return Err(LabError::InvalidField(format!(
                "expected {expected} samples, got {}",
                samples.len()
            )));
        }
        if let Some(pos) = samples.iter().position(|v| !v.is_finite()) {
            return Err(LabError::InvalidField(format!(
                "non-finite sample {} at position {pos}",
                samples[pos]
            )));
        }
        Ok(Self {
            grid,
            shape,
            samples,
        })
    }

    pub fn zeros(grid: &SpaceTimeGrid, shape: Shape) -> Self {
        let n = grid.node_count() * shape.components();
        Self {
            grid: grid.clone(),
            shape,
            samples: vec![0.0; n],
        }
    }

    /// Samples `f(t, x, out)` at every node.
    pub fn from_fn<F>(grid: &SpaceTimeGrid, shape: Shape, mut f: F) -> Result<Self>
    where
        F: FnMut(f64, &[f64], &mut [f64]),
    {
        let comps = shape.components();
        let nodes = grid.node_count();
        let slice = grid.slice_len();
        let mut samples = vec![0.0; nodes * comps];
        let mut x = vec![0.0; grid.dim()];
        let mut val = vec![0.0; comps];
        for ti in 0..grid.num_times() {
            let t = grid.time(ti);
            for si in 0..slice {
                grid.spatial_point(si, &mut x);
                val.iter_mut().for_each(|v| *v = 0.0);
                f(t, &x, &mut val);
                let node = ti * slice + si;
                for (c, v) in val.iter().enumerate() {
                    samples[c * nodes + node] = *v;
                }
            }
        }
        Self::new(grid.clone(), shape, samples)
    }

    pub fn scalar_from_fn<F>(grid: &SpaceTimeGrid, f: F) -> Result<Self>
    where
        F: Fn(f64, &[f64]) -> f64,
    {
        Self::from_fn(grid, Shape::Scalar, |t, x, out| out[0] = f(t, x))
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        &self.grid
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn components(&self) -> usize {
        self.shape.components()
    }

    pub fn component(&self, c: usize) -> &[f64] {
        let n = self.grid.node_count();
        &self.samples[c * n..(c + 1) * n]
    }

    pub(crate) fn component_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.grid.node_count();
        &mut self.samples[c * n..(c + 1) * n]
    }

    pub fn value_at(&self, node: usize, out: &mut [f64]) {
        let n = self.grid.node_count();
        for (c, slot) in out.iter_mut().enumerate().take(self.components()) {
            *slot = self.samples[c * n + node];
        }
    }

    /// Hilbert-Schmidt (Frobenius) norm of the value at a node.
    pub fn pointwise_norm(&self, node: usize) -> f64 {
        let n = self.grid.node_count();
        if self.components() == 1 {
            return self.samples[node].abs();
        }
        (0..self.components())
            .map(|c| self.samples[c * n + node].powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn check_compatible(&self, other: &GridField) -> Result<()> {
        if self.grid != other.grid {
            return Err(LabError::ShapeMismatch("fields live on different grids".into()));
        }
        if self.shape != other.shape {
            return Err(LabError::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> Result<GridField> {
        let samples = self.samples.iter().map(|v| v * factor).collect();
        GridField::new(self.grid.clone(), self.shape, samples)
    }

    /// `alpha * self + beta * other`.
    pub fn linear_combination(&self, alpha: f64, other: &GridField, beta: f64) -> Result<GridField> {
        self.check_compatible(other)?;
        let samples = self
            .samples
            .iter()
            .zip(&other.samples)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        GridField::new(self.grid.clone(), self.shape, samples)
    }

    pub fn add(&self, other: &GridField) -> Result<GridField> {
        self.check_compatible(other)?;
        let samples = self
            .samples
            .iter()
            .zip(&other.samples)
            .map(|(a, b)| a + b)
            .collect();
        GridField::new(self.grid.clone(), self.shape, samples)
    }

    pub fn sub(&self, other: &GridField) -> Result<GridField> {
        self.linear_combination(1.0, other, -1.0)
    }

    pub(crate) fn add_assign(&mut self, other: &GridField) -> Result<()> {
        self.check_compatible(other)?;
        self.samples
            .iter_mut()
            .zip(&other.samples)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Applies a pointwise map `f(value, out)` producing a field of shape `shape`.
    pub fn map_pointwise<F>(&self, shape: Shape, mut f: F) -> Result<GridField>
    where
        F: FnMut(&[f64], &mut [f64]),
    {
        let nodes = self.grid.node_count();
        let mut out = vec![0.0; nodes * shape.components()];
        let mut val = vec![0.0; self.components()];
        let mut res = vec![0.0; shape.components()];
        for node in 0..nodes {
            self.value_at(node, &mut val);
            f(&val, &mut res);
            for (c, r) in res.iter().enumerate() {
                out[c * nodes + node] = *r;
            }
        }
        GridField::new(self.grid.clone(), shape, out)
    }

    /// Resamples onto `[0, horizon]` with the same number of time steps,
    /// linear interpolation in time.
    pub fn restrict_horizon(&self, horizon: f64) -> Result<GridField> {
        if horizon > self.grid.horizon() * (1.0 + 1e-12) {
            return Err(LabError::Precondition(format!(
                "cannot extend a field from horizon {} to {horizon}",
                self.grid.horizon()
            )));
        }
        let target = self.grid.with_horizon(horizon)?;
        if target == self.grid {
            return Ok(self.clone());
        }
        let slice = self.grid.slice_len();
        let nodes_src = self.grid.node_count();
        let nodes_dst = target.node_count();
        let mut out = vec![0.0; nodes_dst * self.components()];
        for ti in 0..target.num_times() {
            let (i0, w) = self.grid.locate_time(target.time(ti));
            for c in 0..self.components() {
                let src = &self.samples[c * nodes_src..(c + 1) * nodes_src];
                for si in 0..slice {
                    let lo = src[i0 * slice + si];
                    let hi = src[(i0 + 1) * slice + si];
                    out[c * nodes_dst + ti * slice + si] = lo + w * (hi - lo);
                }
            }
        }
        GridField::new(target, self.shape, out)
    }

    /// Multilinear interpolation in space and linear interpolation in time.
    /// Points outside the box or horizon are clamped onto it.
    pub fn interpolate(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let g = &self.grid;
        let nodes = g.node_count();
        let slice = g.slice_len();
        let (ti, wt) = g.locate_time(t);
        if g.dim() == 1 {
            let (j, wx) = g.locate_space(x[0]);
            let n0 = ti * slice + j;
            let n1 = n0 + slice;
            for (c, slot) in out.iter_mut().enumerate().take(self.components()) {
                let s = &self.samples[c * nodes..];
                let a = s[n0] + wx * (s[n0 + 1] - s[n0]);
                let b = s[n1] + wx * (s[n1 + 1] - s[n1]);
                *slot = a + wt * (b - a);
            }
            return;
        }
        let d = g.dim();
        let mut base = 0usize;
        let mut weights = [0.0f64; 8];
        let mut idx = [0usize; 8];
        assert!(d <= 8, "interpolation supports at most 8 spatial dimensions");
        for axis in 0..d {
            let (j, w) = g.locate_space(x[axis]);
            base += j * g.stride(axis);
            idx[axis] = g.stride(axis);
            weights[axis] = w;
        }
        for slot in out.iter_mut().take(self.components()) {
            *slot = 0.0;
        }
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut offset = base;
            for axis in 0..d {
                if corner >> axis & 1 == 1 {
                    w *= weights[axis];
                    offset += idx[axis];
                } else {
                    w *= 1.0 - weights[axis];
                }
            }
            if w == 0.0 {
                continue;
            }
            for (c, slot) in out.iter_mut().enumerate().take(self.components()) {
                let s = &self.samples[c * nodes..];
                let a = s[ti * slice + offset];
                let b = s[(ti + 1) * slice + offset];
                *slot += w * (a + wt * (b - a));
            }
        }
    }

    /// Convenience for scalar fields.
    pub fn interpolate_scalar(&self, t: f64, x: &[f64]) -> f64 {
        let mut v = [0.0];
        self.interpolate(t, x, &mut v);
        v[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid1() -> SpaceTimeGrid {
        SpaceTimeGrid::new(1.0, 4, 1, 1.0, 5).unwrap()
    }

    #[test]
    fn sample_count_and_finiteness_are_enforced() {
        let g = grid1();
        assert!(GridField::new(g.clone(), Shape::Scalar, vec![0.0; 3]).is_err());
        let mut v = vec![0.0; g.node_count()];
        v[7] = f64::NAN;
        assert!(matches!(
            GridField::new(g.clone(), Shape::Scalar, v),
            Err(LabError::InvalidField(_))
        ));
        assert!(GridField::new(g.clone(), Shape::vector(2), vec![1.0; 2 * g.node_count()]).is_ok());
    }

    #[test]
    fn interpolation_reproduces_bilinear_functions() {
        let g = SpaceTimeGrid::new(1.0, 8, 1, 2.0, 9).unwrap();
        let f = GridField::scalar_from_fn(&g, |t, x| 3.0 * t + 2.0 * x[0] - 1.0 + t * x[0]).unwrap();
        for &(t, x) in &[(0.13, -1.77), (0.5, 0.0), (0.999, 1.3), (0.0, -2.0)] {
            let v = f.interpolate_scalar(t, &[x]);
            let exact = 3.0 * t + 2.0 * x - 1.0 + t * x;
            assert!((v - exact).abs() < 1e-12, "{v} vs {exact}");
        }
    }

    #[test]
    fn interpolation_in_two_dimensions() {
        let g = SpaceTimeGrid::new(1.0, 2, 2, 1.0, 5).unwrap();
        let f = GridField::scalar_from_fn(&g, |t, x| 1.0 + x[0] - 2.0 * x[1] + x[0] * x[1] + t).unwrap();
        let v = f.interpolate_scalar(0.3, &[0.1, -0.7]);
        let exact = 1.0 + 0.1 + 1.4 - 0.07 + 0.3;
        assert!((v - exact).abs() < 1e-12);
    }

    #[test]
    fn restrict_horizon_is_exact_for_time_linear_fields() {
        let g = SpaceTimeGrid::new(1.0, 10, 1, 1.0, 5).unwrap();
        let f = GridField::scalar_from_fn(&g, |t, x| 2.0 * t + x[0]).unwrap();
        let r = f.restrict_horizon(0.37).unwrap();
        let exact = GridField::scalar_from_fn(r.grid(), |t, x| 2.0 * t + x[0]).unwrap();
        for (a, b) in r.samples().iter().zip(exact.samples()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(f.restrict_horizon(2.0).is_err());
    }

    #[test]
    fn matrix_entries_are_column_major() {
        assert_eq!(Shape::matrix_index(2, 1, 0), 1);
        assert_eq!(Shape::matrix_index(2, 0, 1), 2);
        assert_eq!(Shape::matrix(2, 3).components(), 6);
        assert_eq!(Shape::Scalar.with_trailing(2).unwrap(), Shape::vector(2));
        assert_eq!(Shape::vector(2).with_trailing(2).unwrap(), Shape::matrix(2, 2));
    }
}
