use serde::{Deserialize, Serialize};

use super::{gradient, grid_derivative, hessian, Axis, GridField, SpaceTimeGrid};
use crate::error::{LabError, Result};

/// Integrability exponents `(p, q)`: `p` in space, `q` in time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixedNormExponents {
    p: f64,
    q: f64,
}

impl MixedNormExponents {
    pub fn new(p: f64, q: f64) -> Result<Self> {
        if !(p.is_finite() && p > 1.0) {
            return Err(LabError::InvalidExponents(format!("p must exceed 1, got {p}")));
        }
        if !(q.is_finite() && q > 1.0) {
            return Err(LabError::InvalidExponents(format!("q must exceed 1, got {q}")));
        }
        Ok(Self { p, q })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    /// `d/p + 2/q`.
    pub fn scaling_index(&self, dim: usize) -> f64 {
        dim as f64 / self.p + 2.0 / self.q
    }
}

fn trapezoid_weight(index: usize, count: usize, spacing: f64) -> f64 {
    if index == 0 || index == count - 1 {
        0.5 * spacing
    } else {
        spacing
    }
}

fn spatial_weight(grid: &SpaceTimeGrid, flat: usize) -> f64 {
    let n = grid.num_space_points();
    let h = grid.h();
    let mut w = 1.0;
    let mut rest = flat;
    for _ in 0..grid.dim() {
        w *= trapezoid_weight(rest % n, n, h);
        rest /= n;
    }
    w
}

/// Composite-trapezoid approximation of the mixed Lebesgue norm
/// `( int_0^T ( int |f|^p dx )^{q/p} dt )^{1/q}`, using the Hilbert-Schmidt
/// norm pointwise.
pub fn mixed_norm(f: &GridField, e: &MixedNormExponents) -> Result<f64> {
    let grid = f.grid();
    let slice = grid.slice_len();
    let weights: Vec<f64> = (0..slice).map(|s| spatial_weight(grid, s)).collect();
    let nt = grid.num_times();
    let mut total = 0.0;
    for ti in 0..nt {
        let mut inner = 0.0;
        for (si, w) in weights.iter().enumerate() {
            let v = f.pointwise_norm(ti * slice + si);
            if v != 0.0 {
                inner += w * v.powf(e.p());
            }
        }
        let slice_norm = inner.powf(e.q() / e.p());
        total += trapezoid_weight(ti, nt, grid.dt()) * slice_norm;
    }
    let norm = total.powf(1.0 / e.q());
    if !norm.is_finite() {
        return Err(LabError::InvalidField(format!(
            "mixed norm overflowed (p = {}, q = {})",
            e.p(),
            e.q()
        )));
    }
    Ok(norm)
}

/// `||f|| + ||d_t f|| + ||d_x f|| + ||d_x^2 f||` in the mixed norm.
pub fn sobolev_norm(f: &GridField, e: &MixedNormExponents) -> Result<f64> {
    let dt = grid_derivative(f, Axis::Time, 1)?;
    let dx = gradient(f)?;
    let dxx = hessian(f)?;
    Ok(mixed_norm(f, e)? + mixed_norm(&dt, e)? + mixed_norm(&dx, e)? + mixed_norm(&dxx, e)?)
}

/// Maximum of the pointwise Hilbert-Schmidt norm over all nodes.
pub fn sup_norm(f: &GridField) -> f64 {
    (0..f.grid().node_count())
        .map(|node| f.pointwise_norm(node))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentCheck {
    pub satisfied: bool,
    /// `bound - (d/p + 2/q)`.
    pub margin: f64,
}

/// Checks `d/p + 2/q < bound`.
pub fn check_exponent_condition(dim: usize, e: &MixedNormExponents, bound: f64) -> ExponentCheck {
    let margin = bound - e.scaling_index(dim);
    ExponentCheck {
        satisfied: margin > 0.0,
        margin,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Shape;

    fn unit_grid(horizon: f64) -> SpaceTimeGrid {
        SpaceTimeGrid::new(horizon, 10, 1, 0.5, 11).unwrap()
    }

    #[test]
    fn constant_on_unit_measure() {
        let g = unit_grid(1.0);
        let f = GridField::scalar_from_fn(&g, |_, _| 1.0).unwrap();
        let e = MixedNormExponents::new(2.0, 2.0).unwrap();
        assert!((mixed_norm(&f, &e).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn constant_on_longer_horizon() {
        let g = unit_grid(2.0);
        let f = GridField::scalar_from_fn(&g, |_, _| 1.0).unwrap();
        let e = MixedNormExponents::new(2.0, 4.0).unwrap();
        let expected = 2f64.powf(0.25);
        assert!((mixed_norm(&f, &e).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn homogeneity_with_negative_factor() {
        let g = unit_grid(1.0);
        let f = GridField::scalar_from_fn(&g, |t, x| (x[0] * 3.0).sin() + t).unwrap();
        let e = MixedNormExponents::new(3.0, 5.0).unwrap();
        let a = mixed_norm(&f, &e).unwrap();
        let b = mixed_norm(&f.scaled(-3.0).unwrap(), &e).unwrap();
        assert!((b - 3.0 * a).abs() <= 1e-12 * b);
    }

    #[test]
    fn vector_fields_use_hilbert_schmidt_norm() {
        let g = unit_grid(1.0);
        let f = GridField::from_fn(&g, Shape::vector(2), |_, _, out| {
            out[0] = 3.0;
            out[1] = 4.0;
        })
        .unwrap();
        let e = MixedNormExponents::new(2.0, 2.0).unwrap();
        assert!((mixed_norm(&f, &e).unwrap() - 5.0).abs() < 1e-13);
        assert_eq!(sup_norm(&f), 5.0);
    }

    #[test]
    fn sobolev_norm_of_zero_and_constant() {
        let g = unit_grid(1.0);
        let e = MixedNormExponents::new(2.0, 2.0).unwrap();
        assert_eq!(sobolev_norm(&GridField::zeros(&g, Shape::Scalar), &e).unwrap(), 0.0);
        let one = GridField::scalar_from_fn(&g, |_, _| 1.0).unwrap();
        assert!((sobolev_norm(&one, &e).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sobolev_norm_of_time_coordinate() {
        // Closed form: ||t|| = (int_0^1 t^2 dt)^{1/2} = 1/sqrt(3), ||d_t t|| = 1.
        let g = SpaceTimeGrid::new(1.0, 400, 1, 0.5, 11).unwrap();
        let f = GridField::scalar_from_fn(&g, |t, _| t).unwrap();
        let e = MixedNormExponents::new(2.0, 2.0).unwrap();
        let expected = 1.0 / 3f64.sqrt() + 1.0;
        assert!((sobolev_norm(&f, &e).unwrap() - expected).abs() < 1e-5);
    }

    #[test]
    fn sup_norm_examples() {
        let g = SpaceTimeGrid::new(1.0, 4, 1, 2.0, 41).unwrap();
        let c = GridField::scalar_from_fn(&g, |_, _| -2.5).unwrap();
        assert_eq!(sup_norm(&c), 2.5);
        let x = GridField::scalar_from_fn(&g, |_, x| x[0]).unwrap();
        assert_eq!(sup_norm(&x), 2.0);
        let g = SpaceTimeGrid::new(1.0, 4, 1, std::f64::consts::PI, 101).unwrap();
        let s = GridField::scalar_from_fn(&g, |_, x| x[0].sin()).unwrap();
        assert!((sup_norm(&s) - 1.0).abs() <= g.h() * g.h());
    }

    #[test]
    fn exponent_condition_examples() {
        let check = |p, q| check_exponent_condition(1, &MixedNormExponents::new(p, q).unwrap(), 0.5);
        let c = check(8.0, 16.0);
        assert!(c.satisfied && (c.margin - 0.25).abs() < 1e-15);
        let c = check(4.0, 4.0);
        assert!(!c.satisfied && (c.margin + 0.25).abs() < 1e-15);
        let c = check(8.0, 8.0);
        assert!(c.satisfied && (c.margin - 0.125).abs() < 1e-15);
    }

    #[test]
    fn exponents_must_exceed_one() {
        let err = MixedNormExponents::new(0.5, 2.0).unwrap_err();
        assert!(err.to_string().contains("p must exceed 1"));
        assert!(MixedNormExponents::new(2.0, 1.0).is_err());
    }
}
