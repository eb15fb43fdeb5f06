use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::grid::{GridField, Shape, SpaceTimeGrid};

fn one() -> f64 {
    1.0
}

/// Closed-form coefficient families. Each is a scalar profile `g` applied
/// coordinatewise: a drift evaluates to `(g(x_1), ..., g(x_d))`, a diffusion
/// to `diag(g(x_1), ..., g(x_d))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoefficientFamily {
    /// `g(x) = value`.
    Constant { value: f64 },
    /// `g(x) = offset + slope x`.
    Affine {
        #[serde(default)]
        offset: f64,
        slope: f64,
    },
    /// `g(x) = base + amplitude sin(x) exp(-x^2)`.
    SinExpBump { base: f64, amplitude: f64 },
    /// `g(x) = scale |x|^{-exponent} sign(x)` for `0 < |x| <= radius`, zero elsewhere.
    CappedPower {
        exponent: f64,
        radius: f64,
        #[serde(default = "one")]
        scale: f64,
    },
}

impl CoefficientFamily {
    pub const NAMES: [&'static str; 4] = ["constant", "affine", "sin_exp_bump", "capped_power"];

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LabError::InvalidField(msg));
        match *self {
            Self::Constant { value } if !value.is_finite() => bad(format!("constant value {value}")),
            Self::Affine { offset, slope } if !(offset.is_finite() && slope.is_finite()) => {
                bad("affine parameters must be finite".into())
            }
            Self::SinExpBump { base, amplitude } if !(base.is_finite() && amplitude.is_finite()) => {
                bad("sin_exp_bump parameters must be finite".into())
            }
            Self::CappedPower {
                exponent,
                radius,
                scale,
            } => {
                if !(exponent.is_finite() && exponent >= 0.0) {
                    return bad(format!("exponent must be nonnegative, got {exponent}"));
                }
                if !(radius.is_finite() && radius > 0.0) {
                    return bad(format!("radius must be positive, got {radius}"));
                }
                if !scale.is_finite() {
                    return bad("scale must be finite".into());
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Self::Constant { value } => value,
            Self::Affine { offset, slope } => offset + slope * x,
            Self::SinExpBump { base, amplitude } => base + amplitude * x.sin() * (-x * x).exp(),
            Self::CappedPower {
                exponent,
                radius,
                scale,
            } => {
                let r = x.abs();
                if r == 0.0 || r > radius {
                    0.0
                } else {
                    scale * r.powf(-exponent) * x.signum()
                }
            }
        }
    }

    /// True when the profile is unbounded near the origin.
    pub fn is_singular(&self) -> bool {
        matches!(*self, Self::CappedPower { exponent, scale, .. } if exponent > 0.0 && scale != 0.0)
    }
}

/// A coefficient given either in closed form or as a sampled grid field.
#[derive(Debug, Clone, PartialEq)]
pub enum Coefficient {
    Closed(CoefficientFamily),
    Grid(GridField),
}

/// Drift and diffusion of `dX = b dt + sigma dW` on the box `[-L, L]^d`, with
/// `m = d` noise dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct SdeCoefficients {
    drift: Coefficient,
    diffusion: Coefficient,
    drift_cap: Option<f64>,
    dim: usize,
    half_width: f64,
}

impl SdeCoefficients {
    pub fn new(drift: Coefficient, diffusion: Coefficient, dim: usize, half_width: f64) -> Result<Self> {
        if dim == 0 || !(half_width.is_finite() && half_width > 0.0) {
            return Err(LabError::Precondition(format!(
                "invalid dimension {dim} or half width {half_width}"
            )));
        }
        for (name, c, shape) in [
            ("drift", &drift, Shape::vector(dim)),
            ("diffusion", &diffusion, Shape::matrix(dim, dim)),
        ] {
            match c {
                Coefficient::Closed(f) => f.validate()?,
                Coefficient::Grid(g) => {
                    if g.shape() != shape || g.grid().dim() != dim {
                        return Err(LabError::ShapeMismatch(format!(
                            "{name} grid field has shape {:?}, expected {shape:?}",
                            g.shape()
                        )));
                    }
                    if g.grid().half_width() < half_width {
                        return Err(LabError::Precondition(format!(
                            "{name} grid covers [-{}, {}] but the box is [-{half_width}, {half_width}]",
                            g.grid().half_width(),
                            g.grid().half_width()
                        )));
                    }
                }
            }
        }
        Ok(Self {
            drift,
            diffusion,
            drift_cap: None,
            dim,
            half_width,
        })
    }

    pub fn closed(drift: CoefficientFamily, diffusion: CoefficientFamily, dim: usize, half_width: f64) -> Result<Self> {
        Self::new(Coefficient::Closed(drift), Coefficient::Closed(diffusion), dim, half_width)
    }

    /// Truncates the drift so that `|b| <= cap` everywhere.
    pub fn with_drift_cap(mut self, cap: f64) -> Result<Self> {
        if !(cap.is_finite() && cap > 0.0) {
            return Err(LabError::Precondition(format!("drift cap must be positive, got {cap}")));
        }
        self.drift_cap = Some(cap);
        Ok(self)
    }

    pub fn without_drift_cap(mut self) -> Self {
        self.drift_cap = None;
        self
    }

    pub fn with_drift(&self, drift: Coefficient) -> Result<Self> {
        let mut out = Self::new(drift, self.diffusion.clone(), self.dim, self.half_width)?;
        out.drift_cap = self.drift_cap;
        Ok(out)
    }

    pub fn drift(&self) -> &Coefficient {
        &self.drift
    }

    pub fn diffusion(&self) -> &Coefficient {
        &self.diffusion
    }

    pub fn drift_cap(&self) -> Option<f64> {
        self.drift_cap
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn in_box(&self, x: &[f64]) -> bool {
        x.iter().all(|v| v.abs() <= self.half_width)
    }

    /// `b(t, x)` after truncation, written to `out` (length `d`).
    pub fn drift_at(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match &self.drift {
            Coefficient::Closed(f) => {
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = f.eval(*xi);
                }
            }
            Coefficient::Grid(g) => g.interpolate(t, x, out),
        }
        if let Some(cap) = self.drift_cap {
            apply_cap(out, cap);
        }
    }

    /// `sigma(t, x)` column-major, written to `out` (length `d * d`).
    pub fn diffusion_at(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match &self.diffusion {
            Coefficient::Closed(f) => {
                out.fill(0.0);
                for (i, xi) in x.iter().enumerate() {
                    out[i + self.dim * i] = f.eval(*xi);
                }
            }
            Coefficient::Grid(g) => g.interpolate(t, x, out),
        }
    }

    /// Samples the drift on a grid (no truncation applied).
    pub fn drift_field(&self, grid: &SpaceTimeGrid) -> Result<GridField> {
        match &self.drift {
            Coefficient::Closed(f) => {
                GridField::from_fn(grid, Shape::vector(self.dim), |_, x, out| {
                    for (o, xi) in out.iter_mut().zip(x) {
                        *o = f.eval(*xi);
                    }
                })
            }
            Coefficient::Grid(g) => Ok(g.clone()),
        }
    }

    /// Samples the diffusion on a grid.
    pub fn diffusion_field(&self, grid: &SpaceTimeGrid) -> Result<GridField> {
        let d = self.dim;
        match &self.diffusion {
            Coefficient::Closed(f) => GridField::from_fn(grid, Shape::matrix(d, d), |_, x, out| {
                out.fill(0.0);
                for (i, xi) in x.iter().enumerate() {
                    out[i + d * i] = f.eval(*xi);
                }
            }),
            Coefficient::Grid(g) => Ok(g.clone()),
        }
    }
}

/// Rescales `v` so that its Euclidean norm is at most `cap`.
pub fn apply_cap(v: &mut [f64], cap: f64) {
    if v.len() == 1 {
        v[0] = v[0].clamp(-cap, cap);
        return;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > cap {
        let s = cap / norm;
        v.iter_mut().for_each(|x| *x *= s);
    }
}

/// A real-valued function of `(t, x)`, used as an integrand along paths.
pub trait ScalarFn: Sync {
    fn eval(&self, t: f64, x: &[f64]) -> f64;
}

impl ScalarFn for GridField {
    fn eval(&self, t: f64, x: &[f64]) -> f64 {
        self.interpolate_scalar(t, x)
    }
}

impl<F: Fn(f64, &[f64]) -> f64 + Sync> ScalarFn for F {
    fn eval(&self, t: f64, x: &[f64]) -> f64 {
        self(t, x)
    }
}
