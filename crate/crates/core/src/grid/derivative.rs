use super::{GridField, SpaceTimeGrid};
use crate::error::{LabError, Result};

/// Direction of differentiation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Time,
    Space(usize),
}

struct Line {
    stride: usize,
    count: usize,
    spacing: f64,
}

fn line_geometry(grid: &SpaceTimeGrid, axis: Axis) -> Result<Line> {
    let line = match axis {
        Axis::Time => Line {
            stride: grid.slice_len(),
            count: grid.num_times(),
            spacing: grid.dt(),
        },
        Axis::Space(a) => {
            if a >= grid.dim() {
                return Err(LabError::Precondition(format!(
                    "spatial axis {a} out of range for dimension {}",
                    grid.dim()
                )));
            }
            Line {
                stride: grid.stride(a),
                count: grid.num_space_points(),
                spacing: grid.h(),
            }
        }
    };
    if line.count < 3 {
        return Err(LabError::GridTooCoarse {
            axis: format!("{axis:?}"),
            points: line.count,
            required: 3,
        });
    }
    Ok(line)
}

fn differentiate_component(src: &[f64], dst: &mut [f64], line: &Line, order: u8) {
    let s = line.stride;
    let n = line.count;
    let h = line.spacing;
    for node in 0..src.len() {
        let i = (node / s) % n;
        let f = |k: isize| src[(node as isize + k * s as isize) as usize];
        dst[node] = match order {
            1 => {
                if i == 0 {
                    (-3.0 * f(0) + 4.0 * f(1) - f(2)) / (2.0 * h)
                } else if i == n - 1 {
                    (3.0 * f(0) - 4.0 * f(-1) + f(-2)) / (2.0 * h)
                } else {
                    (f(1) - f(-1)) / (2.0 * h)
                }
            }
            _ => {
                let h2 = h * h;
                if i == 0 {
                    if n >= 4 {
                        (2.0 * f(0) - 5.0 * f(1) + 4.0 * f(2) - f(3)) / h2
                    } else {
                        (f(0) - 2.0 * f(1) + f(2)) / h2
                    }
                } else if i == n - 1 {
                    if n >= 4 {
                        (2.0 * f(0) - 5.0 * f(-1) + 4.0 * f(-2) - f(-3)) / h2
                    } else {
                        (f(0) - 2.0 * f(-1) + f(-2)) / h2
                    }
                } else {
                    (f(1) - 2.0 * f(0) + f(-1)) / h2
                }
            }
        };
    }
}

/// Finite-difference derivative of order 1 or 2 along one axis, componentwise.
///
/// Central differences at interior nodes; second-order one-sided stencils at
/// the ends of each line.
pub fn grid_derivative(f: &GridField, axis: Axis, order: u8) -> Result<GridField> {
    if order != 1 && order != 2 {
        return Err(LabError::Precondition(format!(
            "derivative order must be 1 or 2, got {order}"
        )));
    }
    let line = line_geometry(f.grid(), axis)?;
    let mut out = GridField::zeros(f.grid(), f.shape());
    for c in 0..f.components() {
        differentiate_component(f.component(c), out.component_mut(c), &line, order);
    }
    GridField::new(f.grid().clone(), f.shape(), out.into_samples())
}

/// Spatial Jacobian: appends a derivative index of extent `d`.
pub fn gradient(f: &GridField) -> Result<GridField> {
    let d = f.grid().dim();
    let comps = f.components();
    let shape = f.shape().with_trailing(d)?;
    let mut out = GridField::zeros(f.grid(), shape);
    for k in 0..d {
        let line = line_geometry(f.grid(), Axis::Space(k))?;
        for c in 0..comps {
            let dst = out.component_mut(c + comps * k);
            differentiate_component(f.component(c), dst, &line, 1);
        }
    }
    GridField::new(f.grid().clone(), shape, out.into_samples())
}

/// Spatial Hessian: appends two derivative indices of extent `d`.
/// Mixed entries apply the first-order stencil along each axis in turn.
pub fn hessian(f: &GridField) -> Result<GridField> {
    let d = f.grid().dim();
    let comps = f.components();
    let shape = f.shape().with_trailing(d)?.with_trailing(d)?;
    let nodes = f.grid().node_count();
    let mut out = GridField::zeros(f.grid(), shape);
    let mut scratch = vec![0.0; nodes];
    for k in 0..d {
        let line_k = line_geometry(f.grid(), Axis::Space(k))?;
        for c in 0..comps {
            let dst = out.component_mut(c + comps * (k + d * k));
            differentiate_component(f.component(c), dst, &line_k, 2);
        }
        for l in (k + 1)..d {
            let line_l = line_geometry(f.grid(), Axis::Space(l))?;
            for c in 0..comps {
                differentiate_component(f.component(c), &mut scratch, &line_k, 1);
                let dst = out.component_mut(c + comps * (k + d * l));
                differentiate_component(&scratch, dst, &line_l, 1);
                let copy: Vec<f64> = out.component(c + comps * (k + d * l)).to_vec();
                out.component_mut(c + comps * (l + d * k)).copy_from_slice(&copy);
            }
        }
    }
    GridField::new(f.grid().clone(), shape, out.into_samples())
}
