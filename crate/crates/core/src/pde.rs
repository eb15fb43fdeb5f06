//! Backward Kolmogorov solver for `d_t u + 1/2 sum_ij a_ij d_ij u = f`,
//! `u(T, .) = 0`, with `a = sigma sigma^T`.
//!
//! The equation is marched backward from the terminal time with a
//! theta-weighted Douglas splitting: an explicit predictor with the full
//! operator (mixed derivatives included) followed by one implicit tridiagonal
//! correction per axis. In one dimension the splitting is exactly the
//! theta-scheme (Crank-Nicolson for `theta = 1/2`). Zero Dirichlet data are
//! imposed on the faces of the box.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::grid::{
    gradient, grid_derivative, hessian, mixed_norm, sup_norm, Axis, GridField,
    MixedNormExponents, Shape,
};

/// `sigma`, `a = sigma sigma^T` and the ellipticity / boundedness constants.
#[derive(Debug, Clone)]
pub struct DiffusionField {
    sigma: GridField,
    a: GridField,
    c_sigma: f64,
    c_sigma_tilde: f64,
}

impl DiffusionField {
    pub fn sigma(&self) -> &GridField {
        &self.sigma
    }

    pub fn a(&self) -> &GridField {
        &self.a
    }

    /// Smallest eigenvalue of `a` over all nodes.
    pub fn c_sigma(&self) -> f64 {
        self.c_sigma
    }

    /// Largest pointwise Hilbert-Schmidt norm of `sigma`.
    pub fn c_sigma_tilde(&self) -> f64 {
        self.c_sigma_tilde
    }

    /// Restricts to `[0, horizon]` and re-assembles.
    pub fn restrict_horizon(&self, horizon: f64) -> Result<DiffusionField> {
        assemble_diffusion(&self.sigma.restrict_horizon(horizon)?)
    }
}

fn smallest_eigenvalue(a: &[f64], d: usize) -> f64 {
    match d {
        1 => a[0],
        2 => {
            let (p, r, s) = (a[0], a[1], a[3]);
            let mean = 0.5 * (p + s);
            let dev = (0.25 * (p - s) * (p - s) + r * r).sqrt();
            mean - dev
        }
        _ => {
            let m = DMatrix::from_column_slice(d, d, a);
            m.symmetric_eigenvalues().min()
        }
    }
}

/// Builds `a = sigma sigma^T` and scans for ellipticity.
pub fn assemble_diffusion(sigma: &GridField) -> Result<DiffusionField> {
    let grid = sigma.grid();
    let d = grid.dim();
    let m = match sigma.shape() {
        Shape::Matrix { rows, cols } if rows == d => cols,
        other => {
            return Err(LabError::ShapeMismatch(format!(
                "diffusion must be a {d} x m matrix field, got {other:?}"
            )))
        }
    };
    let a = sigma.map_pointwise(Shape::matrix(d, d), |s, out| {
        for i in 0..d {
            for j in 0..d {
                let mut acc = 0.0;
                for k in 0..m {
                    acc += s[i + d * k] * s[j + d * k];
                }
                out[i + d * j] = acc;
            }
        }
    })?;
    let c_sigma_tilde = sup_norm(sigma);
    let mut c_sigma = f64::INFINITY;
    let mut worst = 0;
    let mut buf = vec![0.0; d * d];
    for node in 0..grid.node_count() {
        a.value_at(node, &mut buf);
        let lambda = smallest_eigenvalue(&buf, d);
        if lambda < c_sigma {
            c_sigma = lambda;
            worst = node;
        }
    }
    let floor = 1e-12 * c_sigma_tilde.max(1.0).powi(2);
    if !(c_sigma > floor) {
        return Err(LabError::Degenerate {
            min_eigenvalue: c_sigma,
            node: worst,
        });
    }
    Ok(DiffusionField {
        sigma: sigma.clone(),
        a,
        c_sigma,
        c_sigma_tilde,
    })
}

/// Scheme parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Implicitness weight: 1/2 is Crank-Nicolson, 1 is backward Euler.
    pub theta: f64,
    /// Relative bound on the discrete residual (enforced in one dimension).
    pub tolerance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            theta: 0.5,
            tolerance: 1e-9,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(LabError::Validation(format!(
                "theta must lie in [0, 1], got {}",
                self.theta
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(LabError::Validation("tolerance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BackwardPdeProblem<'a> {
    diffusion: &'a DiffusionField,
    rhs: &'a GridField,
}

impl<'a> BackwardPdeProblem<'a> {
    pub fn new(diffusion: &'a DiffusionField, rhs: &'a GridField) -> Result<Self> {
        if diffusion.sigma.grid() != rhs.grid() {
            return Err(LabError::ShapeMismatch(
                "diffusion and right-hand side live on different grids".into(),
            ));
        }
        match rhs.shape() {
            Shape::Scalar | Shape::Vector { .. } => {}
            other => {
                return Err(LabError::ShapeMismatch(format!(
                    "right-hand side must be scalar or vector, got {other:?}"
                )))
            }
        }
        Ok(Self { diffusion, rhs })
    }
}

/// Solution field with its finite-difference derivatives.
#[derive(Debug, Clone)]
pub struct PdeSolution {
    pub u: GridField,
    /// Spatial Jacobian.
    pub du: GridField,
    /// Spatial Hessian.
    pub d2u: GridField,
    pub dtu: GridField,
    /// Largest theta-scheme residual over interior nodes (`None` for fields
    /// not produced by the solver).
    pub residual: Option<f64>,
}

impl PdeSolution {
    /// Wraps a field, deriving its derivative fields with the grid stencils.
    pub fn from_field(u: GridField) -> Result<Self> {
        Ok(Self {
            du: gradient(&u)?,
            d2u: hessian(&u)?,
            dtu: grid_derivative(&u, Axis::Time, 1)?,
            u,
            residual: None,
        })
    }

    pub fn sobolev_norm(&self, e: &MixedNormExponents) -> Result<f64> {
        Ok(mixed_norm(&self.u, e)?
            + mixed_norm(&self.dtu, e)?
            + mixed_norm(&self.du, e)?
            + mixed_norm(&self.d2u, e)?)
    }
}

fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64], scratch: &mut [f64]) -> Result<(), String> {
    let n = diag.len();
    let mut denom = diag[0];
    if denom == 0.0 || !denom.is_finite() {
        return Err("zero pivot in row 0".into());
    }
    scratch[0] = upper[0] / denom;
    rhs[0] /= denom;
    for i in 1..n {
        denom = diag[i] - lower[i] * scratch[i - 1];
        if denom == 0.0 || !denom.is_finite() {
            return Err(format!("zero pivot in row {i}"));
        }
        scratch[i] = if i + 1 < n { upper[i] / denom } else { 0.0 };
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= scratch[i] * rhs[i + 1];
    }
    Ok(())
}

struct Stencil {
    d: usize,
    strides: Vec<usize>,
    interior: Vec<usize>,
    inv_h2: f64,
}

impl Stencil {
    /// `1/2 sum_ij a_ij d_ij v` at spatial node `si`; `a(i, j)` returns the
    /// coefficient at that node.
    fn apply(&self, v: &[f64], si: usize, a: impl Fn(usize, usize) -> f64, diag_only: Option<usize>) -> f64 {
        let c = v[si];
        let mut acc = 0.0;
        for k in 0..self.d {
            if diag_only.is_some_and(|only| only != k) {
                continue;
            }
            let s = self.strides[k];
            acc += 0.5 * a(k, k) * (v[si + s] - 2.0 * c + v[si - s]);
        }
        if diag_only.is_none() {
            for k in 0..self.d {
                for l in (k + 1)..self.d {
                    let (sk, sl) = (self.strides[k], self.strides[l]);
                    let cross = v[si + sk + sl] - v[si + sk - sl] - v[si - sk + sl] + v[si - sk - sl];
                    acc += a(k, l) * 0.25 * cross;
                }
            }
        }
        acc * self.inv_h2
    }
}

/// Marches `d_t u + 1/2 a : D^2 u = f` backward from `u(T) = 0`.
pub fn solve_backward_pde(prob: &BackwardPdeProblem<'_>, cfg: &SolverConfig) -> Result<PdeSolution> {
    cfg.validate()?;
    let grid = prob.rhs.grid();
    let d = grid.dim();
    let n = grid.num_space_points();
    let nt = grid.num_time_steps();
    if nt < 2 {
        return Err(LabError::Precondition("at least two time steps are required".into()));
    }
    if n < 3 {
        return Err(LabError::GridTooCoarse {
            axis: "space".into(),
            points: n,
            required: 3,
        });
    }
    let slice = grid.slice_len();
    let nodes = grid.node_count();
    let dt = grid.dt();
    let theta = cfg.theta;
    let a = &prob.diffusion.a;
    let a_comp: Vec<&[f64]> = (0..d * d).map(|c| a.component(c)).collect();
    let stencil = Stencil {
        d,
        strides: (0..d).map(|k| grid.stride(k)).collect(),
        interior: (0..slice).filter(|&si| !grid.is_spatial_boundary(si)).collect(),
        inv_h2: 1.0 / (grid.h() * grid.h()),
    };
    // Lines along each axis: the first interior node of every line.
    let mut idx = vec![0usize; d];
    let line_starts: Vec<Vec<usize>> = (0..d)
        .map(|k| {
            (0..slice)
                .filter(|&si| {
                    grid.spatial_multi_index(si, &mut idx);
                    idx[k] == 1
                        && idx
                            .iter()
                            .enumerate()
                            .all(|(l, &j)| l == k || (j > 0 && j < n - 1))
                })
                .collect()
        })
        .collect();

    let comps = prob.rhs.components();
    let mut u = vec![0.0; nodes * comps];
    let mut residual: f64 = 0.0;
    let mut scale: f64 = 1.0;
    let a_max = a_comp
        .iter()
        .step_by(d + 1)
        .flat_map(|c| c.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));

    let m = n - 2;
    let (mut lower, mut diag, mut upper) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    let (mut line_rhs, mut scratch) = (vec![0.0; m], vec![0.0; m]);
    let mut y = vec![0.0; slice];
    let mut fbar = vec![0.0; slice];

    for c in 0..comps {
        let f = prob.rhs.component(c);
        let uc = &mut u[c * nodes..(c + 1) * nodes];
        for s in (0..nt).rev() {
            let (head, tail) = uc.split_at_mut((s + 1) * slice);
            let v_old = &tail[..slice];
            let v_new = &mut head[s * slice..];
            let off_old = (s + 1) * slice;
            let off_new = s * slice;
            for si in 0..slice {
                fbar[si] = theta * f[off_new + si] + (1.0 - theta) * f[off_old + si];
            }
            let ac = &a_comp;
            let a_old = |si: usize| move |i: usize, j: usize| ac[i + d * j][off_old + si];
            y.iter_mut().for_each(|v| *v = 0.0);
            for &si in &stencil.interior {
                y[si] = v_old[si] + dt * (stencil.apply(v_old, si, a_old(si), None) - fbar[si]);
            }
            for k in 0..d {
                let stride = stencil.strides[k];
                for &start in &line_starts[k] {
                    for j in 0..m {
                        let si = start + j * stride;
                        let a_new = a_comp[k + d * k][off_new + si];
                        let w = theta * dt * 0.5 * a_new * stencil.inv_h2;
                        lower[j] = -w;
                        upper[j] = -w;
                        diag[j] = 1.0 + 2.0 * w;
                        line_rhs[j] = y[si]
                            - theta * dt * stencil.apply(v_old, si, a_old(si), Some(k));
                    }
                    thomas(&lower, &diag, &upper, &mut line_rhs, &mut scratch).map_err(|reason| {
                        LabError::Solver { step: s, reason }
                    })?;
                    for j in 0..m {
                        y[start + j * stride] = line_rhs[j];
                    }
                }
            }
            v_new[..slice].copy_from_slice(&y);
            // Residual of the theta-scheme with the scheme's own stencils.
            let a_new = |si: usize| move |i: usize, j: usize| ac[i + d * j][off_new + si];
            for &si in &stencil.interior {
                let r = (v_old[si] - y[si]) / dt
                    + theta * stencil.apply(&y, si, a_new(si), None)
                    + (1.0 - theta) * stencil.apply(v_old, si, a_old(si), None)
                    - fbar[si];
                residual = residual.max(r.abs());
                let mag = y[si].abs().max(v_old[si].abs());
                scale = scale.max(1.0 + fbar[si].abs() + mag * (1.0 / dt + a_max * stencil.inv_h2));
            }
        }
    }
    if !residual.is_finite() {
        return Err(LabError::Solver {
            step: 0,
            reason: "non-finite residual".into(),
        });
    }
    if d == 1 && residual > cfg.tolerance * scale {
        return Err(LabError::Solver {
            step: 0,
            reason: format!(
                "discrete residual {residual:e} exceeds tolerance {:e}",
                cfg.tolerance * scale
            ),
        });
    }
    let u = GridField::new(grid.clone(), prob.rhs.shape(), u)?;
    let mut sol = PdeSolution::from_field(u)?;
    sol.residual = Some(residual);
    Ok(sol)
}

/// `sobolev_norm(u) / mixed_norm(f)`: one sample of the regularity constant.
pub fn verify_regularity_estimate(sol: &PdeSolution, f: &GridField, e: &MixedNormExponents) -> Result<f64> {
    let denom = mixed_norm(f, e)?;
    if denom == 0.0 {
        return Err(LabError::DivisionGuard(
            "right-hand side has zero mixed norm".into(),
        ));
    }
    Ok(sol.sobolev_norm(e)? / denom)
}

/// `sup |d_x u| / (T^{eps/2} ||f||)`; zero for the zero problem.
pub fn verify_gradient_smallness(
    sol: &PdeSolution,
    f: &GridField,
    eps: f64,
    e: &MixedNormExponents,
) -> Result<f64> {
    let dim = f.grid().dim();
    if !(eps > 0.0 && eps < 1.0 && eps + e.scaling_index(dim) < 1.0) {
        return Err(LabError::Precondition(format!(
            "eps = {eps} must lie in (0, 1) with eps + d/p + 2/q < 1 (d/p + 2/q = {})",
            e.scaling_index(dim)
        )));
    }
    let sup = sup_norm(&sol.du);
    let norm = mixed_norm(f, e)?;
    if norm == 0.0 {
        if sup == 0.0 {
            return Ok(0.0);
        }
        return Err(LabError::DivisionGuard(
            "zero right-hand side with nonzero gradient".into(),
        ));
    }
    Ok(sup / (f.grid().horizon().powf(eps / 2.0) * norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::SpaceTimeGrid;

    fn constant_sigma(grid: &SpaceTimeGrid, value: f64) -> GridField {
        let d = grid.dim();
        GridField::from_fn(grid, Shape::matrix(d, d), |_, _, out| {
            for i in 0..d {
                out[i + d * i] = value;
            }
        })
        .unwrap()
    }

    #[test]
    fn identity_diffusion_constants() {
        let g = SpaceTimeGrid::new(1.0, 4, 1, 1.0, 11).unwrap();
        let diff = assemble_diffusion(&constant_sigma(&g, 1.0)).unwrap();
        assert_eq!(diff.c_sigma(), 1.0);
        assert_eq!(diff.c_sigma_tilde(), 1.0);
        assert!(diff.a().samples().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn bump_diffusion_ellipticity_matches_grid_scan() {
        let g = SpaceTimeGrid::new(1.0, 2, 1, 3.0, 61).unwrap();
        let s = |x: f64| 1.0 + 0.5 * x.sin() * (-x * x).exp();
        let sigma = GridField::from_fn(&g, Shape::matrix(1, 1), |_, x, out| out[0] = s(x[0])).unwrap();
        let diff = assemble_diffusion(&sigma).unwrap();
        let oracle = (0..g.num_space_points())
            .map(|j| s(g.coord(j)).powi(2))
            .fold(f64::INFINITY, f64::min);
        assert_eq!(diff.c_sigma(), oracle);
        assert!(diff.c_sigma() > 0.0);
    }

    #[test]
    fn zero_diffusion_is_degenerate() {
        let g = SpaceTimeGrid::new(1.0, 2, 1, 1.0, 5).unwrap();
        assert!(matches!(
            assemble_diffusion(&constant_sigma(&g, 0.0)),
            Err(LabError::Degenerate { .. })
        ));
        let g2 = SpaceTimeGrid::new(1.0, 2, 2, 1.0, 5).unwrap();
        let rank_one = GridField::from_fn(&g2, Shape::matrix(2, 2), |_, _, out| {
            out[0] = 1.0;
            out[1] = 1.0;
        })
        .unwrap();
        assert!(matches!(assemble_diffusion(&rank_one), Err(LabError::Degenerate { .. })));
    }

    #[test]
    fn two_dimensional_eigenvalue_matches_nalgebra() {
        let a = [2.0, 0.3, 0.3, 1.0];
        let m = DMatrix::from_column_slice(2, 2, &a);
        let reference = m.symmetric_eigenvalues().min();
        assert!((smallest_eigenvalue(&a, 2) - reference).abs() < 1e-14);
    }

    #[test]
    fn zero_rhs_gives_zero_solution() {
        let g = SpaceTimeGrid::new(1.0, 10, 1, 2.0, 21).unwrap();
        let diff = assemble_diffusion(&constant_sigma(&g, 1.0)).unwrap();
        let f = GridField::zeros(&g, Shape::Scalar);
        let sol = solve_backward_pde(&BackwardPdeProblem::new(&diff, &f).unwrap(), &SolverConfig::default()).unwrap();
        assert!(sol.u.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn terminal_condition_is_exact_and_derivatives_recompute() {
        let g = SpaceTimeGrid::new(0.5, 20, 1, 3.0, 61).unwrap();
        let diff = assemble_diffusion(&constant_sigma(&g, 1.0)).unwrap();
        let f = GridField::scalar_from_fn(&g, |t, x| (x[0] * 2.0).cos() * (-x[0] * x[0]).exp() * (1.0 + t)).unwrap();
        let sol = solve_backward_pde(&BackwardPdeProblem::new(&diff, &f).unwrap(), &SolverConfig::default()).unwrap();
        let slice = g.slice_len();
        let last = g.num_time_steps() * slice;
        assert!(sol.u.samples()[last..last + slice].iter().all(|&v| v == 0.0));
        assert_eq!(sol.du, gradient(&sol.u).unwrap());
        assert_eq!(sol.d2u, hessian(&sol.u).unwrap());
        assert_eq!(sol.dtu, grid_derivative(&sol.u, Axis::Time, 1).unwrap());
    }

    #[test]
    fn solver_is_linear() {
        let g = SpaceTimeGrid::new(1.0, 40, 1, 4.0, 81).unwrap();
        let sigma = GridField::from_fn(&g, Shape::matrix(1, 1), |_, x, out| {
            out[0] = 1.0 + 0.5 * x[0].sin() * (-x[0] * x[0]).exp()
        })
        .unwrap();
        let diff = assemble_diffusion(&sigma).unwrap();
        let f1 = GridField::scalar_from_fn(&g, |t, x| (-(x[0] - 0.5).powi(2)).exp() * (1.0 + t)).unwrap();
        let f2 = GridField::scalar_from_fn(&g, |_, x| x[0].sin() * (-x[0] * x[0]).exp()).unwrap();
        let cfg = SolverConfig::default();
        let solve = |f: &GridField| solve_backward_pde(&BackwardPdeProblem::new(&diff, f).unwrap(), &cfg).unwrap();
        let s1 = solve(&f1);
        let s2 = solve(&f2);
        let s12 = solve(&f1.add(&f2).unwrap());
        let scale = sup_norm(&s12.u);
        for ((a, b), c) in s1.u.samples().iter().zip(s2.u.samples()).zip(s12.u.samples()) {
            assert!((a + b - c).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn maximum_principle_for_nonpositive_rhs() {
        let g = SpaceTimeGrid::new(1.0, 50, 1, 3.0, 61).unwrap();
        let diff = assemble_diffusion(&constant_sigma(&g, 1.0)).unwrap();
        let f = GridField::scalar_from_fn(&g, |_, x| -(1.0 - x[0].abs()).max(0.0)).unwrap();
        let sol = solve_backward_pde(&BackwardPdeProblem::new(&diff, &f).unwrap(), &SolverConfig { theta: 1.0, ..Default::default() }).unwrap();
        assert!(sol.u.samples().iter().all(|&v| v >= -1e-12));
    }

    #[test]
    fn forced_solution_in_two_dimensions() {
        // a = I, f = -1: u = T - t away from the faces of the box.
        let g = SpaceTimeGrid::new(0.1, 10, 2, 3.0, 31).unwrap();
        let diff = assemble_diffusion(&constant_sigma(&g, 1.0)).unwrap();
        let f = GridField::scalar_from_fn(&g, |_, _| -1.0).unwrap();
        let sol = solve_backward_pde(&BackwardPdeProblem::new(&diff, &f).unwrap(), &SolverConfig::default()).unwrap();
        let mut x = [0.0; 2];
        for node in 0..g.node_count() {
            let si = node % g.slice_len();
            g.spatial_point(si, &mut x);
            if x.iter().all(|v| v.abs() <= 1.0) {
                let t = g.time(node / g.slice_len());
                assert!((sol.u.samples()[node] - (0.1 - t)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn scaling_rhs_leaves_regularity_ratio_unchanged() {
        let g = SpaceTimeGrid::new(1.0, 20, 1, 3.0, 61).unwrap();
        let diff = assemble_diffusion(&constant_sigma(&g, 1.0)).unwrap();
        let e = MixedNormExponents::new(4.0, 16.0).unwrap();
        let f = GridField::scalar_from_fn(&g, |_, x| (-(x[0] * x[0])).exp()).unwrap();
        let f2 = f.scaled(2.0).unwrap();
        let cfg = SolverConfig::default();
        let s1 = solve_backward_pde(&BackwardPdeProblem::new(&diff, &f).unwrap(), &cfg).unwrap();
        let s2 = solve_backward_pde(&BackwardPdeProblem::new(&diff, &f2).unwrap(), &cfg).unwrap();
        let r1 = verify_regularity_estimate(&s1, &f, &e).unwrap();
        let r2 = verify_regularity_estimate(&s2, &f2, &e).unwrap();
        assert!((r1 - r2).abs() < 1e-12 * r1);
        let zero = GridField::zeros(&g, Shape::Scalar);
        assert!(matches!(verify_regularity_estimate(&s1, &zero, &e), Err(LabError::DivisionGuard(_))));
    }

    #[test]
    fn gradient_smallness_zero_cases_and_precondition() {
        let g = SpaceTimeGrid::new(1.0, 20, 1, 6.0, 121).unwrap();
        let diff = assemble_diffusion(&constant_sigma(&g, 1.0)).unwrap();
        let e = MixedNormExponents::new(4.0, 16.0).unwrap();
        let cfg = SolverConfig::default();
        let zero = GridField::zeros(&g, Shape::Scalar);
        let s0 = solve_backward_pde(&BackwardPdeProblem::new(&diff, &zero).unwrap(), &cfg).unwrap();
        assert_eq!(verify_gradient_smallness(&s0, &zero, 0.5, &e).unwrap(), 0.0);
        assert!(matches!(
            verify_gradient_smallness(&s0, &zero, 0.7, &e),
            Err(LabError::Precondition(_))
        ));
    }
}
