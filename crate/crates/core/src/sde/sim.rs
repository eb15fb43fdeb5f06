use serde::{Deserialize, Serialize};

use super::coefficients::SdeCoefficients;
use super::rng::BrownianPath;
use crate::error::{LabError, Result};
use crate::transform::TransformPipeline;

/// States `X_{t_i}` for `i = 0..=num_steps`, stored step-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePath {
    pub start_time: f64,
    pub dt: f64,
    pub dim: usize,
    pub states: Vec<f64>,
    /// First step index at which the path sat on the box boundary.
    pub absorbed_at: Option<usize>,
}

impl SamplePath {
    pub fn num_steps(&self) -> usize {
        self.states.len() / self.dim - 1
    }

    pub fn time(&self, i: usize) -> f64 {
        self.start_time + i as f64 * self.dt
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn final_state(&self) -> &[f64] {
        self.state(self.num_steps())
    }

    pub fn absorbed(&self) -> bool {
        self.absorbed_at.is_some()
    }
}

/// Scratch buffers for one Euler step.
struct EulerWork {
    pub b: Vec<f64>,
    pub s: Vec<f64>,
}

impl EulerWork {
    pub fn new(d: usize) -> Self {
        Self {
            b: vec![0.0; d],
            s: vec![0.0; d * d],
        }
    }
}

/// Advances `x` by one Euler step; returns true if the box was left, in
/// which case `x` is projected onto the boundary.
fn euler_step(
    c: &SdeCoefficients,
    t: f64,
    dt: f64,
    x: &mut [f64],
    dw: &[f64],
    work: &mut EulerWork,
    step: usize,
) -> Result<bool> {
    let d = x.len();
    c.drift_at(t, x, &mut work.b);
    c.diffusion_at(t, x, &mut work.s);
    let mut exited = false;
    let l = c.half_width();
    for i in 0..d {
        let mut noise = 0.0;
        for (j, w) in dw.iter().enumerate() {
            noise += work.s[i + d * j] * w;
        }
        let next = x[i] + work.b[i] * dt + noise;
        if !next.is_finite() {
            return Err(LabError::BlowUp { step });
        }
        x[i] = next;
    }
    for xi in x.iter_mut() {
        if xi.abs() > l {
            *xi = xi.clamp(-l, l);
            exited = true;
        }
    }
    Ok(exited)
}

fn check_start(c: &SdeCoefficients, x0: &[f64], w: &BrownianPath) -> Result<()> {
    if x0.len() != c.dim() || w.dim != c.dim() {
        return Err(LabError::ShapeMismatch(format!(
            "start point has {} coordinates, noise {}, coefficients {}",
            x0.len(),
            w.dim,
            c.dim()
        )));
    }
    if !c.in_box(x0) {
        return Err(LabError::Precondition(format!("start point {x0:?} lies outside the box")));
    }
    Ok(())
}

/// Euler-Maruyama from `t = start_time` with absorption at the box boundary.
pub fn simulate_euler_from(
    c: &SdeCoefficients,
    start_time: f64,
    x0: &[f64],
    w: &BrownianPath,
) -> Result<SamplePath> {
    check_start(c, x0, w)?;
    let d = c.dim();
    let mut states = Vec::with_capacity((w.num_steps + 1) * d);
    states.extend_from_slice(x0);
    let mut x = x0.to_vec();
    let mut work = EulerWork::new(d);
    let mut absorbed_at = None;
    for i in 0..w.num_steps {
        if absorbed_at.is_none() {
            let t = start_time + i as f64 * w.dt;
            if euler_step(c, t, w.dt, &mut x, w.increment(i), &mut work, i)? {
                absorbed_at = Some(i + 1);
            }
        }
        states.extend_from_slice(&x);
    }
    Ok(SamplePath {
        start_time,
        dt: w.dt,
        dim: d,
        states,
        absorbed_at,
    })
}

/// `X_{i+1} = X_i + b(t_i, X_i) dt + sigma(t_i, X_i) dW_i` from `t = 0`.
pub fn simulate_euler(c: &SdeCoefficients, x0: &[f64], w: &BrownianPath) -> Result<SamplePath> {
    simulate_euler_from(c, 0.0, x0, w)
}

/// Two Euler paths on one Brownian path, with their transformed images
/// `Y_i = X_i + U^(n)(t, X_i)` and the running integral `A_t^(n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSimulation {
    pub x1: SamplePath,
    pub x2: SamplePath,
    pub shared_path: BrownianPath,
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    pub a_series: Vec<f64>,
}

/// Per-pair functionals of one pipeline along two paths.
#[derive(Debug, Clone, Default)]
pub(crate) struct PairTrace {
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    pub a: Vec<f64>,
    /// `A_T`.
    pub a_total: f64,
    /// `int |b^(n)(X1) - b^(n)(X2)|^2 dt`.
    pub drift_gap_sq: f64,
    /// `int |X1 - X2| |b^(n)(X1) - b^(n)(X2)| dt`.
    pub drift_gap_weighted: f64,
    /// `|Y1_T - Y2_T|^2`.
    pub final_gap_sq: f64,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Left-endpoint rectangle rule for every time integral; steps with
/// `Y1 == Y2` contribute nothing to `A`.
pub(crate) fn trace_pair(pipe: &TransformPipeline, p1: &SamplePath, p2: &SamplePath, store: bool) -> PairTrace {
    let d = p1.dim;
    let n = p1.num_steps();
    let dt = p1.dt;
    let mut out = PairTrace::default();
    if store {
        out.y1.reserve((n + 1) * d);
        out.y2.reserve((n + 1) * d);
        out.a.reserve(n + 1);
        out.a.push(0.0);
    }
    let (mut u1, mut u2) = (vec![0.0; d], vec![0.0; d]);
    let (mut s1, mut s2) = (vec![0.0; d * d], vec![0.0; d * d]);
    let (mut b1, mut b2) = (vec![0.0; d], vec![0.0; d]);
    for i in 0..=n {
        let t = p1.time(i);
        let (x1, x2) = (p1.state(i), p2.state(i));
        pipe.transformed_point(t, x1, &mut u1);
        pipe.transformed_point(t, x2, &mut u2);
        if store {
            out.y1.extend_from_slice(&u1);
            out.y2.extend_from_slice(&u2);
        }
        if i == n {
            out.final_gap_sq = squared_distance(&u1, &u2);
            break;
        }
        let y_gap = squared_distance(&u1, &u2);
        if y_gap > 0.0 {
            pipe.sigma_n().interpolate(t, x1, &mut s1);
            pipe.sigma_n().interpolate(t, x2, &mut s2);
            out.a_total += squared_distance(&s1, &s2) / y_gap * dt;
        }
        if store {
            out.a.push(out.a_total);
        }
        pipe.b_n().interpolate(t, x1, &mut b1);
        pipe.b_n().interpolate(t, x2, &mut b2);
        let b_gap = squared_distance(&b1, &b2);
        out.drift_gap_sq += b_gap * dt;
        out.drift_gap_weighted += squared_distance(x1, x2).sqrt() * b_gap.sqrt() * dt;
    }
    out
}

pub(crate) fn check_pair(c1: &SdeCoefficients, c2: &SdeCoefficients, w: &BrownianPath, pipe: &TransformPipeline) -> Result<()> {
    if c1.diffusion() != c2.diffusion() || c1.half_width() != c2.half_width() {
        return Err(LabError::Precondition(
            "paired coefficients must share the diffusion and the box".into(),
        ));
    }
    if pipe.u_sum().grid().dim() != c1.dim() {
        return Err(LabError::ShapeMismatch("pipeline dimension differs from the SDE".into()));
    }
    if w.horizon() > pipe.horizon() * (1.0 + 1e-9) {
        return Err(LabError::Precondition(format!(
            "path horizon {} exceeds the pipeline horizon {}",
            w.horizon(),
            pipe.horizon()
        )));
    }
    Ok(())
}

impl PairedSimulation {
    /// Builds the transformed quantities for two precomputed paths.
    pub fn from_paths(x1: SamplePath, x2: SamplePath, shared_path: BrownianPath, pipe: &TransformPipeline) -> Self {
        let trace = trace_pair(pipe, &x1, &x2, true);
        Self {
            x1,
            x2,
            shared_path,
            y1: trace.y1,
            y2: trace.y2,
            a_series: trace.a,
        }
    }

    pub fn a_total(&self) -> f64 {
        *self.a_series.last().unwrap_or(&0.0)
    }
}

/// Both paths start at `x0`.
pub fn simulate_pair(
    c1: &SdeCoefficients,
    c2: &SdeCoefficients,
    x0: &[f64],
    w: &BrownianPath,
    pipe: &TransformPipeline,
) -> Result<PairedSimulation> {
    simulate_pair_from(c1, c2, x0, x0, w, pipe)
}

/// Paths start at `x1` and `x2` respectively.
pub fn simulate_pair_from(
    c1: &SdeCoefficients,
    c2: &SdeCoefficients,
    x1: &[f64],
    x2: &[f64],
    w: &BrownianPath,
    pipe: &TransformPipeline,
) -> Result<PairedSimulation> {
    check_pair(c1, c2, w, pipe)?;
    let p1 = simulate_euler(c1, x1, w)?;
    let p2 = simulate_euler(c2, x2, w)?;
    Ok(PairedSimulation::from_paths(p1, p2, w.clone(), pipe))
}
