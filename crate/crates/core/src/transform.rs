//! Iterated drift transformation.
//!
//! Stage `k` solves the backward equation with right-hand side `-T^k(b)` and
//! produces the next drift `T^{k+1}(b) = d_x U_{T^k(b)} . b`, always against
//! the original `b`. A pipeline of depth `n` carries the summed corrector
//! `U^(n) = sum_k U_{T^k(b)}`, its derivatives, the remaining drift
//! `b^(n) = T^{n+1}(b)` and the transformed diffusion `(d_x U^(n) + I) sigma`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::grid::io::{read_field, write_field, Encoding};
use crate::grid::{mixed_norm, sup_norm, GridField, MixedNormExponents, Shape};
use crate::pde::{
    assemble_diffusion, solve_backward_pde, BackwardPdeProblem, DiffusionField, PdeSolution,
    SolverConfig,
};

/// One step of the iteration: the drift `T^k(b)` and the solution `U_{T^k(b)}`.
#[derive(Debug, Clone)]
pub struct TransformStage {
    pub k: usize,
    pub drift: GridField,
    pub solution: PdeSolution,
}

fn check_drift(b: &GridField) -> Result<()> {
    let d = b.grid().dim();
    if b.shape() != Shape::vector(d) {
        return Err(LabError::ShapeMismatch(format!(
            "drift must be a vector field of length {d}, got {:?}",
            b.shape()
        )));
    }
    Ok(())
}

/// `J . v` nodewise for a `d x d` Jacobian field and a length-`d` vector field.
fn jacobian_times(jac: &GridField, v: &GridField) -> Result<GridField> {
    let d = v.grid().dim();
    let nodes = v.grid().node_count();
    let mut out = vec![0.0; d * nodes];
    for i in 0..d {
        for k in 0..d {
            let jc = jac.component(i + d * k);
            let vc = v.component(k);
            let dst = &mut out[i * nodes..(i + 1) * nodes];
            for node in 0..nodes {
                dst[node] += jc[node] * vc[node];
            }
        }
    }
    GridField::new(v.grid().clone(), v.shape(), out)
}

/// Solves for `U_{T^k(b)}` and returns the stage with the next drift `d_x U . b`.
pub fn transform_once(
    k: usize,
    prev_drift: &GridField,
    b: &GridField,
    sigma: &DiffusionField,
    cfg: &SolverConfig,
) -> Result<(TransformStage, GridField)> {
    let run = || -> Result<(TransformStage, GridField)> {
        check_drift(prev_drift)?;
        check_drift(b)?;
        let rhs = prev_drift.scaled(-1.0)?;
        let problem = BackwardPdeProblem::new(sigma, &rhs)?;
        let solution = solve_backward_pde(&problem, cfg)?;
        let next = jacobian_times(&solution.du, b)?;
        Ok((
            TransformStage {
                k,
                drift: prev_drift.clone(),
                solution,
            },
            next,
        ))
    };
    run().map_err(|e| e.at_stage(k))
}

/// `(d_x U^(n) + I) sigma` nodewise.
pub fn transformed_diffusion(du_sum: &GridField, sigma: &GridField) -> Result<GridField> {
    let d = sigma.grid().dim();
    let m = match sigma.shape() {
        Shape::Matrix { cols, .. } => cols,
        other => return Err(LabError::ShapeMismatch(format!("sigma has shape {other:?}"))),
    };
    let nodes = sigma.grid().node_count();
    let mut out = vec![0.0; d * m * nodes];
    for i in 0..d {
        for c in 0..m {
            let dst = &mut out[(i + d * c) * nodes..(i + d * c + 1) * nodes];
            for k in 0..d {
                let jac = du_sum.component(i + d * k);
                let s = sigma.component(k + d * c);
                for node in 0..nodes {
                    let factor = if i == k { jac[node] + 1.0 } else { jac[node] };
                    dst[node] += factor * s[node];
                }
            }
        }
    }
    GridField::new(sigma.grid().clone(), sigma.shape(), out)
}

/// Stages `0..=n` with the assembled corrector and transformed coefficients.
#[derive(Debug, Clone)]
pub struct TransformPipeline {
    b: GridField,
    diffusion: DiffusionField,
    stages: Vec<TransformStage>,
    u_sum: GridField,
    du_sum: GridField,
    d2u_sum: GridField,
    b_n: GridField,
    sigma_n: GridField,
}

fn sum_fields<'a>(mut fields: impl Iterator<Item = &'a GridField>) -> Result<GridField> {
    let mut acc = fields
        .next()
        .ok_or_else(|| LabError::Precondition("empty pipeline".into()))?
        .clone();
    for f in fields {
        acc.add_assign(f)?;
    }
    Ok(acc)
}

impl TransformPipeline {
    fn assemble(
        b: GridField,
        diffusion: DiffusionField,
        stages: Vec<TransformStage>,
        b_n: GridField,
    ) -> Result<Self> {
        let u_sum = sum_fields(stages.iter().map(|s| &s.solution.u))?;
        let du_sum = sum_fields(stages.iter().map(|s| &s.solution.du))?;
        let d2u_sum = sum_fields(stages.iter().map(|s| &s.solution.d2u))?;
        let sigma_n = transformed_diffusion(&du_sum, diffusion.sigma())?;
        Ok(Self {
            b,
            diffusion,
            stages,
            u_sum,
            du_sum,
            d2u_sum,
            b_n,
            sigma_n,
        })
    }

    /// Depth `n`: the pipeline holds stages `0..=n`.
    pub fn depth(&self) -> usize {
        self.stages.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.b.grid().horizon()
    }

    pub fn b(&self) -> &GridField {
        &self.b
    }

    pub fn diffusion(&self) -> &DiffusionField {
        &self.diffusion
    }

    pub fn stages(&self) -> &[TransformStage] {
        &self.stages
    }

    /// `U^(n)`.
    pub fn u_sum(&self) -> &GridField {
        &self.u_sum
    }

    /// `d_x U^(n)`.
    pub fn du_sum(&self) -> &GridField {
        &self.du_sum
    }

    /// `d_x^2 U^(n)`.
    pub fn d2u_sum(&self) -> &GridField {
        &self.d2u_sum
    }

    /// `b^(n) = T^{n+1}(b)`.
    pub fn b_n(&self) -> &GridField {
        &self.b_n
    }

    /// `sigma^(n) = (d_x U^(n) + I) sigma`.
    pub fn sigma_n(&self) -> &GridField {
        &self.sigma_n
    }

    /// `b^(k)` for `k <= n`.
    pub fn remaining_drift(&self, k: usize) -> &GridField {
        if k < self.depth() {
            &self.stages[k + 1].drift
        } else {
            &self.b_n
        }
    }

    /// `sum_k sup |d_x U_{T^k(b)}|`.
    pub fn gradient_sum(&self) -> f64 {
        self.stages.iter().map(|s| sup_norm(&s.solution.du)).sum()
    }

    /// `x + U^(n)(t, x)` by grid interpolation.
    pub fn transformed_point(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.u_sum.interpolate(t, x, out);
        for (o, xi) in out.iter_mut().zip(x) {
            *o += xi;
        }
    }
}

fn restrict_inputs(
    b: &GridField,
    sigma: &DiffusionField,
    t_prime: f64,
) -> Result<(GridField, DiffusionField)> {
    let horizon = b.grid().horizon();
    if !(t_prime > 0.0 && t_prime <= horizon * (1.0 + 1e-12)) {
        return Err(LabError::Precondition(format!(
            "working horizon {t_prime} must lie in (0, {horizon}]"
        )));
    }
    if sigma.sigma().grid() != b.grid() {
        return Err(LabError::ShapeMismatch(
            "drift and diffusion live on different grids".into(),
        ));
    }
    if t_prime >= horizon {
        return Ok((b.clone(), sigma.clone()));
    }
    Ok((b.restrict_horizon(t_prime)?, sigma.restrict_horizon(t_prime)?))
}

fn run_stages(
    b: &GridField,
    sigma: &DiffusionField,
    n: usize,
    cfg: &SolverConfig,
    mut keep_going: impl FnMut(&TransformStage) -> bool,
) -> Result<(Vec<TransformStage>, Vec<GridField>)> {
    let mut stages = Vec::with_capacity(n + 1);
    let mut next_drifts = Vec::with_capacity(n + 1);
    let mut drift = b.clone();
    for k in 0..=n {
        let (stage, next) = transform_once(k, &drift, b, sigma, cfg)?;
        let go_on = keep_going(&stage);
        stages.push(stage);
        next_drifts.push(next.clone());
        drift = next;
        if !go_on {
            break;
        }
    }
    Ok((stages, next_drifts))
}

/// Builds stages `0..=n` on `[0, t_prime]`.
pub fn build_pipeline(
    b: &GridField,
    sigma: &DiffusionField,
    n: usize,
    t_prime: f64,
    cfg: &SolverConfig,
) -> Result<TransformPipeline> {
    check_drift(b)?;
    let (b, sigma) = restrict_inputs(b, sigma, t_prime)?;
    let (stages, mut next) = run_stages(&b, &sigma, n, cfg, |_| true)?;
    let b_n = next.pop().expect("at least one stage");
    TransformPipeline::assemble(b, sigma, stages, b_n)
}

/// Pipelines of every depth `0..=n_max`, sharing one set of PDE solves.
pub fn build_pipeline_family(
    b: &GridField,
    sigma: &DiffusionField,
    n_max: usize,
    t_prime: f64,
    cfg: &SolverConfig,
) -> Result<Vec<TransformPipeline>> {
    check_drift(b)?;
    let (b, sigma) = restrict_inputs(b, sigma, t_prime)?;
    let (stages, next) = run_stages(&b, &sigma, n_max, cfg, |_| true)?;
    (0..=n_max)
        .map(|n| {
            TransformPipeline::assemble(
                b.clone(),
                sigma.clone(),
                stages[..=n].to_vec(),
                next[n].clone(),
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonProbe {
    pub horizon: f64,
    pub gradient_sum: f64,
    pub accepted: bool,
}

/// A working horizon on which the gradient sum is at most one half.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonCertificate {
    pub t0: f64,
    pub gradient_sum: f64,
    pub n_max: usize,
    pub tested: Vec<HorizonProbe>,
    /// `||b^(k)|| / ||b^(k-1)||` at `t0`, with `b^(-1) = b`.
    pub contraction_ratios: Vec<f64>,
}

pub const GRADIENT_SUM_BOUND: f64 = 0.5;

/// Bisection on the working horizon, resolution `2%` of the full horizon.
pub fn find_small_horizon(
    b: &GridField,
    sigma: &DiffusionField,
    n_max: usize,
    e: &MixedNormExponents,
    cfg: &SolverConfig,
) -> Result<HorizonCertificate> {
    check_drift(b)?;
    let full = b.grid().horizon();
    let resolution = 0.02 * full;
    let mut tested = Vec::new();
    let mut probe = |t_prime: f64| -> Result<f64> {
        let (bb, ss) = restrict_inputs(b, sigma, t_prime)?;
        let mut sum = 0.0;
        // Partial sums only grow, so stop once the bound is exceeded.
        run_stages(&bb, &ss, n_max, cfg, |stage| {
            sum += sup_norm(&stage.solution.du);
            sum <= GRADIENT_SUM_BOUND
        })?;
        tested.push(HorizonProbe {
            horizon: t_prime,
            gradient_sum: sum,
            accepted: sum <= GRADIENT_SUM_BOUND,
        });
        Ok(sum)
    };
    let t0 = if probe(full)? <= GRADIENT_SUM_BOUND {
        full
    } else {
        let (mut lo, mut hi) = (0.0, full);
        while hi - lo > resolution {
            let mid = 0.5 * (lo + hi);
            if probe(mid)? <= GRADIENT_SUM_BOUND {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };
    if t0 == 0.0 {
        return Err(LabError::NoCertificate(format!(
            "gradient sum exceeds {GRADIENT_SUM_BOUND} on every tested horizon down to {:.4}",
            tested.last().map(|p| p.horizon).unwrap_or(full)
        )));
    }
    let pipe = build_pipeline(b, sigma, n_max, t0, cfg)?;
    let mut contraction_ratios = Vec::with_capacity(n_max + 1);
    let mut prev = mixed_norm(pipe.b(), e)?;
    for k in 0..=n_max {
        let cur = mixed_norm(pipe.remaining_drift(k), e)?;
        contraction_ratios.push(if prev == 0.0 { 0.0 } else { cur / prev });
        prev = cur;
    }
    Ok(HorizonCertificate {
        t0,
        gradient_sum: pipe.gradient_sum(),
        n_max,
        tested,
        contraction_ratios,
    })
}

/// `r_k = ||b^(k)|| 2^{k+1} / ||b||` for `k = 0..=n`; zero drift gives zeros.
pub fn verify_contraction(pipe: &TransformPipeline, e: &MixedNormExponents) -> Result<Vec<f64>> {
    let base = mixed_norm(pipe.b(), e)?;
    (0..=pipe.depth())
        .map(|k| {
            if base == 0.0 {
                return Ok(0.0);
            }
            let norm = mixed_norm(pipe.remaining_drift(k), e)?;
            Ok(norm * 2f64.powi(k as i32 + 1) / base)
        })
        .collect()
}

/// `|Phi(t, x1) - Phi(t, x2)| / |x1 - x2|` with `Phi = id + U^(n)`.
pub fn verify_bilipschitz(pipe: &TransformPipeline, x1: &[f64], x2: &[f64], t: f64) -> Result<f64> {
    let grid = pipe.u_sum().grid();
    if !grid.contains(x1) || !grid.contains(x2) {
        return Err(LabError::Precondition("points must lie inside the box".into()));
    }
    let dist = x1
        .iter()
        .zip(x2)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    if dist == 0.0 {
        return Err(LabError::DegeneratePair("x1 equals x2".into()));
    }
    let gsum = pipe.gradient_sum();
    if gsum > GRADIENT_SUM_BOUND {
        return Err(LabError::Precondition(format!(
            "pipeline is not certified: gradient sum {gsum} exceeds {GRADIENT_SUM_BOUND}"
        )));
    }
    let d = x1.len();
    let mut p1 = vec![0.0; d];
    let mut p2 = vec![0.0; d];
    pipe.transformed_point(t, x1, &mut p1);
    pipe.transformed_point(t, x2, &mut p2);
    let image = p1
        .iter()
        .zip(&p2)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(image / dist)
}

/// `||d_x^2 U^(n)||` for each pipeline.
pub fn verify_second_derivative_bound(
    pipes: &[TransformPipeline],
    e: &MixedNormExponents,
) -> Result<Vec<f64>> {
    pipes.iter().map(|p| mixed_norm(p.d2u_sum(), e)).collect()
}

/// `||d_x^2 U_{T^k(b)}||` per stage.
pub fn stage_second_derivative_norms(
    pipe: &TransformPipeline,
    e: &MixedNormExponents,
) -> Result<Vec<f64>> {
    pipe.stages()
        .iter()
        .map(|s| mixed_norm(&s.solution.d2u, e))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub depth: usize,
    pub horizon: f64,
    pub gradient_sum: f64,
    pub encoding: Encoding,
    pub fields: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate: Option<HorizonCertificate>,
}

/// Writes every field of the pipeline plus `manifest.json` into `dir`.
pub fn write_pipeline(
    pipe: &TransformPipeline,
    dir: &Path,
    encoding: Encoding,
    certificate: Option<&HorizonCertificate>,
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut fields = Vec::new();
    let mut put = |name: String, f: &GridField| -> Result<()> {
        write_field(f, &dir.join(&name), encoding)?;
        fields.push(name);
        Ok(())
    };
    put("b".into(), pipe.b())?;
    put("sigma".into(), pipe.diffusion().sigma())?;
    for s in pipe.stages() {
        put(format!("stage_{}_drift", s.k), &s.drift)?;
        put(format!("stage_{}_u", s.k), &s.solution.u)?;
    }
    put("u_sum".into(), pipe.u_sum())?;
    put("du_sum".into(), pipe.du_sum())?;
    put("d2u_sum".into(), pipe.d2u_sum())?;
    put("b_n".into(), pipe.b_n())?;
    put("sigma_n".into(), pipe.sigma_n())?;
    let manifest = PipelineManifest {
        depth: pipe.depth(),
        horizon: pipe.horizon(),
        gradient_sum: pipe.gradient_sum(),
        encoding,
        fields,
        certificate: certificate.cloned(),
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

/// Reloads a pipeline written by [`write_pipeline`]; derivative fields are
/// recomputed from the stored correctors.
pub fn read_pipeline(dir: &Path) -> Result<TransformPipeline> {
    let manifest: PipelineManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let load = |name: &str| read_field(&dir.join(format!("{name}.json")));
    let b = load("b")?;
    let diffusion = assemble_diffusion(&load("sigma")?)?;
    let mut stages = Vec::with_capacity(manifest.depth + 1);
    for k in 0..=manifest.depth {
        stages.push(TransformStage {
            k,
            drift: load(&format!("stage_{k}_drift"))?,
            solution: PdeSolution::from_field(load(&format!("stage_{k}_u"))?)?,
        });
    }
    TransformPipeline::assemble(b, diffusion, stages, load("b_n")?)
}
