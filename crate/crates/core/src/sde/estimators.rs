//! Monte-Carlo estimators. Every estimator draws path `i` from stream `i` of
//! a seed derived from the master seed and a label, and aggregates per-path
//! values in index order.

use serde::{Deserialize, Serialize};

use super::coefficients::{apply_cap, ScalarFn, SdeCoefficients};
use super::rng::{derive_seed, standard_normal, stream_rng, BrownianPath};
use super::sim::{check_pair, simulate_euler_from, trace_pair, PairedSimulation, SamplePath};
use super::stats::{collect_paths, ordered_paths, CompensatedSum, MeanEstimate};
use crate::error::{LabError, Result};
use crate::grid::{gradient, mixed_norm, GridField, MixedNormExponents, Shape};
use crate::pde::PdeSolution;
use crate::transform::TransformPipeline;

/// Path count, step count and horizon of one Monte-Carlo experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSettings {
    pub seed: u64,
    pub num_paths: usize,
    pub num_steps: usize,
    pub horizon: f64,
}

impl MonteCarloSettings {
    pub fn new(seed: u64, num_paths: usize, num_steps: usize, horizon: f64) -> Result<Self> {
        let s = Self {
            seed,
            num_paths,
            num_steps,
            horizon,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_paths == 0 || self.num_steps == 0 || !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(LabError::Precondition(format!(
                "Monte-Carlo settings need positive paths, steps and horizon (got {}, {}, {})",
                self.num_paths, self.num_steps, self.horizon
            )));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.num_steps as f64
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..*self }
    }

    pub fn with_paths(&self, num_paths: usize) -> Self {
        Self { num_paths, ..*self }
    }

    pub fn with_steps(&self, num_steps: usize) -> Self {
        Self { num_steps, ..*self }
    }

    pub fn path(&self, stream: usize, dim: usize) -> Result<BrownianPath> {
        BrownianPath::generate(self.seed, stream as u64, self.num_steps, dim, self.dt())
    }
}

/// Trapezoid-rule integrals `int f_k(t, X_t) dt` along one path.
fn path_integrals(fs: &[&dyn ScalarFn], path: &SamplePath) -> Vec<f64> {
    let n = path.num_steps();
    let dt = path.dt;
    fs.iter()
        .map(|f| {
            let mut acc = CompensatedSum::default();
            for i in 0..=n {
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                acc.add(w * f.eval(path.time(i), path.state(i)));
            }
            acc.value() * dt
        })
        .collect()
}

fn occupation_paths(
    fs: &[&dyn ScalarFn],
    c: &SdeCoefficients,
    start_step: usize,
    x0: &[f64],
    s: &MonteCarloSettings,
) -> Result<(Vec<Vec<f64>>, usize)> {
    s.validate()?;
    if start_step >= s.num_steps {
        return Err(LabError::Precondition("start step must precede the horizon".into()));
    }
    let steps = s.num_steps - start_step;
    let t0 = start_step as f64 * s.dt();
    let mut absorbed = 0;
    let mut rows = Vec::with_capacity(s.num_paths);
    ordered_paths(
        s.num_paths,
        |i| {
            let w = BrownianPath::generate(s.seed, i as u64, steps, c.dim(), s.dt())?;
            let path = simulate_euler_from(c, t0, x0, &w)?;
            Ok((path.absorbed(), path_integrals(fs, &path)))
        },
        |_, (abs, row)| {
            absorbed += usize::from(abs);
            rows.push(row);
            Ok(())
        },
    )?;
    Ok((rows, absorbed))
}

fn column(rows: &[Vec<f64>], k: usize) -> Vec<f64> {
    rows.iter().map(|r| r[k]).collect()
}

/// `E[int_0^T f_k(t, X_t) dt]` for several integrands on shared paths.
pub fn occupation_family(
    fs: &[&dyn ScalarFn],
    c: &SdeCoefficients,
    x0: &[f64],
    s: &MonteCarloSettings,
) -> Result<Vec<MeanEstimate>> {
    let (rows, _) = occupation_paths(fs, c, 0, x0, s)?;
    Ok((0..fs.len()).map(|k| MeanEstimate::from_samples(&column(&rows, k))).collect())
}

/// `E[int_0^T f(t, X_t) dt]`.
pub fn occupation_expectation(
    f: &dyn ScalarFn,
    c: &SdeCoefficients,
    x0: &[f64],
    s: &MonteCarloSettings,
) -> Result<MeanEstimate> {
    Ok(occupation_family(&[f], c, x0, s)?[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KrylovRatio {
    pub ratio: f64,
    pub numerator: MeanEstimate,
    pub norm: f64,
}

fn check_krylov_integrand(f: &GridField, e: &MixedNormExponents) -> Result<f64> {
    if f.shape() != Shape::Scalar {
        return Err(LabError::ShapeMismatch("Krylov integrand must be scalar".into()));
    }
    if f.samples().iter().any(|&v| v < 0.0) {
        return Err(LabError::Precondition("Krylov integrand must be nonnegative".into()));
    }
    let norm = mixed_norm(f, e)?;
    if norm == 0.0 {
        return Err(LabError::DivisionGuard("Krylov integrand has zero mixed norm".into()));
    }
    Ok(norm)
}

/// `E[int f(t, X_t) dt] / ||f||` for each integrand, on shared paths.
pub fn krylov_ratios(
    fs: &[GridField],
    c: &SdeCoefficients,
    e: &MixedNormExponents,
    x0: &[f64],
    s: &MonteCarloSettings,
) -> Result<Vec<KrylovRatio>> {
    let norms = fs
        .iter()
        .map(|f| check_krylov_integrand(f, e))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&dyn ScalarFn> = fs.iter().map(|f| f as &dyn ScalarFn).collect();
    let means = occupation_family(&refs, c, x0, s)?;
    Ok(means
        .into_iter()
        .zip(norms)
        .map(|(numerator, norm)| KrylovRatio {
            ratio: numerator.mean / norm,
            numerator,
            norm,
        })
        .collect())
}

pub fn krylov_estimate_ratio(
    f: &GridField,
    c: &SdeCoefficients,
    e: &MixedNormExponents,
    x0: &[f64],
    s: &MonteCarloSettings,
) -> Result<KrylovRatio> {
    Ok(krylov_ratios(std::slice::from_ref(f), c, e, x0, s)?[0])
}

/// Start times and restart states at which the conditional smallness
/// hypothesis is sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KhasminskiiSettings {
    pub t0_count: usize,
    pub restart_states: Vec<Vec<f64>>,
    pub conditional_paths: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalSample {
    pub t0: f64,
    pub state: Vec<f64>,
    pub mean: MeanEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KhasminskiiCheck {
    pub lhs: MeanEstimate,
    pub rhs: f64,
    pub alpha: f64,
    pub samples: Vec<ConditionalSample>,
    pub satisfied: bool,
}

/// Largest conditional expectation `E[int_{t0}^T f_k dt | X_{t0} = y]` over
/// the sampled start times, restart states and integrands.
fn conditional_alpha(
    fs: &[&dyn ScalarFn],
    c: &SdeCoefficients,
    x0: &[f64],
    s: &MonteCarloSettings,
    k: &KhasminskiiSettings,
    label: &str,
) -> Result<(f64, Vec<ConditionalSample>)> {
    if k.t0_count == 0 || k.conditional_paths == 0 {
        return Err(LabError::Precondition("Khasminskii sampling needs start times and paths".into()));
    }
    let mut states = vec![x0.to_vec()];
    for y in &k.restart_states {
        if !states.contains(y) {
            states.push(y.clone());
        }
    }
    let mut samples = Vec::new();
    let mut alpha: f64 = 0.0;
    for j in 0..k.t0_count {
        let start_step = j * s.num_steps / k.t0_count;
        for (m, y) in states.iter().enumerate() {
            if y.len() != c.dim() || !c.in_box(y) {
                return Err(LabError::Precondition(format!("restart state {y:?} is not in the box")));
            }
            let sub = MonteCarloSettings {
                seed: derive_seed(s.seed, &format!("{label}-conditional-{j}-{m}")),
                num_paths: k.conditional_paths,
                ..*s
            };
            let (rows, _) = occupation_paths(fs, c, start_step, y, &sub)?;
            for idx in 0..fs.len() {
                let mean = MeanEstimate::from_samples(&column(&rows, idx));
                alpha = alpha.max(mean.mean);
                samples.push(ConditionalSample {
                    t0: start_step as f64 * s.dt(),
                    state: y.clone(),
                    mean,
                });
            }
        }
    }
    Ok((alpha, samples))
}

/// Compares `E[exp(int_0^T f dt)]` with `1 / (1 - alpha)`.
pub fn khasminskii_bound_check(
    f: &dyn ScalarFn,
    c: &SdeCoefficients,
    x0: &[f64],
    s: &MonteCarloSettings,
    k: &KhasminskiiSettings,
) -> Result<KhasminskiiCheck> {
    let (alpha, samples) = conditional_alpha(&[f], c, x0, s, k, "khasminskii")?;
    if alpha >= 1.0 {
        return Err(LabError::LemmaInapplicable(format!(
            "conditional expectation reaches {alpha:.4}, the lemma needs it below 1"
        )));
    }
    let lhs_settings = s.with_seed(derive_seed(s.seed, "khasminskii-lhs"));
    let (rows, _) = occupation_paths(&[f], c, 0, x0, &lhs_settings)?;
    let exps: Vec<f64> = rows.iter().map(|r| r[0].exp()).collect();
    let lhs = MeanEstimate::from_samples(&exps);
    let rhs = 1.0 / (1.0 - alpha);
    Ok(KhasminskiiCheck {
        satisfied: lhs.mean <= rhs + 3.0 * lhs.stderr,
        lhs,
        rhs,
        alpha,
        samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentBounds {
    /// `E[sup_t |X_t|]`.
    pub sup_mean_abs: MeanEstimate,
    /// `sup_t E[|X_t|^2]`, with the standard error at the maximizing time.
    pub sup_mean_sq: MeanEstimate,
    pub argmax_time: f64,
    pub absorbed_fraction: f64,
}

pub const MAX_ABSORBED_FRACTION: f64 = 0.01;

pub fn verify_moment_bounds(c: &SdeCoefficients, x0: &[f64], s: &MonteCarloSettings) -> Result<MomentBounds> {
    s.validate()?;
    let n = s.num_steps;
    let mut sq = vec![CompensatedSum::default(); n + 1];
    let mut quad = vec![CompensatedSum::default(); n + 1];
    let mut sups = Vec::with_capacity(s.num_paths);
    let mut absorbed = 0usize;
    ordered_paths(
        s.num_paths,
        |i| {
            let path = simulate_euler_from(c, 0.0, x0, &s.path(i, c.dim())?)?;
            let r2: Vec<f64> = (0..=n)
                .map(|k| path.state(k).iter().map(|v| v * v).sum())
                .collect();
            Ok((path.absorbed(), r2))
        },
        |_, (abs, r2)| {
            absorbed += usize::from(abs);
            let mut sup: f64 = 0.0;
            for (k, v) in r2.into_iter().enumerate() {
                sq[k].add(v);
                quad[k].add(v * v);
                sup = sup.max(v);
            }
            sups.push(sup.sqrt());
            Ok(())
        },
    )?;
    let absorbed_fraction = absorbed as f64 / s.num_paths as f64;
    if absorbed_fraction > MAX_ABSORBED_FRACTION {
        return Err(LabError::ScenarioInvalid(format!(
            "{:.2}% of paths left the box (limit {:.0}%)",
            100.0 * absorbed_fraction,
            100.0 * MAX_ABSORBED_FRACTION
        )));
    }
    let m = s.num_paths as f64;
    let (argmax, mean_sq) = sq
        .iter()
        .map(|acc| acc.value() / m)
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (k, v)| if v > best.1 { (k, v) } else { best });
    let var = if s.num_paths > 1 {
        ((quad[argmax].value() / m - mean_sq * mean_sq) * m / (m - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(MomentBounds {
        sup_mean_abs: MeanEstimate::from_samples(&sups),
        sup_mean_sq: MeanEstimate {
            mean: mean_sq,
            stderr: (var / m).sqrt(),
            n: s.num_paths,
        },
        argmax_time: argmax as f64 * s.dt(),
        absorbed_fraction,
    })
}

/// Beyond this value of `A_T`, `exp(A_T)` is capped and counted.
pub const EXP_CAP: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpMomentEstimate {
    pub mean_exp_a: f64,
    pub stderr: f64,
    pub n: usize,
    /// Number of paths whose `A_T` exceeded [`EXP_CAP`].
    pub capped_tail: usize,
}

/// Mean of `exp(A_T)` from per-path totals.
pub fn exp_moment_from_totals(a_totals: &[f64]) -> ExpMomentEstimate {
    let mut capped_tail = 0;
    let values: Vec<f64> = a_totals
        .iter()
        .map(|&a| {
            if a > EXP_CAP {
                capped_tail += 1;
                EXP_CAP.exp()
            } else {
                a.exp()
            }
        })
        .collect();
    let m = MeanEstimate::from_samples(&values);
    ExpMomentEstimate {
        mean_exp_a: m.mean,
        stderr: m.stderr,
        n: m.n,
        capped_tail,
    }
}

pub const MIN_EXP_MOMENT_PAIRS: usize = 1000;

pub fn estimate_exponential_moment(sims: &[PairedSimulation]) -> Result<ExpMomentEstimate> {
    if sims.len() < MIN_EXP_MOMENT_PAIRS {
        return Err(LabError::Precondition(format!(
            "exponential moment needs at least {MIN_EXP_MOMENT_PAIRS} paired paths, got {}",
            sims.len()
        )));
    }
    let totals: Vec<f64> = sims.iter().map(PairedSimulation::a_total).collect();
    Ok(exp_moment_from_totals(&totals))
}

/// Paired-path functionals for one pipeline depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelinePairStats {
    pub depth: usize,
    pub exp_moment: ExpMomentEstimate,
    /// `e_n = E[int |b^(n)(X1) - b^(n)(X2)|^2 dt]`.
    pub drift_difference: MeanEstimate,
    /// `E[exp(-A_T) |Y1_T - Y2_T|^2]`.
    pub weighted_gap: MeanEstimate,
    /// `E[int |X1 - X2| |b^(n)(X1) - b^(n)(X2)| dt]`.
    pub drift_gap_term: MeanEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedStatistics {
    pub per_pipeline: Vec<PipelinePairStats>,
    pub absorbed_fraction: f64,
}

/// Simulates paired paths once and evaluates every pipeline along them.
pub fn paired_statistics(
    pipes: &[TransformPipeline],
    c1: &SdeCoefficients,
    c2: &SdeCoefficients,
    x1: &[f64],
    x2: &[f64],
    s: &MonteCarloSettings,
) -> Result<PairedStatistics> {
    s.validate()?;
    let probe = s.path(0, c1.dim())?;
    for p in pipes {
        check_pair(c1, c2, &probe, p)?;
    }
    let k = pipes.len();
    let mut cols: Vec<[Vec<f64>; 4]> = (0..k).map(|_| Default::default()).collect();
    let mut absorbed = 0usize;
    ordered_paths(
        s.num_paths,
        |i| {
            let w = s.path(i, c1.dim())?;
            let p1 = simulate_euler_from(c1, 0.0, x1, &w)?;
            let p2 = simulate_euler_from(c2, 0.0, x2, &w)?;
            let traces: Vec<[f64; 4]> = pipes
                .iter()
                .map(|pipe| {
                    let t = trace_pair(pipe, &p1, &p2, false);
                    [
                        t.a_total,
                        t.drift_gap_sq,
                        (-t.a_total).exp() * t.final_gap_sq,
                        t.drift_gap_weighted,
                    ]
                })
                .collect();
            Ok((p1.absorbed() || p2.absorbed(), traces))
        },
        |_, (abs, traces)| {
            absorbed += usize::from(abs);
            for (col, t) in cols.iter_mut().zip(traces) {
                for q in 0..4 {
                    col[q].push(t[q]);
                }
            }
            Ok(())
        },
    )?;
    let per_pipeline = pipes
        .iter()
        .zip(&cols)
        .map(|(pipe, col)| PipelinePairStats {
            depth: pipe.depth(),
            exp_moment: exp_moment_from_totals(&col[0]),
            drift_difference: MeanEstimate::from_samples(&col[1]),
            weighted_gap: MeanEstimate::from_samples(&col[2]),
            drift_gap_term: MeanEstimate::from_samples(&col[3]),
        })
        .collect();
    Ok(PairedStatistics {
        per_pipeline,
        absorbed_fraction: absorbed as f64 / s.num_paths as f64,
    })
}

/// `e_n` for each pipeline.
pub fn verify_drift_convergence(
    pipes: &[TransformPipeline],
    c1: &SdeCoefficients,
    c2: &SdeCoefficients,
    x1: &[f64],
    x2: &[f64],
    s: &MonteCarloSettings,
) -> Result<Vec<MeanEstimate>> {
    Ok(paired_statistics(pipes, c1, c2, x1, x2, s)?
        .per_pipeline
        .into_iter()
        .map(|p| p.drift_difference)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupermartingaleShadow {
    pub depth: usize,
    pub lhs: MeanEstimate,
    pub rhs: f64,
    pub satisfied: bool,
}

/// `E[exp(-A_T)|Y1_T - Y2_T|^2] <= 9/4 |x1 - x2|^2 + 3 E[int |X1 - X2||db| dt] + 3 stderr`.
pub fn supermartingale_shadow(stats: &PipelinePairStats, x1: &[f64], x2: &[f64]) -> SupermartingaleShadow {
    let start: f64 = x1.iter().zip(x2).map(|(a, b)| (a - b) * (a - b)).sum();
    let lhs = stats.weighted_gap;
    let rhs = 2.25 * start + 3.0 * stats.drift_gap_term.mean + 3.0 * lhs.stderr;
    SupermartingaleShadow {
        depth: stats.depth,
        lhs,
        rhs,
        satisfied: lhs.mean <= rhs,
    }
}

/// Discrete Ito identity defect of `u` along one path at the final time;
/// `None` for absorbed paths.
pub fn ito_residual(
    u: &PdeSolution,
    path: &SamplePath,
    w: &BrownianPath,
    c: &SdeCoefficients,
) -> Result<Option<f64>> {
    let d = c.dim();
    let grid = u.u.grid();
    if grid.dim() != d || path.dim != d || w.dim != d || w.num_steps != path.num_steps() {
        return Err(LabError::ShapeMismatch("solution, path and noise disagree".into()));
    }
    if path.time(path.num_steps()) > grid.horizon() * (1.0 + 1e-9) {
        return Err(LabError::Precondition("path runs past the solution horizon".into()));
    }
    if path.absorbed() {
        return Ok(None);
    }
    let comps = u.u.components();
    let mut val0 = vec![0.0; comps];
    let mut val1 = vec![0.0; comps];
    let mut dtu = vec![0.0; comps];
    let mut du = vec![0.0; comps * d];
    let mut d2u = vec![0.0; comps * d * d];
    let mut b = vec![0.0; d];
    let mut s = vec![0.0; d * d];
    let mut acc: Vec<CompensatedSum> = vec![CompensatedSum::default(); comps];
    let dt = path.dt;
    for i in 0..path.num_steps() {
        let t = path.time(i);
        let x = path.state(i);
        u.dtu.interpolate(t, x, &mut dtu);
        u.du.interpolate(t, x, &mut du);
        u.d2u.interpolate(t, x, &mut d2u);
        c.drift_at(t, x, &mut b);
        c.diffusion_at(t, x, &mut s);
        let dw = w.increment(i);
        for cc in 0..comps {
            let mut gen = dtu[cc];
            for k in 0..d {
                gen += du[cc + comps * k] * b[k];
                for l in 0..d {
                    let a_kl: f64 = (0..d).map(|j| s[k + d * j] * s[l + d * j]).sum();
                    gen += 0.5 * a_kl * d2u[cc + comps * (k + d * l)];
                }
            }
            let mut mart = 0.0;
            for k in 0..d {
                for (j, wj) in dw.iter().enumerate() {
                    mart += du[cc + comps * k] * s[k + d * j] * wj;
                }
            }
            acc[cc].add(gen * dt + mart);
        }
    }
    u.u.interpolate(path.time(0), path.state(0), &mut val0);
    u.u.interpolate(path.time(path.num_steps()), path.final_state(), &mut val1);
    let r2: f64 = (0..comps)
        .map(|cc| {
            let r = val1[cc] - val0[cc] - acc[cc].value();
            r * r
        })
        .sum();
    Ok(Some(r2.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItoResidualSummary {
    pub dt: f64,
    pub rms: f64,
    pub used: usize,
    pub excluded: usize,
}

/// Root-mean-square Ito residual over paths; absorbed paths are excluded.
pub fn ito_residual_rms(
    u: &PdeSolution,
    c: &SdeCoefficients,
    x0: &[f64],
    s: &MonteCarloSettings,
) -> Result<ItoResidualSummary> {
    s.validate()?;
    let values = collect_paths(s.num_paths, |i| {
        let w = s.path(i, c.dim())?;
        let path = simulate_euler_from(c, 0.0, x0, &w)?;
        ito_residual(u, &path, &w, c)
    })?;
    let used: Vec<f64> = values.iter().flatten().map(|r| r * r).collect();
    if used.is_empty() {
        return Err(LabError::ScenarioInvalid("every path was absorbed".into()));
    }
    let mut acc = CompensatedSum::default();
    used.iter().for_each(|&v| acc.add(v));
    Ok(ItoResidualSummary {
        dt: s.dt(),
        rms: (acc.value() / used.len() as f64).sqrt(),
        used: used.len(),
        excluded: values.len() - used.len(),
    })
}

/// Drift-cap sweep: drift truncated at `1/eps` for each level and at `2/eps`
/// for its partner, all driven by one noise per path.
#[derive(Debug, Clone, PartialEq)]
pub struct UniquenessSettings {
    pub coefficients: SdeCoefficients,
    pub eps_levels: Vec<f64>,
    pub x0: Vec<f64>,
    pub mc: MonteCarloSettings,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniquenessPoint {
    pub eps: f64,
    /// `E[sup_t |X^eps_t - X^{eps/2}_t|]`.
    pub gap: MeanEstimate,
    /// Fraction of paths on which the two solutions separated at all.
    pub separated_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessCurve {
    pub points: Vec<UniquenessPoint>,
    pub absorbed_fraction: f64,
}

impl UniquenessCurve {
    pub fn strictly_decreasing(&self) -> bool {
        self.points.windows(2).all(|w| w[1].gap.mean < w[0].gap.mean)
    }

    pub fn final_over_first(&self) -> f64 {
        match (self.points.first(), self.points.last()) {
            (Some(a), Some(b)) if a.gap.mean > 0.0 => b.gap.mean / a.gap.mean,
            _ => 0.0,
        }
    }

    /// Both regularizations coincided on every path at every level.
    pub fn identically_zero(&self) -> bool {
        self.points.iter().all(|p| p.gap.mean == 0.0)
    }

    /// Strict decay with the last value at most `factor` times the first.
    pub fn decays(&self, factor: f64) -> bool {
        self.strictly_decreasing() && self.final_over_first() <= factor
    }
}

fn same_level(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

pub fn pathwise_uniqueness_experiment(u: &UniquenessSettings) -> Result<UniquenessCurve> {
    u.mc.validate()?;
    let c = u.coefficients.clone().without_drift_cap();
    let d = c.dim();
    if u.x0.len() != d || !c.in_box(&u.x0) {
        return Err(LabError::Precondition("start point must lie in the box".into()));
    }
    if u.eps_levels.is_empty() || u.eps_levels.iter().any(|&e| !(e.is_finite() && e > 0.0)) {
        return Err(LabError::Precondition("eps levels must be positive".into()));
    }
    // Distinct truncation levels, largest eps first, so that neighbouring
    // paths usually share their state and the coefficient evaluation.
    let mut levels: Vec<f64> = Vec::new();
    for &e in &u.eps_levels {
        for v in [e, 0.5 * e] {
            if !levels.iter().any(|&l| same_level(l, v)) {
                levels.push(v);
            }
        }
    }
    levels.sort_by(|a, b| b.total_cmp(a));
    let index = |v: f64| levels.iter().position(|&l| same_level(l, v)).expect("level present");
    let pairs: Vec<(usize, usize)> = u.eps_levels.iter().map(|&e| (index(e), index(0.5 * e))).collect();
    let caps: Vec<f64> = levels.iter().map(|e| 1.0 / e).collect();
    let k = levels.len();
    let dt = u.mc.dt();
    let sqrt_dt = dt.sqrt();
    let l = c.half_width();

    let per_path = |path: usize| -> Result<(bool, Vec<f64>)> {
        let mut rng = stream_rng(u.mc.seed, path as u64);
        let mut xs: Vec<f64> = (0..k).flat_map(|_| u.x0.iter().copied()).collect();
        let mut alive = vec![true; k];
        let mut shares = vec![false; k];
        let mut sup_gap_sq = vec![0.0f64; pairs.len()];
        let mut dw = vec![0.0; d];
        let mut raw_b = vec![0.0; d];
        let mut b = vec![0.0; d];
        let mut s = vec![0.0; d * d];
        let mut absorbed = false;
        for step in 0..u.mc.num_steps {
            let t = step as f64 * dt;
            dw.iter_mut().for_each(|w| *w = sqrt_dt * standard_normal(&mut rng));
            for j in 1..k {
                shares[j] = alive[j - 1] && xs[(j - 1) * d..j * d] == xs[j * d..(j + 1) * d];
            }
            for j in 0..k {
                if !alive[j] {
                    continue;
                }
                let x = &mut xs[j * d..(j + 1) * d];
                if !shares[j] {
                    c.drift_at(t, x, &mut raw_b);
                    c.diffusion_at(t, x, &mut s);
                }
                b.copy_from_slice(&raw_b);
                apply_cap(&mut b, caps[j]);
                let mut exited = false;
                for i in 0..d {
                    let mut next = x[i] + b[i] * dt;
                    for m in 0..d {
                        next += s[i + d * m] * dw[m];
                    }
                    if !next.is_finite() {
                        return Err(LabError::BlowUp { step });
                    }
                    exited |= next.abs() > l;
                    x[i] = next;
                }
                if exited {
                    x.iter_mut().for_each(|v| *v = v.clamp(-l, l));
                    alive[j] = false;
                    absorbed = true;
                }
            }
            for (g, &(p, q)) in sup_gap_sq.iter_mut().zip(&pairs) {
                let (xp, xq) = (&xs[p * d..(p + 1) * d], &xs[q * d..(q + 1) * d]);
                if xp != xq {
                    let gap: f64 = xp.iter().zip(xq).map(|(a, b)| (a - b) * (a - b)).sum();
                    *g = g.max(gap);
                }
            }
        }
        Ok((absorbed, sup_gap_sq.into_iter().map(f64::sqrt).collect()))
    };

    let mut gaps: Vec<Vec<f64>> = vec![Vec::with_capacity(u.mc.num_paths); pairs.len()];
    let mut absorbed = 0usize;
    ordered_paths(u.mc.num_paths, per_path, |_, (abs, g)| {
        absorbed += usize::from(abs);
        for (col, v) in gaps.iter_mut().zip(g) {
            col.push(v);
        }
        Ok(())
    })?;
    let points = u
        .eps_levels
        .iter()
        .zip(&gaps)
        .map(|(&eps, col)| UniquenessPoint {
            eps,
            gap: MeanEstimate::from_samples(col),
            separated_fraction: col.iter().filter(|&&g| g > 0.0).count() as f64 / col.len() as f64,
        })
        .collect();
    Ok(UniquenessCurve {
        points,
        absorbed_fraction: absorbed as f64 / u.mc.num_paths as f64,
    })
}

/// `(mu, beta, alpha)` of the exponential estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentialBoundParams {
    pub mu: f64,
    pub beta: f64,
    pub alpha: f64,
}

impl ExponentialBoundParams {
    /// Checks `(d/p + 2/q)(1 + mu) < 1/2`, `beta > 0` and `alpha` in (0, 1).
    pub fn new(mu: f64, beta: f64, alpha: f64, scaling_index: f64) -> Result<Self> {
        if !(mu > 0.0 && scaling_index * (1.0 + mu) < 0.5) {
            return Err(LabError::Validation(format!(
                "mu = {mu} violates (d/p+2/q)(1+mu) < 1/2 with d/p+2/q = {scaling_index}"
            )));
        }
        if !(beta.is_finite() && beta > 0.0) {
            return Err(LabError::Validation(format!("beta must be positive, got {beta}")));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(LabError::Validation(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        Ok(Self { mu, beta, alpha })
    }

    /// `ln[ exp(mu/(1+mu) (4/beta)^{(1+mu)/mu}) / (1 - alpha) ]`.
    pub fn log_bound(&self) -> f64 {
        let m = self.mu;
        m / (1.0 + m) * (4.0 / self.beta).powf((1.0 + m) / m) - (1.0 - self.alpha).ln()
    }
}

/// Half of the available slack: `mu = (1/(2s) - 1) / 2` for `s = d/p + 2/q`.
pub fn default_mu(scaling_index: f64) -> Result<f64> {
    if !(scaling_index > 0.0 && scaling_index < 0.5) {
        return Err(LabError::Validation(format!(
            "no mu > 0 satisfies (d/p+2/q)(1+mu) < 1/2 when d/p+2/q = {scaling_index}"
        )));
    }
    Ok(0.5 * (0.5 / scaling_index - 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentialTuning {
    pub params: ExponentialBoundParams,
    /// Largest sampled conditional expectation with `beta = 1`.
    pub alpha_at_unit_beta: f64,
    /// The same with the tuned `beta`.
    pub alpha_measured: f64,
    pub halvings: usize,
    pub log_bound: f64,
    pub samples: Vec<ConditionalSample>,
}

/// `T^{mu/(1+mu)}/(1+mu) |d_x sigma^(n)|^{2(1+mu)}` on the pipeline grid.
pub fn exponential_integrand(pipe: &TransformPipeline, mu: f64) -> Result<GridField> {
    let ds = gradient(pipe.sigma_n())?;
    let factor = pipe.horizon().powf(mu / (1.0 + mu)) / (1.0 + mu);
    let power = 2.0 * (1.0 + mu);
    let nodes = ds.grid().node_count();
    let samples = (0..nodes).map(|node| factor * ds.pointwise_norm(node).powf(power)).collect();
    GridField::new(ds.grid().clone(), Shape::Scalar, samples)
}

/// Halves `beta` from 1 until every sampled conditional expectation of
/// `beta^{1+mu}` times the integrand drops below `alpha`. The integrand is
/// linear in `beta^{1+mu}`, so one Monte-Carlo pass at `beta = 1` suffices.
#[allow(clippy::too_many_arguments)]
pub fn tune_exponential_params(
    pipes: &[TransformPipeline],
    c: &SdeCoefficients,
    x0: &[f64],
    scaling_index: f64,
    alpha: f64,
    mu: Option<f64>,
    s: &MonteCarloSettings,
    k: &KhasminskiiSettings,
) -> Result<ExponentialTuning> {
    let mu = match mu {
        Some(m) => m,
        None => default_mu(scaling_index)?,
    };
    ExponentialBoundParams::new(mu, 1.0, alpha, scaling_index)?;
    let fields = pipes
        .iter()
        .map(|p| exponential_integrand(p, mu))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&dyn ScalarFn> = fields.iter().map(|f| f as &dyn ScalarFn).collect();
    let (alpha_unit, samples) = conditional_alpha(&refs, c, x0, s, k, "exponential")?;
    let mut beta: f64 = 1.0;
    let mut halvings = 0;
    while beta.powf(1.0 + mu) * alpha_unit >= alpha {
        beta *= 0.5;
        halvings += 1;
        if halvings > 1000 {
            return Err(LabError::LemmaInapplicable("beta underflowed during tuning".into()));
        }
    }
    let params = ExponentialBoundParams::new(mu, beta, alpha, scaling_index)?;
    Ok(ExponentialTuning {
        alpha_at_unit_beta: alpha_unit,
        alpha_measured: beta.powf(1.0 + mu) * alpha_unit,
        halvings,
        log_bound: params.log_bound(),
        params,
        samples,
    })
}
