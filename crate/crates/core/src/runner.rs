//! End-to-end scenario execution.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use crate::error::{LabError, Result};
use crate::grid::{mixed_norm, sup_norm, GridField, MixedNormExponents};
use crate::pde::{assemble_diffusion, verify_gradient_smallness, verify_regularity_estimate, DiffusionField};
use crate::report::{
    emit_report, write_provenance, ExperimentReport, Format, Provenance, ReportEntry, RunTimestamps, Statistic,
    Status,
};
use crate::scenario::{Scenario, EXPONENT_BOUND};
use crate::sde::rng::{open_uniform, stream_rng};
use crate::sde::{
    derive_seed, ito_residual_rms, khasminskii_bound_check, krylov_ratios, paired_statistics,
    pathwise_uniqueness_experiment, supermartingale_shadow, tune_exponential_params, verify_moment_bounds,
    ExponentialBoundParams, MeanEstimate, MonteCarloSettings, PipelinePairStats, SdeCoefficients,
    UniquenessSettings,
};
use crate::transform::{
    build_pipeline, build_pipeline_family, find_small_horizon, verify_bilipschitz, verify_contraction,
    verify_second_derivative_bound, TransformPipeline, GRADIENT_SUM_BOUND,
};

pub const CONTRACTION_LIMIT: f64 = 1.1;
pub const BILIPSCHITZ_RANGE: (f64, f64) = (0.45, 1.55);
pub const SECOND_DERIVATIVE_SPREAD: f64 = 2.0;
pub const DRIFT_RATIO_LIMIT: f64 = 0.6;
pub const EXP_MOMENT_SE_BAND: f64 = 2.0;
pub const EXP_MOMENT_GROWTH: f64 = 10.0;
pub const KRYLOV_SPREAD: f64 = 20.0;
pub const ITO_ORDER_MIN: f64 = 0.4;
pub const UNIQUENESS_DECAY: f64 = 0.2;
pub const KRYLOV_FAMILY_SIZE: usize = 10;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides the scenario's output directory.
    pub out_dir: Option<PathBuf>,
    /// Skip writing artifacts.
    pub dry_run: bool,
    /// Stage names on stderr.
    pub progress: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: ExperimentReport,
    /// Files written, in order: JSON, CSV, provenance.
    pub files: Vec<PathBuf>,
}

/// Loads, runs and writes a scenario with default options.
pub fn run_scenario(config_path: &Path) -> Result<ExperimentReport> {
    let s = Scenario::load(config_path)?;
    Ok(run_scenario_with(&s, &RunOptions::default())?.report)
}

struct Stager {
    progress: bool,
}

impl Stager {
    fn run<T>(&self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        if self.progress {
            eprintln!("[{name}] ...");
        }
        let out = f().map_err(|e| match e {
            LabError::Validation(_) => e,
            other => LabError::InStage {
                stage: name.to_string(),
                source: Box::new(other),
            },
        });
        if self.progress {
            eprintln!("[{name}] {:.1}s", start.elapsed().as_secs_f64());
        }
        out
    }
}

/// Shared state of one run.
pub struct ScenarioContext {
    pub scenario: Scenario,
    pub exponents: MixedNormExponents,
    pub coefficients: SdeCoefficients,
    pub simulation: SdeCoefficients,
    pub drift: GridField,
    pub diffusion: DiffusionField,
}

impl ScenarioContext {
    pub fn new(s: &Scenario) -> Result<Self> {
        s.validate()?;
        let grid = s.space_time_grid()?;
        let coefficients = s.coefficients()?;
        let drift = coefficients.drift_field(&grid)?;
        let diffusion = assemble_diffusion(&coefficients.diffusion_field(&grid)?)?;
        Ok(Self {
            scenario: s.clone(),
            exponents: s.exponents()?,
            simulation: s.simulation_coefficients()?,
            coefficients,
            drift,
            diffusion,
        })
    }

    fn seeded(&self, label: &str, s: MonteCarloSettings) -> MonteCarloSettings {
        s.with_seed(derive_seed(self.scenario.monte_carlo.seed, label))
    }
}

pub fn run_scenario_with(s: &Scenario, opts: &RunOptions) -> Result<RunOutcome> {
    let started = SystemTime::now();
    let clock = Instant::now();
    let st = Stager { progress: opts.progress };
    let ctx = st.run("setup", || ScenarioContext::new(s))?;
    let mut entries = Vec::new();

    entries.push(exponent_entry(&ctx));
    entries.extend(st.run("pde", || pde_entries(&ctx))?);
    let (cert_entry, t0) = st.run("certificate", || certificate_entry(&ctx))?;
    entries.push(cert_entry);
    let pipes = st.run("pipeline", || {
        build_pipeline_family(&ctx.drift, &ctx.diffusion, s.pipeline.n_max, t0, &s.solver)
    })?;
    entries.push(st.run("lemma_i", || contraction_entry(&ctx, &pipes))?);
    entries.push(st.run("lemma_iii", || second_derivative_entry(&ctx, &pipes))?);
    entries.push(st.run("lemma_iv", || bilipschitz_entry(&ctx, &pipes))?);
    entries.push(st.run("moments", || moments_entry(&ctx))?);
    let paired = st.run("paired", || paired_entries(&ctx, &pipes))?;
    entries.extend(paired);
    entries.push(st.run("dt_trend", || dt_trend_entry(&ctx, &pipes))?);
    entries.push(st.run("krylov", || krylov_entry(&ctx))?);
    entries.push(st.run("ito_residual", || ito_entry(&ctx, &pipes))?);
    entries.push(st.run("uniqueness", || uniqueness_entry(&ctx))?);

    let report = ExperimentReport {
        scenario: s.name.clone(),
        provenance: Provenance {
            config_hash: s.config_hash()?,
            seed: s.monte_carlo.seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
        },
        config: s.to_toml()?,
        entries,
    };
    let mut files = Vec::new();
    if !opts.dry_run {
        let dir = opts.out_dir.clone().unwrap_or_else(|| s.output_dir());
        files.push(emit_report(&report, Format::Json, &dir)?);
        files.push(emit_report(&report, Format::Csv, &dir)?);
        let ms = |t: SystemTime| t.duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
        files.push(write_provenance(
            &RunTimestamps {
                scenario: s.name.clone(),
                seed: s.monte_carlo.seed,
                config_hash: report.provenance.config_hash.clone(),
                started_unix_ms: ms(started),
                finished_unix_ms: ms(SystemTime::now()),
                elapsed_ms: clock.elapsed().as_millis(),
            },
            &dir,
        )?);
    }
    Ok(RunOutcome { report, files })
}

fn mean_stat(name: &str, m: &MeanEstimate) -> Statistic {
    Statistic::new(name, m.mean).with_stderr(m.stderr)
}

pub fn exponent_entry(ctx: &ScenarioContext) -> ReportEntry {
    let s = &ctx.scenario;
    let check = s.exponent_check();
    let index = ctx.exponents.scaling_index(s.grid.dim);
    let entry = ReportEntry::new("exponent_condition", "d/p + 2/q below the uniqueness threshold")
        .stat(Statistic::new("scaling_index", index))
        .stat(Statistic::new("margin", check.margin));
    if s.exponents.strict || check.satisfied {
        entry.checked("d/p + 2/q < 1/2", EXPONENT_BOUND, None, check.satisfied)
    } else {
        entry.note("warn-only mode: outside the regime covered by the uniqueness argument")
    }
}

pub fn pde_entries(ctx: &ScenarioContext) -> Result<Vec<ReportEntry>> {
    let s = &ctx.scenario;
    let pipe = build_pipeline(&ctx.drift, &ctx.diffusion, 0, s.grid.horizon, &s.solver)?;
    let sol = &pipe.stages()[0].solution;
    let rhs = ctx.drift.scaled(-1.0)?;
    let e = &ctx.exponents;
    let drift_norm = mixed_norm(&rhs, e)?;
    let mut regularity = ReportEntry::new("pde_regularity", "Sobolev norm of U_b against the norm of b")
        .stat(Statistic::new("drift_norm", drift_norm))
        .stat(Statistic::new("solution_sobolev_norm", sol.sobolev_norm(e)?))
        .stat(Statistic::new("c_sigma", ctx.diffusion.c_sigma()));
    let mut gradient = ReportEntry::new("gradient_smallness", "sup |d_x U_b| / (T^{eps/2} ||b||)")
        .stat(Statistic::new("sup_gradient", sup_norm(&sol.du)));
    if drift_norm > 0.0 {
        regularity = regularity.stat(Statistic::new("ratio", verify_regularity_estimate(sol, &rhs, e)?));
        gradient = gradient.stat(Statistic::new(
            "ratio",
            verify_gradient_smallness(sol, &rhs, s.exponents.gradient_eps, e)?,
        ));
    } else {
        regularity = regularity.note("zero right-hand side: the solution vanishes");
        gradient = gradient.note("zero right-hand side: the gradient vanishes");
    }
    Ok(vec![
        regularity.note_if_empty("the constant of the estimate is not explicit; ratio reported"),
        gradient.note_if_empty("the constant of the estimate is not explicit; ratio reported"),
    ])
}

trait NoteIfEmpty {
    fn note_if_empty(self, note: &str) -> Self;
}

impl NoteIfEmpty for ReportEntry {
    fn note_if_empty(self, note: &str) -> Self {
        if self.note.is_empty() {
            self.note(note)
        } else {
            self
        }
    }
}

pub fn certificate_entry(ctx: &ScenarioContext) -> Result<(ReportEntry, f64)> {
    let s = &ctx.scenario;
    let cert = find_small_horizon(&ctx.drift, &ctx.diffusion, s.pipeline.n_max, &ctx.exponents, &s.solver)?;
    let half = build_pipeline(&ctx.drift, &ctx.diffusion, s.pipeline.n_max, 0.5 * cert.t0, &s.solver)?;
    let half_sum = half.gradient_sum();
    let ok = cert.gradient_sum <= GRADIENT_SUM_BOUND && half_sum <= GRADIENT_SUM_BOUND;
    let entry = ReportEntry::new("lemma_ii", "sum of sup |d_x U_k| on the certified horizon")
        .checked("sum_k sup|d_x U_k| <= 1/2 at T0 and T0/2", GRADIENT_SUM_BOUND, None, ok)
        .stat(Statistic::new("t0", cert.t0))
        .stat(Statistic::new("gradient_sum", cert.gradient_sum))
        .stat(Statistic::new("gradient_sum_half_horizon", half_sum))
        .stat(Statistic::new("probes", cert.tested.len() as f64));
    Ok((entry, cert.t0))
}

pub fn contraction_entry(ctx: &ScenarioContext, pipes: &[TransformPipeline]) -> Result<ReportEntry> {
    let r = verify_contraction(pipes.last().expect("nonempty family"), &ctx.exponents)?;
    let ok = r.iter().all(|&x| x <= CONTRACTION_LIMIT);
    Ok(ReportEntry::new("lemma_i", "||b^(n)|| 2^{n+1} / ||b||")
        .checked("ratio <= 1 (+0.1 discretization allowance)", 1.0, Some(0.1), ok)
        .stats(r.iter().enumerate().map(|(n, &x)| Statistic::new("ratio", x).at(n))))
}

pub fn second_derivative_entry(ctx: &ScenarioContext, pipes: &[TransformPipeline]) -> Result<ReportEntry> {
    let norms = verify_second_derivative_bound(pipes, &ctx.exponents)?;
    let max = norms.iter().cloned().fold(0.0, f64::max);
    let min = norms.iter().cloned().fold(f64::INFINITY, f64::min);
    let (spread, ok) = if max == 0.0 {
        (1.0, true)
    } else if min > 0.0 {
        (max / min, max / min <= SECOND_DERIVATIVE_SPREAD)
    } else {
        (f64::MAX, false)
    };
    let mut entry = ReportEntry::new("lemma_iii", "||d_x^2 U^(n)|| stays bounded in n")
        .checked("max/min over n <= 2", SECOND_DERIVATIVE_SPREAD, None, ok)
        .stats(norms.iter().enumerate().map(|(n, &x)| Statistic::new("norm", x).at(n)))
        .stat(Statistic::new("spread", spread));
    if !ok {
        entry.status = Status::ReportOnly;
        entry.note = "spread exceeds the artifact threshold; sequence reported".into();
    }
    Ok(entry)
}

pub fn bilipschitz_entry(ctx: &ScenarioContext, pipes: &[TransformPipeline]) -> Result<ReportEntry> {
    let s = &ctx.scenario;
    let pipe = pipes.last().expect("nonempty family");
    let d = s.grid.dim;
    let reach = 0.8 * s.grid.half_width;
    let mut rng = stream_rng(derive_seed(s.monte_carlo.seed, "bilipschitz"), 0);
    let mut x1 = vec![0.0; d];
    let mut x2 = vec![0.0; d];
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    let mut violations = 0usize;
    let mut tested = 0usize;
    while tested < s.monte_carlo.bilipschitz_pairs {
        let t = open_uniform(&mut rng) * pipe.horizon();
        for k in 0..d {
            x1[k] = reach * (2.0 * open_uniform(&mut rng) - 1.0);
            x2[k] = reach * (2.0 * open_uniform(&mut rng) - 1.0);
        }
        let r = match verify_bilipschitz(pipe, &x1, &x2, t) {
            Ok(r) => r,
            Err(LabError::DegeneratePair(_)) => continue,
            Err(e) => return Err(e),
        };
        tested += 1;
        lo = lo.min(r);
        hi = hi.max(r);
        if r < BILIPSCHITZ_RANGE.0 || r > BILIPSCHITZ_RANGE.1 {
            violations += 1;
        }
    }
    Ok(ReportEntry::new("lemma_iv", "|Phi(x1) - Phi(x2)| / |x1 - x2| for Phi = id + U^(n)")
        .checked("ratio in [1/2, 3/2] (0.05 interpolation allowance)", 0.5, Some(0.05), violations == 0)
        .stat(Statistic::new("min_ratio", lo))
        .stat(Statistic::new("max_ratio", hi))
        .stat(Statistic::new("violations", violations as f64))
        .stat(Statistic::new("pairs", tested as f64)))
}

pub fn moments_entry(ctx: &ScenarioContext) -> Result<ReportEntry> {
    let s = &ctx.scenario;
    let mc = ctx.seeded("moments", s.long_settings()?);
    let m = verify_moment_bounds(&ctx.simulation, &s.monte_carlo.start, &mc)?;
    let ok = m.sup_mean_abs.mean.is_finite() && m.sup_mean_sq.mean.is_finite();
    Ok(ReportEntry::new("moments", "E[sup_t |X_t|] and sup_t E[|X_t|^2] over the full horizon")
        .checked("finite, absorbed fraction <= 1%", 0.01, None, ok)
        .stat(mean_stat("sup_mean_abs", &m.sup_mean_abs))
        .stat(mean_stat("sup_mean_sq", &m.sup_mean_sq))
        .stat(Statistic::new("argmax_time", m.argmax_time))
        .stat(Statistic::new("absorbed_fraction", m.absorbed_fraction)))
}

/// Drift convergence, supermartingale shadow, exponential moment and the
/// Khasminskii check with the tuned integrand.
pub fn paired_entries(ctx: &ScenarioContext, pipes: &[TransformPipeline]) -> Result<Vec<ReportEntry>> {
    let s = &ctx.scenario;
    let t0 = pipes[0].horizon();
    let mc = ctx.seeded("paired", s.paired_settings(t0)?);
    let x1 = &s.monte_carlo.start;
    let x2 = s.pair_start();
    let stats = paired_statistics(pipes, &ctx.simulation, &ctx.simulation, x1, &x2, &mc)?;
    let per = &stats.per_pipeline;

    let e: Vec<&MeanEstimate> = per.iter().map(|p| &p.drift_difference).collect();
    let mut ratios = Vec::new();
    for w in e.windows(2) {
        ratios.push(if w[0].mean == 0.0 { 0.0 } else { w[1].mean / w[0].mean });
    }
    let drift = ReportEntry::new("drift_convergence", "e_n = E[int |b^(n)(X1) - b^(n)(X2)|^2 dt]")
        .checked(
            "e_{n+1}/e_n <= 1/4 (0.6 allows Monte-Carlo noise)",
            0.25,
            Some(DRIFT_RATIO_LIMIT - 0.25),
            ratios.iter().all(|&r| r <= DRIFT_RATIO_LIMIT),
        )
        .stats(per.iter().map(|p| mean_stat("e", &p.drift_difference).at(p.depth)))
        .stats(ratios.iter().enumerate().map(|(n, &r)| Statistic::new("ratio", r).at(n)))
        .stat(Statistic::new("absorbed_fraction", stats.absorbed_fraction));

    let shadows: Vec<_> = per.iter().map(|p| supermartingale_shadow(p, x1, &x2)).collect();
    let shadow = ReportEntry::new(
        "supermartingale_shadow",
        "E[exp(-A_T)|Y1_T - Y2_T|^2] against the start gap and drift terms",
    )
    .checked(
        "lhs <= 9/4 |x1-x2|^2 + 3 E[int |X1-X2||db|] (+3 stderr)",
        2.25,
        Some(3.0),
        shadows.iter().all(|x| x.satisfied),
    )
    .stats(shadows.iter().map(|x| mean_stat("lhs", &x.lhs).at(x.depth)))
    .stats(shadows.iter().map(|x| Statistic::new("rhs", x.rhs).at(x.depth)));

    let tuning = tune_exponential_params(
        pipes,
        &ctx.simulation,
        x1,
        ctx.exponents.scaling_index(s.grid.dim),
        s.bounds.alpha,
        s.bounds.mu,
        &ctx.seeded("tuning", mc),
        &s.khasminskii_settings(),
    )?;
    let mut params = tuning.params;
    let mut alpha_measured = tuning.alpha_measured;
    if let Some(beta) = s.bounds.beta {
        params = ExponentialBoundParams::new(params.mu, beta, params.alpha, ctx.exponents.scaling_index(s.grid.dim))?;
        alpha_measured = beta.powf(1.0 + params.mu) * tuning.alpha_at_unit_beta;
    }
    let log_bound = params.log_bound();
    let exp_entry = exponential_entry(per, log_bound).stats([
        Statistic::new("mu", params.mu),
        Statistic::new("beta", params.beta),
        Statistic::new("alpha_at_unit_beta", tuning.alpha_at_unit_beta),
        Statistic::new("alpha_measured", alpha_measured),
        Statistic::new("log_bound", log_bound),
    ]);

    let pipe = pipes.last().expect("nonempty family");
    let f = crate::sde::exponential_integrand(pipe, params.mu)?.scaled(params.beta.powf(1.0 + params.mu))?;
    let k = khasminskii_bound_check(
        &f,
        &ctx.simulation,
        x1,
        &ctx.seeded("khasminskii", mc),
        &s.khasminskii_settings(),
    );
    let khas = ReportEntry::new("khasminskii", "E[exp(int f)] <= 1/(1 - alpha) for the tuned integrand");
    let khas = match k {
        Ok(k) => khas
            .checked("lhs <= 1/(1-alpha) + 3 stderr", k.rhs, Some(3.0), k.satisfied)
            .stat(mean_stat("lhs", &k.lhs))
            .stat(Statistic::new("rhs", k.rhs))
            .stat(Statistic::new("alpha", k.alpha))
            .stat(Statistic::new("sampled_states", k.samples.len() as f64))
            .note("conditional hypothesis sampled on a finite t0 grid with restart states"),
        Err(LabError::LemmaInapplicable(msg)) => khas.checked("alpha < 1", 1.0, None, false).note(msg),
        Err(e) => return Err(e),
    };
    Ok(vec![drift, shadow, exp_entry, khas])
}

/// Means within two standard errors of each other, none above ten times
/// the `n = 0` value, all below the tuned bound.
pub fn exponential_entry(per: &[PipelinePairStats], log_bound: f64) -> ReportEntry {
    let m: Vec<_> = per.iter().map(|p| &p.exp_moment).collect();
    let mut worst_band: f64 = 0.0;
    for i in 0..m.len() {
        for j in i + 1..m.len() {
            let se = (m[i].stderr.powi(2) + m[j].stderr.powi(2)).sqrt();
            let gap = (m[i].mean_exp_a - m[j].mean_exp_a).abs();
            let band = if se > 0.0 {
                gap / se
            } else if gap == 0.0 {
                0.0
            } else {
                f64::MAX
            };
            worst_band = worst_band.max(band);
        }
    }
    let base = m.first().map(|x| x.mean_exp_a).unwrap_or(1.0);
    let growth = m.iter().map(|x| x.mean_exp_a / base).fold(0.0, f64::max);
    let under_bound = m.iter().all(|x| x.mean_exp_a.ln() <= log_bound);
    let ok = worst_band <= EXP_MOMENT_SE_BAND && growth <= EXP_MOMENT_GROWTH && under_bound;
    ReportEntry::new("exponential_moment", "E[exp(A_T^(n))] uniform in n")
        .checked(
            "pairwise |m_i - m_j| <= 2 se, m_n <= 10 m_0, ln m_n <= log bound",
            EXP_MOMENT_SE_BAND,
            None,
            ok,
        )
        .stats(per.iter().map(|p| {
            Statistic::new("mean_exp_a", p.exp_moment.mean_exp_a)
                .with_stderr(p.exp_moment.stderr)
                .at(p.depth)
        }))
        .stats(per.iter().map(|p| Statistic::new("capped_tail", p.exp_moment.capped_tail as f64).at(p.depth)))
        .stat(Statistic::new("max_pairwise_gap_in_se", worst_band))
        .stat(Statistic::new("max_growth", growth))
}

/// Time-step refinement of `E[exp(A_T)]` at the deepest pipeline.
pub fn dt_trend_entry(ctx: &ScenarioContext, pipes: &[TransformPipeline]) -> Result<ReportEntry> {
    let s = &ctx.scenario;
    let pipe = pipes.last().expect("nonempty family");
    let base = ctx.seeded("dt-trend", s.paired_settings(pipe.horizon())?);
    let paths = (base.num_paths / 4).max(1);
    let x2 = s.pair_start();
    let mut entry = ReportEntry::new("exp_moment_dt_trend", "E[exp(A_T)] under time-step refinement")
        .note("report-only: how small dt must be for A_T to stabilize is scenario-dependent");
    for div in [4usize, 2, 1] {
        let steps = (base.num_steps / div).max(1);
        let mc = base.with_paths(paths).with_steps(steps);
        let st = paired_statistics(
            std::slice::from_ref(pipe),
            &ctx.simulation,
            &ctx.simulation,
            &s.monte_carlo.start,
            &x2,
            &mc,
        )?;
        let m = &st.per_pipeline[0].exp_moment;
        entry = entry.stat(
            Statistic::new(format!("mean_exp_a_steps_{steps}"), m.mean_exp_a)
                .with_stderr(m.stderr)
                .at(pipe.depth()),
        );
    }
    Ok(entry)
}

/// Ten nonnegative integrands: Gaussian bumps of several centres and
/// widths, two of them modulated in time.
pub fn krylov_family(grid: &crate::grid::SpaceTimeGrid) -> Result<Vec<GridField>> {
    let specs: [(f64, f64, bool); KRYLOV_FAMILY_SIZE] = [
        (0.0, 0.3, false),
        (0.0, 0.6, false),
        (0.0, 1.2, false),
        (0.5, 0.4, false),
        (-0.5, 0.4, false),
        (1.0, 0.8, false),
        (-1.0, 0.8, false),
        (0.25, 1.0, false),
        (0.0, 0.5, true),
        (0.5, 0.9, true),
    ];
    let horizon = grid.horizon();
    specs
        .iter()
        .map(|&(c, w, timed)| {
            GridField::scalar_from_fn(grid, |t, x| {
                let r2: f64 = x.iter().map(|v| (v - c) * (v - c)).sum();
                let space = (-0.5 * r2 / (w * w)).exp();
                if timed {
                    space * (1.0 + t / horizon)
                } else {
                    space
                }
            })
        })
        .collect()
}

pub fn krylov_entry(ctx: &ScenarioContext) -> Result<ReportEntry> {
    let s = &ctx.scenario;
    let fs = krylov_family(&s.space_time_grid()?)?;
    let mc = ctx.seeded("krylov", s.long_settings()?);
    let r = krylov_ratios(&fs, &ctx.simulation, &ctx.exponents, &s.monte_carlo.start, &mc)?;
    let max = r.iter().map(|x| x.ratio).fold(0.0, f64::max);
    let min = r.iter().map(|x| x.ratio).fold(f64::INFINITY, f64::min);
    let spread = if min > 0.0 { max / min } else { f64::MAX };
    Ok(ReportEntry::new("krylov", "E[int f(t, X_t) dt] / ||f|| over a family of integrands")
        .checked("max ratio / min ratio <= 20", KRYLOV_SPREAD, None, spread <= KRYLOV_SPREAD)
        .stats(r.iter().enumerate().map(|(k, x)| {
            Statistic::new(format!("ratio_f{k}"), x.ratio).with_stderr(x.numerator.stderr / x.norm)
        }))
        .stat(Statistic::new("spread", spread)))
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

pub fn ito_entry(ctx: &ScenarioContext, pipes: &[TransformPipeline]) -> Result<ReportEntry> {
    let s = &ctx.scenario;
    let pipe = &pipes[0];
    let u = &pipe.stages()[0].solution;
    let base = ctx
        .seeded("ito", s.paired_settings(pipe.horizon())?)
        .with_paths(s.monte_carlo.ito_paths);
    let mut dts = Vec::new();
    let mut rms = Vec::new();
    let mut entry = ReportEntry::new("ito_residual", "RMS defect of the discrete Ito identity for U_b");
    for div in [4usize, 2, 1] {
        let mc = base.with_steps((base.num_steps / div).max(1));
        let r = ito_residual_rms(u, &ctx.simulation, &s.monte_carlo.start, &mc)?;
        entry = entry.stat(Statistic::new("rms", r.rms).at(mc.num_steps));
        dts.push(r.dt);
        rms.push(r.rms);
    }
    if rms.iter().all(|&r| r == 0.0) {
        return Ok(entry
            .checked("order >= 0.4 (theory 1/2)", 0.5, Some(0.1), true)
            .note("U_b vanishes: the identity holds exactly"));
    }
    let order = log_log_slope(&dts, &rms);
    Ok(entry
        .checked("order >= 0.4 (theory 1/2)", 0.5, Some(0.1), order >= ITO_ORDER_MIN)
        .stat(Statistic::new("order", order)))
}

pub fn uniqueness_settings(ctx: &ScenarioContext) -> Result<UniquenessSettings> {
    let s = &ctx.scenario;
    let u = &s.uniqueness;
    let mc = MonteCarloSettings::new(
        derive_seed(s.monte_carlo.seed, "uniqueness"),
        u.paths,
        u.num_steps,
        u.horizon,
    )?;
    Ok(UniquenessSettings {
        coefficients: ctx.coefficients.clone(),
        eps_levels: u.eps.clone(),
        x0: u.start.clone().unwrap_or_else(|| s.monte_carlo.start.clone()),
        mc,
    })
}

pub fn uniqueness_entry(ctx: &ScenarioContext) -> Result<ReportEntry> {
    let curve = pathwise_uniqueness_experiment(&uniqueness_settings(ctx)?)?;
    let zero = curve.identically_zero();
    let ok = zero || curve.decays(UNIQUENESS_DECAY);
    let mut entry = ReportEntry::new("uniqueness_decay", "E[sup_t |X^eps - X^{eps/2}|] as eps decreases")
        .checked("strictly decreasing, last <= 0.2 x first", UNIQUENESS_DECAY, None, ok)
        .stats(curve.points.iter().map(|p| mean_stat("gap", &p.gap).at_eps(p.eps)))
        .stats(
            curve
                .points
                .iter()
                .map(|p| Statistic::new("separated_fraction", p.separated_fraction).at_eps(p.eps)),
        )
        .stat(Statistic::new("final_over_first", curve.final_over_first()))
        .stat(Statistic::new("absorbed_fraction", curve.absorbed_fraction));
    if zero {
        entry = entry.note("both truncations coincide on every path");
    }
    Ok(entry)
}
