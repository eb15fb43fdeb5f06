use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sdelab::grid::io::{write_field, Encoding};
use sdelab::grid::{mixed_norm, sup_norm};
use sdelab::pde::{verify_gradient_smallness, verify_regularity_estimate};
use sdelab::report::{emit_report, Format};
use sdelab::runner::{run_scenario_with, RunOptions, ScenarioContext};
use sdelab::scenario::{list_scenarios, Scenario};
use sdelab::sde::{derive_seed, simulate_euler, verify_moment_bounds};
use sdelab::transform::{build_pipeline, find_small_horizon, write_pipeline};
use sdelab::Result;

#[derive(Parser)]
#[command(name = "sdelab", version, about = "Numerical laboratory for singular-drift SDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario file, or the name of a shipped scenario.
    #[arg(long)]
    config: String,
    /// Master seed, replacing the one in the scenario.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// json, csv or text.
    #[arg(long, default_value = "text")]
    format: String,
}

#[derive(Subcommand)]
enum Command {
    /// Mixed norms of the coefficients and the exponent condition.
    Norm(Common),
    /// Solve the backward equation with right-hand side -b on the full grid.
    PdeSolve(Common),
    /// Certify a horizon and write the transformation pipeline.
    Transform(Common),
    /// Bisection for a horizon with gradient sum at most 1/2.
    CertifyHorizon(Common),
    /// Euler-Maruyama paths and moment estimates.
    Simulate(Common),
    /// Run the full scenario and print the lemma table.
    Verify(Common),
    /// Run the full scenario and emit the report in the chosen format.
    Report(Common),
    /// Shipped scenarios.
    List {
        #[arg(long, default_value = "text")]
        format: String,
    },
}

/// Ordered key-value output shared by the small subcommands.
struct Table(Vec<(String, String)>);

impl Table {
    fn new() -> Self {
        Table(Vec::new())
    }

    fn put(&mut self, key: impl Into<String>, value: impl ToString) {
        self.0.push((key.into(), value.to_string()));
    }

    fn render(&self, format: Format) -> Result<String> {
        Ok(match format {
            Format::Json => {
                let map: serde_json::Map<String, serde_json::Value> = self
                    .0
                    .iter()
                    .map(|(k, v)| {
                        let number = v
                            .parse::<i64>()
                            .ok()
                            .map(serde_json::Number::from)
                            .or_else(|| v.parse::<f64>().ok().and_then(serde_json::Number::from_f64));
                        let val = number
                            .map(serde_json::Value::Number)
                            .unwrap_or_else(|| serde_json::Value::String(v.clone()));
                        (k.clone(), val)
                    })
                    .collect();
                serde_json::to_string_pretty(&map)? + "\n"
            }
            Format::Csv => {
                let mut s = String::from("quantity,value\n");
                for (k, v) in &self.0 {
                    s.push_str(&format!("{k},{v}\n"));
                }
                s
            }
            Format::Text => {
                let width = self.0.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
                self.0.iter().map(|(k, v)| format!("{k:<width$}  {v}\n")).collect()
            }
        })
    }
}

fn load(c: &Common) -> Result<Scenario> {
    let s = Scenario::resolve(&c.config)?;
    Ok(match c.seed {
        Some(seed) => s.with_seed(seed),
        None => s,
    })
}

fn out_dir(c: &Common, s: &Scenario) -> PathBuf {
    c.out.clone().unwrap_or_else(|| s.output_dir())
}

fn print_table(t: &Table, c: &Common, file: &str) -> Result<ExitCode> {
    let format: Format = c.format.parse()?;
    let text = t.render(format)?;
    print!("{text}");
    if let Some(dir) = &c.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{file}.{}", format.extension())), text)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn norm(c: &Common) -> Result<ExitCode> {
    let s = load(c)?;
    let ctx = ScenarioContext::new(&s)?;
    let check = s.exponent_check();
    let mut t = Table::new();
    t.put("scenario", &s.name);
    t.put("p", s.exponents.p);
    t.put("q", s.exponents.q);
    t.put("scaling_index", ctx.exponents.scaling_index(s.grid.dim));
    t.put("exponent_condition", if check.satisfied { "satisfied" } else { "violated" });
    t.put("drift_mixed_norm", mixed_norm(&ctx.drift, &ctx.exponents)?);
    t.put("drift_grid_sup", sup_norm(&ctx.drift));
    t.put("diffusion_mixed_norm", mixed_norm(ctx.diffusion.sigma(), &ctx.exponents)?);
    t.put("c_sigma", ctx.diffusion.c_sigma());
    print_table(&t, c, "norm")
}

fn pde_solve(c: &Common) -> Result<ExitCode> {
    let s = load(c)?;
    let ctx = ScenarioContext::new(&s)?;
    let pipe = build_pipeline(&ctx.drift, &ctx.diffusion, 0, s.grid.horizon, &s.solver)?;
    let sol = &pipe.stages()[0].solution;
    let rhs = ctx.drift.scaled(-1.0)?;
    let mut t = Table::new();
    t.put("scenario", &s.name);
    t.put("sup_u", sup_norm(&sol.u));
    t.put("sup_gradient", sup_norm(&sol.du));
    t.put("sobolev_norm", sol.sobolev_norm(&ctx.exponents)?);
    if let Some(r) = sol.residual {
        t.put("scheme_residual", r);
    }
    if mixed_norm(&rhs, &ctx.exponents)? > 0.0 {
        t.put("regularity_ratio", verify_regularity_estimate(sol, &rhs, &ctx.exponents)?);
        t.put(
            "gradient_smallness_ratio",
            verify_gradient_smallness(sol, &rhs, s.exponents.gradient_eps, &ctx.exponents)?,
        );
    }
    if let Some(dir) = &c.out {
        let header = write_field(&sol.u, &dir.join("u"), Encoding::F64Le)?;
        t.put("written", header.display());
    }
    print_table(&t, c, "pde")
}

fn certify(c: &Common, write: bool) -> Result<ExitCode> {
    let s = load(c)?;
    let ctx = ScenarioContext::new(&s)?;
    let cert = find_small_horizon(&ctx.drift, &ctx.diffusion, s.pipeline.n_max, &ctx.exponents, &s.solver)?;
    let mut t = Table::new();
    t.put("scenario", &s.name);
    t.put("t0", cert.t0);
    t.put("gradient_sum", cert.gradient_sum);
    t.put("n_max", cert.n_max);
    for (k, r) in cert.contraction_ratios.iter().enumerate() {
        t.put(format!("contraction_ratio_{k}"), r);
    }
    for (k, p) in cert.tested.iter().enumerate() {
        t.put(
            format!("probe_{k}"),
            format!("horizon={} sum={} accepted={}", p.horizon, p.gradient_sum, p.accepted),
        );
    }
    if write {
        let dir = out_dir(c, &s).join("pipeline");
        let pipe = build_pipeline(&ctx.drift, &ctx.diffusion, s.pipeline.n_max, cert.t0, &s.solver)?;
        let manifest = write_pipeline(&pipe, &dir, Encoding::F64Le, Some(&cert))?;
        t.put("written", manifest.display());
    }
    print_table(&t, c, if write { "transform" } else { "certificate" })
}

/// Writes the first few long-horizon paths as `path,time,x...` rows.
fn write_paths(path: &Path, s: &Scenario, ctx: &ScenarioContext, count: usize) -> Result<()> {
    let mc = s.long_settings()?.with_seed(derive_seed(s.monte_carlo.seed, "simulate"));
    let d = s.grid.dim;
    let mut out = String::from("path,time");
    for k in 0..d {
        out.push_str(&format!(",x{k}"));
    }
    out.push('\n');
    for i in 0..count.min(mc.num_paths) {
        let w = mc.path(i, d)?;
        let p = simulate_euler(&ctx.simulation, &s.monte_carlo.start, &w)?;
        for step in 0..=p.num_steps() {
            out.push_str(&format!("{i},{}", p.time(step)));
            for x in p.state(step) {
                out.push_str(&format!(",{x}"));
            }
            out.push('\n');
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn simulate(c: &Common) -> Result<ExitCode> {
    let s = load(c)?;
    let ctx = ScenarioContext::new(&s)?;
    let mc = s.long_settings()?.with_seed(derive_seed(s.monte_carlo.seed, "moments"));
    let m = verify_moment_bounds(&ctx.simulation, &s.monte_carlo.start, &mc)?;
    let mut t = Table::new();
    t.put("scenario", &s.name);
    t.put("paths", mc.num_paths);
    t.put("num_steps", mc.num_steps);
    t.put("sup_mean_abs", m.sup_mean_abs.mean);
    t.put("sup_mean_abs_stderr", m.sup_mean_abs.stderr);
    t.put("sup_mean_sq", m.sup_mean_sq.mean);
    t.put("sup_mean_sq_stderr", m.sup_mean_sq.stderr);
    t.put("absorbed_fraction", m.absorbed_fraction);
    if let Some(dir) = &c.out {
        let file = dir.join("paths.csv");
        write_paths(&file, &s, &ctx, 20)?;
        t.put("written", file.display());
    }
    print_table(&t, c, "simulate")
}

fn run(c: &Common, emit: bool) -> Result<ExitCode> {
    let format: Format = c.format.parse()?;
    let s = load(c)?;
    let dir = out_dir(c, &s);
    let outcome = run_scenario_with(
        &s,
        &RunOptions {
            out_dir: Some(dir.clone()),
            dry_run: false,
            progress: true,
        },
    )?;
    let report = &outcome.report;
    if emit {
        emit_report(report, format, &dir)?;
        print!("{}", report.render(format)?);
    } else {
        print!("{}", report.to_text());
        for f in &outcome.files {
            eprintln!("wrote {}", f.display());
        }
    }
    if report.all_pass() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("failed: {}", report.failures().join(", "));
        Ok(ExitCode::from(1))
    }
}

fn list(format: &str) -> Result<ExitCode> {
    let format: Format = format.parse()?;
    let mut t = Table::new();
    for l in list_scenarios()? {
        t.put(l.name, l.description);
    }
    print!("{}", t.render(format)?);
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Norm(c) => norm(c),
        Command::PdeSolve(c) => pde_solve(c),
        Command::Transform(c) => certify(c, true),
        Command::CertifyHorizon(c) => certify(c, false),
        Command::Simulate(c) => simulate(c),
        Command::Verify(c) => run(c, false),
        Command::Report(c) => run(c, true),
        Command::List { format } => list(format),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
