//! Scenario files: a TOML document describing one end-to-end experiment.
//!
//! ```toml
//! name = "capped-singularity-1d"
//! description = "..."
//!
//! [grid]            # horizon, time_steps, dim, half_width, space_points
//! [exponents]       # p, q, gradient_eps, strict
//! [drift]           # family = "constant" | "affine" | "sin_exp_bump" | "capped_power", plus parameters
//! [diffusion]       # same registry
//! [solver]          # theta, tolerance (optional)
//! [pipeline]        # n_max
//! [monte_carlo]     # seed, paths, num_steps, start, pair_offset, ...
//! [uniqueness]      # eps, paths, num_steps, horizon
//! [bounds]          # alpha, optional mu and beta
//! [khasminskii]     # t0_count, restart_states, conditional_paths
//! [output]          # dir (optional)
//! ```
//!
//! The full grammar, with defaults, is documented in the README.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};
use crate::grid::{check_exponent_condition, ExponentCheck, MixedNormExponents, SpaceTimeGrid};
use crate::pde::SolverConfig;
use crate::sde::{CoefficientFamily, KhasminskiiSettings, MonteCarloSettings, SdeCoefficients};

/// Bound on `d/p + 2/q` required by the uniqueness argument.
pub const EXPONENT_BOUND: f64 = 0.5;

/// Scenarios shipped with the crate, by name.
pub const SHIPPED: [(&str, &str); 3] = [
    ("zero-drift", include_str!("../scenarios/zero-drift.toml")),
    (
        "capped-singularity-1d",
        include_str!("../scenarios/capped-singularity-1d.toml"),
    ),
    (
        "capped-singularity-bump-1d",
        include_str!("../scenarios/capped-singularity-bump-1d.toml"),
    ),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub horizon: f64,
    pub time_steps: usize,
    pub dim: usize,
    pub half_width: f64,
    pub space_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExponentsSection {
    pub p: f64,
    pub q: f64,
    /// `eps` of the gradient smallness estimate; needs `eps + d/p + 2/q < 1`.
    pub gradient_eps: f64,
    /// Reject scenarios with `d/p + 2/q >= 1/2` instead of warning.
    #[serde(default = "yes")]
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    pub n_max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloSection {
    pub seed: u64,
    /// Paired paths for the drift, exponential-moment and shadow statistics.
    pub paths: usize,
    /// Euler steps over the certified horizon.
    pub num_steps: usize,
    pub start: Vec<f64>,
    /// The second start point is `start + pair_offset` in every coordinate.
    pub pair_offset: f64,
    /// Truncation of the drift during simulation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift_cap: Option<f64>,
    /// Euler steps for simulations over the full grid horizon.
    pub long_steps: usize,
    /// Paths for the moment and Krylov estimates.
    pub long_paths: usize,
    /// Paths per level of the Ito residual refinement.
    pub ito_paths: usize,
    /// Random pairs for the bilipschitz check.
    pub bilipschitz_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniquenessSection {
    pub eps: Vec<f64>,
    pub paths: usize,
    pub num_steps: usize,
    pub horizon: f64,
    /// Defaults to the Monte-Carlo start point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSection {
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    /// When set, replaces the tuned `beta`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KhasminskiiSection {
    pub t0_count: usize,
    #[serde(default)]
    pub restart_states: Vec<Vec<f64>>,
    pub conditional_paths: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub grid: GridSection,
    pub exponents: ExponentsSection,
    pub drift: CoefficientFamily,
    pub diffusion: CoefficientFamily,
    #[serde(default)]
    pub solver: SolverConfig,
    pub pipeline: PipelineSection,
    pub monte_carlo: MonteCarloSection,
    pub uniqueness: UniquenessSection,
    pub bounds: BoundsSection,
    pub khasminskii: KhasminskiiSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn yes() -> bool {
    true
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> LabError {
    LabError::Validation(format!("{field}: {msg}"))
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(field, format!("must be positive and finite, got {v}")))
    }
}

fn nonzero(field: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(invalid(field, "must be positive"))
    } else {
        Ok(())
    }
}

fn point(field: &str, x: &[f64], dim: usize, half_width: f64) -> Result<()> {
    if x.len() != dim {
        return Err(invalid(field, format!("needs {dim} coordinates, got {}", x.len())));
    }
    if x.iter().any(|v| !v.is_finite() || v.abs() >= half_width) {
        return Err(invalid(field, format!("{x:?} must lie inside the box of half-width {half_width}")));
    }
    Ok(())
}

impl Scenario {
    /// Parses and validates a scenario document.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| LabError::Validation(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    /// Loads a scenario file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// A shipped scenario by name, or a file path.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match shipped(name_or_path) {
            Some(text) => Self::from_toml_str(text),
            None => {
                let path = Path::new(name_or_path);
                if !path.exists() {
                    return Err(LabError::Validation(format!(
                        "config: `{name_or_path}` is neither a file nor a shipped scenario ({})",
                        SHIPPED.map(|(n, _)| n).join(", ")
                    )));
                }
                Self::load(path)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(invalid("name", "must not be empty"));
        }
        let g = &self.grid;
        self.space_time_grid().map_err(|e| invalid("grid", e))?;
        let e = self.exponents().map_err(|e| {
            let msg = e.to_string();
            let field = if msg.contains("q must") { "exponents.q" } else { "exponents.p" };
            invalid(field, msg.trim_start_matches("invalid exponents: "))
        })?;
        let s = e.scaling_index(g.dim);
        let eps = self.exponents.gradient_eps;
        if !(eps > 0.0 && eps < 1.0 && eps + s < 1.0) {
            return Err(invalid(
                "exponents.gradient_eps",
                format!("{eps} must lie in (0, 1) with eps + d/p + 2/q < 1 (d/p + 2/q = {s})"),
            ));
        }
        if self.exponents.strict && !self.exponent_check().satisfied {
            return Err(invalid(
                "exponents",
                format!("d/p + 2/q = {s} must be below {EXPONENT_BOUND} (set strict = false to explore)"),
            ));
        }
        self.drift.validate().map_err(|e| invalid("drift", e))?;
        self.diffusion.validate().map_err(|e| invalid("diffusion", e))?;
        self.solver.validate().map_err(|e| invalid("solver", e))?;
        if self.pipeline.n_max == 0 {
            return Err(invalid("pipeline.n_max", "must be at least 1"));
        }

        let mc = &self.monte_carlo;
        nonzero("monte_carlo.paths", mc.paths)?;
        nonzero("monte_carlo.num_steps", mc.num_steps)?;
        nonzero("monte_carlo.long_steps", mc.long_steps)?;
        nonzero("monte_carlo.long_paths", mc.long_paths)?;
        nonzero("monte_carlo.ito_paths", mc.ito_paths)?;
        nonzero("monte_carlo.bilipschitz_pairs", mc.bilipschitz_pairs)?;
        if mc.num_steps < 4 {
            return Err(invalid("monte_carlo.num_steps", "needs at least 4 steps for the refinement sweeps"));
        }
        point("monte_carlo.start", &mc.start, g.dim, g.half_width)?;
        positive("monte_carlo.pair_offset", mc.pair_offset)?;
        let partner: Vec<f64> = mc.start.iter().map(|x| x + mc.pair_offset).collect();
        point("monte_carlo.pair_offset", &partner, g.dim, g.half_width)?;
        if let Some(cap) = mc.drift_cap {
            positive("monte_carlo.drift_cap", cap)?;
        }

        let u = &self.uniqueness;
        if u.eps.len() < 2 {
            return Err(invalid("uniqueness.eps", "needs at least two levels"));
        }
        for &x in &u.eps {
            positive("uniqueness.eps", x)?;
        }
        if u.eps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(invalid("uniqueness.eps", "levels must be strictly decreasing"));
        }
        nonzero("uniqueness.paths", u.paths)?;
        nonzero("uniqueness.num_steps", u.num_steps)?;
        positive("uniqueness.horizon", u.horizon)?;
        if let Some(x) = &u.start {
            point("uniqueness.start", x, g.dim, g.half_width)?;
        }

        let b = &self.bounds;
        if !(b.alpha > 0.0 && b.alpha < 1.0) {
            return Err(invalid("bounds.alpha", format!("must lie in (0, 1), got {}", b.alpha)));
        }
        if let Some(mu) = b.mu {
            if !(mu > 0.0 && s * (1.0 + mu) < 0.5) {
                return Err(invalid(
                    "bounds.mu",
                    format!("{mu} violates (d/p + 2/q)(1 + mu) < 1/2 with d/p + 2/q = {s}"),
                ));
            }
        }
        if let Some(beta) = b.beta {
            positive("bounds.beta", beta)?;
        }

        let k = &self.khasminskii;
        nonzero("khasminskii.t0_count", k.t0_count)?;
        nonzero("khasminskii.conditional_paths", k.conditional_paths)?;
        for x in &k.restart_states {
            point("khasminskii.restart_states", x, g.dim, g.half_width)?;
        }
        Ok(())
    }

    pub fn space_time_grid(&self) -> Result<SpaceTimeGrid> {
        let g = &self.grid;
        SpaceTimeGrid::new(g.horizon, g.time_steps, g.dim, g.half_width, g.space_points)
    }

    pub fn exponents(&self) -> Result<MixedNormExponents> {
        MixedNormExponents::new(self.exponents.p, self.exponents.q)
    }

    /// `d/p + 2/q < 1/2`; only meaningful after the exponents validated.
    pub fn exponent_check(&self) -> ExponentCheck {
        match self.exponents() {
            Ok(e) => check_exponent_condition(self.grid.dim, &e, EXPONENT_BOUND),
            Err(_) => ExponentCheck {
                satisfied: false,
                margin: f64::NAN,
            },
        }
    }

    pub fn coefficients(&self) -> Result<SdeCoefficients> {
        SdeCoefficients::closed(
            self.drift.clone(),
            self.diffusion.clone(),
            self.grid.dim,
            self.grid.half_width,
        )
    }

    /// Coefficients with the configured simulation cap applied.
    pub fn simulation_coefficients(&self) -> Result<SdeCoefficients> {
        let c = self.coefficients()?;
        match self.monte_carlo.drift_cap {
            Some(cap) => c.with_drift_cap(cap),
            None => Ok(c),
        }
    }

    pub fn pair_start(&self) -> Vec<f64> {
        let mc = &self.monte_carlo;
        mc.start.iter().map(|x| x + mc.pair_offset).collect()
    }

    /// Paired-path settings on a working horizon.
    pub fn paired_settings(&self, horizon: f64) -> Result<MonteCarloSettings> {
        let mc = &self.monte_carlo;
        MonteCarloSettings::new(mc.seed, mc.paths, mc.num_steps, horizon)
    }

    /// Settings over the full grid horizon.
    pub fn long_settings(&self) -> Result<MonteCarloSettings> {
        let mc = &self.monte_carlo;
        MonteCarloSettings::new(mc.seed, mc.long_paths, mc.long_steps, self.grid.horizon)
    }

    pub fn khasminskii_settings(&self) -> KhasminskiiSettings {
        let k = &self.khasminskii;
        KhasminskiiSettings {
            t0_count: k.t0_count,
            restart_states: k.restart_states.clone(),
            conditional_paths: k.conditional_paths,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.monte_carlo.seed = seed;
        self
    }

    /// Canonical TOML rendering; the echo written into every output file.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LabError::Parse(e.to_string()))
    }

    /// SHA-256 of the canonical rendering, in hex.
    pub fn config_hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output
            .dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("sdelab-out").join(&self.name))
    }
}

pub fn shipped(name: &str) -> Option<&'static str> {
    SHIPPED.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioListing {
    pub name: String,
    pub description: String,
}

pub fn list_scenarios() -> Result<Vec<ScenarioListing>> {
    SHIPPED
        .iter()
        .map(|(name, text)| {
            let s = Scenario::from_toml_str(text)?;
            Ok(ScenarioListing {
                name: name.to_string(),
                description: s.description,
            })
        })
        .collect()
}
