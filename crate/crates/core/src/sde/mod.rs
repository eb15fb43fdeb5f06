//! Euler-Maruyama simulation of `dX = b dt + sigma dW` and Monte-Carlo
//! estimators for the probabilistic side of the uniqueness argument.

pub mod coefficients;
pub mod estimators;
pub mod rng;
pub mod sim;
pub mod stats;

pub use coefficients::{apply_cap, Coefficient, CoefficientFamily, ScalarFn, SdeCoefficients};
pub use estimators::{
    default_mu, estimate_exponential_moment, exp_moment_from_totals, exponential_integrand,
    ito_residual, ito_residual_rms, khasminskii_bound_check, krylov_estimate_ratio, krylov_ratios,
    occupation_expectation, occupation_family, paired_statistics, pathwise_uniqueness_experiment,
    supermartingale_shadow, tune_exponential_params, verify_drift_convergence, verify_moment_bounds,
    ConditionalSample, ExpMomentEstimate, ExponentialBoundParams, ExponentialTuning, ItoResidualSummary,
    KhasminskiiCheck, KhasminskiiSettings, KrylovRatio, MomentBounds, MonteCarloSettings, PairedStatistics,
    PipelinePairStats, SupermartingaleShadow, UniquenessCurve, UniquenessPoint, UniquenessSettings,
};
pub use rng::{derive_seed, BrownianPath};
pub use sim::{simulate_euler, simulate_euler_from, simulate_pair, simulate_pair_from, PairedSimulation, SamplePath};
pub use stats::{CompensatedSum, MeanEstimate};
