//! Explained-variation decomposition for linear mixed models in variance
//! components form.
//!
//! The model is `y = 1μ + Xβ + Σ Z_i u_i + ε` with `u_i ~ N(0, σ²_{u_i} I)` and
//! `ε ~ N(0, σ²_ε I)`. After a restricted maximum likelihood fit the centred
//! sample variance of `y` splits exactly into
//!
//! ```text
//! σ̂²_y = S²_X + S²_Z (population + data-specific) + S²_{X×Z} + σ²_ε
//! ```
//!
//! with further attribution of every summand to individual fixed and random
//! covariates. The crate is `no_std` (it needs `alloc`); file ingestion and the
//! command-line tool live in the `vardecomp` crate.
#![no_std]
#![warn(missing_debug_implementations)]

extern crate alloc;

pub mod bootstrap;
pub mod decomposition;
pub mod design;
pub mod error;
pub mod formula;
pub mod inference;
pub mod kernels;
pub mod reml;

mod linalg;

pub use bootstrap::{
    parametric_bootstrap, run_replicate, share_statistics, simulate_response, summarize,
    BootstrapConfig, BootstrapResult, Interval,
};
pub use decomposition::{
    attribute_cross, attribute_fixed, attribute_random, attribution_table, compute_moments,
    compute_moments_with_cap, decompose, lm_reference, AttributionKind, AttributionRow,
    AttributionTable, Decomposition, EmpiricalMoments, LmReference, ZMoments,
};
pub use design::{build_model_frame, Column, Dataset, ModelFrame, RandomBlock};
pub use error::{Error, Result};
pub use formula::{parse_formula, FormulaAst, FormulaWarning, ParsedFormula, RandomTerm, Slope};
pub use inference::{
    fit, sigma_eps2_forms, solve_blue_blup, solve_blue_blup_with, FitResult, InferenceConfig,
    UCovariance,
};
pub use kernels::{identity_suite, IdentityReport, KernelState, Projections};
pub use reml::{
    fit_reml, reml_equation_residuals, restricted_loglik, RemlConfig, RemlReport,
    VarianceComponents,
};
