//! Estimation for incomplete longitudinal binary outcomes.
//!
//! The crate covers the standard toolkit for treatment-effect estimation
//! when subjects drop out of a trial: complete-case and LOCF preparation,
//! generalized estimating equations with working correlations, weighted
//! GEE with inverse-probability-of-dropout weights valid under MAR, and a
//! random-intercept logistic mixed model fitted by (adaptive) Gauss-Hermite
//! quadrature, plus the Wald/chi-squared/exact testing layer and a
//! simulation harness for bias and coverage studies.

pub mod dataset;
pub mod design;
pub mod error;
pub mod gee;
pub mod glm;
pub mod glmm;
pub mod inference;
mod linalg;
mod optim;
pub mod prep;
pub mod sim;
pub mod wgee;

pub use dataset::{
    load_long_csv, missingness_profile, pattern_table, write_long_csv, CovariateKind,
    CovariateSchema, CovariateSpec, LongDataset, MissingnessProfile, Pattern, PatternRow,
    SubjectRecord,
};
pub use design::{build_design, parse_formula, DesignInfo, Formula, ModelFrame};
pub use error::{Error, Result};
pub use gee::{
    correlation_matrix, estimate_alpha, fit_gee, fit_gee_with_options, pearson_residuals,
    sandwich_covariance, Alpha, CorrelationStructure, GeeFit, GeeOptions, SubjectResiduals,
    WorkingCorrelation,
};
pub use glm::{bernoulli_variance, expit, fit_logistic, logit, GlmFit};
pub use glmm::{
    attenuation_ratio, fit_glmm, gauss_hermite, marginalize_mean, quadrature_scan, subject_loglik,
    GlmmDiagnostics, GlmmFit, GlmmSpec, Optimizer, QuadratureMode, QuadratureSpec, ScanFit,
    ScanRow, ScanTable, StabilityFlag, StartValues,
};
pub use inference::{
    build_contrasts, endpoint_analysis, fisher_exact, pearson_chi2, wald_test, ContrastKind,
    CountTable, EndpointAnalysis, EndpointStrategy, EndpointView, WaldResult,
};
pub use prep::{complete_case, locf_impute, monotonize, observed_split, ObservedSplit};
pub use sim::{
    apply_dropout, replicate_study, simulate_complete, ArmSpec, DropoutSpec, Estimator, Mechanism,
    SimSpec, Strategy, StudyReport, StudyRow,
};
pub use wgee::{
    dropout_time_distribution, fit_dropout_model, fit_wgee, fit_wgee_with_options,
    occasion_weights, person_period_expand, prepare_for_wgee, subject_weights, DropoutModel,
    PersonPeriodTable, WeightMode, WeightSet, WgeePrepReport,
};
