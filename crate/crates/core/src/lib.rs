//! Two-step ℓ1-penalized expected shortfall regression in high dimensions,
//! with debiased inference on single coefficients.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod harness;
pub mod ingest;
pub mod inference;
pub mod model;
pub mod normal;
pub mod rcv;
pub mod sim;
pub mod solvers;
pub mod tuning;
pub mod twostep;

pub use error::{EsError, Result};
pub use model::{
    adjusted_response, adjusted_responses, check_loss, destandardize, destandardize_coefs, restandardize_coefs,
    standardize, CoefRole, CoefVector, Dataset, QuantileLevel, StandardizationInfo, Tail,
};
pub use harness::{run_experiment, ExperimentConfig, ExperimentResult, Method, MetricsRow};
pub use inference::{infer_coordinate, Alternative, InferenceConfig, InferenceResult, VarianceMethod};
pub use rcv::{rcv_variance, RcvConfig, RcvEstimate};
pub use sim::{Design, ResponseModel, SimScenario, SimTruth};
pub use tuning::{CvConfig, HbicConfig, LambdaPath, SelectionRule};
pub use twostep::{fit_two_step, fit_two_step_any, LambdaRule, TwoStepConfig, TwoStepFit};
pub use solvers::{
    lambda_path_max, lasso_ls_fit, reference_prox_solve, sqr_fit, Bandwidth, PathProblem,
    PenaltySpec, ReferenceProblem, SolveReport, SolverConfig,
};
