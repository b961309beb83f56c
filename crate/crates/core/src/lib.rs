#![allow(
    clippy::needless_range_loop,
    clippy::neg_cmp_op_on_partial_ord,
    clippy::result_large_err
)]

pub mod admm;
pub mod harness;
pub mod kernel;
pub mod model;
pub mod runtime;
pub mod subproblems;

pub use admm::{
    run_admm, AdmmConfig, AdmmResult, AdmmStatus, CouplingState, InProcessBackend, IterationRecord,
};
pub use kernel::{NlpSolution, SolveOptions, SolveStatus};
pub use model::{build_case, problem_size, scale_mix, Case, Horizon, ModelError, Template};
pub use subproblems::ActiveFlags;
