//! Dense small-scale optimization kernels.

pub mod lp;
pub mod polytope;
pub mod qcqp;
pub mod sdp;

pub use lp::{solve_lp, solve_lp_with, LinearProgram, LpSolution, LpStatus};
pub use polytope::{polytope_pre_reduce, remove_redundant, support};
pub use qcqp::{solve_qcqp, solve_qcqp_with, ConvexQcqp, QcqpSolution, QcqpStatus, QuadConstraint};
pub use sdp::{solve_logdet_sdp, AffineSym, LmiProblem, LmiSolution};

/// Solver tolerances shared by the kernels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerances {
    /// Feasibility and optimality tolerance of the simplex iterations.
    pub lp: f64,
    /// Stopping tolerance on the KKT residual of the interior-point method.
    pub kkt: f64,
    /// Minimum eigenvalue accepted when re-checking LMI blocks.
    pub lmi: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            lp: 1e-9,
            kkt: 1e-8,
            lmi: 1e-8,
        }
    }
}
