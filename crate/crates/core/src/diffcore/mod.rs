//! Dense arrays, the differentiable-operation contract, the parameter store
//! and the finite-difference gradient checker.

mod array;
mod gradcheck;
pub mod ops;
mod params;

pub use array::NdArray;
pub use gradcheck::{gradcheck, gradcheck_sampled, DiffOp, FnOp, GradcheckReport, ParamOp};
pub use params::{zero_grads, Param, ParamStore};
