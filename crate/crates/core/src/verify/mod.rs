//! Verification routines shared by the test suites and the command line.

pub mod gradient;
pub mod kernels;

pub use gradient::{
    gradcheck_config, gradcheck_fixture, gradcheck_method, ClassResult, GradcheckReport, ParamClass, GRADCHECK_TOL,
};
pub use kernels::{
    kernel_shift_invariance, oracle_specs, oracle_sweep, reduction_identities, IdentityCheck, OracleCase, ORACLE_TOL,
};
