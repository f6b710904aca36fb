//! Data-driven AC optimal power flow.
//!
//! The library has two halves. The physics half parses grid case files
//! ([`case_io`]), builds the nodal admittance structure ([`grid`]), solves
//! AC power flow by Newton-Raphson ([`powerflow`]) and solves the full AC
//! OPF with a primal-dual interior-point method ([`acopf`]). The learning
//! half samples demand scenarios and labels them with OPF solutions
//! ([`scenario`]), trains stacked extreme learning machines ([`selm`]) and
//! assembles them into a three-stage regressor with active-constraint
//! pre-classification ([`pipeline`]). [`report`] scores predictions and
//! runs ablation comparisons; [`cli`] exposes the whole flow as commands.

extern crate blas_src;

pub mod acopf;
pub mod case_io;
pub mod cli;
pub mod grid;
pub mod linalg;
pub mod pipeline;
pub mod powerflow;
pub mod report;
pub mod scenario;
pub mod selm;

pub use case_io::{parse_case, serialize_case, CaseData};
pub use grid::{AdmittanceMatrix, StateVector};

/// Bundled desk-scale cases, usable by name from the CLI and tests.
pub mod cases {
    use crate::case_io::{parse_case, CaseData};

    pub const CASE2: &str = include_str!("../cases/case2.case");
    pub const CASE3: &str = include_str!("../cases/case3.case");
    pub const CASE9: &str = include_str!("../cases/case9.case");
    pub const CASE14: &str = include_str!("../cases/case14.case");

    /// Look up a bundled case by name (`case2`, `case3`, `case9`, `case14`).
    pub fn builtin(name: &str) -> Option<&'static str> {
        match name {
            "case2" => Some(CASE2),
            "case3" => Some(CASE3),
            "case9" => Some(CASE9),
            "case14" => Some(CASE14),
            _ => None,
        }
    }

    /// Parse a bundled case. Panics only if the bundled fixture is broken,
    /// which the test suite guards against.
    pub fn load(name: &str) -> CaseData {
        parse_case(builtin(name).expect("unknown builtin case")).expect("bundled case must parse")
    }
}
