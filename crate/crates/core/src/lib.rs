//! Software fault isolation toolchain for MiniCISC, a small variable-length
//! instruction set.
//!
//! The pipeline assembles programs into bundle-padded objects, greedily
//! removes cross-bundle padding while keeping every overlapping instruction
//! stream safe, links objects with relocation screening, validates the
//! result and runs it in a sandboxed simulator with a branch target buffer.

pub mod analysis;
pub mod assembler;
pub mod cli;
pub mod corpus;
pub mod image;
pub mod isa;
mod layout;
pub mod optimizer;
pub mod simulator;
pub mod validator;

pub use layout::LayoutError;
