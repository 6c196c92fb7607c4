//! Reverse-mode differentiation and tools built on it.

pub mod cases;
mod check;
mod descent;
mod tape;

pub use cases::{gradcheck, GradBlock};
pub use check::{fd_check, rel_err, FdConfig, FdReport, ParamCheck};
pub use descent::gradient_descent;
pub use tape::{Gradients, NodeId, Tape, Var};
