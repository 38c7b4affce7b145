//! Reverse-mode gradients over a recorded tape, and a finite-difference
//! checker for them.

mod gradcheck;
mod params;
mod tape;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckConfig, GradCheckReport, ParamCheck};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{ops, Backward, NodeId, Tape};
