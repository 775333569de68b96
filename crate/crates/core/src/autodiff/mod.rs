//! Reverse-mode differentiation, the AdamW optimizer and a central
//! finite-difference oracle.

mod gradcheck;
mod optim;
mod tape;

pub use gradcheck::{finite_diff_check, GradCheckReport, REL_ERROR_FLOOR};
pub use optim::{AdamW, AdamWConfig};
pub use tape::{Gradients, Tape, Var};

pub(crate) use tape::gelu;

use std::collections::BTreeMap;

use crate::tensor::Matrix;

/// Parameter tensors keyed by identifier.
pub type NamedTensors = BTreeMap<String, Matrix>;
