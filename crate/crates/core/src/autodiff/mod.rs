//! Reverse-mode differentiation through fields, operators and the solver.

pub mod optim;
pub mod params;
pub mod tape;

pub use optim::{optimizer_step, AdamConfig, AdamState};
pub use params::{Constraint, CHECKPOINT_FILE, Group, Leaf, LeafSpec, ParamSet};
pub use tape::{Gradients, Primitive, Tape, Var};
