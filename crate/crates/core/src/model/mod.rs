//! Model structure, constraints, designs, parameters and the predictor.

pub mod constraint;
pub mod data;
pub mod design;
pub mod fixed;
pub mod graph;
pub mod params;
pub mod predictor;

pub use constraint::{ConstraintKind, Projection};
pub use data::Dataset;
pub use design::{Design, Support};
pub use fixed::FixedFn;
pub use graph::{FunctionDecl, FunctionKind, ModelGraph, Offset};
pub use params::{Layout, ParameterState, Prior};
