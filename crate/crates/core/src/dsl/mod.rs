//! Formula language: parsing, formatting and validation of predictor formulas.

mod ast;
mod parser;
mod validate;

pub use ast::{is_identifier, BlockNode, FactorNode, ModelAst, TermNode};
pub use parser::{format, parse, ParseError};
pub use validate::{validate, ValidationError, ValidationWarning};
