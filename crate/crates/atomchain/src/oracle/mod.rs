//! Deterministic claim-check oracle: a small expression language over a
//! table, with exact-decimal evaluation. Used to machine-check
//! extraction steps, validate generated claim pairs, and serve as the
//! ground truth that chain verdicts are scored against.

mod eval;
mod expr;
mod parse;

pub use eval::{check_extraction, eval, ExtractionOutcome, OracleValue, OracleVerdict};
pub use expr::{
    type_of, AggOp, ArithOp, CellRef, CheckExpr, CmpOp, ExprType, Region, TrendDirection,
    TypePath,
};
pub use parse::{parse_check, print_check};

use crate::table::{CellAddress, TableError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("syntax error at byte {position}: {message}")]
    Syntax { position: usize, message: String },
    #[error("type error at {path}: {message}")]
    Type { path: TypePath, message: String },
    #[error("cell ({row}, {col}) holds no number", row = address.row, col = address.col)]
    NonNumericCell { address: CellAddress },
    #[error("division by zero")]
    DivisionByZero,
    #[error("region {region} exceeds the table extent of {rows} rows x {cols} columns")]
    RegionOutOfBounds { region: String, rows: usize, cols: usize },
    #[error("aggregate over an empty region")]
    EmptyRegion,
    #[error("trend needs at least two points, got {points}")]
    TrendTooShort { points: usize },
    #[error("unit mismatch in {context}: {} vs {}", render_unit(left), render_unit(right))]
    UnitMismatch { context: &'static str, left: Option<String>, right: Option<String> },
    #[error("arithmetic overflow")]
    Overflow,
    #[error(transparent)]
    Table(#[from] TableError),
}

fn render_unit(unit: &Option<String>) -> String {
    match unit {
        Some(u) => format!("{u:?}"),
        None => "unitless".to_string(),
    }
}
