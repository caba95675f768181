//! Claim-check expression trees: the deterministic language the oracle
//! evaluates over a table. Numeric leaves are exact decimals; regions
//! address cells 1-based with the header as row 1.

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Cell reference: absolute indices or label/header lookup.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellRef {
    ByIndex { row: usize, col: usize },
    ByLabel { row: String, col: String },
}

/// Rectangular cell selection, traversed row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    /// `(cells r1 c1 r2 c2)`, both corners inclusive.
    Cells { top: usize, left: usize, bottom: usize, right: usize },
    /// `(row r c1 c2)`: one row, columns c1..=c2.
    Row { row: usize, from_col: usize, to_col: usize },
    /// `(col c r1 r2)`: one column, rows r1..=r2.
    Col { col: usize, from_row: usize, to_row: usize },
}

impl Region {
    /// Corner coordinates as (top, left, bottom, right).
    pub fn corners(&self) -> (usize, usize, usize, usize) {
        match *self {
            Region::Cells { top, left, bottom, right } => (top, left, bottom, right),
            Region::Row { row, from_col, to_col } => (row, from_col, row, to_col),
            Region::Col { col, from_row, to_row } => (from_row, col, to_row, col),
        }
    }

    /// Addresses in row-major order. Empty when the corners are
    /// reversed.
    pub fn addresses(&self) -> Vec<crate::table::CellAddress> {
        let (top, left, bottom, right) = self.corners();
        let mut out = Vec::new();
        if bottom < top || right < left {
            return out;
        }
        for row in top..=bottom {
            for col in left..=right {
                out.push(crate::table::CellAddress::new(row, col));
            }
        }
        out
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Region::Cells { top, left, bottom, right } => {
                write!(f, "(cells {top} {left} {bottom} {right})")
            }
            Region::Row { row, from_col, to_col } => write!(f, "(row {row} {from_col} {to_col})"),
            Region::Col { col, from_row, to_row } => write!(f, "(col {col} {from_row} {to_row})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
    Div,
    /// `pct-change a b` = (b − a) / a · 100, unitless.
    PctChange,
}

impl ArithOp {
    pub fn symbol(self) -> &'static str {
        match self {
            ArithOp::Add => "+",
            ArithOp::Sub => "-",
            ArithOp::Mul => "*",
            ArithOp::Div => "/",
            ArithOp::PctChange => "pct-change",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AggOp {
    Sum,
    Mean,
    Min,
    Max,
    Count,
}

impl AggOp {
    pub fn symbol(self) -> &'static str {
        match self {
            AggOp::Sum => "sum",
            AggOp::Mean => "mean",
            AggOp::Min => "min",
            AggOp::Max => "max",
            AggOp::Count => "count",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrendDirection {
    /// Every adjacent pair strictly increases.
    Increasing,
    /// Every adjacent pair strictly decreases.
    Decreasing,
    /// The series both rises and falls somewhere; a constant or
    /// one-directional series is not nonmonotone.
    Nonmonotone,
}

impl TrendDirection {
    pub fn symbol(self) -> &'static str {
        match self {
            TrendDirection::Increasing => "increasing",
            TrendDirection::Decreasing => "decreasing",
            TrendDirection::Nonmonotone => "nonmonotone",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    Lt,
    Le,
    Eq,
    Ge,
    Gt,
    /// Display-precision equality: the left side, rounded half away
    /// from zero to the right side's printed decimal places, must equal
    /// the right side.
    Approx,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Eq => "=",
            CmpOp::Ge => ">=",
            CmpOp::Gt => ">",
            CmpOp::Approx => "~=",
        }
    }
}

/// A check expression. Comparison, trend, and boolean nodes yield
/// booleans; every other node yields a number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CheckExpr {
    Cell(CellRef),
    Literal { value: Decimal, unit: Option<String> },
    Arith { op: ArithOp, lhs: Box<CheckExpr>, rhs: Box<CheckExpr> },
    Aggregate { op: AggOp, region: Region },
    Trend { direction: TrendDirection, region: Region },
    Compare { op: CmpOp, lhs: Box<CheckExpr>, rhs: Box<CheckExpr> },
    And(Vec<CheckExpr>),
    Or(Vec<CheckExpr>),
    Not(Box<CheckExpr>),
}

impl CheckExpr {
    pub fn number(value: Decimal) -> CheckExpr {
        CheckExpr::Literal { value, unit: None }
    }

    /// Replaces every unit-matching literal equal to `old` with `new`,
    /// returning the rewritten tree and how many literals changed.
    /// Used to re-target a check at a perturbed claim quantity.
    pub fn replace_literal(&self, old: Decimal, new: Decimal) -> (CheckExpr, usize) {
        match self {
            CheckExpr::Literal { value, unit } if *value == old => {
                (CheckExpr::Literal { value: new, unit: unit.clone() }, 1)
            }
            CheckExpr::Literal { .. } | CheckExpr::Cell(_) | CheckExpr::Aggregate { .. } | CheckExpr::Trend { .. } => {
                (self.clone(), 0)
            }
            CheckExpr::Arith { op, lhs, rhs } => {
                let (l, nl) = lhs.replace_literal(old, new);
                let (r, nr) = rhs.replace_literal(old, new);
                (CheckExpr::Arith { op: *op, lhs: Box::new(l), rhs: Box::new(r) }, nl + nr)
            }
            CheckExpr::Compare { op, lhs, rhs } => {
                let (l, nl) = lhs.replace_literal(old, new);
                let (r, nr) = rhs.replace_literal(old, new);
                (CheckExpr::Compare { op: *op, lhs: Box::new(l), rhs: Box::new(r) }, nl + nr)
            }
            CheckExpr::And(items) => {
                let mut count = 0;
                let rewritten = items
                    .iter()
                    .map(|e| {
                        let (e, n) = e.replace_literal(old, new);
                        count += n;
                        e
                    })
                    .collect();
                (CheckExpr::And(rewritten), count)
            }
            CheckExpr::Or(items) => {
                let mut count = 0;
                let rewritten = items
                    .iter()
                    .map(|e| {
                        let (e, n) = e.replace_literal(old, new);
                        count += n;
                        e
                    })
                    .collect();
                (CheckExpr::Or(rewritten), count)
            }
            CheckExpr::Not(inner) => {
                let (e, n) = inner.replace_literal(old, new);
                (CheckExpr::Not(Box::new(e)), n)
            }
        }
    }

    /// Every literal in the tree, in print order.
    pub fn literals(&self) -> Vec<(Decimal, Option<String>)> {
        let mut out = Vec::new();
        self.collect_literals(&mut out);
        out
    }

    fn collect_literals(&self, out: &mut Vec<(Decimal, Option<String>)>) {
        match self {
            CheckExpr::Literal { value, unit } => out.push((*value, unit.clone())),
            CheckExpr::Cell(_) | CheckExpr::Aggregate { .. } | CheckExpr::Trend { .. } => {}
            CheckExpr::Arith { lhs, rhs, .. } | CheckExpr::Compare { lhs, rhs, .. } => {
                lhs.collect_literals(out);
                rhs.collect_literals(out);
            }
            CheckExpr::And(items) | CheckExpr::Or(items) => {
                for item in items {
                    item.collect_literals(out);
                }
            }
            CheckExpr::Not(inner) => inner.collect_literals(out),
        }
    }
}

/// The two value kinds an expression can produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExprType {
    Number,
    Boolean,
}

impl fmt::Display for ExprType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExprType::Number => write!(f, "number"),
            ExprType::Boolean => write!(f, "boolean"),
        }
    }
}

/// Well-typedness violation, addressed by child indices from the root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypePath(pub Vec<usize>);

impl fmt::Display for TypePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "root");
        }
        let rendered: Vec<String> = self.0.iter().map(usize::to_string).collect();
        write!(f, "child {}", rendered.join("."))
    }
}

/// Computes an expression's type, rejecting boolean operands where
/// numbers are required and vice versa.
pub fn type_of(expr: &CheckExpr) -> Result<ExprType, super::OracleError> {
    type_of_at(expr, &mut Vec::new())
}

fn type_of_at(expr: &CheckExpr, path: &mut Vec<usize>) -> Result<ExprType, super::OracleError> {
    let expect = |child: &CheckExpr,
                  index: usize,
                  wanted: ExprType,
                  path: &mut Vec<usize>|
     -> Result<(), super::OracleError> {
        path.push(index);
        let found = type_of_at(child, path)?;
        if found != wanted {
            return Err(super::OracleError::Type {
                path: TypePath(path.clone()),
                message: format!("expected {wanted}, found {found}"),
            });
        }
        path.pop();
        Ok(())
    };
    match expr {
        CheckExpr::Cell(_) | CheckExpr::Literal { .. } | CheckExpr::Aggregate { .. } => {
            Ok(ExprType::Number)
        }
        CheckExpr::Arith { lhs, rhs, .. } => {
            expect(lhs, 0, ExprType::Number, path)?;
            expect(rhs, 1, ExprType::Number, path)?;
            Ok(ExprType::Number)
        }
        CheckExpr::Compare { lhs, rhs, .. } => {
            expect(lhs, 0, ExprType::Number, path)?;
            expect(rhs, 1, ExprType::Number, path)?;
            Ok(ExprType::Boolean)
        }
        CheckExpr::Trend { .. } => Ok(ExprType::Boolean),
        CheckExpr::And(items) | CheckExpr::Or(items) => {
            for (i, item) in items.iter().enumerate() {
                expect(item, i, ExprType::Boolean, path)?;
            }
            Ok(ExprType::Boolean)
        }
        CheckExpr::Not(inner) => {
            expect(inner, 0, ExprType::Boolean, path)?;
            Ok(ExprType::Boolean)
        }
    }
}
