//! Exact-decimal evaluation of check expressions over a table, plus the
//! deterministic extraction checker.

use std::collections::BTreeSet;

use rust_decimal::{Decimal, RoundingStrategy};
use serde::{Deserialize, Serialize};

use crate::chain::ExtractedFact;
use crate::table::{CellAddress, Table};

use super::expr::{
    type_of, AggOp, ArithOp, CellRef, CheckExpr, CmpOp, Region, TrendDirection, TypePath,
};
use super::OracleError;

/// Result value of a check: boolean for comparisons and boolean
/// operators, a number (with a unit) for arithmetic roots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OracleValue {
    Bool(bool),
    Number {
        value: Decimal,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        unit: Option<String>,
    },
}

impl OracleValue {
    pub fn as_bool(&self) -> Option<bool> {
        match self {
            OracleValue::Bool(b) => Some(*b),
            OracleValue::Number { .. } => None,
        }
    }

    pub fn as_number(&self) -> Option<Decimal> {
        match self {
            OracleValue::Number { value, .. } => Some(*value),
            OracleValue::Bool(_) => None,
        }
    }
}

/// Evaluation outcome with the consulted cells (first-consultation
/// order, deduplicated) and any display-precision rounding applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleVerdict {
    pub value: OracleValue,
    pub evidence: Vec<(CellAddress, Decimal)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision_note: Option<String>,
}

/// Deterministic comparison of one extracted fact against the table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExtractionOutcome {
    Match,
    Mismatch { actual: Decimal },
    Unverifiable,
}

/// Evaluates a well-typed expression; all failure modes are errors, not
/// panics. Division uses 28-significant-digit decimal precision; all
/// other arithmetic is exact.
pub fn eval(expr: &CheckExpr, table: &Table) -> Result<OracleVerdict, OracleError> {
    type_of(expr)?;
    let mut ev = Evaluator {
        table,
        evidence: Vec::new(),
        seen: BTreeSet::new(),
        notes: Vec::new(),
    };
    let value = match ev.eval_expr(expr)? {
        Value::Bool(b) => OracleValue::Bool(b),
        Value::Num { value, unit } => OracleValue::Number { value, unit },
    };
    let precision_note = if ev.notes.is_empty() { None } else { Some(ev.notes.join("; ")) };
    Ok(OracleVerdict { value, evidence: ev.evidence, precision_note })
}

#[derive(Debug, Clone, PartialEq)]
enum Value {
    Num { value: Decimal, unit: Option<String> },
    Bool(bool),
}

struct Evaluator<'t> {
    table: &'t Table,
    evidence: Vec<(CellAddress, Decimal)>,
    seen: BTreeSet<(usize, usize)>,
    notes: Vec<String>,
}

const PERCENT: &str = "%";

/// Brings two quantities onto one unit for additive operations and
/// comparisons: equal units stay, a percent meeting a unitless value is
/// divided by 100, and anything else refuses.
fn unify(
    context: &'static str,
    (lv, lu): (Decimal, Option<String>),
    (rv, ru): (Decimal, Option<String>),
) -> Result<(Decimal, Decimal, Option<String>), OracleError> {
    match (lu, ru) {
        (a, b) if a == b => Ok((lv, rv, a)),
        (Some(p), None) if p == PERCENT => {
            let scaled = lv.checked_div(Decimal::ONE_HUNDRED).ok_or(OracleError::Overflow)?;
            Ok((scaled, rv, None))
        }
        (None, Some(p)) if p == PERCENT => {
            let scaled = rv.checked_div(Decimal::ONE_HUNDRED).ok_or(OracleError::Overflow)?;
            Ok((lv, scaled, None))
        }
        (left, right) => Err(OracleError::UnitMismatch { context, left, right }),
    }
}

/// For multiplication a percent is a dimensionless factor.
fn as_factor(
    (value, unit): (Decimal, Option<String>),
) -> Result<(Decimal, Option<String>), OracleError> {
    match unit {
        Some(p) if p == PERCENT => {
            let scaled = value.checked_div(Decimal::ONE_HUNDRED).ok_or(OracleError::Overflow)?;
            Ok((scaled, None))
        }
        other => Ok((value, other)),
    }
}

impl Evaluator<'_> {
    fn eval_expr(&mut self, expr: &CheckExpr) -> Result<Value, OracleError> {
        match expr {
            CheckExpr::Cell(cell) => {
                let (value, unit) = self.resolve(cell)?;
                Ok(Value::Num { value, unit })
            }
            CheckExpr::Literal { value, unit } => {
                Ok(Value::Num { value: *value, unit: unit.clone() })
            }
            CheckExpr::Arith { op, lhs, rhs } => {
                let l = self.numeric(lhs)?;
                let r = self.numeric(rhs)?;
                self.arith(*op, l, r)
            }
            CheckExpr::Aggregate { op, region } => self.aggregate(*op, region),
            CheckExpr::Trend { direction, region } => self.trend(*direction, region),
            CheckExpr::Compare { op, lhs, rhs } => {
                let l = self.numeric(lhs)?;
                let r = self.numeric(rhs)?;
                self.compare(*op, l, r)
            }
            // Boolean operands are all evaluated: evidence and errors
            // must not depend on operand order, so no short-circuiting.
            CheckExpr::And(items) => {
                let mut all = true;
                for item in items {
                    all &= self.boolean(item)?;
                }
                Ok(Value::Bool(all))
            }
            CheckExpr::Or(items) => {
                let mut any = false;
                for item in items {
                    any |= self.boolean(item)?;
                }
                Ok(Value::Bool(any))
            }
            CheckExpr::Not(inner) => Ok(Value::Bool(!self.boolean(inner)?)),
        }
    }

    // `eval` type-checks up front, so these guards are unreachable in
    // practice; they keep direct misuse an error instead of a panic.
    fn numeric(&mut self, expr: &CheckExpr) -> Result<(Decimal, Option<String>), OracleError> {
        match self.eval_expr(expr)? {
            Value::Num { value, unit } => Ok((value, unit)),
            Value::Bool(_) => Err(OracleError::Type {
                path: TypePath(Vec::new()),
                message: "expected number, found boolean".into(),
            }),
        }
    }

    fn boolean(&mut self, expr: &CheckExpr) -> Result<bool, OracleError> {
        match self.eval_expr(expr)? {
            Value::Bool(b) => Ok(b),
            Value::Num { .. } => Err(OracleError::Type {
                path: TypePath(Vec::new()),
                message: "expected boolean, found number".into(),
            }),
        }
    }

    fn consult(&mut self, addr: CellAddress) -> Result<(Decimal, Option<String>), OracleError> {
        let cell = self.table.get_cell(addr)?;
        let q = cell.quantity().ok_or(OracleError::NonNumericCell { address: addr })?;
        if self.seen.insert((addr.row, addr.col)) {
            self.evidence.push((addr, q.value));
        }
        Ok((q.value, q.unit))
    }

    fn resolve(&mut self, cell: &CellRef) -> Result<(Decimal, Option<String>), OracleError> {
        let addr = match cell {
            CellRef::ByIndex { row, col } => CellAddress::new(*row, *col),
            CellRef::ByLabel { row, col } => {
                let r = self.table.find_row_by_label(row)?;
                let c = self.table.find_col_by_header(col)?;
                CellAddress::new(r, c)
            }
        };
        self.consult(addr)
    }

    fn resolve_region(&self, region: &Region) -> Result<Vec<CellAddress>, OracleError> {
        let (top, left, bottom, right) = region.corners();
        let (rows, cols) = (self.table.rows(), self.table.cols());
        if top == 0 || left == 0 || bottom > rows || right > cols {
            return Err(OracleError::RegionOutOfBounds {
                region: region.to_string(),
                rows,
                cols,
            });
        }
        let addrs = region.addresses();
        if addrs.is_empty() {
            return Err(OracleError::EmptyRegion);
        }
        Ok(addrs)
    }

    /// Consults every address; the cells must all be numeric and share
    /// one unit.
    fn consult_uniform(
        &mut self,
        addrs: &[CellAddress],
        context: &'static str,
    ) -> Result<(Vec<Decimal>, Option<String>), OracleError> {
        let mut values = Vec::with_capacity(addrs.len());
        let mut unit: Option<Option<String>> = None;
        for &addr in addrs {
            let (value, cell_unit) = self.consult(addr)?;
            match &unit {
                None => unit = Some(cell_unit),
                Some(first) if *first != cell_unit => {
                    return Err(OracleError::UnitMismatch {
                        context,
                        left: first.clone(),
                        right: cell_unit,
                    });
                }
                Some(_) => {}
            }
            values.push(value);
        }
        Ok((values, unit.flatten()))
    }

    fn arith(
        &mut self,
        op: ArithOp,
        l: (Decimal, Option<String>),
        r: (Decimal, Option<String>),
    ) -> Result<Value, OracleError> {
        match op {
            ArithOp::Add => {
                let (a, b, unit) = unify("addition", l, r)?;
                let value = a.checked_add(b).ok_or(OracleError::Overflow)?;
                Ok(Value::Num { value, unit })
            }
            ArithOp::Sub => {
                let (a, b, unit) = unify("subtraction", l, r)?;
                let value = a.checked_sub(b).ok_or(OracleError::Overflow)?;
                Ok(Value::Num { value, unit })
            }
            ArithOp::Mul => {
                let (a, au) = as_factor(l)?;
                let (b, bu) = as_factor(r)?;
                let unit = match (au, bu) {
                    (None, None) => None,
                    (Some(u), None) | (None, Some(u)) => Some(u),
                    (left, right) => {
                        return Err(OracleError::UnitMismatch {
                            context: "multiplication",
                            left,
                            right,
                        });
                    }
                };
                let value = a.checked_mul(b).ok_or(OracleError::Overflow)?;
                Ok(Value::Num { value, unit })
            }
            ArithOp::Div => {
                if r.0.is_zero() {
                    return Err(OracleError::DivisionByZero);
                }
                let unit = match (l.1, r.1) {
                    (a, b) if a == b => None,
                    (Some(u), None) => Some(u),
                    (left, right) => {
                        return Err(OracleError::UnitMismatch { context: "division", left, right });
                    }
                };
                let value = l.0.checked_div(r.0).ok_or(OracleError::Overflow)?;
                Ok(Value::Num { value, unit })
            }
            ArithOp::PctChange => {
                let (a, b, _) = unify("pct-change", l, r)?;
                if a.is_zero() {
                    return Err(OracleError::DivisionByZero);
                }
                let delta = b.checked_sub(a).ok_or(OracleError::Overflow)?;
                let ratio = delta.checked_div(a).ok_or(OracleError::Overflow)?;
                let value = ratio.checked_mul(Decimal::ONE_HUNDRED).ok_or(OracleError::Overflow)?;
                Ok(Value::Num { value, unit: None })
            }
        }
    }

    fn compare(
        &mut self,
        op: CmpOp,
        l: (Decimal, Option<String>),
        r: (Decimal, Option<String>),
    ) -> Result<Value, OracleError> {
        let (a, b, _) = unify("comparison", l, r)?;
        let outcome = match op {
            CmpOp::Lt => a < b,
            CmpOp::Le => a <= b,
            CmpOp::Eq => a == b,
            CmpOp::Ge => a >= b,
            CmpOp::Gt => a > b,
            CmpOp::Approx => {
                let dp = b.scale();
                let rounded = a.round_dp_with_strategy(dp, RoundingStrategy::MidpointAwayFromZero);
                self.notes.push(format!(
                    "~=: {a} rounded half away from zero to {dp} decimal place(s) is {rounded}; comparand {b}"
                ));
                rounded == b
            }
        };
        Ok(Value::Bool(outcome))
    }

    fn aggregate(&mut self, op: AggOp, region: &Region) -> Result<Value, OracleError> {
        let addrs = self.resolve_region(region)?;
        let (values, unit) = self.consult_uniform(&addrs, "aggregate")?;
        let value = match op {
            AggOp::Count => {
                return Ok(Value::Num { value: Decimal::from(values.len()), unit: None });
            }
            AggOp::Sum => {
                let mut total = Decimal::ZERO;
                for v in &values {
                    total = total.checked_add(*v).ok_or(OracleError::Overflow)?;
                }
                total
            }
            AggOp::Mean => {
                let mut total = Decimal::ZERO;
                for v in &values {
                    total = total.checked_add(*v).ok_or(OracleError::Overflow)?;
                }
                total
                    .checked_div(Decimal::from(values.len()))
                    .ok_or(OracleError::Overflow)?
            }
            AggOp::Min => values.iter().copied().min().expect("region is non-empty"),
            AggOp::Max => values.iter().copied().max().expect("region is non-empty"),
        };
        Ok(Value::Num { value, unit })
    }

    fn trend(&mut self, direction: TrendDirection, region: &Region) -> Result<Value, OracleError> {
        let addrs = self.resolve_region(region)?;
        if addrs.len() < 2 {
            return Err(OracleError::TrendTooShort { points: addrs.len() });
        }
        let (values, _) = self.consult_uniform(&addrs, "trend")?;
        let ok = match direction {
            TrendDirection::Increasing => values.windows(2).all(|w| w[1] > w[0]),
            TrendDirection::Decreasing => values.windows(2).all(|w| w[1] < w[0]),
            TrendDirection::Nonmonotone => {
                let rises = values.windows(2).any(|w| w[1] > w[0]);
                let falls = values.windows(2).any(|w| w[1] < w[0]);
                rises && falls
            }
        };
        Ok(Value::Bool(ok))
    }
}

/// Checks each extracted fact against the table. A fact matches when
/// the cell's parsed number, rounded half away from zero to the fact's
/// printed decimal places, equals the fact's value. Facts without an
/// address and value, or pointing at missing/non-numeric cells, are
/// unverifiable rather than errors.
pub fn check_extraction(facts: &[ExtractedFact], table: &Table) -> Vec<ExtractionOutcome> {
    facts
        .iter()
        .map(|fact| {
            let (Some(address), Some(claimed)) = (fact.address, fact.value.as_ref()) else {
                return ExtractionOutcome::Unverifiable;
            };
            let Ok(cell) = table.get_cell(address) else {
                return ExtractionOutcome::Unverifiable;
            };
            let Some(actual) = cell.quantity() else {
                return ExtractionOutcome::Unverifiable;
            };
            let rounded = actual
                .value
                .round_dp_with_strategy(claimed.value.scale(), RoundingStrategy::MidpointAwayFromZero);
            if rounded == claimed.value {
                ExtractionOutcome::Match
            } else {
                ExtractionOutcome::Mismatch { actual: actual.value }
            }
        })
        .collect()
}
