//! Surface syntax for check expressions: s-expressions with string
//! labels and exact decimal numbers.
//!
//! ```text
//! (~= (sum (row 4 2 3)) (cell 4 4))
//! (> (cell "Fine-Tuned-disc" "test acc") (cell "CS-only-disc" "test acc"))
//! (and (trend increasing (col 4 2 4)) (< (cell 2 4) 1.0))
//! ```
//!
//! `parse_check(print_check(e))` reproduces `e` for every well-typed
//! expression.

use rust_decimal::Decimal;

use super::expr::{
    type_of, AggOp, ArithOp, CellRef, CheckExpr, CmpOp, Region, TrendDirection, TypePath,
};
use super::OracleError;

#[derive(Debug, Clone, PartialEq)]
enum SExpr {
    List { pos: usize, items: Vec<SExpr> },
    Num { pos: usize, value: Decimal },
    Str { pos: usize, value: String },
    Sym { pos: usize, name: String },
}

impl SExpr {
    fn pos(&self) -> usize {
        match self {
            SExpr::List { pos, .. }
            | SExpr::Num { pos, .. }
            | SExpr::Str { pos, .. }
            | SExpr::Sym { pos, .. } => *pos,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            SExpr::List { .. } => "list",
            SExpr::Num { .. } => "number",
            SExpr::Str { .. } => "string",
            SExpr::Sym { .. } => "symbol",
        }
    }
}

fn syntax(position: usize, message: impl Into<String>) -> OracleError {
    OracleError::Syntax { position, message: message.into() }
}

fn type_err(path: &[usize], message: impl Into<String>) -> OracleError {
    OracleError::Type { path: TypePath(path.to_vec()), message: message.into() }
}

/// Parses and type-checks one check expression.
pub fn parse_check(src: &str) -> Result<CheckExpr, OracleError> {
    let sexpr = parse_sexpr(src)?;
    let expr = lower_expr(&sexpr, &mut Vec::new())?;
    type_of(&expr)?;
    Ok(expr)
}

fn parse_sexpr(src: &str) -> Result<SExpr, OracleError> {
    let bytes = src.as_bytes();
    let mut i = 0usize;
    let mut stack: Vec<(usize, Vec<SExpr>)> = Vec::new();
    let mut finished: Option<SExpr> = None;

    let place = |atom: SExpr,
                     stack: &mut Vec<(usize, Vec<SExpr>)>,
                     finished: &mut Option<SExpr>|
     -> Result<(), OracleError> {
        if let Some((_, items)) = stack.last_mut() {
            items.push(atom);
            return Ok(());
        }
        if finished.is_some() {
            return Err(syntax(atom.pos(), "unexpected content after the expression"));
        }
        *finished = Some(atom);
        Ok(())
    };

    while i < bytes.len() {
        let b = bytes[i];
        match b {
            b' ' | b'\t' | b'\r' | b'\n' => i += 1,
            b'(' => {
                if finished.is_some() {
                    return Err(syntax(i, "unexpected content after the expression"));
                }
                stack.push((i, Vec::new()));
                i += 1;
            }
            b')' => {
                let Some((pos, items)) = stack.pop() else {
                    return Err(syntax(i, "unmatched closing parenthesis"));
                };
                place(SExpr::List { pos, items }, &mut stack, &mut finished)?;
                i += 1;
            }
            b'"' => {
                let start = i;
                i += 1;
                let mut value = String::new();
                loop {
                    match bytes.get(i) {
                        None => return Err(syntax(start, "unterminated string")),
                        Some(b'"') => {
                            i += 1;
                            break;
                        }
                        Some(b'\\') => match bytes.get(i + 1) {
                            Some(b'"') => {
                                value.push('"');
                                i += 2;
                            }
                            Some(b'\\') => {
                                value.push('\\');
                                i += 2;
                            }
                            _ => return Err(syntax(i, "unsupported escape; only \\\" and \\\\ exist")),
                        },
                        Some(_) => {
                            // Advance one UTF-8 scalar, not one byte.
                            let ch = src[i..].chars().next().unwrap();
                            value.push(ch);
                            i += ch.len_utf8();
                        }
                    }
                }
                place(SExpr::Str { pos: start, value }, &mut stack, &mut finished)?;
            }
            _ => {
                let start = i;
                while i < bytes.len() && !matches!(bytes[i], b' ' | b'\t' | b'\r' | b'\n' | b'(' | b')' | b'"') {
                    i += 1;
                }
                let text = &src[start..i];
                let numeric_lead = text.starts_with(|c: char| c.is_ascii_digit())
                    || (text.len() > 1
                        && text.starts_with('-')
                        && text[1..].starts_with(|c: char| c.is_ascii_digit()));
                let atom = if numeric_lead {
                    let value: Decimal = text
                        .parse()
                        .map_err(|_| syntax(start, format!("bad number {text:?}")))?;
                    SExpr::Num { pos: start, value }
                } else {
                    SExpr::Sym { pos: start, name: text.to_string() }
                };
                place(atom, &mut stack, &mut finished)?;
            }
        }
    }
    if let Some((pos, _)) = stack.last() {
        return Err(syntax(*pos, "unclosed parenthesis"));
    }
    finished.ok_or_else(|| syntax(src.len(), "empty input"))
}

fn head<'a>(items: &'a [SExpr], pos: usize, path: &[usize]) -> Result<(&'a str, &'a [SExpr]), OracleError> {
    match items.first() {
        Some(SExpr::Sym { name, .. }) => Ok((name.as_str(), &items[1..])),
        Some(other) => Err(type_err(path, format!("a form must start with a symbol, found {}", other.kind()))),
        None => Err(syntax(pos, "empty form ()")),
    }
}

fn expect_arity(args: &[SExpr], n: usize, form: &str, path: &[usize]) -> Result<(), OracleError> {
    if args.len() != n {
        return Err(type_err(path, format!("{form} takes {n} argument(s), found {}", args.len())));
    }
    Ok(())
}

fn lower_index(arg: &SExpr, what: &str, path: &[usize]) -> Result<usize, OracleError> {
    let SExpr::Num { value, .. } = arg else {
        return Err(type_err(path, format!("{what} must be a number, found {}", arg.kind())));
    };
    if value.fract() != Decimal::ZERO || value < &Decimal::ONE {
        return Err(type_err(path, format!("{what} must be a 1-based integer, found {value}")));
    }
    let as_u64: u64 = value
        .trunc()
        .try_into()
        .map_err(|_| type_err(path, format!("{what} {value} is out of range")))?;
    usize::try_from(as_u64).map_err(|_| type_err(path, format!("{what} {value} is out of range")))
}

fn lower_region(arg: &SExpr, path: &[usize]) -> Result<Region, OracleError> {
    let SExpr::List { pos, items } = arg else {
        return Err(type_err(path, format!("expected a region form (cells/row/col), found {}", arg.kind())));
    };
    let (name, args) = head(items, *pos, path)?;
    match name {
        "cells" => {
            expect_arity(args, 4, "cells", path)?;
            Ok(Region::Cells {
                top: lower_index(&args[0], "region row", path)?,
                left: lower_index(&args[1], "region column", path)?,
                bottom: lower_index(&args[2], "region row", path)?,
                right: lower_index(&args[3], "region column", path)?,
            })
        }
        "row" => {
            expect_arity(args, 3, "row", path)?;
            Ok(Region::Row {
                row: lower_index(&args[0], "region row", path)?,
                from_col: lower_index(&args[1], "region column", path)?,
                to_col: lower_index(&args[2], "region column", path)?,
            })
        }
        "col" => {
            expect_arity(args, 3, "col", path)?;
            Ok(Region::Col {
                col: lower_index(&args[0], "region column", path)?,
                from_row: lower_index(&args[1], "region row", path)?,
                to_row: lower_index(&args[2], "region row", path)?,
            })
        }
        other => Err(type_err(path, format!("expected a region form (cells/row/col), found ({other} ...)"))),
    }
}

fn lower_expr(sexpr: &SExpr, path: &mut Vec<usize>) -> Result<CheckExpr, OracleError> {
    match sexpr {
        SExpr::Num { value, .. } => Ok(CheckExpr::Literal { value: *value, unit: None }),
        SExpr::Str { .. } => Err(type_err(path, "a bare string is not a value")),
        SExpr::Sym { name, .. } => Err(type_err(path, format!("unknown symbol {name:?}"))),
        SExpr::List { pos, items } => {
            let (name, args) = head(items, *pos, path)?;
            let child = |index: usize, arg: &SExpr, path: &mut Vec<usize>| -> Result<CheckExpr, OracleError> {
                path.push(index);
                let lowered = lower_expr(arg, path)?;
                path.pop();
                Ok(lowered)
            };
            match name {
                "cell" => {
                    expect_arity(args, 2, "cell", path)?;
                    match (&args[0], &args[1]) {
                        (SExpr::Num { .. }, SExpr::Num { .. }) => Ok(CheckExpr::Cell(CellRef::ByIndex {
                            row: lower_index(&args[0], "cell row", path)?,
                            col: lower_index(&args[1], "cell column", path)?,
                        })),
                        (SExpr::Str { value: row, .. }, SExpr::Str { value: col, .. }) => {
                            Ok(CheckExpr::Cell(CellRef::ByLabel { row: row.clone(), col: col.clone() }))
                        }
                        _ => Err(type_err(
                            path,
                            "cell takes two indices or two label strings, not a mixture",
                        )),
                    }
                }
                "lit" => {
                    expect_arity(args, 2, "lit", path)?;
                    let SExpr::Num { value, .. } = &args[0] else {
                        return Err(type_err(path, format!("lit value must be a number, found {}", args[0].kind())));
                    };
                    let SExpr::Str { value: unit, .. } = &args[1] else {
                        return Err(type_err(path, format!("lit unit must be a string, found {}", args[1].kind())));
                    };
                    Ok(CheckExpr::Literal { value: *value, unit: Some(unit.clone()) })
                }
                "+" | "-" | "*" | "/" | "pct-change" => {
                    expect_arity(args, 2, name, path)?;
                    let op = match name {
                        "+" => ArithOp::Add,
                        "-" => ArithOp::Sub,
                        "*" => ArithOp::Mul,
                        "/" => ArithOp::Div,
                        _ => ArithOp::PctChange,
                    };
                    Ok(CheckExpr::Arith {
                        op,
                        lhs: Box::new(child(0, &args[0], path)?),
                        rhs: Box::new(child(1, &args[1], path)?),
                    })
                }
                "sum" | "mean" | "min" | "max" | "count" => {
                    expect_arity(args, 1, name, path)?;
                    let op = match name {
                        "sum" => AggOp::Sum,
                        "mean" => AggOp::Mean,
                        "min" => AggOp::Min,
                        "max" => AggOp::Max,
                        _ => AggOp::Count,
                    };
                    path.push(0);
                    let region = lower_region(&args[0], path)?;
                    path.pop();
                    Ok(CheckExpr::Aggregate { op, region })
                }
                "trend" => {
                    expect_arity(args, 2, "trend", path)?;
                    let SExpr::Sym { name: dir, .. } = &args[0] else {
                        return Err(type_err(path, "trend direction must be increasing, decreasing, or nonmonotone"));
                    };
                    let direction = match dir.as_str() {
                        "increasing" => TrendDirection::Increasing,
                        "decreasing" => TrendDirection::Decreasing,
                        "nonmonotone" => TrendDirection::Nonmonotone,
                        other => {
                            return Err(type_err(path, format!("unknown trend direction {other:?}")));
                        }
                    };
                    path.push(1);
                    let region = lower_region(&args[1], path)?;
                    path.pop();
                    Ok(CheckExpr::Trend { direction, region })
                }
                "<" | "<=" | "=" | ">=" | ">" | "~=" => {
                    expect_arity(args, 2, name, path)?;
                    let op = match name {
                        "<" => CmpOp::Lt,
                        "<=" => CmpOp::Le,
                        "=" => CmpOp::Eq,
                        ">=" => CmpOp::Ge,
                        ">" => CmpOp::Gt,
                        _ => CmpOp::Approx,
                    };
                    Ok(CheckExpr::Compare {
                        op,
                        lhs: Box::new(child(0, &args[0], path)?),
                        rhs: Box::new(child(1, &args[1], path)?),
                    })
                }
                "and" | "or" => {
                    if args.is_empty() {
                        return Err(type_err(path, format!("{name} needs at least one operand")));
                    }
                    let mut items = Vec::with_capacity(args.len());
                    for (i, arg) in args.iter().enumerate() {
                        items.push(child(i, arg, path)?);
                    }
                    Ok(if name == "and" { CheckExpr::And(items) } else { CheckExpr::Or(items) })
                }
                "not" => {
                    expect_arity(args, 1, "not", path)?;
                    Ok(CheckExpr::Not(Box::new(child(0, &args[0], path)?)))
                }
                other => Err(type_err(path, format!("unknown form {other:?}"))),
            }
        }
    }
}

fn quote_label(label: &str) -> String {
    let escaped = label.replace('\\', "\\\\").replace('"', "\\\"");
    format!("\"{escaped}\"")
}

/// Canonical text for an expression; `parse_check` inverts it.
pub fn print_check(expr: &CheckExpr) -> String {
    match expr {
        CheckExpr::Cell(CellRef::ByIndex { row, col }) => format!("(cell {row} {col})"),
        CheckExpr::Cell(CellRef::ByLabel { row, col }) => {
            format!("(cell {} {})", quote_label(row), quote_label(col))
        }
        CheckExpr::Literal { value, unit: None } => value.to_string(),
        CheckExpr::Literal { value, unit: Some(unit) } => {
            format!("(lit {value} {})", quote_label(unit))
        }
        CheckExpr::Arith { op, lhs, rhs } => {
            format!("({} {} {})", op.symbol(), print_check(lhs), print_check(rhs))
        }
        CheckExpr::Aggregate { op, region } => format!("({} {region})", op.symbol()),
        CheckExpr::Trend { direction, region } => {
            format!("(trend {} {region})", direction.symbol())
        }
        CheckExpr::Compare { op, lhs, rhs } => {
            format!("({} {} {})", op.symbol(), print_check(lhs), print_check(rhs))
        }
        CheckExpr::And(items) => {
            let parts: Vec<String> = items.iter().map(print_check).collect();
            format!("(and {})", parts.join(" "))
        }
        CheckExpr::Or(items) => {
            let parts: Vec<String> = items.iter().map(print_check).collect();
            format!("(or {})", parts.join(" "))
        }
        CheckExpr::Not(inner) => format!("(not {})", print_check(inner)),
    }
}
