//! Plain-text cost matrices: one row per line, whitespace-separated decimals.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use super::{CostMatrix, TransportPlan};
use crate::{Error, Result};

/// Parses a dense matrix. Blank lines are ignored; every other line must have
/// the same number of finite values.
pub fn parse_cost_matrix(text: &str) -> Result<CostMatrix> {
    let mut width = None;
    let mut data = Vec::new();
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        let start = data.len();
        for tok in line.split_ascii_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::parse(lineno, format!("bad number {tok:?}")))?;
            if !v.is_finite() {
                return Err(Error::parse(lineno, format!("non-finite value {tok:?}")));
            }
            data.push(v);
        }
        let got = data.len() - start;
        if got == 0 {
            continue;
        }
        match width {
            None => width = Some(got),
            Some(w) if w != got => {
                return Err(Error::parse(lineno, format!("row has {got} values, expected {w}")))
            }
            _ => {}
        }
        rows += 1;
    }
    let Some(cols) = width else {
        return Err(Error::parse(1, "no matrix rows"));
    };
    CostMatrix::new(DMatrix::from_row_slice(rows, cols, &data), None)
}

/// One line per plan row.
pub fn format_plan(plan: &TransportPlan) -> String {
    let mut out = String::new();
    for row in plan.values().row_iter() {
        let mut first = true;
        for v in row.iter() {
            if !first {
                out.push(' ');
            }
            first = false;
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}
