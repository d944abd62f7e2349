//! Plain-text checkpoint format for named matrices.
//!
//! Layout:
//!
//! ```text
//! ZSSEG-CKPT v1
//! <name> <rows> <cols>
//! <row of cols space-separated decimals>
//! ...
//! ```
//!
//! Values are printed with 17 significant digits, which round-trips f64
//! exactly. Names are single whitespace-free tokens.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::mlp::ParamStore;

pub const HEADER: &str = "ZSSEG-CKPT v1";

// Parser guards against absurd allocations from malformed input.
const MAX_DIM: usize = 1_000_000;
const MAX_ELEMS: usize = 8_000_000;

/// 17-significant-digit rendering; round-trip exact for f64.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn matrices_to_string<'a>(items: impl IntoIterator<Item = (&'a str, &'a Matrix)>) -> String {
    let mut out = String::new();
    out.push_str(HEADER);
    out.push('\n');
    for (name, m) in items {
        debug_assert!(!name.is_empty() && !name.contains(char::is_whitespace));
        out.push_str(&format!("{name} {} {}\n", m.rows(), m.cols()));
        for r in 0..m.rows() {
            let row: Vec<String> = m.row(r).iter().map(|&v| format_f64(v)).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
    }
    out
}

/// Parse the checkpoint text format. Never panics on malformed input.
pub fn parse_matrices(text: &str) -> Result<Vec<(String, Matrix)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim_end() == HEADER => {}
        Some((_, l)) => {
            return Err(Error::format_at(
                1,
                format!("expected `{HEADER}`, got `{l}`"),
            ))
        }
        None => return Err(Error::format_at(1, "empty checkpoint".to_string())),
    }
    let mut out: Vec<(String, Matrix)> = Vec::new();
    while let Some((idx, line)) = lines.next() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            // tolerate a trailing blank line only
            if lines.next().is_some() {
                return Err(Error::format_at(lineno, "blank line inside checkpoint"));
            }
            break;
        }
        let mut parts = line.split_whitespace();
        let name = parts
            .next()
            .ok_or_else(|| Error::format_at(lineno, "missing matrix name".to_string()))?
            .to_string();
        let rows: usize = parse_count(parts.next(), lineno, "rows")?;
        let cols: usize = parse_count(parts.next(), lineno, "cols")?;
        if parts.next().is_some() {
            return Err(Error::format_at(lineno, "trailing tokens after header"));
        }
        if rows > MAX_DIM || cols > MAX_DIM || rows.saturating_mul(cols) > MAX_ELEMS {
            return Err(Error::format_at(
                lineno,
                format!("matrix {name} of {rows}x{cols} exceeds size limits"),
            ));
        }
        if out.iter().any(|(n, _)| *n == name) {
            return Err(Error::format_at(lineno, format!("duplicate matrix {name}")));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let (ridx, rline) = lines.next().ok_or_else(|| {
                Error::format_at(lineno, format!("matrix {name} truncated at row {r}"))
            })?;
            let rlineno = ridx + 1;
            let mut count = 0;
            for tok in rline.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| Error::format_at(rlineno, format!("bad decimal `{tok}`")))?;
                if !v.is_finite() {
                    return Err(Error::format_at(
                        rlineno,
                        format!("non-finite value `{tok}`"),
                    ));
                }
                data.push(v);
                count += 1;
            }
            if count != cols {
                return Err(Error::format_at(
                    rlineno,
                    format!("row has {count} values, expected {cols}"),
                ));
            }
        }
        let m = Matrix::from_vec(rows, cols, data)
            .map_err(|e| Error::format_at(lineno, e.to_string()))?;
        out.push((name, m));
    }
    Ok(out)
}

pub fn write_matrices<'a>(
    path: &Path,
    items: impl IntoIterator<Item = (&'a str, &'a Matrix)>,
) -> Result<()> {
    fs::write(path, matrices_to_string(items)).map_err(|e| Error::io(path, e))
}

pub fn read_matrices(path: &Path) -> Result<Vec<(String, Matrix)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrices(&text)
}

fn parse_count(tok: Option<&str>, lineno: usize, what: &str) -> Result<usize> {
    tok.ok_or_else(|| Error::format_at(lineno, format!("missing {what}")))?
        .parse()
        .map_err(|_| Error::format_at(lineno, format!("bad {what}")))
}

/// Serialize a [`ParamStore`] in insertion order.
pub fn store_to_string(store: &ParamStore) -> String {
    matrices_to_string(store.iter().map(|p| (p.name.as_str(), &p.value)))
}

/// Rebuild a [`ParamStore`] (gradients zeroed) from parsed matrices.
pub fn store_from_matrices(items: Vec<(String, Matrix)>) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, m) in items {
        store.add(name, m)?;
    }
    Ok(store)
}
