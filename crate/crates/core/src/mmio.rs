//! Dense MatrixMarket reading and writing.
//!
//! Reads `coordinate` and `array` files with `real`, `double` or `integer`
//! fields and `general`, `symmetric` or `skew-symmetric` symmetry. Writes the
//! `array real general` form.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SbpError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Layout {
    Coordinate,
    Array,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Symmetry {
    General,
    Symmetric,
    Skew,
}

fn parse_err(line: usize, msg: impl Into<String>) -> SbpError {
    SbpError::Parse { line, msg: msg.into() }
}

fn parse_header(line: &str) -> Result<(Layout, Symmetry)> {
    let tokens: Vec<String> = line.split_whitespace().map(|t| t.to_ascii_lowercase()).collect();
    if tokens.len() != 5 || tokens[0] != "%%matrixmarket" {
        return Err(parse_err(1, "expected `%%MatrixMarket matrix <format> <field> <symmetry>`"));
    }
    if tokens[1] != "matrix" {
        return Err(SbpError::Unsupported(format!("object `{}`", tokens[1])));
    }
    let layout = match tokens[2].as_str() {
        "coordinate" => Layout::Coordinate,
        "array" => Layout::Array,
        other => return Err(SbpError::Unsupported(format!("format `{other}`"))),
    };
    match tokens[3].as_str() {
        "real" | "double" | "integer" => {}
        other => return Err(SbpError::Unsupported(format!("field `{other}`"))),
    }
    let symmetry = match tokens[4].as_str() {
        "general" => Symmetry::General,
        "symmetric" => Symmetry::Symmetric,
        "skew-symmetric" => Symmetry::Skew,
        other => return Err(SbpError::Unsupported(format!("symmetry `{other}`"))),
    };
    Ok((layout, symmetry))
}

fn parse_usize(tok: &str, line: usize, what: &str) -> Result<usize> {
    tok.parse()
        .map_err(|_| parse_err(line, format!("invalid {what} `{tok}`")))
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.parse()
        .map_err(|_| parse_err(line, format!("invalid value `{tok}`")))
}

/// Parse MatrixMarket text into a dense matrix.
pub fn parse_matrix_market(text: &str) -> Result<DMatrix<f64>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let (layout, symmetry) = parse_header(header)?;
    let mut body = lines.filter(|(_, l)| {
        let t = l.trim();
        !t.is_empty() && !t.starts_with('%')
    });
    let (size_line, size) = body.next().ok_or_else(|| parse_err(1, "missing size line"))?;
    let dims: Vec<&str> = size.split_whitespace().collect();
    let (m, n) = match (layout, dims.len()) {
        (Layout::Coordinate, 3) | (Layout::Array, 2) => (
            parse_usize(dims[0], size_line, "row count")?,
            parse_usize(dims[1], size_line, "column count")?,
        ),
        _ => return Err(parse_err(size_line, "malformed size line")),
    };
    if symmetry != Symmetry::General && m != n {
        return Err(parse_err(size_line, "symmetric storage needs a square matrix"));
    }
    let mut a = DMatrix::zeros(m, n);
    match layout {
        Layout::Coordinate => {
            let nnz = parse_usize(dims[2], size_line, "entry count")?;
            let mut seen = 0;
            for (ln, l) in body {
                let toks: Vec<&str> = l.split_whitespace().collect();
                if toks.len() != 3 {
                    return Err(parse_err(ln, "expected `row col value`"));
                }
                let i = parse_usize(toks[0], ln, "row index")?;
                let j = parse_usize(toks[1], ln, "column index")?;
                if i == 0 || i > m || j == 0 || j > n {
                    return Err(parse_err(ln, format!("index ({i}, {j}) outside {m}×{n}")));
                }
                let v = parse_f64(toks[2], ln)?;
                a[(i - 1, j - 1)] += v;
                if i != j {
                    match symmetry {
                        Symmetry::General => {}
                        Symmetry::Symmetric => a[(j - 1, i - 1)] += v,
                        Symmetry::Skew => a[(j - 1, i - 1)] -= v,
                    }
                }
                seen += 1;
                if seen > nnz {
                    return Err(parse_err(ln, format!("more than the declared {nnz} entries")));
                }
            }
            if seen != nnz {
                return Err(parse_err(size_line, format!("declared {nnz} entries, found {seen}")));
            }
        }
        Layout::Array => {
            // Column-major; symmetric forms store the lower triangle only.
            let positions: Vec<(usize, usize)> = match symmetry {
                Symmetry::General => (0..n).flat_map(|j| (0..m).map(move |i| (i, j))).collect(),
                Symmetry::Symmetric => (0..n).flat_map(|j| (j..m).map(move |i| (i, j))).collect(),
                Symmetry::Skew => (0..n).flat_map(|j| (j + 1..m).map(move |i| (i, j))).collect(),
            };
            let mut k = 0;
            for (ln, l) in body {
                for tok in l.split_whitespace() {
                    let &(i, j) = positions
                        .get(k)
                        .ok_or_else(|| parse_err(ln, format!("more than the expected {} values", positions.len())))?;
                    let v = parse_f64(tok, ln)?;
                    a[(i, j)] = v;
                    match symmetry {
                        Symmetry::General => {}
                        Symmetry::Symmetric => a[(j, i)] = v,
                        Symmetry::Skew => a[(j, i)] = -v,
                    }
                    k += 1;
                }
            }
            if k != positions.len() {
                return Err(parse_err(size_line, format!("expected {} values, found {k}", positions.len())));
            }
        }
    }
    Ok(a)
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    parse_matrix_market(&fs::read_to_string(path)?)
}

/// A vector stored as an `m × 1` (or `1 × n`) matrix.
pub fn load_vector(path: impl AsRef<Path>) -> Result<DVector<f64>> {
    let a = load_matrix(path)?;
    match a.shape() {
        (_, 1) => Ok(a.column(0).into_owned()),
        (1, _) => Ok(a.row(0).transpose()),
        (m, n) => Err(SbpError::DimensionMismatch(format!("expected a vector, found a {m}×{n} matrix"))),
    }
}

/// `array real general` text, values with 17 significant digits.
pub fn to_matrix_market(a: &DMatrix<f64>) -> String {
    let mut out = String::from("%%MatrixMarket matrix array real general\n");
    let _ = writeln!(out, "{} {}", a.nrows(), a.ncols());
    for v in a.iter() {
        let _ = writeln!(out, "{v:.16e}");
    }
    out
}

pub fn write_matrix(path: impl AsRef<Path>, a: &DMatrix<f64>) -> Result<()> {
    fs::write(path, to_matrix_market(a))?;
    Ok(())
}

pub fn write_vector(path: impl AsRef<Path>, v: &DVector<f64>) -> Result<()> {
    let m = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
    write_matrix(path, &m)
}
