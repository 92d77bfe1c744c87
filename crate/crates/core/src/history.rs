//! Iteration history as CSV.
//!
//! Columns: `k, chosen_index, mse, bregman_dist, loss_at_chosen, flops_modeled,
//! flops_measured`. Missing values are empty fields, indices are 0-based, and
//! floats carry 17 significant digits so that parsing restores them exactly.
//! Lines starting with `#` hold `key=value` metadata and are skipped on read.

use std::io::{BufRead, Write};

use crate::error::{Result, SbpError};
use crate::solver::IterationRecord;

pub const HEADER: &str = "k,chosen_index,mse,bregman_dist,loss_at_chosen,flops_modeled,flops_measured";

fn float(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt_float(v: Option<f64>) -> String {
    v.map(float).unwrap_or_default()
}

pub fn write_history<W: Write>(mut out: W, records: &[IterationRecord], metadata: &[(String, String)]) -> Result<()> {
    for (k, v) in metadata {
        writeln!(out, "# {k}={v}")?;
    }
    writeln!(out, "{HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.k,
            r.chosen.map(|i| i.to_string()).unwrap_or_default(),
            opt_float(r.mse),
            opt_float(r.bregman_dist),
            opt_float(r.loss_at_chosen),
            float(r.flops_modeled),
            float(r.flops_measured),
        )?;
    }
    out.flush()?;
    Ok(())
}

fn field<T: std::str::FromStr>(tok: &str, line: usize, name: &str) -> Result<Option<T>> {
    if tok.is_empty() {
        return Ok(None);
    }
    tok.parse().map(Some).map_err(|_| SbpError::Parse {
        line,
        msg: format!("invalid {name} `{tok}`"),
    })
}

fn required<T: std::str::FromStr>(tok: &str, line: usize, name: &str) -> Result<T> {
    field(tok, line, name)?.ok_or_else(|| SbpError::Parse {
        line,
        msg: format!("missing {name}"),
    })
}

pub fn read_history<R: BufRead>(input: R) -> Result<Vec<IterationRecord>> {
    let mut records = Vec::new();
    let mut header_seen = false;
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        let ln = idx + 1;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            if line.trim() != HEADER {
                return Err(SbpError::Parse {
                    line: ln,
                    msg: "unexpected header".into(),
                });
            }
            header_seen = true;
            continue;
        }
        let toks: Vec<&str> = line.split(',').collect();
        if toks.len() != 7 {
            return Err(SbpError::Parse {
                line: ln,
                msg: format!("expected 7 fields, found {}", toks.len()),
            });
        }
        records.push(IterationRecord {
            k: required(toks[0], ln, "k")?,
            chosen: field(toks[1], ln, "chosen_index")?,
            mse: field(toks[2], ln, "mse")?,
            bregman_dist: field(toks[3], ln, "bregman_dist")?,
            loss_at_chosen: field(toks[4], ln, "loss_at_chosen")?,
            flops_modeled: required(toks[5], ln, "flops_modeled")?,
            flops_measured: required(toks[6], ln, "flops_measured")?,
        });
    }
    if !header_seen {
        return Err(SbpError::Parse {
            line: 1,
            msg: "missing header".into(),
        });
    }
    Ok(records)
}
