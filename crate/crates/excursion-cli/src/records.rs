//! Result records and their serialized forms. The CSV column order is fixed
//! and documented here; the JSON output is an array of objects with the same
//! fields in the same order.

use anyhow::Result;
use serde::Serialize;
use std::io::Write;

/// One computed result. Fields appear in output in declaration order:
///
/// command, model, inputs, value, abs_error, method, oracle_value,
/// oracle_abs_error, z_score, seed, version
///
/// `inputs` echoes every parameter of the run as semicolon-joined key=value
/// pairs, so a record can be re-run without the original config. The oracle
/// columns are filled by the validation commands (mc-validate, rice-check)
/// and empty otherwise; `z_score` is the engine-minus-reference difference
/// in units of the reference's standard error. Wall times are not part of
/// the record (they go to stderr) so reruns are byte-identical.
#[derive(Debug, Serialize)]
pub struct Record {
    pub command: &'static str,
    pub model: String,
    pub inputs: String,
    pub value: f64,
    pub abs_error: f64,
    pub method: String,
    pub oracle_value: Option<f64>,
    pub oracle_abs_error: Option<f64>,
    pub z_score: Option<f64>,
    pub seed: u64,
    pub version: &'static str,
}

pub fn write_csv<W: Write>(out: W, records: &[Record]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<W: Write>(mut out: W, records: &[Record]) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, records)?;
    writeln!(out)?;
    Ok(())
}
