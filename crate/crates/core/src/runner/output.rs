// SPDX-License-Identifier: MIT OR Apache-2.0

use std::io::Write;
use std::path::Path;

use serde::Deserialize;

use super::{io_err, EffectMatrix, Result, RunnerError};

pub const CSV_HEADER: &str = "placename,distance_text,miles,offset,window_start,kl_corrupted,kl_patched,effect";

/// Nine significant digits, scientific notation.
fn fmt9(x: f64) -> String {
    format!("{x:.8e}")
}

/// Rounds to the value [`fmt9`] would print.
pub fn round_sig9(x: f64) -> f64 {
    fmt9(x).parse().expect("formatted float parses")
}

/// Writes the results JSON and, when requested, the raw long-format CSV.
pub fn write_matrix(matrix: &EffectMatrix, json_path: &Path, csv_path: Option<&Path>) -> Result<()> {
    let mut json = serde_json::to_string_pretty(matrix).expect("matrix serializes");
    json.push('\n');
    std::fs::write(json_path, json).map_err(io_err(json_path))?;

    if let Some(path) = csv_path {
        let file = std::fs::File::create(path).map_err(io_err(path))?;
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
        let csv_err = |e: csv::Error| RunnerError::Io {
            path: path.to_owned(),
            source: std::io::Error::other(e),
        };
        w.write_record(CSV_HEADER.split(',')).map_err(csv_err)?;
        for r in &matrix.raw {
            w.write_record([
                r.placename.clone(),
                r.distance.text.clone(),
                r.distance.miles.to_string(),
                r.offset.to_string(),
                r.window.start.to_string(),
                fmt9(r.kl_corrupted),
                fmt9(r.kl_patched),
                fmt9(r.effect),
            ])
            .map_err(csv_err)?;
        }
        let mut inner = w.into_inner().map_err(|e| RunnerError::Io {
            path: path.to_owned(),
            source: std::io::Error::other(e.to_string()),
        })?;
        inner.flush().map_err(io_err(path))?;
    }
    Ok(())
}

pub fn read_matrix(json_path: &Path) -> Result<EffectMatrix> {
    let s = std::fs::read_to_string(json_path).map_err(io_err(json_path))?;
    let m: EffectMatrix = serde_json::from_str(&s).map_err(|e| RunnerError::MalformedResults {
        path: json_path.to_owned(),
        reason: e.to_string(),
    })?;
    let (d, o, w) = m.shape();
    let dims_ok = m.mean_effect.len() == d
        && m.mean_effect.iter().all(|p| p.len() == o && p.iter().all(|r| r.len() == w))
        && m.token_labels.len() == d;
    if !dims_ok {
        return Err(RunnerError::MalformedResults {
            path: json_path.to_owned(),
            reason: format!("mean_effect does not match label dimensions {d}x{o}x{w}"),
        });
    }
    Ok(m)
}

/// One row of the raw CSV.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct RawRow {
    pub placename: String,
    pub distance_text: String,
    pub miles: u32,
    pub offset: usize,
    pub window_start: usize,
    pub kl_corrupted: f64,
    pub kl_patched: f64,
    pub effect: f64,
}

pub fn read_raw_csv(path: &Path) -> Result<Vec<RawRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| RunnerError::MalformedResults {
        path: path.to_owned(),
        reason: e.to_string(),
    })?;
    r.deserialize()
        .collect::<std::result::Result<Vec<RawRow>, _>>()
        .map_err(|e| RunnerError::MalformedResults {
            path: path.to_owned(),
            reason: e.to_string(),
        })
}
