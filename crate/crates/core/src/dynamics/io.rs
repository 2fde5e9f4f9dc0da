//! Snapshot CSV files (`x1..xn,u1..um,x1p..xnp`, one row per snapshot) and
//! their JSON sidecar manifest.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::SnapshotSet;
use crate::error::{KcfError, Result};

/// Sidecar metadata written next to a snapshot CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n: usize,
    pub m: usize,
    #[serde(rename = "N")]
    pub count: usize,
    pub seed: u64,
    pub system_name: String,
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

/// CSV header for a dataset with `n` states and `m` inputs.
pub fn csv_header(n: usize, m: usize) -> String {
    let mut cols: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    cols.extend((1..=m).map(|i| format!("u{i}")));
    cols.extend((1..=n).map(|i| format!("x{i}p")));
    cols.join(",")
}

/// Renders the snapshot set as CSV text.
pub fn to_csv_string(ss: &SnapshotSet) -> String {
    let (n, m) = (ss.state_dim(), ss.input_dim());
    let mut out = csv_header(n, m);
    out.push('\n');
    for i in 0..ss.len() {
        let (x, u, xp) = (ss.x.column(i), ss.u.column(i), ss.x_plus.column(i));
        let row = x.iter().chain(u.iter()).chain(xp.iter());
        let mut first = true;
        for v in row {
            if !first {
                out.push(',');
            }
            first = false;
            write!(out, "{v}").expect("string write");
        }
        out.push('\n');
    }
    out
}

/// Parses CSV text produced by [`to_csv_string`]. The header fixes `n` and
/// `m`; line numbers in errors are 1-based and count the header.
pub fn from_csv_str(text: &str) -> Result<SnapshotSet> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(KcfError::Parse {
        line: 1,
        message: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.trim().split(',').map(str::trim).collect();
    let n = cols
        .iter()
        .filter(|c| c.starts_with('x') && !c.ends_with('p'))
        .count();
    let m = cols.iter().filter(|c| c.starts_with('u')).count();
    if cols.len() != 2 * n + m || header.trim() != csv_header(n, m) {
        return Err(KcfError::Parse {
            line: 1,
            message: format!(
                "expected header like '{}', got '{}'",
                csv_header(n.max(1), m.max(1)),
                header
            ),
        });
    }
    let width = 2 * n + m;
    let (mut xs, mut us, mut xps) = (Vec::new(), Vec::new(), Vec::new());
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(KcfError::Parse {
                line: line_no,
                message: format!("expected {width} fields, found {}", fields.len()),
            });
        }
        let mut row = Vec::with_capacity(width);
        for f in fields {
            let v: f64 = f.trim().parse().map_err(|_| KcfError::Parse {
                line: line_no,
                message: format!("not a number: '{f}'"),
            })?;
            row.push(v);
        }
        xs.extend_from_slice(&row[..n]);
        us.extend_from_slice(&row[n..n + m]);
        xps.extend_from_slice(&row[n + m..]);
    }
    let count = xs.len() / n.max(1);
    SnapshotSet::new(
        DMatrix::from_vec(n, count, xs),
        DMatrix::from_vec(n, count, xps),
        DMatrix::from_vec(m, count, us),
    )
}

pub fn write_csv(ss: &SnapshotSet, path: &Path) -> Result<()> {
    std::fs::write(path, to_csv_string(ss))?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<SnapshotSet> {
    from_csv_str(&std::fs::read_to_string(path)?)
}
