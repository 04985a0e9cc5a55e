//! Dependency-depth analysis and trainable-parameter accounting.

mod accounting;
mod depth;

use std::fmt::Write as _;

pub use accounting::{
    block_params, connection_params, count_params, dims_preset, with_commas, Dims, ParamCount, DIMS_PRESETS,
};
pub use depth::{max_depth, max_depth_raw, sequential_steps, DepGraph};

use crate::error::{Error, Result};
use crate::model::ConnectionSpec;

/// One line of a depth report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DepthRow {
    #[serde(rename = "L")]
    pub n_layers: usize,
    pub k: usize,
    pub g: usize,
    pub n_conn: usize,
    pub max_depth: usize,
    pub sequential_steps: usize,
}

impl DepthRow {
    pub fn compute(n_layers: usize, k: usize, spec: &ConnectionSpec) -> Result<Self> {
        Ok(DepthRow {
            n_layers,
            k,
            g: spec.group_size.min(k.max(1)),
            n_conn: spec.len(),
            max_depth: max_depth(n_layers, k, spec)?,
            sequential_steps: sequential_steps(k, spec.group_size),
        })
    }

    pub fn to_text(&self) -> String {
        format!(
            "L={} k={} g={} n_conn={} max_depth={} sequential_steps={}",
            self.n_layers, self.k, self.g, self.n_conn, self.max_depth, self.sequential_steps
        )
    }
}

pub fn depth_report_text(rows: &[DepthRow]) -> String {
    let mut out = String::new();
    for r in rows {
        let _ = writeln!(out, "{}", r.to_text());
    }
    out
}

pub fn depth_report_csv(rows: &[DepthRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::State(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::State(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_formats() {
        let row = DepthRow::compute(16, 1, &ConnectionSpec::none()).unwrap();
        assert_eq!(row.to_text(), "L=16 k=1 g=1 n_conn=0 max_depth=16 sequential_steps=1");
        let csv = depth_report_csv(&[row]).unwrap();
        assert_eq!(csv, "L,k,g,n_conn,max_depth,sequential_steps\n16,1,1,0,16,1\n");
    }
}
