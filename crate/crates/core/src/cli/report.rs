//! Aggregates run manifests into one CSV (or markdown) table, one row per
//! experiment, ordered by manifest path.

use super::manifest::Manifest;
use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("cannot read manifest {0}: {1}")]
    Read(PathBuf, String),
    #[error("cannot parse manifest {0}: {1}")]
    Parse(PathBuf, String),
}

pub struct ReportTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

const FIXED_COLUMNS: [&str; 5] = ["path", "experiment", "seed", "status", "pass"];

/// Loads the manifests (sorted by path) and lays out the fixed columns plus
/// the sorted union of all summary keys and verdict keys.
pub fn build_table(paths: &[PathBuf]) -> Result<ReportTable, ReportError> {
    let mut sorted: Vec<PathBuf> = paths.to_vec();
    sorted.sort();
    let mut manifests = Vec::with_capacity(sorted.len());
    for p in &sorted {
        let raw = fs::read_to_string(p).map_err(|e| ReportError::Read(p.clone(), e.to_string()))?;
        let m: Manifest =
            serde_json::from_str(&raw).map_err(|e| ReportError::Parse(p.clone(), e.to_string()))?;
        manifests.push((p.clone(), m));
    }
    let mut metric_keys: BTreeSet<String> = BTreeSet::new();
    let mut verdict_keys: BTreeSet<String> = BTreeSet::new();
    for (_, m) in &manifests {
        metric_keys.extend(m.summary.keys().cloned());
        verdict_keys.extend(m.verdicts.keys().cloned());
    }
    // a verdict mirrored as a numeric metric would duplicate the column
    verdict_keys.retain(|k| !metric_keys.contains(k));
    let mut columns: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    columns.extend(metric_keys.iter().cloned());
    columns.extend(verdict_keys.iter().cloned());
    let rows = manifests
        .iter()
        .map(|(p, m)| {
            let mut row = vec![
                p.display().to_string(),
                m.experiment.clone(),
                m.seed.to_string(),
                m.status.clone(),
                m.pass.to_string(),
            ];
            for k in &metric_keys {
                row.push(m.summary.get(k).map(|v| v.to_string()).unwrap_or_default());
            }
            for k in &verdict_keys {
                row.push(m.verdicts.get(k).map(|v| v.to_string()).unwrap_or_default());
            }
            row
        })
        .collect();
    Ok(ReportTable { columns, rows })
}

impl ReportTable {
    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| ");
        out.push_str(&self.columns.join(" | "));
        out.push_str(" |\n|");
        for _ in &self.columns {
            out.push_str(" --- |");
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str("| ");
            out.push_str(&row.join(" | "));
            out.push_str(" |\n");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_list_gives_header_only() {
        let table = build_table(&[]).unwrap();
        assert_eq!(table.columns, FIXED_COLUMNS.to_vec());
        assert!(table.rows.is_empty());
        assert_eq!(table.to_csv(), "path,experiment,seed,status,pass\n");
    }
}
