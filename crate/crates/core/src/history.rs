use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Per-step training curves with named columns.
#[derive(Clone, Debug, PartialEq)]
pub struct History {
    columns: Vec<String>,
    rows: Vec<(usize, Vec<f64>)>,
}

impl History {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, step: usize, values: Vec<f64>) {
        debug_assert_eq!(values.len(), self.columns.len());
        self.rows.push((step, values));
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[(usize, Vec<f64>)] {
        &self.rows
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|(_, v)| v[idx]).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.rows.iter().all(|(_, v)| v.iter().all(|x| x.is_finite()))
    }

    /// Mean of a column over the first / last `n` rows.
    pub fn head_tail_mean(&self, name: &str, n: usize) -> Option<(f64, f64)> {
        let col = self.column(name)?;
        if col.is_empty() {
            return None;
        }
        let n = n.clamp(1, col.len());
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&col[..n]), mean(&col[col.len() - n..])))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (step, vals) in &self.rows {
            let _ = write!(out, "{step}");
            for v in vals {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
