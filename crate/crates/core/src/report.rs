//! Serializable report types shared by the data, probing and rendering layers.

use serde::{Deserialize, Serialize};

use crate::stats::{CorrelationValue, Stars};

/// A `(layer, rank)` grid cell that contributed to a reported value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellSource {
    pub layer: u32,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCell {
    pub rho: f64,
    pub n: usize,
    pub p_value: Option<f64>,
    pub stars: Stars,
    /// Per-model coefficients that were averaged into `rho`, empty for
    /// plain data correlations.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_model: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<CellSource>,
}

impl From<CorrelationValue> for CorrelationCell {
    fn from(v: CorrelationValue) -> Self {
        CorrelationCell {
            rho: v.rho,
            n: v.n,
            p_value: v.p_value,
            stars: v.stars,
            per_model: Vec::new(),
            sources: Vec::new(),
        }
    }
}

/// A labelled matrix of correlations. `None` marks a cell that could not be
/// computed (too few rows, degenerate column, failed alignment).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub title: String,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub cells: Vec<Vec<Option<CorrelationCell>>>,
}

impl CorrelationReport {
    pub fn new(title: impl Into<String>, rows: Vec<String>, cols: Vec<String>) -> Self {
        let cells = vec![vec![None; cols.len()]; rows.len()];
        CorrelationReport { title: title.into(), rows, cols, cells }
    }

    pub fn get(&self, row: &str, col: &str) -> Option<&CorrelationCell> {
        let i = self.rows.iter().position(|r| r == row)?;
        let j = self.cols.iter().position(|c| c == col)?;
        self.cells[i][j].as_ref()
    }

    pub fn rho(&self, row: &str, col: &str) -> Option<f64> {
        self.get(row, col).map(|c| c.rho)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Matrix of coefficients with `NaN` for missing cells.
    pub fn rho_matrix(&self) -> Vec<Vec<f64>> {
        self.cells
            .iter()
            .map(|row| row.iter().map(|c| c.as_ref().map_or(f64::NAN, |c| c.rho)).collect())
            .collect()
    }
}
