//! Entity/attribute tables, dump ingestion, train/evaluation splits and the
//! natural correlation structure of the data.

mod splits;
mod table;
mod wikidata;

pub use splits::{build_inter_eval_set, sample_train_splits, InterEvalConfig, SplitSpec};
pub use table::{default_meta, AttributeMeta, AttributeTable, EntityClass, Transform, LABELS_HEADER, TABLE_HEADER};
pub use wikidata::{ingest_wikidata_dump, parse_year, IngestReport};

use thiserror::Error;

use crate::report::{CorrelationCell, CorrelationReport};
use crate::stats::{self, StatsError, Stars};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("non-finite value for ({entity}, {attribute})")]
    NonFinite { entity: String, attribute: String },
    #[error("missing value for ({entity}, {attribute})")]
    MissingValue { entity: String, attribute: String },
    #[error("table format error at line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("insufficient entities for {what}: {found} (need {need})")]
    InsufficientEntities { what: String, found: usize, need: usize },
    #[error("unknown attribute {0:?}")]
    UnknownAttribute(String),
    #[error("correlation for ({0}, {1}): {2}")]
    Stats(String, String, #[source] StatsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Pairwise-complete Spearman matrix over `attributes`.
///
/// Each off-diagonal cell uses the entities that carry both attributes; the
/// diagonal is 1 by definition with `n` = entities carrying the attribute.
/// Pairs with fewer than three shared entities are left empty.
pub fn natural_correlation_matrix(table: &AttributeTable, attributes: &[&str]) -> Result<CorrelationReport> {
    let labels: Vec<String> = attributes.iter().map(|s| s.to_string()).collect();
    let mut report = CorrelationReport::new("natural correlations", labels.clone(), labels);
    for (i, a) in attributes.iter().enumerate() {
        if table.meta(a).is_none() {
            return Err(DataError::UnknownAttribute(a.to_string()));
        }
        let n = table.entities_with(a).len();
        report.cells[i][i] = Some(CorrelationCell {
            rho: 1.0,
            n,
            p_value: Some(0.0),
            stars: Stars::Three,
            per_model: Vec::new(),
            sources: Vec::new(),
        });
        for (j, b) in attributes.iter().enumerate().skip(i + 1) {
            let shared: Vec<&str> = table.entities_with(a).into_iter().filter(|e| table.get(e, b).is_some()).collect();
            if shared.len() < 3 {
                continue;
            }
            let xa = table.column(a, &shared)?;
            let xb = table.column(b, &shared)?;
            let value = stats::spearman(&xa, &xb).map_err(|e| DataError::Stats(a.to_string(), b.to_string(), e))?;
            report.cells[i][j] = Some(value.into());
            report.cells[j][i] = Some(value.into());
        }
    }
    Ok(report)
}
