//! Ordinal encoding of feature columns for the tree ensemble.

use indexmap::IndexSet;
use serde::{Deserialize, Serialize};

use crate::ingest::{ColumnKind, ColumnSchema, Row, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FeatureEncoding {
    /// Numeric passthrough; missing cells become NaN.
    Numeric,
    /// Category codes by first appearance. Unseen values map to
    /// `categories.len()`, missing cells to `categories.len() + 1`.
    Categorical { categories: IndexSet<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedFeature {
    pub name: String,
    /// Column position in the source dataset.
    pub source: usize,
    pub encoding: FeatureEncoding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrdinalEncoder {
    pub features: Vec<EncodedFeature>,
}

impl OrdinalEncoder {
    /// Learns codes from `rows`, skipping the `exclude` column (the target).
    pub fn fit(rows: &[Row], schema: &[ColumnSchema], exclude: Option<usize>) -> Self {
        let features = schema
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != exclude)
            .map(|(i, col)| {
                let encoding = match col.kind {
                    ColumnKind::Integer | ColumnKind::Float => FeatureEncoding::Numeric,
                    ColumnKind::Text | ColumnKind::Boolean => FeatureEncoding::Categorical {
                        categories: rows
                            .iter()
                            .filter_map(|r| r.cells[i].label())
                            .collect(),
                    },
                };
                EncodedFeature {
                    name: col.name.clone(),
                    source: i,
                    encoding,
                }
            })
            .collect();
        OrdinalEncoder { features }
    }

    pub fn width(&self) -> usize {
        self.features.len()
    }

    pub fn transform_row(&self, row: &Row) -> Vec<f64> {
        self.features
            .iter()
            .map(|f| encode_cell(&row.cells[f.source], &f.encoding))
            .collect()
    }

    pub fn transform(&self, rows: &[Row]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.transform_row(r)).collect()
    }
}

fn encode_cell(cell: &Value, encoding: &FeatureEncoding) -> f64 {
    match encoding {
        FeatureEncoding::Numeric => cell.as_f64().unwrap_or(f64::NAN),
        FeatureEncoding::Categorical { categories } => match cell.label() {
            None => (categories.len() + 1) as f64,
            Some(l) => categories.get_index_of(&l).unwrap_or(categories.len()) as f64,
        },
    }
}

/// Fits an encoder on `rows` and returns it with the encoded matrix.
pub fn ordinal_encode(
    rows: &[Row],
    schema: &[ColumnSchema],
    exclude: Option<usize>,
) -> (OrdinalEncoder, Vec<Vec<f64>>) {
    let enc = OrdinalEncoder::fit(rows, schema, exclude);
    let x = enc.transform(rows);
    (enc, x)
}
