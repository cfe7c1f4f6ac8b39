//! Renders a table row as `"{column} is {value}; ..."` text.

use serde::{Deserialize, Serialize};

use crate::ingest::{ColumnKind, ColumnSchema, Dataset, Row, Value};

/// Rendering of missing cells.
pub const MISSING_TEXT: &str = "N/A";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SerializationConfig {
    /// Maximum decimal places kept for float cells.
    pub float_precision: usize,
    /// Minimum decimal places shown for float cells (`6` renders as `6.0`).
    pub min_float_decimals: usize,
    pub pair_separator: String,
    pub terminator: String,
    pub name_separator_replacement: char,
}

impl Default for SerializationConfig {
    fn default() -> Self {
        SerializationConfig {
            float_precision: 6,
            min_float_decimals: 1,
            pair_separator: "; ".to_owned(),
            terminator: ".\n".to_owned(),
            name_separator_replacement: ' ',
        }
    }
}

/// Hyphens and underscores become spaces; nothing else changes.
pub fn normalize_column_name(name: &str) -> String {
    normalize_with(name, ' ')
}

fn normalize_with(name: &str, replacement: char) -> String {
    name.chars()
        .map(|c| if c == '-' || c == '_' { replacement } else { c })
        .collect()
}

/// Rounds to `max_decimals` places, then trims trailing zeros while keeping
/// at least `min_decimals` places.
pub fn format_float(v: f64, max_decimals: usize, min_decimals: usize) -> String {
    let min_decimals = min_decimals.min(max_decimals);
    let mut s = format!("{:.*}", max_decimals, v);
    if s.starts_with('-') && s[1..].bytes().all(|b| b == b'0' || b == b'.') {
        s.remove(0);
    }
    if let Some(dot) = s.find('.') {
        let keep = dot + 1 + min_decimals;
        while s.len() > keep && s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    } else if min_decimals > 0 {
        s.push('.');
        s.extend(std::iter::repeat_n('0', min_decimals));
    }
    s
}

pub fn render_value(cell: &Value, schema: &ColumnSchema, cfg: &SerializationConfig) -> String {
    match cell {
        Value::Missing => MISSING_TEXT.to_owned(),
        Value::Integer(v) if schema.kind == ColumnKind::Float => {
            format_float(*v as f64, cfg.float_precision, cfg.min_float_decimals)
        }
        Value::Integer(v) => v.to_string(),
        Value::Float(v) => format_float(*v, cfg.float_precision, cfg.min_float_decimals),
        Value::Boolean(true) => "True".to_owned(),
        Value::Boolean(false) => "False".to_owned(),
        Value::Text(s) => s.clone(),
    }
}

/// Serializes every non-target column of `row` in schema order.
pub fn serialize_features(row: &Row, d: &Dataset, cfg: &SerializationConfig) -> String {
    let target = d.target_index();
    let pairs: Vec<String> = d
        .columns
        .iter()
        .zip(&row.cells)
        .enumerate()
        .filter(|(i, _)| Some(*i) != target)
        .map(|(_, (col, cell))| {
            format!(
                "{} is {}",
                normalize_with(&col.name, cfg.name_separator_replacement),
                render_value(cell, col, cfg)
            )
        })
        .collect();
    let mut out = pairs.join(&cfg.pair_separator);
    out.push_str(&cfg.terminator);
    out
}
