use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetError, LabeledRecord};
use crate::codec::normalize_field;
use crate::schema::PacketSchema;

pub const SOURCE_ROW_COLUMN: &str = "source_row";

/// A row that could not be turned into a record, with the reason.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedRow {
    pub source_row: usize,
    pub column: String,
    pub reason: String,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub records: Vec<LabeledRecord>,
    pub rejects: Vec<RejectedRow>,
    /// Data rows read (accepted + rejected).
    pub total_rows: usize,
}

pub fn load_csv(path: impl AsRef<Path>, schema: &PacketSchema) -> Result<LoadReport, DatasetError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_csv_reader(file, schema, &path.display().to_string())
}

/// Parses CSV from any reader. `source` names the input in errors.
pub fn load_csv_reader<R: Read>(reader: R, schema: &PacketSchema, source: &str) -> Result<LoadReport, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
    let mut rows = rdr.records();
    let header: Vec<String> = match rows.next() {
        None => return Err(DatasetError::EmptyFile(source.to_string())),
        Some(h) => h?
            .iter()
            .enumerate()
            .map(|(i, c)| if i == 0 { c.trim_start_matches('\u{feff}').to_string() } else { c.to_string() })
            .collect(),
    };
    parse_rows(&header, rows, schema, source)
}

fn column_index(header: &[String], name: &str) -> Option<usize> {
    header
        .iter()
        .position(|h| h == name)
        .or_else(|| header.iter().position(|h| h.trim() == name.trim()))
}

fn parse_rows<I>(header: &[String], rows: I, schema: &PacketSchema, source: &str) -> Result<LoadReport, DatasetError>
where
    I: Iterator<Item = Result<csv::StringRecord, csv::Error>>,
{
    let mut field_cols = Vec::with_capacity(schema.fields.len());
    for f in &schema.fields {
        field_cols.push(column_index(header, f.column_name()).ok_or_else(|| DatasetError::MissingColumn(f.column_name().to_string()))?);
    }
    let label_col = column_index(header, &schema.label_column).ok_or_else(|| DatasetError::MissingColumn(schema.label_column.clone()))?;
    // files written by `write_records_csv` carry the original row index
    let row_col = header.iter().position(|h| h == SOURCE_ROW_COLUMN);

    let mut report = LoadReport::default();
    for (row_idx, row) in rows.enumerate() {
        let row = row?;
        report.total_rows += 1;
        let reject = |column: &str, reason: &str, detail: String| RejectedRow {
            source_row: row_idx,
            column: column.to_string(),
            reason: reason.to_string(),
            detail,
        };
        let Some(raw_label) = row.get(label_col) else {
            report.rejects.push(reject(&schema.label_column, "MissingValue", "row too short".into()));
            continue;
        };
        let Some(label) = schema.resolve_label(raw_label) else {
            report.rejects.push(reject(&schema.label_column, "UnknownLabel", format!("{raw_label:?}")));
            continue;
        };
        let mut fields = Vec::with_capacity(field_cols.len());
        let mut rejected = None;
        for (desc, &col) in schema.fields.iter().zip(&field_cols) {
            match row.get(col) {
                None => {
                    rejected = Some(reject(desc.column_name(), "MissingValue", "row too short".into()));
                    break;
                }
                Some(cell) => match normalize_field(cell, desc) {
                    Ok(_) => fields.push(cell.trim().to_string()),
                    Err(e) => {
                        rejected = Some(reject(desc.column_name(), e.reason(), e.to_string()));
                        break;
                    }
                },
            }
        }
        match rejected {
            Some(r) => report.rejects.push(r),
            None => report.records.push(LabeledRecord {
                fields,
                label,
                source_row: row_col.and_then(|c| row.get(c)).and_then(|v| v.parse().ok()).unwrap_or(row_idx),
            }),
        }
    }
    if report.total_rows == 0 {
        return Err(DatasetError::EmptyFile(source.to_string()));
    }
    Ok(report)
}

/// Writes records in the loader's dialect: `source_row`, one column per
/// field (named by its CSV column) and the label column holding class names.
pub fn write_records_csv(path: impl AsRef<Path>, records: &[LabeledRecord], schema: &PacketSchema) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![SOURCE_ROW_COLUMN.to_string()];
    header.extend(schema.fields.iter().map(|f| f.column_name().to_string()));
    header.push(schema.label_column.clone());
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.source_row.to_string()];
        row.extend(r.fields.iter().cloned());
        row.push(schema.label_names[r.label].clone());
        w.write_record(&row)?;
    }
    w.flush().map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}
