use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column names treated as a time index and dropped from the values.
const INDEX_COLUMNS: [&str; 4] = ["date", "time", "datetime", "timestamp"];

/// A multivariate series `[T × d]`; rows are time steps in file order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSeries {
    pub values: Array2<f64>,
    pub columns: Vec<String>,
    /// Values of the dropped index column, if the file had one.
    pub index: Option<Vec<String>>,
    /// Row offset of the first row within the original series.
    pub start_row: usize,
}

impl RawSeries {
    pub fn new(values: Array2<f64>, columns: Vec<String>) -> Result<Self> {
        if values.ncols() != columns.len() {
            return Err(Error::Dimension(format!(
                "{} columns of values for {} names",
                values.ncols(),
                columns.len()
            )));
        }
        Ok(Self {
            values,
            columns,
            index: None,
            start_row: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    /// Rows `[from, to)` as a new series that remembers its offset.
    pub fn slice_rows(&self, from: usize, to: usize) -> RawSeries {
        RawSeries {
            values: self.values.slice(ndarray::s![from..to, ..]).to_owned(),
            columns: self.columns.clone(),
            index: self.index.as_ref().map(|ix| ix[from..to].to_vec()),
            start_row: self.start_row + from,
        }
    }
}

/// Parses a comma-separated file with one header row.
///
/// Data rows are numbered from 1 in errors (the header is row 0).
pub fn parse_csv(bytes: &[u8]) -> Result<RawSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Structure(format!("unreadable header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(Error::Structure("empty file: no header row".into()));
    }
    let has_index = INDEX_COLUMNS.contains(&headers[0].to_ascii_lowercase().as_str());
    let first_value = usize::from(has_index);
    let columns = headers[first_value..].to_vec();
    if columns.is_empty() {
        return Err(Error::Structure("no value columns".into()));
    }

    let mut flat = Vec::new();
    let mut index = Vec::new();
    let mut rows = 0usize;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Structure(format!("row {row}: {e}")))?;
        if record.len() != headers.len() {
            return Err(Error::Structure(format!(
                "row {row} has {} fields, header has {}",
                record.len(),
                headers.len()
            )));
        }
        if has_index {
            index.push(record[0].to_string());
        }
        for (j, cell) in record.iter().enumerate().skip(first_value) {
            let column = &headers[j];
            if cell.is_empty() {
                return Err(Error::Parse {
                    row,
                    column: column.clone(),
                    message: "missing value".into(),
                });
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: column.clone(),
                message: format!("not a number: {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: column.clone(),
                    message: format!("non-finite value {cell:?}"),
                });
            }
            flat.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Structure("no data rows".into()));
    }
    let values = Array2::from_shape_vec((rows, columns.len()), flat)
        .map_err(|e| Error::Internal(e.to_string()))?;
    Ok(RawSeries {
        values,
        columns,
        index: has_index.then_some(index),
        start_row: 0,
    })
}

/// Serializes with shortest round-trip float formatting.
pub fn write_csv(series: &RawSeries) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = Vec::new();
    if series.index.is_some() {
        header.push("date");
    }
    header.extend(series.columns.iter().map(String::as_str));
    w.write_record(&header).map_err(|e| Error::Internal(e.to_string()))?;
    for (r, row) in series.values.rows().into_iter().enumerate() {
        let mut fields: Vec<String> = Vec::with_capacity(header.len());
        if let Some(ix) = &series.index {
            fields.push(ix[r].clone());
        }
        fields.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&fields).map_err(|e| Error::Internal(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minimal_file() {
        let s = parse_csv(b"a,b\n1,2\n3,4\n").unwrap();
        assert_eq!(s.values.dim(), (2, 2));
        assert_eq!(s.values[[1, 0]], 3.0);
        assert_eq!(s.columns, vec!["a", "b"]);
    }

    #[test]
    fn crlf_and_index_column() {
        let s = parse_csv(b"date,x,y\r\n2020-01-01,1.5,2\r\n2020-01-02,3,4e-1\r\n").unwrap();
        assert_eq!(s.channels(), 2);
        assert_eq!(s.values[[1, 1]], 0.4);
        assert_eq!(s.index.as_deref().unwrap()[0], "2020-01-01");
    }

    #[test]
    fn bad_cell_names_row_and_column() {
        match parse_csv(b"a,b\n1,x\n") {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 1);
                assert_eq!(column, "b");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_csv(b"a,b\n1,\n"), Err(Error::Parse { row: 1, .. })));
        assert!(matches!(parse_csv(b"a,b\n1,2\n1,inf\n"), Err(Error::Parse { row: 2, .. })));
    }

    #[test]
    fn structural_errors() {
        assert!(matches!(parse_csv(b""), Err(Error::Structure(_))));
        assert!(matches!(parse_csv(b"a,b\n"), Err(Error::Structure(_))));
        assert!(matches!(parse_csv(b"a,b\n1,2\n3\n"), Err(Error::Structure(_))));
        assert!(matches!(parse_csv(b"date\n2020\n"), Err(Error::Structure(_))));
    }

    proptest! {
        #[test]
        fn write_then_parse_is_identity(
            rows in 1usize..20,
            cols in 1usize..5,
            seed in prop::collection::vec(-1e6..1e6f64, 100),
        ) {
            let values = Array2::from_shape_fn((rows, cols), |(i, j)| seed[(i * cols + j) % seed.len()] / (1 + j) as f64);
            let names = (0..cols).map(|j| format!("c{j}")).collect();
            let s = RawSeries::new(values, names).unwrap();
            let back = parse_csv(write_csv(&s).unwrap().as_bytes()).unwrap();
            prop_assert_eq!(back.values, s.values);
        }
    }
}
