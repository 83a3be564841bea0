//! CSV ingestion and plain-text matrix output.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::matrix::DataMatrix;

#[derive(Debug, Clone, Copy, Default)]
pub struct CsvOptions {
    /// Input has variables in rows and observations in columns. A leading
    /// non-numeric column then supplies the variable names.
    pub transpose: bool,
}

/// Reads an RFC-4180 CSV file of observations (rows) by variables
/// (columns). A first row containing any non-numeric cell is taken as
/// the header of column names.
pub fn load_csv(path: impl AsRef<Path>, opts: CsvOptions) -> Result<DataMatrix> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_csv(file, opts)
}

pub fn parse_csv(reader: impl Read, opts: CsvOptions) -> Result<DataMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let mut header: Option<Vec<String>> = None;
    let mut row_labels: Vec<String> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width: Option<usize> = None;
    let mut label_column = false;

    for (idx, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            row: e.position().map_or(idx + 1, |p| p.line() as usize),
            column: None,
            message: e.to_string(),
        })?;
        let line = record.position().map_or(idx + 1, |p| p.line() as usize);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }

        if idx == 0 && record.iter().any(|c| c.parse::<f64>().is_err()) {
            // a header row may leave the corner above a label column blank
            header = Some(record.iter().map(str::to_owned).collect());
            width = Some(record.len());
            continue;
        }
        match width {
            Some(w) if w != record.len() => {
                return Err(Error::Parse {
                    row: line,
                    column: None,
                    message: format!("expected {w} fields, found {}", record.len()),
                })
            }
            _ => width = Some(record.len()),
        }
        if rows.is_empty() && row_labels.is_empty() {
            label_column = opts.transpose
                && record.len() > 1
                && record[0].parse::<f64>().is_err()
                && record.iter().skip(1).all(|c| c.parse::<f64>().is_ok());
        }
        let mut values = Vec::with_capacity(record.len());
        for (j, cell) in record.iter().enumerate() {
            if j == 0 && label_column {
                row_labels.push(cell.to_owned());
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row: line,
                column: Some(j + 1),
                message: format!("not a number: {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: line,
                    column: Some(j + 1),
                    message: format!("non-finite value: {cell:?}"),
                });
            }
            values.push(v);
        }
        rows.push(values);
    }

    let n = rows.len();
    let p = rows.first().map_or(0, Vec::len);
    let values = DMatrix::from_fn(n, p, |i, k| rows[i][k]);
    if opts.transpose {
        let data = DataMatrix::new(values.transpose())?;
        if label_column {
            return data.with_column_names(row_labels);
        }
        return Ok(data);
    }
    let data = DataMatrix::new(values)?;
    match header {
        Some(names) => data.with_column_names(names),
        None => Ok(data),
    }
}

/// Writes `data` as CSV with 17 significant digits, so that
/// [`parse_csv`] recovers every value exactly.
pub fn write_csv(mut w: impl Write, data: &DataMatrix) -> std::io::Result<()> {
    if let Some(names) = data.column_names() {
        let mut hw = csv::Writer::from_writer(Vec::new());
        hw.write_record(names)?;
        w.write_all(&hw.into_inner().map_err(|e| e.into_error())?)?;
    }
    for row in data.values().row_iter() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

/// Tab-separated square matrix with row and column labels.
pub fn write_labeled_tsv(
    mut w: impl Write,
    labels: &[String],
    m: &DMatrix<f64>,
) -> std::io::Result<()> {
    for l in labels {
        write!(w, "\t{l}")?;
    }
    writeln!(w)?;
    for (i, row) in m.row_iter().enumerate() {
        write!(w, "{}", labels[i])?;
        for v in row.iter() {
            write!(w, "\t{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(s: &str) -> Result<DataMatrix> {
        parse_csv(s.as_bytes(), CsvOptions::default())
    }

    #[test]
    fn header_row_gives_names() {
        let d = parse("g1,g2\n1,2\n3,4\n5,6\n").unwrap();
        assert_eq!((d.n(), d.p()), (3, 2));
        assert_eq!(d.column_names().unwrap(), ["g1", "g2"]);
        assert_eq!(d.values()[(2, 1)], 6.0);
    }

    #[test]
    fn non_numeric_cell_is_located() {
        let err = parse("1,2\nabc,4\n5,6\n").unwrap_err();
        match err {
            Error::Parse { row: 2, column: Some(1), .. } => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ragged_row_is_located() {
        match parse("1,2\n3,4\n5,6,7\n").unwrap_err() {
            Error::Parse { row: 3, column: None, .. } => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn crlf_matches_lf() {
        let a = parse("a,b\n1.5,2\n3,4e-3\n").unwrap();
        let b = parse("a,b\r\n1.5,2\r\n3,4e-3\r\n").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_small_inputs_are_dimension_errors() {
        assert!(matches!(parse("1,2\n"), Err(Error::Dimension(_))));
        assert!(matches!(parse("1\n2\n3\n"), Err(Error::Dimension(_))));
    }

    #[test]
    fn transposed_layout_with_gene_labels() {
        let d = parse_csv(
            "gene,s1,s2,s3\nA,1,2,3\nB,4,5,7\n".as_bytes(),
            CsvOptions { transpose: true },
        )
        .unwrap();
        assert_eq!((d.n(), d.p()), (3, 2));
        assert_eq!(d.column_names().unwrap(), ["A", "B"]);
        assert_eq!(d.values()[(2, 1)], 7.0);
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = load_csv("/nonexistent/x.csv", CsvOptions::default()).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.csv"));
    }

    proptest! {
        #[test]
        fn write_then_parse_is_exact(
            vals in proptest::collection::vec(-1e300f64..1e300, 6..30),
            named in any::<bool>(),
        ) {
            let p = 3;
            let n = vals.len() / p;
            let m = DMatrix::from_fn(n, p, |i, k| vals[i * p + k]);
            let mut d = DataMatrix::new(m).unwrap();
            if named {
                d = d.with_column_names(vec!["x".into(), "y z".into(), "w,1".into()]).unwrap();
            }
            let mut buf = Vec::new();
            write_csv(&mut buf, &d).unwrap();
            let back = parse_csv(&buf[..], CsvOptions::default()).unwrap();
            prop_assert_eq!(back, d);
        }
    }
}
