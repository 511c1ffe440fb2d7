//! Column-oriented observations of `(X, Y, A)` and their CSV form.
//!
//! The CSV header names the columns (`x,y,a`, any order; extra columns such
//! as a latent `h` are ignored on read). Values are written with 17
//! significant digits so that a write/read cycle is exact.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use thiserror::Error;

#[derive(Error, Debug)]
pub enum DataError {
    #[error("input is empty (no header line)")]
    Empty,

    #[error("missing required column `{0}` in header")]
    MissingColumn(&'static str),

    #[error("line {line}: expected {expected} fields, found {found}")]
    FieldCount {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("line {line}: column `{column}` value `{value}` is not a finite number")]
    BadNumber {
        line: usize,
        column: String,
        value: String,
    },

    #[error("columns have different lengths (x: {x}, y: {y}, a: {a})")]
    Ragged { x: usize, y: usize, a: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `n` observations of `(X, Y, A)`; `h` is the latent confounder, kept only
/// when a simulation is asked to expose it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub a: Vec<f64>,
    pub h: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(x: Vec<f64>, y: Vec<f64>, a: Vec<f64>) -> Result<Self, DataError> {
        if x.len() != y.len() || x.len() != a.len() {
            return Err(DataError::Ragged {
                x: x.len(),
                y: y.len(),
                a: a.len(),
            });
        }
        Ok(Self { x, y, a, h: None })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn read_csv<R: BufRead>(reader: R) -> Result<Self, DataError> {
        let mut lines = reader.lines().enumerate();
        let header = loop {
            match lines.next() {
                None => return Err(DataError::Empty),
                Some((_, line)) => {
                    let line = line?;
                    if !line.trim().is_empty() {
                        break line;
                    }
                }
            }
        };
        let names: Vec<String> = header.split(',').map(|s| s.trim().to_ascii_lowercase()).collect();
        let position = |name: &'static str| {
            names
                .iter()
                .position(|n| n == name)
                .ok_or(DataError::MissingColumn(name))
        };
        let (ix, iy, ia) = (position("x")?, position("y")?, position("a")?);

        let mut data = Dataset::default();
        for (idx, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let line_no = idx + 1;
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != names.len() {
                return Err(DataError::FieldCount {
                    line: line_no,
                    expected: names.len(),
                    found: fields.len(),
                });
            }
            let parse = |col: usize| -> Result<f64, DataError> {
                fields[col]
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| DataError::BadNumber {
                        line: line_no,
                        column: names[col].clone(),
                        value: fields[col].to_string(),
                    })
            };
            data.x.push(parse(ix)?);
            data.y.push(parse(iy)?);
            data.a.push(parse(ia)?);
        }
        Ok(data)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), DataError> {
        let with_h = self.h.is_some();
        writeln!(out, "{}", if with_h { "x,y,a,h" } else { "x,y,a" })?;
        let mut row = String::new();
        for i in 0..self.len() {
            row.clear();
            write!(row, "{},{},{}", fmt17(self.x[i]), fmt17(self.y[i]), fmt17(self.a[i])).unwrap();
            if let Some(h) = &self.h {
                write!(row, ",{}", fmt17(h[i])).unwrap();
            }
            writeln!(out, "{row}")?;
        }
        Ok(())
    }
}

/// Scientific notation with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reads_columns_in_any_order() {
        let csv = "a, x ,y\n1,2,3\n\n4,5,6\n";
        let d = Dataset::read_csv(csv.as_bytes()).unwrap();
        assert_eq!(d.x, vec![2.0, 5.0]);
        assert_eq!(d.y, vec![3.0, 6.0]);
        assert_eq!(d.a, vec![1.0, 4.0]);
    }

    #[test]
    fn reports_missing_column_and_bad_lines() {
        let err = Dataset::read_csv("x,y\n1,2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, DataError::MissingColumn("a")));
        assert!(err.to_string().contains("`a`"));

        let err = Dataset::read_csv("x,y,a\n1,2,3\n1,oops,3\n".as_bytes()).unwrap_err();
        match err {
            DataError::BadNumber { line, column, .. } => {
                assert_eq!(line, 3);
                assert_eq!(column, "y");
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = Dataset::read_csv("x,y,a\n1,2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, DataError::FieldCount { line: 2, .. }));
        assert!(matches!(Dataset::read_csv("".as_bytes()), Err(DataError::Empty)));
        assert!(Dataset::read_csv("x,y,a\nnan,1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn ragged_columns_rejected() {
        assert!(matches!(
            Dataset::new(vec![1.0], vec![], vec![1.0]),
            Err(DataError::Ragged { .. })
        ));
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_exact(rows in prop::collection::vec((any::<f64>(), any::<f64>(), any::<f64>()), 0..20)) {
            let rows: Vec<_> = rows.into_iter().filter(|(x, y, a)| x.is_finite() && y.is_finite() && a.is_finite()).collect();
            let d = Dataset::new(
                rows.iter().map(|r| r.0).collect(),
                rows.iter().map(|r| r.1).collect(),
                rows.iter().map(|r| r.2).collect(),
            ).unwrap();
            let mut buf = Vec::new();
            d.write_csv(&mut buf).unwrap();
            let back = Dataset::read_csv(buf.as_slice()).unwrap();
            prop_assert_eq!(back, d);
        }
    }
}
