//! Columnar text format for measures: one atom per row, `weight,x1..xd,i`.

use std::io::{Read, Write};

use super::EmpiricalMeasure;
use crate::error::{Error, Result};

pub fn write_measure<W: Write>(m: &EmpiricalMeasure, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["weight".to_string()];
    header.extend((1..=m.dim()).map(|j| format!("x{j}")));
    header.push("i".into());
    w.write_record(&header)?;
    for (weight, x, alive) in m.atoms() {
        let mut row = vec![weight.to_string()];
        row.extend(x.iter().map(|v| v.to_string()));
        row.push(if alive { "1" } else { "0" }.into());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_measure<R: Read>(input: R) -> Result<EmpiricalMeasure> {
    let mut r = csv::Reader::from_reader(input);
    let dim = r
        .headers()?
        .len()
        .checked_sub(2)
        .filter(|d| *d > 0)
        .ok_or_else(|| Error::InvalidMeasure("expected columns weight,x1..xd,i".into()))?;
    let (mut xs, mut alive, mut weights) = (Vec::new(), Vec::new(), Vec::new());
    for (row, record) in r.records().enumerate() {
        let record = record?;
        let field = |j: usize| -> Result<f64> {
            record[j].trim().parse::<f64>().map_err(|e| {
                Error::InvalidMeasure(format!("row {row}, column {j}: {e}"))
            })
        };
        weights.push(field(0)?);
        for j in 0..dim {
            xs.push(field(1 + j)?);
        }
        alive.push(match record[dim + 1].trim() {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::InvalidMeasure(format!(
                    "row {row}: indicator must be 0 or 1, got {other:?}"
                )))
            }
        });
    }
    EmpiricalMeasure::new(dim, xs, alive, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let m = EmpiricalMeasure::new(
            2,
            vec![0.1, -3.25, 1.0 / 3.0, 7.0],
            vec![true, false],
            vec![0.3, 0.7],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_measure(&m, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("weight,x1,x2,i\n"));
        assert_eq!(read_measure(buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn rejects_bad_indicator() {
        let text = "weight,x1,i\n1,0.5,2\n";
        assert!(read_measure(text.as_bytes()).is_err());
    }
}
