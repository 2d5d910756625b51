use std::io::Read;
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};

use super::RawSeries;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const DATETIME_FORMATS: [&str; 4] = ["%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M:%S", "%Y/%m/%d %H:%M"];

/// Seconds since the Unix epoch for a date/time cell, or the number itself
/// when the cell is numeric.
pub fn parse_timestamp(s: &str) -> Option<f64> {
    let s = s.trim();
    for f in DATETIME_FORMATS {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, f) {
            return Some(t.and_utc().timestamp() as f64);
        }
    }
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Some(d.and_hms_opt(0, 0, 0)?.and_utc().timestamp() as f64);
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Loads a CSV whose first column is a timestamp and the rest numeric.
pub fn load_csv(path: impl AsRef<Path>) -> Result<RawSeries> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    read_csv(f)
}

pub fn read_csv<R: Read>(reader: R) -> Result<RawSeries> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?.clone();
    if header.len() < 2 {
        return Err(Error::Parse {
            line: 1,
            msg: "need a timestamp column and at least one value column".into(),
        });
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    let v = names.len();
    let mut ts = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        if rec.len() != v + 1 {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", v + 1, rec.len()),
            });
        }
        let t = parse_timestamp(&rec[0]).ok_or_else(|| Error::Parse {
            line,
            msg: format!("unparseable timestamp `{}`", &rec[0]),
        })?;
        if let Some(&prev) = ts.last() {
            if t <= prev {
                return Err(Error::Parse {
                    line,
                    msg: format!("timestamp `{}` does not increase", &rec[0]),
                });
            }
        }
        ts.push(t);
        for (j, cell) in rec.iter().skip(1).enumerate() {
            let x: f64 = cell.parse().ok().filter(|x: &f64| x.is_finite()).ok_or_else(|| Error::Parse {
                line,
                msg: format!("column `{}`: bad value `{cell}`", names[j]),
            })?;
            values.push(x);
        }
    }
    let n = ts.len();
    Ok(RawSeries {
        timestamps: Some(ts),
        values: Tensor::new(vec![n, v], values)?,
        names,
    })
}
