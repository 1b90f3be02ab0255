//! Daily closing prices: CSV ingestion, log returns and the rolling-mean
//! baseline for squared returns.

use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;

use crate::dataset::{BucketSpec, TimeSeries};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PriceSeries {
    dates: Vec<NaiveDate>,
    closes: Vec<f64>,
}

impl PriceSeries {
    /// Sorts by date; rejects duplicate dates and non-positive closes.
    pub fn new(mut rows: Vec<(NaiveDate, f64)>) -> Result<Self> {
        if let Some((d, c)) = rows.iter().find(|(_, c)| !(c.is_finite() && *c > 0.0)) {
            return Err(Error::Invalid(format!("close {c} on {d} is not positive")));
        }
        rows.sort_by_key(|(d, _)| *d);
        if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Invalid(format!("duplicate date {}", w[0].0)));
        }
        let (dates, closes) = rows.into_iter().unzip();
        Ok(PriceSeries { dates, closes })
    }

    pub fn len(&self) -> usize {
        self.closes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.closes.is_empty()
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn closes(&self) -> &[f64] {
        &self.closes
    }
}

/// Reads a `date,close` CSV (ISO-8601 dates, rows in any order).
pub fn load_prices(path: &Path) -> Result<PriceSeries> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_prices(file, &path.display().to_string())
}

pub fn read_prices<R: Read>(input: R, origin: &str) -> Result<PriceSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };
    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if headers.len() != 2 || &headers[0] != "date" || &headers[1] != "close" {
        return Err(parse_err(
            1,
            format!("expected header `date,close`, got {headers:?}"),
        ));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let date = NaiveDate::parse_from_str(&record[0], "%Y-%m-%d")
            .map_err(|e| parse_err(line, format!("date {:?}: {e}", &record[0])))?;
        let close: f64 = record[1]
            .parse()
            .map_err(|e| parse_err(line, format!("close {:?}: {e}", &record[1])))?;
        if !(close.is_finite() && close > 0.0) {
            return Err(parse_err(line, format!("close {close} is not positive")));
        }
        rows.push((date, close));
    }
    PriceSeries::new(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReturnKind {
    Return,
    SquaredReturn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReturnSeries {
    pub values: Vec<f64>,
    pub kind: ReturnKind,
}

/// `y_i = ln(p_i / p_{i-1})`.
pub fn log_returns(prices: &PriceSeries) -> Result<ReturnSeries> {
    if prices.len() < 2 {
        return Err(Error::Invalid(
            "log returns need at least two prices".into(),
        ));
    }
    let values = prices
        .closes
        .windows(2)
        .map(|w| (w[1] / w[0]).ln())
        .collect();
    Ok(ReturnSeries {
        values,
        kind: ReturnKind::Return,
    })
}

impl ReturnSeries {
    pub fn squared(&self) -> ReturnSeries {
        ReturnSeries {
            values: self.values.iter().map(|y| y * y).collect(),
            kind: ReturnKind::SquaredReturn,
        }
    }

    /// Returns as a series without hidden states; the squaring for the
    /// quadratic-variation task happens on the target side.
    pub fn to_time_series(&self) -> TimeSeries {
        TimeSeries::observed(self.values.clone())
    }
}

/// Writes `date,log_return,squared_return`, dated by the later close.
pub fn write_derived<W: Write>(prices: &PriceSeries, out: W) -> Result<()> {
    let returns = log_returns(prices)?;
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Invalid(format!("derived CSV: {e}"));
    w.write_record(["date", "log_return", "squared_return"])
        .map_err(err)?;
    for (date, y) in prices.dates[1..].iter().zip(&returns.values) {
        w.write_record([date.to_string(), y.to_string(), (y * y).to_string()])
            .map_err(err)?;
    }
    w.flush()
        .map_err(|e| Error::Invalid(format!("derived CSV: {e}")))?;
    Ok(())
}

/// Bucket of the window's mean squared return.
pub fn naive_classify(window_squares: &[f64], spec: &BucketSpec) -> Result<usize> {
    if window_squares.is_empty() {
        return Err(Error::Invalid(
            "naive classifier needs a non-empty window".into(),
        ));
    }
    let mean = window_squares.iter().sum::<f64>() / window_squares.len() as f64;
    Ok(spec.bucket_of(mean))
}
