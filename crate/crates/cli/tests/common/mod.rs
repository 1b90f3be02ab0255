//! Test fixtures shared by the CLI integration targets.

#![allow(dead_code)]

use std::io::Write;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Daily closes with GARCH(1,1) log returns, on weekdays from 1927-12-30.
///
/// Stand-in for an index history: returns are nearly uncorrelated while
/// their squares cluster, which is the structure the squared-return task
/// relies on.
pub fn garch_closes(n: usize, seed: u64) -> Vec<(NaiveDate, f64)> {
    let (omega, alpha, beta) = (2.4e-6, 0.09, 0.89);
    let drift = 2e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut var = omega / (1.0 - alpha - beta);
    let mut y_prev: f64 = 0.0;
    let mut price = 17.66;
    let mut date = NaiveDate::from_ymd_opt(1927, 12, 30).unwrap();
    let mut out = Vec::with_capacity(n);
    out.push((date, price));
    while out.len() < n {
        var = omega + alpha * y_prev * y_prev + beta * var;
        let eps: f64 = StandardNormal.sample(&mut rng);
        let y = drift + var.sqrt() * eps;
        price *= y.exp();
        date += Duration::days(1);
        while matches!(date.weekday(), Weekday::Sat | Weekday::Sun) {
            date += Duration::days(1);
        }
        out.push((date, price));
        y_prev = y - drift;
    }
    out
}

pub fn write_closes(rows: &[(NaiveDate, f64)], path: &Path) {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).unwrap());
    writeln!(f, "date,close").unwrap();
    for (d, c) in rows {
        writeln!(f, "{},{}", d.format("%Y-%m-%d"), c).unwrap();
    }
}
