//! Accuracy, cross-entropy panels against realized and oracle targets,
//! pointwise tables and baseline classifiers.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{BucketSpec, SequenceDataset, Target};
use crate::error::{Error, Result};
use crate::market::naive_classify;
use crate::scalar::Scalar;
use crate::simulator::{target_distribution, OUConfig};
use crate::trainer::{argmax, cross_entropy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub mean_hpq: f64,
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_htq: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_htt: Option<f64>,
    pub baseline_uniform: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_naive: Option<f64>,
    pub n: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Invalid(format!("report JSON: {e}")))
    }
}

/// Reports for several splits, written as one JSON array.
pub fn save_reports(reports: &[EvalReport], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(reports)
        .map_err(|e| Error::Invalid(format!("report JSON: {e}")))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(
            what,
            format!("{a} predictions vs {b} targets"),
        ));
    }
    if a == 0 {
        return Err(Error::Invalid(format!("{what}: no instances")));
    }
    Ok(())
}

/// Fraction of instances whose argmax bucket (lowest index on ties) equals
/// the realized bucket.
pub fn categorical_accuracy(preds: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    same_len(preds.len(), targets.len(), "categorical_accuracy")?;
    let mut hits = 0usize;
    for (q, &t) in preds.iter().zip(targets) {
        if t >= q.len() {
            return Err(Error::shape(
                "categorical_accuracy",
                format!("bucket {t} with {} classes", q.len()),
            ));
        }
        hits += usize::from(argmax(q) == t);
    }
    Ok(hits as f64 / preds.len() as f64)
}

fn one_hot(k: usize, j: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[j] = 1.0;
    v
}

/// Exact bucket probabilities `T_i` of each window's target given the
/// aligned hidden state; `None` when the data carries no hidden states.
pub fn oracle_targets<T: Scalar>(
    data: &SequenceDataset<T>,
    ou: &OUConfig,
    buckets: &BucketSpec,
) -> Result<Option<Vec<Vec<f64>>>> {
    match data.oracle_h() {
        None => Ok(None),
        Some(h) => h
            .iter()
            .map(|&hv| target_distribution(hv, ou, buckets))
            .collect::<Result<Vec<_>>>()
            .map(Some),
    }
}

/// Means of `H(P_i, Q_i)` and, with an oracle, `H(T_i, Q_i)` and `H(T_i, T_i)`.
/// Baseline fields start at the uniform value `1/k`.
pub fn entropy_panel(
    split: &str,
    preds: &[Vec<f64>],
    targets: &[usize],
    oracle: Option<&[Vec<f64>]>,
) -> Result<EvalReport> {
    same_len(preds.len(), targets.len(), "entropy_panel")?;
    let k = preds[0].len();
    let n = preds.len() as f64;
    let mut hpq = 0.0;
    for (q, &t) in preds.iter().zip(targets) {
        if q.len() != k || t >= k {
            return Err(Error::shape(
                "entropy_panel",
                format!("instance with {} classes", q.len()),
            ));
        }
        hpq += cross_entropy(&one_hot(k, t), q)?;
    }
    let (mut htq, mut htt) = (None, None);
    if let Some(oracle) = oracle {
        same_len(preds.len(), oracle.len(), "entropy_panel oracle")?;
        let mut sq = 0.0;
        let mut st = 0.0;
        for (q, t) in preds.iter().zip(oracle) {
            sq += cross_entropy(t, q)?;
            st += cross_entropy(t, t)?;
        }
        htq = Some(sq / n);
        htt = Some(st / n);
    }
    Ok(EvalReport {
        split: split.to_string(),
        mean_hpq: hpq / n,
        accuracy: categorical_accuracy(preds, targets)?,
        mean_htq: htq,
        mean_htt: htt,
        baseline_uniform: 1.0 / k as f64,
        baseline_naive: None,
        n: preds.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointwiseRow {
    pub instance_index: usize,
    pub bucket: usize,
    pub h: f64,
    pub q: f64,
    pub t: f64,
}

/// One row per (instance, bucket) pairing the hidden state with predicted
/// and oracle probabilities.
pub fn pointwise_table(
    h_values: &[f64],
    preds: &[Vec<f64>],
    oracle: Option<&[Vec<f64>]>,
) -> Result<Vec<PointwiseRow>> {
    let oracle = oracle
        .ok_or_else(|| Error::Invalid("pointwise table needs oracle distributions".into()))?;
    same_len(preds.len(), h_values.len(), "pointwise_table")?;
    same_len(preds.len(), oracle.len(), "pointwise_table oracle")?;
    let mut rows = Vec::with_capacity(preds.len() * preds[0].len());
    for (i, ((&h, q), t)) in h_values.iter().zip(preds).zip(oracle).enumerate() {
        if q.len() != t.len() {
            return Err(Error::shape(
                "pointwise_table",
                format!("instance {i}: {} vs {} buckets", q.len(), t.len()),
            ));
        }
        for (j, (&qj, &tj)) in q.iter().zip(t).enumerate() {
            rows.push(PointwiseRow {
                instance_index: i,
                bucket: j,
                h,
                q: qj,
                t: tj,
            });
        }
    }
    Ok(rows)
}

pub fn write_pointwise<W: Write>(rows: &[PointwiseRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Invalid(format!("pointwise CSV: {e}")))?;
    }
    w.flush()
        .map_err(|e| Error::Invalid(format!("pointwise CSV: {e}")))
}

pub fn save_pointwise(rows: &[PointwiseRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_pointwise(rows, std::io::BufWriter::new(file))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Baselines {
    pub uniform: f64,
    pub naive: Option<f64>,
}

/// Predicted buckets of the rolling-mean classifier: each window's mean
/// squared observation placed in `buckets`.
pub fn naive_predictions<T: Scalar>(
    data: &SequenceDataset<T>,
    buckets: &BucketSpec,
) -> Result<Vec<usize>> {
    (0..data.len())
        .map(|i| {
            let sq: Vec<f64> = data.raw_window(i).iter().map(|y| y * y).collect();
            naive_classify(&sq, buckets)
        })
        .collect()
}

/// Uniform baseline `1/k` and, when `naive` is set, the accuracy of the
/// rolling-mean classifier, which only makes sense for the squared task.
pub fn baseline_report<T: Scalar>(
    data: &SequenceDataset<T>,
    buckets: &BucketSpec,
    target: Target,
    naive: bool,
) -> Result<Baselines> {
    let uniform = 1.0 / buckets.k() as f64;
    if !naive {
        return Ok(Baselines {
            uniform,
            naive: None,
        });
    }
    if target != Target::NextSquare {
        return Err(Error::Invalid(
            "the naive baseline applies to the squared-return task only".into(),
        ));
    }
    if data.is_empty() {
        return Err(Error::Invalid("naive baseline on an empty split".into()));
    }
    let pred = naive_predictions(data, buckets)?;
    let hits = pred
        .iter()
        .zip(data.targets())
        .filter(|(a, b)| a == b)
        .count();
    Ok(Baselines {
        uniform,
        naive: Some(hits as f64 / data.len() as f64),
    })
}

/// Converts model output rows to `f64` vectors.
pub fn to_f64<T: Scalar>(preds: &[Vec<T>]) -> Vec<Vec<f64>> {
    preds
        .iter()
        .map(|q| q.iter().map(|v| v.as_f64()).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        let preds = vec![one_hot(3, 0), one_hot(3, 2), one_hot(3, 1)];
        assert_eq!(categorical_accuracy(&preds, &[0, 2, 1]).unwrap(), 1.0);
        let u = vec![vec![1.0 / 4.0; 4]; 8];
        let acc = categorical_accuracy(&u, &[0, 1, 2, 3, 0, 1, 2, 3]).unwrap();
        assert_eq!(acc, 0.25);
        assert!(categorical_accuracy(&u, &[0]).is_err());
    }

    #[test]
    fn panel_with_oracle_predictions() {
        let t = vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.3, 0.1]];
        let r = entropy_panel("test", &t, &[1, 0], Some(&t)).unwrap();
        assert!((r.mean_htq.unwrap() - r.mean_htt.unwrap()).abs() < 1e-15);
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.n, 2);
    }

    #[test]
    fn uniform_panel_is_ln_k() {
        let q = vec![vec![1.0 / 7.0; 7]; 5];
        let r = entropy_panel("x", &q, &[0, 1, 2, 3, 4], None).unwrap();
        assert!((r.mean_hpq - 7f64.ln()).abs() < 1e-12);
        assert!(r.mean_htq.is_none());
        let json = r.to_json().unwrap();
        assert!(!json.contains("mean_htq") && !json.contains("baseline_naive"));
    }

    #[test]
    fn pointwise_rows() {
        let rows = pointwise_table(&[0.4], &[vec![0.3, 0.7]], Some(&[vec![0.5, 0.5]])).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].bucket, 1);
        assert_eq!(rows[1].q, 0.7);
        assert!(pointwise_table(&[0.4], &[vec![0.3, 0.7]], None).is_err());
        let mut buf = Vec::new();
        write_pointwise(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("instance_index,bucket,h,q,t\n0,0,0.4,0.3,0.5\n"));
    }
}
